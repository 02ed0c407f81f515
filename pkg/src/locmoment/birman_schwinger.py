"""Birman-Schwinger operators, eigenvalue curves, crossing counts, spectral shifts.

Conventions: H_xi = H0 - xi V with V >= 0, so every eigenvalue curve E_n(xi)
decreases with slope -<V psi_n, psi_n>, and

    K(z) = V^{1/2} (H - z)^{-1} V^{1/2}      (on the support of V)

satisfies K_xi = (K_0^{-1} - xi)^{-1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, NumericalError
from .model import OperatorHandle
from .resolvent import EnergyPoint, Resolvent

EIG_TOL = 1e-9


def _as_point(z) -> EnergyPoint:
    if isinstance(z, EnergyPoint):
        return z
    return EnergyPoint(float(np.real(z)), float(np.imag(z)))


def _shifted(H: OperatorHandle, V, coeff: float) -> OperatorHandle:
    """H + coeff * diag(V) sharing geometry with H."""
    if coeff == 0.0:
        return H
    M = (H.matrix + sp.diags(coeff * np.asarray(V, dtype=float))).tocsr()
    return OperatorHandle(M, H.free, H.coords, H.spec, H.realization, H.bumps, H.period, H.sites, H.box)


@dataclass(frozen=True, eq=False)
class BSOperator:
    base: OperatorHandle
    V: np.ndarray
    mask: np.ndarray
    K: np.ndarray
    z: EnergyPoint


def bs_build(H_hat: OperatorHandle, V, z) -> BSOperator:
    """K = V^{1/2} (H_hat - z)^{-1} V^{1/2} restricted to supp V.

    Parameters
    ----------
    H_hat : OperatorHandle
    V : array_like
        Non-negative potential on the grid.
    z : EnergyPoint or complex
        Real z must be at distance > 1e-9 from the spectrum.
    """
    V = np.asarray(V, dtype=float)
    if np.any(V < 0):
        raise ConfigError("V must be non-negative")
    mask = np.flatnonzero(V > 0)
    if mask.size == 0:
        raise ConfigError("V vanishes identically")
    z = _as_point(z)
    ev = la.eigvalsh(H_hat.dense()) if z.eps == 0.0 and H_hat.n <= 2000 else None
    R = Resolvent(H_hat, z, ev)
    root = np.sqrt(V[mask])
    K = root[:, None] * R.columns(mask)[mask] * root[None, :]
    return BSOperator(H_hat, V, mask, K, z)


def bs_relation_residual(K0: BSOperator, xi: float, H: OperatorHandle | None = None) -> float:
    """Relative residual between (K0^{-1} - xi)^{-1} and K re-solved with H - xi V.

    Raises
    ------
    NumericalError
        If K0 is numerically singular on the mask (condition number > 1e13).
    """
    H = K0.base if H is None else H
    cond = np.linalg.cond(K0.K)
    if not np.isfinite(cond) or cond > 1e13:
        raise NumericalError(f"K0 numerically singular on the mask (condition {cond:.3g})")
    m = K0.mask.size
    # (K^{-1} - xi)^{-1} = (1 - xi K)^{-1} K
    lhs = np.linalg.solve(np.eye(m) - xi * K0.K, K0.K)
    rhs = bs_build(_shifted(H, K0.V, -xi), K0.V, K0.z).K
    return float(np.linalg.norm(lhs - rhs, 2) / np.linalg.norm(rhs, 2))


# ---------------------------------------------------------------------------
# eigenvalue curves


@dataclass(frozen=True, eq=False)
class EigenCurveSet:
    """E_n(xi) along H0 - xi V, labelled by continuation.

    ``slopes`` are -<V psi_n, psi_n>; ``fd_slopes`` central differences;
    ``flagged`` marks points excluded from derivative checks (near-crossing,
    or a slope too small to resolve by differencing in double precision).
    """

    xi: np.ndarray
    values: np.ndarray      # (len(xi), n)
    slopes: np.ndarray
    fd_slopes: np.ndarray
    flagged: np.ndarray
    vectors: list = field(repr=False, default=None)

    def max_relative_fd_error(self) -> float:
        ok = ~self.flagged
        if not ok.any():
            return 0.0
        err = np.abs(self.fd_slopes - self.slopes) / np.abs(self.slopes)
        return float(err[ok].max())

    def rows(self):
        out = []
        for i, x in enumerate(self.xi):
            for n, e in enumerate(self.values[i]):
                out.append((float(x), n, float(e)))
        return out


def eigencurves(H0: OperatorHandle, V, xi_grid, fd_step: float = 1e-5, gap_tol: float = 1e-3,
                max_refine: int = 8, keep_vectors: bool = False) -> EigenCurveSet:
    """Eigenvalue curves of H0 - xi V with Feynman-Hellmann slopes.

    The grid is refined until consecutive eigenvalue sets move by less than
    half the minimal gap; curves are matched across grid points by maximal
    eigenvector overlap (assignment problem). A point is flagged when its gap
    is below ``gap_tol`` or when the central difference is not a reliable
    reference there (roundoff or truncation above 1e-7 of the slope).
    """
    M = H0.dense()
    V = np.asarray(V, dtype=float)
    Vd = np.diag(V) if V.ndim == 1 else V
    normM = np.abs(la.eigvalsh(M)).max()
    xi = np.sort(np.asarray(xi_grid, dtype=float))

    cache = {}

    def solve(x):
        if x not in cache:
            cache[x] = la.eigh(M - x * Vd)
        return cache[x]

    for _ in range(max_refine):
        eig = [solve(x) for x in xi]
        new = []
        for k in range(xi.size - 1):
            e0, e1 = eig[k][0], eig[k + 1][0]
            gap = np.min(np.diff(e0)) if e0.size > 1 else np.inf
            if np.max(np.abs(e1 - e0)) > 0.5 * gap:
                new.append(0.5 * (xi[k] + xi[k + 1]))
        if not new:
            break
        xi = np.sort(np.concatenate([xi, new]))
    # the last refinement may have added points that were not solved yet
    eig = [solve(x) for x in xi]
    n = M.shape[0]
    values = np.empty((xi.size, n))
    slopes = np.empty((xi.size, n))
    fd = np.empty((xi.size, n))
    flagged = np.zeros((xi.size, n), dtype=bool)
    vecs = []
    perm = np.arange(n)
    prev = None
    eps = np.finfo(float).eps
    for k, x in enumerate(xi):
        w, U = eig[k]
        if prev is not None:
            overlap = np.abs(prev.conj().T @ U)
            _, perm = linear_sum_assignment(-overlap)
        w, U = w[perm], U[:, perm]
        order_sorted = np.argsort(w)
        values[k] = w
        slopes[k] = -np.real(np.einsum("in,ij,jn->n", U.conj(), Vd, U))
        wp = la.eigvalsh(M - (x + fd_step) * Vd)
        wm = la.eigvalsh(M - (x - fd_step) * Vd)
        rank = np.empty(n, dtype=int)
        rank[order_sorted] = np.arange(n)
        fd[k] = (wp[rank] - wm[rank]) / (2 * fd_step)
        # Richardson estimate of the central-difference truncation error
        wp2 = la.eigvalsh(M - (x + 2 * fd_step) * Vd)
        wm2 = la.eigvalsh(M - (x - 2 * fd_step) * Vd)
        trunc = np.abs((wp2[rank] - wm2[rank]) / (4 * fd_step) - fd[k]) / 3
        ws = w[order_sorted]
        gaps = np.full(n, np.inf)
        if n > 1:
            d = np.diff(ws)
            g = np.minimum(np.concatenate([[np.inf], d]), np.concatenate([d, [np.inf]]))
            gaps[order_sorted] = g
        roundoff = 8 * eps * normM / fd_step
        flagged[k] = (gaps < gap_tol) | (np.maximum(roundoff, trunc) > 1e-7 * np.abs(slopes[k]))
        prev = U
        if keep_vectors:
            vecs.append(U)
    return EigenCurveSet(xi, values, slopes, fd, flagged, vecs if keep_vectors else None)


# ---------------------------------------------------------------------------
# counting


def count_below(H: OperatorHandle, E: float, strict: bool = False) -> int:
    ev = la.eigvalsh(H.dense())
    return int(np.sum(ev < E) if strict else np.sum(ev <= E))


@dataclass(frozen=True)
class CrossingCount:
    count: int
    bs_count: int

    @property
    def agree(self) -> bool:
        return self.count == self.bs_count


def crossing_count(H: OperatorHandle, alpha, E: float, a: float, b: float) -> CrossingCount:
    """tr P_{<=E}(H_a) - tr P_{<=E}(H_b) where H_c has eta_alpha = c.

    Cross-validated by the Birman-Schwinger count: the eigenvalues kappa of
    K = U^{1/2} (H_hi - E)^{-1} U^{1/2} (with lam absorbed) above 1/(lam |b - a|)
    are exactly the couplings at which an eigenvalue crosses E.
    """
    Ha, Hb = H.with_coupling(alpha, a), H.with_coupling(alpha, b)
    eva, evb = la.eigvalsh(Ha.dense()), la.eigvalsh(Hb.dense())
    for ev, c in ((eva, a), (evb, b)):
        if np.min(np.abs(ev - E)) < EIG_TOL:
            raise ConfigError(f"E = {E!r} is an eigenvalue of H at coupling {c!r}; perturb E")
    count = int(np.sum(eva <= E) - np.sum(evb <= E))
    lam = H.disorder
    if a == b or lam == 0.0:
        return CrossingCount(count, 0)
    lo, hi = min(a, b), max(a, b)
    V = lam * H.bump(alpha)
    K = bs_build(H.with_coupling(alpha, hi), V, EnergyPoint(float(E), 0.0)).K
    kappa = la.eigvalsh(K)
    n_cross = int(np.sum(kappa > 1.0 / (hi - lo)))
    return CrossingCount(count, n_cross if a < b else -n_cross)


# ---------------------------------------------------------------------------
# spectral shift


@dataclass(frozen=True, eq=False)
class ShiftReport:
    t: np.ndarray            # piece boundaries 0 = t_0 < ... < t_m = 1
    xi: np.ndarray           # value on each piece
    breakpoints: np.ndarray
    integral: float
    s: float

    def rows(self):
        return [(float(t0), int(v)) for t0, v in zip(self.t[:-1], self.xi)]


def _counts(M, Vd, Ud, t, E):
    A = M + t * Vd
    n1 = int(np.sum(la.eigvalsh(A) < E))
    n2 = int(np.sum(la.eigvalsh(A + Ud) < E))
    return n1, n2


def spectral_shift(H_hat: OperatorHandle, V, U, E: float, s: float, t_grid=None, tol: float = 1e-6) -> ShiftReport:
    """xi(t, E) = tr[P(H_t < E) - P(H_t + U < E)] for H_t = H_hat + t V on [0, 1].

    Jumps of each eigenvalue count are located by bisection to width ``tol``
    and placed at the bracket midpoint; the integral of |xi|^s is then an
    exact sum over the pieces.
    """
    d = H_hat.spec.dimension
    if not 0.0 < s < min(2.0 / d, 0.5):
        raise ConfigError("spectral_shift needs 0 < s < min(2/d, 1/2)")
    U = np.asarray(U, dtype=float)
    if np.any(U < 0):
        raise ConfigError("U must be non-negative")
    M = H_hat.dense()
    Vd, Ud = np.diag(np.asarray(V, dtype=float)), np.diag(U)
    t_grid = np.linspace(0.0, 1.0, 33) if t_grid is None else np.unique(np.concatenate([[0.0, 1.0], t_grid]))
    cache = {}

    def counts(t):
        if t not in cache:
            cache[t] = _counts(M, Vd, Ud, t, E)
        return cache[t]

    breaks = []

    def locate(a, b):
        ca, cb = counts(a), counts(b)
        if ca == cb:
            return
        if b - a <= tol:
            breaks.append(0.5 * (a + b))
            return
        m = 0.5 * (a + b)
        locate(a, m)
        locate(m, b)

    for a, b in zip(t_grid[:-1], t_grid[1:]):
        locate(a, b)
    bp = np.array(sorted(set(breaks)))
    edges = np.concatenate([[0.0], bp, [1.0]])
    mids = 0.5 * (edges[1:] + edges[:-1])
    # evaluate xi on each piece at a grid point inside it when possible
    xi = np.empty(mids.size, dtype=int)
    for i, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        inside = [t for t in cache if lo < t < hi]
        t = inside[0] if inside else mids[i]
        n1, n2 = counts(t)
        xi[i] = n1 - n2
    integral = float(np.sum(np.abs(xi) ** s * np.diff(edges)))
    return ShiftReport(edges, xi, bp, integral, s)


def shift_via_bs(H_t: OperatorHandle, U, E: float) -> int:
    """Number of eigenvalues of U^{1/2}(H_t - E)^{-1}U^{1/2} in (-inf, -1]."""
    K = bs_build(H_t, U, EnergyPoint(float(E), 0.0)).K
    return int(np.sum(la.eigvalsh(K) <= -1.0))


def shift_lp_norm(H: OperatorHandle, alpha, E_plus: float, p: float = 1.0, lam: float | None = None) -> float:
    """Integral over [E_min, E_plus] of S(E)^p, S = tr P_{<=E}(H_{eta_a=0}) - tr P_{<=E}(H_{eta_a=1}).

    E_min is the bottom of the spectrum of H_{eta_a=0}, below which S vanishes.
    The integral is exact over the piecewise-constant profile.
    """
    if p < 1:
        raise ConfigError("p must be >= 1")
    lam = H.disorder if lam is None else float(lam)
    j = H.center_index(alpha)
    u = H.bump(alpha)
    base = H.dense() - np.diag(H.disorder * H.realization.eta[j] * u)
    ev0 = la.eigvalsh(base)
    ev1 = la.eigvalsh(base + lam * np.diag(u))
    E_min = ev0[0]
    if E_plus <= E_min:
        return 0.0
    events = np.sort(np.concatenate([ev0, ev1, [E_plus]]))
    events = events[(events >= E_min) & (events <= E_plus)]
    total = 0.0
    for lo, hi in zip(events[:-1], events[1:]):
        if hi <= lo:
            continue
        mid = 0.5 * (lo + hi)
        S = np.sum(ev0 <= mid) - np.sum(ev1 <= mid)
        total += float(abs(S) ** p * (hi - lo))
    return total


def shift_profile(H: OperatorHandle, alpha, E_grid, lam: float | None = None) -> np.ndarray:
    """S_{alpha,lam}(E) on a grid of energies."""
    lam = H.disorder if lam is None else float(lam)
    j = H.center_index(alpha)
    u = H.bump(alpha)
    base = H.dense() - np.diag(H.disorder * H.realization.eta[j] * u)
    ev0 = la.eigvalsh(base)
    ev1 = la.eigvalsh(base + lam * np.diag(u))
    E_grid = np.asarray(E_grid, dtype=float)
    return (np.sum(ev0[None, :] <= E_grid[:, None], axis=1) - np.sum(ev1[None, :] <= E_grid[:, None], axis=1))
