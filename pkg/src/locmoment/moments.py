"""Level sets, fractional moments and their tails.

* ``boole_tail``: exact level-set measure of a pole sum, solved pole by pole
  in offset coordinates so that tiny residues keep full relative accuracy;
* ``fm_energy_integral``: energy integral of ||chi_x G chi_y||^s with
  pole-adapted substitutions and mesh halving;
* ``fm_disorder``, ``weak_l1_tail``, ``holder_scan``: Monte-Carlo over
  disorder, one counter-based stream per realization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize as opt
import scipy.stats as st

from .correlators import SpectralData
from .errors import ConfigError, ConvergenceError
from .model import ModelSpec, build_hamiltonian, sample_disorder
from .parallel import ordered_map
from .resolvent import EnergyPoint, Resolvent, _block_norms, linear_fit

MOM_GROUPS = 16
N_BOOT = 2000


# ---------------------------------------------------------------------------
# estimators


@dataclass(frozen=True, eq=False)
class MomentEstimate:
    s: float
    z: EnergyPoint | None
    N: int
    mean: float
    ci: tuple
    estimator: str
    samples: np.ndarray = field(default=None, repr=False)

    def row(self) -> tuple:
        E = self.z.E if self.z is not None else float("nan")
        eps = self.z.eps if self.z is not None else float("nan")
        return (self.s, E, eps, self.N, self.mean, self.ci[0], self.ci[1], self.estimator)


def _group_bounds(N: int, groups: int) -> np.ndarray:
    sizes = np.full(groups, N // groups)
    sizes[: N % groups] += 1
    return np.concatenate([[0], np.cumsum(sizes)])


def median_of_means(values, groups: int = MOM_GROUPS, axis: int = -1):
    """Median of the means of ``groups`` contiguous blocks along ``axis``."""
    v = np.moveaxis(np.asarray(values, dtype=float), axis, -1)
    N = v.shape[-1]
    if N < groups:
        raise ConfigError(f"median-of-means needs N >= {groups} samples, got {N}")
    b = _group_bounds(N, groups)
    sums = np.add.reduceat(v, b[:-1], axis=-1)
    return np.median(sums / np.diff(b), axis=-1)


def summarize(values, estimator: str = "median-of-means", n_boot: int = N_BOOT, seed: int = 0):
    """Point estimate and bootstrap 95% percentile CI (widened to contain the estimate)."""
    values = np.asarray(values, dtype=float)
    if estimator == "median-of-means":
        stat = median_of_means
    elif estimator == "plain-mean":
        stat = lambda a, axis=-1: np.mean(a, axis=axis)
    else:
        raise ConfigError(f"unknown estimator {estimator!r}")
    point = float(stat(values))
    rng = np.random.default_rng(seed)
    boot = np.empty(n_boot)
    chunk = max(1, int(2_000_000 // max(values.size, 1)))
    for k in range(0, n_boot, chunk):
        m = min(chunk, n_boot - k)
        idx = rng.integers(0, values.size, size=(m, values.size))
        boot[k:k + m] = stat(values[idx], axis=-1)
    lo, hi = np.quantile(boot, [0.025, 0.975])
    return point, (float(min(lo, point)), float(max(hi, point)))


# ---------------------------------------------------------------------------
# Boole's law


@dataclass(frozen=True, eq=False)
class TailProfile:
    """Level-set measure (or probability) against decreasing thresholds t."""

    t_grid: np.ndarray
    values: np.ndarray
    slope: float
    slope_se: float
    constant: float
    exact_constant: float | None = None
    extra: dict = field(default_factory=dict)

    def rows(self):
        return list(zip(self.t_grid.tolist(), self.values.tolist()))


def _fit_tail(t, vals):
    t, vals = np.asarray(t, float), np.asarray(vals, float)
    ok = vals > 0
    if ok.sum() >= 2:
        b, a, _, se = linear_fit(np.log(t[ok]), np.log(vals[ok]))
    else:
        b, se = float("nan"), float("nan")
    const = float(np.max(vals * t)) if vals.size else 0.0
    return b, se, const


def pole_weights(S: SpectralData, J, x, phi=None):
    """Poles E_n in J and residues c_n = |<psi_n, chi_x phi>|^2 (degenerate poles merged)."""
    H = S.op
    chi = H.chi(x)
    if phi is None:
        phi = np.ones(chi.size) / np.sqrt(chi.size)
    phi = np.asarray(phi, dtype=complex)
    if phi.shape == (H.n,):
        phi = phi[chi]
    if phi.shape != (chi.size,):
        raise ConfigError("phi must live on chi_x or on the whole box")
    n = S.window(J)
    c = np.abs(S.eigenvectors[chi][:, n].conj().T @ phi) ** 2
    E = S.eigenvalues[n]
    return _merge_poles(E, c)


def _merge_poles(E, c, tol=1e-13):
    E, c = np.asarray(E, float), np.asarray(c, float)
    keep = c > 0
    E, c = E[keep], c[keep]
    if E.size == 0:
        return E, c
    order = np.argsort(E)
    E, c = E[order], c[order]
    scale = max(1.0, np.abs(E).max())
    groups = np.concatenate([[0], np.cumsum(np.diff(E) > tol * scale)])
    Em = np.array([E[groups == g].mean() for g in range(groups[-1] + 1)])
    cm = np.bincount(groups, weights=c)
    return Em, cm


def level_set_offsets(E, c, t):
    """Offsets of the level sets of f(E) = sum c_n/(E_n - E) at height t > 0.

    Returns (left, right): {f >= t} = union of [E_k - left_k, E_k) and
    {f <= -t} = union of (E_k, E_k + right_k].
    """
    E, c = np.asarray(E, float), np.asarray(c, float)
    m = E.size
    left, right = np.zeros(m), np.zeros(m)
    for k in range(m):
        others = np.delete(np.arange(m), k)
        Eo, co = E[others], c[others]
        gap_l = E[k] - E[k - 1] if k > 0 else np.inf
        gap_r = E[k + 1] - E[k] if k < m - 1 else np.inf
        # f(E_k - u) = c_k/u + R(E_k - u); solve u (t - R) = c_k on (0, gap_l)
        phi_l = lambda u: u * (t - np.sum(co / (Eo - E[k] + u))) - c[k]
        left[k] = _offset_root(phi_l, c[k] / t, gap_l)
        phi_r = lambda u: u * (t + np.sum(co / (Eo - E[k] - u))) - c[k]
        right[k] = _offset_root(phi_r, c[k] / t, gap_r)
    return left, right


def _offset_root(phi, guess, gap):
    """Root of phi on (0, gap); phi(0+) = -c < 0 and phi increases to +inf at gap."""
    if np.isfinite(gap):
        hi = gap
        for j in range(1, 80):
            b = gap * (1.0 - 2.0**-j)
            if phi(b) > 0:
                hi = b
                break
        else:
            return gap  # root within rounding of the neighbouring pole
    else:
        hi = max(guess, 1e-300)
        while phi(hi) <= 0:
            hi *= 2.0
            if hi > 1e300:
                return np.inf
    lo = min(guess, hi) * 0.5
    while phi(lo) > 0:
        lo *= 0.5
        if lo < 1e-300:
            return 0.0
    return opt.brentq(phi, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def level_set_measure(E, c, t, window=None) -> float:
    """Lebesgue measure of {E : |f(E)| >= t}, optionally intersected with a window."""
    if len(E) == 0:
        return 0.0
    left, right = level_set_offsets(E, c, t)
    if window is None:
        return float(left.sum() + right.sum())
    a, b = window
    lo1, hi1 = np.maximum(E - left, a), np.minimum(E, b)
    lo2, hi2 = np.maximum(E, a), np.minimum(E + right, b)
    return float(np.clip(hi1 - lo1, 0, None).sum() + np.clip(hi2 - lo2, 0, None).sum())


def boole_tail(S: SpectralData, J, x, phi, t_grid, window=None) -> TailProfile:
    """Exact level-set measure of f(E) = (phi, chi_x G(E) P_J chi_x phi).

    Parameters
    ----------
    S : SpectralData
    J : (float, float)
        Spectral window selecting the poles.
    x : coordinate
    phi : array_like or None
        Normalized vector on chi_x (``None``: uniform).
    t_grid : array_like
    window : (float, float), optional
        Restrict the measure to this energy interval.

    Returns
    -------
    TailProfile
        ``exact_constant`` is 2 sum_n c_n, the Boole value of measure * t.
    """
    E, c = pole_weights(S, J, x, phi)
    t_grid = np.asarray(t_grid, dtype=float)
    vals = np.array([level_set_measure(E, c, t, window) for t in t_grid])
    slope, se, const = _fit_tail(t_grid, vals)
    return TailProfile(t_grid, vals, slope, se, const, exact_constant=float(2 * c.sum()))


# ---------------------------------------------------------------------------
# energy integrals


@dataclass(frozen=True)
class EnergyIntegral:
    value: float
    previous: float
    relative_change: float
    level: int


_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def _block_norm_on(E, z_shift, A, B, eps):
    """||A diag(1/(E_n - E - i eps)) B^*|| for an array of energies."""
    D = 1.0 / (z_shift[None, :] - E[:, None] - 1j * eps)
    if A.shape[0] == 1 and B.shape[0] == 1:
        return np.abs(D @ (A[0] * B[0].conj()))
    K = np.einsum("pn,en,qn->epq", A, D, B.conj())
    return np.linalg.norm(K, ord=2, axis=(1, 2))


def _panel_nodes(a, b, pole_at_a, s, eps, level):
    """Quadrature nodes/weights on [a, b] (in energy) for a pole at a or b.

    eps = 0 and s < 1: E - p = u^{1/(1-s)}; eps > 0 or s = 1: E - p = eps*sinh(w).
    """
    p = a if pole_at_a else b
    length = b - a
    if eps == 0.0:
        q = 1.0 / (1.0 - s)
        umax = length ** (1.0 - s)
        edges = np.linspace(0.0, umax, 2**level + 1)
        mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
        u = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
        w = (half[:, None] * _GL_W[None, :]).ravel()
        off, jac = u**q, q * u ** (q - 1.0)
    else:
        wmax = np.arcsinh(length / eps)
        edges = np.linspace(0.0, wmax, 2**level + 1)
        mid, half = 0.5 * (edges[1:] + edges[:-1]), 0.5 * np.diff(edges)
        u = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
        w = (half[:, None] * _GL_W[None, :]).ravel()
        off, jac = eps * np.sinh(u), eps * np.cosh(u)
    E = p + off if pole_at_a else p - off
    return E, w * jac


def _integrate_poles(poles, A, B, s, J, eps, level, active):
    a, b = J
    inner = poles[(poles > a) & (poles < b) & active]
    pts = np.concatenate([[a], inner, [b]])
    total = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        if hi <= lo:
            continue
        m = 0.5 * (lo + hi)
        for (pa, pb, at_a) in ((lo, m, True), (m, hi, False)):
            E, w = _panel_nodes(pa, pb, at_a, s, eps, level)
            total += float(np.sum(w * _block_norm_on(E, poles, A, B, eps) ** s))
    return total


def fm_energy_integral(S: SpectralData, x, y, s: float, J, eps: float = 0.0, rtol: float = 1e-4,
                       max_level: int = 10) -> EnergyIntegral:
    """Integral over J of ||chi_x (H - E - i eps)^{-1} chi_y||^s dE.

    Panels are split at every eigenvalue inside J and at the midpoints between
    them; each half panel uses a substitution removing the pole behaviour
    (power law for eps = 0, arcsinh scale for eps > 0). The composite
    Gauss-Legendre mesh is halved until the relative change is below ``rtol``.

    Raises
    ------
    ConvergenceError
        Carrying the last two estimates if ``max_level`` halvings do not reach ``rtol``.
    """
    if not 0.0 < s <= 1.0:
        raise ConfigError("s must lie in (0, 1]")
    if s == 1.0 and eps == 0.0:
        raise ConfigError("s = 1 diverges without regularization; give eps > 0")
    H = S.op
    A = S.eigenvectors[H.chi(x)]
    B = S.eigenvectors[H.chi(y)]
    poles = S.eigenvalues
    weight = np.linalg.norm(A, axis=0) * np.linalg.norm(B, axis=0)
    active = weight > 1e-14 * max(weight.max(), 1e-300)
    prev = _integrate_poles(poles, A, B, s, J, eps, 0, active)
    for level in range(1, max_level + 1):
        cur = _integrate_poles(poles, A, B, s, J, eps, level, active)
        change = abs(cur - prev) / max(abs(cur), 1e-300)
        if change < rtol:
            return EnergyIntegral(cur, prev, change, level)
        prev = cur
    raise ConvergenceError("energy integral did not converge", (prev, cur))


def one_pole_integral(c: float, s: float, E1: float, J) -> float:
    """Closed form of the integral over J = (a, b) of |c/(E1 - E)|^s, a < E1 < b."""
    a, b = J
    return c**s * ((b - E1) ** (1 - s) + (E1 - a) ** (1 - s)) / (1 - s)


# ---------------------------------------------------------------------------
# disorder averages


def _proxy_weights(H, x, proxy):
    if proxy == "chi":
        idx = H.chi(x)
        return idx, np.ones(idx.size)
    if proxy == "bump":
        u = H.bump(x)
        idx = np.flatnonzero(u)
        return idx, u[idx]
    raise ConfigError(f"unknown observable proxy {proxy!r}")


def sample_block_norms(spec: ModelSpec, points, pairs, N: int, seed: int = 0, proxy: str = "chi",
                       workers: int | None = None, start: int = 0) -> np.ndarray:
    """Operator norms of proxy-weighted Green blocks over N realizations.

    Returns an array of shape (N, len(points), len(pairs)); realization i
    uses the disorder stream (seed, start + i) for every energy and pair.
    """
    points = [p if isinstance(p, EnergyPoint) else EnergyPoint(float(np.real(p)), float(np.imag(p)))
              for p in points]

    def one(i):
        H = build_hamiltonian(spec, sample_disorder(spec, seed, start + i))
        out = np.empty((len(points), len(pairs)))
        for k, z in enumerate(points):
            R = Resolvent(H, z)
            for j, (x, y) in enumerate(pairs):
                rx, wx = _proxy_weights(H, x, proxy)
                ry, wy = _proxy_weights(H, y, proxy)
                blk = wx[:, None] * R.entries(rx, ry) * wy[None, :]
                out[k, j] = _block_norms(blk)[0]
        return out

    return np.array(ordered_map(one, range(N), workers))


def fm_disorder(spec: ModelSpec, z: EnergyPoint, x, y, s: float, N: int, estimator: str = "median-of-means",
                proxy: str = "chi", seed: int = 0, workers: int | None = None,
                divergence_mode: bool = False) -> MomentEstimate:
    """Monte-Carlo estimate of E ||W_x G(z) W_y||^s.

    Parameters
    ----------
    spec : ModelSpec
    z : EnergyPoint
    x, y : coordinates
    s : float
        0 < s < 1 (s = 0 gives 1 exactly; s = 1 only with ``divergence_mode``).
    N : int
    estimator : {"median-of-means", "plain-mean"}
    proxy : {"chi", "bump"}
        chi_x indicator blocks or U-weighted blocks.
    """
    if estimator == "median-of-means" and N < MOM_GROUPS:
        raise ConfigError(f"median-of-means needs N >= {MOM_GROUPS}")
    if not (0.0 <= s < 1.0 or (s == 1.0 and divergence_mode)):
        raise ConfigError("s must lie in [0, 1)")
    norms = sample_block_norms(spec, [z], [(x, y)], N, seed, proxy, workers)[:, 0, 0]
    vals = np.where(norms > 0, norms, np.nan) ** s if s > 0 else (norms > 0).astype(float)
    vals = np.nan_to_num(vals, nan=0.0)
    mean, ci = summarize(vals, estimator, seed=seed)
    return MomentEstimate(s, z, N, mean, ci, estimator, vals)


def scalar_toy_moment(e: float, s: float) -> float:
    """E |1/(eta - e)|^s for eta uniform on [0, 1] and e in (0, 1)."""
    return (e ** (1 - s) + (1 - e) ** (1 - s)) / (1 - s)


def weak_l1_tail(spec: ModelSpec, z: EnergyPoint, x, y, N: int, t_grid=None, seed: int = 0,
                 method: str = "conditional", workers: int | None = None, min_exceed: int = 20) -> TailProfile:
    """Tail P(||U_x G(z) U_y|| > t) over disorder and its log-log slope.

    ``method="empirical"`` counts exceedances directly. ``method="conditional"``
    (lattice mode only) averages the exact conditional probability given all
    couplings except eta_x: G(x, y) is a Moebius function of eta_x, so the event
    is an interval in eta_x whose law is known. Both estimate the same
    probability; the conditional one has far smaller variance at large t.

    The slope is fitted on the upper decade of t. Under ``empirical`` the grid is
    shifted down until the largest t has at least ``min_exceed`` exceedances.
    """
    if N < 1000:
        raise ConfigError("weak_l1_tail needs N >= 1000")
    if method == "conditional" and not spec.lattice:
        raise ConfigError("conditional tail estimator needs lattice mode")
    law = spec.law
    lam = float(spec.disorder)

    def one(i):
        real = sample_disorder(spec, seed, i)
        H = build_hamiltonian(spec, real)
        if method == "empirical":
            blk = Resolvent(H, z).entries(*(np.flatnonzero(H.bump(p)) for p in (x, y)))
            ux, uy = H.bump(x), H.bump(y)
            blk = ux[ux > 0][:, None] * blk * uy[uy > 0][None, :]
            return np.array([_block_norms(blk)[0]])
        H0 = H.with_coupling(x, 0.0)
        ix, iy = H.index_of(x), H.index_of(y)
        row = Resolvent(H0, z).rows([ix])[0]
        return np.array([row[ix], row[iy]])

    data = np.array(ordered_map(one, range(N), workers))

    if method == "empirical":
        norms = data[:, 0]
        if t_grid is None:
            top = np.sort(norms)[-min_exceed]
            t_grid = np.geomspace(top / 10.0, top, 9)
        t_grid = np.sort(np.asarray(t_grid, dtype=float))
        while np.sum(norms > t_grid[-1]) < min_exceed:
            t_grid = t_grid / 2.0
            if t_grid[-1] < 1e-300:
                raise ConfigError("weak_l1_tail: cannot reach the exceedance count")
        probs = np.array([np.mean(norms > t) for t in t_grid])
    else:
        gxx, gxy = data[:, 0], data[:, 1]
        if t_grid is None:
            t_grid = np.geomspace(10.0, 1000.0, 9) / max(lam, 1e-12)
        t_grid = np.sort(np.asarray(t_grid, dtype=float))
        # |G(x,y)| > t  <=>  |eta + 1/(lam g_xx)| < |g_xy| / (lam |g_xx| t)
        center = -1.0 / (lam * gxx)
        probs = np.empty(t_grid.size)
        for k, t in enumerate(t_grid):
            r = np.abs(gxy) / (lam * np.abs(gxx) * t)
            half = np.sqrt(np.clip(r**2 - center.imag**2, 0.0, None))
            lo = np.clip(center.real - half, 0.0, 1.0)
            hi = np.clip(center.real + half, 0.0, 1.0)
            probs[k] = np.mean(law.cdf(hi) - law.cdf(lo))
    upper = t_grid >= t_grid[-1] / 10.0 * (1 - 1e-12)
    slope, se, const = _fit_tail(t_grid[upper], probs[upper])
    return TailProfile(t_grid[::-1].copy(), probs[::-1].copy(), slope, se, const,
                       extra={"method": method, "N": N})


@dataclass(frozen=True, eq=False)
class HolderScan:
    rows: list  # (z, w, |delta moment|, |z - w|^s, ratio)
    C_hat: float
    C_hat_half: float
    stable: bool


def holder_scan(spec: ModelSpec, s: float, z_grid, w_grid, x, y, N: int, seed: int = 0,
                proxy: str = "chi", workers: int | None = None) -> HolderScan:
    """Hoelder ratios |E||G(z)||^s - E||G(w)||^s| / |z - w|^s over grid pairs.

    All energies share the same realizations (common random numbers). The
    maximal ratio C_hat is recomputed on the first half of the sample;
    ``stable`` records agreement within 20% (i.e. under doubling N).
    """
    if not 0.0 < s <= 0.5:
        raise ConfigError("holder_scan needs 0 < s <= 1/2")
    zs = [z if isinstance(z, EnergyPoint) else EnergyPoint(float(np.real(z)), float(np.imag(z))) for z in z_grid]
    ws = [w if isinstance(w, EnergyPoint) else EnergyPoint(float(np.real(w)), float(np.imag(w))) for w in w_grid]
    pts = zs + ws
    norms = sample_block_norms(spec, pts, [(x, y)], N, seed, proxy, workers)[:, :, 0] ** s

    def scan(sample):
        means = sample.mean(axis=0)
        out, best = [], 0.0
        for i, z in enumerate(zs):
            for j, w in enumerate(ws):
                dz = abs(z.z - w.z)
                diff = abs(means[i] - means[len(zs) + j])
                ratio = diff / dz**s if dz > 0 else 0.0
                out.append((z.z, w.z, diff, dz**s, ratio))
                best = max(best, ratio)
        return out, best

    rows, C = scan(norms)
    _, C_half = scan(norms[: max(N // 2, 1)])
    stable = bool(np.isfinite(C) and (C == C_half == 0 or abs(C / C_half - 1) <= 0.2))
    return HolderScan(rows, C, C_half, stable)
