"""Green-function blocks, the geometric resolvent identity, Combes-Thomas probes.

One sparse LU factorization of H - z serves every block requested at that
energy. Rows of G are obtained by transposed solves, columns by plain solves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.linalg as la
import scipy.sparse.linalg as sla

from .errors import ConfigError, SingularSolveError
from .model import OperatorHandle

RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class EnergyPoint:
    """z = E + i*eps with eps >= 0."""

    E: float
    eps: float = 0.0

    def __post_init__(self):
        if self.eps < 0:
            raise ConfigError("EnergyPoint: eps must be >= 0")

    @property
    def z(self) -> complex:
        return complex(self.E, self.eps)


@dataclass(frozen=True, eq=False)
class GreenBlock:
    """chi_x G(z) chi_y as a matrix on the grid.

    The grid weights h^d cancel between the kernel and the measure, so the
    operator and Hilbert-Schmidt norms of the block are those of the matrix.
    """

    x: np.ndarray
    y: np.ndarray
    block: np.ndarray
    op_norm: float
    hs_norm: float


def _block_norms(B: np.ndarray) -> tuple[float, float]:
    if B.size == 0:
        return 0.0, 0.0
    hs = float(np.linalg.norm(B))
    if min(B.shape) == 1:
        return hs, hs
    return float(la.svdvals(B)[0]), hs


class Resolvent:
    """Factorized (H - z)^{-1}.

    Parameters
    ----------
    H : OperatorHandle
    z : EnergyPoint or complex
    eigenvalues : array_like, optional
        Spectrum of H, if already known; used to reject eps = 0 requests at
        (numerical) eigenvalues before factorizing.
    """

    def __init__(self, H: OperatorHandle, z, eigenvalues=None):
        if not isinstance(z, EnergyPoint):
            z = EnergyPoint(float(np.real(z)), float(np.imag(z)))
        self.H = H
        self.point = z
        self.z = z.z
        if z.eps == 0.0 and eigenvalues is not None:
            ev = np.asarray(eigenvalues)
            k = int(np.argmin(np.abs(ev - z.E)))
            if abs(ev[k] - z.E) < 1e-9:
                raise SingularSolveError(
                    f"E = {z.E!r} is within 1e-9 of the eigenvalue {ev[k]!r}", ev[k]
                )
        A = H.matrix.astype(complex) if z.eps != 0.0 or np.iscomplexobj(H.matrix.data) else H.matrix
        shift = self.z if np.iscomplexobj(A.data) else z.E
        self.A = (A - shift * sp.identity(H.n, dtype=A.dtype, format="csr")).tocsc()
        self._norm1 = float(abs(self.A).sum(axis=0).max()) if H.n else 0.0
        try:
            self.lu = sla.splu(self.A)
        except RuntimeError as exc:  # exactly singular
            raise SingularSolveError(str(exc), self._nearest_eigenvalue()) from exc

    def _nearest_eigenvalue(self):
        try:
            if self.H.n <= 2000:
                ev = la.eigvalsh(self.H.dense())
                return float(ev[np.argmin(np.abs(ev - self.point.E))])
            return float(sla.eigsh(self.H.matrix, k=1, sigma=self.point.E, return_eigenvectors=False)[0])
        except Exception:  # pragma: no cover - diagnostics only
            return None

    def _check(self, X, B, trans):
        R = (self.A.T @ X if trans else self.A @ X) - B
        scale = np.linalg.norm(B) + self._norm1 * np.linalg.norm(X)
        if np.linalg.norm(R) > RESIDUAL_TOL * max(scale, 1e-300) or not np.all(np.isfinite(X)):
            raise SingularSolveError(
                f"resolvent solve at z = {self.z!r} lost accuracy (near an eigenvalue)",
                self._nearest_eigenvalue(),
            )

    def columns(self, idx) -> np.ndarray:
        """G[:, idx] as an (n, len(idx)) array."""
        idx = np.atleast_1d(idx)
        B = np.zeros((self.H.n, idx.size), dtype=self.A.dtype)
        B[idx, np.arange(idx.size)] = 1.0
        X = self.lu.solve(B)
        self._check(X, B, trans=False)
        return X

    def rows(self, idx) -> np.ndarray:
        """G[idx, :] as a (len(idx), n) array."""
        idx = np.atleast_1d(idx)
        B = np.zeros((self.H.n, idx.size), dtype=self.A.dtype)
        B[idx, np.arange(idx.size)] = 1.0
        X = self.lu.solve(B, trans="T")
        self._check(X, B, trans=True)
        return X.T

    def entries(self, rows, cols) -> np.ndarray:
        """G[rows][:, cols], solving on whichever side is smaller."""
        rows, cols = np.atleast_1d(rows), np.atleast_1d(cols)
        if rows.size <= cols.size:
            return self.rows(rows)[:, cols]
        return self.columns(cols)[rows, :]

    def block(self, x, y) -> GreenBlock:
        B = self.entries(self.H.chi(x), self.H.chi(y))
        op, hs = _block_norms(B)
        return GreenBlock(np.atleast_1d(x), np.atleast_1d(y), B, op, hs)

    def apply(self, B) -> np.ndarray:
        return self.lu.solve(np.asarray(B, dtype=self.A.dtype))


def green_block(H: OperatorHandle, z: EnergyPoint, x, y, eigenvalues=None) -> GreenBlock:
    """Block chi_x (H - z)^{-1} chi_y.

    Parameters
    ----------
    H : OperatorHandle
    z : EnergyPoint
        ``eps = 0`` is admitted for finite volume when E is not an eigenvalue.
    x, y : coordinates
    eigenvalues : array_like, optional
        If given, E is checked against them when ``eps = 0``.

    Returns
    -------
    GreenBlock
    """
    return Resolvent(H, z, eigenvalues).block(x, y)


# ---------------------------------------------------------------------------
# geometric resolvent identity


def _positions(parent: OperatorHandle, child: OperatorHandle) -> np.ndarray:
    """Positions of the child's sites inside the parent's index set."""
    lookup = {s: i for i, s in enumerate(parent.sites)}
    try:
        return np.array([lookup[s] for s in child.sites])
    except KeyError as exc:
        raise ConfigError("Lambda is not a subset of Omega") from exc


def commutator(H: OperatorHandle, theta) -> sp.csr_matrix:
    """[H, Theta] = H Theta - Theta H with Theta a multiplication operator."""
    T = sp.diags(np.asarray(theta, dtype=float))
    return (H.matrix @ T - T @ H.matrix).tocsr()


def cutoff_gradient_norms(H: OperatorHandle, theta) -> dict:
    """Discrete sup-norms of the gradient and Laplacian of Theta actually used."""
    theta = np.asarray(theta, dtype=float)
    h = float(H.spec.spacing)
    links = sp.triu(H.free - sp.diags(H.free.diagonal()), k=1).tocoo()
    grad = np.abs(theta[links.row] - theta[links.col]) / h
    adj = (abs(links) + abs(links).T).tocsr() * h**2  # unit-weight adjacency
    deg = np.asarray(adj.sum(axis=1)).ravel()
    lap = (adj @ theta - deg * theta) / h**2
    return {"grad_sup": float(grad.max(initial=0.0)), "laplacian_sup": float(np.abs(lap).max(initial=0.0))}


def _check_supports(H: OperatorHandle, inside: np.ndarray, theta: np.ndarray, core: np.ndarray, label: str):
    if np.any(np.abs(theta[core] - 1.0) > 1e-14):
        bad = core[np.argmax(np.abs(theta[core] - 1.0))]
        raise ConfigError(f"{label}: Theta != 1 at core site {H.coords[bad].tolist()}")
    support = np.flatnonzero(theta != 0)
    pattern = (abs(H.matrix) + abs(H.matrix).T).tocsr()
    for i in support:
        nbrs = pattern.indices[pattern.indptr[i]:pattern.indptr[i + 1]]
        outside = nbrs[~inside[nbrs]]
        if outside.size:
            raise ConfigError(
                f"{label}: stencil of supp Theta leaves Lambda at site {H.coords[outside[0]].tolist()} "
                f"(neighbour of {H.coords[i].tolist()})"
            )


def _zero_extended_resolvent(H_Omega, H_Lambda, z, pos):
    """Callable g -> G_Lambda g on Omega vectors (zero outside Lambda)."""
    R = Resolvent(H_Lambda, z)

    def apply(B):
        out = np.zeros((H_Omega.n,) + B.shape[1:], dtype=complex)
        out[pos] = R.apply(B[pos].astype(complex))
        return out

    return R, apply


def geometric_identity_residual(H_Omega: OperatorHandle, H_Lambda: OperatorHandle, theta, z: EnergyPoint, x, y,
                                H_Lambda2: OperatorHandle | None = None, theta2=None) -> float:
    """Residual of the geometric resolvent identity on chi_x (.) chi_y.

    One-sided form (x in the core of Theta)::

        chi_x G chi_y = chi_x G_L Theta chi_y + chi_x G_L [H, Theta] G chi_y

    Two-sided form (``H_Lambda2``/``theta2`` given, Lambda and Lambda' disjoint,
    y in the core of Theta')::

        chi_x G chi_y = - chi_x G_L [H, Theta] G [H, Theta'] G_L' chi_y

    Here G_L is the Dirichlet resolvent of Lambda extended by zero to Omega.

    Parameters
    ----------
    H_Omega, H_Lambda : OperatorHandle
        ``H_Lambda`` must be a restriction of ``H_Omega``.
    theta : array_like
        Cutoff on the sites of Omega.
    z : EnergyPoint
    x, y : coordinates

    Returns
    -------
    float
        Operator norm of LHS - RHS.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (H_Omega.n,):
        raise ConfigError("theta must be a vector on the sites of Omega")
    pos = _positions(H_Omega, H_Lambda)
    inside = np.zeros(H_Omega.n, dtype=bool)
    inside[pos] = True
    rows, cols = H_Omega.chi(x), H_Omega.chi(y)
    _check_supports(H_Omega, inside, theta, rows, "Lambda")
    G = Resolvent(H_Omega, z)
    comm = commutator(H_Omega, theta)

    lhs = G.entries(rows, cols)
    # chi_x G_L from transposed solves on Lambda
    E_rows = np.zeros((H_Omega.n, rows.size), dtype=complex)
    E_rows[rows, np.arange(rows.size)] = 1.0
    RL = Resolvent(H_Lambda, z)
    sub = np.zeros((H_Omega.n, rows.size), dtype=complex)
    sub[pos] = RL.lu.solve(E_rows[pos].astype(RL.A.dtype), trans="T")
    gl_rows = sub.T  # chi_x G_L as (|chi_x|, n)

    if H_Lambda2 is None:
        theta_cols = np.zeros((H_Omega.n, cols.size))
        theta_cols[cols, np.arange(cols.size)] = theta[cols]
        rhs = gl_rows @ theta_cols + (gl_rows @ comm) @ G.columns(cols)
        return float(np.linalg.norm(lhs - rhs, 2))

    theta2 = np.asarray(theta2, dtype=float)
    pos2 = _positions(H_Omega, H_Lambda2)
    if np.intersect1d(pos, pos2).size:
        raise ConfigError("two-sided identity needs disjoint Lambda and Lambda'")
    inside2 = np.zeros(H_Omega.n, dtype=bool)
    inside2[pos2] = True
    _check_supports(H_Omega, inside2, theta2, cols, "Lambda'")
    comm2 = commutator(H_Omega, theta2)
    _, GL2 = _zero_extended_resolvent(H_Omega, H_Lambda2, z, pos2)
    E_cols = np.zeros((H_Omega.n, cols.size), dtype=complex)
    E_cols[cols, np.arange(cols.size)] = 1.0
    right = GL2(E_cols)                      # G_L' chi_y
    right = G.apply(comm2 @ right)           # G [H, Theta'] G_L' chi_y
    rhs = -(gl_rows @ (comm @ right))
    return float(np.linalg.norm(lhs - rhs, 2))


def resolvent_identity_residual(H: OperatorHandle, z: EnergyPoint, w: EnergyPoint, x, y) -> float:
    """Relative residual of chi_x [G(z) - G(w) - (z - w) G(z) G(w)] chi_y."""
    Rz, Rw = Resolvent(H, z), Resolvent(H, w)
    rows, cols = H.chi(x), H.chi(y)
    diff = Rz.entries(rows, cols) - Rw.entries(rows, cols)
    prod = (z.z - w.z) * (Rz.rows(rows) @ Rw.columns(cols))
    return float(np.linalg.norm(diff - prod) / max(np.linalg.norm(diff), 1e-300))


# ---------------------------------------------------------------------------
# Combes-Thomas


@dataclass(frozen=True)
class DecayRate:
    rate: float
    intercept: float
    r2: float
    gap: float
    distances: np.ndarray
    log_norms: np.ndarray


def linear_fit(x, y, w=None, known_variance=False):
    """Weighted least squares y ~ a + b*x.

    Returns (b, a, R^2, se_b). With ``known_variance`` the weights are taken
    as inverse variances and se_b = (sum w (x - xbar)^2)^{-1/2}; otherwise
    the residual variance is used.
    """
    x, y = np.asarray(x, float), np.asarray(y, float)
    w = np.ones_like(x) if w is None else np.asarray(w, float)
    W = w / w.sum()
    xm, ym = W @ x, W @ y
    sxx = W @ (x - xm) ** 2
    b = (W @ ((x - xm) * (y - ym))) / sxx
    a = ym - b * xm
    ss_res = W @ (y - a - b * x) ** 2
    ss_tot = W @ (y - ym) ** 2
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    if known_variance:
        se = 1.0 / np.sqrt(w @ (x - xm) ** 2)
    else:
        se = np.sqrt(ss_res / sxx / max(x.size - 2, 1))
    return float(b), float(a), float(r2), float(se)


def combes_thomas_probe(H: OperatorHandle, E: float, pairs) -> DecayRate:
    """Fit ln ||chi_x G(E) chi_y|| against |x - y| below the spectrum.

    Returns the decay rate (minus the slope); the fit target for the free
    lattice is cosh(kappa) = 1 + g/2 with g the gap to the spectrum.
    """
    gap = H.spectral_bottom - float(E)
    if gap <= 1e-9:
        raise ConfigError(f"E = {E!r} is not below the spectrum (bottom {H.spectral_bottom!r})")
    R = Resolvent(H, EnergyPoint(float(E), 0.0))
    dist, vals = [], []
    for x, y in pairs:
        blk = R.block(x, y)
        dist.append(float(H.distance(np.atleast_1d(x), np.atleast_1d(y))))
        vals.append(np.log(blk.op_norm))
    slope, icpt, r2, _ = linear_fit(dist, vals)
    return DecayRate(-slope, icpt, r2, gap, np.array(dist), np.array(vals))
