"""Sandwiched resolvents of dissipative matrices.

For A = B + iC with B Hermitian and C >= delta > 0 we tabulate

    T(v) = M1 (A - v + i delta')^{-1} M2,      v real,

and check the boundary-value facts used for weak-L1 bounds: the exact trace
identity in the self-adjoint case, the conjugacy Re T = H(Im T) with

    H f(x) = (1/pi) PV int f(y) / (x - y) dy,

and the 1/t decay of the level-set measure of ||T(v)||_HS.

Sign convention: (A - v + i delta')^{-1} is analytic in the lower half plane
of v, so its operator imaginary part is negative semidefinite. Positivity is
therefore stated for -Im T. Re and Im are the operator parts
(T + T*)/2 and (T - T*)/(2i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
from scipy.optimize import brentq

from .errors import ConfigError
from .moments import TailProfile, _fit_tail

MIN_GRID = 64
TAIL_NODES = 64
CHUNK = 1024


@dataclass(frozen=True, eq=False)
class DissipativeOperator:
    """A = B + iC with C >= delta * identity."""

    B: np.ndarray
    C: np.ndarray
    delta: float

    def __post_init__(self):
        B = np.asarray(self.B, dtype=complex)
        C = np.asarray(self.C, dtype=complex)
        if B.shape != C.shape or B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise ConfigError("B and C must be square matrices of equal size")
        if not np.allclose(B, B.conj().T, atol=1e-12) or not np.allclose(C, C.conj().T, atol=1e-12):
            raise ConfigError("B and C must be Hermitian")
        cmin = la.eigvalsh(C)[0] if C.size else 0.0
        if cmin < self.delta - 1e-12 or self.delta < 0:
            raise ConfigError(f"C >= delta fails: min eigenvalue {cmin:.3g} < delta {self.delta:.3g}")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @classmethod
    def self_adjoint(cls, B) -> "DissipativeOperator":
        B = np.asarray(B)
        return cls(B, np.zeros_like(B), 0.0)

    @property
    def A(self) -> np.ndarray:
        return self.B + 1j * self.C

    @property
    def hermitian(self) -> bool:
        return not np.any(self.C)

    @property
    def n(self) -> int:
        return self.B.shape[0]


def _sandwich(A: DissipativeOperator, M1, M2, v, delta_p) -> np.ndarray:
    """T(v) for an array of real v, shape (len(v), n1, n2)."""
    v = np.atleast_1d(np.asarray(v, dtype=float))
    n = A.n
    out = np.empty((v.size, M1.shape[0], M2.shape[1]), dtype=complex)
    if A.hermitian:
        lam, U = la.eigh(A.B)
        L, R = M1 @ U, U.conj().T @ M2
        for k in range(0, v.size, CHUNK):
            w = 1.0 / (lam[None, :] - v[k:k + CHUNK, None] + 1j * delta_p)
            out[k:k + CHUNK] = np.einsum("ik,vk,kj->vij", L, w, R)
        return out
    base = A.A + 1j * delta_p * np.eye(n)
    eye = np.eye(n)
    for k in range(0, v.size, CHUNK):
        vs = v[k:k + CHUNK]
        X = np.linalg.solve(base[None] - vs[:, None, None] * eye[None], np.broadcast_to(M2, (vs.size,) + M2.shape))
        out[k:k + CHUNK] = M1 @ X
    return out


def _imag_part(T):
    return (T - np.conj(np.swapaxes(T, -1, -2))) / 2j


def _real_part(T):
    return (T + np.conj(np.swapaxes(T, -1, -2))) / 2


@dataclass(frozen=True, eq=False)
class SandwichProfile:
    v: np.ndarray
    T: np.ndarray = field(repr=False)
    hs: np.ndarray
    im_trace: np.ndarray
    A: DissipativeOperator = field(repr=False)
    M1: np.ndarray = field(repr=False)
    M2: np.ndarray = field(repr=False)
    delta_p: float = 0.0

    @property
    def step(self) -> float:
        return float(self.v[1] - self.v[0])

    @property
    def square(self) -> bool:
        return self.M1.shape[0] == self.M2.shape[1]

    def evaluate(self, v) -> np.ndarray:
        return _sandwich(self.A, self.M1, self.M2, v, self.delta_p)

    def hs_at(self, v) -> np.ndarray:
        return np.linalg.norm(self.evaluate(v), axis=(-2, -1))

    def rows(self):
        return list(zip(self.v.tolist(), self.hs.tolist(), self.im_trace.tolist()))


def sandwich_profile(A: DissipativeOperator, M1, M2, v_grid, delta_p: float = 0.0) -> SandwichProfile:
    """Tabulate T(v) = M1 (A - v + i delta')^{-1} M2 on a uniform grid.

    Parameters
    ----------
    A : DissipativeOperator
    M1, M2 : ndarray
    v_grid : array_like
        Uniform grid with at least 64 points.
    delta_p : float
        Extra damping delta' >= 0; delta' + delta must be positive.
    """
    v = np.asarray(v_grid, dtype=float)
    if v.ndim != 1 or v.size < MIN_GRID:
        raise ConfigError(f"v grid needs at least {MIN_GRID} points")
    h = np.diff(v)
    if np.any(h <= 0) or np.ptp(h) > 1e-9 * h.mean():
        raise ConfigError("v grid must be uniform and increasing")
    if delta_p < 0 or delta_p + A.delta <= 0:
        raise ConfigError("need delta' >= 0 and delta' + delta > 0")
    M1 = np.atleast_2d(np.asarray(M1, dtype=complex))
    M2 = np.atleast_2d(np.asarray(M2, dtype=complex))
    if M1.shape[1] != A.n or M2.shape[0] != A.n:
        raise ConfigError("M1, M2 shapes do not match A")
    T = _sandwich(A, M1, M2, v, delta_p)
    hs = np.linalg.norm(T, axis=(-2, -1))
    if M1.shape[0] == M2.shape[1]:
        im_trace = np.abs(np.linalg.eigvalsh(_imag_part(T))).sum(axis=-1)
    else:
        im_trace = np.full(v.size, np.nan)
    return SandwichProfile(v, T, hs, im_trace, A, M1, M2, float(delta_p))


def positivity_margin(profile: SandwichProfile) -> float:
    """Smallest eigenvalue of -Im T(v) over the grid (>= 0 in the self-adjoint case)."""
    return float(np.linalg.eigvalsh(-_imag_part(profile.T)).min())


# ---------------------------------------------------------------------------
# trace identity


@dataclass(frozen=True)
class TraceIdentity:
    pole_sum: float
    quadrature: float
    target: float

    @property
    def pole_error(self) -> float:
        return abs(self.pole_sum - self.target) / self.target

    @property
    def quadrature_error(self) -> float:
        return abs(self.quadrature - self.target) / self.target


def trace_identity_check(profile: SandwichProfile) -> TraceIdentity:
    """int ||Im T(v)||_1 dv against pi ||M||_HS^2 for T = M* (B - v + i delta')^{-1} M.

    The pole sum uses the spectral decomposition B = sum lam_n u_n u_n*:
    -Im T is sum_n P_n(v) M* u_n u_n* M with Poisson kernels P_n of unit mass
    pi, so the integral is pi sum_n ||M* u_n||^2. The quadrature route is the
    trapezoid rule on the grid plus the exact Poisson tails beyond both ends.
    """
    A, M1, M2 = profile.A, profile.M1, profile.M2
    if not A.hermitian:
        raise ConfigError("trace identity is exact only for C = 0")
    if profile.delta_p <= 0:
        raise ConfigError("trace identity needs delta' > 0")
    if M1.shape != M2.T.shape or not np.allclose(M1, M2.conj().T, atol=1e-14):
        raise ConfigError("trace identity needs M1 = M2*")
    lam, U = la.eigh(A.B)
    w = np.sum(np.abs(M1 @ U) ** 2, axis=0)
    pole = float(np.pi * w.sum())
    target = float(np.pi * np.linalg.norm(M2, "fro") ** 2)
    d = profile.delta_p
    a, b = profile.v[0], profile.v[-1]
    tails = np.sum(w * (np.pi - np.arctan((b - lam) / d) - np.arctan((lam - a) / d)))
    quad = float(np.trapezoid(profile.im_trace, profile.v) + tails)
    return TraceIdentity(pole, quad, target)


def dissipative_trace_bound(profile: SandwichProfile) -> tuple[float, float]:
    """(trapezoid int ||Im T||_1 dv on the grid, pi ||M1||_HS ||M2||_HS) for general A."""
    integral = float(np.trapezoid(profile.im_trace, profile.v))
    return integral, float(np.pi * np.linalg.norm(profile.M1, "fro") * np.linalg.norm(profile.M2, "fro"))


# ---------------------------------------------------------------------------
# Hilbert transform


def _xlogx(k):
    """k ln|k| with 0 ln 0 = 0."""
    k = np.asarray(k, dtype=float)
    out = np.zeros_like(k)
    nz = k != 0
    out[nz] = k[nz] * np.log(np.abs(k[nz]))
    return out


def pv_weights(n: int, targets) -> np.ndarray:
    """Weights W with (1/pi) PV int f(y)/(x_i - y) dy = sum_j W_ij f_j for piecewise-linear f.

    Exact for the linear interpolant of samples f_j on a uniform grid of n
    nodes, evaluated at grid nodes ``targets``; independent of the spacing.
    """
    i = np.asarray(targets)[:, None]
    j = np.arange(n)[None, :]
    m = (i - j).astype(float)
    W = _xlogx(m + 1) - 2 * _xlogx(m) + _xlogx(m - 1)
    # end nodes see a single segment; targets are interior so the logs are finite
    m0 = m[:, :1]
    W[:, :1] = 1 + np.log(np.abs(m0)) - _xlogx(m0) + _xlogx(m0 - 1)
    mN = m[:, -1:]
    W[:, -1:] = _xlogx(mN + 1) - _xlogx(mN) - np.log(np.abs(mN)) - 1
    return W / np.pi


def _tail_nodes(a: float, b: float, scale: float):
    """Gauss-Legendre nodes/weights for int_b^inf and int_-inf^a via y = edge +- scale (1 - u)/u."""
    u, wu = np.polynomial.legendre.leggauss(TAIL_NODES)
    u = 0.5 * (u + 1)
    wu = 0.5 * wu
    tau = scale * (1 - u) / u
    jac = scale / u**2
    y = np.concatenate([b + tau, a - tau])
    w = np.concatenate([wu * jac, wu * jac])
    return y, w


@dataclass(frozen=True, eq=False)
class ConjugacyResult:
    deviation: float        # max HS norm of Re T - H(Im T) over the central half
    max_hs: float
    nodes: np.ndarray

    @property
    def relative(self) -> float:
        return self.deviation / self.max_hs if self.max_hs > 0 else 0.0


def conjugacy_check(profile: SandwichProfile, force_real: bool = False) -> ConjugacyResult:
    """max over central nodes of ||Re T(v) - H(Im T)(v)||_HS.

    Inside the grid the principal value uses exact weights for the linear
    interpolant; outside, the integral is completed with Gauss-Legendre in 1/y
    using exact evaluations of T, so no truncation error enters. The grid must
    extend five damping widths beyond the poles for the tail map to be smooth.
    ``force_real`` zeroes Im T (control: the transform is then 0).
    """
    if not profile.square:
        raise ConfigError("conjugacy needs square T")
    A = profile.A
    ev = la.eigvals(A.A + 1j * profile.delta_p * np.eye(A.n))
    width = float(np.max(ev.imag)) if ev.size else 1.0
    lo, hi = float(ev.real.min()) - 5 * width, float(ev.real.max()) + 5 * width
    a, b = profile.v[0], profile.v[-1]
    if a > lo or b < hi:
        raise ConfigError(f"v grid too narrow for the tail completion: need [{lo:.4g}, {hi:.4g}]")
    n = profile.v.size
    centre = np.arange(n // 4, n - n // 4)
    im = _imag_part(profile.T)
    if force_real:
        im = np.zeros_like(im)
    flat = im.reshape(n, -1)
    HT = np.empty((centre.size, flat.shape[1]), dtype=complex)
    for k in range(0, centre.size, 256):
        HT[k:k + 256] = pv_weights(n, centre[k:k + 256]) @ flat
    HT = HT.reshape((centre.size,) + im.shape[1:])
    y, wy = _tail_nodes(a, b, max(b - a, 1.0) / 2)
    if not force_real:
        ty = _imag_part(profile.evaluate(y))
        x = profile.v[centre]
        K = wy[None, :] / (x[:, None] - y[None, :]) / np.pi
        HT += np.einsum("ij,jkl->ikl", K, ty)
    re = _real_part(profile.T[centre]) if not force_real else np.zeros_like(HT)
    dev = np.linalg.norm(re - HT, axis=(-2, -1))
    return ConjugacyResult(float(dev.max()), float(profile.hs.max()), profile.v[centre])


def hilbert_transform(profile_v, values, targets) -> np.ndarray:
    """Grid-only principal-value Hilbert transform of scalar samples at node indices ``targets``."""
    return pv_weights(len(profile_v), targets) @ np.asarray(values)


# ---------------------------------------------------------------------------
# weak-L1 level sets


def _level_measure(profile: SandwichProfile, t: float) -> float:
    v, hs = profile.v, profile.hs
    f = lambda x: float(profile.hs_at(x)[0]) - t
    above = hs > t
    if not above.any():
        return 0.0
    total = 0.0
    idx = np.flatnonzero(np.diff(above.astype(int)))
    edges = []
    for k in idx:
        edges.append(brentq(f, v[k], v[k + 1], xtol=1e-14, rtol=1e-15))
    # sub-grid runs opened at the ends extend outward until the profile drops below t
    if above[0]:
        step = profile.step
        left = v[0]
        while f(left - step) > 0:
            step *= 2
        edges.insert(0, brentq(f, left - step, left, xtol=1e-14, rtol=1e-15))
    if above[-1]:
        step = profile.step
        right = v[-1]
        while f(right + step) > 0:
            step *= 2
        edges.append(brentq(f, right, right + step, xtol=1e-14, rtol=1e-15))
    edges = np.asarray(edges)
    total = float(np.sum(edges[1::2] - edges[0::2]))
    return total


def weak_l1_sandwich(profile: SandwichProfile, t_grid=None, points: int = 17) -> TailProfile:
    """Measure of {v : ||T(v)||_HS > t} over the upper two decades of t.

    Crossings between grid points are refined by root finding on exact
    evaluations. ``constant`` is the fitted C_W: max over t of
    measure * t / (||M1||_HS ||M2||_HS).
    """
    top = float(profile.hs.max())
    if t_grid is None:
        t_grid = np.geomspace(top / 100.0, top, points)[:-1] if top > 0 else np.array([1.0])
    t_grid = np.sort(np.asarray(t_grid, dtype=float))[::-1]
    meas = np.array([_level_measure(profile, t) if t < top or top == 0 else 0.0 for t in t_grid])
    norm = np.linalg.norm(profile.M1, "fro") * np.linalg.norm(profile.M2, "fro")
    slope, se, _ = _fit_tail(t_grid, meas)
    cw = float(np.max(meas * t_grid) / norm) if norm > 0 else 0.0
    return TailProfile(t_grid, meas, slope, se, cw, extra={"hs_product": float(norm)})


# ---------------------------------------------------------------------------
# polarization


def polarization_residual(A: DissipativeOperator, M1, M2, v, delta_p: float = 0.0) -> float:
    """Relative residual of M1 R M2 = 1/4 sum_k i^k N_k* R N_k with N_k = M2 + i^k M1*.

    R = (A - v + i delta')^{-1}; every term on the right is a diagonal
    sandwich N* R N.
    """
    M1 = np.atleast_2d(np.asarray(M1, dtype=complex))
    M2 = np.atleast_2d(np.asarray(M2, dtype=complex))
    direct = _sandwich(A, M1, M2, v, delta_p)
    total = np.zeros_like(direct)
    for k in range(4):
        N = M2 + (1j ** k) * M1.conj().T
        total += (1j ** k) * _sandwich(A, N.conj().T, N, v, delta_p)
    total /= 4
    scale = np.linalg.norm(direct, axis=(-2, -1)).max()
    return float(np.linalg.norm(total - direct, axis=(-2, -1)).max() / max(scale, 1e-300))
