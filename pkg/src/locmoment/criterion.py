"""Finite-volume localization criterion and its consequences.

The boundary observable of a box B = B_alpha^L is

    b(L, E) = (1 + L)^{2(d-1)} E ||chi_alpha G^{(B)}(E + i eps) 1_{layer}||^s,

where the layer holds the grid points q of B with r < dist(q, B^c) <= 23r and
dist(q, B^c) is measured to the nearest grid point outside B (so in lattice
mode with r = 1 it is {L - 22 <= |q - alpha| <= L - 1}). With a user constant
M the criterion reads M b < 1 and the decay rate is gamma = -ln(M b).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import ModelSpec, OperatorHandle, build_hamiltonian, sample_disorder, sup_distance
from .moments import summarize
from .parallel import ordered_map
from .resolvent import EnergyPoint, Resolvent, _block_norms, linear_fit

LAYER_DEPTH = 23
Z95 = 1.959963984540054


def _point(z) -> EnergyPoint:
    if isinstance(z, EnergyPoint):
        return z
    return EnergyPoint(float(np.real(z)), float(np.imag(z)))


def mid_band(spec: ModelSpec) -> float:
    """Centre of the almost-sure spectrum [E0, E0 + 4d/h^2 + lam] of the lattice-type model."""
    h = float(spec.spacing)
    bg = spec.background
    v0 = bg["value"] if bg["kind"] == "constant" else float(np.mean(bg["table"]))
    return v0 + (4 * spec.dimension / h**2 + spec.disorder) / 2


# ---------------------------------------------------------------------------
# modified distance


def dist_modified(H: OperatorHandle, x, y) -> float:
    """min{|x - y|, dist(x, B^c) + dist(y, B^c)} in the sup norm.

    ``H`` supplies the box geometry (a full box or a ``sub_box``); on a
    torus there is no boundary and the plain distance is returned.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    plain = float(sup_distance(x, y, H.period))
    if H.box is None:
        return plain
    return min(plain, _bdist(H, x) + _bdist(H, y))


def _bdist(H: OperatorHandle, x) -> float:
    center, L = H.box
    h = float(H.spec.spacing)
    r = float(sup_distance(x, center, H.period))
    if r > L + 1e-9:
        raise ConfigError(f"point {np.atleast_1d(x).tolist()} lies outside the box")
    return (L + h) - r


def boundary_layer(H: OperatorHandle) -> np.ndarray:
    """Indices of the layer r < dist(q, B^c) <= 23r of a box."""
    r = float(H.spec.bump_radius)
    dist = H.boundary_distance()
    return np.flatnonzero((dist > r + 1e-9) & (dist <= LAYER_DEPTH * r + 1e-9))


# ---------------------------------------------------------------------------
# criterion


@dataclass(frozen=True, eq=False)
class CriterionReport:
    L: float
    E: float
    eps: float
    s: float
    N: int
    b: float
    b_ci: tuple
    M: float
    gamma: float
    loc_length: float
    passed: bool
    a_priori: float = float("nan")
    samples: np.ndarray = field(default=None, repr=False)

    def row(self) -> tuple:
        return (self.L, self.E, self.eps, self.s, self.N, self.b, self.b_ci[0], self.b_ci[1],
                self.M, self.gamma, self.loc_length, int(self.passed))


def criterion_eval(spec: ModelSpec, L: float, E: float, eps: float, s: float, N: int, M: float = 1.0,
                   alpha=None, seed: int = 0, estimator: str = "median-of-means",
                   workers: int | None = None) -> CriterionReport:
    """Monte-Carlo boundary observable b(L, E) and the criterion M b < 1.

    Parameters
    ----------
    spec : ModelSpec
        The ambient box; B_alpha^L must fit inside it unless it is periodic.
    L : float
        Box half-width, L > r0 + 23r.
    E, eps : float
        Energy and the fixed regularization eps > 0 at which b is evaluated.
    s : float
        In (0, 1/3).
    N : int
        Realizations, N >= 100.
    M : float
        Constant multiplying b; default 1.
    alpha : site, optional
        Box centre; the origin by default.

    Returns
    -------
    CriterionReport
        Also carries the measured a-priori level E ||chi_alpha G chi_alpha||^s.
    """
    if not 0.0 < s < 1.0 / 3.0:
        raise ConfigError("criterion needs s in (0, 1/3)")
    r, r0 = float(spec.bump_radius), float(spec.independence_radius)
    if L <= r0 + LAYER_DEPTH * r:
        raise ConfigError(f"criterion needs L > r0 + 23r = {r0 + LAYER_DEPTH * r:g}")
    if N < 100:
        raise ConfigError("criterion needs N >= 100")
    if eps <= 0:
        raise ConfigError("criterion is evaluated at fixed eps > 0")
    d = spec.dimension
    alpha = np.zeros(d) if alpha is None else np.atleast_1d(np.asarray(alpha, dtype=float))
    if not spec.periodic and np.max(np.abs(alpha)) + L > spec.half_width + 1e-9:
        raise ConfigError(f"box of half-width {L:g} around {alpha.tolist()} does not fit in the ambient box")
    if spec.periodic and 2 * L + spec.spacing > 2 * spec.half_width + 1e-9:
        raise ConfigError("box wraps around the torus")
    z = EnergyPoint(float(E), float(eps))

    def one(i):
        H = build_hamiltonian(spec, sample_disorder(spec, seed, i)).sub_box(alpha, L)
        layer = boundary_layer(H)
        chi = H.chi(alpha)
        rows = Resolvent(H, z).rows(chi)
        return _block_norms(rows[:, layer])[0], _block_norms(rows[:, chi])[0]

    data = np.array(ordered_map(one, range(N), workers))
    pref = (1.0 + L) ** (2 * (d - 1))
    vals = pref * data[:, 0] ** s
    b, ci = summarize(vals, estimator, seed=seed)
    a_priori = float(np.mean(data[:, 1] ** s))
    Mb = M * b
    gamma = -float(np.log(Mb)) if Mb > 0 else float("inf")
    passed = Mb < 1.0
    loc = 2 * L / gamma if passed and np.isfinite(gamma) else (0.0 if passed else float("nan"))
    return CriterionReport(float(L), float(E), float(eps), float(s), int(N), b, ci, float(M), gamma, loc,
                           bool(passed), a_priori, vals)


# ---------------------------------------------------------------------------
# shell kernel and iteration


def _lattice_points(center, lo, hi, d):
    """Integer points zeta with lo < |zeta - center| < hi (sup norm)."""
    c = np.round(np.atleast_1d(center)).astype(int)
    R = int(np.ceil(hi))
    ax = np.arange(-R, R + 1)
    grid = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    n = np.abs(grid).max(axis=1)
    keep = (n > lo + 1e-9) & (n < hi - 1e-9)
    return (grid[keep] + c).astype(float)


def shell_sites(spec: ModelSpec, x, L: float):
    """(S, S') for centre x: the inner shell L - 23r < |zeta - x| < L - 3r and the
    outer shell L + r0 - 13r < |zeta - x| < L + r0 + 23r."""
    r, r0, d = float(spec.bump_radius), float(spec.independence_radius), spec.dimension
    S = _lattice_points(x, L - LAYER_DEPTH * r, L - 3 * r, d)
    Sp = _lattice_points(x, L + r0 - 13 * r, L + r0 + LAYER_DEPTH * r, d)
    return S, Sp


@dataclass(frozen=True, eq=False)
class ShellKernel:
    L: float
    s: float
    z: EnergyPoint
    centers: np.ndarray
    a: np.ndarray
    a_ci: np.ndarray
    shell: np.ndarray = field(repr=False)
    outer_shell: np.ndarray = field(repr=False)
    r0: float = 2.0
    r: float = 1.0

    @property
    def a_max(self) -> float:
        return float(np.max(self.a))

    def rows(self):
        return [(*np.atleast_1d(c).tolist(), a, lo, hi) for c, a, (lo, hi) in zip(self.centers, self.a, self.a_ci)]


def shell_kernel(spec: ModelSpec, L: float, z, s: float, N: int, centers=None, seed: int = 0,
                 estimator: str = "median-of-means", workers: int | None = None) -> ShellKernel:
    """a(x; L) = L^{d-1} sum_{zeta in S} E ||chi_x G^{(B_x^L)}(z) chi_zeta||^s per centre.

    Every centre uses the same realizations, each restricted to its own box.
    """
    r = float(spec.bump_radius)
    if L <= LAYER_DEPTH * r:
        raise ConfigError(f"shell kernel needs L > 23r = {LAYER_DEPTH * r:g}")
    d = spec.dimension
    centers = np.zeros((1, d)) if centers is None else np.atleast_2d(np.asarray(centers, dtype=float))
    if centers.shape[1] != d:
        centers = centers.reshape(-1, d)
    z = _point(z)
    S0, Sp0 = shell_sites(spec, np.zeros(d), L)
    if S0.size == 0:
        raise ConfigError("empty shell: L too small")

    def one(i):
        H = build_hamiltonian(spec, sample_disorder(spec, seed, i))
        out = np.empty(len(centers))
        for k, x in enumerate(centers):
            B = H.sub_box(x, L)
            rows = Resolvent(B, z).rows(B.chi(x))
            tot = 0.0
            for zeta in S0 + x:
                if spec.periodic:
                    zeta = (zeta + spec.half_width) % (2 * spec.half_width) - spec.half_width
                tot += _block_norms(rows[:, B.chi(zeta)])[0] ** s
            out[k] = L ** (d - 1) * tot
        return out

    data = np.array(ordered_map(one, range(N), workers))
    a, ci = [], []
    for k in range(len(centers)):
        m, c = summarize(data[:, k], estimator, seed=seed)
        a.append(m)
        ci.append(c)
    return ShellKernel(float(L), float(s), z, centers, np.array(a), np.array(ci), S0, Sp0,
                       float(spec.independence_radius), r)


@dataclass(frozen=True)
class IterationBound:
    distances: np.ndarray
    bounds: np.ndarray
    contraction: float
    step: float
    rate: float
    criterion_rate: float | None = None


def decay_iterate(kernel: ShellKernel, coefficient: float, D, step: float | None = None,
                  base: float = 1.0, gamma: float | None = None) -> IterationBound:
    """Iterate the shell inequality to distance D.

    The bound contracts by q = coefficient * max_x a(x; L) per hop, where the
    coefficient multiplies the average over the outer shell (so its size is
    absorbed). Each hop advances at least ``step``, by default the inner
    radius L + r0 - 13r of the outer shell. bound(D) = base * q^{D/step} and
    the implied rate is -ln(q)/step; ``gamma`` adds gamma/2L for comparison.
    """
    L = kernel.L
    step = L + kernel.r0 - 13 * kernel.r if step is None else float(step)
    if step <= 0:
        raise ConfigError("iteration step must be positive")
    q = float(coefficient) * kernel.a_max
    if q >= 1:
        raise ConfigError(f"kernel is not contractive: coefficient * a = {q:.6g} >= 1")
    D = np.atleast_1d(np.asarray(D, dtype=float))
    k = D / step
    if np.any(np.abs(k - np.round(k)) > 1e-9):
        raise ConfigError("target distances must be multiples of the step")
    k = np.round(k)
    with np.errstate(divide="ignore"):
        bounds = base * np.where(k == 0, 1.0, q ** k)
        rate = -np.log(q) / step if q > 0 else float("inf")
    crit = gamma / (2 * L) if gamma is not None else None
    return IterationBound(D, bounds, q, step, float(rate), crit)


# ---------------------------------------------------------------------------
# decay fits


@dataclass(frozen=True, eq=False)
class DecayFit:
    mu: float
    A: float
    r2: float
    mu_se: float
    distances: np.ndarray
    log_moments: np.ndarray
    moments: np.ndarray
    ci: np.ndarray

    @property
    def mu_lower(self) -> float:
        """One-sided 95% lower confidence bound for mu."""
        return self.mu - 1.6448536269514722 * self.mu_se

    @property
    def positive(self) -> bool:
        return self.mu_lower > 0

    def rows(self):
        return [(float(d), float(m), float(lo), float(hi)) for d, m, (lo, hi) in
                zip(self.distances, self.moments, self.ci)]


def decay_fit(spec: ModelSpec, z, s: float, pairs, N: int, seed: int = 0, proxy: str = "chi",
              estimator: str = "median-of-means", shuffle: bool = False,
              workers: int | None = None) -> DecayFit:
    """Weighted fit ln E ||chi_x G chi_y||^s ~ ln A - mu dist_B(x, y) on the ambient box.

    Weights are inverse variances of the log-moments taken from the
    bootstrap intervals. ``shuffle`` permutes the distances (no-signal control).
    """
    from .moments import sample_block_norms

    z = _point(z)
    pairs = [(np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(y, float))) for x, y in pairs]
    H0 = build_hamiltonian(spec)
    dist = np.array([dist_modified(H0, x, y) for x, y in pairs])
    if np.unique(np.round(dist, 9)).size < 6:
        raise ConfigError("decay fit needs at least 6 distinct distances")
    norms = sample_block_norms(spec, [z], pairs, N, seed, proxy, workers)[:, 0, :] ** s
    means, cis = [], []
    for j in range(len(pairs)):
        m, c = summarize(norms[:, j], estimator, seed=seed)
        means.append(m)
        cis.append(c)
    means, cis = np.array(means), np.array(cis)
    bad = means <= 0
    if np.any(bad):
        raise ConfigError(f"non-positive moments for pairs {np.flatnonzero(bad).tolist()}")
    logs = np.log(means)
    half = np.maximum(np.log(cis[:, 1]) - np.log(np.maximum(cis[:, 0], 1e-300)), 1e-12) / 2
    w = (Z95 / half) ** 2
    if shuffle:
        dist = np.random.default_rng(seed).permutation(dist)
    slope, icpt, r2, se = linear_fit(dist, logs, w)
    return DecayFit(-slope, float(np.exp(icpt)), r2, se, dist, logs, means, cis)


# ---------------------------------------------------------------------------
# necessity


@dataclass(frozen=True, eq=False)
class NecessityResult:
    L: float | None
    interval: tuple | None
    best: tuple            # (L, M b) of the smallest product seen
    reports: list = field(repr=False, default_factory=list)

    @property
    def found(self) -> bool:
        return self.L is not None


def necessity_check(spec: ModelSpec, E: float, s: float, L_grid, fit: DecayFit, N: int, eps: float = 1e-3,
                    M: float = 1.0, holder_constant: float | None = None, n_energies: int = 9,
                    half_width: float | None = None, max_half_width: float = 1.0, seed: int = 0,
                    workers: int | None = None) -> NecessityResult:
    """Smallest L in the grid where the criterion passes, and the passing E'-interval there.

    The E' neighbourhood has half-width ((1 - M b)/(M C))^{1/s} with C the
    Hoelder constant of the boundary observable (e.g. from ``holder_scan``);
    ``half_width`` overrides it, and the result is capped at ``max_half_width``
    (a block-level constant can be far smaller than that of b, which would
    send the neighbourhood across the whole spectrum). The returned interval is the run of passing
    grid energies containing E.
    """
    if fit.mu <= 0:
        raise ConfigError("necessity check needs a decay fit with mu > 0")
    best = (None, np.inf)
    reports = []
    for L in sorted(L_grid):
        rep = criterion_eval(spec, L, E, eps, s, N, M, seed=seed, workers=workers)
        reports.append(rep)
        Mb = M * rep.b
        if Mb < best[1]:
            best = (float(L), Mb)
        if not rep.passed:
            continue
        if half_width is not None:
            w = float(half_width)
        elif holder_constant:
            w = ((1 - Mb) / (M * holder_constant)) ** (1 / s)
        else:
            w = 0.0
        w = min(w, max_half_width)
        if w <= 0:
            return NecessityResult(float(L), (E, E), best, reports)
        grid = np.linspace(E - w, E + w, n_energies)
        ok = []
        for Ep in grid:
            r = rep if Ep == E else criterion_eval(spec, L, Ep, eps, s, N, M, seed=seed, workers=workers)
            reports.append(r)
            ok.append(r.passed)
        ok = np.array(ok)
        c = n_energies // 2
        lo = c
        while lo > 0 and ok[lo - 1]:
            lo -= 1
        hi = c
        while hi < n_energies - 1 and ok[hi + 1]:
            hi += 1
        return NecessityResult(float(L), (float(grid[lo]), float(grid[hi])), best, reports)
    return NecessityResult(None, None, best, reports)
