"""Density of states, band-edge and Wegner probes, large disorder, good/bad decompositions.

Histograms are per unit volume: a bin holds E #{eigenvalues in bin} / |box|,
so the total over all bins is n_sites h^d / |box| = 1/h^d (one per site in
lattice mode). Quasi-periodic boxes are additionally averaged over a uniform
midpoint grid of quasi-momenta in [0, 2 pi)^d.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.stats as st

from .criterion import boundary_layer
from .errors import ConfigError
from .model import ModelSpec, build_hamiltonian, sample_disorder
from .moments import fm_disorder, summarize
from .parallel import ordered_map
from .resolvent import EnergyPoint, Resolvent, _block_norms, linear_fit

K_POINTS = 16


def _box(spec: ModelSpec, L=None, bc=None) -> ModelSpec:
    changes = {}
    if L is not None:
        changes["half_width"] = float(L)
    if bc is not None and bc != spec.boundary:
        changes["boundary"] = bc
        if bc == "quasi-periodic":
            changes["quasi_momentum"] = (0.0,) * spec.dimension
        elif spec.quasi_momentum is not None:
            changes["quasi_momentum"] = None
    return spec.replace(**changes) if changes else spec


def k_grid(d: int, K: int = K_POINTS) -> np.ndarray:
    """Midpoint grid 2 pi (j + 1/2)/K in each of d directions."""
    ax = 2 * np.pi * (np.arange(K) + 0.5) / K
    return np.array(list(itertools.product(ax, repeat=d)))


def _eigenvalues(spec: ModelSpec, seed: int, i: int, kspecs=None) -> list:
    real = sample_disorder(spec, seed, i)
    if kspecs is None:
        return [la.eigvalsh(build_hamiltonian(spec, real).dense())]
    return [la.eigvalsh(build_hamiltonian(sk, real).dense()) for sk in kspecs]


# ---------------------------------------------------------------------------
# density of states


@dataclass(frozen=True, eq=False)
class DOSReport:
    edges: np.ndarray
    mass: np.ndarray          # per unit volume
    L: float
    volume: float
    n_eigs: int
    outside: float            # mass per unit volume outside the bins
    k_points: int | None = None

    @property
    def total(self) -> float:
        return float(self.mass.sum() + self.outside)

    def normalized(self) -> np.ndarray:
        """Bin masses as fractions of the total."""
        return self.mass / self.total

    def integrated(self) -> np.ndarray:
        """Integrated density (fraction of states) at the upper bin edges, assuming nothing below the bins."""
        return np.cumsum(self.mass) / self.total

    def rows(self):
        return [(self.L, float(a), float(b), float(m)) for a, b, m in zip(self.edges[:-1], self.edges[1:], self.mass)]


def dos_estimate(spec: ModelSpec, L=None, bins=64, N: int = 20, bc: str | None = None, k_points: int = K_POINTS,
                 seed: int = 0, workers: int | None = None) -> DOSReport:
    """Monte-Carlo eigenvalue histogram per unit volume.

    Parameters
    ----------
    spec : ModelSpec
    L : float, optional
        Half-width override.
    bins : int or array_like
        Bin edges, or a count spread over [E0 - 0.1, top + 0.1] with top the
        upper edge of the almost-sure spectrum.
    N : int
        Realizations (>= 20).
    bc : str, optional
        Boundary override; ``"quasi-periodic"`` averages over ``k_points``^d quasi-momenta.
    """
    if N < 20:
        raise ConfigError("dos_estimate needs N >= 20")
    s = _box(spec, L, bc)
    kpts = k_grid(s.dimension, k_points) if s.boundary == "quasi-periodic" else None
    kspecs = None if kpts is None else [s.replace(quasi_momentum=tuple(float(v) for v in k)) for k in kpts]
    if np.ndim(bins) == 0:
        h = float(s.spacing)
        bg = s.background
        lo = min(0.0, bg["value"] if bg["kind"] == "constant" else float(np.min(bg["table"])))
        hi = (bg["value"] if bg["kind"] == "constant" else float(np.max(bg["table"]))) + 4 * s.dimension / h**2 + s.disorder
        edges = np.linspace(lo - 0.1, hi + 0.1, int(bins) + 1)
    else:
        edges = np.asarray(bins, dtype=float)
    runs = ordered_map(lambda i: _eigenvalues(s, seed, i, kspecs), range(N), workers)
    counts = np.zeros(edges.size - 1)
    n_total = 0
    for evs in runs:
        for ev in evs:
            counts += np.histogram(ev, edges)[0]
            n_total += ev.size
    reps = N * (1 if kpts is None else len(kpts))
    vol = s.volume
    mass = counts / reps / vol
    outside = (n_total - counts.sum()) / reps / vol
    return DOSReport(edges, mass, float(s.half_width), vol, n_total // reps, outside,
                     None if kpts is None else int(k_points))


def free_ids(E) -> np.ndarray:
    """Integrated density of states (1/pi) arccos(1 - E/2) of the free 1d lattice Laplacian."""
    E = np.clip(np.asarray(E, dtype=float), 0.0, 4.0)
    return np.arccos(1 - E / 2) / np.pi


# ---------------------------------------------------------------------------
# band edge and Wegner probes


@dataclass(frozen=True, eq=False)
class LifshitzTable:
    rows: list               # (L, width, mass, ci_lo, ci_hi)
    exponent: float
    exponent_se: float
    E0: float


def lifshitz_probe(spec: ModelSpec, L_grid, beta: float, C1: float, N: int, E0: float | None = None,
                   seed: int = 0, workers: int | None = None) -> LifshitzTable:
    """kappa_L([E0', E0' + C1 L^{-beta}]) against L.

    E0' is the smallest eigenvalue seen over all boxes and realizations
    unless given. ``exponent`` is minus the log-log slope of the mass in L.
    """
    if not 0.0 < beta < 2.0:
        raise ConfigError("beta must lie in (0, 2)")
    L_grid = sorted(float(L) for L in L_grid)
    spectra = {}
    for L in L_grid:
        s = _box(spec, L)
        spectra[L] = (s.volume, ordered_map(lambda i: _eigenvalues(s, seed, i)[0], range(N), workers))
    if E0 is None:
        E0 = min(float(ev[0]) for _, evs in spectra.values() for ev in evs)
    rows = []
    for L in L_grid:
        vol, evs = spectra[L]
        w = C1 * L ** (-beta)
        per = np.array([np.sum((ev >= E0) & (ev <= E0 + w)) for ev in evs]) / vol
        if w <= 0:
            per = np.zeros_like(per)
        m, ci = summarize(per, "plain-mean", seed=seed)
        rows.append((L, w, m, ci[0], ci[1]))
    Ls = np.array([r[0] for r in rows])
    ms = np.array([r[2] for r in rows])
    ok = ms > 0
    if ok.sum() >= 2:
        slope, _, _, se = linear_fit(np.log(Ls[ok]), np.log(ms[ok]))
        exponent = -slope
    else:
        exponent, se = float("nan"), float("nan")
    return LifshitzTable(rows, float(exponent), float(se), float(E0))


@dataclass(frozen=True, eq=False)
class WegnerReport:
    rows: list               # (E, density, ci_lo, ci_hi, density_half)
    bound: float
    bound_half: float

    @property
    def stable(self) -> bool:
        if not self.rows or self.bound == 0:
            return True
        return abs(self.bound_half / self.bound - 1) <= 0.25


def wegner_probe(spec: ModelSpec, L, E_grid, dE: float, N: int, seed: int = 0,
                 workers: int | None = None) -> WegnerReport:
    """max over E of kappa_L([E - dE, E + dE]) / (2 dE), also at dE/2."""
    if dE <= 0:
        raise ConfigError("dE must be positive")
    E_grid = np.atleast_1d(np.asarray(E_grid, dtype=float))
    if E_grid.size == 0:
        return WegnerReport([], 0.0, 0.0)
    s = _box(spec, L)
    evs = ordered_map(lambda i: _eigenvalues(s, seed, i)[0], range(N), workers)
    vol = s.volume

    def density(E, w):
        return np.array([np.sum(np.abs(ev - E) <= w) for ev in evs]) / vol / (2 * w)

    rows = []
    for E in E_grid:
        m, ci = summarize(density(E, dE), "plain-mean", seed=seed)
        rows.append((float(E), m, ci[0], ci[1], float(density(E, dE / 2).mean())))
    return WegnerReport(rows, max(r[1] for r in rows), max(r[4] for r in rows))


# ---------------------------------------------------------------------------
# large disorder


@dataclass(frozen=True, eq=False)
class LargeDisorderScan:
    rows: list                # (lam, E, moment, ci_lo, ci_hi, passed or -1)
    first_pass: dict          # E -> first lam with a passing criterion (or None)
    spearman: dict            # E -> (rho, one-sided p-value)

    def moments(self, E):
        return np.array([r[2] for r in self.rows if r[1] == E])

    def trend_negative(self, E, level: float = 0.05) -> bool:
        rho, p = self.spearman[E]
        return bool(rho < 0 and p < level)


def large_disorder_scan(spec: ModelSpec, lam_grid, L: float, E_grid, s: float, N: int, pair=((0.0,), (3.0,)),
                        eps: float = 1e-3, criterion_L: float | None = None, seed: int = 0,
                        workers: int | None = None) -> LargeDisorderScan:
    """E ||U_beta G^{(B^L)}(E + i eps) U_zeta||^s on a lambda grid.

    All lambda share the same coupling draws (common random numbers). With
    ``criterion_L`` the criterion is evaluated at every (lambda, E) and the
    first passing lambda per E recorded. The trend test is a one-sided
    Spearman test of the moments against lambda.
    """
    from .criterion import criterion_eval

    lam_grid = [float(v) for v in lam_grid]
    if any(b <= a for a, b in zip(lam_grid, lam_grid[1:])):
        raise ConfigError("lambda grid must be increasing")
    rows, first, spear = [], {}, {}
    for E in E_grid:
        E = float(E)
        first[E] = None
        vals = []
        for lam in lam_grid:
            sl = _box(spec, L).replace(disorder=lam)
            est = fm_disorder(sl, EnergyPoint(E, eps), pair[0], pair[1], s, N, proxy="bump", seed=seed,
                              workers=workers)
            flag = -1
            if criterion_L is not None:
                rep = criterion_eval(spec.replace(disorder=lam, half_width=max(criterion_L, spec.half_width)),
                                     criterion_L, E, eps, min(s, 0.3), N, seed=seed, workers=workers)
                flag = int(rep.passed)
                if rep.passed and first[E] is None:
                    first[E] = lam
            rows.append((lam, E, est.mean, est.ci[0], est.ci[1], flag))
            vals.append(est.mean)
        if len(lam_grid) >= 3:
            res = st.spearmanr(lam_grid, vals, alternative="less")
            spear[E] = (float(res.statistic), float(res.pvalue))
        else:
            spear[E] = (float("nan"), float("nan"))
    return LargeDisorderScan(rows, first, spear)


# ---------------------------------------------------------------------------
# good / bad decomposition


@dataclass(frozen=True, eq=False)
class GoodBadReport:
    rows: list               # (L, p_bad, ci_lo, ci_hi, combined_bound)
    moments: list            # (L, E X^s, ci_lo, ci_hi, E X^t)
    A: float
    mu: float
    s: float
    t: float
    xi: float
    xi_se: float
    d: int

    @property
    def admissible(self) -> bool:
        return bool(np.isfinite(self.xi) and self.xi > 2 * (self.d - 1))

    def combined(self, L, p_bad, mt) -> float:
        return combined_bound(self.A, self.mu, self.s, self.t, L, p_bad, mt)

    @property
    def beats_direct(self) -> list:
        """Per L: combined bound within the direct moment's upper CI."""
        return [r[4] <= m[3] for r, m in zip(self.rows, self.moments)]


def combined_bound(A, mu, s, t, L, p_bad, mt) -> float:
    """A^s e^{-s mu L} + (E X^t)^{s/t} P(bad)^{1 - s/t}."""
    return float(A ** s * np.exp(-s * mu * L) + mt ** (s / t) * p_bad ** (1 - s / t))


def msa_bridge(spec: ModelSpec, L_grid, E: float, A: float, mu: float, s: float, t: float, N: int,
               eps: float = 1e-3, seed: int = 0, workers: int | None = None) -> GoodBadReport:
    """Split E X^s, X = ||chi_a G^{(B^L)} 1_layer||, over the events X <= A e^{-mu L} and its complement.

    P(bad) carries a Clopper-Pearson interval, or (0, 3/N) by the rule of
    three when no bad event occurs. The exponent xi is minus the log-log slope
    of P(bad) in L over the L with at least one bad event.
    """
    if not 0 < s < t < 1:
        raise ConfigError("need 0 < s < t < 1")
    L_grid = sorted(float(L) for L in L_grid)
    if len(L_grid) < 3:
        raise ConfigError("msa_bridge needs at least 3 values of L")
    d = spec.dimension
    z = EnergyPoint(float(E), float(eps))
    rows, moms = [], []
    for L in L_grid:
        sL = _box(spec, L)

        def one(i):
            H = build_hamiltonian(sL, sample_disorder(sL, seed, i))
            chi = H.chi(np.zeros(d))
            layer = boundary_layer(H)
            return _block_norms(Resolvent(H, z).rows(chi)[:, layer])[0]

        X = np.array(ordered_map(one, range(N), workers))
        bad = X > A * np.exp(-mu * L)
        k = int(bad.sum())
        p = k / N
        if k == 0:
            lo, hi = 0.0, 3.0 / N
        else:
            ci = st.binomtest(k, N).proportion_ci(0.95, method="exact")
            lo, hi = float(ci.low), float(ci.high)
        ms, mci = summarize(X ** s, "plain-mean", seed=seed)
        mt = float(np.mean(X ** t))
        rows.append((L, p, lo, hi, combined_bound(A, mu, s, t, L, p, mt)))
        moms.append((L, ms, mci[0], mci[1], mt))
    Ls = np.array([r[0] for r in rows])
    ps = np.array([r[1] for r in rows])
    ok = ps > 0
    if ok.sum() >= 2:
        slope, _, _, se = linear_fit(np.log(Ls[ok]), np.log(ps[ok]))
        xi = -slope
    else:
        xi, se = float("nan"), float("nan")
    return GoodBadReport(rows, moms, float(A), float(mu), float(s), float(t), float(xi), float(se), d)
