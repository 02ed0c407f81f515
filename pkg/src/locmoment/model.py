"""Finite-volume random Schrödinger operators H = H0 + lam * sum_a eta_a U_a.

Two discretizations share one code path:

* ``lattice``: h = 1, single-site bumps, i.e. the Anderson model;
* ``continuum-grid``: finite differences on a grid of spacing h (1/h integer),
  bumps sampled on the grid around the integer centres.

Disorder is drawn through a counter-based generator (Philox keyed by a
``SeedSequence`` of ``(seed, index)``), so realization ``index`` of a run is
reproducible independently of the order in which realizations are drawn.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.linalg as la
import scipy.sparse.linalg as sla

from .errors import ConfigError, NumericalError

MODES = ("lattice", "continuum-grid")
PROFILES = ("indicator-ball", "tent")
BOUNDARIES = ("dirichlet", "neumann", "periodic", "quasi-periodic")
TABLE_POINTS = 1024
_TOL = 1e-12


# ---------------------------------------------------------------------------
# coupling distributions


class Distribution:
    """Law of a single coupling eta on [0, 1].

    ``{"kind": "uniform"}`` or ``{"kind": "table", "density": [...]}`` where
    the table holds density values at equispaced nodes of [0, 1]; the density
    is the piecewise-linear interpolant and must integrate to one.
    """

    def __init__(self, desc: dict):
        kind = desc.get("kind", "uniform")
        unknown = set(desc) - {"kind", "density"}
        if unknown:
            raise ConfigError(f"distribution: unknown fields {sorted(unknown)}")
        self.kind = kind
        if kind == "uniform":
            rho = np.ones(2)
        elif kind == "table":
            rho = np.asarray(desc.get("density", ()), dtype=float)
            if rho.ndim != 1 or rho.size < 2:
                raise ConfigError("distribution.density: need a 1-d table with >= 2 values")
            if np.any(rho < 0) or not np.all(np.isfinite(rho)):
                raise ConfigError("distribution.density: values must be finite and >= 0")
        else:
            raise ConfigError(f"distribution.kind: unknown law {kind!r}")
        self.nodes = np.linspace(0.0, 1.0, rho.size)
        self.density = rho
        width = self.nodes[1] - self.nodes[0]
        seg = 0.5 * width * (rho[1:] + rho[:-1])
        total = seg.sum()
        if abs(total - 1.0) > _TOL:
            raise ConfigError(f"distribution.density integrates to {total!r}, not 1 (tolerance 1e-12)")
        self.cdf_nodes = np.concatenate([[0.0], np.cumsum(seg)])
        self.bound = float(rho.max())  # D
        # Lipschitz log-density needs a strictly positive density
        self.log_lipschitz = bool(np.all(rho > 0))

    def pdf(self, x):
        return np.interp(x, self.nodes, self.density)

    def cdf(self, x):
        x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
        w = self.nodes[1] - self.nodes[0]
        k = np.minimum((x / w).astype(int), self.nodes.size - 2)
        tau = x - self.nodes[k]
        r0 = self.density[k]
        slope = (self.density[k + 1] - r0) / w
        return self.cdf_nodes[k] + r0 * tau + 0.5 * slope * tau**2

    def ppf(self, u):
        """Exact inverse of the piecewise-quadratic CDF (monotone)."""
        u = np.asarray(u, dtype=float)
        if self.kind == "uniform":
            return u.copy()
        w = self.nodes[1] - self.nodes[0]
        k = np.searchsorted(self.cdf_nodes, u, side="right") - 1
        k = np.clip(k, 0, self.nodes.size - 2)
        r0 = self.density[k]
        slope = (self.density[k + 1] - r0) / w
        du = np.maximum(u - self.cdf_nodes[k], 0.0)
        # solve r0*tau + slope*tau^2/2 = du in the cancellation-free form
        disc = np.sqrt(np.maximum(r0**2 + 2.0 * slope * du, 0.0))
        denom = r0 + disc
        with np.errstate(divide="ignore", invalid="ignore"):
            tau = np.where(denom > 0, 2.0 * du / denom, 0.0)
        return np.clip(self.nodes[k] + np.clip(tau, 0.0, w), 0.0, 1.0)


def tabulated_density(func, points: int = TABLE_POINTS) -> dict:
    """Distribution description from a callable density, normalized by trapezoid."""
    x = np.linspace(0.0, 1.0, points)
    rho = np.asarray(func(x), dtype=float)
    rho = rho / np.trapezoid(rho, x)
    return {"kind": "table", "density": rho.tolist()}


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class ModelSpec:
    """Declarative random operator family on the box [-L, L]^d.

    Field names are the stable JSON keys. ``background`` is
    ``{"kind": "constant", "value": v}`` or ``{"kind": "periodic", "table": [...]}``
    (values on one unit cell of the grid, shape ``(1/h,)*d``).
    """

    dimension: int = 1
    mode: str = "lattice"
    half_width: float = 10.0
    spacing: float = 1.0
    bump_radius: float = 1.0
    bump_profile: str = "indicator-ball"
    background: dict = field(default_factory=lambda: {"kind": "constant", "value": 0.0})
    flux: float = 0.0
    disorder: float = 0.0
    distribution: dict = field(default_factory=lambda: {"kind": "uniform"})
    independence_radius: float = 2.0
    boundary: str = "dirichlet"
    quasi_momentum: tuple | None = None

    def __post_init__(self):
        d = self.dimension
        if d not in (1, 2):
            raise ConfigError("dimension: must be 1 or 2")
        if self.mode not in MODES:
            raise ConfigError(f"mode: expected one of {MODES}")
        h = float(self.spacing)
        if h <= 0 or abs(1.0 / h - round(1.0 / h)) > 1e-9:
            raise ConfigError("spacing: h must divide 1")
        if self.mode == "lattice" and h != 1.0:
            raise ConfigError("spacing: lattice mode requires h = 1")
        L = float(self.half_width)
        if L < 0 or abs(L / h - round(L / h)) > 1e-9:
            raise ConfigError("half_width: must be a non-negative multiple of the spacing")
        if self.bump_radius <= 0:
            raise ConfigError("bump_radius: must be positive")
        if self.bump_profile not in PROFILES:
            raise ConfigError(f"bump_profile: expected one of {PROFILES}")
        if self.disorder < 0:
            raise ConfigError("disorder: lambda must be >= 0")
        if self.independence_radius < 2 * self.bump_radius - _TOL:
            raise ConfigError("independence_radius: r0 >= 2r required")
        if self.boundary not in BOUNDARIES:
            raise ConfigError(f"boundary: expected one of {BOUNDARIES}")
        if self.quasi_momentum is not None:
            if self.boundary != "quasi-periodic":
                raise ConfigError("quasi_momentum: only allowed with quasi-periodic boundary")
            k = tuple(float(v) for v in self.quasi_momentum)
            if len(k) != d:
                raise ConfigError("quasi_momentum: length must equal dimension")
            object.__setattr__(self, "quasi_momentum", k)
        elif self.boundary == "quasi-periodic":
            raise ConfigError("quasi_momentum: required for quasi-periodic boundary")
        if self.flux != 0.0 and d != 2:
            raise ConfigError("flux: magnetic flux needs dimension 2")
        if self.periodic and self.flux != 0.0:
            nx = self.axis.size
            if abs(self.flux * nx - round(self.flux * nx)) > 1e-9:
                raise ConfigError("flux: periodic wrap needs flux * (sites per row) integer")
        if self.periodic and L == 0:
            raise ConfigError("half_width: periodic box needs L > 0")
        bg = dict(self.background)
        if bg.get("kind") == "constant":
            if set(bg) - {"kind", "value"}:
                raise ConfigError("background: unknown fields")
        elif bg.get("kind") == "periodic":
            if set(bg) - {"kind", "table"}:
                raise ConfigError("background: unknown fields")
            tab = np.asarray(bg.get("table"), dtype=float)
            m = int(round(1.0 / h))
            if tab.shape != (m,) * d:
                raise ConfigError(f"background.table: expected shape {(m,) * d}")
        else:
            raise ConfigError("background.kind: expected constant or periodic")
        self.law  # validates the distribution
        if self.mode == "continuum-grid" and L < self.bump_radius - _TOL and not self.periodic:
            raise ConfigError("half_width: box too small to contain one bump")

    # -- serialization --------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"model: unknown fields {sorted(unknown)}")
        data = dict(data)
        if data.get("quasi_momentum") is not None:
            data["quasi_momentum"] = tuple(data["quasi_momentum"])
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    # -- derived geometry -------------------------------------------------

    @cached_property
    def law(self) -> Distribution:
        return Distribution(self.distribution)

    @property
    def lattice(self) -> bool:
        return self.mode == "lattice"

    @property
    def periodic(self) -> bool:
        return self.boundary in ("periodic", "quasi-periodic")

    @property
    def period(self) -> float | None:
        return 2.0 * self.half_width if self.periodic else None

    @cached_property
    def axis(self) -> np.ndarray:
        h, L = float(self.spacing), float(self.half_width)
        m = int(round(2 * L / h)) + (0 if self.periodic else 1)
        return -L + h * np.arange(m)

    @property
    def shape(self) -> tuple:
        return (self.axis.size,) * self.dimension

    @property
    def n_sites(self) -> int:
        return self.axis.size ** self.dimension

    @property
    def volume(self) -> float:
        return self.n_sites * float(self.spacing) ** self.dimension

    @cached_property
    def coords(self) -> np.ndarray:
        grids = np.meshgrid(*([self.axis] * self.dimension), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @cached_property
    def centers(self) -> np.ndarray:
        """Integer sites of the box (the coupling index set)."""
        if self.lattice:
            return self.coords.copy()
        ax = self.axis
        ints = np.unique(np.round(ax[np.abs(ax - np.round(ax)) < 1e-9]))
        grids = np.meshgrid(*([ints] * self.dimension), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    @property
    def n_centers(self) -> int:
        return self.centers.shape[0]


def sup_distance(a, b, period=None):
    """Sup-norm distance, minimal image when ``period`` is given."""
    diff = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    if period is not None:
        diff = np.minimum(diff, period - diff)
    return diff.max(axis=-1)


def bump_matrix(spec: ModelSpec) -> sp.csr_matrix:
    """Sparse (n_sites, n_centers) matrix whose column a holds U_a on the grid."""
    if spec.lattice:
        return sp.identity(spec.n_sites, format="csr")
    q, c, r = spec.coords, spec.centers, float(spec.bump_radius)
    rows, cols, vals = [], [], []
    for j, alpha in enumerate(c):
        diff = np.abs(q - alpha)
        if spec.period is not None:
            diff = np.minimum(diff, spec.period - diff)
        if spec.bump_profile == "indicator-ball":
            w = (diff.max(axis=1) <= r + 1e-9).astype(float)
        else:
            w = np.prod(np.clip(1.0 - diff / r, 0.0, None), axis=1)
        idx = np.flatnonzero(w > 0)
        rows.append(idx)
        cols.append(np.full(idx.size, j))
        vals.append(w[idx])
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(spec.n_sites, spec.n_centers),
    )


def covering_scan(spec: ModelSpec) -> tuple[float, float]:
    """Return (min F, max F) of the covering function F = sum_a U_a over the grid."""
    F = np.asarray(bump_matrix(spec).sum(axis=1)).ravel()
    return float(F.min()), float(F.max())


def background_potential(spec: ModelSpec) -> np.ndarray:
    bg = spec.background
    if bg["kind"] == "constant":
        return np.full(spec.n_sites, float(bg.get("value", 0.0)))
    tab = np.asarray(bg["table"], dtype=float)
    m = tab.shape[0]
    h = float(spec.spacing)
    idx = np.mod(np.round(spec.coords / h).astype(int), m)
    return tab[tuple(idx.T)]


# ---------------------------------------------------------------------------
# disorder


@dataclass(frozen=True, eq=False)
class Realization:
    """One disorder draw: couplings eta indexed by the integer sites of the box."""

    eta: np.ndarray
    seed: int
    spec: ModelSpec
    index: int = 0

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float)
        if eta.shape != (self.spec.n_centers,):
            raise ConfigError("realization does not match the spec's site set")
        if np.any(eta < 0) or np.any(eta > 1):
            raise ConfigError("couplings must lie in [0, 1]")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)

    def with_coupling(self, alpha: int, value: float) -> "Realization":
        eta = self.eta.copy()
        eta[alpha] = value
        return Realization(eta, self.seed, self.spec, self.index)


def child_seed(seed: int, index: int) -> int:
    """Deterministic 64-bit child seed for item ``index`` of a run seeded by ``seed``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_stream(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based stream for realization ``index`` (Philox keyed by seed)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(index),))))


def sample_disorder(spec: ModelSpec, seed: int, index: int = 0) -> Realization:
    """Draw i.i.d. couplings by inverse CDF.

    Parameters
    ----------
    spec : ModelSpec
    seed : int
        Master seed (64-bit).
    index : int, optional
        Realization counter; distinct indices give independent streams.

    Returns
    -------
    Realization
    """
    u = rng_stream(seed, index).random(spec.n_centers)
    return Realization(spec.law.ppf(u), int(seed), spec, int(index))


def zero_realization(spec: ModelSpec) -> Realization:
    return Realization(np.zeros(spec.n_centers), 0, spec)


# ---------------------------------------------------------------------------
# blow-up decomposition


@dataclass(frozen=True)
class BlowUpDecomposition:
    n: int
    Y: int
    X: float
    density_bound: float


def blow_up_decompose(x: float, n: int, law: Distribution | None = None) -> BlowUpDecomposition:
    """Split n*x = Y + X with Y integer in [0, n-1] and X in [0, 1].

    ``density_bound`` is the sup over cells of the conditional density of X
    given Y (1 for the uniform law).
    """
    if not 0.0 <= x <= 1.0:
        raise ConfigError("blow_up_decompose: x must lie in [0, 1]")
    if n < 1:
        raise ConfigError("blow_up_decompose: n must be >= 1")
    nx = n * x
    Y = min(int(math.floor(nx)), n - 1)
    X = nx - Y
    law = law or Distribution({"kind": "uniform"})
    return BlowUpDecomposition(n, Y, X, conditional_density_bound(law, n))


def conditional_density_bound(law: Distribution, n: int) -> float:
    edges = np.linspace(0.0, 1.0, n + 1)
    mass = np.diff(law.cdf(edges))
    best = 0.0
    for j in range(n):
        if mass[j] <= 0:
            continue
        inner = law.nodes[(law.nodes > edges[j]) & (law.nodes < edges[j + 1])]
        pts = np.concatenate([[edges[j], edges[j + 1]], inner])
        best = max(best, float(law.pdf(pts).max() / (n * mass[j])))
    return best


# ---------------------------------------------------------------------------
# operators


def _laplacian(spec: ModelSpec, gauge=None) -> sp.csr_matrix:
    """Finite-difference -Laplacian with Peierls phases and the requested BC."""
    d, h = spec.dimension, float(spec.spacing)
    shape = spec.shape
    n = spec.n_sites
    idx = np.arange(n).reshape(shape)
    rows, cols, vals = [], [], []
    degree = np.zeros(n)
    k = spec.quasi_momentum or (0.0,) * d
    for j in range(d):
        m = shape[j]
        src = np.take(idx, np.arange(m - 1), axis=j).ravel()
        dst = np.take(idx, np.arange(1, m), axis=j).ravel()
        phase = np.zeros(src.size)
        if spec.periodic and m >= 2:
            wsrc = np.take(idx, [m - 1], axis=j).ravel()
            wdst = np.take(idx, [0], axis=j).ravel()
            src = np.concatenate([src, wsrc])
            dst = np.concatenate([dst, wdst])
            phase = np.concatenate([phase, np.full(wsrc.size, k[j])])
        elif spec.periodic:
            src = np.concatenate([src, idx.ravel()])
            dst = np.concatenate([dst, idx.ravel()])
            phase = np.concatenate([phase, np.full(n, k[j])])
        if spec.flux != 0.0 and j == 1:
            # Landau gauge: links along axis 1 carry 2*pi*flux*(row index)
            row = np.unravel_index(src, shape)[0]
            phase = phase + 2 * np.pi * spec.flux * row
        if gauge is not None:
            g = np.asarray(gauge, dtype=float)
            phase = phase + g[dst] - g[src]
        # hopping dst <- src: H[dst, src] = -exp(i phase)/h^2
        amp = -np.exp(1j * phase) / h**2
        rows += [dst, src]
        cols += [src, dst]
        vals += [amp, amp.conj()]
        np.add.at(degree, src, 1)
        np.add.at(degree, dst, 1)
    if spec.boundary == "neumann":
        diag = degree / h**2
    else:
        diag = np.full(n, 2.0 * d / h**2)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag.astype(complex))
    M = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    if spec.flux == 0.0 and gauge is None and not any(k):
        M = M.real.tocsr()
    M.sum_duplicates()
    return M


class OperatorHandle:
    """Assembled finite-volume Hamiltonian with its geometry.

    Attributes
    ----------
    matrix : scipy.sparse.csr_matrix
        H restricted to the box (real when no phases are present).
    free : scipy.sparse.csr_matrix
        H0 = -Laplacian + V0 on the same sites.
    coords : ndarray, shape (n, d)
    bumps : scipy.sparse.csr_matrix, shape (n, n_centers)
    """

    def __init__(self, matrix, free, coords, spec, realization, bumps, period=None, sites=None,
                 box=None):
        self.matrix = matrix.tocsr()
        self.free = free.tocsr()
        self.coords = coords
        self.spec = spec
        self.realization = realization
        self.bumps = bumps.tocsr()
        self.period = period
        self.sites = np.arange(coords.shape[0]) if sites is None else sites
        self.box = box  # (center, half-width) or None for a torus / irregular set

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def boundary(self) -> str:
        return self.spec.boundary

    @property
    def weight(self) -> float:
        return float(self.spec.spacing) ** self.spec.dimension

    @property
    def disorder(self) -> float:
        return float(self.spec.disorder)

    @cached_property
    def E0(self) -> float:
        """Smallest eigenvalue of the free part on this box."""
        return float(_extreme_eigenvalue(self.free))

    @cached_property
    def spectral_bottom(self) -> float:
        return float(_extreme_eigenvalue(self.matrix))

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    # -- geometry ------------------------------------------------------

    def distance(self, a, b):
        return sup_distance(a, b, self.period)

    def index_of(self, x) -> int:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        dist = self.distance(self.coords, x)
        i = int(np.argmin(dist))
        if dist[i] > 1e-9:
            raise ConfigError(f"point {x.tolist()} is not a grid site of this box")
        return i

    def ball(self, x, radius, closed=False) -> np.ndarray:
        """Grid indices q with |q - x| < radius (or <= when closed)."""
        dist = self.distance(self.coords, np.atleast_1d(np.asarray(x, dtype=float)))
        mask = dist <= radius + 1e-9 if closed else dist < radius - 1e-9
        return np.flatnonzero(mask)

    def chi(self, x) -> np.ndarray:
        """Support of chi_x: the single site in lattice mode, the open r-ball otherwise."""
        if self.spec.lattice:
            return np.array([self.index_of(x)])
        idx = self.ball(x, float(self.spec.bump_radius))
        if idx.size == 0:
            raise ConfigError(f"chi_x empty at {np.atleast_1d(x).tolist()}")
        return idx

    def center_index(self, alpha) -> int:
        c = self.spec.centers
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        dist = sup_distance(c, alpha)
        i = int(np.argmin(dist))
        if dist[i] > 1e-9:
            raise ConfigError(f"{alpha.tolist()} is not an integer site of the box")
        return i

    def bump(self, alpha) -> np.ndarray:
        """U_alpha as a grid vector on this box."""
        j = self.center_index(alpha)
        return np.asarray(self.bumps[:, j].toarray()).ravel()

    def with_coupling(self, alpha, value: float) -> "OperatorHandle":
        """Same operator with eta_alpha replaced by ``value``."""
        j = self.center_index(alpha)
        old = self.realization.eta[j]
        u = np.asarray(self.bumps[:, j].toarray()).ravel()
        delta = sp.diags(self.disorder * (value - old) * u)
        real = self.realization.with_coupling(j, value)
        return OperatorHandle(
            (self.matrix + delta).tocsr(), self.free, self.coords, self.spec, real,
            self.bumps, self.period, self.sites, self.box,
        )

    def restrict(self, mask, box=None) -> "OperatorHandle":
        """Dirichlet restriction to the grid points selected by ``mask``."""
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        sub = lambda M: M[idx][:, idx]
        return OperatorHandle(
            sub(self.matrix), sub(self.free), self.coords[idx], self.spec, self.realization,
            self.bumps[idx], self.period, self.sites[idx], box,
        )

    def sub_box(self, x, L) -> "OperatorHandle":
        """Restriction to B_x^L = {q : |q - x| <= L}."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self.restrict(self.ball(x, L, closed=True), box=(x, float(L)))

    def boundary_distance(self, idx=None) -> np.ndarray:
        """dist(q, complement of the box), measured to the nearest grid point outside.

        Only defined for boxes (the full box or a ``sub_box``); a full periodic
        torus has no boundary and returns ``inf``.
        """
        coords = self.coords if idx is None else self.coords[idx]
        if self.box is None:
            return np.full(coords.shape[0], np.inf)
        center, L = self.box
        h = float(self.spec.spacing)
        return (L + h) - self.distance(coords, center)


def _extreme_eigenvalue(M) -> float:
    n = M.shape[0]
    if n <= 2000:
        return la.eigvalsh(M.toarray(), subset_by_index=[0, 0])[0]
    return sla.eigsh(M, k=1, which="SA", return_eigenvectors=False, tol=1e-12)[0]


class _FreeParts:
    """Spec-level cache: free operator, bump matrix and diagonal positions."""

    def __init__(self, spec: ModelSpec, gauge=None):
        fmin, fmax = covering_scan(spec)
        if fmin < 1.0 - 1e-12:
            raise ConfigError(f"covering condition fails: min F = {fmin:.3g} < 1")
        self.b_plus = fmax
        lap = _laplacian(spec, gauge)
        free = (lap + sp.diags(background_potential(spec))).tocoo()
        # keep every diagonal entry stored, even where H0 vanishes, so V can be added in place
        n = spec.n_sites
        self.free = sp.csr_matrix(
            (np.concatenate([free.data, np.zeros(n, dtype=free.dtype)]),
             (np.concatenate([free.row, np.arange(n)]), np.concatenate([free.col, np.arange(n)]))),
            shape=(n, n),
        )
        self.free.sum_duplicates()
        self.free.sort_indices()
        self.bumps = bump_matrix(spec)
        rows = np.repeat(np.arange(n), np.diff(self.free.indptr))
        self.diag_pos = np.flatnonzero(rows == self.free.indices)
        if self.diag_pos.size != n:
            raise NumericalError("free operator lost diagonal entries")


def _free_parts(spec: ModelSpec, gauge=None) -> _FreeParts:
    if gauge is not None:
        return _FreeParts(spec, gauge)
    cache = spec.__dict__.get("_free_cache")
    if cache is None:
        cache = _FreeParts(spec)
        object.__setattr__(spec, "_free_cache", cache)
    return cache


def build_hamiltonian(spec: ModelSpec, real: Realization | None = None, gauge=None) -> OperatorHandle:
    """Assemble H = -Laplacian + V0 + lam * sum_a eta_a U_a on the box.

    Parameters
    ----------
    spec : ModelSpec
    real : Realization, optional
        Couplings; ``None`` means eta = 0.
    gauge : array_like, optional
        Site function chi; every hopping phase theta_ij is shifted by
        chi_i - chi_j (a pure gauge transformation).

    Returns
    -------
    OperatorHandle
    """
    if real is None:
        real = zero_realization(spec)
    if real.spec is not spec and real.spec.n_centers != spec.n_centers:
        raise ConfigError("realization does not match the spec's site set")
    parts = _free_parts(spec, gauge)
    if spec.lattice:
        V = spec.disorder * real.eta
    else:
        V = spec.disorder * (parts.bumps @ real.eta)
    H = parts.free.copy()
    H.data[parts.diag_pos] += V
    box = None if spec.periodic else (np.zeros(spec.dimension), float(spec.half_width))
    return OperatorHandle(H, parts.free, spec.coords, spec, real, parts.bumps, spec.period, box=box)
