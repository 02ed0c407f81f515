"""Declarative experiment runner.

A config is one JSON document::

    {"kind": "criterion", "model": {...ModelSpec fields...},
     "params": {...kind-specific...}, "seed": 0, "output": "out", "workers": 1}

Unknown fields are rejected at every level and missing parameters take the
defaults listed in ``PARAMS``, so the canonical serialization (sorted keys,
compact separators, defaults filled in) round-trips byte for byte.

Randomness: realization i of a run seeded by s uses the Philox stream keyed
by SeedSequence(s, spawn_key=(i,)); sweep point j runs with the child seed
``child_seed(s, j)``. Parallel work is merged in index order, so outputs do
not depend on the worker count.
"""

from __future__ import annotations

import copy
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .errors import ConfigError
from .model import ModelSpec, build_hamiltonian, child_seed, sample_disorder
from .parallel import ordered_map, set_default_workers
from .resolvent import EnergyPoint

KINDS = ("criterion", "decay", "tails", "boole", "bs", "shift", "dos", "dynamics", "hilbert",
         "largedisorder", "msa", "holder")

PARAMS = {
    "criterion": {"L_grid": [26, 30], "E": 2.0, "eps": 1e-3, "s": 0.2, "N": 100, "M": 1.0},
    "decay": {"E": 2.0, "eps": 1e-3, "s": 0.2, "N": 100, "x": [0.0], "offsets": [0, 1, 2, 3, 4, 5, 6],
              "proxy": "chi"},
    "tails": {"E": 2.0, "eps": 0.0, "x": [0.0], "y": [3.0], "N": 1000, "method": "conditional"},
    "boole": {"J": [0.0, 4.0], "x": [0.0], "t_grid": [1.0, 10.0, 100.0], "N": 10},
    "bs": {"alpha": [0.0], "E": 1.0, "a": 0.0, "b": 1.0, "N": 10},
    "shift": {"E": 1.0, "s": 0.4, "U_site": [0.0], "V_radius": 3.0, "U_height": 1.0, "N": 5},
    "dos": {"L": None, "bins": 64, "N": 20, "bc": None, "k_points": 16},
    "dynamics": {"J": [0.0, 4.0], "x": [0.0], "offsets": [0, 2, 4, 6, 8], "t_max": 50.0, "n_times": 32,
                 "N": 10},
    "hilbert": {"n": 10, "delta": 0.0, "delta_p": 0.5, "v_min": -20.0, "v_max": 20.0, "points": 2001},
    "largedisorder": {"lam_grid": [0.0, 2.0, 4.0, 8.0, 16.0], "L": 20, "E_grid": [4.0], "s": 0.3, "N": 100,
                      "eps": 1e-3},
    "msa": {"L_grid": [26, 30, 36], "E": 2.0, "A": 1.0, "mu": 0.3, "s": 0.2, "t": 0.5, "N": 100,
            "eps": 1e-3},
    "holder": {"s": 0.2, "E": 2.0, "eps": 1e-3, "offsets": [0.01, 0.03, 0.1], "x": [0.0], "y": [3.0],
               "N": 100},
}

TOP_FIELDS = ("kind", "model", "params", "seed", "output", "workers")


# ---------------------------------------------------------------------------
# config


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    model: ModelSpec
    params: dict = field(default_factory=dict)
    seed: int = 0
    output: str = "."
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind: unknown experiment kind {self.kind!r}")
        schema = PARAMS[self.kind]
        extra = set(self.params) - set(schema)
        if extra:
            raise ConfigError(f"params: unknown fields {sorted(extra)} for kind {self.kind!r}")
        full = copy.deepcopy(schema)
        full.update(copy.deepcopy(self.params))
        object.__setattr__(self, "params", full)
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed: must be a non-negative integer")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("workers: must be a positive integer")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "model": self.model.to_dict(), "params": copy.deepcopy(self.params),
                "seed": self.seed, "output": self.output, "workers": self.workers}

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: expected a JSON object")
        extra = set(data) - set(TOP_FIELDS)
        if extra:
            raise ConfigError(f"config: unknown fields {sorted(extra)}")
        if "kind" not in data:
            raise ConfigError("kind: missing")
        model = ModelSpec.from_dict(data.get("model", {}))
        params = data.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError("params: expected an object")
        return cls(data["kind"], model, params, data.get("seed", 0), data.get("output", "."),
                   data.get("workers", 1))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def with_value(self, axis: str, value) -> "ExperimentConfig":
        """Copy with the numeric leaf ``axis`` ("params.E", "model.disorder", "seed" or a bare name) set."""
        data = self.to_dict()
        path = _resolve_axis(data, axis)
        node = data
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
        return ExperimentConfig.from_dict(data)


def _resolve_axis(data: dict, axis: str) -> list:
    path = axis.split(".")
    if len(path) == 1:
        if axis in data["params"]:
            path = ["params", axis]
        elif axis in data["model"]:
            path = ["model", axis]
        elif axis not in ("seed",):
            raise ConfigError(f"axis: no field named {axis!r}")
    node = data
    for key in path:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"axis: no field named {axis!r}")
        node = node[key]
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ConfigError(f"axis: {axis!r} is not a numeric leaf")
    return path


# ---------------------------------------------------------------------------
# tables


@dataclass
class ResultTable:
    kind: str
    columns: list
    rows: list
    config: ExperimentConfig | None = None
    timestamp: str = ""

    def __post_init__(self):
        for r in self.rows:
            if len(r) != len(self.columns):
                raise ConfigError(f"row {r!r} does not match columns {self.columns}")

    def body(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()

    def header(self) -> str:
        lines = [f"# locmoment {__version__}", f"# kind: {self.kind}"]
        if self.config is not None:
            lines.append(f"# config_sha256: {self.config.sha256()}")
            lines.append(f"# config: {self.config.to_json()}")
        lines.append(f"# timestamp: {self.timestamp}")
        return "".join(line + "\r\n" for line in lines)

    def to_csv(self) -> str:
        return self.header() + self.body()

    def write(self, path) -> str:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())
        return path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return "%.17g" % v
    return str(v)


def read_table(path):
    """(header dict, columns, rows as strings) of a result file."""
    header, body = {}, []
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.split("\r\n")
    k = 0
    while k < len(lines) and lines[k].startswith("#"):
        key, _, val = lines[k][2:].partition(": ")
        header[key] = val
        k += 1
    reader = csv.reader(io.StringIO("\r\n".join(lines[k:])))
    rows = [r for r in reader if r]
    return header, rows[0] if rows else [], rows[1:]


def table_body(path) -> str:
    """Everything after the '#' header block."""
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.split("\r\n")
    k = 0
    while k < len(lines) and lines[k].startswith("#"):
        k += 1
    return "\r\n".join(lines[k:])


# ---------------------------------------------------------------------------
# runners


def _site(v, d):
    return np.atleast_1d(np.asarray(v, dtype=float)).reshape(d)


def _offset_pairs(x, offsets, d):
    out = []
    for o in offsets:
        y = x.copy()
        y[0] += float(o)
        out.append((x, y))
    return out


def _run_criterion(cfg):
    from .criterion import criterion_eval

    p = cfg.params
    rows = [criterion_eval(cfg.model, L, p["E"], p["eps"], p["s"], p["N"], p["M"], seed=cfg.seed).row()
            for L in p["L_grid"]]
    return rows


def _run_decay(cfg):
    from .criterion import decay_fit

    p, d = cfg.params, cfg.model.dimension
    pairs = _offset_pairs(_site(p["x"], d), p["offsets"], d)
    f = decay_fit(cfg.model, EnergyPoint(p["E"], p["eps"]), p["s"], pairs, p["N"], seed=cfg.seed, proxy=p["proxy"])
    rows = [(dd, m, lo, hi, f.mu, f.mu_se, f.r2) for dd, m, lo, hi in f.rows()]
    return rows


def _run_tails(cfg):
    from .moments import weak_l1_tail

    p, d = cfg.params, cfg.model.dimension
    tp = weak_l1_tail(cfg.model, EnergyPoint(p["E"], p["eps"]), _site(p["x"], d), _site(p["y"], d), p["N"],
                      seed=cfg.seed, method=p["method"])
    return [(t, v, tp.slope, tp.slope_se) for t, v in tp.rows()]


def _run_boole(cfg):
    from .correlators import SpectralData
    from .moments import boole_tail

    p, d, spec = cfg.params, cfg.model.dimension, cfg.model

    def one(i):
        S = SpectralData.from_operator(build_hamiltonian(spec, sample_disorder(spec, cfg.seed, i)))
        tp = boole_tail(S, tuple(p["J"]), _site(p["x"], d), None, p["t_grid"])
        return [(i, t, v * t, tp.exact_constant) for t, v in tp.rows()]

    rows = [r for block in ordered_map(one, range(p["N"])) for r in block]
    return rows


def _run_bs(cfg):
    from .birman_schwinger import crossing_count

    p, d, spec = cfg.params, cfg.model.dimension, cfg.model

    def one(i):
        H = build_hamiltonian(spec, sample_disorder(spec, cfg.seed, i))
        c = crossing_count(H, _site(p["alpha"], d), p["E"], p["a"], p["b"])
        return (i, c.count, c.bs_count, int(c.agree))

    return ordered_map(one, range(p["N"]))


def _run_shift(cfg):
    from .birman_schwinger import spectral_shift

    p, d, spec = cfg.params, cfg.model.dimension, cfg.model

    def one(i):
        H = build_hamiltonian(spec, sample_disorder(spec, cfg.seed, i))
        u = _site(p["U_site"], d)
        U = p["U_height"] * (H.distance(H.coords, u) < 0.5).astype(float)
        V = (H.distance(H.coords, u) <= p["V_radius"]).astype(float)
        r = spectral_shift(H, V, U, p["E"], p["s"])
        return (i, r.integral, len(r.breakpoints), int(np.max(np.abs(r.xi))))

    return ordered_map(one, range(p["N"]))


def _run_dos(cfg):
    from .spectra import dos_estimate

    p = cfg.params
    r = dos_estimate(cfg.model, p["L"], p["bins"], p["N"], p["bc"], p["k_points"], seed=cfg.seed)
    return r.rows()


def _run_dynamics(cfg):
    from .correlators import SpectralData, dynamical_kernel

    p, d, spec = cfg.params, cfg.model.dimension, cfg.model
    x = _site(p["x"], d)
    t_grid = np.linspace(0.0, p["t_max"], p["n_times"])

    def one(i):
        S = SpectralData.from_operator(build_hamiltonian(spec, sample_disorder(spec, cfg.seed, i)))
        out = []
        for o in p["offsets"]:
            y = x.copy()
            y[0] += o
            sup, bound = dynamical_kernel(S, tuple(p["J"]), x, y, t_grid)
            out.append((i, float(o), sup, bound))
        return out

    rows = [r for block in ordered_map(one, range(p["N"])) for r in block]
    return rows


def _run_hilbert(cfg):
    from .hilbert import DissipativeOperator, sandwich_profile

    p = cfg.params
    rng = np.random.default_rng(child_seed(cfg.seed, 0))
    n = p["n"]
    B = rng.normal(size=(n, n))
    B = (B + B.T) / (2 * np.sqrt(n))
    C = p["delta"] * np.eye(n)
    M = rng.normal(size=(n, n)) / n
    A = DissipativeOperator(B, C, p["delta"])
    prof = sandwich_profile(A, M.T, M, np.linspace(p["v_min"], p["v_max"], p["points"]), p["delta_p"])
    return prof.rows()


def _run_largedisorder(cfg):
    from .spectra import large_disorder_scan

    p = cfg.params
    sc = large_disorder_scan(cfg.model, p["lam_grid"], p["L"], p["E_grid"], p["s"], p["N"], eps=p["eps"],
                             seed=cfg.seed)
    rows = [(lam, E, m, lo, hi, sc.spearman[E][0], sc.spearman[E][1]) for lam, E, m, lo, hi, _ in sc.rows]
    return rows


def _run_msa(cfg):
    from .spectra import msa_bridge

    p = cfg.params
    g = msa_bridge(cfg.model, p["L_grid"], p["E"], p["A"], p["mu"], p["s"], p["t"], p["N"], eps=p["eps"],
                   seed=cfg.seed)
    return g.rows


def _run_holder(cfg):
    from .moments import holder_scan

    p, d = cfg.params, cfg.model.dimension
    z = EnergyPoint(p["E"], p["eps"])
    ws = [EnergyPoint(p["E"] + o, p["eps"]) for o in p["offsets"]]
    hs = holder_scan(cfg.model, p["s"], [z], ws, _site(p["x"], d), _site(p["y"], d), p["N"], seed=cfg.seed)
    rows = [(zz.real, ww.real, diff, dz, ratio) for zz, ww, diff, dz, ratio in hs.rows]
    return rows


RUNNERS = {
    "criterion": _run_criterion, "decay": _run_decay, "tails": _run_tails, "boole": _run_boole,
    "bs": _run_bs, "shift": _run_shift, "dos": _run_dos, "dynamics": _run_dynamics,
    "hilbert": _run_hilbert, "largedisorder": _run_largedisorder, "msa": _run_msa, "holder": _run_holder,
}


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def run(cfg: ExperimentConfig, write: bool = True) -> ResultTable:
    """Dispatch ``cfg`` to its module and return (and by default write) the table."""
    set_default_workers(cfg.workers)
    rows = RUNNERS[cfg.kind](cfg)
    table = ResultTable(cfg.kind, list(SCHEMAS[cfg.kind]), [tuple(r) for r in rows], cfg, _timestamp())
    if write:
        table.write(os.path.join(cfg.output, f"{cfg.kind}.csv"))
    return table


def sweep(cfg: ExperimentConfig, axis: str, values, write: bool = True) -> ResultTable:
    """One run per value with child seeds (seed, index); rows are prefixed with the axis value."""
    _resolve_axis(cfg.to_dict(), axis)
    set_default_workers(cfg.workers)
    name = axis.split(".")[-1]
    cols = [f"sweep_{name}", "child_seed"] + SCHEMAS[cfg.kind]
    rows = []
    for i, v in enumerate(values):
        sub = cfg.with_value(axis, v)
        sub = ExperimentConfig(sub.kind, sub.model, sub.params, child_seed(cfg.seed, i) % (2**63), sub.output,
                               sub.workers)
        rows.extend((v, sub.seed) + tuple(row) for row in RUNNERS[cfg.kind](sub))
    table = ResultTable(cfg.kind, cols, rows, cfg, _timestamp())
    if write:
        table.write(os.path.join(cfg.output, f"sweep_{cfg.kind}_{name}.csv"))
    return table


SCHEMAS = {
    "criterion": ["L", "E", "eps", "s", "N", "b", "b_ci_lo", "b_ci_hi", "M", "gamma", "loc_length", "pass"],
    "decay": ["distance", "moment", "ci_lo", "ci_hi", "mu", "mu_se", "r2"],
    "tails": ["t", "probability", "slope", "slope_se"],
    "boole": ["realization", "t", "measure_times_t", "boole_constant"],
    "bs": ["realization", "count", "bs_count", "agree"],
    "shift": ["realization", "integral", "n_breaks", "max_abs_xi"],
    "dos": ["L", "bin_lo", "bin_hi", "mass"],
    "dynamics": ["realization", "distance", "sup_kernel", "correlator_bound"],
    "hilbert": ["v", "hs_norm", "im_trace_norm"],
    "largedisorder": ["lambda", "E", "moment", "ci_lo", "ci_hi", "spearman_rho", "spearman_p"],
    "msa": ["L", "p_bad", "ci_lo", "ci_hi", "combined_bound"],
    "holder": ["E", "E_prime", "moment_difference", "distance_pow_s", "ratio"],
}


def verify(out_dir) -> list:
    """Re-hash the embedded config of every CSV in ``out_dir``.

    Returns a list of (file, ok, message).
    """
    results = []
    for name in sorted(os.listdir(out_dir)):
        if not name.endswith(".csv"):
            continue
        path = os.path.join(out_dir, name)
        header, cols, rows = read_table(path)
        if "config" not in header or "config_sha256" not in header:
            results.append((name, False, "missing provenance header"))
            continue
        digest = hashlib.sha256(header["config"].encode()).hexdigest()
        if digest != header["config_sha256"]:
            results.append((name, False, "config hash mismatch"))
            continue
        try:
            cfg = ExperimentConfig.from_json(header["config"])
        except ConfigError as exc:
            results.append((name, False, f"embedded config invalid: {exc}"))
            continue
        if cfg.to_json() != header["config"]:
            results.append((name, False, "embedded config is not canonical"))
            continue
        bad = [i for i, r in enumerate(rows) if len(r) != len(cols)]
        if bad:
            results.append((name, False, f"rows {bad[:5]} do not match the column schema"))
            continue
        results.append((name, True, "ok"))
    return results
