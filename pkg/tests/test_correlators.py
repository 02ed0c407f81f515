import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from locmoment.correlators import (
    SpectralData, borel_family_sup, dynamical_kernel, evolve, fermi_kernel, interpolation_check, projection_kernel,
    q_correlator, rage_probe,
)
from locmoment.model import ModelSpec, build_hamiltonian, sample_disorder
from locmoment.resolvent import linear_fit


def _spectral(L=15, lam=3.0, seed=0, **kw):
    spec = ModelSpec(half_width=L, disorder=lam, **kw)
    return SpectralData.from_operator(build_hamiltonian(spec, sample_disorder(spec, seed)))


def _decay_fit(dist, vals):
    return linear_fit(dist, np.log(vals))


def test_eigen_decomposition_quality():
    for S in (_spectral(), _spectral(L=4, lam=2.0, dimension=2, flux=0.3)):
        assert S.residual() <= 1e-10 and S.gram_defect() <= 1e-10


def test_empty_window_gives_zero():
    S = _spectral()
    r = q_correlator(S, (100.0, 200.0), (0.0,), (0.0,), 0.5)
    assert r.q_v == r.q0 == r.q1 == r.q2 == r.y_bound == 0.0


def test_endpoint_traces():
    S = _spectral()   # 31 sites
    H = S.op
    J = (1.0, 6.0)
    r = q_correlator(S, J, (2.0,), (-1.0,), 0.5)
    P = S.projector(J)
    chi = np.zeros(H.n)
    chi[H.chi((2.0,))] = 1.0
    assert r.q2 == pytest.approx(np.trace(np.diag(chi) @ P).real, abs=1e-12)
    assert r.q0 == pytest.approx(np.trace(np.diag(H.bump((-1.0,))) @ P).real, abs=1e-12)
    assert min(r.q_v, r.q0, r.q1, r.q2, r.y_bound) >= 0
    assert r.q2 <= np.trace(np.diag(chi) @ S.projector(None)).real + 1e-12


def test_single_eigenvalue_is_tight():
    S = _spectral(L=6, seed=3)
    E = S.eigenvalues[4]
    r = q_correlator(S, (E - 1e-12, E + 1e-12), (0.0,), (1.0,), 0.5)
    res = interpolation_check(r, 0.5)
    assert res.holds and abs(res.slack) <= 1e-14 * max(r.q1, 1.0)


@given(hst.integers(0, 10_000), hst.sampled_from([0.0, 0.25, 0.5, 0.75]))
@settings(max_examples=25, deadline=None)
def test_interpolation_and_log_convexity(seed, v):
    S = _spectral(seed=seed, lam=4.0)
    res = interpolation_check(q_correlator(S, (-1.0, 8.0), (0.0,), (2.0,), v), v)
    assert res.holds and res.slack >= -1e-14
    assert res.log_convex


def test_interpolation_rejects_large_exponent():
    r = q_correlator(_spectral(), (-1.0, 8.0), (0.0,), (2.0,), 1.0)
    with pytest.raises(ValueError):
        interpolation_check(r, 1.0)


def test_kernel_at_time_zero():
    S = _spectral(L=10)
    H = S.op
    J = (0.0, 5.0)
    sup, bound = dynamical_kernel(S, J, (-2.0,), (3.0,), [0.0])
    direct = np.linalg.norm(S.projector(J)[np.ix_(H.chi((-2.0,)), H.chi((3.0,)))], 2)
    assert sup == pytest.approx(direct, abs=1e-13) and sup <= bound + 1e-12


def test_full_spectrum_diagonal_kernel():
    S = _spectral(L=10)
    sup, _ = dynamical_kernel(S, None, (0.0,), (0.0,), np.linspace(0, 50, 17))
    assert sup <= 1 + 1e-12


def test_unitarity():
    S = _spectral(L=10, dimension=1)
    psi = np.random.default_rng(0).normal(size=S.op.n) + 0j
    for t in (0.0, 0.7, 13.0, 1e3):
        assert np.linalg.norm(evolve(S, psi, t)) == pytest.approx(np.linalg.norm(psi), rel=1e-12)


def test_borel_family_below_bound():
    S = _spectral(L=12, lam=5.0, seed=4)
    J = (-1.0, 9.0)
    family = [np.cos, np.sin, lambda e: np.sign(e - 3.0), lambda e: np.exp(2j * e), lambda e: (e < 4.5) * 1.0]
    sup = borel_family_sup(S, J, (0.0,), (3.0,), family)
    _, bound = dynamical_kernel(S, J, (0.0,), (3.0,), [0.0])
    assert sup <= bound + 1e-12
    with pytest.raises(ValueError):
        borel_family_sup(S, J, (0.0,), (3.0,), [lambda e: 2.0 * np.ones_like(e)])


def test_fermi_extremes():
    S = _spectral(L=10)
    assert fermi_kernel(S, S.eigenvalues[0] - 1.0, (0.0,), (2.0,)) == 0.0
    assert fermi_kernel(S, S.eigenvalues[-1] + 1.0, (0.0,), (0.0,)) == pytest.approx(1.0, abs=1e-12)
    assert fermi_kernel(S, S.eigenvalues[-1] + 1.0, (0.0,), (2.0,)) <= 1e-12


def test_fermi_kernel_decays_at_strong_disorder():
    # single realizations carry resonances across E_F; fit the typical (log-averaged) kernel
    d = np.arange(1, 13)
    logs = []
    for seed in range(40):
        S = _spectral(L=20, lam=10.0, seed=seed)
        logs.append([np.log(fermi_kernel(S, 7.0, (-6.0,), (-6.0 + k,))) for k in d])
    b, _, r2, _ = linear_fit(d, np.mean(logs, axis=0))
    assert b < 0 and r2 >= 0.9


def test_bound_decays_at_strong_disorder():
    S = _spectral(L=20, lam=10.0, seed=6)   # 41 sites
    d = np.arange(1, 13)
    bounds = [dynamical_kernel(S, (-1.0, 15.0), (-6.0,), (-6.0 + k,), [0.0])[1] for k in d]
    assert _decay_fit(d, bounds)[0] < 0


def test_eigen_projection_decay():
    S = _spectral(L=20, lam=10.0, seed=7)
    n = S.eigenvalues.size // 2
    psi = np.abs(S.eigenvectors[:, n])
    x = int(np.argmax(psi)) - 20
    sign = 1 if x < 0 else -1
    d = np.arange(1, 11)
    vals = [projection_kernel(S, n, (float(x),), (float(x + sign * k),)) for k in d]
    assert _decay_fit(d, vals)[2] >= 0.9


def test_rage_beyond_diameter_is_zero():
    S = _spectral(L=10)
    assert rage_probe(S, None, (0.0,), [25.0], 10.0)[0] == 0.0


def test_rage_free_grows_with_time():
    S = _spectral(L=30, lam=0.0)
    g = [rage_probe(S, None, (0.0,), [10.0], T)[0] for T in (2.0, 10.0, 40.0)]
    assert g[0] < g[1] < g[2]


def test_rage_decays_at_strong_disorder():
    S = _spectral(L=20, lam=10.0, seed=8)
    R = np.arange(1, 10)
    g = rage_probe(S, None, (0.0,), R, 200.0)
    assert np.all(np.diff(g) <= 1e-15) and _decay_fit(R, g)[0] < 0
