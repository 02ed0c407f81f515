import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from locmoment.criterion import (
    ShellKernel, boundary_layer, criterion_eval, decay_fit, decay_iterate, dist_modified, mid_band, necessity_check,
    shell_kernel, shell_sites,
)
from locmoment.errors import ConfigError
from locmoment.model import ModelSpec, build_hamiltonian
from locmoment.resolvent import EnergyPoint

BOX = build_hamiltonian(ModelSpec(half_width=20))             # sites -20..20, complement starts at distance 21
BOX2 = build_hamiltonian(ModelSpec(dimension=2, half_width=6))


def test_modified_distance_examples():
    assert dist_modified(BOX, (-2.0,), (3.0,)) == 5.0
    # both points next to the boundary: the way around through the complement is shorter
    assert dist_modified(BOX, (-20.0,), (20.0,)) == 2.0
    assert dist_modified(BOX2, (-6.0, 0.0), (6.0, 1.0)) == 2.0


def test_modified_distance_rejects_outside():
    with pytest.raises(ConfigError):
        dist_modified(BOX, (0.0,), (25.0,))


@given(hst.lists(hst.integers(-6, 6), min_size=4, max_size=4))
@settings(max_examples=200)
def test_modified_distance_symmetric_and_short(p):
    x, y = np.array(p[:2], float), np.array(p[2:], float)
    a, b = dist_modified(BOX2, x, y), dist_modified(BOX2, y, x)
    assert a == b and a <= np.abs(x - y).max()


def test_modified_distance_random_pairs():
    rng = np.random.default_rng(0)
    pts = rng.integers(-20, 21, size=(1000, 2)).astype(float)
    for x, y in pts:
        assert dist_modified(BOX, (x,), (y,)) == dist_modified(BOX, (y,), (x,)) <= abs(x - y)


def test_boundary_layer_membership():
    H = build_hamiltonian(ModelSpec(half_width=30))
    q = H.coords[boundary_layer(H), 0]
    # distance to the complement is 31 - |q|; layer is 1 < dist <= 23
    np.testing.assert_array_equal(np.sort(np.abs(q)), np.sort(np.abs(np.concatenate([np.arange(-29, -7),
                                                                                    np.arange(8, 30)]))))


def test_shell_sites_annuli():
    spec = ModelSpec(half_width=60)
    S, Sp = shell_sites(spec, np.zeros(1), 40.0)
    d, dp = np.abs(S[:, 0]), np.abs(Sp[:, 0])
    assert S.size and np.all((d > 40 - 23) & (d < 40 - 3))
    assert Sp.size and np.all((dp > 40 + 2 - 13) & (dp < 40 + 2 + 23))


def test_criterion_rejections():
    spec = ModelSpec(half_width=30, disorder=2.0)
    for kw in (dict(s=0.4), dict(L=25.0), dict(N=50), dict(eps=0.0), dict(L=40.0)):
        args = dict(L=30.0, E=2.0, eps=1e-3, s=0.2, N=100) | kw
        with pytest.raises(ConfigError):
            criterion_eval(spec, **args)


def test_definition_consistency_and_large_disorder_pass():
    spec = ModelSpec(half_width=30, disorder=12.0)
    rep = criterion_eval(spec, 30, mid_band(spec), 1e-3, 0.2, 200, seed=1)
    assert rep.passed and rep.b_ci[0] <= rep.b <= rep.b_ci[1]
    assert rep.gamma == -np.log(rep.M * rep.b)
    assert rep.loc_length == 2 * rep.L / rep.gamma


def test_large_constant_fails():
    spec = ModelSpec(half_width=30, disorder=12.0)
    rep = criterion_eval(spec, 30, mid_band(spec), 1e-3, 0.2, 100, M=1e6, seed=1)
    assert not rep.passed and rep.gamma <= 0 and np.isnan(rep.loc_length)


def test_gap_regime_passes_with_exponentially_small_b():
    # free chain at E = -3: b is set by the nearest layer sites at distance L - 22
    spec = ModelSpec(half_width=40)
    s, L_grid = 0.2, np.array([26.0, 30.0, 34.0, 38.0])
    reps = [criterion_eval(spec, L, -3.0, 1e-9, s, 100) for L in L_grid]
    assert all(r.passed for r in reps)
    slope = np.polyfit(L_grid, np.log([r.b for r in reps]), 1)[0]
    assert -slope == pytest.approx(s * np.arccosh(2.5), rel=0.05)


def test_shell_kernel_gap_regime_matches_free_green_function():
    spec = ModelSpec(half_width=30)
    E, s, L = -1.0, 0.5, 26.0
    k = shell_kernel(spec, L, EnergyPoint(E, 1e-9), s, 10, estimator="plain-mean")
    mu = np.arccosh(1 - E / 2)
    S, _ = shell_sites(spec, np.zeros(1), L)
    # whole-line Green function e^{-mu |n|} / (2 sinh mu)
    pred = np.sum((np.exp(-mu * np.abs(S[:, 0])) / (2 * np.sinh(mu))) ** s)
    assert 0.5 <= k.a[0] / pred <= 2.0
    assert np.all(k.a >= 0)


def test_shell_kernel_rejects_small_box():
    with pytest.raises(ConfigError):
        shell_kernel(ModelSpec(half_width=30), 20.0, EnergyPoint(-1.0, 1e-3), 0.2, 10)


def test_shell_kernel_translation_invariance():
    spec = ModelSpec(half_width=60, boundary="periodic", disorder=4.0)
    k = shell_kernel(spec, 26.0, EnergyPoint(3.0, 1e-3), 0.2, 200, centers=[[-30.0], [0.0], [15.0], [40.0]], seed=4)
    width = np.mean(k.a_ci[:, 1] - k.a_ci[:, 0])
    assert np.ptp(k.a) <= 2 * width


def _synthetic(a, L=30.0):
    return ShellKernel(L, 0.2, EnergyPoint(0.0, 1e-3), np.zeros((1, 1)), np.array([a]), np.array([[a, a]]),
                       np.zeros((0, 1)), np.zeros((0, 1)))


def test_iteration_synthetic():
    L = 30.0
    b = decay_iterate(_synthetic(0.0), 1.0, [0.0, 19.0, 38.0])
    assert b.bounds[0] == 1.0 and np.all(b.bounds[1:] == 0)
    b = decay_iterate(_synthetic(np.exp(-1) / 2), 2.0, [0.0, 2 * L, 4 * L], step=2 * L)
    assert b.rate == pytest.approx(1 / (2 * L), rel=1e-15)
    np.testing.assert_allclose(b.bounds, [1.0, np.exp(-1), np.exp(-2)], rtol=1e-14)


def test_iteration_rejections():
    with pytest.raises(ConfigError):
        decay_iterate(_synthetic(0.5), 2.0, [49.0])
    with pytest.raises(ConfigError):
        decay_iterate(_synthetic(0.1), 1.0, [50.0])


def test_iteration_against_direct_fit():
    # the iterated rate from the measured kernel is within a factor 3 of the fitted moment decay
    spec = ModelSpec(half_width=90, disorder=12.0)
    E = mid_band(spec)
    z = EnergyPoint(E, 1e-3)
    k = shell_kernel(spec, 60.0, z, 0.2, 100, seed=3)
    fit = decay_fit(ModelSpec(half_width=30, disorder=12.0), z, 0.2,
                    [((-10.0,), (-10.0 + d,)) for d in range(0, 21, 2)], 200, seed=2)
    rate = decay_iterate(k, 1.0, [49.0]).rate
    assert 1 / 3 <= rate / fit.mu <= 3


def test_decay_fit_free_gap_matches_combes_thomas():
    spec = ModelSpec(half_width=40)
    s, E = 0.5, -1.0
    pairs = [((-10.0,), (-10.0 + d,)) for d in range(2, 16)]
    fit = decay_fit(spec, EnergyPoint(E, 1e-9), s, pairs, 20)
    assert fit.mu / s == pytest.approx(np.arccosh(1 - E / 2), rel=0.1)


def test_decay_fit_shuffled_control():
    spec = ModelSpec(half_width=30, disorder=12.0)
    pairs = [((-10.0,), (-10.0 + d,)) for d in range(0, 21, 2)]
    fit = decay_fit(spec, EnergyPoint(mid_band(spec), 1e-3), 0.2, pairs, 200, seed=5, shuffle=True)
    assert abs(fit.mu) <= 2 * 1.96 * fit.mu_se or not fit.positive


def test_decay_fit_needs_distances():
    with pytest.raises(ConfigError):
        decay_fit(ModelSpec(half_width=20), EnergyPoint(-1.0, 1e-3), 0.2, [((0.0,), (1.0,))] * 6, 10)


def test_criterion_implies_decay():
    pairs = [((-10.0,), (-10.0 + d,)) for d in range(0, 21, 2)]
    for lam in (8.0, 12.0, 16.0):
        spec = ModelSpec(half_width=30, disorder=lam)
        E = mid_band(spec)
        rep = criterion_eval(spec, 30, E, 1e-3, 0.2, 200, seed=6)
        if not rep.passed:
            continue
        fit = decay_fit(spec, EnergyPoint(E, 1e-3), 0.2, pairs, 200, seed=6)
        assert fit.mu + 1.6448536269514722 * fit.mu_se >= rep.gamma / (4 * rep.L)


def test_necessity_gap_regime_first_length():
    spec = ModelSpec(half_width=40, disorder=1.0)
    pairs = [((-10.0,), (-10.0 + d,)) for d in range(0, 14, 2)]
    fit = decay_fit(spec, EnergyPoint(-3.0, 1e-3), 0.2, pairs, 100)
    res = necessity_check(spec, -3.0, 0.2, [26, 30, 34], fit, 100, half_width=0.5, n_energies=5)
    assert res.found and res.L == 26 and res.interval[0] < -3.0 < res.interval[1]


def test_necessity_delocalized_control():
    spec = ModelSpec(half_width=40)
    fit_like = decay_fit(ModelSpec(half_width=40, disorder=1.0), EnergyPoint(-3.0, 1e-3), 0.2,
                         [((-10.0,), (-10.0 + d,)) for d in range(0, 14, 2)], 100)
    res = necessity_check(spec, 2.0, 0.2, [26, 32, 38], fit_like, 100, half_width=0.5)
    assert not res.found and res.best[1] >= 1
