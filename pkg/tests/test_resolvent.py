import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from locmoment.errors import ConfigError, SingularSolveError
from locmoment.model import ModelSpec, build_hamiltonian, sample_disorder
from locmoment.resolvent import (
    EnergyPoint, Resolvent, combes_thomas_probe, geometric_identity_residual, green_block,
    resolvent_identity_residual,
)


def test_single_site_block():
    H = build_hamiltonian(ModelSpec(half_width=0))   # H = [2]
    z = EnergyPoint(0.5, 0.3)
    b = green_block(H, z, (0.0,), (0.0,))
    assert b.block[0, 0] == pytest.approx(1 / (2 - z.z), abs=1e-15)


def test_tridiagonal_against_dense_inverse():
    spec = ModelSpec(half_width=2, disorder=2.0)
    H = build_hamiltonian(spec, sample_disorder(spec, 1))
    G = np.linalg.inv(H.dense() - 1j * np.eye(5))
    R = Resolvent(H, EnergyPoint(0.0, 1.0))
    np.testing.assert_allclose(R.entries(np.arange(5), np.arange(5)), G, atol=1e-12)


def test_continuum_block_norms():
    spec = ModelSpec(mode="continuum-grid", half_width=3, spacing=0.5, disorder=2.0)
    H = build_hamiltonian(spec, sample_disorder(spec, 2))
    b = green_block(H, EnergyPoint(3.0, 0.1), (-1.0,), (1.0,))
    assert b.op_norm <= b.hs_norm + 1e-12
    assert b.op_norm <= 1 / 0.1


@given(hst.integers(0, 1000), hst.floats(-1, 12), hst.floats(0.01, 2))
@settings(max_examples=30, deadline=None)
def test_op_norm_bounds(seed, E, eps):
    spec = ModelSpec(half_width=6, disorder=5.0)
    H = build_hamiltonian(spec, sample_disorder(spec, seed))
    b = green_block(H, EnergyPoint(E, eps), (-2.0,), (3.0,))
    assert b.op_norm <= b.hs_norm * (1 + 1e-12) and b.op_norm <= 1 / eps * (1 + 1e-12)


def test_singular_solve_reports_eigenvalue():
    H = build_hamiltonian(ModelSpec(half_width=1))
    with pytest.raises(SingularSolveError):
        green_block(H, EnergyPoint(2.0, 0.0), (0.0,), (0.0,))


def test_symmetry_under_conjugation():
    spec = ModelSpec(dimension=2, half_width=3, disorder=3.0, flux=0.2)
    H = build_hamiltonian(spec, sample_disorder(spec, 3))
    a = green_block(H, EnergyPoint(2.0, 0.2), (0.0, 0.0), (2.0, 1.0)).op_norm
    # G(conj z) = G(z)^*, so chi_y G(conj z) chi_x is the adjoint block; dense oracle at conj z
    Gm = np.linalg.inv(H.dense() - complex(2.0, -0.2) * np.eye(H.n))
    b = np.linalg.norm(Gm[np.ix_(H.chi((2.0, 1.0)), H.chi((0.0, 0.0)))], 2)
    assert a == pytest.approx(b, rel=1e-12)


def test_resolvent_identity():
    spec = ModelSpec(half_width=8, disorder=4.0)
    H = build_hamiltonian(spec, sample_disorder(spec, 4))
    assert resolvent_identity_residual(H, EnergyPoint(1.0, 0.1), EnergyPoint(1.3, 0.2), (0.0,), (3.0,)) < 1e-10


def test_eps_limit_converges():
    spec = ModelSpec(half_width=8, disorder=4.0)
    H = build_hamiltonian(spec, sample_disorder(spec, 5))
    ev = np.linalg.eigvalsh(H.dense())
    E = 0.5 * (ev[3] + ev[4])
    norms = [green_block(H, EnergyPoint(E, 2.0**-k), (0.0,), (2.0,)).op_norm for k in range(10, 21)]
    assert abs(norms[-1] - norms[-2]) < 1e-8
    limit = green_block(H, EnergyPoint(E, 0.0), (0.0,), (2.0,), eigenvalues=ev).op_norm
    assert norms[-1] == pytest.approx(limit, rel=1e-8)


def test_geometric_identity_half_box():
    spec = ModelSpec(half_width=20, disorder=3.0)   # 41 sites
    H = build_hamiltonian(spec, sample_disorder(spec, 6))
    z = EnergyPoint(2.0, 0.5)
    HL = H.sub_box((-10.0,), 10)
    d = H.distance(H.coords, np.array([-10.0]))
    theta = np.clip(9.0 - d, 0.0, 1.0)
    G = np.linalg.norm(Resolvent(H, z).entries(H.chi((-10.0,)), H.chi((5.0,))), 2)
    assert geometric_identity_residual(H, HL, theta, z, (-10.0,), (5.0,)) <= 1e-10 * G


def test_geometric_identity_trivial_cutoff():
    spec = ModelSpec(half_width=6, disorder=3.0)
    H = build_hamiltonian(spec, sample_disorder(spec, 7))
    HL = H.sub_box((0.0,), 6)
    assert geometric_identity_residual(H, HL, np.ones(H.n), EnergyPoint(1.0, 0.1), (0.0,), (2.0,)) == 0.0


def test_geometric_identity_rejects_bad_cutoff():
    spec = ModelSpec(half_width=6, disorder=3.0)
    H = build_hamiltonian(spec, sample_disorder(spec, 7))
    HL = H.sub_box((-3.0,), 2)
    theta = (np.abs(H.coords[:, 0] + 3) <= 2).astype(float)   # support reaches the edge of Lambda
    with pytest.raises(ConfigError):
        geometric_identity_residual(H, HL, theta, EnergyPoint(1.0, 0.1), (-3.0,), (2.0,))


def test_combes_thomas_free_lattice():
    H = build_hamiltonian(ModelSpec(half_width=40))
    pairs = [((-10.0,), (-10.0 + k,)) for k in range(2, 16)]
    fit = combes_thomas_probe(H, -1.0, pairs)
    g = fit.gap
    assert fit.rate == pytest.approx(np.arccosh(1 + g / 2), rel=0.05)
    assert combes_thomas_probe(H, H.spectral_bottom - 2 * g, pairs).rate > fit.rate


def test_combes_thomas_two_dimensions():
    H = build_hamiltonian(ModelSpec(dimension=2, half_width=10))
    pairs = [((0.0, 0.0), (float(k), 0.0)) for k in range(1, 8)]
    assert combes_thomas_probe(H, -1.0, pairs).r2 >= 0.99


def test_energy_point_rejects_negative_eps():
    with pytest.raises(ConfigError):
        EnergyPoint(0.0, -1e-3)
