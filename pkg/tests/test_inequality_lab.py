import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cyclewalk import inequality_lab as il
from cyclewalk.corrector import apply_generator, dirichlet_form, l2_mu_norm, cov_norm, increments
from cyclewalk.env_model import WeightLaw, nn_two_cycles, sample_environment
from cyclewalk.errors import InvalidConfig, InvalidGeometry, InvalidInput

from conftest import random_field


@pytest.fixture(scope="module")
def big_srw():
    return sample_environment(nn_two_cycles(2, WeightLaw.constant(0.5)), 2, 80, 0)


# ---------------------------------------------------------------------------
# boxes


def test_box_cutoff_properties(rough_env):
    box = il.BoxProblem((5, 7), 8, 0.5, 1.0)
    eta = box.cutoff(rough_env)
    assert eta.min() == 0.0 and eta.max() == 1.0
    assert np.all(eta[box.inner_mask(rough_env)] == 1.0)
    assert np.all(eta[~box.interior_mask(rough_env)] == 0.0)
    assert il.max_edge_gradient(rough_env, eta) <= box.gradient_bound() + 1e-15
    assert box.outer_mask(rough_env).sum() == 17**2


def test_box_validation(srw_env):
    with pytest.raises(InvalidInput):
        il.BoxProblem((0, 0), 8, 0.4, 1.0)
    with pytest.raises(InvalidInput):
        il.BoxProblem((0, 0), 8, 0.75, 0.75)
    with pytest.raises(InvalidGeometry):
        il.BoxProblem((0, 0), 7, 0.5, 0.9)
    with pytest.raises(InvalidGeometry):
        il.dirichlet_harmonic(srw_env, il.BoxProblem((0, 0), 8), 1.0)


# ---------------------------------------------------------------------------
# harmonic extension


def test_constant_boundary_data(rough_env):
    box = il.BoxProblem((3, 3), 8)
    u = il.dirichlet_harmonic(rough_env, box, 2.5)
    np.testing.assert_allclose(u[box.outer_mask(rough_env)], 2.5, rtol=1e-10)


def test_linear_data_on_srw(srw_env):
    box = il.BoxProblem((8, 8), 7)
    x = srw_env.site_coords()[0].astype(float)
    u = il.dirichlet_harmonic(srw_env, box, x)
    np.testing.assert_allclose(u[box.outer_mask(srw_env)], x[box.outer_mask(srw_env)], atol=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_residual_and_maximum_principle(rough_env, seed):
    box = il.BoxProblem((seed * 7, seed * 3), 12)
    g = random_field(rough_env.shape, seed)
    u = il.dirichlet_harmonic(rough_env, box, g)
    gb = g[box.boundary_mask(rough_env)]
    assert il.harmonic_residual(rough_env, u, box) <= 1e-10 * np.abs(gb).max()
    vals = u[box.outer_mask(rough_env)]
    assert vals.min() >= gb.min() - 1e-12 and vals.max() <= gb.max() + 1e-12


# ---------------------------------------------------------------------------
# energy estimate


def test_cycle_energy_equals_dirichlet_form(mixed_env):
    f = random_field(mixed_env.shape, 2)
    assert il.cycle_energy(mixed_env, f) == pytest.approx(mixed_env.volume * dirichlet_form(mixed_env, f, f),
                                                          rel=1e-12)
    # and the symmetric edge energy
    assert il.cycle_energy(mixed_env, f) == pytest.approx(il.edge_energy(mixed_env, f), rel=1e-12)


def test_energy_zero_and_constant(rough_env):
    box = il.BoxProblem((0, 0), 8)
    r = il.energy_estimate_check(rough_env, np.zeros(rough_env.shape), box, 2)
    assert r.lhs == 0 and r.rhs == 0 and r.passed
    r = il.energy_estimate_check(rough_env, np.ones(rough_env.shape), box, 2)
    assert r.passed and r.constant_used == 2.5


def test_energy_sweep_and_overflow(rough_env):
    for box, u in il.random_harmonic_instances(rough_env, 8, 10, seed=5):
        assert il.energy_estimate_check(rough_env, u, box, 2).passed
        assert il.energy_estimate_check(rough_env, u, box, math.inf).passed
        w = np.where(box.outer_mask(rough_env), np.maximum(np.abs(u) - 0.2, 0.0), 0.0)
        assert il.energy_estimate_check(rough_env, w, box, 2).passed


def test_energy_rejects_non_harmonic(rough_env):
    box = il.BoxProblem((0, 0), 8)
    with pytest.raises(InvalidInput):
        il.energy_estimate_check(rough_env, random_field(rough_env.shape, 0), box, 2)


# ---------------------------------------------------------------------------
# weighted Sobolev and Poincare


def test_sobolev_zero(rough_env):
    box = il.BoxProblem((0, 0), 8)
    assert il.weighted_sobolev_check(rough_env, np.zeros(rough_env.shape), box, 4).ratio == 0.0


def test_sobolev_indicator_stable_across_scales(big_srw):
    for q in (8.0, math.inf):
        ratios = []
        for n in (8, 16, 32):
            box = il.BoxProblem((0, 0), n)
            u = (box.distance(big_srw) == 0).astype(float)
            ratios.append(il.weighted_sobolev_check(big_srw, u, box, q).ratio)
        assert max(ratios) <= 2 * min(ratios), (q, ratios)


def test_sobolev_requires_support(rough_env):
    box = il.BoxProblem((0, 0), 4)
    with pytest.raises(InvalidInput):
        il.weighted_sobolev_check(rough_env, np.ones(rough_env.shape), box, 4)


def test_sobolev_gate(rough_env):
    box = il.BoxProblem((0, 0), 8)
    cws, ratios = il.calibrate_sobolev_constant(rough_env, box, 4, trials=30, seed=1)
    assert cws == max(ratios)
    for f in il.trial_fields(rough_env, 10, seed=99):
        r = il.weighted_sobolev_check(rough_env, box.cutoff(rough_env) * f, box, 4, constant=cws)
        assert r.ratio <= cws * 1.5  # new trials stay near the calibrated constant


def test_poincare_constant_and_linear(big_srw):
    box = il.BoxProblem((0, 0), 8)
    assert il.local_poincare_check(big_srw, np.full(big_srw.shape, 3.0), box, 4).lhs == pytest.approx(0, abs=1e-20)
    x = big_srw.site_coords()[0].astype(float)
    x = np.where(x > 40, x - 80, x)
    ratios = [il.local_poincare_check(big_srw, x, il.BoxProblem((0, 0), n), 4).ratio for n in (8, 16, 32)]
    assert max(ratios) <= 2 * min(ratios)


# ---------------------------------------------------------------------------
# lattice constants


def test_lattice_volume_and_indicator():
    rows = il.lattice_inequality_constants(2, [2, 4], trials=20, seed=0)
    assert rows[0]["volume"] == 25 == rows[0]["volume_formula"]
    for row in rows:
        n, size = row["n"], row["volume"]
        assert row["sobolev_point"] == pytest.approx(size ** 0.5 / (4 * n), rel=1e-12)
        assert np.all(np.diff(row["sobolev_running"]) >= 0)
        assert np.all(np.diff(row["poincare_running"]) >= 0)
        assert row["sobolev_best"] >= row["sobolev_point"]


def test_lattice_three_d_volume():
    rows = il.lattice_inequality_constants(3, [1, 2], trials=5)
    assert [r["volume"] for r in rows] == [27, 125]


# ---------------------------------------------------------------------------
# De Giorgi


def test_de_giorgi_closed_form():
    assert il.de_giorgi_iterate(1, 1, 2, 1, 2, 1.0, 0.5) == 64.0
    assert il.de_giorgi_iterate(0, 1, 2, 1, 2, 1.0, 0.5) == 0.0
    with pytest.raises(InvalidInput):
        il.de_giorgi_iterate(1, 1, 2, 1, 1.0, 1.0, 0.5)
    with pytest.raises(InvalidInput):
        il.de_giorgi_iterate(1, 0, 2, 1, 2, 1.0, 0.5)
    with pytest.raises(InvalidInput):
        il.de_giorgi_iterate(1, 1, 2, 1, 2, 0.5, 0.5)


@given(f0=st.floats(0.01, 100), C=st.floats(0.01, 100), alpha=st.floats(0.1, 4), beta=st.floats(0.1, 4),
       gamma=st.floats(1.05, 4), gap=st.floats(0.05, 1.0), t=st.floats(1.0, 10.0))
def test_de_giorgi_monotone_and_scaling(f0, C, alpha, beta, gamma, gap, t):
    K = il.de_giorgi_iterate(f0, C, alpha, beta, gamma, 1.0, 1.0 - gap)
    assert il.de_giorgi_iterate(f0 * t, C, alpha, beta, gamma, 1.0, 1.0 - gap) >= K * (1 - 1e-12)
    assert il.de_giorgi_iterate(f0, C * t, alpha, beta, gamma, 1.0, 1.0 - gap) >= K * (1 - 1e-12)
    assert il.de_giorgi_iterate(f0, C, alpha, beta, gamma, 1.0, 1.0 - gap / t) >= K * (1 - 1e-12)
    assert il.de_giorgi_iterate(f0 * t, C, alpha, beta, gamma, 1.0, 1.0 - gap) == pytest.approx(
        K * t ** ((gamma - 1) / beta), rel=1e-9)


# ---------------------------------------------------------------------------
# maximal inequality


def test_maximal_constants():
    k = il.MaximalConstants(2, 4, 4, C2=2.0, C_WS=0.1)
    assert k.rho == 4 and k.p_star == pytest.approx(4 / 3)
    assert k.delta == pytest.approx(3) and k.delta_star == pytest.approx(1.5)
    assert k.kappa == pytest.approx(0.75)
    assert k.C1 == pytest.approx(2.0 * 2 * 0.1 * 2.5)
    assert k.C_max == pytest.approx(2 ** 6 * k.C1 ** 0.75)
    with pytest.raises(InvalidConfig):
        il.MaximalConstants(2, 2, 2, 1.0, 1.0)
    with pytest.raises(InvalidConfig):
        il.MaximalConstants(3, 3, 3, 1.0, 1.0)


def test_norm_comparison_constant_is_attained_by_inner_indicator(rough_env):
    box = il.BoxProblem((0, 0), 8)
    c2 = il.calibrate_norm_comparison(rough_env, box, 4, trials=20)
    inner = box.inner_mask(rough_env)
    ps = il.conjugate(4)
    # ||1_inner||_{p*,inner} = 1 and ||eta 1_inner||_{p*,outer} = (|inner|/|outer|)^{1/p*}
    ratio = (box.outer_mask(rough_env).sum() / inner.sum()) ** (1 / ps)
    assert c2 == pytest.approx(ratio, rel=1e-12)


def test_maximal_constant_function_passes(rough_env):
    box = il.BoxProblem((0, 0), 8)
    k = il.MaximalConstants(2, 4, 4, C2=1.0, C_WS=0.05)
    r = il.maximal_inequality_check(rough_env, np.ones(rough_env.shape), box, k)
    assert r.extra["prefactor"] >= 1
    assert r.passed


def test_maximal_sweep(rough_env):
    consts, results = il.maximal_sweep(rough_env, 16, 3, seed=2, p=4, q=4, calibration_trials=20)
    for r in results:
        assert r.passed
        assert r.extra["recursion_ok"] and r.extra["superlevel_empty"] and r.extra["K_matches_rhs"]


def test_maximal_moment_condition(rough_env):
    with pytest.raises(InvalidConfig):
        il.maximal_sweep(rough_env, 8, 1, seed=0, p=2, q=2)


# ---------------------------------------------------------------------------
# weak sector and H_-1


def test_weak_sector_constant_phi(plaquette_env):
    xi = random_field(plaquette_env.shape, 0)
    assert dirichlet_form(plaquette_env, xi, np.full(plaquette_env.shape, 3.0)) == 0.0


def test_weak_sector_diagonal(plaquette_env):
    phi = random_field(plaquette_env.shape, 1)
    e = dirichlet_form(plaquette_env, phi, phi)
    assert e == pytest.approx(cov_norm(plaquette_env, increments(plaquette_env, phi)) ** 2, rel=1e-12)
    assert e <= 2 * l2_mu_norm(plaquette_env, phi) ** 2


def test_weak_sector_sweep(plaquette_env, mixed_env):
    for env in (plaquette_env, mixed_env):
        r = il.weak_sector_check(env, 200, seed=3)
        assert r.passed and r.ratio <= 1


def test_h_minus_one(plaquette_env, srw_env):
    r = il.h_minus_one_check(plaquette_env, 200, seed=4)
    assert r.passed
    assert il.h_minus_one_check(srw_env, 20, seed=0).lhs == 0.0
    assert abs(np.mean(plaquette_env.V[0])) < 1e-15


def test_inequality_result_pass_rule():
    assert il.InequalityResult(1.0, 1.0, 1.0).passed
    assert il.InequalityResult(1.0 + 5e-10, 1.0, 1.0).passed
    assert not il.InequalityResult(1.0 + 1e-8, 1.0, 1.0).passed
    row = il.InequalityResult(0.5, 1.0, 2.0).row("x", 3)
    assert row["pass"] is True and row["instance"] == 3
