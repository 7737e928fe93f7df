import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cyclewalk import qfclt
from cyclewalk.corrector import lambda_continuation, with_covariance
from cyclewalk.env_model import WeightLaw, nn_two_cycles, plaquette_rotations, sample_environment
from cyclewalk.errors import InvalidConfig, InvalidCovariance, InvalidInput

from conftest import one_d_catalog


# ---------------------------------------------------------------------------
# statistics


def test_gaussianity_calibrated_on_true_gaussians():
    gen = np.random.default_rng(0)
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    pvals = []
    for _ in range(200):
        s = gen.multivariate_normal([0, 0], cov * 3.0, size=400)
        pvals += [r["p"] for r in qfclt.gaussianity_test(s, cov, 3.0, [[1, 0], [1, 1]])]
    rejections = np.mean(np.array(pvals) < 0.05)
    assert 0.02 <= rejections <= 0.09


def test_gaussianity_rejects_non_gaussian():
    s = np.random.default_rng(1).choice([-1.0, 1.0], size=(2000, 1))
    assert qfclt.gaussianity_test(s, [[1.0]], 1.0)[0]["p"] < 1e-6
    const = np.zeros((500, 2))
    assert all(r["p"] < 1e-6 for r in qfclt.gaussianity_test(const, np.eye(2), 1.0))


def test_gaussianity_errors():
    with pytest.raises(InvalidInput):
        qfclt.gaussianity_test(np.zeros((99, 2)), np.eye(2), 1.0)
    with pytest.raises(InvalidCovariance):
        qfclt.gaussianity_test(np.zeros((200, 2)), np.diag([1.0, 0.0]), 1.0)


def test_covariance_with_se():
    gen = np.random.default_rng(3)
    x = gen.multivariate_normal([1, -1], [[1.0, 0.3], [0.3, 2.0]], size=50_000)
    cov, se = qfclt.covariance_with_se(x)
    np.testing.assert_allclose(cov, np.cov(x.T), rtol=1e-12)
    assert np.all(np.abs(cov - [[1.0, 0.3], [0.3, 2.0]]) <= 4 * se)


def test_nonincreasing_with_slack():
    assert qfclt.nonincreasing_with_slack([3, 2, 1], [0, 0, 0])
    assert qfclt.nonincreasing_with_slack([1, 1.5], [0.3, 0.4])  # within hypot(0.3, 0.4) = 0.5
    assert not qfclt.nonincreasing_with_slack([1, 1.6], [0.3, 0.4])


@given(seed=st.integers(0, 2**40), n=st.integers(1, 64))
def test_jitter_stays_in_cell(seed, n):
    pts = np.random.default_rng(seed % 1000).integers(-50, 50, size=(30, 2))
    y, var = qfclt.jittered_endpoints(pts, n, seed)
    assert np.all(np.abs(y * n - pts) <= 0.5)
    assert var == pytest.approx(1 / (12 * n * n))
    y2, _ = qfclt.jittered_endpoints(pts, n, seed)
    assert np.array_equal(y, y2)


# ---------------------------------------------------------------------------
# building blocks


@pytest.fixture(scope="module")
def plaquette_sol(plaquette_env):
    return with_covariance(plaquette_env, lambda_continuation(plaquette_env)[-1])


def test_identity_check(plaquette_env, plaquette_sol):
    assert qfclt.identity_check(plaquette_env, plaquette_sol, count=50) <= 1e-8


def test_run_replicas_thread_independent(plaquette_env):
    a = qfclt.run_replicas(plaquette_env, 101, 9.0, seed=4, threads=1)
    b = qfclt.run_replicas(plaquette_env, 101, 9.0, seed=4, threads=3)
    assert np.array_equal(a.endpoints, b.endpoints)
    assert np.array_equal(a.jumps, b.jumps)


def test_vanishing_zero_on_symmetric_env(srw_env):
    sol = with_covariance(srw_env, lambda_continuation(srw_env)[-1])
    assert np.abs(sol.chi).max() <= 1e-8
    rows = qfclt.corrector_vanishing_check(srw_env, sol, (2, 4), replicas=200, T=1.0, eps=1e-3)
    assert [r["exceed_freq"] for r in rows] == [0.0, 0.0]


def test_vanishing_large_eps(plaquette_env, plaquette_sol):
    big = float(qfclt.chi_magnitude(plaquette_sol).max()) + 1.0
    rows = qfclt.corrector_vanishing_check(plaquette_env, plaquette_sol, (1, 2), replicas=200, T=1.0, eps=big)
    assert all(r["exceed_freq"] == 0.0 for r in rows)
    small = qfclt.corrector_vanishing_check(plaquette_env, plaquette_sol, (1,), replicas=200, T=1.0, eps=0.0)
    assert small[0]["exceed_freq"] > 0.5


# ---------------------------------------------------------------------------
# configuration


def test_config_validation():
    cat = plaquette_rotations(2, WeightLaw.uniform(0.05, 0.45))
    with pytest.raises(InvalidConfig):
        qfclt.ExperimentConfig(cat, 8, replicas=50)
    with pytest.raises(InvalidConfig):
        qfclt.ExperimentConfig(cat, 8, T=0.0)
    with pytest.raises(InvalidConfig):
        qfclt.ExperimentConfig(cat, 8, n_grid=(0, 4))
    with pytest.raises(InvalidConfig):
        qfclt.ExperimentConfig(cat, 8, significance=1.5)
    with pytest.raises(InvalidConfig):
        qfclt.ExperimentConfig(cat, 8, p=2.0, q=2.0)
    with pytest.raises(InvalidConfig):
        qfclt.ExperimentConfig(cat, 8, directions=[[0, 0]]).vectors()
    cfg = qfclt.ExperimentConfig(cat, 8, p=4.0, q=4.0, directions=[1, 1])
    assert cfg.vectors().shape == (1, 2)


def test_stage_tags_errors():
    cat = plaquette_rotations(2, WeightLaw.uniform(0.05, 0.45))
    cfg = qfclt.ExperimentConfig(cat, 8, schedule=(1e-2, 1e-1), replicas=100)
    with pytest.raises(InvalidInput) as exc:
        qfclt.run_qfclt_experiment(cfg)
    assert str(exc.value).startswith("[corrector]")


# ---------------------------------------------------------------------------
# small end-to-end runs


def small_config(cat, L, **kw):
    base = dict(seed=7, n_grid=(2, 4), replicas=400, periodization_check=False, schedule=(1e-2, 1e-4, 1e-6))
    base.update(kw)
    return qfclt.ExperimentConfig(cat, L, **base)


def test_srw_covariance_is_twice_identity():
    cat = nn_two_cycles(2, WeightLaw.constant(0.5))
    rep = qfclt.run_qfclt_experiment(small_config(cat, 8, replicas=4000, n_grid=(4,)))
    np.testing.assert_allclose(rep.sigma2, 2 * np.eye(2), atol=1e-6)
    row = rep.row_for(4)
    assert np.all(np.abs(row["cov"] - 2 * np.eye(2)) <= 4 * row["cov_se"])
    # a symmetric walk has no corrector, so the compensator equals T v.Sigma2.v exactly
    for h in row["h1"]:
        assert h["mean_abs_err"] <= 1e-6


def test_one_d_variance_is_twice_harmonic_mean():
    env = sample_environment(one_d_catalog(), 1, 128, 7)
    hm = 1.0 / np.mean(1.0 / env.c[0])
    rep = qfclt.run_qfclt_experiment(small_config(one_d_catalog(), 128, replicas=3000, n_grid=(8,), T=2.0))
    assert rep.sigma2[0, 0] == pytest.approx(2 * hm, rel=1e-3)
    row = rep.row_for(8)
    assert abs(row["cov"][0, 0] - 2 * hm) <= 4 * row["cov_se"][0, 0] + 0.03 * 2 * hm


def test_report_deterministic_and_thread_independent():
    cat = plaquette_rotations(2, WeightLaw.uniform(0.05, 0.45))
    a = qfclt.run_qfclt_experiment(small_config(cat, 8, threads=1)).to_dict()
    b = qfclt.run_qfclt_experiment(small_config(cat, 8, threads=1)).to_dict()
    c = qfclt.run_qfclt_experiment(small_config(cat, 8, threads=3)).to_dict()
    assert a == b
    assert a["per_n"] == c["per_n"] and a["ks"] == c["ks"] and a["vanishing"] == c["vanishing"]
    assert np.allclose(a["sigma2"], c["sigma2"], rtol=1e-9, atol=0)


def test_report_tables_and_trends():
    cat = plaquette_rotations(2, WeightLaw.uniform(0.05, 0.45))
    rep = qfclt.run_qfclt_experiment(small_config(cat, 8, periodization_check=True))
    assert rep.sigma2_2L is not None and rep.periodization_rel_diff < 0.2
    header, body = rep.covariance_csv()
    assert header[0] == "n" and len(header) == 1 + 4 + 4 + 1 and len(body) == 2
    assert len(rep.ks_csv()[1]) == 4
    assert len(rep.h2_csv()[1]) == 2 * 2 * 3
    for r in rep.h2_rows:
        h1 = rep.row_for(r["n"])["h1"][r["v_index"]]
        assert r["tail_mean"] <= h1["compensator_mean"] + 1e-12
    t = qfclt.trend_summary(rep)
    assert set(t) == {"h1_nonincreasing", "vanishing_nonincreasing", "ks_not_rejected_at_max_n",
                      "frob_err_at_max_n"}
    assert math.isfinite(t["frob_err_at_max_n"])
