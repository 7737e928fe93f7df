"""End-to-end invariance-principle experiments.

For each diffusive scale n the walk runs to time n^2 T from the origin and
the harness compares the rescaled endpoints X_{n^2 T}/n with the Gaussian
of covariance T Sigma^2, integrates the (truncated) compensator of the
martingale part, and records how often the rescaled corrector exceeds a
threshold along the path.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from cyclewalk import rng
from cyclewalk.corrector import (DEFAULT_SCHEDULE, DEFAULT_TOL, directional_cov_norm, lambda_continuation,
                                 with_covariance)
from cyclewalk.env_model import CycleCatalog, EnvironmentTorus, check_env_invariants, sample_environment
from cyclewalk.errors import CycleWalkError, InvalidConfig, InvalidCovariance, InvalidInput
from cyclewalk.walker import BatchResult, compensator_integrand, simulate_batch

logger = logging.getLogger(__name__)

WALK_LABEL = 0x3A1C
IDENTITY_LABEL = 0x1D
JITTER_LABEL = 0x717


@dataclass
class ExperimentConfig:
    catalog: CycleCatalog
    L: int
    seed: int = 0
    schedule: tuple = DEFAULT_SCHEDULE
    n_grid: tuple = (4, 8, 16)
    replicas: int = 10_000
    T: float = 1.0
    directions: tuple | None = None  # default: canonical basis
    significance: float = 0.01
    eps_grid: tuple = (0.05, 0.1, 0.2)  # H2 truncation levels
    vanishing_eps: float = 0.1
    periodization_check: bool = True
    tol: float = DEFAULT_TOL
    threads: int = 1
    p: float | None = None
    q: float | None = None

    def __post_init__(self):
        if self.replicas < 100:
            raise InvalidConfig("replicas must be >= 100")
        if not self.T > 0:
            raise InvalidConfig("T must be positive")
        if not self.n_grid or any(int(n) < 1 for n in self.n_grid):
            raise InvalidConfig("n_grid must contain positive integers")
        if not 0 < self.significance < 1:
            raise InvalidConfig("significance must lie in (0, 1)")
        if self.p is not None and self.q is not None and not 1 / self.p + 1 / self.q < 2 / self.d:
            raise InvalidConfig(f"moment condition 1/p + 1/q < 2/d fails for p={self.p}, q={self.q}")
        self.n_grid = tuple(int(n) for n in self.n_grid)

    @property
    def d(self) -> int:
        return self.catalog.d

    def vectors(self) -> np.ndarray:
        if self.directions is None:
            return np.eye(self.d)
        v = np.asarray(self.directions, dtype=float).reshape(-1, self.d)
        if (np.linalg.norm(v, axis=1) == 0).any():
            raise InvalidConfig("projection directions must be nonzero")
        return v


@dataclass
class QfcltReport:
    d: int
    L: int
    seed: int
    replicas: int
    T: float
    sigma2: np.ndarray
    sigma2_2L: np.ndarray | None
    periodization_rel_diff: float | None
    identity_max_rel_err: float
    vectors: np.ndarray
    rows: list = field(default_factory=list)  # one dict per n
    ks_rows: list = field(default_factory=list)
    h2_rows: list = field(default_factory=list)
    vanishing_rows: list = field(default_factory=list)
    constants: dict = field(default_factory=dict)

    def row_for(self, n) -> dict:
        for r in self.rows:
            if r["n"] == n:
                return r
        raise KeyError(n)

    def covariance_csv(self):
        d = self.d
        header = ["n"] + [f"cov{i + 1}{j + 1}" for i in range(d) for j in range(d)] + \
                 [f"se{i + 1}{j + 1}" for i in range(d) for j in range(d)] + ["frob_err"]
        body = [[r["n"]] + list(np.ravel(r["cov"])) + list(np.ravel(r["cov_se"])) + [r["frob_err"]]
                for r in self.rows]
        return header, body

    def ks_csv(self):
        return ["n", "v_index", "ks", "p"], [[r["n"], r["v_index"], r["ks"], r["p"]] for r in self.ks_rows]

    def vanishing_csv(self):
        return (["n", "eps", "exceed_freq", "stderr"],
                [[r["n"], r["eps"], r["exceed_freq"], r["stderr"]] for r in self.vanishing_rows])

    def h1_csv(self):
        header = ["n", "v_index", "h1_mean_abs_err", "h1_stderr", "compensator_mean", "target"]
        body = [[r["n"], k, h["mean_abs_err"], h["stderr"], h["compensator_mean"], h["target"]]
                for r in self.rows for k, h in enumerate(r["h1"])]
        return header, body

    def h2_csv(self):
        return (["n", "v_index", "eps", "tail_mean", "stderr"],
                [[r["n"], r["v_index"], r["eps"], r["tail_mean"], r["stderr"]] for r in self.h2_rows])

    def to_dict(self) -> dict:
        def clean(x):
            if isinstance(x, np.ndarray):
                return clean(x.tolist())
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            if isinstance(x, np.generic):
                return x.item()
            return x

        return clean({
            "d": self.d, "L": self.L, "seed": self.seed, "replicas": self.replicas, "T": self.T,
            "sigma2": self.sigma2, "sigma2_2L": self.sigma2_2L,
            "periodization_rel_diff": self.periodization_rel_diff,
            "identity_max_rel_err": self.identity_max_rel_err, "vectors": self.vectors,
            "per_n": self.rows, "ks": self.ks_rows, "h2": self.h2_rows, "vanishing": self.vanishing_rows,
            "constants": self.constants,
        })


# ---------------------------------------------------------------------------
# statistics


def gaussianity_test(samples, sigma2, T: float, vectors=None) -> list:
    """One-sample KS of v.s / sqrt(T v.Sigma2.v) against N(0,1) for each v."""
    s = np.asarray(samples, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] < 100:
        raise InvalidInput("gaussianity test needs at least 100 samples")
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=float))
    d = s.shape[1]
    vectors = np.eye(d) if vectors is None else np.asarray(vectors, dtype=float).reshape(-1, d)
    out = []
    for k, v in enumerate(vectors):
        var = float(v @ sigma2 @ v) * T
        if not var > 0:
            raise InvalidCovariance(f"v.Sigma2.v = {var} is not positive for v = {v.tolist()}")
        z = (s @ v) / math.sqrt(var)
        res = stats.kstest(z, "norm", method="asymp")
        out.append({"v_index": k, "ks": float(res.statistic), "p": float(res.pvalue)})
    return out


def covariance_with_se(x: np.ndarray):
    """Sample covariance (ddof 1) and entrywise standard errors."""
    R = x.shape[0]
    xc = x - x.mean(axis=0)
    prod = xc[:, :, None] * xc[:, None, :]
    cov = prod.sum(axis=0) / (R - 1)
    se = prod.std(axis=0, ddof=1) / math.sqrt(R)
    return 0.5 * (cov + cov.T), se


def mean_se(x) -> tuple:
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def nonincreasing_with_slack(values, stderrs) -> bool:
    """values[k+1] <= values[k] + (one standard error of the difference)."""
    return all(b <= a + math.hypot(sa, sb) for a, b, sa, sb in zip(values, values[1:], stderrs, stderrs[1:]))


def identity_check(env: EnvironmentTorus, sol, count: int = 100, seed: int = 0) -> float:
    """Worst relative error of v.Sigma2.v = 2 ||v.Phi||_cov^2 over basis and random v."""
    gen = rng.generator(seed, IDENTITY_LABEL)
    vs = np.concatenate([np.eye(env.d), gen.standard_normal((count, env.d))])
    worst = 0.0
    for v in vs:
        lhs = float(v @ sol.sigma2 @ v)
        rhs = 2.0 * directional_cov_norm(env, sol, v) ** 2
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-300))
    return worst


# ---------------------------------------------------------------------------
# simulation


def jittered_endpoints(endpoints, n: int, seed: int):
    """(X + U)/n with U uniform on the unit cell centred at 0, and the added variance 1/(12 n^2).

    Lattice-valued samples put atoms of mass O(1/n) into the empirical law;
    spreading each atom over its cell restores a continuous law for the KS test.
    """
    R, d = endpoints.shape
    key = rng.derive_key(seed, JITTER_LABEL, n)
    u = rng.uniforms(key, np.arange(R * d, dtype=np.uint64)).reshape(R, d) - 0.5
    return (endpoints + u) / n, 1.0 / (12.0 * n * n)


def walk_seed(seed: int, n: int) -> int:
    return int(rng.derive_key(seed, WALK_LABEL, n))


def run_replicas(env, replicas, horizon, seed, functionals=(), sup_field=None, threads=1) -> BatchResult:
    """simulate_batch split into contiguous replica chunks; results are thread-count independent."""
    threads = max(1, int(threads))
    if threads == 1 or replicas < 2 * threads:
        return simulate_batch(env, replicas, horizon, seed, functionals=functionals, sup_field=sup_field)
    bounds = np.linspace(0, replicas, threads + 1).astype(int)

    def work(k):
        lo, hi = int(bounds[k]), int(bounds[k + 1])
        return simulate_batch(env, hi - lo, horizon, seed, functionals=functionals, sup_field=sup_field,
                              first_replica=lo)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(work, range(threads)))
    return BatchResult(np.concatenate([p.endpoints for p in parts]),
                       np.concatenate([p.integrals for p in parts]),
                       np.concatenate([p.jumps for p in parts]),
                       np.concatenate([p.site_sup for p in parts]), float(horizon))


def chi_magnitude(sol) -> np.ndarray:
    return np.sqrt((sol.chi**2).sum(axis=0))


def corrector_vanishing_check(env, sol, n_grid, replicas: int, T: float, eps: float, seed: int = 0,
                              threads: int = 1) -> list:
    """Per n: frequency of sup_{t<=T} |chi(X_{n^2 t})|/n > eps over replicas."""
    rows = []
    h = chi_magnitude(sol)
    for n in n_grid:
        n = int(n)
        b = run_replicas(env, replicas, n * n * T, walk_seed(seed, n), sup_field=h, threads=threads)
        rows.append(_vanishing_row(n, eps, b.site_sup))
    return rows


def _vanishing_row(n, eps, site_sup) -> dict:
    hits = site_sup / n > eps
    f = float(hits.mean())
    return {"n": n, "eps": eps, "exceed_freq": f, "stderr": math.sqrt(f * (1 - f) / hits.size)}


class _Stage:
    """Tags package errors with the pipeline stage that raised them."""

    def __init__(self, name):
        self.name = name

    def __enter__(self):
        logger.info("stage %s", self.name)
        return self

    def __exit__(self, et, ev, tb):
        if ev is not None and isinstance(ev, CycleWalkError) and not getattr(ev, "stage", None):
            ev.stage = self.name
            if ev.args:
                ev.args = (f"[{self.name}] {ev.args[0]}",) + ev.args[1:]
        return False


def solve_corrector(env, config: ExperimentConfig):
    sols = lambda_continuation(env, config.schedule, tol=config.tol, threads=config.threads)
    return sols, with_covariance(env, sols[-1])


def run_qfclt_experiment(config: ExperimentConfig) -> QfcltReport:
    d = config.d
    with _Stage("environment"):
        env = sample_environment(config.catalog, d, config.L, config.seed)
        rep = check_env_invariants(env)
        if not rep.passed:
            raise InvalidConfig(f"environment invariants failed: {[c.name for c in rep.failures()]}")
    with _Stage("corrector"):
        sols, sol = solve_corrector(env, config)
        bounds_ok = all(s.norms["bounds"]["pass"] for s in sols)
        ident = identity_check(env, sol, seed=config.seed)
    sigma2_2L, rel = None, None
    if config.periodization_check:
        with _Stage("periodization"):
            env2 = sample_environment(config.catalog, d, 2 * config.L, config.seed)
            _, sol2 = solve_corrector(env2, config)
            sigma2_2L = sol2.sigma2
            rel = float(np.linalg.norm(sigma2_2L - sol.sigma2) / np.linalg.norm(sol.sigma2))

    V = config.vectors()
    targets = np.array([float(v @ sol.sigma2 @ v) * config.T for v in V])
    for k, t in enumerate(targets):
        if not t > 0:
            raise InvalidCovariance(f"v.Sigma2.v is not positive for direction {k}")
    report = QfcltReport(d=d, L=config.L, seed=config.seed, replicas=config.replicas, T=config.T,
                         sigma2=sol.sigma2, sigma2_2L=sigma2_2L, periodization_rel_diff=rel,
                         identity_max_rel_err=ident, vectors=V)
    report.constants = {"alpha": sol.norms["alpha"], "lambda_final": sol.lam, "norm_bounds_pass": bounds_ok,
                        "significance": config.significance,
                        "sigma2_eigenvalues": sol.norms["sigma2_eigenvalues"]}
    h = chi_magnitude(sol)
    for n in config.n_grid:
        with _Stage(f"simulate n={n}"):
            funcs = [compensator_integrand(env, sol, v, n) for v in V]
            for v in V:
                funcs += [compensator_integrand(env, sol, v, n, eps) for eps in config.eps_grid]
            b = run_replicas(env, config.replicas, n * n * config.T, walk_seed(config.seed, n),
                             functionals=funcs, sup_field=h, threads=config.threads)
        with _Stage(f"statistics n={n}"):
            y = b.endpoints / n
            cov, cov_se = covariance_with_se(y / math.sqrt(config.T))
            frob = float(np.linalg.norm(cov - sol.sigma2) / np.linalg.norm(sol.sigma2))
            h1 = []
            for k in range(len(V)):
                comp = b.integrals[:, k]
                err, err_se = mean_se(np.abs(comp - targets[k]))
                cm, cm_se = mean_se(comp)
                h1.append({"mean_abs_err": err, "stderr": err_se, "compensator_mean": cm,
                           "compensator_stderr": cm_se, "target": float(targets[k])})
            base = len(V)
            for k in range(len(V)):
                for e, eps in enumerate(config.eps_grid):
                    m, s = mean_se(b.integrals[:, base + k * len(config.eps_grid) + e])
                    report.h2_rows.append({"n": n, "v_index": k, "eps": eps, "tail_mean": m, "stderr": s})
            yj, extra_var = jittered_endpoints(b.endpoints, n, config.seed)
            for r in gaussianity_test(yj, sol.sigma2 + np.eye(d) * extra_var / config.T, config.T, V):
                r.update(n=n, reject=bool(r["p"] < config.significance))
                report.ks_rows.append(r)
            report.vanishing_rows.append(_vanishing_row(n, config.vanishing_eps, b.site_sup))
            report.rows.append({"n": n, "cov": cov, "cov_se": cov_se, "frob_err": frob,
                                "mean": y.mean(axis=0), "mean_jumps": float(b.jumps.mean()), "h1": h1})
    return report


def trend_summary(report: QfcltReport) -> dict:
    """Trend gates across the n grid: H1 error and corrector exceedance nonincreasing."""
    h1_ok = all(
        nonincreasing_with_slack([r["h1"][k]["mean_abs_err"] for r in report.rows],
                                 [r["h1"][k]["stderr"] for r in report.rows])
        for k in range(len(report.vectors)))
    van = report.vanishing_rows
    van_ok = nonincreasing_with_slack([r["exceed_freq"] for r in van], [r["stderr"] for r in van])
    last = report.rows[-1]["n"]
    ks_ok = not any(r["reject"] for r in report.ks_rows if r["n"] == last)
    return {"h1_nonincreasing": h1_ok, "vanishing_nonincreasing": van_ok, "ks_not_rejected_at_max_n": ks_ok,
            "frob_err_at_max_n": report.rows[-1]["frob_err"]}
