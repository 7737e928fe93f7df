"""Regularized corrector equation, harmonic coordinates and effective covariance.

For each coordinate i we solve on the torus

    (-L phi)(x) + lam * mu(x) * phi(x) = -V^i(x),

the finite-volume Euler-Lagrange equation of the regularized weak Poisson
problem.  ``phi`` approximates the corrector chi^i (L chi = V), so the
harmonic coordinates are Phi^i(x) = x^i - chi^i(x) with chi = phi - phi(0).
All averages ("E[...]") are torus averages (1/L^d) sum_x.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from cyclewalk.env_model import EnvironmentTorus, at_neighbor, directions
from cyclewalk.errors import ConsistencyError, InvalidGeometry, InvalidInput, NumericFailure, SolverFailure

logger = logging.getLogger(__name__)

DEFAULT_SCHEDULE = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
DEFAULT_TOL = 1e-10


# ---------------------------------------------------------------------------
# discrete calculus on the torus


def increments(env: EnvironmentTorus, f: np.ndarray) -> np.ndarray:
    """Df[k](x) = f(x + z_k) - f(x), shape (2d,) + (L,)*d."""
    return np.stack([at_neighbor(f, z) - f for z in directions(env.d)])


def apply_generator(env: EnvironmentTorus, f: np.ndarray) -> np.ndarray:
    """(L f)(x) = sum_z c(x, x+z) (f(x+z) - f(x))."""
    return (env.c * increments(env, f)).sum(axis=0)


def torus_mean(f) -> float:
    return float(np.mean(f))


def l2_mu_norm(env: EnvironmentTorus, f) -> float:
    return math.sqrt(torus_mean(env.mu * f * f))


def dirichlet_form(env: EnvironmentTorus, xi, phi) -> float:
    """E(xi, phi) = E[xi (-L phi)]."""
    return torus_mean(xi * -apply_generator(env, phi))


def generator_matrix(env: EnvironmentTorus) -> sp.csr_matrix:
    """Sparse N x N matrix of L on flattened sites (row-major)."""
    n = env.volume
    idx = np.arange(n).reshape(env.shape)
    rows, cols, vals = [], [], []
    for k, z in enumerate(directions(env.d)):
        rows.append(idx.ravel())
        cols.append(at_neighbor(idx, z).ravel())
        vals.append(env.c[k].ravel())
    off = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return (off - sp.diags(env.c.sum(axis=0).ravel())).tocsr()


# ---------------------------------------------------------------------------
# norms


def cov_norm(env: EnvironmentTorus, psi: np.ndarray, cocycle: bool = False) -> float:
    """Edge form sqrt(E[(1/2) sum_z c_s(0,z) psi(z)^2]).

    With ``cocycle=True`` the cycle form is also evaluated and must agree.
    """
    edge = math.sqrt(0.5 * torus_mean((env.cs * psi * psi).sum(axis=0)))
    if cocycle:
        cyc = cov_norm_cycle(env, psi)
        if abs(edge - cyc) > 1e-10 * max(edge, cyc, 1e-300) and abs(edge - cyc) > 1e-300:
            raise ConsistencyError(f"cov norm edge form {edge!r} != cycle form {cyc!r}")
    return edge


def cov_norm_cycle(env: EnvironmentTorus, psi: np.ndarray) -> float:
    """Cycle form sqrt(E[(1/2) sum_shapes w(0) sum_{(x,y) in cycle} psi(x, y-x)^2])."""
    total = 0.0
    for w, cyc in zip(env.weights, env.catalog.shapes):
        acc = np.zeros(env.shape)
        for tail, k in cyc.edges():
            acc += at_neighbor(psi[k], tail) ** 2
        total += float((w * acc).sum())
    return math.sqrt(0.5 * total / env.volume)


def compute_alpha(env: EnvironmentTorus) -> float:
    """max_i sqrt(E[sum_shapes w(0) sum_{x in shape} (x^i)^2]), base-relative vertices."""
    second = np.zeros(env.d)
    for w, cyc in zip(env.weights, env.catalog.shapes):
        v = cyc.distinct_vertices.astype(float)
        second += float(w.sum()) * (v**2).sum(axis=0)
    return float(math.sqrt(second.max() / env.volume))


# ---------------------------------------------------------------------------
# solutions


@dataclass
class CorrectorSolution:
    lam: float
    phi: np.ndarray  # (d,) + (L,)*d, raw solution of the regularized equation
    residual: np.ndarray  # (-L + lam mu) phi + V
    iterations: list = field(default_factory=list)
    chi: np.ndarray = None  # phi - phi(0)
    Phi: np.ndarray = None  # x^i - chi^i(x) on the fundamental domain [0, L)^d
    residual_harmonic: np.ndarray = None  # L Phi
    sigma2: np.ndarray = None
    norms: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.phi.shape[0]

    @property
    def L(self) -> int:
        return self.phi.shape[1]

    def chi_at(self, points) -> np.ndarray:
        """chi at unwrapped lattice points, shape (..., d) -> (..., d)."""
        pts = np.asarray(points, dtype=np.int64) % self.L
        idx = tuple(np.moveaxis(pts, -1, 0))
        return np.moveaxis(self.chi[(slice(None),) + idx], 0, -1)

    def Phi_at(self, points) -> np.ndarray:
        """Harmonic coordinates x - chi(x) at unwrapped points."""
        return np.asarray(points, dtype=np.float64) - self.chi_at(points)


def _sup(a) -> float:
    return float(np.abs(a).max()) if a.size else 0.0


def _damped_jacobi(A, b, x, diag, target, maxiter, omega=0.5):
    best_x, best_r = x, _sup(A @ x - b)
    for it in range(maxiter):
        r = b - A @ x
        rs = _sup(r)
        if rs < best_r:
            best_x, best_r = x, rs
        if rs <= target:
            return x, it, rs
        x = x + omega * r / diag
    return best_x, maxiter, best_r


def _solve_one(A, b, diag, x0, target, maxiter):
    """Jacobi-preconditioned BiCGSTAB, then GMRES, then damped Jacobi."""
    if not b.any() and (x0 is None or not x0.any()):
        return np.zeros_like(b), 0, 0.0, "trivial"
    M = sp.diags(1.0 / diag)
    x = np.zeros_like(b) if x0 is None else x0.copy()
    best_x, best_r = x, _sup(A @ x - b)
    if best_r <= target:
        return x, 0, best_r, "initial"
    count = [0]

    def cb(_):
        count[0] += 1

    # the Krylov stopping rule uses the 2-norm, which dominates the sup-norm
    for method, solver in (("bicgstab", spla.bicgstab), ("gmres", spla.gmres)):
        for _restart in range(4):
            kwargs = dict(x0=best_x, rtol=0.0, atol=0.5 * target, maxiter=maxiter, M=M, callback=cb)
            if method == "gmres":
                kwargs.update(restart=min(50, b.size), callback_type="pr_norm")
            try:
                x, _info = solver(A, b, **kwargs)
            except (ArithmeticError, ValueError):
                break
            if not np.all(np.isfinite(x)):
                break
            r = _sup(A @ x - b)
            if r < best_r:
                best_x, best_r = x, r
            if best_r <= target:
                return best_x, count[0], best_r, method
    logger.warning("Krylov solvers stalled at residual %.3e; falling back to damped Jacobi", best_r)
    x, it, r = _damped_jacobi(A, b, best_x, diag, target, maxiter)
    count[0] += it
    if r <= target:
        return x, count[0], r, "jacobi"
    raise SolverFailure(f"no convergence: residual {r:.3e} > target {target:.3e}", best_residual=r, iterations=count[0])


def solve_regularized_poisson(env: EnvironmentTorus, lam: float, tol: float = DEFAULT_TOL, maxiter: int = 20000,
                              x0=None, threads: int = 1) -> CorrectorSolution:
    if not lam > 0:
        raise InvalidInput(f"lambda must be positive, got {lam}")
    if env.cs.min() <= 0:
        raise InvalidInput("environment is not elliptic (some c_s = 0)")
    Lmat = generator_matrix(env)
    mu = env.mu.ravel()
    A = (-Lmat + sp.diags(lam * mu)).tocsr()
    diag = A.diagonal()
    d = env.d

    def work(i):
        b = -env.V[i].ravel()
        target = tol * max(1.0, _sup(b))
        guess = None if x0 is None else np.asarray(x0[i]).ravel()
        return _solve_one(A, b, diag, guess, target, maxiter)

    if threads > 1 and d > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(d)))
    else:
        results = [work(i) for i in range(d)]

    phi = np.stack([r[0].reshape(env.shape) for r in results])
    residual = np.stack([(A @ phi[i].ravel() + env.V[i].ravel()).reshape(env.shape) for i in range(d)])
    sol = CorrectorSolution(lam=float(lam), phi=phi, residual=residual,
                            iterations=[int(r[1]) for r in results])
    sol.norms["methods"] = [r[3] for r in results]
    origin = (slice(None),) + (0,) * d
    sol.chi = phi - phi[origin].reshape((d,) + (1,) * d)
    sol.norms.update(solution_norms(env, sol))
    return sol


def solution_norms(env: EnvironmentTorus, sol: CorrectorSolution) -> dict:
    alpha = compute_alpha(env)
    dphi = [cov_norm(env, increments(env, sol.phi[i])) for i in range(sol.d)]
    l2 = [l2_mu_norm(env, sol.phi[i]) for i in range(sol.d)]
    return {"alpha": alpha, "cov_norm_Dphi": dphi, "l2mu_phi": l2,
            "residual_sup": [_sup(sol.residual[i]) for i in range(sol.d)]}


def norm_bounds_hold(sol: CorrectorSolution, slack: float = 1e-9) -> dict:
    """Check ||D phi||_cov <= sqrt(2) alpha and lam ||phi|| <= sqrt(2 lam) alpha."""
    a = sol.norms["alpha"]
    lam = sol.lam
    grad_ok = all(v <= math.sqrt(2) * a + slack for v in sol.norms["cov_norm_Dphi"])
    l2_ok = all(lam * v <= math.sqrt(2 * lam) * a + slack for v in sol.norms["l2mu_phi"])
    return {"gradient": grad_ok, "l2": l2_ok, "pass": grad_ok and l2_ok}


def lambda_continuation(env: EnvironmentTorus, schedule=DEFAULT_SCHEDULE, tol: float = DEFAULT_TOL,
                        maxiter: int = 20000, threads: int = 1) -> list:
    schedule = [float(s) for s in schedule]
    if not schedule or any(s <= 0 for s in schedule):
        raise InvalidInput("lambda schedule must be non-empty and positive")
    if any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise InvalidInput("lambda schedule must be strictly decreasing")
    out = []
    prev = None
    for lam in schedule:
        sol = solve_regularized_poisson(env, lam, tol=tol, maxiter=maxiter,
                                        x0=None if prev is None else prev.phi, threads=threads)
        sol.norms["bounds"] = norm_bounds_hold(sol)
        if prev is not None:
            sol.norms["cauchy_cov"] = [
                cov_norm(env, increments(env, sol.phi[i] - prev.phi[i])) for i in range(sol.d)
            ]
        logger.info("lambda=%.1e iterations=%s", lam, sol.iterations)
        out.append(sol)
        prev = sol
    return out


def harmonic_coordinates(env: EnvironmentTorus, sol: CorrectorSolution) -> CorrectorSolution:
    """Attach Phi = x - chi and its generator residual L Phi = -lam mu phi + residual."""
    d = env.d
    coords = env.site_coords().astype(np.float64)
    Phi = coords - sol.chi
    # L Phi^i = V^i - L phi^i (L annihilates constants and x^i contributes V^i)
    LPhi = np.stack([env.V[i] - apply_generator(env, sol.phi[i]) for i in range(d)])
    expected = -sol.lam * env.mu * sol.phi + sol.residual
    scale = max(1.0, _sup(env.V))
    mismatch = _sup(LPhi - expected)
    if mismatch > 1e-8 * scale:
        raise ConsistencyError(f"L Phi differs from -lam mu phi + residual by {mismatch:.3e}")
    out = replace(sol, Phi=Phi, residual_harmonic=LPhi, norms=dict(sol.norms))
    out.norms["harmonic_residual_sup"] = _sup(LPhi)
    out.norms["harmonic_identity_mismatch"] = mismatch
    return out


def phi_hat(env: EnvironmentTorus, sol: CorrectorSolution) -> np.ndarray:
    """Increments of Phi: hat Phi^i(x, z_k) = z_k^i - (phi^i(x+z_k) - phi^i(x)); shape (d, 2d) + (L,)*d."""
    dirs = directions(env.d)
    out = np.empty((env.d, 2 * env.d) + env.shape)
    for i in range(env.d):
        dphi = increments(env, sol.phi[i])
        for k in range(2 * env.d):
            out[i, k] = dirs[k, i] - dphi[k]
    return out


def effective_covariance(env: EnvironmentTorus, sol: CorrectorSolution) -> np.ndarray:
    """Sigma^2_ij = E[sum_z c_s(0,z) hatPhi^i(z) hatPhi^j(z)]."""
    ph = phi_hat(env, sol)
    d = env.d
    s2 = np.empty((d, d))
    for i in range(d):
        for j in range(d):
            s2[i, j] = torus_mean((env.cs * ph[i] * ph[j]).sum(axis=0))
    s2 = 0.5 * (s2 + s2.T)
    if not np.all(np.isfinite(s2)):
        raise NumericFailure("effective covariance has non-finite entries")
    return s2


def with_covariance(env: EnvironmentTorus, sol: CorrectorSolution) -> CorrectorSolution:
    """Harmonic coordinates plus Sigma^2 and its eigenvalues."""
    out = harmonic_coordinates(env, sol) if sol.Phi is None else sol
    out.sigma2 = effective_covariance(env, out)
    out.norms["sigma2_eigenvalues"] = [float(v) for v in np.linalg.eigvalsh(out.sigma2)]
    return out


def directional_cov_norm(env: EnvironmentTorus, sol: CorrectorSolution, v) -> float:
    """||v . Phi||_cov computed on the increments hatPhi."""
    ph = phi_hat(env, sol)
    psi = np.tensordot(np.asarray(v, dtype=float), ph, axes=(0, 0))
    return cov_norm(env, psi)


# ---------------------------------------------------------------------------
# sublinearity


def rho(d: int, q: float) -> float:
    """d / (d - 2 + d/q); q = inf gives d/(d-2) (inf when d = 2)."""
    if d < 2:
        raise InvalidInput("rho is defined for d >= 2")
    denom = (d - 2) + (0.0 if math.isinf(q) else d / q)
    return math.inf if denom == 0 else d / denom


def averaged_norm(values, p: float) -> float:
    """(|B|^-1 sum |u|^p)^(1/p); p = inf gives the max."""
    a = np.abs(np.asarray(values, dtype=float)).ravel()
    if a.size == 0:
        return 0.0
    if math.isinf(p):
        return float(a.max())
    return float(np.mean(a**p) ** (1.0 / p))


def box_offsets(d: int, n: int) -> np.ndarray:
    """All points of B(n) = {|x|_inf <= n}, shape (|B|, d)."""
    axes = [np.arange(-n, n + 1)] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)


def sublinearity_profile(env: EnvironmentTorus, sol: CorrectorSolution, n_grid, q: float = math.inf) -> list:
    """Rows (n, S_inf, S_2rho) with chi read through unwrapped torus lookup."""
    r = rho(env.d, q)
    rows = []
    for n in n_grid:
        n = int(n)
        if n < 1 or n > env.L // 2:
            raise InvalidGeometry(f"n={n} outside 1..floor(L/2)={env.L // 2}")
        chi = sol.chi_at(box_offsets(env.d, n))
        s_inf = float(np.abs(chi).max()) / n
        s_2rho = max(averaged_norm(chi[:, i], 2 * r) for i in range(env.d)) / n
        rows.append((n, s_inf, s_2rho))
    return rows
