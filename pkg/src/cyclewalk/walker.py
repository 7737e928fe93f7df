"""Variable speed random walk in a fixed periodized environment.

The walk waits an Exp(mu(x)) time at x and then jumps to x + z with
probability c(x, x+z) / mu(x).  Positions are kept unwrapped in Z^d; the
environment is read at the position modulo L.

Randomness: replica ``r`` of master seed ``s`` draws jump ``j`` from the
keyed stream ``(s, r)`` at counters ``2j`` (holding time) and ``2j + 1``
(direction), so a single path from :func:`simulate_vsrw` is bit-identical
to the corresponding replica of :func:`simulate_batch`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cyclewalk import rng
from cyclewalk.corrector import CorrectorSolution, phi_hat
from cyclewalk.env_model import EnvironmentTorus, at_neighbor, directions
from cyclewalk.errors import InvalidEnvironment, InvalidInput, OutOfRange

MAX_JUMPS = 50_000_000


@dataclass
class Trajectory:
    times: np.ndarray  # jump epochs, strictly increasing, all > 0 and <= horizon
    positions: np.ndarray  # (n_jumps + 1, d) unwrapped, positions[0] = x0
    horizon: float
    seed: int
    replica: int = 0

    @property
    def n_jumps(self) -> int:
        return len(self.times)

    def position_at(self, t) -> np.ndarray:
        """Right-continuous X_t for scalar or array t."""
        t = np.asarray(t, dtype=float)
        if (t < 0).any() or (t > self.horizon).any():
            raise OutOfRange(f"time outside [0, {self.horizon}]")
        idx = np.searchsorted(self.times, t, side="right")
        return self.positions[idx]

    def holding_intervals(self):
        """(start, end, position) for each maximal constant stretch on [0, horizon]."""
        starts = np.concatenate([[0.0], self.times])
        ends = np.concatenate([self.times, [self.horizon]])
        return starts, ends, self.positions


class _Tables:
    """Flat per-site lookup tables shared by the single and batch samplers."""

    def __init__(self, env: EnvironmentTorus):
        if not env.assembled:
            raise InvalidEnvironment("environment not assembled")
        rate = env.c.sum(axis=0).ravel()
        if (rate <= 0).any():
            bad = np.unravel_index(int(np.argmin(rate)), env.shape)
            raise InvalidEnvironment(f"zero total jump rate at site {tuple(int(v) for v in bad)}")
        self.env = env
        self.L = env.L
        self.d = env.d
        self.rate = rate
        c = env.c.reshape(2 * env.d, -1).T  # (N, 2d)
        cum = np.cumsum(c, axis=1) / rate[:, None]
        cum[:, -1] = 1.0
        self.cum = cum
        self.dirs = directions(env.d)
        idx = np.arange(env.volume).reshape(env.shape)
        self.neighbor = np.stack([at_neighbor(idx, z).ravel() for z in self.dirs])  # (2d, N)
        self.strides = np.array([env.L ** (env.d - 1 - i) for i in range(env.d)], dtype=np.int64)

    def site_of(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.int64) % self.L) @ self.strides

    def pick_direction(self, site, u) -> np.ndarray:
        k = (u[..., None] > self.cum[site]).sum(axis=-1)
        return np.minimum(k, 2 * self.d - 1)


def simulate_vsrw(env: EnvironmentTorus, x0, T: float, seed: int, replica: int = 0,
                  max_jumps: int = MAX_JUMPS) -> Trajectory:
    if not T > 0:
        raise InvalidInput("horizon T must be positive")
    tab = _Tables(env)
    key = rng.derive_key(seed, replica)
    pos = np.array(x0, dtype=np.int64).reshape(env.d)
    site = int(tab.site_of(pos))
    t = 0.0
    times, positions = [], [pos.copy()]
    j = 0
    block = 4096
    while True:
        if j % block == 0:
            u = rng.uniforms(key, np.arange(2 * j, 2 * (j + block), dtype=np.uint64))
        off = 2 * (j % block)
        hold = -np.log(u[off]) / tab.rate[site]
        if t + hold > T:
            break
        t += hold
        k = int(tab.pick_direction(site, u[off + 1]))
        pos = pos + tab.dirs[k]
        site = int(tab.neighbor[k, site])
        times.append(t)
        positions.append(pos.copy())
        j += 1
        if j >= max_jumps:
            raise InvalidEnvironment(f"jump-count guard hit ({max_jumps}) before horizon")
    return Trajectory(np.asarray(times, dtype=float), np.asarray(positions, dtype=np.int64).reshape(-1, env.d),
                      float(T), int(seed), int(replica))


def rescale_trajectory(traj: Trajectory, n: int):
    """Evaluator t -> X_{n^2 t} / n (right-continuous steps)."""
    n = int(n)
    if n < 1:
        raise InvalidInput("n must be >= 1")
    t_max = traj.horizon / n**2

    def path(t):
        t = np.asarray(t, dtype=float)
        if (t > t_max).any() or (t < 0).any():
            raise OutOfRange(f"rescaled time outside [0, {t_max}]")
        return traj.position_at(n * n * t) / n

    path.t_max = t_max
    return path


def martingale_path(traj: Trajectory, sol: CorrectorSolution) -> np.ndarray:
    """M = Phi(X) at time 0 and after every jump, shape (n_jumps + 1, d)."""
    return sol.Phi_at(traj.positions)


def compensator_integrand(env: EnvironmentTorus, sol: CorrectorSolution, v, n: int = 1,
                          eps: float | None = None) -> np.ndarray:
    """g(x) = sum_z c(x,x+z) (v.hatPhi(x,z)/n)^2 [1{|v.hatPhi/n| > eps}]."""
    ph = phi_hat(env, sol)
    proj = np.tensordot(np.asarray(v, dtype=float), ph, axes=(0, 0)) / n  # (2d,) + shape
    sq = proj * proj
    if eps is not None:
        sq = np.where(np.abs(proj) > eps, sq, 0.0)
    return (env.c * sq).sum(axis=0)


def compensator_path(env: EnvironmentTorus, traj: Trajectory, sol: CorrectorSolution, v, n: int = 1,
                     eps: float | None = None):
    """t -> <v.M^(n)>_t, exact piecewise-linear integral over holding intervals."""
    n = int(n)
    g = compensator_integrand(env, sol, v, n, eps).ravel()
    tab = _Tables(env)
    rates = g[tab.site_of(traj.positions)]
    starts, ends, _ = traj.holding_intervals()
    cum = np.concatenate([[0.0], np.cumsum(rates * (ends - starts))])
    t_max = traj.horizon / n**2

    def comp(t):
        t = np.asarray(t, dtype=float)
        if (t > t_max).any() or (t < 0).any():
            raise OutOfRange(f"rescaled time outside [0, {t_max}]")
        s = n * n * t
        i = np.searchsorted(traj.times, s, side="right")
        return cum[i] + rates[i] * (s - starts[i])

    comp.t_max = t_max
    return comp


def environment_occupation(env: EnvironmentTorus, traj: Trajectory, f) -> float:
    """(1/T) int_0^T f(X_s mod L) ds, exact over holding intervals."""
    f = np.asarray(f, dtype=float)
    if f.ndim == 0:
        f = np.full(env.shape, float(f))
    tab = _Tables(env)
    starts, ends, pos = traj.holding_intervals()
    vals = f.ravel()[tab.site_of(pos)]
    return float((vals * (ends - starts)).sum() / traj.horizon)


# ---------------------------------------------------------------------------
# vectorized replicas


@dataclass
class BatchResult:
    endpoints: np.ndarray  # (R, d) unwrapped X_horizon
    integrals: np.ndarray  # (R, n_functionals) int_0^horizon g(X_s) ds
    jumps: np.ndarray  # (R,)
    site_sup: np.ndarray  # (R,) sup_t h(X_t) for the tracked site field h (0 if none)
    horizon: float


def simulate_batch(env: EnvironmentTorus, replicas: int, horizon: float, seed: int, x0=None,
                   functionals=(), sup_field=None, first_replica: int = 0,
                   max_jumps: int = MAX_JUMPS) -> BatchResult:
    """Run replicas ``first_replica .. first_replica + replicas - 1`` side by side.

    ``functionals`` are site fields g integrated along each path; ``sup_field``
    is a site field whose running maximum along the path is recorded.
    """
    if not horizon > 0:
        raise InvalidInput("horizon must be positive")
    tab = _Tables(env)
    d = env.d
    R = int(replicas)
    x0 = np.zeros(d, dtype=np.int64) if x0 is None else np.asarray(x0, dtype=np.int64)
    G = np.stack([np.asarray(g, dtype=float).ravel() for g in functionals]) if len(functionals) else np.zeros((0, env.volume))
    H = None if sup_field is None else np.asarray(sup_field, dtype=float).ravel()

    keys = rng.derive_key(seed, np.arange(first_replica, first_replica + R, dtype=np.int64))
    keys = np.atleast_1d(keys)
    pos = np.tile(x0, (R, 1))
    site = np.full(R, int(tab.site_of(x0)), dtype=np.int64)
    t = np.zeros(R)
    jumps = np.zeros(R, dtype=np.int64)
    integrals = np.zeros((R, G.shape[0]))
    sup = np.zeros(R) if H is None else H[site].copy()

    active = np.arange(R)
    while active.size:
        s = site[active]
        j = jumps[active].astype(np.uint64)
        u_hold = rng.uniforms(keys[active], np.uint64(2) * j)
        hold = -np.log(u_hold) / tab.rate[s]
        t_new = t[active] + hold
        done = t_new > horizon
        dt = np.where(done, horizon - t[active], hold)
        if G.shape[0]:
            integrals[active] += (G[:, s] * dt).T
        go = active[~done]
        if go.size:
            s_go = s[~done]
            u_dir = rng.uniforms(keys[go], np.uint64(2) * jumps[go].astype(np.uint64) + np.uint64(1))
            k = tab.pick_direction(s_go, u_dir)
            pos[go] += tab.dirs[k]
            site[go] = tab.neighbor[k, s_go]
            t[go] = t_new[~done]
            jumps[go] += 1
            if H is not None:
                sup[go] = np.maximum(sup[go], H[site[go]])
            if jumps[go].max() >= max_jumps:
                raise InvalidEnvironment(f"jump-count guard hit ({max_jumps}) before horizon")
        active = go
    return BatchResult(pos, integrals, jumps, sup, float(horizon))
