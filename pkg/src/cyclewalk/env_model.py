"""Cycle catalogs, weight laws and periodized random environments.

Sites of the torus (Z/LZ)^d are stored as numpy arrays of shape ``(L,)*d``
in row-major order.  Directed nearest-neighbor edges out of a site are
indexed by ``k`` with ``k = 2*i`` for ``+e_i`` and ``k = 2*i + 1`` for
``-e_i``; an edge table is an array of shape ``(2*d,) + (L,)*d`` holding
``c(x, x + z_k)`` at ``[k][x]``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from cyclewalk import rng
from cyclewalk.errors import InvalidGeometry, InvalidInput, InvalidLaw, InvalidShape

LAW_KINDS = ("constant", "uniform", "pareto", "lognormal")


def directions(d: int) -> np.ndarray:
    """Unit vectors ordered +e_1, -e_1, +e_2, -e_2, ...  Shape (2d, d)."""
    out = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        out[2 * i, i] = 1
        out[2 * i + 1, i] = -1
    return out


def opposite(k: int) -> int:
    return k ^ 1


def direction_index(step) -> int:
    step = np.asarray(step)
    nz = np.flatnonzero(step)
    i = int(nz[0])
    return 2 * i + (0 if step[i] > 0 else 1)


def torus_shift(field_, offset) -> np.ndarray:
    """Return g with g(x) = field_(x - offset) on the torus."""
    d = len(offset)
    return np.roll(field_, shift=tuple(int(o) for o in offset), axis=tuple(range(field_.ndim - d, field_.ndim)))


def at_neighbor(field_, z) -> np.ndarray:
    """Return g with g(x) = field_(x + z)."""
    return torus_shift(field_, [-int(v) for v in z])


# ---------------------------------------------------------------------------
# shapes, laws, catalogs


@dataclass(frozen=True)
class CycleShape:
    """Oriented nearest-neighbor cycle based at the origin, given by its steps."""

    steps: tuple

    def __post_init__(self):
        steps = tuple(tuple(int(v) for v in s) for s in self.steps)
        if not steps:
            raise InvalidShape("shape has no steps")
        d = len(steps[0])
        for s in steps:
            if len(s) != d or sum(v * v for v in s) != 1:
                raise InvalidShape(f"step {s} is not a unit lattice vector")
        object.__setattr__(self, "steps", steps)

    @classmethod
    def from_axes(cls, axes: Sequence[int], d: int) -> "CycleShape":
        """Build from signed 1-based axis labels, e.g. ``[1, 2, -1, -2]``."""
        steps = []
        for a in axes:
            a = int(a)
            if a == 0 or abs(a) > d:
                raise InvalidShape(f"axis label {a} out of range for d={d}")
            v = [0] * d
            v[abs(a) - 1] = 1 if a > 0 else -1
            steps.append(v)
        return cls(tuple(map(tuple, steps)))

    @property
    def d(self) -> int:
        return len(self.steps[0])

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def vertices(self) -> np.ndarray:
        """v_0 = 0, ..., v_n; shape (n + 1, d)."""
        v = np.zeros((self.length + 1, self.d), dtype=np.int64)
        v[1:] = np.cumsum(np.asarray(self.steps, dtype=np.int64), axis=0)
        return v

    @property
    def distinct_vertices(self) -> np.ndarray:
        return np.unique(self.vertices[:-1], axis=0)

    @property
    def diameter(self) -> int:
        return int(np.abs(self.vertices).max())

    @property
    def is_closed(self) -> bool:
        return not self.vertices[-1].any()

    @property
    def has_distinct_vertices(self) -> bool:
        inner = self.vertices[1:-1]
        pts = {tuple(p) for p in inner}
        return len(pts) == len(inner) and (0,) * self.d not in pts

    def edges(self):
        """Yield (tail vertex, direction index) for each step."""
        verts = self.vertices
        for j, s in enumerate(self.steps):
            yield verts[j], direction_index(s)

    def reversed(self) -> "CycleShape":
        return CycleShape(tuple(tuple(-v for v in s) for s in reversed(self.steps)))

    def rebased(self, j: int) -> "CycleShape":
        """Same cycle, based at its j-th vertex."""
        return CycleShape(self.steps[j:] + self.steps[:j])


@dataclass(frozen=True)
class WeightLaw:
    """Law of one cycle weight; sampled by inverse CDF from a single uniform."""

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in LAW_KINDS:
            raise InvalidLaw(f"unknown law kind {self.kind!r}")
        p = tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", p)
        expected = {"constant": 1, "uniform": 2, "pareto": 2, "lognormal": 2}[self.kind]
        if len(p) != expected:
            raise InvalidLaw(f"{self.kind} law takes {expected} parameters, got {len(p)}")
        if not all(np.isfinite(p)):
            raise InvalidLaw("law parameters must be finite")
        if self.kind == "constant" and p[0] < 0:
            raise InvalidLaw("constant law with negative value")
        if self.kind == "uniform" and not 0 <= p[0] <= p[1]:
            raise InvalidLaw("uniform law needs 0 <= low <= high")
        if self.kind == "pareto" and not (p[0] > 0 and p[1] > 0):
            raise InvalidLaw("pareto law needs scale > 0 and tail index > 0")
        if self.kind == "lognormal" and p[1] < 0:
            raise InvalidLaw("lognormal law needs scale >= 0")

    @classmethod
    def constant(cls, value):
        return cls("constant", (value,))

    @classmethod
    def uniform(cls, low, high):
        return cls("uniform", (low, high))

    @classmethod
    def pareto(cls, scale, tail):
        return cls("pareto", (scale, tail))

    @classmethod
    def lognormal(cls, location, scale):
        return cls("lognormal", (location, scale))

    @property
    def strictly_positive(self) -> bool:
        if self.kind == "constant":
            return self.params[0] > 0
        if self.kind == "uniform":
            return self.params[0] > 0
        return True

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "constant":
            return np.full(np.shape(u), p[0])
        if self.kind == "uniform":
            return p[0] + (p[1] - p[0]) * u
        if self.kind == "pareto":
            return p[0] * u ** (-1.0 / p[1])
        return np.exp(p[0] + p[1] * ndtri(u))

    def to_dict(self) -> dict:
        names = {
            "constant": ("value",),
            "uniform": ("low", "high"),
            "pareto": ("scale", "tail"),
            "lognormal": ("location", "scale"),
        }[self.kind]
        return {"kind": self.kind, **dict(zip(names, self.params))}


@dataclass(frozen=True)
class CycleCatalog:
    shapes: tuple
    laws: tuple

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "laws", tuple(self.laws))
        if not self.shapes:
            raise InvalidInput("empty catalog")
        if len(self.shapes) != len(self.laws):
            raise InvalidInput("catalog needs exactly one law per shape")
        if len({s.d for s in self.shapes}) != 1:
            raise InvalidShape("shapes of mixed dimension")

    @property
    def d(self) -> int:
        return self.shapes[0].d

    @property
    def max_diameter(self) -> int:
        return max(s.diameter for s in self.shapes)

    def __len__(self):
        return len(self.shapes)


def nn_two_cycles(d: int, law: WeightLaw) -> CycleCatalog:
    """All 2d back-and-forth cycles (0, +-e_i, 0)."""
    shapes = [CycleShape((tuple(z), tuple(-z))) for z in directions(d)]
    return CycleCatalog(shapes, [law] * len(shapes))


def plaquette_rotations(d: int, law: WeightLaw) -> CycleCatalog:
    """Unit squares in every coordinate plane, both orientations, all four base points."""
    if d < 2:
        raise InvalidInput("plaquettes need d >= 2")
    shapes = []
    for i, j in itertools.combinations(range(1, d + 1), 2):
        ccw = CycleShape.from_axes([i, j, -i, -j], d)
        for base_shape in (ccw, ccw.reversed()):
            shapes.extend(base_shape.rebased(r) for r in range(4))
    return CycleCatalog(shapes, [law] * len(shapes))


def plaquette_plus_nn(d: int, plaquette_law: WeightLaw, nn_law: WeightLaw) -> CycleCatalog:
    a = plaquette_rotations(d, plaquette_law)
    b = nn_two_cycles(d, nn_law)
    return CycleCatalog(a.shapes + b.shapes, a.laws + b.laws)


PRESETS = {
    "nn-2-cycles": nn_two_cycles,
    "plaquette-rotations": plaquette_rotations,
}


# ---------------------------------------------------------------------------
# reports


@dataclass
class Check:
    name: str
    passed: bool
    value: float = 0.0
    witness: object = None


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    def add(self, name, passed, value=0.0, witness=None):
        self.checks.append(Check(name, bool(passed), float(value), witness))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def rows(self):
        for c in self.checks:
            yield {"check": c.name, "pass": c.passed, "value": c.value,
                   "witness": "" if c.witness is None else str(c.witness)}


def validate_catalog(catalog: CycleCatalog) -> ValidationReport:
    d = catalog.d
    report = ValidationReport()
    for idx, shape in enumerate(catalog.shapes):
        report.add(f"shape[{idx}].closed", shape.is_closed, np.abs(shape.vertices[-1]).sum())
        report.add(f"shape[{idx}].distinct", shape.has_distinct_vertices)
        report.add(f"shape[{idx}].length", shape.length >= 2, shape.length)

    covered = set()
    for shape in catalog.shapes:
        verts = shape.vertices
        for j in range(shape.length):
            a, b = verts[j], verts[j + 1]
            if not a.any():
                covered.add(tuple(int(v) for v in b))
            if not b.any():
                covered.add(tuple(int(v) for v in a))
    neighbors = {tuple(z) for z in directions(d)}
    report.add("covering", covered == neighbors, len(covered), sorted(tuple(int(v) for v in x) for x in covered))

    # a direction z is elliptic if some translate of a strictly positive
    # shape traverses an edge parallel to z in either orientation
    elliptic = np.zeros(d, dtype=bool)
    for shape, law in zip(catalog.shapes, catalog.laws):
        if not law.strictly_positive:
            continue
        for _, k in shape.edges():
            elliptic[k // 2] = True
    for i in range(d):
        report.add(f"assembled_ellipticity[e{i + 1}]", elliptic[i])
    report.add("diameter", True, catalog.max_diameter)
    return report


# ---------------------------------------------------------------------------
# environments


@dataclass
class EnvironmentTorus:
    """Sampled cycle weights on (Z/LZ)^d plus everything assembled from them.

    Treated as immutable after :func:`assemble_edge_weights`.
    """

    d: int
    L: int
    catalog: CycleCatalog
    weights: np.ndarray  # (n_shapes,) + (L,)*d
    seed: int = 0
    c: np.ndarray = None
    cs: np.ndarray = None
    ca: np.ndarray = None
    mu: np.ndarray = None
    nu: np.ndarray = None
    mu_k: np.ndarray = None  # (4,) + (L,)*d, k = 0..3
    V: np.ndarray = None  # (d,) + (L,)*d

    @property
    def shape(self) -> tuple:
        return (self.L,) * self.d

    @property
    def volume(self) -> int:
        return self.L**self.d

    @property
    def assembled(self) -> bool:
        return self.c is not None

    @property
    def dirs(self) -> np.ndarray:
        return directions(self.d)

    def site_coords(self) -> np.ndarray:
        """Coordinates of every site in [0, L), shape (d,) + (L,)*d."""
        return np.indices(self.shape)

    def out_rate(self) -> np.ndarray:
        return self.c.sum(axis=0)

    def in_rate(self) -> np.ndarray:
        dirs = self.dirs
        total = np.zeros(self.shape)
        for k in range(2 * self.d):
            total += at_neighbor(self.c[opposite(k)], dirs[k])
        return total


def check_geometry(catalog: CycleCatalog, L: int):
    need = 2 * catalog.max_diameter + 1
    if L < need:
        raise InvalidGeometry(f"L={L} too small: need L >= 2*diameter + 1 = {need}")


def sample_weights(catalog: CycleCatalog, d: int, L: int, seed: int) -> np.ndarray:
    """i.i.d. weights per (shape, site); site s of shape j uses uniform #s of key (seed, j)."""
    n_sites = L**d
    counters = np.arange(n_sites, dtype=np.uint64)
    out = np.empty((len(catalog),) + (L,) * d)
    for j, law in enumerate(catalog.laws):
        u = rng.uniforms(rng.derive_key(seed, 0x5EED, j), counters)
        out[j] = law.from_uniform(u).reshape((L,) * d)
    return out


def sample_environment(catalog: CycleCatalog, d: int, L: int, seed: int) -> EnvironmentTorus:
    if catalog.d != d:
        raise InvalidInput(f"catalog dimension {catalog.d} != d={d}")
    report = validate_catalog(catalog)
    structural = [c for c in report.failures() if not c.name.startswith("assembled_ellipticity")]
    if structural:
        raise InvalidInput("catalog fails validation: " + ", ".join(c.name for c in structural))
    check_geometry(catalog, L)
    weights = sample_weights(catalog, d, L, seed)
    return assemble_edge_weights(EnvironmentTorus(d, L, catalog, weights, seed))


def environment_from_weights(catalog: CycleCatalog, L: int, weights, seed: int = 0) -> EnvironmentTorus:
    """Build an environment from explicit weights (no sampling)."""
    d = catalog.d
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(catalog),) + (L,) * d:
        raise InvalidInput(f"weights must have shape {(len(catalog),) + (L,) * d}")
    if (weights < 0).any() or not np.isfinite(weights).all():
        raise InvalidLaw("cycle weights must be finite and nonnegative")
    check_geometry(catalog, L)
    return assemble_edge_weights(EnvironmentTorus(d, L, catalog, weights.copy(), seed))


def assemble_edge_weights(env: EnvironmentTorus) -> EnvironmentTorus:
    d, shape = env.d, env.shape
    dirs = directions(d)
    c = np.zeros((2 * d,) + shape)
    mu_k = np.zeros((4,) + shape)
    for w, cyc in zip(env.weights, env.catalog.shapes):
        for tail, k in cyc.edges():
            c[k] += torus_shift(w, tail)
        n = cyc.length
        for v in cyc.distinct_vertices:
            hit = torus_shift(w, v)
            for k in range(4):
                mu_k[k] += float(n) ** k * hit

    cs = np.empty_like(c)
    ca = np.empty_like(c)
    for k in range(2 * d):
        back = at_neighbor(c[opposite(k)], dirs[k])
        cs[k] = 0.5 * (c[k] + back)
        ca[k] = 0.5 * (c[k] - back)
    mu = cs.sum(axis=0)
    with np.errstate(divide="ignore"):
        nu = (1.0 / cs).sum(axis=0)
    V = np.stack([c[2 * i] - c[2 * i + 1] for i in range(d)])
    return EnvironmentTorus(env.d, env.L, env.catalog, env.weights, env.seed, c, cs, ca, mu, nu, mu_k, V)


def local_drift(env: EnvironmentTorus) -> np.ndarray:
    """V^i(x) = sum_z c(x, x+z) z^i, shape (d,) + (L,)*d."""
    return env.V


def shift_environment(env: EnvironmentTorus, z) -> EnvironmentTorus:
    """Environment seen from z: every field f becomes x -> f(x + z)."""
    z = [int(v) for v in z]

    def sh(a):
        return None if a is None else at_neighbor(a, z)

    return EnvironmentTorus(env.d, env.L, env.catalog, sh(env.weights), env.seed,
                            sh(env.c), sh(env.cs), sh(env.ca), sh(env.mu), sh(env.nu), sh(env.mu_k), sh(env.V))


def _worst(arr) -> tuple:
    return tuple(int(i) for i in np.unravel_index(int(np.argmax(arr)), arr.shape))


def check_env_invariants(env: EnvironmentTorus) -> ValidationReport:
    report = ValidationReport()
    d = env.d
    report.add("geometry", env.L >= 2 * env.catalog.max_diameter + 1, env.L)
    report.add("nonnegative", env.c.min() >= 0, env.c.min(), _worst(-env.c))

    out_r, in_r = env.out_rate(), env.in_rate()
    scale = np.maximum(np.maximum(out_r, in_r), np.finfo(float).tiny)
    rel = np.abs(out_r - in_r) / scale
    report.add("doubly_stochastic", rel.max() <= 1e-12, rel.max(), _worst(rel))

    excess = np.abs(env.ca) - env.cs
    report.add("antisymmetric_bound", excess.max() <= 0, max(excess.max(), 0.0), _worst(excess))

    report.add("ellipticity", env.cs.min() > 0, env.cs.min(), _worst(-env.cs))

    mu_err = np.abs(env.mu - env.cs.sum(axis=0)).max()
    report.add("mu_definition", mu_err == 0, mu_err)
    # mu(x) also equals the total exit rate once in- and out-rates balance
    report.add("mu_equals_exit_rate", np.allclose(env.mu, out_r, rtol=1e-12, atol=0), np.abs(env.mu - out_r).max())

    m1, m2, m3 = env.mu_k[1], env.mu_k[2], env.mu_k[3]
    mono = max((m1 - m2).max(), (m2 - m3).max())
    report.add("mu_k_monotone", mono <= 0, max(mono, 0.0))

    # every site is a vertex of some translate of each shape
    if any(law.strictly_positive for law in env.catalog.laws):
        report.add("mu0_positive", env.mu_k[0].min() > 0, env.mu_k[0].min(), _worst(-env.mu_k[0]))

    drift_sum = np.abs(env.V.reshape(d, -1).sum(axis=1)).max()
    report.add("drift_sums_to_zero", drift_sum <= 1e-12 * env.mu.sum(), drift_sum)

    max_ca = float(np.abs(env.ca).max())
    symmetric = max_ca == 0.0
    long_w = [w for cyc, w in zip(env.catalog.shapes, env.weights) if cyc.length > 2 and (w > 0).any()]
    # short cycles alone always give c_a = 0; long ones give c_a != 0 unless their
    # weights are (numerically) translation invariant, e.g. a constant law
    varied = any(np.ptp(w) > 1e-8 * float(env.cs.max()) for w in long_w)
    ok = symmetric if not long_w else (not symmetric if varied else True)
    report.add("symmetric", True, float(symmetric))
    report.add("symmetry_dichotomy", ok, max_ca)
    return report
