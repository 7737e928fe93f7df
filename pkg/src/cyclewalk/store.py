"""Config parsing, binary snapshots and report emission.

Snapshot layout: one line of UTF-8 JSON (the header, terminated by a
newline) followed by raw little-endian float64 sections in the order and
shapes listed under ``header["sections"]``, each in C order.

All writes go to a temporary file in the target directory and are moved
into place with :func:`os.replace`, so readers never see partial files.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from cyclewalk.env_model import (CycleCatalog, CycleShape, EnvironmentTorus, WeightLaw, environment_from_weights,
                                 nn_two_cycles, plaquette_plus_nn, plaquette_rotations)
from cyclewalk.errors import CycleWalkError, InvalidConfig, InvalidInput, SnapshotVersionError

ENV_FORMAT = "cyclewalk-env"
CORRECTOR_FORMAT = "cyclewalk-corrector"
SNAPSHOT_VERSION = 1

LAW_FIELDS = {
    "constant": ("value",),
    "uniform": ("low", "high"),
    "pareto": ("scale", "tail"),
    "lognormal": ("location", "scale"),
}


# ---------------------------------------------------------------------------
# atomic output


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _plain(x):
    """JSON-safe copy: arrays to lists, non-finite floats to strings."""
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.generic):
        return _plain(x.item())
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def dumps_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    atomic_write_bytes(path, dumps_json(obj).encode())


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    if isinstance(v, np.integer):
        return str(int(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_cell(x) for x in np.ravel(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)  # RFC 4180: CRLF line ends, minimal quoting
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows):
    atomic_write_bytes(path, csv_text(header, rows).encode())


def emit_reports(out_dir, reports: dict):
    """Write ``{filename: payload}``; payload is a dict (JSON) or a (header, rows) pair (CSV)."""
    written = []
    for name in sorted(reports):
        payload = reports[name]
        path = os.path.join(out_dir, name)
        if name.endswith(".csv"):
            write_csv(path, *payload)
        else:
            write_json(path, payload)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# config


def parse_moment(value, name):
    """p or q: a number > 1 or the string "inf"."""
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity"):
            return math.inf
        try:
            value = float(value)
        except ValueError:
            raise InvalidConfig(f"field {name!r}: expected a number or \"inf\", got {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvalidConfig(f"field {name!r}: expected a number or \"inf\"")
    if not value > 1:
        raise InvalidConfig(f"field {name!r}: must lie in (1, inf]")
    return float(value)


def law_from_dict(obj, where="law") -> WeightLaw:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise InvalidConfig(f"field {where!r}: expected an object with a 'kind' key")
    kind = obj["kind"]
    if kind not in LAW_FIELDS:
        raise InvalidConfig(f"field '{where}.kind': unknown law {kind!r}")
    params = []
    for name in LAW_FIELDS[kind]:
        if name not in obj:
            raise InvalidConfig(f"field '{where}.{name}' is missing")
        v = obj[name]
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise InvalidConfig(f"field '{where}.{name}': expected a number")
        params.append(float(v))
    try:
        return WeightLaw(kind, tuple(params))
    except CycleWalkError as e:
        raise InvalidConfig(f"field {where!r}: {e}") from None


def catalog_from_dict(obj, d: int, where="catalog") -> CycleCatalog:
    if not isinstance(obj, dict):
        raise InvalidConfig(f"field {where!r}: expected an object")
    try:
        if "preset" in obj:
            preset = obj["preset"]
            if preset == "nn-2-cycles":
                return nn_two_cycles(d, law_from_dict(obj.get("law"), f"{where}.law"))
            if preset == "plaquette-rotations":
                return plaquette_rotations(d, law_from_dict(obj.get("law"), f"{where}.law"))
            if preset == "plaquette-plus-nn":
                return plaquette_plus_nn(d, law_from_dict(obj.get("law"), f"{where}.law"),
                                         law_from_dict(obj.get("nn_law"), f"{where}.nn_law"))
            raise InvalidConfig(f"field '{where}.preset': unknown preset {preset!r}")
        if "shapes" in obj:
            shapes, laws = [], []
            for k, item in enumerate(obj["shapes"]):
                if not isinstance(item, dict) or "steps" not in item:
                    raise InvalidConfig(f"field '{where}.shapes[{k}]': expected an object with 'steps'")
                try:
                    shapes.append(CycleShape(tuple(tuple(s) for s in item["steps"])))
                except (TypeError, ValueError) as e:
                    raise InvalidConfig(f"field '{where}.shapes[{k}].steps': {e}") from None
                laws.append(law_from_dict(item.get("law"), f"{where}.shapes[{k}].law"))
            cat = CycleCatalog(shapes, laws)
            if cat.d != d:
                raise InvalidConfig(f"field '{where}.shapes': dimension {cat.d} != d={d}")
            return cat
    except InvalidConfig:
        raise
    except CycleWalkError as e:
        raise InvalidConfig(f"field {where!r}: {e}") from None
    raise InvalidConfig(f"field {where!r}: needs 'preset' or 'shapes'")


def catalog_to_dict(cat: CycleCatalog) -> dict:
    return {"shapes": [{"steps": [list(s) for s in shape.steps], "law": law.to_dict()}
                       for shape, law in zip(cat.shapes, cat.laws)]}


def parse_schedule(value, where="lambda_schedule") -> tuple:
    """Either a list of positive numbers or the string "start:stop:count" (geometric)."""
    if isinstance(value, str):
        parts = value.split(":")
        try:
            if len(parts) == 3:
                a, b, n = float(parts[0]), float(parts[1]), int(parts[2])
                if a <= 0 or b <= 0 or n < 1:
                    raise ValueError
                return tuple(float(x) for x in np.geomspace(a, b, n))
            return tuple(float(x) for x in value.split(","))
        except ValueError:
            raise InvalidConfig(f"field {where!r}: expected 'start:stop:count' with positive bounds, got {value!r}") from None
    if isinstance(value, (list, tuple)) and value and all(isinstance(v, (int, float)) for v in value):
        return tuple(float(v) for v in value)
    raise InvalidConfig(f"field {where!r}: expected a list of numbers or 'start:stop:count'")


@dataclass
class RunConfig:
    d: int
    L: int
    catalog: CycleCatalog
    seed: int = 0
    lambda_schedule: tuple = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5)
    n_grid: tuple = (4, 8, 16)
    replicas: int = 10_000
    T: float = 1.0
    p: float = 4.0
    q: float = 4.0
    tolerance: float = 1e-10
    frob_tolerance: float = 0.05
    significance: float = 0.01
    vanishing_eps: float = 0.1
    trials: int = 100
    box_n: int = 8
    periodization_check: bool = True
    raw: dict = field(default_factory=dict)


_INT_FIELDS = ("d", "L", "seed", "replicas", "trials", "box_n")
_FLOAT_FIELDS = ("T", "tolerance", "frob_tolerance", "significance", "vanishing_eps")


def config_from_dict(obj) -> RunConfig:
    if not isinstance(obj, dict):
        raise InvalidConfig("config must be a JSON object")
    for key in ("d", "L", "catalog"):
        if key not in obj:
            raise InvalidConfig(f"field {key!r} is missing")
    kw = {}
    for key in _INT_FIELDS:
        if key in obj:
            v = obj[key]
            if isinstance(v, bool) or not isinstance(v, int):
                raise InvalidConfig(f"field {key!r}: expected an integer")
            kw[key] = v
    for key in _FLOAT_FIELDS:
        if key in obj:
            v = obj[key]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise InvalidConfig(f"field {key!r}: expected a number")
            kw[key] = float(v)
    if kw["d"] < 1 or kw["L"] < 2:
        raise InvalidConfig("fields 'd' and 'L' must be >= 1 and >= 2")
    for key in ("p", "q"):
        if key in obj:
            kw[key] = parse_moment(obj[key], key)
    if "lambda_schedule" in obj:
        kw["lambda_schedule"] = parse_schedule(obj["lambda_schedule"])
    if "n_grid" in obj:
        g = obj["n_grid"]
        if not isinstance(g, list) or not g or not all(isinstance(v, int) and v > 0 for v in g):
            raise InvalidConfig("field 'n_grid': expected a list of positive integers")
        kw["n_grid"] = tuple(g)
    if "periodization_check" in obj:
        kw["periodization_check"] = bool(obj["periodization_check"])
    kw["catalog"] = catalog_from_dict(obj["catalog"], kw["d"])
    unknown = set(obj) - set(kw) - {"catalog", "comment"}
    if unknown:
        raise InvalidConfig(f"unknown config field(s): {sorted(unknown)}")
    return RunConfig(raw=obj, **kw)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise InvalidConfig(f"cannot read config {path}: {e.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"malformed JSON in {path} at line {e.lineno} column {e.colno}: {e.msg}") from None
    return config_from_dict(obj)


# ---------------------------------------------------------------------------
# snapshots


def _pack(header: dict, sections: list) -> bytes:
    header = dict(header)
    header["sections"] = [{"name": name, "dtype": "<f8", "shape": list(arr.shape)} for name, arr in sections]
    head = json.dumps(header, sort_keys=True).encode() + b"\n"
    return head + b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C") for _, arr in sections)


def _unpack(path, expected_format: str):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise InvalidInput(f"cannot read snapshot {path}: {e.strerror}") from None
    cut = blob.find(b"\n")
    if cut < 0:
        raise InvalidInput(f"{path}: missing snapshot header")
    try:
        header = json.loads(blob[:cut].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise InvalidInput(f"{path}: snapshot header is not valid JSON") from None
    if header.get("format") != expected_format:
        raise InvalidInput(f"{path}: expected format {expected_format!r}, found {header.get('format')!r}")
    if header.get("version") != SNAPSHOT_VERSION:
        raise SnapshotVersionError(
            f"{path}: snapshot version {header.get('version')!r} is not supported (expected {SNAPSHOT_VERSION})")
    sections = {}
    offset = cut + 1
    for sec in header.get("sections", []):
        shape = tuple(sec["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise InvalidInput(f"{path}: section {sec['name']!r} is truncated")
        sections[sec["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise InvalidInput(f"{path}: {len(blob) - offset} trailing bytes after the last section")
    return header, sections


def env_snapshot_bytes(env: EnvironmentTorus) -> bytes:
    header = {"format": ENV_FORMAT, "version": SNAPSHOT_VERSION, "d": env.d, "L": env.L, "seed": int(env.seed),
              "catalog": catalog_to_dict(env.catalog)}
    return _pack(header, [("weights", env.weights)])


def save_env(env: EnvironmentTorus, path):
    atomic_write_bytes(path, env_snapshot_bytes(env))


def load_env(path) -> EnvironmentTorus:
    header, sections = _unpack(path, ENV_FORMAT)
    try:
        cat = catalog_from_dict(header["catalog"], int(header["d"]))
        return environment_from_weights(cat, int(header["L"]), sections["weights"], seed=int(header["seed"]))
    except KeyError as e:
        raise InvalidInput(f"{path}: snapshot header lacks {e}") from None


def save_corrector(sol, path, env: EnvironmentTorus | None = None):
    header = {"format": CORRECTOR_FORMAT, "version": SNAPSHOT_VERSION, "d": sol.d, "L": sol.L,
              "lambda": sol.lam, "iterations": list(sol.iterations)}
    if sol.sigma2 is not None:
        header["sigma2"] = np.asarray(sol.sigma2).tolist()
    if env is not None:
        header["env_seed"] = int(env.seed)
    atomic_write_bytes(path, _pack(header, [("phi", sol.phi), ("residual", sol.residual)]))


def load_corrector(path):
    """(header, phi, residual) from a corrector snapshot."""
    header, sections = _unpack(path, CORRECTOR_FORMAT)
    return header, sections["phi"], sections["residual"]
