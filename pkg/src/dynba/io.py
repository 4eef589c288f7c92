"""Text and image formats: key = value configs, TUM trajectories, PGM/CSV
uncertainty exports, manifests, and the scene and result directories.

Config files hold one ``key = value`` per line. ``#`` starts a comment.
Nested dataclass fields use dotted keys (``noise.corr_sigma``) and list
entries use an index (``movers[0].size``). Values are Python literals;
a bare word is read as a string.
"""

from __future__ import annotations

import ast
import csv
import dataclasses
import hashlib
import io
import re
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .features import save_scalar_map
from .geometry import SE3Pose
from .metrics import Trajectory
from .scene_sim import MoverSpec, SceneConfig, validate_config

_KEY = re.compile(r"^[A-Za-z_]\w*(\[\d+\])?(\.[A-Za-z_]\w*(\[\d+\])?)*$")
_PART = re.compile(r"^([A-Za-z_]\w*)(?:\[(\d+)\])?$")
LIST_ITEM_TYPES = {"movers": MoverSpec}


# -- configs ---------------------------------------------------------------
def parse_config_text(text: str) -> list[tuple[str, object, int]]:
    """``(key, value, line_number)`` entries in file order."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected `key = value`", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not _KEY.match(key):
            raise ConfigError("malformed key", key=key, line=lineno)
        if not value:
            raise ConfigError("missing value", key=key, line=lineno)
        try:
            parsed = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            parsed = value
        out.append((key, parsed, lineno))
    return out


def _coerce(current, value, key, line):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key=key, line=line)
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key=key, line=line)
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key=key, line=line)
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key=key, line=line)
        return value
    if isinstance(current, (tuple, frozenset)):
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"expected a tuple, got {value!r}", key=key, line=line)
        if isinstance(current, frozenset):
            return frozenset(value)
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError("tuple entries must be numbers", key=key, line=line)
        return tuple(float(v) for v in value)
    raise ConfigError("field cannot be set from a config file", key=key, line=line)


def _apply(obj, parts, value, key, line):
    """Return a copy of dataclass ``obj`` with the field path ``parts`` set."""
    m = _PART.match(parts[0])
    name, index = m.group(1), m.group(2)
    names = {f.name for f in dataclasses.fields(obj)}
    if name not in names:
        raise ConfigError("unknown key", key=key, line=line)
    current = getattr(obj, name)
    if index is not None:
        if not isinstance(current, list) or name not in LIST_ITEM_TYPES:
            raise ConfigError("field is not a list", key=key, line=line)
        k = int(index)
        items = list(current)
        if k > len(items):
            raise ConfigError(f"list indices must be contiguous, {name}[{len(items)}] comes first",
                              key=key, line=line)
        if k == len(items):
            items.append(LIST_ITEM_TYPES[name]())
        if len(parts) == 1:
            raise ConfigError("list entries need a field name", key=key, line=line)
        items[k] = _apply(items[k], parts[1:], value, key, line)
        new = items
    elif len(parts) > 1:
        if not dataclasses.is_dataclass(current):
            raise ConfigError("unknown key", key=key, line=line)
        new = _apply(current, parts[1:], value, key, line)
    else:
        if dataclasses.is_dataclass(current) or isinstance(current, list):
            raise ConfigError("a section cannot take a value", key=key, line=line)
        new = _coerce(current, value, key, line)
    try:
        return dataclasses.replace(obj, **{name: new})
    except ValueError as exc:
        raise ConfigError(str(exc), key=key, line=line) from None


def apply_config(base, entries):
    """Apply parsed entries to a copy of the dataclass ``base``."""
    obj = base
    seen = {}
    for key, value, line in entries:
        if key in seen:
            raise ConfigError(f"duplicate key, first set on line {seen[key]}", key=key, line=line)
        seen[key] = line
        obj = _apply(obj, key.split("."), value, key, line)
    return obj


def _line_of(entries, key):
    for k, _, line in entries:
        if k == key:
            return line
    return None


def scene_config_from_text(text: str, seed: int | None = None) -> SceneConfig:
    """Scene config from text; starts from ``SceneConfig()`` (no movers) and validates."""
    entries = parse_config_text(text)
    cfg = apply_config(SceneConfig(), entries)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    try:
        validate_config(cfg)
    except ValueError as exc:
        key = str(exc)
        raise ConfigError("invalid value", key=key, line=_line_of(entries, key)) from None
    return cfg


def load_scene_config(path, seed: int | None = None) -> SceneConfig:
    return scene_config_from_text(Path(path).read_text(), seed)


def load_config(path, base):
    """Any dataclass config: ``base`` with the file's entries applied."""
    return apply_config(base, parse_config_text(Path(path).read_text()))


def _format_value(v) -> str:
    if isinstance(v, frozenset):
        return repr(tuple(sorted(v)))
    if isinstance(v, tuple):
        return repr(tuple(float(x) for x in v))
    return repr(v)


def config_lines(obj, prefix: str = "") -> list[str]:
    """Flatten a dataclass tree into ``key = value`` lines that parse back to it."""
    out = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out += config_lines(v, key + ".")
        elif isinstance(v, list):
            for k, item in enumerate(v):
                out += config_lines(item, f"{key}[{k}].")
        else:
            out.append(f"{key} = {_format_value(v)}")
    return out


def dump_config(obj) -> str:
    return "\n".join(config_lines(obj)) + "\n"


def config_hash(obj) -> str:
    return hashlib.sha256(dump_config(obj).encode()).hexdigest()


# -- TUM trajectories ------------------------------------------------------
def format_tum(traj: Trajectory) -> str:
    """``timestamp tx ty tz qx qy qz qw`` per pose, 9 significant digits."""
    lines = []
    for t, p in zip(traj.timestamps, traj.poses):
        w, x, y, z = p.rotation
        vals = [t, *p.translation, x, y, z, w]
        lines.append(" ".join(f"{v:.9g}" for v in vals))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_tum(text: str, name: str = "<string>") -> Trajectory:
    ts, poses = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{name}:{lineno}: expected 8 fields, found {len(parts)}")
        try:
            v = [float(s) for s in parts]
        except ValueError:
            raise FormatError(f"{name}:{lineno}: non-numeric field") from None
        if not np.all(np.isfinite(v)):
            raise FormatError(f"{name}:{lineno}: non-finite value")
        q = np.array([v[7], v[4], v[5], v[6]])
        if np.linalg.norm(q) < 1e-9:
            raise FormatError(f"{name}:{lineno}: zero quaternion")
        if ts and v[0] <= ts[-1]:
            raise FormatError(f"{name}:{lineno}: timestamps must strictly increase")
        ts.append(v[0])
        poses.append(SE3Pose(q, v[1:4]))
    return Trajectory(np.array(ts), poses)


def write_tum(path, traj: Trajectory):
    Path(path).write_text(format_tum(traj))


def read_tum(path) -> Trajectory:
    return parse_tum(Path(path).read_text(), str(path))


# -- uncertainty images ----------------------------------------------------
def pgm_bytes(field: np.ndarray) -> tuple[bytes, float, float]:
    """8-bit binary PGM of ``field`` and ``(offset, scale)`` with ``value ~ offset + scale * pixel``."""
    f = np.asarray(field, dtype=np.float64)
    lo, hi = float(f.min()), float(f.max())
    scale = (hi - lo) / 255.0 if hi > lo else 0.0
    pix = np.zeros(f.shape, dtype=np.uint8) if scale == 0 else np.rint((f - lo) / scale).astype(np.uint8)
    H, W = f.shape
    return f"P5\n{W} {H}\n255\n".encode() + pix.tobytes(), lo, scale


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = raw.split(maxsplit=4)
    if len(tokens) < 5 or tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or len(tokens[4]) != W * H:
        raise FormatError(f"{path}: unsupported PGM payload")
    return np.frombuffer(tokens[4], dtype=np.uint8).reshape(H, W)


def field_csv(field: np.ndarray) -> str:
    """Exact CSV: one row per image row, values as shortest round-trip reprs."""
    return "".join(",".join(repr(float(x)) for x in row) + "\n" for row in np.asarray(field, dtype=np.float64))


def parse_field_csv(text: str, name: str = "<string>") -> np.ndarray:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    try:
        arr = np.array([[float(x) for x in r] for r in rows])
    except ValueError:
        raise FormatError(f"{name}: non-numeric entry") from None
    if arr.ndim != 2:
        raise FormatError(f"{name}: ragged rows")
    return arr


# -- manifests -------------------------------------------------------------
def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(directory, command: str, cfg_hash: str, seed, artifacts, wall_time: float):
    """``manifest.txt`` listing every artifact (relative path) with its sha256."""
    d = Path(directory)
    lines = [f"command = {command}", f"config_hash = {cfg_hash}", f"seed = {seed}", f"wall_time = {wall_time:.3f}"]
    for rel in sorted(str(a) for a in artifacts):
        lines.append(f"artifact {sha256_file(d / rel)} {rel}")
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(directory) -> dict:
    d = Path(directory)
    info, artifacts = {}, {}
    for lineno, line in enumerate((d / "manifest.txt").read_text().splitlines(), start=1):
        if line.startswith("artifact "):
            parts = line.split(" ", 2)
            if len(parts) != 3:
                raise FormatError(f"{d / 'manifest.txt'}:{lineno}: malformed artifact line")
            artifacts[parts[2]] = parts[1]
        elif " = " in line:
            k, v = line.split(" = ", 1)
            info[k] = v
        elif line.strip():
            raise FormatError(f"{d / 'manifest.txt'}:{lineno}: unrecognized line")
    info["artifacts"] = artifacts
    return info


def verify_manifest(directory) -> list[str]:
    """Artifacts that are missing or whose checksum no longer matches."""
    d = Path(directory)
    bad = []
    for rel, digest in read_manifest(d)["artifacts"].items():
        p = d / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


# -- scene and result directories ------------------------------------------
def write_scene_dir(directory, scene) -> list[str]:
    """Scene config, gt trajectory (camera-to-world), per-frame depth and dynamic masks."""
    d = Path(directory)
    (d / "depth").mkdir(parents=True, exist_ok=True)
    (d / "mask").mkdir(exist_ok=True)
    (d / "scene.txt").write_text(dump_config(scene.config))
    write_tum(d / "groundtruth.txt", gt_trajectory(scene))
    written = ["scene.txt", "groundtruth.txt"]
    for k in range(scene.n_frames):
        save_scalar_map(d / "depth" / f"depth_{k:04d}.dmap", 1.0 / scene.gt_inv_depth[k])
        save_scalar_map(d / "mask" / f"mask_{k:04d}.dmap", scene.dynamic_mask[k].astype(np.float32))
        written += [f"depth/depth_{k:04d}.dmap", f"mask/mask_{k:04d}.dmap"]
    return written


def gt_trajectory(scene) -> Trajectory:
    return Trajectory(scene.timestamps, [g.inverse() for g in scene.gt_poses])


def energy_trace_csv(trace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "keyframe", "round", "phase", "step", "energy"])
    for r in trace:
        w.writerow([r.stage, r.keyframe, r.round, r.phase, r.step, repr(float(r.energy))])
    return buf.getvalue()


def theta_trace_csv(history) -> str:
    """One row per uncertainty step: context columns then the theta entries."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = len(history[0][-1]) if history else 0
    w.writerow(["stage", "keyframe", "round", "step"] + [f"theta_{k}" for k in range(n)])
    for stage, kf, rnd, step, theta in history:
        w.writerow([stage, kf, rnd, step] + [repr(float(x)) for x in theta])
    return buf.getvalue()


def write_result_dir(directory, result) -> list[str]:
    """Serialize a SessionResult; returns the written paths relative to ``directory``."""
    d = Path(directory)
    (d / "uncertainty").mkdir(parents=True, exist_ok=True)
    write_tum(d / "traj_kf.txt", result.keyframe_trajectory)
    write_tum(d / "traj_full.txt", result.full_trajectory)
    (d / "energy_trace.csv").write_text(energy_trace_csv(result.trace))
    (d / "theta_trace.csv").write_text(theta_trace_csv(result.theta_history))
    (d / "config.txt").write_text(dump_config(result.config))
    written = ["traj_kf.txt", "traj_full.txt", "energy_trace.csv", "theta_trace.csv", "config.txt"]
    for f in sorted(result.uncertainty):
        u = result.uncertainty[f]
        data, lo, scale = pgm_bytes(u)
        stem = f"uncertainty/kf_{f:04d}"
        (d / f"{stem}.pgm").write_bytes(data)
        (d / f"{stem}.scale").write_text(f"offset {lo!r} scale {scale!r}\n")
        (d / f"{stem}.csv").write_text(field_csv(u))
        written += [f"{stem}.pgm", f"{stem}.scale", f"{stem}.csv"]
    return written


def read_uncertainty_dir(directory) -> dict:
    """Keyframe id -> exact uncertainty field from ``uncertainty/kf_*.csv``."""
    out = {}
    for p in sorted(Path(directory).glob("kf_*.csv")):
        out[int(p.stem[3:])] = parse_field_csv(p.read_text(), str(p))
    return out
