"""Per-keyframe feature maps: synthetic generation, FMAP/DMAP files, cosine fields.

Synthetic features imitate what a self-supervised backbone gives: a
class-level component shared by every point on the same object plus a smooth
texture anchored to the object's surface. Static pixels sample the world
texture at the 3D point they see; pixels on a mover sample that mover's
body-anchored texture, so a camera-only warp of a moving pixel lands on
content with a different feature.

Binary container (little-endian)::

    magic    4 bytes   b"FMAP" (features) or b"DMAP" (scalar fields)
    version  u32       1
    height   u32
    width    u32
    channels u32       1 for DMAP
    data     f32[height * width * channels], row-major, channel fastest
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .errors import FormatError

_HEADER = struct.Struct("<4sIIII")
_VERSION = 1
NORM_EPS = 1e-12


@dataclass
class FeatureNoiseSpec:
    static_noise_sigma: float = 0.0
    dynamic_mode: str = "decorrelated"  # or "drifting"
    drift_rate: float = 0.3  # radians per frame, drifting mode only


@dataclass
class _FeatureBasis:
    static_class: np.ndarray  # (C,)
    static_k: np.ndarray  # (C, 3)
    static_phase: np.ndarray  # (C,)
    mover_class: np.ndarray  # (M, C)
    mover_k: np.ndarray  # (M, C, 3)
    mover_phase: np.ndarray  # (M, C)


STATIC_TEXTURE = 0.5
MOVER_TEXTURE = 0.8


def _unit(v):
    return v / np.linalg.norm(v)


def _basis(n_movers: int, C: int, seed: int) -> _FeatureBasis:
    g = rng_mod.stream(seed, "features", C, n_movers)
    static_class = _unit(g.normal(size=C))
    static_k = g.normal(size=(C, 3))
    static_k *= (g.uniform(0.4, 1.4, size=C) / np.linalg.norm(static_k, axis=1))[:, None]
    static_phase = g.uniform(0, 2 * np.pi, size=C)
    mover_class = np.empty((n_movers, C))
    for m in range(n_movers):
        v = g.normal(size=C)
        v -= (v @ static_class) * static_class
        mover_class[m] = _unit(v)
    mover_k = g.normal(size=(n_movers, C, 3))
    mover_k *= (g.uniform(2.0, 4.0, size=(n_movers, C)) / np.linalg.norm(mover_k, axis=2))[..., None]
    mover_phase = g.uniform(0, 2 * np.pi, size=(n_movers, C))
    return _FeatureBasis(static_class, static_k, static_phase, mover_class, mover_k, mover_phase)


def synth_features(scene, frame: int, C: int, spec: FeatureNoiseSpec, seed: int) -> np.ndarray:
    """(H, W, C) synthetic feature map for one frame of a SyntheticSequence."""
    n_movers = len(scene.config.movers)
    b = _basis(n_movers, C, seed)
    X = scene.body_points(frame)
    ids = scene.object_id[frame]
    F = b.static_class + STATIC_TEXTURE * np.sin(X @ b.static_k.T + b.static_phase)
    for m in range(n_movers):
        sel = ids == m
        if not sel.any():
            continue
        phase = b.mover_phase[m]
        if spec.dynamic_mode == "decorrelated":
            phase = rng_mod.stream(seed, "feature_dynamic", frame, m).uniform(0, 2 * np.pi, size=C)
        tex = MOVER_TEXTURE * np.sin(X[sel] @ b.mover_k[m].T + phase)
        if spec.dynamic_mode == "drifting":
            tex = _rotate_pairs(tex, spec.drift_rate * frame)
        F[sel] = b.mover_class[m] + tex
    F = F / np.linalg.norm(F, axis=-1, keepdims=True)
    if spec.static_noise_sigma > 0:
        noise = rng_mod.stream(seed, "feature_noise", frame).normal(size=F.shape) * spec.static_noise_sigma
        F = F + np.where(ids[..., None] < 0, noise, 0.0)
    return F


def _rotate_pairs(x: np.ndarray, angle: float) -> np.ndarray:
    """Rotate consecutive channel pairs by ``angle``; an odd last channel is left alone."""
    out = x.copy()
    c, s = np.cos(angle), np.sin(angle)
    n = x.shape[-1] // 2 * 2
    a, b = x[..., 0:n:2], x[..., 1:n:2]
    out[..., 0:n:2] = c * a - s * b
    out[..., 1:n:2] = s * a + c * b
    return out


def cosine_field(F_a: np.ndarray, F_b: np.ndarray):
    """Per-pixel cosine similarity and the mask of pixels with non-degenerate norms."""
    if F_a.shape != F_b.shape:
        raise ValueError(f"shape mismatch {F_a.shape} vs {F_b.shape}")
    na = np.linalg.norm(F_a, axis=-1)
    nb = np.linalg.norm(F_b, axis=-1)
    mask = (na >= NORM_EPS) & (nb >= NORM_EPS)
    denom = np.where(mask, na * nb, 1.0)
    cos = np.where(mask, np.sum(F_a * F_b, axis=-1) / denom, 0.0)
    return np.clip(cos, -1.0, 1.0), mask


def _write(path, magic: bytes, arr: np.ndarray):
    H, W, C = arr.shape
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(magic, _VERSION, H, W, C))
        fh.write(data.tobytes())


def _read(path, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    got, version, H, W, C = _HEADER.unpack_from(raw, 0)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r} at byte offset 0")
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte offset 4")
    if H == 0 or W == 0 or C == 0:
        raise FormatError(f"{path}: empty shape {H}x{W}x{C} at byte offset 8")
    need = _HEADER.size + 4 * H * W * C
    if len(raw) != need:
        off = min(len(raw), need)
        raise FormatError(f"{path}: expected {need} bytes, found {len(raw)} (mismatch at byte offset {off})")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(H, W, C).astype(np.float32)


def save_feature_map(path, F: np.ndarray):
    if F.ndim != 3:
        raise ValueError("feature map must be (H, W, C)")
    _write(path, b"FMAP", F)


def load_feature_map(path) -> np.ndarray:
    return _read(path, b"FMAP")


def save_scalar_map(path, D: np.ndarray):
    _write(path, b"DMAP", np.asarray(D)[..., None])


def load_scalar_map(path) -> np.ndarray:
    F = _read(path, b"DMAP")
    if F.shape[2] != 1:
        raise FormatError(f"{path}: DMAP must have one channel, found {F.shape[2]} at byte offset 16")
    return F[..., 0]


class SyntheticFeatureProvider:
    """Feature maps generated on demand from a SyntheticSequence."""

    def __init__(self, scene, channels: int = 16, spec: FeatureNoiseSpec | None = None, seed: int = 0):
        self.scene = scene
        self.channels = channels
        self.spec = spec or FeatureNoiseSpec()
        self.seed = seed

    def __call__(self, frame: int) -> np.ndarray:
        return synth_features(self.scene, frame, self.channels, self.spec, self.seed)


class FileFeatureProvider:
    """Reads ``<directory>/<pattern % frame>`` FMAP files."""

    def __init__(self, directory, pattern: str = "feat_%04d.fmap"):
        self.directory = Path(directory)
        self.pattern = pattern

    def __call__(self, frame: int) -> np.ndarray:
        return load_feature_map(self.directory / (self.pattern % frame)).astype(np.float64)
