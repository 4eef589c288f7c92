"""Per-pixel dynamic uncertainty driven by multi-view feature similarity.

For every directed edge (i, j) each pixel of frame i is warped rigidly into
frame j; the feature and the uncertainty of frame j are bilinearly sampled
there. The similarity energy of the pixel is

    e = (1 - cos(F_i, F_ij)) / (u_i * u_ij)

and a log prior ``gamma * sum log(u + 1)`` keeps the uncertainties finite.
Uncertainty maps come from an affine head on the features,
``u = softplus(theta . [F, 1])``, trained by plain gradient descent with
weight decay.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import FeatureDimMismatchError, ModelFrozenError
from .features import cosine_field
from .frame_graph import FrameGraph
from .geometry import relative_pose, rigid_correspondence

U_FLOOR = 1e-3
PRIOR_BIAS = 1.0


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def augment(features: np.ndarray) -> np.ndarray:
    """Append the constant bias channel."""
    ones = np.ones(features.shape[:-1] + (1,))
    return np.concatenate([features, ones], axis=-1)


@dataclass
class AffineUncertaintyModel:
    theta: np.ndarray
    gamma_prior: float = 0.1
    lr: float = 0.05
    weight_decay: float = 1e-3
    frozen: bool = False

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.gamma_prior < 0 or self.weight_decay < 0:
            raise ValueError("gamma_prior and weight_decay must be >= 0")

    @classmethod
    def zeros(cls, channels: int, **kwargs) -> "AffineUncertaintyModel":
        return cls(np.zeros(channels + 1), **kwargs)

    @property
    def channels(self) -> int:
        return len(self.theta) - 1


def map_uncertainty(model: AffineUncertaintyModel, features: np.ndarray) -> np.ndarray:
    if features.shape[-1] != model.channels:
        raise FeatureDimMismatchError(f"features have {features.shape[-1]} channels, model expects {model.channels}")
    return softplus(augment(features) @ model.theta)


@dataclass
class BilinearSample:
    values: np.ndarray  # sampled values, query shape (+ channels)
    index: np.ndarray  # (..., 4) flat indices into the sampled field
    alpha: np.ndarray  # (..., 4) interpolation weights, zero out of bounds
    in_bounds: np.ndarray  # (...)


def bilinear_sample(field: np.ndarray, at: np.ndarray) -> BilinearSample:
    """4-neighbour bilinear interpolation of an (H, W) or (H, W, C) field.

    Query points need all four neighbours on the grid, i.e.
    ``0 <= x <= W-1`` and ``0 <= y <= H-1``; others are out of bounds and
    get zero weights and zero values.
    """
    H, W = field.shape[:2]
    x = at[..., 0]
    y = at[..., 1]
    ok = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    xs = np.where(ok, x, 0.0)
    ys = np.where(ok, y, 0.0)
    x0 = np.minimum(np.floor(xs), W - 2).astype(np.int64)
    y0 = np.minimum(np.floor(ys), H - 2).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    index = np.stack([y0 * W + x0, y0 * W + x0 + 1, (y0 + 1) * W + x0, (y0 + 1) * W + x0 + 1], axis=-1)
    alpha = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    alpha = np.where(ok[..., None], alpha, 0.0)
    flat = field.reshape((H * W,) + field.shape[2:])
    if field.ndim == 2:
        values = np.sum(flat[index] * alpha, axis=-1)
    else:
        values = np.einsum("...kc,...k->...c", flat[index], alpha)
    return BilinearSample(values, index, alpha, ok)


def similarity_numerator(F_i: np.ndarray, F_ij: np.ndarray):
    """``1 - cos`` per pixel and the mask of non-degenerate pixels."""
    if F_i.shape[-1] != F_ij.shape[-1]:
        raise FeatureDimMismatchError("channel counts differ")
    cos, mask = cosine_field(F_i, F_ij)
    return np.where(mask, 1.0 - cos, 0.0), mask


class UncertaintyProblem:
    """Similarity terms of every edge, linearized once for fixed poses and depths.

    Terms are flattened over (edge, valid pixel). Uncertainty fields are
    handled as one array of shape (n_frames, H*W) in ``frame_ids`` order.
    """

    def __init__(self, graph: FrameGraph, pairs=None):
        K = graph.intrinsics
        self.pairs = sorted(graph.edges) if pairs is None else sorted(pairs)
        self.frame_ids = sorted({f for p in self.pairs for f in p})
        self.index = {f: k for k, f in enumerate(self.frame_ids)}
        self.shape = K.shape
        n = K.width * K.height
        self.n = n
        src, tgt_idx, tgt_alpha, num = [], [], [], []
        for i, j in self.pairs:
            a, b = graph.keyframes[i], graph.keyframes[j]
            p_ij, valid = rigid_correspondence(relative_pose(a.pose, b.pose), a.inv_depth, K)
            s = bilinear_sample(b.features, p_ij)
            nm, nmask = similarity_numerator(a.features, s.values)
            keep = (valid & s.in_bounds & nmask).reshape(-1)
            pix = np.nonzero(keep)[0]
            src.append(self.index[i] * n + pix)
            tgt_idx.append(self.index[j] * n + s.index.reshape(-1, 4)[pix])
            tgt_alpha.append(s.alpha.reshape(-1, 4)[pix])
            num.append(nm.reshape(-1)[pix])
        cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
        self.src = cat(src, (0,)).astype(np.int64)
        self.tgt_idx = cat(tgt_idx, (0, 4)).astype(np.int64)
        self.tgt_alpha = cat(tgt_alpha, (0, 4))
        self.numerator = cat(num, (0,))
        size = len(self.frame_ids) * n
        m = len(self.src)
        rows = np.repeat(np.arange(m), 4)
        # bilinear sampling of the target fields as a sparse (terms x pixels) operator
        self._sample = sp.csr_matrix((self.tgt_alpha.reshape(-1), (rows, self.tgt_idx.reshape(-1))), shape=(m, size))
        self._sample_t = self._sample.T.tocsr()
        if self.frame_ids:
            self.features = np.stack([augment(graph.keyframes[f].features.reshape(n, -1)) for f in self.frame_ids])
        else:
            self.features = np.zeros((0, n, 1))

    def fields(self, model: AffineUncertaintyModel) -> np.ndarray:
        if self.features.shape[-1] != len(model.theta):
            raise FeatureDimMismatchError(
                f"features have {self.features.shape[-1] - 1} channels, model expects {model.channels}"
            )
        return softplus(self.features @ model.theta)

    def _terms(self, u: np.ndarray, coupled: bool):
        flat = u.reshape(-1)
        u_src = flat[self.src]
        u_tgt = self._sample @ flat
        denom = u_src * u_src if coupled else u_src * u_tgt
        return self.numerator / denom, u_src, u_tgt

    def energy(self, u: np.ndarray, gamma_prior: float, coupled: bool = False) -> float:
        e, _, _ = self._terms(u, coupled)
        return float(np.sum(e) + gamma_prior * np.sum(np.log(u + PRIOR_BIAS)))

    def field_gradient(self, u: np.ndarray, gamma_prior: float, coupled: bool = False) -> np.ndarray:
        """dE/du for every frame and pixel, shape (n_frames, H*W)."""
        e, u_src, u_tgt = self._terms(u, coupled)
        size = u.size
        if coupled:
            g = np.bincount(self.src, weights=-2.0 * e / u_src, minlength=size)
        else:
            g = np.bincount(self.src, weights=-e / u_src, minlength=size)
            g += self._sample_t @ (-e / u_tgt)
        g = g.reshape(u.shape)
        return g + gamma_prior / (u + PRIOR_BIAS)

    def theta_gradient(self, model: AffineUncertaintyModel, coupled: bool = False):
        """Returns ``(field_gradient, theta_gradient)`` through the softplus head."""
        z = self.features @ model.theta
        u = softplus(z)
        gu = self.field_gradient(u, model.gamma_prior, coupled)
        g = np.einsum("fn,fnc->c", gu * sigmoid(z), self.features)
        return gu, g


@dataclass
class UncertaintyGradient:
    fields: dict  # frame id -> (H, W) dE/du
    theta: np.ndarray


def uncertainty_energy(graph: FrameGraph, model: AffineUncertaintyModel, coupled: bool = False) -> float:
    prob = UncertaintyProblem(graph)
    return prob.energy(prob.fields(model), model.gamma_prior, coupled)


def coupled_similarity_energy(graph: FrameGraph, model: AffineUncertaintyModel) -> float:
    """Energy with each term divided by the squared source uncertainty only."""
    return uncertainty_energy(graph, model, coupled=True)


def uncertainty_gradient(graph: FrameGraph, model: AffineUncertaintyModel, coupled: bool = False) -> UncertaintyGradient:
    prob = UncertaintyProblem(graph)
    gu, g = prob.theta_gradient(model, coupled)
    fields = {f: gu[k].reshape(prob.shape) for k, f in enumerate(prob.frame_ids)}
    return UncertaintyGradient(fields, g)


def gradient_step(model: AffineUncertaintyModel, g: np.ndarray):
    """``theta <- theta - lr * g - weight_decay * theta``."""
    if model.frozen:
        raise ModelFrozenError("affine uncertainty head is frozen")
    model.theta = model.theta - model.lr * g - model.weight_decay * model.theta


def direct_field_step(graph: FrameGraph, lr: float, gamma_prior: float = 0.1, coupled: bool = False,
                      u_floor: float = U_FLOOR, problem: UncertaintyProblem | None = None):
    """Gradient step on the stored uncertainty maps themselves, without the affine head."""
    prob = problem if problem is not None else UncertaintyProblem(graph)
    if not prob.frame_ids:
        return
    u = np.stack([graph.keyframes[f].uncertainty.reshape(-1) for f in prob.frame_ids])
    g = prob.field_gradient(u, gamma_prior, coupled)
    u_new = np.maximum(u - lr * g, u_floor)
    for k, f in enumerate(prob.frame_ids):
        graph.keyframes[f].uncertainty = u_new[k].reshape(prob.shape)
