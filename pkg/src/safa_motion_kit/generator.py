"""Parameter-free generator maths on (h, w, C) feature maps.

Geometrically adaptive denormalisation modulates features channel-wise with
scale/shift vectors predicted from the driving 3DMM parameters, then
blends with the unmodulated features by a visibility map. Contextual
attention rebuilds poorly visible regions from visible patches.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .model import ParamSet

DEFAULT_SOFTMAX_SCALE = 10.0
_NORM_EPS = 1e-4
_QUERY_CHUNK = 1024


class AttentionFallbackWarning(UserWarning):
    """No visible background patch: contextual attention returned its input."""


@dataclass(frozen=True, eq=False)
class GadeWeights:
    w_gamma: np.ndarray  # (C, D)
    b_gamma: np.ndarray  # (C,)
    w_delta: np.ndarray  # (C, D)
    b_delta: np.ndarray  # (C,)
    avg_norms: np.ndarray  # (|shape|, |expression|, scale) averages

    def __post_init__(self) -> None:
        for name in ("w_gamma", "b_gamma", "w_delta", "b_delta", "avg_norms"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        c = self.b_gamma.shape[0]
        if self.w_gamma.ndim != 2 or self.w_gamma.shape[0] != c:
            raise ValueError(f"w_gamma must be ({c}, D), got {self.w_gamma.shape}")
        if self.w_delta.shape != self.w_gamma.shape or self.b_delta.shape != (c,):
            raise ValueError("delta weights must match gamma weights in shape")
        if self.avg_norms.shape != (3,):
            raise ValueError(f"avg_norms must hold 3 values, got {self.avg_norms.shape}")

    @property
    def channels(self) -> int:
        return self.b_gamma.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_gamma.shape[1]

    @classmethod
    def identity(cls, channels: int, input_dim: int) -> "GadeWeights":
        zeros = np.zeros((channels, input_dim))
        return cls(zeros, np.ones(channels), zeros.copy(), np.zeros(channels), np.ones(3))

    @classmethod
    def load(cls, path: str | Path) -> "GadeWeights":
        with np.load(path, allow_pickle=False) as archive:
            missing = {"w_gamma", "b_gamma", "w_delta", "b_delta", "avg_norms"} - set(archive.files)
            if missing:
                raise ValueError(f"GADE weights missing tensors: {sorted(missing)}")
            return cls(**{k: archive[k] for k in ("w_gamma", "b_gamma", "w_delta", "b_delta", "avg_norms")})

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                w_gamma=self.w_gamma,
                b_gamma=self.b_gamma,
                w_delta=self.w_delta,
                b_delta=self.b_delta,
                avg_norms=self.avg_norms,
            )


def normalize_params(params: ParamSet, avg_norms) -> np.ndarray:
    """Concatenate (shape, expression, pose, scale, translation), dividing the
    shape, expression and scale blocks by their average norms."""
    norms = np.asarray(avg_norms, dtype=np.float64).reshape(-1)
    if norms.shape != (3,) or np.any(norms <= 0):
        raise ValueError(f"avg_norms must be 3 positive values, got {norms}")
    return np.concatenate(
        [
            params.shape / norms[0],
            params.expression / norms[1],
            params.pose,
            [params.camera_scale / norms[2]],
            params.camera_translation,
        ]
    )


def gade_modulation(param_vec: np.ndarray, weights: GadeWeights) -> tuple[np.ndarray, np.ndarray]:
    """Scale and shift vectors from two affine maps of the parameter vector."""
    param_vec = np.asarray(param_vec, dtype=np.float64).reshape(-1)
    if param_vec.size != weights.input_dim:
        raise ValueError(f"parameter vector has {param_vec.size} entries, weights expect {weights.input_dim}")
    return weights.w_gamma @ param_vec + weights.b_gamma, weights.w_delta @ param_vec + weights.b_delta


def _blend(features: np.ndarray, replacement: np.ndarray, visibility: np.ndarray) -> np.ndarray:
    # v * F + (1 - v) * R, arranged so that v == 1 or R == F return F exactly
    return features + (1.0 - visibility)[..., None] * (replacement - features)


def gade_apply(features: np.ndarray, gamma, delta, occlusion: np.ndarray) -> np.ndarray:
    """``O * F + (1 - O) * (gamma * F + delta)`` with channel-wise broadcast."""
    features = np.asarray(features, dtype=np.float64)
    occlusion = np.asarray(occlusion, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if features.ndim != 3:
        raise ValueError(f"features must be (h, w, C), got {features.shape}")
    if occlusion.shape != features.shape[:2]:
        raise ValueError(f"occlusion map {occlusion.shape} does not match features {features.shape[:2]}")
    if gamma.shape != (features.shape[2],) or delta.shape != (features.shape[2],):
        raise ValueError(f"gamma/delta must have {features.shape[2]} entries")
    denorm = gamma * features + delta
    return _blend(features, denorm, occlusion)


def extract_patches(features: np.ndarray, patch: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """All ``patch x patch`` windows at ``stride``, row-major.

    Returns ``(patches (N, patch, patch, C), positions (N, 2))`` where a
    position is the (row, col) of the window's top-left pixel.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 2:
        features = features[..., None]
    h, w = features.shape[:2]
    if patch < 1 or stride < 1:
        raise ValueError("patch and stride must be positive")
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} larger than feature map {h}x{w}")
    windows = np.lib.stride_tricks.sliding_window_view(features, (patch, patch), axis=(0, 1))
    windows = windows[::stride, ::stride]  # (nr, nc, C, p, p)
    nr, nc = windows.shape[:2]
    patches = np.ascontiguousarray(np.moveaxis(windows, 2, -1)).reshape(nr * nc, patch, patch, features.shape[2])
    rows, cols = np.meshgrid(np.arange(nr) * stride, np.arange(nc) * stride, indexing="ij")
    return patches, np.stack([rows.ravel(), cols.ravel()], axis=1)


def _patch_visibility(occlusion: np.ndarray, patch: int, stride: int) -> np.ndarray:
    vis, _ = extract_patches(occlusion, patch, stride)
    return vis.reshape(len(vis), -1).mean(axis=1)


def _normalized(flat: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(flat, axis=1, keepdims=True)
    return flat / np.maximum(norm, _NORM_EPS)


def attention_scores(
    features: np.ndarray,
    occlusion: np.ndarray,
    patch: int = 3,
    softmax_scale: float = DEFAULT_SOFTMAX_SCALE,
    stride: int = 1,
) -> np.ndarray:
    """(N_query, N_background) attention distribution.

    Queries are all stride-1 windows; background windows are weighted by
    their mean visibility ``b_j`` and scored by cosine similarity ``s_ij``:
    ``a_ij = b_j exp(scale s_ij) / sum_j' b_j' exp(scale s_ij')``.
    Rows are all-zero when no background window is visible.
    """
    if not softmax_scale > 0:
        raise ValueError(f"softmax_scale must be positive, got {softmax_scale}")
    queries, _ = extract_patches(features, patch, 1)
    keys, _ = extract_patches(features, patch, stride)
    vis = _patch_visibility(occlusion, patch, stride)
    q = _normalized(queries.reshape(len(queries), -1))
    k = _normalized(keys.reshape(len(keys), -1))
    return _softmax_rows(q @ k.T, vis, softmax_scale)


def _softmax_rows(scores: np.ndarray, vis: np.ndarray, scale: float) -> np.ndarray:
    usable = vis > 0
    if not usable.any():
        return np.zeros_like(scores)
    logits = np.where(usable, scale * scores, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits) * np.where(usable, vis, 0.0)
    return e / e.sum(axis=1, keepdims=True)


def contextual_attention(
    features: np.ndarray,
    occlusion: np.ndarray,
    patch: int = 3,
    softmax_scale: float = DEFAULT_SOFTMAX_SCALE,
    stride: int = 1,
) -> np.ndarray:
    """Rebuild occluded features from visible patches.

    Every query window is replaced by its attention-weighted mix of
    background windows; overlapping reconstructions are averaged per pixel
    and the result is blended in where ``occlusion`` (visibility) is low.
    """
    features = np.asarray(features, dtype=np.float64)
    occlusion = np.asarray(occlusion, dtype=np.float64)
    if features.ndim != 3:
        raise ValueError(f"features must be (h, w, C), got {features.shape}")
    if occlusion.shape != features.shape[:2]:
        raise ValueError(f"occlusion map {occlusion.shape} does not match features {features.shape[:2]}")
    if not softmax_scale > 0:
        raise ValueError(f"softmax_scale must be positive, got {softmax_scale}")
    h, w, c = features.shape
    keys, _ = extract_patches(features, patch, stride)
    vis = _patch_visibility(occlusion, patch, stride)
    if not np.any(vis > 0):
        warnings.warn("no visible background patch; returning input features", AttentionFallbackWarning, stacklevel=2)
        return features.copy()

    queries, _ = extract_patches(features, patch, 1)
    raw = keys.reshape(len(keys), -1)
    k_norm = _normalized(raw)
    q_norm = _normalized(queries.reshape(len(queries), -1))
    rebuilt = np.empty((len(queries), raw.shape[1]))
    for start in range(0, len(queries), _QUERY_CHUNK):
        block = slice(start, start + _QUERY_CHUNK)
        rebuilt[block] = _softmax_rows(q_norm[block] @ k_norm.T, vis, softmax_scale) @ raw

    hq, wq = h - patch + 1, w - patch + 1
    rebuilt = rebuilt.reshape(hq, wq, patch, patch, c)
    acc = np.zeros((h, w, c))
    count = np.zeros((h, w, 1))
    for di in range(patch):
        for dj in range(patch):
            acc[di : di + hq, dj : dj + wq] += rebuilt[:, :, di, dj]
            count[di : di + hq, dj : dj + wq] += 1.0
    return _blend(features, acc / count, occlusion)


def contextual_attention_module(
    features: np.ndarray,
    occlusion: np.ndarray,
    dilated_branch: Callable[[np.ndarray], np.ndarray] | np.ndarray | None = None,
    patch: int = 3,
    softmax_scale: float = DEFAULT_SOFTMAX_SCALE,
) -> np.ndarray:
    """Attention branch concatenated channel-wise with a caller-supplied
    second branch (the learned dilated-convolution block is not part of
    this package). Without a second branch only the attention output is
    returned."""
    attended = contextual_attention(features, occlusion, patch, softmax_scale)
    if dilated_branch is None:
        return attended
    other = dilated_branch(features) if callable(dilated_branch) else np.asarray(dilated_branch, dtype=np.float64)
    if other.shape[:2] != attended.shape[:2]:
        raise ValueError(f"second branch spatial shape {other.shape[:2]} does not match {attended.shape[:2]}")
    return np.concatenate([attended, other], axis=-1)
