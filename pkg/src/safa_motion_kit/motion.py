"""First-order keypoint motion, heatmaps, masked fusion and bilinear warping.

Motion fields are (H, W, 2) arrays of absolute normalised sampling
coordinates: ``field[i, j]`` is where driving pixel (i, j) reads from in
the source. Mask stacks are ordered (background, 3D face, K affine).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import ImageGrid, bilinear_sample

DEFAULT_NUM_KEYPOINTS = 10
DEFAULT_HEATMAP_SIGMA = 0.01
_MIN_DET = 1e-8


class SingularJacobianError(ValueError):
    def __init__(self, index: int, det: float):
        super().__init__(f"keypoint {index}: Jacobian is singular (det={det:.3g})")
        self.index = index


@dataclass(frozen=True, eq=False)
class KeypointSet:
    points: np.ndarray  # (K, 2)
    jacobians: np.ndarray  # (K, 2, 2)

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        jac = np.asarray(self.jacobians, dtype=np.float64).reshape(-1, 2, 2)
        if len(pts) != len(jac):
            raise ValueError(f"{len(pts)} keypoints but {len(jac)} Jacobians")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "jacobians", jac)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def identity(cls, points: np.ndarray) -> "KeypointSet":
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return cls(points, np.broadcast_to(np.eye(2), (len(points), 2, 2)))


def _checked_inverse(jac: np.ndarray, index: int = 0) -> np.ndarray:
    det = float(np.linalg.det(jac))
    if not abs(det) > _MIN_DET:
        raise SingularJacobianError(index, det)
    return np.linalg.inv(jac)


def _affine_field(grid: ImageGrid, origin: np.ndarray, matrix: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    # origin + matrix @ (z - anchor), evaluated on every pixel centre
    z = grid.pixel_centers()
    return origin + (z - anchor) @ matrix.T


def affine_motion(p_source, jac_source, p_driving, jac_driving, grid: ImageGrid, index: int = 0) -> np.ndarray:
    """First-order local motion ``T(z) = p_S + J_S J_D^-1 (z - p_D)``."""
    p_s = np.asarray(p_source, dtype=np.float64)
    p_d = np.asarray(p_driving, dtype=np.float64)
    matrix = np.asarray(jac_source, dtype=np.float64) @ _checked_inverse(np.asarray(jac_driving, dtype=np.float64), index)
    return _affine_field(grid, p_s, matrix, p_d)


def affine_motions(source: KeypointSet, driving: KeypointSet, grid: ImageGrid) -> np.ndarray:
    """All K local fields stacked as (K, H, W, 2)."""
    if len(source) != len(driving):
        raise ValueError(f"keypoint counts differ: {len(source)} vs {len(driving)}")
    return np.stack(
        [
            affine_motion(source.points[k], source.jacobians[k], driving.points[k], driving.jacobians[k], grid, k)
            for k in range(len(source))
        ]
    ) if len(source) else np.zeros((0,) + grid.shape + (2,))


def gaussian_heatmap_diff(p_source, p_driving, sigma: float, grid: ImageGrid) -> np.ndarray:
    """Driving-centred minus source-centred Gaussian, ``exp(-|p - z|^2 / (2 sigma))``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    z = grid.pixel_centers()
    d_drv = np.sum((z - np.asarray(p_driving, dtype=np.float64)) ** 2, axis=-1)
    d_src = np.sum((z - np.asarray(p_source, dtype=np.float64)) ** 2, axis=-1)
    return np.exp(-d_drv / (2.0 * sigma)) - np.exp(-d_src / (2.0 * sigma))


def normal_z_heatmap(normal_driving: np.ndarray, normal_source: np.ndarray) -> np.ndarray:
    """Difference of the z channels of the driving and source normal maps."""
    nd = np.asarray(normal_driving, dtype=np.float64)
    ns = np.asarray(normal_source, dtype=np.float64)
    if nd.shape != ns.shape:
        raise ValueError(f"normal maps differ in shape: {nd.shape} vs {ns.shape}")
    return nd[..., 2] - ns[..., 2]


def heatmap_stack(
    source: KeypointSet,
    driving: KeypointSet,
    normal_driving: np.ndarray,
    normal_source: np.ndarray,
    grid: ImageGrid,
    sigma: float = DEFAULT_HEATMAP_SIGMA,
) -> np.ndarray:
    """(K + 2, H, W): zero background map, 3D-face map, K keypoint maps."""
    maps = [np.zeros(grid.shape), normal_z_heatmap(normal_driving, normal_source)]
    maps += [gaussian_heatmap_diff(source.points[k], driving.points[k], sigma, grid) for k in range(len(source))]
    return np.stack(maps)


def softmax_masks(raw: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the leading (K + 2) channel axis."""
    raw = np.asarray(raw, dtype=np.float64)
    shifted = raw - raw.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def check_masks(masks: np.ndarray, atol: float = 1e-6) -> None:
    total = masks.sum(axis=0)
    worst = float(np.max(np.abs(total - 1.0))) if total.size else 0.0
    if worst > atol or np.any(masks < 0):
        raise ValueError(f"mask stack must be nonnegative and sum to 1 per pixel (max deviation {worst:.3g})")


def fuse_dense_motion(masks: np.ndarray, motion_3d: np.ndarray, affine_fields: np.ndarray, grid: ImageGrid) -> np.ndarray:
    """Masked average of identity, 3D-face and K affine fields."""
    masks = np.asarray(masks, dtype=np.float64)
    affine_fields = np.asarray(affine_fields, dtype=np.float64).reshape((-1,) + grid.shape + (2,))
    k = affine_fields.shape[0]
    if masks.shape != (k + 2,) + grid.shape:
        raise ValueError(f"mask stack shape {masks.shape} does not match {(k + 2,) + grid.shape}")
    if motion_3d.shape != grid.shape + (2,):
        raise ValueError(f"3D motion shape {motion_3d.shape} does not match grid {grid.shape}")
    check_masks(masks)
    fused = masks[0][..., None] * grid.pixel_centers()
    fused = fused + masks[1][..., None] * motion_3d
    for i in range(k):
        fused = fused + masks[i + 2][..., None] * affine_fields[i]
    return fused


def warp(source: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Backward warp: ``out(z) = source(field(z))`` with bilinear sampling."""
    source = np.asarray(source, dtype=np.float64)
    field = np.asarray(field, dtype=np.float64)
    if field.shape[-1] != 2 or field.ndim != 3:
        raise ValueError(f"motion field must be (H, W, 2), got {field.shape}")
    return bilinear_sample(source, field)


@dataclass(frozen=True)
class AffineTransform:
    """``T(z) = matrix @ z + offset`` in normalised coordinates."""

    matrix: np.ndarray
    offset: np.ndarray

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ np.asarray(self.matrix).T + self.offset

    def inverse(self) -> "AffineTransform":
        inv = _checked_inverse(np.asarray(self.matrix, dtype=np.float64))
        return AffineTransform(inv, -inv @ np.asarray(self.offset, dtype=np.float64))


def equivariance_loss(
    original: KeypointSet, deformed: KeypointSet, transform: AffineTransform, jacobians: bool = False
) -> float | tuple[float, float]:
    """Keypoint equivariance penalty, mean over keypoints of an L1 norm.

    Compares ``p_k`` with ``T^-1(p'_k)``. With ``jacobians=True`` also
    returns the mean L1 gap between ``J_k`` and ``dT^-1 J'_k``.
    """
    if len(original) != len(deformed):
        raise ValueError(f"keypoint counts differ: {len(original)} vs {len(deformed)}")
    inv = transform.inverse()
    back = inv(deformed.points)
    point_term = float(np.mean(np.sum(np.abs(original.points - back), axis=1)))
    if not jacobians:
        return point_term
    mapped = np.einsum("ab,kbc->kac", inv.matrix, deformed.jacobians)
    jac_term = float(np.mean(np.sum(np.abs(original.jacobians - mapped), axis=(1, 2))))
    return point_term, jac_term
