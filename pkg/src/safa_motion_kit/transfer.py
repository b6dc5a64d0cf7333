"""Relative motion transfer from a driving sequence onto a source image."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import MorphableModel, ParamSet
from .motion import KeypointSet, _affine_field, _checked_inverse
from .render import ImageGrid, render_3d_motion


def relative_affine(p_source, p_reference, jac_reference, p_target, jac_target, grid: ImageGrid, index: int = 0) -> np.ndarray:
    """``T(z) = p_S + J_Dr J_Dt^-1 (z - p_S + p_Dr - p_Dt)``."""
    p_s = np.asarray(p_source, dtype=np.float64)
    shift = np.asarray(p_reference, dtype=np.float64) - np.asarray(p_target, dtype=np.float64)
    matrix = np.asarray(jac_reference, dtype=np.float64) @ _checked_inverse(np.asarray(jac_target, dtype=np.float64), index)
    return _affine_field(grid, p_s, matrix, p_s - shift)


def relative_affine_motions(
    source: KeypointSet, reference: KeypointSet, target: KeypointSet, grid: ImageGrid
) -> np.ndarray:
    if not len(source) == len(reference) == len(target):
        raise ValueError("keypoint sets must have equal length")
    fields = [
        relative_affine(
            source.points[k], reference.points[k], reference.jacobians[k], target.points[k], target.jacobians[k], grid, k
        )
        for k in range(len(source))
    ]
    return np.stack(fields) if fields else np.zeros((0,) + grid.shape + (2,))


def relative_params(source: ParamSet, reference: ParamSet, target: ParamSet) -> ParamSet:
    """Source parameters moved by the reference-to-target delta.

    Shape is kept; expression, pose and translation add the delta; scale is
    multiplied by the scale ratio. Deltas are formed first so that an
    unchanged target reproduces the source exactly.
    """
    if reference.camera_scale == 0:
        raise ValueError("reference camera scale must be nonzero")
    for name in ("expression", "pose"):
        if not getattr(source, name).shape == getattr(reference, name).shape == getattr(target, name).shape:
            raise ValueError(f"{name} dimensions differ between parameter sets")
    return source.replace(
        expression=source.expression + (target.expression - reference.expression),
        pose=source.pose + (target.pose - reference.pose),
        camera_scale=source.camera_scale * (target.camera_scale / reference.camera_scale),
        camera_translation=source.camera_translation + (target.camera_translation - reference.camera_translation),
    )


def relative_3d_motion(
    model: MorphableModel, source: ParamSet, transferred: ParamSet, grid: ImageGrid
) -> tuple[np.ndarray, np.ndarray]:
    """Face motion from the transferred pose back to the source, on the transferred mesh."""
    return render_3d_motion(model, source, transferred, grid)


@dataclass(frozen=True)
class PoseDistance:
    """Weighted sum of global-rotation and translation distances."""

    rotation_weight: float = 1.0
    translation_weight: float = 1.0

    def __call__(self, a: ParamSet, b: ParamSet) -> float:
        rot = float(np.linalg.norm(a.global_rotation - b.global_rotation))
        trans = float(np.linalg.norm(a.camera_translation - b.camera_translation))
        return self.rotation_weight * rot + self.translation_weight * trans


def select_reference_frame(source: ParamSet, driving: Sequence[ParamSet], metric: PoseDistance | None = None) -> int:
    """Index of the driving frame closest in pose to the source; ties keep the first."""
    if len(driving) == 0:
        raise ValueError("driving sequence is empty")
    metric = metric or PoseDistance()
    distances = [metric(source, frame) for frame in driving]
    return int(np.argmin(distances))
