"""File formats: 8-bit RGB PNG images, NPY tensors, NPZ bundles, JSON records."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .fitting import LandmarkSet
from .model import ParamSet
from .motion import KeypointSet


def read_image(path: str | Path) -> np.ndarray:
    """RGB image as float64 (H, W, 3) in [0, 1]."""
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64)
    return data / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write floats in [0, 1] (or uint8) as PNG; grayscale is expanded to RGB."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=2)
    Image.fromarray(np.ascontiguousarray(arr[..., :3])).save(path, format="PNG")


def save_array(path: str | Path, array: np.ndarray) -> None:
    np.save(path, np.asarray(array, dtype="<f8"), allow_pickle=False)


def load_array(path: str | Path) -> np.ndarray:
    return np.asarray(np.load(path, allow_pickle=False), dtype=np.float64)


def load_keypoints(path: str | Path) -> KeypointSet:
    """Keypoints from an NPZ holding ``points`` (K, 2) and ``jacobians`` (K, 2, 2)."""
    with np.load(path, allow_pickle=False) as archive:
        if "points" not in archive.files:
            raise ValueError(f"{path}: keypoint tensor 'points' absent")
        points = archive["points"]
        jac = archive["jacobians"] if "jacobians" in archive.files else np.broadcast_to(np.eye(2), points.shape[:-1] + (2, 2))
    return KeypointSet(points, jac)


def load_keypoint_sequence(path: str | Path) -> list[KeypointSet]:
    """Per-frame keypoints from ``points`` (T, K, 2) / ``jacobians`` (T, K, 2, 2)."""
    with np.load(path, allow_pickle=False) as archive:
        points = archive["points"]
        jac = archive["jacobians"] if "jacobians" in archive.files else np.broadcast_to(np.eye(2), points.shape[:-1] + (2, 2))
    if points.ndim != 3:
        raise ValueError(f"{path}: expected points of shape (T, K, 2), got {points.shape}")
    return [KeypointSet(points[t], jac[t]) for t in range(len(points))]


def save_keypoints(path: str | Path, keypoints: KeypointSet | list[KeypointSet]) -> None:
    if isinstance(keypoints, KeypointSet):
        points, jac = keypoints.points, keypoints.jacobians
    else:
        points = np.stack([k.points for k in keypoints])
        jac = np.stack([k.jacobians for k in keypoints])
    with open(path, "wb") as fh:
        np.savez(fh, points=points.astype("<f8"), jacobians=jac.astype("<f8"))


def load_landmarks(path: str | Path) -> LandmarkSet:
    return LandmarkSet(load_array(path))


def write_json(path: str | Path, record: Any) -> None:
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str | Path) -> Any:
    with open(path) as fh:
        return json.load(fh)


def load_params(path: str | Path) -> ParamSet:
    return ParamSet.from_dict(read_json(path))


def load_param_sequence(path: str | Path) -> list[ParamSet]:
    records = read_json(path)
    if not isinstance(records, list):
        raise ValueError(f"{path}: expected a JSON array of parameter records")
    return [ParamSet.from_dict(r) for r in records]
