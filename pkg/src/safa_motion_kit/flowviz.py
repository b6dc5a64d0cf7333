"""Middlebury colour-wheel rendering of motion fields.

Hue encodes direction and saturation encodes magnitude relative to the
largest displacement; zero motion is white and rightward motion is red.
"""

from __future__ import annotations

import numpy as np

from .render import ImageGrid

# colour-wheel segment lengths: RY, YG, GC, CB, BM, MR
_SEGMENTS = (15, 6, 4, 11, 13, 6)


def color_wheel() -> np.ndarray:
    ry, yg, gc, cb, bm, mr = _SEGMENTS
    wheel = np.zeros((sum(_SEGMENTS), 3))
    col = 0
    wheel[col : col + ry, 0] = 1.0
    wheel[col : col + ry, 1] = np.arange(ry) / ry
    col += ry
    wheel[col : col + yg, 0] = 1.0 - np.arange(yg) / yg
    wheel[col : col + yg, 1] = 1.0
    col += yg
    wheel[col : col + gc, 1] = 1.0
    wheel[col : col + gc, 2] = np.arange(gc) / gc
    col += gc
    wheel[col : col + cb, 1] = 1.0 - np.arange(cb) / cb
    wheel[col : col + cb, 2] = 1.0
    col += cb
    wheel[col : col + bm, 2] = 1.0
    wheel[col : col + bm, 0] = np.arange(bm) / bm
    col += bm
    wheel[col : col + mr, 2] = 1.0 - np.arange(mr) / mr
    wheel[col : col + mr, 0] = 1.0
    return wheel


def _wheel_color(angle_index: np.ndarray, wheel: np.ndarray) -> np.ndarray:
    n = len(wheel)
    k0 = np.floor(angle_index).astype(np.int64) % n
    k1 = (k0 + 1) % n
    f = (angle_index - np.floor(angle_index))[..., None]
    return (1.0 - f) * wheel[k0] + f * wheel[k1]


def flow_to_color(displacement: np.ndarray, max_radius: float | None = None) -> tuple[np.ndarray, float]:
    """RGB floats in [0, 1] for an (H, W, 2) displacement, plus the radius used."""
    u = displacement[..., 0]
    v = displacement[..., 1]
    radius = np.sqrt(u * u + v * v)
    if max_radius is None:
        max_radius = float(radius.max()) if radius.size else 0.0
    max_radius = max(max_radius, 1e-12)
    wheel = color_wheel()
    angle = np.arctan2(-v, -u) / np.pi
    index = (angle + 1.0) / 2.0 * (len(wheel) - 1)
    col = _wheel_color(index, wheel)
    mag = np.clip(radius / max_radius, 0.0, 1.0)[..., None]
    return 1.0 - mag * (1.0 - col), max_radius


def visualize_flow(field: np.ndarray, max_radius: float | None = None) -> tuple[np.ndarray, float]:
    """8-bit colour image of ``field - identity`` for an absolute motion field."""
    field = np.asarray(field, dtype=np.float64)
    if not np.all(np.isfinite(field)):
        raise ValueError("motion field must be finite")
    grid = ImageGrid(field.shape[0], field.shape[1])
    rgb, radius = flow_to_color(field - grid.pixel_centers(), max_radius)
    return np.round(rgb * 255.0).astype(np.uint8), radius


def decode_flow_image(image: np.ndarray, max_radius: float, lut_steps: int = 64) -> np.ndarray:
    """Approximate inverse of :func:`flow_to_color` for uint8 images.

    Magnitude follows from the smallest channel (every wheel colour has one
    channel at 0); direction is the nearest entry of a dense wheel table.
    """
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    mag = 1.0 - rgb.min(axis=-1)
    safe = np.maximum(mag, 1e-12)[..., None]
    col = 1.0 - (1.0 - rgb) / safe
    wheel = color_wheel()
    n = len(wheel)
    index = np.arange(n * lut_steps) / lut_steps
    table = _wheel_color(index, wheel)
    flat = col.reshape(-1, 3)
    nearest = np.empty(len(flat), dtype=np.int64)
    for start in range(0, len(flat), 4096):
        d = ((flat[start : start + 4096, None, :] - table[None]) ** 2).sum(-1)
        nearest[start : start + 4096] = d.argmin(axis=1)
    idx = index[nearest].reshape(mag.shape)
    # index -> angle, undoing angle = atan2(-v, -u) / pi
    angle = (idx / (n - 1) * 2.0 - 1.0) * np.pi
    radius = mag * max_radius
    u = -radius * np.cos(angle)
    v = -radius * np.sin(angle)
    return np.stack([u, v], axis=-1)
