"""Axis-angle exponential map and its analytic derivative."""

from __future__ import annotations

import numpy as np

# below this angle the trigonometric coefficients switch to Taylor series
_SMALL_ANGLE = 1e-3


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix ``[v]_x`` for a (..., 3) array."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _coefficients(theta: float) -> tuple[float, float, float, float]:
    # a = sin t / t, b = (1 - cos t) / t^2, c = a'(t) / t, d = b'(t) / t
    t2 = theta * theta
    if theta < _SMALL_ANGLE:
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        c = -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0
        d = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0
        return a, b, c, d
    s, co = np.sin(theta), np.cos(theta)
    a = s / theta
    b = (1.0 - co) / t2
    c = (theta * co - s) / (t2 * theta)
    d = (theta * s - 2.0 * (1.0 - co)) / (t2 * t2)
    return a, b, c, d


def rodrigues(rotvec: np.ndarray) -> np.ndarray:
    """Rotation matrix for one axis-angle vector (radians).

    The zero vector maps to the identity exactly.
    """
    v = np.asarray(rotvec, dtype=np.float64)
    a, b, _, _ = _coefficients(float(np.linalg.norm(v)))
    k = skew(v)
    return np.eye(3) + a * k + b * (k @ k)


def rodrigues_batch(rotvecs: np.ndarray) -> np.ndarray:
    rotvecs = np.asarray(rotvecs, dtype=np.float64).reshape(-1, 3)
    return np.stack([rodrigues(v) for v in rotvecs]) if len(rotvecs) else np.zeros((0, 3, 3))


def rodrigues_derivative(rotvec: np.ndarray) -> np.ndarray:
    """Partial derivatives ``dR/dv_i`` stacked as a (3, 3, 3) array.

    Differentiates ``R = I + a(t) K + b(t) K^2`` directly, which stays
    well conditioned at and near the zero rotation.
    """
    v = np.asarray(rotvec, dtype=np.float64)
    a, b, c, d = _coefficients(float(np.linalg.norm(v)))
    k = skew(v)
    k2 = k @ k
    out = np.empty((3, 3, 3))
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        ki = skew(e)
        out[i] = a * ki + b * (ki @ k + k @ ki) + c * v[i] * k + d * v[i] * k2
    return out
