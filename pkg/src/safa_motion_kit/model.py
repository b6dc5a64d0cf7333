"""Morphable head model: blendshapes, linear blend skinning and mesh queries.

Vertices are deformed as

    shaped = template + shapedirs @ shape + exprdirs @ expression
    posed  = shaped + posedirs @ flatten(R_j - I)           (non-root joints)
    v_i    = posed_i + sum_j w_ij ((G_j - I) posed_i + tr_j)

where ``G_j`` / ``tr_j`` are the world rotation and translation of joint
``j``'s skinning transform, composed parent-to-child about the rest joints
``J(shape)``. The last form keeps the rest pose bit-exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .rotation import rodrigues, rodrigues_derivative

logger = logging.getLogger(__name__)

NUM_LANDMARKS = 68

# container key -> human readable field name used in load errors
FIELD_NAMES = {
    "template": "template vertices",
    "faces": "faces",
    "shapedirs": "shape basis",
    "exprdirs": "expression basis",
    "posedirs": "pose-corrective basis",
    "J_regressor": "joint regressor",
    "weights": "blendweights",
    "parents": "kinematic parents",
    "landmark_faces": "landmark faces",
    "landmark_bary": "landmark barycentric weights",
    "uv_face_mask": "uv face mask",
}
_OPTIONAL_KEYS = {"posedirs"}


class ModelError(ValueError):
    """Raised when a model asset is malformed or parameters do not fit it."""


@dataclass(frozen=True, eq=False)
class MorphableModel:
    template: np.ndarray  # (v, 3)
    faces: np.ndarray  # (f, 3) int
    shapedirs: np.ndarray  # (v, 3, n_shape)
    exprdirs: np.ndarray  # (v, 3, n_expr)
    J_regressor: np.ndarray  # (k, v)
    weights: np.ndarray  # (v, k)
    parents: np.ndarray  # (k,), parents[0] == -1
    landmark_faces: np.ndarray  # (L,)
    landmark_bary: np.ndarray  # (L, 3)
    uv_face_mask: np.ndarray  # (f,) bool
    posedirs: np.ndarray | None = None  # (v, 3, 9 * (k - 1))
    pose_joints: tuple[int, ...] | None = None  # joints driven by the pose vector

    def __post_init__(self) -> None:
        arrays = {
            "template": np.asarray(self.template, dtype=np.float64),
            "faces": np.asarray(self.faces, dtype=np.int64),
            "shapedirs": np.asarray(self.shapedirs, dtype=np.float64),
            "exprdirs": np.asarray(self.exprdirs, dtype=np.float64),
            "J_regressor": np.asarray(self.J_regressor, dtype=np.float64),
            "weights": np.asarray(self.weights, dtype=np.float64),
            "parents": np.asarray(self.parents, dtype=np.int64).reshape(-1),
            "landmark_faces": np.asarray(self.landmark_faces, dtype=np.int64).reshape(-1),
            "landmark_bary": np.asarray(self.landmark_bary, dtype=np.float64),
            "uv_face_mask": np.asarray(self.uv_face_mask, dtype=bool).reshape(-1),
        }
        if self.posedirs is not None:
            arrays["posedirs"] = np.asarray(self.posedirs, dtype=np.float64)
        for name, arr in arrays.items():
            arr = np.array(arr, copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        joints = tuple(range(self.num_joints)) if self.pose_joints is None else tuple(int(j) for j in self.pose_joints)
        object.__setattr__(self, "pose_joints", joints)
        self.validate()

    @property
    def num_vertices(self) -> int:
        return self.template.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def num_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def num_shape(self) -> int:
        return self.shapedirs.shape[2]

    @property
    def num_expression(self) -> int:
        return self.exprdirs.shape[2]

    @property
    def num_pose(self) -> int:
        return 3 * len(self.pose_joints)

    @property
    def num_landmarks(self) -> int:
        return self.landmark_faces.shape[0]

    @cached_property
    def _joint_template(self) -> np.ndarray:
        return self.J_regressor @ self.template

    @cached_property
    def _joint_shapedirs(self) -> np.ndarray:
        # (k, 3, n_shape)
        return np.einsum("jv,vcm->jcm", self.J_regressor, self.shapedirs)

    @cached_property
    def landmark_vertex_ids(self) -> np.ndarray:
        return self.faces[self.landmark_faces]

    def validate(self) -> None:
        v = self.template.shape[0] if self.template.ndim == 2 else -1
        if self.template.ndim != 2 or self.template.shape[1] != 3:
            raise ModelError(f"template vertices: expected (v, 3), got {self.template.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ModelError(f"faces: expected (f, 3), got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= v):
            raise ModelError("faces: vertex index out of range")
        for name in ("shapedirs", "exprdirs"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (v, 3):
                raise ModelError(f"{FIELD_NAMES[name]}: expected ({v}, 3, n), got {arr.shape}")
        k = self.parents.shape[0]
        if k < 1:
            raise ModelError("kinematic parents: at least one joint required")
        if self.parents[0] != -1:
            raise ModelError("kinematic parents: joint 0 must be the root (parent -1)")
        for j in range(1, k):
            if not 0 <= self.parents[j] < j:
                raise ModelError(f"kinematic parents: joint {j} must have an earlier parent")
        if self.J_regressor.shape != (k, v):
            raise ModelError(f"joint regressor: expected ({k}, {v}), got {self.J_regressor.shape}")
        if not np.allclose(self.J_regressor.sum(axis=1), 1.0, atol=1e-5):
            raise ModelError("joint regressor: rows must sum to 1")
        if self.weights.shape != (v, k):
            raise ModelError(f"blendweights: expected ({v}, {k}), got {self.weights.shape}")
        if np.any(self.weights < 0) or not np.allclose(self.weights.sum(axis=1), 1.0, atol=1e-5):
            raise ModelError("blendweights: rows must be nonnegative and sum to 1")
        if self.posedirs is not None and self.posedirs.shape != (v, 3, 9 * (k - 1)):
            raise ModelError(
                f"pose-corrective basis: expected ({v}, 3, {9 * (k - 1)}), got {self.posedirs.shape}"
            )
        nl = self.landmark_faces.shape[0]
        if self.landmark_bary.shape != (nl, 3):
            raise ModelError(f"landmark barycentric weights: expected ({nl}, 3), got {self.landmark_bary.shape}")
        if nl and (self.landmark_faces.min() < 0 or self.landmark_faces.max() >= self.faces.shape[0]):
            raise ModelError("landmark faces: face index out of range")
        if not np.allclose(self.landmark_bary.sum(axis=1), 1.0, atol=1e-6):
            raise ModelError("landmark barycentric weights: rows must sum to 1")
        if self.uv_face_mask.shape != (self.faces.shape[0],):
            raise ModelError(f"uv face mask: expected ({self.faces.shape[0]},), got {self.uv_face_mask.shape}")
        if not self.pose_joints or len(set(self.pose_joints)) != len(self.pose_joints):
            raise ModelError("pose joints: must be a non-empty list of distinct joints")
        if min(self.pose_joints) < 0 or max(self.pose_joints) >= k:
            raise ModelError("pose joints: joint index out of range")


@dataclass(frozen=True, eq=False)
class ParamSet:
    """Shape, expression, pose (axis-angle, radians) and weak-perspective camera."""

    shape: np.ndarray
    expression: np.ndarray
    pose: np.ndarray
    camera_scale: float = 1.0
    camera_translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self) -> None:
        for name in ("shape", "expression", "pose", "camera_translation"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "camera_scale", float(self.camera_scale))
        if self.camera_translation.shape != (2,):
            raise ModelError("camera_translation must have 2 entries")
        if not self.camera_scale > 0:
            raise ModelError(f"camera_scale must be > 0, got {self.camera_scale}")

    @classmethod
    def zeros(cls, model: MorphableModel, scale: float = 1.0) -> "ParamSet":
        return cls(np.zeros(model.num_shape), np.zeros(model.num_expression), np.zeros(model.num_pose), scale)

    @property
    def global_rotation(self) -> np.ndarray:
        return self.pose[:3]

    def replace(self, **changes: Any) -> "ParamSet":
        values = {
            "shape": self.shape,
            "expression": self.expression,
            "pose": self.pose,
            "camera_scale": self.camera_scale,
            "camera_translation": self.camera_translation,
        }
        values.update(changes)
        return ParamSet(**values)

    def check(self, model: MorphableModel) -> None:
        expected = (model.num_shape, model.num_expression, model.num_pose)
        got = (self.shape.size, self.expression.size, self.pose.size)
        if expected != got:
            raise ModelError(f"parameter dimensions (shape, expression, pose) {got} do not match model {expected}")

    def to_dict(self) -> dict:
        return {
            "shape": self.shape.tolist(),
            "expression": self.expression.tolist(),
            "pose": self.pose.tolist(),
            "camera_scale": self.camera_scale,
            "camera_translation": self.camera_translation.tolist(),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "ParamSet":
        try:
            return cls(
                np.asarray(record["shape"], dtype=np.float64),
                np.asarray(record["expression"], dtype=np.float64),
                np.asarray(record["pose"], dtype=np.float64),
                float(record["camera_scale"]),
                np.asarray(record["camera_translation"], dtype=np.float64),
            )
        except KeyError as exc:
            raise ModelError(f"parameter record missing field {exc.args[0]!r}") from None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return (
            np.array_equal(self.shape, other.shape)
            and np.array_equal(self.expression, other.expression)
            and np.array_equal(self.pose, other.pose)
            and self.camera_scale == other.camera_scale
            and np.array_equal(self.camera_translation, other.camera_translation)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray


# ---------------------------------------------------------------------------
# container I/O


def load_model(path: str | Path, pose_joints: Sequence[int] | None = None) -> MorphableModel:
    """Load a model from a zip archive of NPY tensors (``.npz``)."""
    path = Path(path)
    if not path.exists():
        raise ModelError(f"model asset not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        data = {key: archive[key] for key in archive.files}
    for key, label in FIELD_NAMES.items():
        if key not in data and key not in _OPTIONAL_KEYS:
            raise ModelError(f"{label} absent (key {key!r})")
    kwargs = {key: data[key] for key in FIELD_NAMES if key in data}
    if "pose_joints" in data and pose_joints is None:
        pose_joints = data["pose_joints"].tolist()
    model = MorphableModel(**kwargs, pose_joints=None if pose_joints is None else tuple(pose_joints))
    logger.debug("loaded model %s: v=%d f=%d k=%d", path, model.num_vertices, model.num_faces, model.num_joints)
    return model


def save_model(model: MorphableModel, path: str | Path) -> None:
    """Write the container format: little-endian float64 tensors, int32 indices."""
    tensors = {
        "template": model.template.astype("<f8"),
        "faces": model.faces.astype("<i4"),
        "shapedirs": model.shapedirs.astype("<f8"),
        "exprdirs": model.exprdirs.astype("<f8"),
        "J_regressor": model.J_regressor.astype("<f8"),
        "weights": model.weights.astype("<f8"),
        "parents": model.parents.astype("<i4"),
        "landmark_faces": model.landmark_faces.astype("<i4"),
        "landmark_bary": model.landmark_bary.astype("<f8"),
        "uv_face_mask": model.uv_face_mask.astype(bool),
        "pose_joints": np.asarray(model.pose_joints, dtype="<i4"),
    }
    if model.posedirs is not None:
        tensors["posedirs"] = model.posedirs.astype("<f8")
    with open(path, "wb") as fh:
        np.savez(fh, **tensors)


def make_toy_model(
    seed: int,
    v: int = 12,
    k_joints: int = 2,
    dims: tuple[int, int] = (4, 2),
    pose_correctives: bool = True,
    num_landmarks: int = NUM_LANDMARKS,
) -> MorphableModel:
    """Small synthetic head-like dome, deterministic in ``seed``.

    The dome bulges towards +z (the camera), so it is front-facing at zero
    pose. The root joint sits at the origin for every shape vector.
    """
    if v < 4:
        raise ModelError(f"toy model needs at least 4 vertices, got {v}")
    if k_joints < 1:
        raise ModelError(f"toy model needs at least one joint, got {k_joints}")
    from scipy.spatial import Delaunay

    rng = np.random.default_rng(seed)
    golden = np.pi * (3.0 - np.sqrt(5.0))
    idx = np.arange(v) + 0.5
    radius = 0.6 * np.sqrt(idx / v) * (1.0 + rng.uniform(-0.05, 0.05, v))
    angle = idx * golden + rng.uniform(-0.2, 0.2, v)
    xy = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    z = 0.4 * np.sqrt(np.clip(1.0 - (radius / 0.7) ** 2, 0.0, None))
    template = np.column_stack([xy, z])

    faces = Delaunay(xy).simplices.astype(np.int64)
    p0, p1, p2 = xy[faces[:, 0]], xy[faces[:, 1]], xy[faces[:, 2]]
    area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    faces[area < 0] = faces[area < 0][:, [0, 2, 1]]
    faces = faces[np.lexsort(faces.T[::-1])]

    regressor = np.zeros((k_joints, v))
    regressor[0] = 1.0 / v
    for j in range(1, k_joints):
        picks = rng.choice(v, size=min(3, v), replace=False)
        regressor[j, picks] = rng.dirichlet(np.ones(len(picks)))
    regressor /= regressor.sum(axis=1, keepdims=True)
    template = template - regressor[0] @ template

    n_shape, n_expr = dims
    shapedirs = rng.normal(0.0, 0.02, (v, 3, n_shape))
    shapedirs -= np.einsum("v,vcm->cm", regressor[0], shapedirs)[None]
    exprdirs = rng.normal(0.0, 0.02, (v, 3, n_expr))
    weights = rng.dirichlet(np.ones(k_joints), size=v)
    weights /= weights.sum(axis=1, keepdims=True)
    parents = np.array([-1] + [int(rng.integers(0, j)) for j in range(1, k_joints)], dtype=np.int64)
    posedirs = rng.normal(0.0, 0.005, (v, 3, 9 * (k_joints - 1))) if pose_correctives else None

    landmark_faces = rng.integers(0, len(faces), num_landmarks)
    landmark_bary = rng.dirichlet(np.ones(3), size=num_landmarks)
    landmark_bary /= landmark_bary.sum(axis=1, keepdims=True)

    return MorphableModel(
        template=template,
        faces=faces,
        shapedirs=shapedirs,
        exprdirs=exprdirs,
        J_regressor=regressor,
        weights=weights,
        parents=parents,
        landmark_faces=landmark_faces,
        landmark_bary=landmark_bary,
        uv_face_mask=np.ones(len(faces), dtype=bool),
        posedirs=posedirs,
    )


# ---------------------------------------------------------------------------
# decoding


def regress_joints(model: MorphableModel, shape: np.ndarray) -> np.ndarray:
    """Rest joint positions ``J(shape)`` from the shaped, expression-free mesh."""
    shape = np.asarray(shape, dtype=np.float64).reshape(-1)
    if shape.size != model.num_shape:
        raise ModelError(f"shape has {shape.size} entries, model expects {model.num_shape}")
    return model._joint_template + model._joint_shapedirs @ shape


def _local_rotations(model: MorphableModel, pose: np.ndarray) -> np.ndarray:
    rot = np.broadcast_to(np.eye(3), (model.num_joints, 3, 3)).copy()
    for block, joint in enumerate(model.pose_joints):
        rot[joint] = rodrigues(pose[3 * block : 3 * block + 3])
    return rot


@dataclass
class _SkinState:
    local: np.ndarray  # (k, 3, 3)
    world: np.ndarray  # (k, 3, 3)
    trans: np.ndarray  # (k, 3)
    joints: np.ndarray  # (k, 3)


def _skin_state(model: MorphableModel, params: ParamSet) -> _SkinState:
    local = _local_rotations(model, params.pose)
    joints = regress_joints(model, params.shape)
    k = model.num_joints
    world = np.empty((k, 3, 3))
    trans = np.empty((k, 3))
    eye = np.eye(3)
    for j in range(k):
        p = model.parents[j]
        # (I - R) J is exactly zero for the identity rotation
        offset = (eye - local[j]) @ joints[j]
        if p < 0:
            world[j] = local[j]
            trans[j] = offset
        else:
            world[j] = world[p] @ local[j]
            trans[j] = world[p] @ offset + trans[p]
    return _SkinState(local, world, trans, joints)


def _pose_feature(model: MorphableModel, local: np.ndarray) -> np.ndarray:
    return (local[1:] - np.eye(3)).reshape(-1)


def _posed_vertices(model: MorphableModel, params: ParamSet, state: _SkinState, ids: np.ndarray | slice) -> np.ndarray:
    verts = model.template[ids] + model.shapedirs[ids] @ params.shape + model.exprdirs[ids] @ params.expression
    if model.posedirs is not None and model.num_joints > 1:
        verts = verts + model.posedirs[ids] @ _pose_feature(model, state.local)
    return verts


def _skin(weights: np.ndarray, posed: np.ndarray, state: _SkinState) -> np.ndarray:
    rel = state.world - np.eye(3)
    moved = np.einsum("kab,vb->vka", rel, posed) + state.trans[None]
    return posed + np.einsum("vk,vka->va", weights, moved)


def decode(model: MorphableModel, params: ParamSet) -> Mesh:
    """Posed mesh ``M(shape, expression, pose)``; the rest pose is returned bit-exactly."""
    params.check(model)
    state = _skin_state(model, params)
    posed = _posed_vertices(model, params, state, slice(None))
    return Mesh(_skin(model.weights, posed, state), model.faces)


def decode_jacobian(
    model: MorphableModel, params: ParamSet, vertex_ids: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Posed vertices and their analytic derivatives.

    Returns ``(verts (n, 3), jac (n, 3, D))`` with ``D = n_shape + n_expr +
    n_pose`` ordered as (shape, expression, pose). Forward-mode
    differentiation through the blendshapes, pose correctives and the
    kinematic chain.
    """
    params.check(model)
    ids = np.arange(model.num_vertices) if vertex_ids is None else np.asarray(vertex_ids, dtype=np.int64)
    ns, ne, npose = model.num_shape, model.num_expression, model.num_pose
    dim = ns + ne + npose
    k = model.num_joints
    state = _skin_state(model, params)
    posed = _posed_vertices(model, params, state, ids)

    # tangents, leading axis = parameter
    d_posed = np.zeros((dim, len(ids), 3))
    d_posed[:ns] = np.moveaxis(model.shapedirs[ids], 2, 0)
    d_posed[ns : ns + ne] = np.moveaxis(model.exprdirs[ids], 2, 0)
    d_joints = np.zeros((dim, k, 3))
    d_joints[:ns] = np.moveaxis(model._joint_shapedirs, 2, 0)
    d_local = np.zeros((dim, k, 3, 3))
    for block, joint in enumerate(model.pose_joints):
        d_local[ns + ne + 3 * block : ns + ne + 3 * block + 3, joint] = rodrigues_derivative(
            params.pose[3 * block : 3 * block + 3]
        )
    if model.posedirs is not None and k > 1:
        d_feat = d_local[:, 1:].reshape(dim, -1)
        d_posed += np.einsum("vcp,dp->dvc", model.posedirs[ids], d_feat)

    eye = np.eye(3)
    d_world = np.empty((dim, k, 3, 3))
    d_trans = np.empty((dim, k, 3))
    for j in range(k):
        p = model.parents[j]
        rest = eye - state.local[j]
        # d[(I - R) J] = -dR J + (I - R) dJ
        d_offset = -d_local[:, j] @ state.joints[j] + d_joints[:, j] @ rest.T
        if p < 0:
            d_world[:, j] = d_local[:, j]
            d_trans[:, j] = d_offset
        else:
            offset = rest @ state.joints[j]
            d_world[:, j] = d_world[:, p] @ state.local[j] + state.world[p] @ d_local[:, j]
            d_trans[:, j] = d_world[:, p] @ offset + d_offset @ state.world[p].T + d_trans[:, p]

    w = model.weights[ids]
    rel = state.world - eye
    d_moved = (
        np.einsum("dkab,vb->dvka", d_world, posed)
        + np.einsum("kab,dvb->dvka", rel, d_posed)
        + d_trans[:, None]
    )
    d_verts = d_posed + np.einsum("vk,dvka->dva", w, d_moved)
    verts = _skin(w, posed, state)
    return verts, np.moveaxis(d_verts, 0, 2)


# ---------------------------------------------------------------------------
# mesh queries


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Unnormalised face normals (length = twice the triangle area)."""
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    return np.cross(v1 - v0, v2 - v0)


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted unit vertex normals; isolated vertices get the zero vector."""
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.asarray(mesh.faces, dtype=np.int64)
    fn = face_normals(verts, faces)
    acc = np.zeros_like(verts)
    for i in range(3):
        np.add.at(acc, faces[:, i], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norm, out=np.zeros_like(acc), where=norm > 0)


def barycentric_points(vertices: np.ndarray, faces: np.ndarray, face_ids: np.ndarray, bary: np.ndarray) -> np.ndarray:
    face_ids = np.asarray(face_ids, dtype=np.int64)
    if face_ids.size and (face_ids.min() < 0 or face_ids.max() >= len(faces)):
        raise ModelError("landmark face index out of range")
    corners = vertices[faces[face_ids]]  # (L, 3, 3)
    return np.einsum("lc,lcd->ld", bary, corners)


def select_landmarks(model: MorphableModel, mesh: Mesh) -> np.ndarray:
    """Surface landmarks as barycentric combinations of embedding faces."""
    return barycentric_points(np.asarray(mesh.vertices), np.asarray(mesh.faces), model.landmark_faces, model.landmark_bary)
