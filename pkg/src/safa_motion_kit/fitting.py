"""Landmark fitting of morphable-model parameters.

The objective is the L1 landmark reprojection error plus L2 penalties on
shape and expression. Steps come from Levenberg-Marquardt on a
Huber-smoothed copy of the L1 term; a step is kept only if it lowers the
true objective, so the reported loss trace never increases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import ModelError, MorphableModel, ParamSet, barycentric_points, decode, decode_jacobian, select_landmarks
from .render import project

logger = logging.getLogger(__name__)


class FitDivergedError(RuntimeError):
    def __init__(self, message: str, last_params: ParamSet):
        super().__init__(message)
        self.last_params = last_params


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    points: np.ndarray  # (L, 2) normalised
    confidence: np.ndarray | None = None  # (L,) in [0, 1]

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"landmarks must be (L, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmarks must be finite")
        conf = np.ones(len(pts)) if self.confidence is None else np.asarray(self.confidence, dtype=np.float64)
        if conf.shape != (len(pts),) or np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("confidence must be L values in [0, 1]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "confidence", conf)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class FitOptions:
    lambda_shape: float = 1e-2
    lambda_expression: float = 8e-3
    max_iterations: int = 100  # per stage
    damping: float = 1e-3  # initial Marquardt factor
    tolerance: float = 1e-12  # relative loss decrease that counts as converged
    huber_delta: float = 1e-3
    staged: bool = True

    def __post_init__(self) -> None:
        if self.lambda_shape < 0 or self.lambda_expression < 0:
            raise ValueError("regularisation weights must be nonnegative")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")

    @classmethod
    def from_dict(cls, record: dict) -> "FitOptions":
        return cls(**{k: v for k, v in record.items() if k in cls.__dataclass_fields__})


@dataclass
class FitResult:
    params: ParamSet
    loss: float
    iterations: int
    trace: list[float] = field(default_factory=list)
    converged: bool = False

    def report(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "loss": self.loss,
            "iterations": self.iterations,
            "converged": self.converged,
            "loss_trace": list(self.trace),
        }


def _check_landmarks(model: MorphableModel, landmarks: LandmarkSet) -> None:
    if len(landmarks) != model.num_landmarks:
        raise ValueError(f"got {len(landmarks)} landmarks, model embeds {model.num_landmarks}")


def project_landmarks(model: MorphableModel, params: ParamSet) -> np.ndarray:
    points, _ = project(select_landmarks(model, decode(model, params)), params.camera_scale, params.camera_translation)
    return points


def reprojection_residuals(model: MorphableModel, params: ParamSet, landmarks: LandmarkSet) -> np.ndarray:
    """``k_i - Proj(l_i)`` per landmark, (L, 2)."""
    _check_landmarks(model, landmarks)
    return landmarks.points - project_landmarks(model, params)


def residual_jacobian(model: MorphableModel, params: ParamSet, landmarks: LandmarkSet) -> tuple[np.ndarray, np.ndarray]:
    """Residuals (L, 2) and their Jacobian (L, 2, D).

    Columns are ordered (shape, expression, pose, scale, tx, ty).
    """
    _check_landmarks(model, landmarks)
    ids = model.landmark_vertex_ids  # (L, 3)
    uniq, inverse = np.unique(ids, return_inverse=True)
    verts, dverts = decode_jacobian(model, params, uniq)
    local_faces = inverse.reshape(ids.shape)
    lmk = barycentric_points(verts, local_faces, np.arange(len(ids)), model.landmark_bary)
    dlmk = np.einsum("lc,lcad->lad", model.landmark_bary, dverts[local_faces])
    s = params.camera_scale
    proj = s * lmk[:, :2] + params.camera_translation
    jac = np.concatenate(
        [
            s * dlmk[:, :2],
            lmk[:, :2, None],
            np.broadcast_to(np.eye(2), (len(lmk), 2, 2)),
        ],
        axis=2,
    )
    return landmarks.points - proj, -jac


def _regularisation(params: ParamSet, lam_shape: float, lam_expr: float) -> float:
    return lam_shape * float(params.shape @ params.shape) + lam_expr * float(params.expression @ params.expression)


def loss_3dmm(
    model: MorphableModel,
    params: ParamSet,
    landmarks: LandmarkSet,
    lambda_shape: float = 1e-2,
    lambda_expression: float = 8e-3,
) -> float:
    """Confidence-weighted L1 reprojection error plus L2 shape/expression penalty."""
    if lambda_shape < 0 or lambda_expression < 0:
        raise ValueError("regularisation weights must be nonnegative")
    r = reprojection_residuals(model, params, landmarks)
    data = float(np.sum(landmarks.confidence[:, None] * np.abs(r)))
    return data + _regularisation(params, lambda_shape, lambda_expression)


def huber(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r / delta, a - 0.5 * delta)


def surrogate_loss(
    model: MorphableModel, params: ParamSet, landmarks: LandmarkSet, options: FitOptions | None = None
) -> float:
    """Huber-smoothed version of :func:`loss_3dmm`."""
    opts = options or FitOptions()
    r = reprojection_residuals(model, params, landmarks)
    data = float(np.sum(landmarks.confidence[:, None] * huber(r, opts.huber_delta)))
    return data + _regularisation(params, opts.lambda_shape, opts.lambda_expression)


def surrogate_gradient(
    model: MorphableModel, params: ParamSet, landmarks: LandmarkSet, options: FitOptions | None = None
) -> np.ndarray:
    """Analytic gradient of :func:`surrogate_loss` in (shape, expr, pose, s, t) order."""
    opts = options or FitOptions()
    r, jac = residual_jacobian(model, params, landmarks)
    psi = np.clip(r / opts.huber_delta, -1.0, 1.0) * landmarks.confidence[:, None]
    grad = np.einsum("la,lad->d", psi, jac)
    ns, ne = model.num_shape, model.num_expression
    grad[:ns] += 2.0 * opts.lambda_shape * params.shape
    grad[ns : ns + ne] += 2.0 * opts.lambda_expression * params.expression
    return grad


# ---------------------------------------------------------------------------
# solver


def _pack(params: ParamSet) -> np.ndarray:
    # scale is optimised in log space to stay positive
    return np.concatenate(
        [params.shape, params.expression, params.pose, [np.log(params.camera_scale)], params.camera_translation]
    )


def _unpack(model: MorphableModel, x: np.ndarray) -> ParamSet:
    ns, ne, npose = model.num_shape, model.num_expression, model.num_pose
    o = ns + ne + npose
    return ParamSet(x[:ns], x[ns : ns + ne], x[ns + ne : o], float(np.exp(x[o])), x[o + 1 : o + 3])


class _Problem:
    def __init__(self, model: MorphableModel, landmarks: LandmarkSet, opts: FitOptions):
        self.model = model
        self.landmarks = landmarks
        self.opts = opts
        ns, ne = model.num_shape, model.num_expression
        dim = ns + ne + model.num_pose + 3
        self.reg = np.zeros(dim)
        self.reg[:ns] = opts.lambda_shape
        self.reg[ns : ns + ne] = opts.lambda_expression

    def loss(self, x: np.ndarray) -> float:
        params = _unpack(self.model, x)
        return loss_3dmm(self.model, params, self.landmarks, self.opts.lambda_shape, self.opts.lambda_expression)

    def linearise(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradient and Gauss-Newton Hessian of the Huber model in packed coordinates."""
        params = _unpack(self.model, x)
        r, jac = residual_jacobian(self.model, params, self.landmarks)
        o = self.model.num_shape + self.model.num_expression + self.model.num_pose
        jac = jac.copy()
        jac[:, :, o] *= params.camera_scale  # d/dlog(s)
        r = r.reshape(-1)
        jac = jac.reshape(len(r), -1)
        conf = np.repeat(self.landmarks.confidence, 2)
        delta = self.opts.huber_delta
        a = np.abs(r)
        # IRLS weights: Huber's psi(r) / r, a quadratic majoriser of the smoothed L1
        weight = conf / np.maximum(a, delta)
        psi = conf * np.clip(r / delta, -1.0, 1.0)
        grad = jac.T @ psi + 2.0 * self.reg * x
        hess = jac.T @ (weight[:, None] * jac) + np.diag(2.0 * self.reg)
        return grad, hess


def _solve_stage(
    problem: _Problem, x: np.ndarray, free: np.ndarray, trace: list[float], max_iter: int
) -> tuple[np.ndarray, int, bool]:
    opts = problem.opts
    loss = trace[-1]
    mu = opts.damping
    accepted = 0
    converged = False
    for _ in range(max_iter):
        grad, hess = problem.linearise(x)
        g = grad[free]
        h = hess[np.ix_(free, free)]
        diag = np.diag(h).copy() + 1e-12
        step_taken = False
        while mu < 1e12:
            try:
                dx = np.linalg.solve(h + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= 4.0
                continue
            candidate = x.copy()
            candidate[free] += dx
            try:
                new_loss = problem.loss(candidate)
            except ModelError:
                new_loss = np.inf
            if np.isnan(new_loss):
                raise FitDivergedError("loss became NaN", _unpack(problem.model, x))
            if new_loss < loss:
                step_taken = True
                break
            mu *= 4.0
        if not step_taken:
            converged = True
            break
        decrease = loss - new_loss
        x, loss = candidate, new_loss
        trace.append(loss)
        accepted += 1
        mu = max(mu / 3.0, 1e-12)
        if decrease <= opts.tolerance * (1.0 + loss):
            converged = True
            break
    return x, accepted, converged


def initial_params(model: MorphableModel, landmarks: LandmarkSet) -> ParamSet:
    """Zero shape/expression/pose with (s, t) matched to the landmark spread."""
    _check_landmarks(model, landmarks)
    rest = ParamSet.zeros(model)
    ref = select_landmarks(model, decode(model, rest))[:, :2]
    ref_c = ref - ref.mean(axis=0)
    obs_c = landmarks.points - landmarks.points.mean(axis=0)
    spread = float(np.sqrt(np.sum(ref_c**2)))
    scale = float(np.sqrt(np.sum(obs_c**2))) / spread if spread > 0 else 1.0
    scale = scale if scale > 0 else 1.0
    return rest.replace(
        camera_scale=scale, camera_translation=landmarks.points.mean(axis=0) - scale * ref.mean(axis=0)
    )


def fit_params(
    model: MorphableModel,
    landmarks: LandmarkSet,
    init: ParamSet | None = None,
    options: FitOptions | None = None,
) -> FitResult:
    """Fit parameters to 2D landmarks.

    With ``options.staged`` the camera and global rotation are fitted
    first, then every parameter. Deterministic for fixed inputs.
    """
    opts = options or FitOptions()
    init = initial_params(model, landmarks) if init is None else init
    init.check(model)
    _check_landmarks(model, landmarks)
    problem = _Problem(model, landmarks, opts)
    x = _pack(init)
    start = loss_3dmm(model, init, landmarks, opts.lambda_shape, opts.lambda_expression)
    if not np.isfinite(start):
        raise FitDivergedError("initial loss is not finite", init)
    trace = [start]

    ns, ne, npose = model.num_shape, model.num_expression, model.num_pose
    dim = len(x)
    camera = np.arange(dim - 3, dim)
    stages = []
    if opts.staged:
        rigid = camera
        if model.pose_joints[0] == 0:
            rigid = np.concatenate([np.arange(ns + ne, ns + ne + 3), camera])
        stages.append(rigid)
    stages.append(np.arange(dim))

    total = 0
    converged = False
    for free in stages:
        x, n, converged = _solve_stage(problem, x, free, trace, opts.max_iterations)
        total += n
    # no accepted step: hand back the caller's parameters untouched
    params = init if total == 0 else _unpack(model, x)
    logger.debug("fit finished after %d steps, loss %.6g", total, trace[-1])
    return FitResult(params, trace[-1], total, trace, converged)
