"""End-to-end reenactment and relative-transfer runs over files on disk.

Every run reads a JSON config, consumes precomputed predictor outputs
(keypoints, mask logits, occlusion maps, GADE weights) as fixtures and
writes each intermediate buffer next to the final image. Failures are
re-raised as :class:`StageError` carrying the stage that produced them.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from . import io
from .fitting import FitDivergedError, FitOptions, LandmarkSet, fit_params, project_landmarks
from .flowviz import visualize_flow
from .generator import DEFAULT_SOFTMAX_SCALE, GadeWeights, contextual_attention, gade_apply, gade_modulation, normalize_params
from .metrics import report as metric_report
from .model import ModelError, MorphableModel, ParamSet, decode, load_model, make_toy_model, save_model, vertex_normals
from .motion import (
    DEFAULT_HEATMAP_SIGMA,
    DEFAULT_NUM_KEYPOINTS,
    KeypointSet,
    affine_motions,
    fuse_dense_motion,
    heatmap_stack,
    softmax_masks,
    warp,
)
from .render import ImageGrid, rasterize, render_3d_motion, render_normal_map, render_reenactment
from .transfer import relative_3d_motion, relative_affine_motions, relative_params, select_reference_frame

logger = logging.getLogger(__name__)

DEFAULT_GRID = (256, 256)
_PATH_FIELDS = (
    "model",
    "source_image",
    "source_landmarks",
    "source_params",
    "driving_image",
    "driving_landmarks",
    "driving_params",
    "driving_sequence",
    "driving_landmark_sequence",
    "keypoints_source",
    "keypoints_driving",
    "keypoints_sequence",
    "mask_logits",
    "occlusion_gade",
    "occlusion_ca",
    "gade_weights",
    "landmarks",
    "init",
)


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


@contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except (ValueError, OSError, KeyError, RuntimeError, FitDivergedError, ModelError) as exc:
        raise StageError(name, str(exc) or type(exc).__name__) from exc


@dataclass
class PipelineConfig:
    """Run description; relative paths resolve against ``base_dir``."""

    base_dir: Path = field(default_factory=Path.cwd)
    model: Path | None = None
    source_image: Path | None = None
    source_landmarks: Path | None = None
    source_params: Path | None = None
    driving_image: Path | None = None
    driving_landmarks: Path | None = None
    driving_params: Path | None = None
    driving_sequence: Path | None = None
    driving_landmark_sequence: Path | None = None
    keypoints_source: Path | None = None
    keypoints_driving: Path | None = None
    keypoints_sequence: Path | None = None
    mask_logits: Path | None = None
    occlusion_gade: Path | None = None
    occlusion_ca: Path | None = None
    gade_weights: Path | None = None
    landmarks: Path | None = None
    init: Path | None = None
    reference: int | str = "auto"
    pose_joints: list[int] | None = None
    grid: tuple[int, int] = DEFAULT_GRID
    num_keypoints: int = DEFAULT_NUM_KEYPOINTS
    heatmap_sigma: float = DEFAULT_HEATMAP_SIGMA
    patch: int = 3
    softmax_scale: float = DEFAULT_SOFTMAX_SCALE
    fit: FitOptions = field(default_factory=FitOptions)
    output: Path = Path("output")
    jobs: int = 1

    def __post_init__(self) -> None:
        self.base_dir = Path(self.base_dir)
        for name in _PATH_FIELDS:
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, self._resolve(value))
        self.output = self._resolve(self.output)
        self.grid = tuple(int(g) for g in self.grid)
        if isinstance(self.fit, dict):
            self.fit = FitOptions.from_dict(self.fit)
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise StageError("config", f"grid must be two positive sizes, got {self.grid}")
        if self.num_keypoints < 1:
            raise StageError("config", f"num_keypoints must be >= 1, got {self.num_keypoints}")
        if self.jobs < 1:
            raise StageError("config", f"jobs must be >= 1, got {self.jobs}")
        if self.heatmap_sigma <= 0 or self.softmax_scale <= 0 or self.patch < 1:
            raise StageError("config", "heatmap_sigma, softmax_scale and patch must be positive")
        for name in _PATH_FIELDS:
            path = getattr(self, name)
            if path is not None and not path.is_file():
                raise StageError("config", f"{name}: file not found: {path}")

    def _resolve(self, value: str | Path) -> Path:
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path

    @classmethod
    def from_dict(cls, record: dict, base_dir: str | Path = ".", **overrides: Any) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(record) - known)
        if unknown:
            raise StageError("config", f"unknown config keys: {unknown}")
        values = dict(record)
        values.update({k: v for k, v in overrides.items() if v is not None})
        values["base_dir"] = base_dir
        return cls(**values)

    @classmethod
    def from_json(cls, path: str | Path, **overrides: Any) -> "PipelineConfig":
        path = Path(path)
        with stage("config"):
            try:
                record = io.read_json(path)
            except json.JSONDecodeError as exc:
                raise StageError("config", f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(record, dict):
            raise StageError("config", f"{path}: top level must be an object")
        # CLI overrides are relative to the working directory
        if overrides.get("output") is not None:
            overrides["output"] = Path(overrides["output"]).resolve()
        return cls.from_dict(record, path.parent.resolve(), **overrides)

    @property
    def image_grid(self) -> ImageGrid:
        return ImageGrid(*self.grid)

    def require(self, *names: str) -> None:
        missing = [n for n in names if getattr(self, n) is None]
        if missing:
            raise StageError("config", f"missing required entries: {missing}")


# ---------------------------------------------------------------- core


@dataclass
class Fixtures:
    """Predictor outputs for one frame."""

    keypoints_source: KeypointSet
    keypoints_driving: KeypointSet
    mask_logits: np.ndarray  # (K + 2, H, W)
    occlusion_gade: np.ndarray  # (h, w)
    occlusion_ca: np.ndarray  # (h, w)
    gade_weights: GadeWeights


def _pool_factors(grid: ImageGrid, occlusion: np.ndarray) -> tuple[int, int]:
    h, w = occlusion.shape
    if grid.height % h or grid.width % w:
        raise ValueError(f"occlusion map {occlusion.shape} does not evenly divide the grid {grid.shape}")
    return grid.height // h, grid.width // w


def average_pool(image: np.ndarray, fy: int, fx: int) -> np.ndarray:
    h, w = image.shape[0] // fy, image.shape[1] // fx
    return image.reshape(h, fy, w, fx, -1).mean(axis=(1, 3))


def upsample_nearest(image: np.ndarray, fy: int, fx: int) -> np.ndarray:
    return np.repeat(np.repeat(image, fy, axis=0), fx, axis=1)


def _check_fixtures(fx: Fixtures, grid: ImageGrid, num_keypoints: int) -> None:
    k = len(fx.keypoints_source)
    if k != num_keypoints or len(fx.keypoints_driving) != num_keypoints:
        raise ValueError(
            f"expected {num_keypoints} keypoints, got {k} source / {len(fx.keypoints_driving)} driving"
        )
    if fx.mask_logits.shape != (k + 2,) + grid.shape:
        raise ValueError(f"mask logits {fx.mask_logits.shape} do not match {(k + 2,) + grid.shape}")
    if fx.occlusion_gade.shape != fx.occlusion_ca.shape or fx.occlusion_gade.ndim != 2:
        raise ValueError("occlusion maps must be 2D and of equal shape")
    for occ in (fx.occlusion_gade, fx.occlusion_ca):
        if np.any(occ < 0) or np.any(occ > 1):
            raise ValueError("occlusion maps must lie in [0, 1]")


def animate(
    model: MorphableModel,
    source_image: np.ndarray,
    source: ParamSet,
    target: ParamSet,
    affine_fields: np.ndarray,
    heatmap_driving: KeypointSet,
    fixtures: Fixtures,
    grid: ImageGrid,
    sigma: float = DEFAULT_HEATMAP_SIGMA,
    patch: int = 3,
    softmax_scale: float = DEFAULT_SOFTMAX_SCALE,
) -> dict[str, np.ndarray]:
    """Shared body of both runs: ``target`` must already carry the source shape."""
    if source_image.shape[:2] != grid.shape:
        raise StageError("load", f"source image {source_image.shape[:2]} does not match grid {grid.shape}")
    with stage("render"):
        reenact = render_reenactment(model, source, target, source_image, grid)
        normal_s = render_normal_map(model, source, grid)
        normal_d = render_normal_map(model, target, grid)
        motion_3d, coverage = render_3d_motion(model, source, target, grid)
    with stage("motion"):
        heatmaps = heatmap_stack(fixtures.keypoints_source, heatmap_driving, normal_d.data, normal_s.data, grid, sigma)
    with stage("fusion"):
        masks = softmax_masks(fixtures.mask_logits)
        dense = fuse_dense_motion(masks, motion_3d, affine_fields, grid)
    with stage("warp"):
        warped = warp(source_image, dense)
    with stage("gade"):
        fy, fx = _pool_factors(grid, fixtures.occlusion_gade)
        pooled = average_pool(warped, fy, fx)
        gamma, delta = gade_modulation(normalize_params(target, fixtures.gade_weights.avg_norms), fixtures.gade_weights)
        feat_gade = gade_apply(pooled, gamma, delta, fixtures.occlusion_gade)
    with stage("attention"):
        feat_ca = contextual_attention(feat_gade, fixtures.occlusion_ca, patch, softmax_scale)
    reconstructed = warped + upsample_nearest(feat_ca - pooled, fy, fx)
    return {
        "reenactment_3d": reenact.data * reenact.coverage[..., None],
        "coverage_3d": coverage,
        "normal_source": normal_s.data,
        "normal_driving": normal_d.data,
        "motion_3d": motion_3d,
        "heatmaps": heatmaps,
        "affine_motions": affine_fields,
        "masks": masks,
        "dense_motion": dense,
        "warped": warped,
        "features": pooled,
        "features_gade": feat_gade,
        "features_ca": feat_ca,
        "reconstructed": reconstructed,
    }


def reenact_arrays(
    model: MorphableModel,
    source_image: np.ndarray,
    source: ParamSet,
    driving: ParamSet,
    fixtures: Fixtures,
    grid: ImageGrid,
    sigma: float = DEFAULT_HEATMAP_SIGMA,
    patch: int = 3,
    softmax_scale: float = DEFAULT_SOFTMAX_SCALE,
) -> dict[str, np.ndarray]:
    """Self-reenactment on in-memory arrays; the driving mesh keeps the source shape."""
    with stage("load"):
        source.check(model)
        driving.check(model)
        _check_fixtures(fixtures, grid, len(fixtures.keypoints_source))
    target = driving.replace(shape=source.shape)
    with stage("motion"):
        affine = affine_motions(fixtures.keypoints_source, fixtures.keypoints_driving, grid)
    out = animate(
        model, source_image, source, target, affine, fixtures.keypoints_driving, fixtures, grid, sigma, patch, softmax_scale
    )
    return out


def transfer_arrays(
    model: MorphableModel,
    source_image: np.ndarray,
    source: ParamSet,
    reference: ParamSet,
    target: ParamSet,
    keypoints_reference: KeypointSet,
    fixtures: Fixtures,
    grid: ImageGrid,
    sigma: float = DEFAULT_HEATMAP_SIGMA,
    patch: int = 3,
    softmax_scale: float = DEFAULT_SOFTMAX_SCALE,
) -> tuple[ParamSet, dict[str, np.ndarray]]:
    """One relative-transfer frame; ``fixtures.keypoints_driving`` is the target frame."""
    kp_s, kp_t = fixtures.keypoints_source, fixtures.keypoints_driving
    with stage("load"):
        _check_fixtures(fixtures, grid, len(kp_s))
        if len(keypoints_reference) != len(kp_s):
            raise ValueError("reference keypoints do not match the source count")
    with stage("transfer"):
        transferred = relative_params(source, reference, target)
        transferred.check(model)
        affine = relative_affine_motions(kp_s, keypoints_reference, kp_t, grid)
        moved = KeypointSet(kp_s.points + (kp_t.points - keypoints_reference.points), kp_t.jacobians)
    out = animate(model, source_image, source, transferred, affine, moved, fixtures, grid, sigma, patch, softmax_scale)
    with stage("render"):
        out["motion_3d"], _ = relative_3d_motion(model, source, transferred, grid)
    return transferred, out


# ---------------------------------------------------------------- visuals

_KEYPOINT_MARK = 2  # marker half-width in pixels


def palette(n: int) -> np.ndarray:
    """(n, 3) distinct colours; entry 0 is black and entry 1 white."""
    colors = [(0.0, 0.0, 0.0), (1.0, 1.0, 1.0)]
    k = max(n - 2, 1)
    colors += [colorsys.hsv_to_rgb(i / k, 0.85, 0.95) for i in range(n - 2)]
    return np.asarray(colors[:n])


def keypoint_overlay(image: np.ndarray, keypoints: KeypointSet, grid: ImageGrid) -> np.ndarray:
    out = np.array(image[..., :3], dtype=np.float64, copy=True)
    colors = palette(len(keypoints) + 2)[2:]
    cols_rows = np.round(grid.to_pixels(keypoints.points)).astype(np.int64)
    for (c, r), color in zip(cols_rows, colors):
        r0, r1 = max(r - _KEYPOINT_MARK, 0), min(r + _KEYPOINT_MARK + 1, grid.height)
        c0, c1 = max(c - _KEYPOINT_MARK, 0), min(c + _KEYPOINT_MARK + 1, grid.width)
        if r0 < r1 and c0 < c1:
            out[r0:r1, c0:c1] = color
    return out


def mask_composite(masks: np.ndarray) -> np.ndarray:
    return np.einsum("khw,kc->hwc", masks, palette(masks.shape[0]))


# ---------------------------------------------------------------- file runs


class _Writer:
    """Collects output files and their digests for the manifest."""

    def __init__(self, root: Path):
        self.root = root
        self.files: dict[str, str] = {}
        root.mkdir(parents=True, exist_ok=True)

    def _record(self, name: str) -> None:
        self.files[name] = hashlib.sha256((self.root / name).read_bytes()).hexdigest()

    def image(self, name: str, data: np.ndarray) -> None:
        io.write_image(self.root / name, data)
        self._record(name)

    def array(self, name: str, data: np.ndarray) -> None:
        io.save_array(self.root / name, data)
        self._record(name)

    def json(self, name: str, record: Any) -> None:
        io.write_json(self.root / name, record)
        self._record(name)

    def manifest(self, extra: dict) -> None:
        record = dict(extra)
        record["files"] = dict(sorted(self.files.items()))
        io.write_json(self.root / "manifest.json", record)


def _load_model(config: PipelineConfig) -> MorphableModel:
    with stage("load"):
        return load_model(config.model, config.pose_joints)


def _obtain_params(
    config: PipelineConfig, model: MorphableModel, params_path: Path | None, landmark_path: Path | None, label: str
) -> tuple[ParamSet, dict | None]:
    if params_path is not None:
        with stage("load"):
            params = io.load_params(params_path)
            params.check(model)
        return params, None
    if landmark_path is None:
        raise StageError("config", f"{label}: either params or landmarks are required")
    with stage("load"):
        landmarks = io.load_landmarks(landmark_path)
    with stage("fit"):
        result = fit_params(model, landmarks, options=config.fit)
    return result.params, result.report()


def _load_fixtures(config: PipelineConfig) -> tuple[KeypointSet, KeypointSet | None, np.ndarray, np.ndarray, np.ndarray, GadeWeights]:
    with stage("load"):
        kp_s = io.load_keypoints(config.keypoints_source)
        kp_d = io.load_keypoints(config.keypoints_driving) if config.keypoints_driving is not None else None
        logits = io.load_array(config.mask_logits)
        occ_g = io.load_array(config.occlusion_gade)
        occ_ca = io.load_array(config.occlusion_ca)
        weights = GadeWeights.load(config.gade_weights)
    return kp_s, kp_d, logits, occ_g, occ_ca, weights


def _write_buffers(writer: _Writer, out: dict[str, np.ndarray], source_image: np.ndarray, kp_s, kp_d, grid, occ_g, occ_ca) -> None:
    writer.image("keypoints_source.png", keypoint_overlay(source_image, kp_s, grid))
    if kp_d is not None:
        writer.image("keypoints_driving.png", keypoint_overlay(out["warped"], kp_d, grid))
    writer.image("occlusion_gade.png", occ_g)
    writer.image("occlusion_ca.png", occ_ca)
    writer.image("reenactment_3d.png", out["reenactment_3d"])
    writer.image("normal_source.png", out["normal_source"] * 0.5 + 0.5)
    writer.image("normal_driving.png", out["normal_driving"] * 0.5 + 0.5)
    writer.image("masks.png", mask_composite(out["masks"]))
    writer.image("motion_3d.png", visualize_flow(out["motion_3d"])[0])
    writer.image("dense_motion.png", visualize_flow(out["dense_motion"])[0])
    writer.image("warped.png", out["warped"])
    writer.image("reconstructed.png", out["reconstructed"])
    for name in (
        "reenactment_3d",
        "motion_3d",
        "heatmaps",
        "affine_motions",
        "masks",
        "dense_motion",
        "warped",
        "features_gade",
        "features_ca",
        "reconstructed",
    ):
        writer.array(f"{name}.npy", out[name])


def run_reenact(config: PipelineConfig) -> dict:
    """Self-reenactment from files; returns the manifest record."""
    config.require("model", "source_image", "keypoints_source", "keypoints_driving", "mask_logits", "occlusion_gade", "occlusion_ca", "gade_weights")
    grid = config.image_grid
    model = _load_model(config)
    with stage("load"):
        source_image = io.read_image(config.source_image)
        driving_image = io.read_image(config.driving_image) if config.driving_image is not None else None
    source, fit_s = _obtain_params(config, model, config.source_params, config.source_landmarks, "source")
    if config.driving_params is None and config.driving_landmarks is None and config.driving_image == config.source_image:
        driving, fit_d = source, None
    else:
        driving, fit_d = _obtain_params(config, model, config.driving_params, config.driving_landmarks, "driving")
    kp_s, kp_d, logits, occ_g, occ_ca, weights = _load_fixtures(config)
    fixtures = Fixtures(kp_s, kp_d, logits, occ_g, occ_ca, weights)
    with stage("load"):
        _check_fixtures(fixtures, grid, config.num_keypoints)
    out = reenact_arrays(model, source_image, source, driving, fixtures, grid, config.heatmap_sigma, config.patch, config.softmax_scale)

    with stage("write"):
        writer = _Writer(config.output)
        _write_buffers(writer, out, source_image, kp_s, kp_d, grid, occ_g, occ_ca)
        writer.json("params_source.json", source.to_dict())
        writer.json("params_driving.json", driving.to_dict())
        for label, rep in (("source", fit_s), ("driving", fit_d)):
            if rep is not None:
                writer.json(f"fit_{label}.json", rep)
        manifest = {"command": "reenact", "grid": list(grid.shape), "num_keypoints": config.num_keypoints}
        if driving_image is not None:
            with stage("metrics"):
                metrics = {
                    "warped": metric_report(out["warped"], driving_image),
                    "reconstructed": metric_report(np.clip(out["reconstructed"], 0.0, 1.0), driving_image),
                }
            writer.json("metrics.json", metrics)
            manifest["metrics"] = metrics
        writer.manifest(manifest)
    return manifest


def _per_frame(array: np.ndarray, frames: int, ndim: int, name: str) -> list[np.ndarray]:
    if array.ndim == ndim:
        return [array] * frames
    if array.ndim == ndim + 1 and array.shape[0] == frames:
        return list(array)
    raise ValueError(f"{name} must be shared ({ndim}D) or per frame with {frames} entries, got {array.shape}")


def run_transfer(config: PipelineConfig) -> dict:
    """Relative motion transfer over a driving sequence; returns the manifest record."""
    config.require("model", "source_image", "keypoints_source", "keypoints_sequence", "mask_logits", "occlusion_gade", "occlusion_ca", "gade_weights")
    grid = config.image_grid
    model = _load_model(config)
    with stage("load"):
        source_image = io.read_image(config.source_image)
    source, fit_s = _obtain_params(config, model, config.source_params, config.source_landmarks, "source")

    with stage("load"):
        if config.driving_sequence is not None:
            driving = io.load_param_sequence(config.driving_sequence)
            landmark_seq = None
        elif config.driving_landmark_sequence is not None:
            landmark_seq = io.load_array(config.driving_landmark_sequence)
            if landmark_seq.ndim != 3:
                raise ValueError(f"landmark sequence must be (T, L, 2), got {landmark_seq.shape}")
            driving = None
        else:
            raise StageError("config", "driving_sequence or driving_landmark_sequence is required")
    if driving is None:
        with stage("fit"), ThreadPoolExecutor(config.jobs) as pool:
            driving = list(pool.map(lambda lm: fit_params(model, LandmarkSet(lm), options=config.fit).params, landmark_seq))
    if len(driving) == 0:
        raise StageError("transfer", "driving sequence is empty")
    frames = len(driving)

    kp_s, _, logits, occ_g, occ_ca, weights = _load_fixtures(config)
    with stage("load"):
        kp_seq = io.load_keypoint_sequence(config.keypoints_sequence)
        if len(kp_seq) != frames:
            raise ValueError(f"keypoint sequence has {len(kp_seq)} frames, driving sequence {frames}")
        logits_seq = _per_frame(logits, frames, 3, "mask_logits")
        occ_g_seq = _per_frame(occ_g, frames, 2, "occlusion_gade")
        occ_ca_seq = _per_frame(occ_ca, frames, 2, "occlusion_ca")
        for p in driving:
            p.check(model)

    with stage("transfer"):
        if config.reference == "auto":
            ref_index = select_reference_frame(source, driving)
        else:
            ref_index = int(config.reference)
            if not 0 <= ref_index < frames:
                raise ValueError(f"reference index {ref_index} outside 0..{frames - 1}")
    reference, kp_ref = driving[ref_index], kp_seq[ref_index]

    writer = _Writer(config.output)

    def frame(t: int) -> tuple[int, ParamSet, dict[str, np.ndarray]]:
        fixtures = Fixtures(kp_s, kp_seq[t], logits_seq[t], occ_g_seq[t], occ_ca_seq[t], weights)
        transferred, out = transfer_arrays(
            model, source_image, source, reference, driving[t], kp_ref, fixtures, grid,
            config.heatmap_sigma, config.patch, config.softmax_scale,
        )
        return t, transferred, out

    with ThreadPoolExecutor(config.jobs) as pool:
        results = list(pool.map(frame, range(frames)))

    with stage("write"):
        for t, transferred, out in results:
            writer.image(f"frame_{t:04d}.png", out["reconstructed"])
            writer.image(f"frame_{t:04d}_warped.png", out["warped"])
            writer.image(f"frame_{t:04d}_motion.png", visualize_flow(out["dense_motion"])[0])
            writer.array(f"frame_{t:04d}_motion.npy", out["dense_motion"])
            writer.array(f"frame_{t:04d}_motion_3d.npy", out["motion_3d"])
            writer.json(f"frame_{t:04d}_params.json", transferred.to_dict())
        writer.json("params_source.json", source.to_dict())
        if fit_s is not None:
            writer.json("fit_source.json", fit_s)
        manifest = {"command": "transfer", "frames": frames, "reference": ref_index, "grid": list(grid.shape)}
        writer.manifest(manifest)
    return manifest


def run_fit(config: PipelineConfig) -> dict:
    """Fit parameters to one landmark file; writes ``params.json`` and ``fit.json``."""
    config.require("model", "landmarks")
    model = _load_model(config)
    with stage("load"):
        landmarks = io.load_landmarks(config.landmarks)
        init = io.load_params(config.init) if config.init is not None else None
    with stage("fit"):
        result = fit_params(model, landmarks, init, config.fit)
    with stage("write"):
        writer = _Writer(config.output)
        writer.json("params.json", result.params.to_dict())
        writer.json("fit.json", result.report())
        writer.manifest({"command": "fit", "loss": result.loss, "iterations": result.iterations})
    return result.report()


# ---------------------------------------------------------------- metrics


def _image_pairs(prediction: Path, target: Path) -> list[tuple[str, Path, Path]]:
    if prediction.is_dir() != target.is_dir():
        raise ValueError("prediction and target must both be files or both be directories")
    if not prediction.is_dir():
        return [(prediction.name, prediction, target)]
    names = sorted(p.name for p in prediction.glob("*.png"))
    pairs = [(n, prediction / n, target / n) for n in names if (target / n).is_file()]
    if not pairs:
        raise ValueError(f"no matching PNG names in {prediction} and {target}")
    return pairs


def compute_metrics(prediction: str | Path, target: str | Path) -> dict:
    """L1 / PSNR / SSIM per image pair plus their mean."""
    with stage("metrics"):
        per_image = {}
        for name, a, b in _image_pairs(Path(prediction), Path(target)):
            per_image[name] = metric_report(io.read_image(a), io.read_image(b))
        keys = ("l1", "psnr", "ssim")
        mean = {}
        for k in keys:
            vals = [r[k] for r in per_image.values() if r[k] is not None]
            mean[k] = float(np.mean(vals)) if vals else None
    return {"images": per_image, "mean": mean}


# ---------------------------------------------------------------- toy assets


def render_toy_image(model: MorphableModel, params: ParamSet, grid: ImageGrid) -> np.ndarray:
    """Smooth background with the face drawn in normal-map colours."""
    centers = grid.pixel_centers()
    x, y = centers[..., 0], centers[..., 1]
    background = np.stack(
        [0.5 + 0.3 * np.sin(3.0 * x + 1.0), 0.5 + 0.3 * np.cos(2.5 * y), 0.5 + 0.2 * np.sin(2.0 * (x + y))], axis=-1
    )
    mesh = decode(model, params)
    colors = vertex_normals(mesh) * 0.4 + 0.5
    face = rasterize(mesh, params.camera_scale, params.camera_translation, colors, grid, model.uv_face_mask)
    cov = face.coverage[..., None]
    return background * (1.0 - cov) + face.data * cov


def _random_params(model: MorphableModel, rng: np.random.Generator, scale: float) -> ParamSet:
    return ParamSet(
        rng.normal(0.0, 0.5, model.num_shape),
        rng.normal(0.0, 0.5, model.num_expression),
        rng.normal(0.0, 0.1, model.num_pose),
        scale,
        rng.normal(0.0, 0.03, 2),
    )


def _quantized(image: np.ndarray) -> np.ndarray:
    # what a PNG round trip yields, so fitted inputs and files agree
    return io.to_uint8(image) / 255.0


def write_toy_assets(
    output: str | Path,
    seed: int = 0,
    mode: str = "identity",
    size: int = DEFAULT_GRID[0],
    num_keypoints: int = DEFAULT_NUM_KEYPOINTS,
    frames: int = 3,
    occlusion_factor: int = 4,
) -> dict:
    """Synthetic model, images and fixtures plus ready-to-run configs.

    ``identity`` mode makes the driving frame equal the source, selects the
    background mask everywhere, marks everything visible and uses identity
    GADE weights, so reenactment reproduces the source image. ``random``
    mode draws a different driving pose and random fixtures.
    """
    if mode not in ("identity", "random"):
        raise StageError("config", f"toy-assets mode must be 'identity' or 'random', got {mode!r}")
    if size % occlusion_factor:
        raise StageError("config", f"size {size} is not a multiple of {occlusion_factor}")
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    grid = ImageGrid(size, size)
    h = size // occlusion_factor
    k = num_keypoints

    model = make_toy_model(seed, v=60, k_joints=3, dims=(6, 3))
    source = _random_params(model, rng, 0.8)
    save_model(model, out / "model.npz")
    source_image = _quantized(render_toy_image(model, source, grid))
    io.write_image(out / "source.png", source_image)
    io.write_json(out / "source_params.json", source.to_dict())
    io.save_array(out / "source_landmarks.npy", project_landmarks(model, source))

    kp_points = rng.uniform(-0.7, 0.7, (k, 2))
    kp_source = KeypointSet.identity(kp_points)
    if mode == "identity":
        driving = source
        kp_driving = kp_source
        logits = np.zeros((k + 2, size, size))
        logits[0] = 1000.0
        occ_g = np.ones((h, h))
        occ_ca = np.ones((h, h))
        weights = GadeWeights.identity(3, model.num_shape + model.num_expression + model.num_pose + 3)
    else:
        driving = _random_params(model, rng, 0.8).replace(shape=source.shape)
        kp_driving = KeypointSet(
            kp_points + rng.normal(0.0, 0.05, (k, 2)), np.eye(2) + rng.normal(0.0, 0.05, (k, 2, 2))
        )
        logits = rng.normal(0.0, 1.0, (k + 2, size, size))
        yy, xx = np.mgrid[0:h, 0:h] / max(h - 1, 1)
        occ_g = np.clip(0.5 + 0.5 * np.sin(4.0 * xx + rng.uniform(0, 6)) * np.cos(3.0 * yy), 0.0, 1.0)
        occ_ca = np.clip(np.hypot(xx - 0.5, yy - 0.5) * 2.0, 0.0, 1.0)
        dim = model.num_shape + model.num_expression + model.num_pose + 3
        weights = GadeWeights(
            rng.normal(0.0, 0.05, (3, dim)), 1.0 + rng.normal(0.0, 0.05, 3),
            rng.normal(0.0, 0.05, (3, dim)), rng.normal(0.0, 0.05, 3), np.ones(3),
        )
    driving_image = source_image if mode == "identity" else _quantized(render_toy_image(model, driving, grid))
    io.write_image(out / "driving.png", driving_image)
    io.write_json(out / "driving_params.json", driving.to_dict())
    io.save_array(out / "driving_landmarks.npy", project_landmarks(model, driving))
    io.save_keypoints(out / "keypoints_source.npz", kp_source)
    io.save_keypoints(out / "keypoints_driving.npz", kp_driving)
    io.save_array(out / "mask_logits.npy", logits)
    io.save_array(out / "occlusion_gade.npy", occ_g)
    io.save_array(out / "occlusion_ca.npy", occ_ca)
    weights.save(out / "gade_weights.npz")

    # driving sequence: small expression / pose / translation steps away from the driving frame
    sequence = [driving]
    kp_seq = [kp_driving]
    for _ in range(1, frames):
        prev = sequence[-1]
        sequence.append(
            prev.replace(
                expression=prev.expression + rng.normal(0.0, 0.1, model.num_expression),
                pose=prev.pose + rng.normal(0.0, 0.03, model.num_pose),
                camera_translation=prev.camera_translation + rng.normal(0.0, 0.02, 2),
            )
        )
        kp_seq.append(KeypointSet(kp_seq[-1].points + rng.normal(0.0, 0.02, (k, 2)), kp_seq[-1].jacobians))
    io.write_json(out / "driving_sequence.json", [p.to_dict() for p in sequence])
    io.save_keypoints(out / "keypoints_sequence.npz", kp_seq)

    common = {
        "model": "model.npz",
        "source_image": "source.png",
        "source_landmarks": "source_landmarks.npy",
        "keypoints_source": "keypoints_source.npz",
        "mask_logits": "mask_logits.npy",
        "occlusion_gade": "occlusion_gade.npy",
        "occlusion_ca": "occlusion_ca.npy",
        "gade_weights": "gade_weights.npz",
        "grid": [size, size],
        "num_keypoints": k,
    }
    configs = {
        "reenact.json": {
            **common,
            "driving_image": "driving.png",
            "driving_landmarks": "driving_landmarks.npy",
            "keypoints_driving": "keypoints_driving.npz",
            "output": "out/reenact",
        },
        "transfer.json": {
            **common,
            "driving_sequence": "driving_sequence.json",
            "keypoints_sequence": "keypoints_sequence.npz",
            "reference": "auto",
            "output": "out/transfer",
        },
        "fit.json": {"model": "model.npz", "landmarks": "source_landmarks.npy", "output": "out/fit"},
    }
    for name, record in configs.items():
        io.write_json(out / name, record)
    summary = {"mode": mode, "seed": seed, "size": size, "num_keypoints": k, "frames": frames, "configs": sorted(configs)}
    io.write_json(out / "toy_assets.json", summary)
    return summary
