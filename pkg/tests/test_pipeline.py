from __future__ import annotations

import json
import shutil

import numpy as np
import pytest

from safa_motion_kit import io
from safa_motion_kit.cli import main
from safa_motion_kit.generator import GadeWeights
from safa_motion_kit.model import ParamSet
from safa_motion_kit.motion import KeypointSet
from safa_motion_kit.pipeline import (
    Fixtures,
    PipelineConfig,
    StageError,
    keypoint_overlay,
    mask_composite,
    reenact_arrays,
    run_reenact,
    run_transfer,
    write_toy_assets,
)
from safa_motion_kit.render import ImageGrid
from safa_motion_kit.transfer import relative_params

SIZE = 64


@pytest.fixture
def identity_assets(tmp_path):
    write_toy_assets(tmp_path / "toy", seed=3, mode="identity", size=SIZE)
    return tmp_path / "toy"


@pytest.fixture
def random_assets(tmp_path):
    write_toy_assets(tmp_path / "toy", seed=5, mode="random", size=SIZE, frames=3)
    return tmp_path / "toy"


def bundle_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.grid == (256, 256) and cfg.num_keypoints == 10 and cfg.heatmap_sigma == 0.01

    def test_relative_paths_resolve_against_config(self, identity_assets):
        cfg = PipelineConfig.from_json(identity_assets / "reenact.json")
        assert cfg.model == identity_assets.resolve() / "model.npz"
        assert cfg.output == identity_assets.resolve() / "out" / "reenact"

    def test_override(self, identity_assets, tmp_path):
        cfg = PipelineConfig.from_json(identity_assets / "reenact.json", jobs=3, output=tmp_path / "x")
        assert cfg.jobs == 3 and cfg.output == (tmp_path / "x").resolve()

    def test_missing_fixture_tagged(self, identity_assets):
        (identity_assets / "mask_logits.npy").unlink()
        with pytest.raises(StageError) as err:
            PipelineConfig.from_json(identity_assets / "reenact.json")
        assert err.value.stage == "config" and "mask_logits" in str(err.value)

    def test_bad_keypoint_count(self):
        with pytest.raises(StageError, match="num_keypoints"):
            PipelineConfig(num_keypoints=0)

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.json").write_text('{"bogus": 1}')
        with pytest.raises(StageError, match="unknown"):
            PipelineConfig.from_json(tmp_path / "c.json")

    def test_invalid_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(StageError, match="invalid JSON"):
            PipelineConfig.from_json(tmp_path / "c.json")


class TestReenact:
    def test_identity_reproduces_source(self, identity_assets):
        run_reenact(PipelineConfig.from_json(identity_assets / "reenact.json"))
        out = identity_assets / "out" / "reenact"
        src = io.read_image(identity_assets / "source.png")
        for name in ("warped.png", "reconstructed.png"):
            assert np.array_equal(io.read_image(out / name), src)
        assert np.array_equal(io.load_array(out / "warped.npy"), src)
        metrics = io.read_json(out / "metrics.json")
        assert metrics["warped"]["l1"] == 0.0 and metrics["warped"]["psnr"] == 100.0

    def test_every_intermediate_written(self, identity_assets):
        run_reenact(PipelineConfig.from_json(identity_assets / "reenact.json"))
        out = identity_assets / "out" / "reenact"
        for name in (
            "keypoints_source.png",
            "keypoints_driving.png",
            "occlusion_gade.png",
            "occlusion_ca.png",
            "reenactment_3d.png",
            "masks.png",
            "motion_3d.png",
            "dense_motion.png",
            "motion_3d.npy",
            "dense_motion.npy",
            "warped.png",
            "reconstructed.png",
            "manifest.json",
        ):
            assert (out / name).is_file(), name
        manifest = io.read_json(out / "manifest.json")
        assert "warped.png" in manifest["files"]

    def test_two_runs_bit_identical(self, random_assets, tmp_path):
        cfg = random_assets / "reenact.json"
        run_reenact(PipelineConfig.from_json(cfg, output=tmp_path / "a"))
        run_reenact(PipelineConfig.from_json(cfg, output=tmp_path / "b"))
        assert bundle_bytes(tmp_path / "a") == bundle_bytes(tmp_path / "b")

    def test_translation_shift_inside_coverage(self, toy_model, rng):
        """3D mask everywhere and a two-pixel camera shift: the warp is an index shift on the face."""
        grid = ImageGrid(32, 32)
        k = 2
        src = ParamSet.zeros(toy_model, 1.3)
        drv = src.replace(camera_translation=[4.0 / grid.width, 0.0])
        image = rng.uniform(size=(32, 32, 3))
        logits = np.zeros((k + 2, 32, 32))
        logits[1] = 1000.0
        kp = KeypointSet.identity(rng.uniform(-0.5, 0.5, (k, 2)))
        fx = Fixtures(kp, kp, logits, np.ones((8, 8)), np.ones((8, 8)), GadeWeights.identity(3, 6 + 3 + toy_model.num_pose + 3))
        out = reenact_arrays(toy_model, image, src, drv, fx, grid)
        cov = out["coverage_3d"] > 0
        rows, cols = np.nonzero(cov)
        assert len(rows) > 20
        inside = cols >= 2
        np.testing.assert_allclose(out["warped"][rows[inside], cols[inside]], image[rows[inside], cols[inside] - 2], atol=1e-9)

    def test_keypoint_count_mismatch_tagged(self, identity_assets):
        io.save_array(identity_assets / "mask_logits.npy", np.zeros((5, SIZE, SIZE)))
        with pytest.raises(StageError) as err:
            run_reenact(PipelineConfig.from_json(identity_assets / "reenact.json"))
        assert err.value.stage == "load"

    def test_singular_jacobian_tagged(self, identity_assets):
        kp = io.load_keypoints(identity_assets / "keypoints_driving.npz")
        jac = kp.jacobians.copy()
        jac[4] = 0.0
        io.save_keypoints(identity_assets / "keypoints_driving.npz", KeypointSet(kp.points, jac))
        with pytest.raises(StageError) as err:
            run_reenact(PipelineConfig.from_json(identity_assets / "reenact.json"))
        assert err.value.stage == "motion" and "keypoint 4" in str(err.value)

    def test_params_instead_of_landmarks(self, identity_assets):
        record = io.read_json(identity_assets / "reenact.json")
        del record["source_landmarks"], record["driving_landmarks"]
        record["source_params"] = record["driving_params"] = "source_params.json"
        io.write_json(identity_assets / "p.json", record)
        run_reenact(PipelineConfig.from_json(identity_assets / "p.json"))
        out = identity_assets / "out" / "reenact"
        assert io.load_params(out / "params_driving.json") == io.load_params(identity_assets / "source_params.json")


class TestTransfer:
    def _config(self, root, **changes):
        record = io.read_json(root / "transfer.json")
        record.update(changes)
        io.write_json(root / "t.json", record)
        return PipelineConfig.from_json(root / "t.json")

    def test_single_reference_frame_is_identity(self, random_assets):
        seq = io.load_param_sequence(random_assets / "driving_sequence.json")[:1]
        io.write_json(random_assets / "one.json", [seq[0].to_dict()])
        kp = io.load_keypoint_sequence(random_assets / "keypoints_sequence.npz")[:1]
        io.save_keypoints(random_assets / "kp1.npz", kp)
        cfg = self._config(random_assets, driving_sequence="one.json", keypoints_sequence="kp1.npz")
        manifest = run_transfer(cfg)
        assert manifest["frames"] == 1 and manifest["reference"] == 0
        fitted = io.load_params(cfg.output / "params_source.json")
        assert io.load_params(cfg.output / "frame_0000_params.json") == fitted
        motion = io.load_array(cfg.output / "frame_0000_motion.npy")
        np.testing.assert_allclose(motion, ImageGrid(SIZE, SIZE).pixel_centers(), atol=1e-12, rtol=0)
        assert np.array_equal(io.load_array(cfg.output / "frame_0000_motion_3d.npy"), ImageGrid(SIZE, SIZE).pixel_centers())

    def test_per_frame_params_match_oracle(self, random_assets):
        cfg = self._config(random_assets, source_params="source_params.json", source_landmarks=None, reference=0)
        run_transfer(cfg)
        source = io.load_params(random_assets / "source_params.json")
        seq = io.load_param_sequence(random_assets / "driving_sequence.json")
        for t, frame in enumerate(seq):
            assert io.load_params(cfg.output / f"frame_{t:04d}_params.json") == relative_params(source, seq[0], frame)

    def test_jobs_do_not_change_output(self, random_assets, tmp_path):
        base = self._config(random_assets, output=str(tmp_path / "serial"))
        run_transfer(base)
        parallel = self._config(random_assets, output=str(tmp_path / "parallel"), jobs=3)
        run_transfer(parallel)
        assert bundle_bytes(tmp_path / "serial") == bundle_bytes(tmp_path / "parallel")

    def test_empty_sequence(self, random_assets):
        io.write_json(random_assets / "empty.json", [])
        with pytest.raises(StageError, match="empty"):
            run_transfer(self._config(random_assets, driving_sequence="empty.json"))

    def test_reference_out_of_range(self, random_assets):
        with pytest.raises(StageError) as err:
            run_transfer(self._config(random_assets, reference=9))
        assert err.value.stage == "transfer"


class TestVisuals:
    def test_mask_composite_background_black(self):
        masks = np.zeros((4, 3, 3))
        masks[0] = 1.0
        assert np.all(mask_composite(masks) == 0.0)

    def test_keypoint_overlay_marks(self):
        img = np.zeros((16, 16, 3))
        out = keypoint_overlay(img, KeypointSet.identity(np.zeros((1, 2))), ImageGrid(16, 16))
        assert out.sum() > 0 and img.sum() == 0


class TestCLI:
    def test_toy_assets_then_reenact(self, tmp_path, capsys):
        assert main(["toy-assets", "--output", str(tmp_path / "toy"), "--size", "32"]) == 0
        assert main(["reenact", "--config", str(tmp_path / "toy" / "reenact.json"), "--output", str(tmp_path / "out")]) == 0
        assert np.array_equal(io.read_image(tmp_path / "out" / "warped.png"), io.read_image(tmp_path / "toy" / "source.png"))

    def test_missing_file_exit_code(self, tmp_path, capsys):
        main(["toy-assets", "--output", str(tmp_path / "toy"), "--size", "32"])
        (tmp_path / "toy" / "gade_weights.npz").unlink()
        capsys.readouterr()
        assert main(["reenact", "--config", str(tmp_path / "toy" / "reenact.json")]) != 0
        assert capsys.readouterr().err.startswith("[config]")

    def test_transfer_and_fit(self, tmp_path, capsys):
        main(["toy-assets", "--output", str(tmp_path / "toy"), "--size", "32", "--mode", "random"])
        assert main(["transfer", "--config", str(tmp_path / "toy" / "transfer.json"), "--jobs", "2"]) == 0
        assert (tmp_path / "toy" / "out" / "transfer" / "frame_0002.png").is_file()
        assert main(["fit", "--config", str(tmp_path / "toy" / "fit.json")]) == 0
        report = io.read_json(tmp_path / "toy" / "out" / "fit" / "fit.json")
        assert report["loss_trace"] == sorted(report["loss_trace"], reverse=True)

    def test_metrics_files_and_dirs(self, tmp_path, capsys):
        a = np.random.default_rng(0).uniform(size=(16, 16, 3))
        for d in ("p", "t"):
            (tmp_path / d).mkdir()
            io.write_image(tmp_path / d / "x.png", a)
        capsys.readouterr()
        assert main(["metrics", str(tmp_path / "p" / "x.png"), str(tmp_path / "t" / "x.png")]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["mean"]["l1"] == 0.0 and result["mean"]["psnr"] == 100.0
        assert main(["metrics", str(tmp_path / "p"), str(tmp_path / "t"), "--output", str(tmp_path / "m")]) == 0
        assert (tmp_path / "m" / "metrics.json").is_file()

    def test_metrics_needs_inputs(self, capsys):
        assert main(["metrics"]) != 0
        assert "[config]" in capsys.readouterr().err

    def test_toy_assets_deterministic(self, tmp_path, capsys):
        main(["toy-assets", "--output", str(tmp_path / "a"), "--size", "32", "--mode", "random"])
        main(["toy-assets", "--output", str(tmp_path / "b"), "--size", "32", "--mode", "random"])
        assert bundle_bytes(tmp_path / "a") == bundle_bytes(tmp_path / "b")
        shutil.rmtree(tmp_path / "a")
