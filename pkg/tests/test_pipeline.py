import json

import numpy as np
import pytest

from posevalid import INVALID, VALID
from posevalid.errors import ConfigError, DataError
from posevalid.pipeline import (
    build_object_model,
    load_run_config,
    make_dataset,
    materialize,
    parse_run_config,
    run_evaluation,
    run_inference,
    run_training,
)


def tiny_cfg_dict(out_dir="run"):
    return {
        "out_dir": out_dir,
        "model": {"kind": "toy", "toy": "cross4", "n_samples": 1024, "seed": 1},
        "dataset": {"train": {"scenes": 24, "per_class": 20, "seed": 100},
                    "val": {"scenes": 10, "per_class": 8, "seed": 200}},
        "train": {"epochs": 2, "input_size": 32, "points": 64, "seed": 3,
                  "depth_arch": {"tower_widths": [4, 8, 8], "combined_width": 16,
                                 "fc_hidden": 32},
                  "cloud_arch": {"mlp_widths": [4, 4, 4, 8, 32], "feature_dim": 8,
                                 "head_widths": [32, 16]}},
    }


@pytest.fixture()
def tiny_cfg(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(tiny_cfg_dict()))
    return load_run_config(p)


class TestConfig:
    def test_unknown_top_level_key(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_run_config({"outdir": "x"}, tmp_path)

    def test_unknown_nested_key(self, tmp_path):
        raw = tiny_cfg_dict()
        raw["train"]["learning_rate"] = 0.1
        with pytest.raises(ConfigError, match="learning_rate"):
            parse_run_config(raw, tmp_path)

    def test_bad_toy_name(self, tmp_path):
        raw = tiny_cfg_dict()
        raw["model"]["toy"] = "teapot"
        with pytest.raises(ConfigError):
            parse_run_config(raw, tmp_path)

    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="malformed"):
            load_run_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_run_config(tmp_path / "nope.json")

    def test_obj_model_needs_mesh(self, tmp_path):
        raw = tiny_cfg_dict()
        raw["model"] = {"kind": "obj"}
        with pytest.raises(ConfigError, match="mesh_path"):
            parse_run_config(raw, tmp_path)

    def test_obj_model_loads(self, tmp_path):
        from posevalid.geometry import save_obj
        from conftest import cube_mesh
        save_obj(cube_mesh(), tmp_path / "cube.obj")
        raw = tiny_cfg_dict()
        raw["model"] = {"kind": "obj", "mesh_path": "cube.obj", "n_samples": 512,
                        "seed": 2}
        cfg = parse_run_config(raw, tmp_path)
        model = build_object_model(cfg)
        assert model.model_id == "cube"
        assert abs(model.diameter - np.sqrt(3)) < 0.1


class TestMaterializeAndInfer:
    def test_shapes_and_labels(self, tiny_cfg):
        model = build_object_model(tiny_cfg)
        manifest = make_dataset(tiny_cfg, "train", model)
        depth_ds, cloud_ds, rows, loaded = materialize(
            tiny_cfg, tiny_cfg.out_path / "dataset_train", model, True)
        n = len(manifest.records)
        assert depth_ds.x.shape == (n, 32, 32, 2)
        assert depth_ds.x.dtype == np.float32
        assert set(np.unique(depth_ds.y)) <= {0, 1}
        assert cloud_ds.model.shape == (64, 3)
        assert (rows >= -1).all() and len(rows) == n
        kept = rows >= 0
        assert cloud_ds.scene.shape == (kept.sum(), 64, 3)

    def test_full_cycle_annotation(self, tiny_cfg):
        model = build_object_model(tiny_cfg)
        make_dataset(tiny_cfg, "train", model)
        make_dataset(tiny_cfg, "val", model)
        run_training(tiny_cfg, ("depth", "cloud"), model)
        val_dir = tiny_cfg.out_path / "dataset_val"
        out_path = tiny_cfg.out_path / "infer" / "annotated.json"
        before = (val_dir / "manifest.json").read_bytes()
        obj = run_inference(tiny_cfg, val_dir, out_path, model)
        assert (val_dir / "manifest.json").read_bytes() == before  # input untouched
        for rec in obj["records"]:
            assert rec["pred_label"] in (VALID, INVALID)
            for key in ("p_valid_depth", "p_valid_cloud", "p_valid_fused"):
                assert 0.0 <= rec[key] <= 1.0
            if rec["insufficient_support"]:
                assert rec["pred_label"] == INVALID
                assert rec["p_valid_fused"] == 0.0
            else:
                fused = 0.5 * (rec["p_valid_depth"] + rec["p_valid_cloud"])
                assert abs(rec["p_valid_fused"] - fused) < 1e-9
                assert rec["pred_label"] == (VALID if fused > 0.5 else INVALID)
        summary = run_evaluation(tiny_cfg, out_path, tiny_cfg.out_path / "eval" / "rep",
                                 model)
        assert set(summary) == {"confusion", "aca", "oa", "ap_before", "ap_after"}
        rep = json.loads((tiny_cfg.out_path / "eval" / "rep.json").read_text())
        assert rep["objects"][0]["name"] == "cross4"

    def test_training_without_dataset_fails(self, tiny_cfg):
        with pytest.raises(DataError, match="make-dataset"):
            run_training(tiny_cfg, ("depth",))

    def test_inference_without_checkpoints_fails(self, tiny_cfg):
        model = build_object_model(tiny_cfg)
        make_dataset(tiny_cfg, "val", model)
        with pytest.raises(DataError, match="checkpoint"):
            run_inference(tiny_cfg, tiny_cfg.out_path / "dataset_val",
                          tiny_cfg.out_path / "x.json", model)

    def test_checkpoint_arch_mismatch_detected(self, tiny_cfg, tmp_path):
        model = build_object_model(tiny_cfg)
        make_dataset(tiny_cfg, "train", model)
        make_dataset(tiny_cfg, "val", model)
        run_training(tiny_cfg, ("depth", "cloud"), model)
        # corrupt: swap in a checkpoint with different widths
        from posevalid.neuralnet import DepthArch, init_depth_params, save_checkpoint
        other = init_depth_params(DepthArch(input_size=32, tower_widths=(2, 3, 4),
                                            combined_width=6, fc_hidden=8), seed=0)
        save_checkpoint(other, tiny_cfg.out_path / "checkpoints" / "depth.vnw")
        with pytest.raises(DataError, match="architecture"):
            run_inference(tiny_cfg, tiny_cfg.out_path / "dataset_val",
                          tiny_cfg.out_path / "y.json", model)
