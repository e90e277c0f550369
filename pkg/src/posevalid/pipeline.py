"""Run configuration and the dataset -> training -> inference -> report wiring.

The CLI is a thin argument layer over these functions; tests drive them
directly.  Every step is a deterministic function of (config, seeds, input
files).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cloudprep, datagen, evaluation, rasterizer
from .errors import ConfigError, DataError
from .geometry import (
    INVALID,
    VALID,
    GroundTruthSet,
    ObjectModel,
    build_model,
    load_obj,
    SymmetrySpec,
)
from .neuralnet import (
    CloudArch,
    DepthArch,
    NetParams,
    Prob2,
    TrainConfig,
    cloud_forward,
    depth_forward,
    fuse,
    load_checkpoint,
    save_checkpoint,
    softmax,
    train_stream,
)
from .neuralnet.streams import LABEL_INDEX
from .neuralnet.training import CloudDataset, DepthDataset


@dataclass
class ModelConfig:
    id: str = "cross4"
    kind: str = "toy"  # "toy" or "obj"
    toy: str = "cross4"
    mesh_path: str = ""
    symmetry: SymmetrySpec = field(default_factory=SymmetrySpec)
    n_samples: int = 8192
    seed: int = 1


@dataclass
class InferConfig:
    batch: int = 64
    seed: int = 5
    overlays: bool = False


@dataclass
class RunConfig:
    out_dir: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    camera: rasterizer.CameraIntrinsics = field(
        default_factory=lambda: rasterizer.CameraIntrinsics(
            fx=70.0, fy=70.0, cx=48.0, cy=48.0, width=96, height=96, near=0.5, far=4.0))
    scene_box: datagen.SceneBox = field(default_factory=datagen.SceneBox)
    noise: datagen.NoiseConfig = field(default_factory=datagen.NoiseConfig)
    dataset_train: datagen.DatasetConfig = field(
        default_factory=lambda: datagen.DatasetConfig(scenes=1000, per_class=1000, seed=100))
    dataset_val: datagen.DatasetConfig = field(
        default_factory=lambda: datagen.DatasetConfig(scenes=260, per_class=250, seed=200))
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=20, input_size=64, points=256, seed=3))
    depth_arch: DepthArch | None = None
    cloud_arch: CloudArch | None = None
    infer: InferConfig = field(default_factory=InferConfig)
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.depth_arch is None:
            self.depth_arch = DepthArch(input_size=self.train.input_size,
                                        tower_widths=(8, 16, 32))
        if self.cloud_arch is None:
            self.cloud_arch = CloudArch(n_points=self.train.points,
                                        mlp_widths=(8, 8, 8, 16, 128),
                                        feature_dim=16, head_widths=(64, 32))

    @property
    def out_path(self) -> Path:
        return (self.base_dir / self.out_dir).resolve()


def _take(obj: dict, allowed: dict, where: str) -> dict:
    unknown = set(obj) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where}: {sorted(unknown)}")
    out = dict(allowed)
    out.update(obj)
    return out


def load_run_config(path) -> RunConfig:
    """Strict parse: unknown keys anywhere are rejected."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc
    return parse_run_config(raw, base_dir=path.parent)


def parse_run_config(raw: dict, base_dir=Path(".")) -> RunConfig:
    cfg = RunConfig(base_dir=Path(base_dir))
    top = _take(raw, {
        "out_dir": cfg.out_dir, "model": {}, "camera": None, "scene": {}, "noise": {},
        "dataset": {}, "train": {}, "infer": {},
    }, "top level")
    cfg.out_dir = top["out_dir"]

    m = _take(top["model"], {
        "id": None, "kind": "toy", "toy": "cross4", "mesh_path": "",
        "symmetry": None, "n_samples": 8192, "seed": 1,
    }, "model")
    if m["kind"] not in ("toy", "obj"):
        raise ConfigError(f"model.kind must be 'toy' or 'obj', got {m['kind']!r}")
    if m["kind"] == "toy" and m["toy"] not in datagen.TOY_KINDS:
        raise ConfigError(f"model.toy must be one of {datagen.TOY_KINDS}")
    if m["kind"] == "obj":
        if not m["mesh_path"]:
            raise ConfigError("model.kind 'obj' needs model.mesh_path")
        if m["symmetry"] is None:
            m["symmetry"] = {"kind": "none"}
    cfg.model = ModelConfig(
        id=m["id"] or (m["toy"] if m["kind"] == "toy" else Path(m["mesh_path"]).stem),
        kind=m["kind"], toy=m["toy"], mesh_path=m["mesh_path"],
        symmetry=(SymmetrySpec.from_json(m["symmetry"]) if m["symmetry"] else SymmetrySpec()),
        n_samples=int(m["n_samples"]), seed=int(m["seed"]))

    if top["camera"] is not None:
        cam = _take(top["camera"], {k: getattr(cfg.camera, k) for k in
                                    ("fx", "fy", "cx", "cy", "width", "height", "near", "far")},
                    "camera")
        cfg.camera = rasterizer.CameraIntrinsics.from_json(cam)

    sc = _take(top["scene"], {"instances": [2, 3], "box": None}, "scene")
    instances = tuple(int(v) for v in sc["instances"])
    if sc["box"] is not None:
        box = _take(sc["box"], {"x": [-0.4, 0.4], "y": [-0.4, 0.4], "z": [1.3, 2.5]}, "scene.box")
        cfg.scene_box = datagen.SceneBox.from_json(box)

    nz_defaults = datagen.NoiseConfig().to_json()
    nz = _take(top["noise"], nz_defaults, "noise")
    cfg.noise = datagen.NoiseConfig(
        p_perturb=float(nz["p_perturb"]), p_corrupt=float(nz["p_corrupt"]),
        p_spurious=float(nz["p_spurious"]),
        perturb_rot_deg=float(nz["perturb_rot_deg"]),
        perturb_trans_frac=float(nz["perturb_trans_frac"]),
        corrupt_rot_deg=tuple(nz["corrupt_rot_deg"]),
        corrupt_trans_frac=tuple(nz["corrupt_trans_frac"]),
        confidence_range=tuple(nz["confidence_range"]),
        min_confidence=nz["min_confidence"])

    ds = _take(top["dataset"], {"train": {}, "val": {}}, "dataset")
    def _ds(obj, defaults, where):
        d = _take(obj, {"scenes": defaults.scenes, "per_class": defaults.per_class,
                        "seed": defaults.seed}, where)
        return datagen.DatasetConfig(scenes=int(d["scenes"]), instances=instances,
                                     per_class=(None if d["per_class"] is None
                                                else int(d["per_class"])),
                                     seed=int(d["seed"]))
    cfg.dataset_train = _ds(ds["train"], cfg.dataset_train, "dataset.train")
    cfg.dataset_val = _ds(ds["val"], cfg.dataset_val, "dataset.val")

    tr_defaults = TrainConfig(epochs=20, input_size=64, points=256, seed=3).to_json()
    tr = _take(top["train"], {**tr_defaults, "depth_arch": None, "cloud_arch": None}, "train")
    cfg.train = TrainConfig(
        lr0=float(tr["lr0"]), lr_decay_every=int(tr["lr_decay_every"]),
        epochs=int(tr["epochs"]), batch=int(tr["batch"]),
        dropout_keep=float(tr["dropout_keep"]), seed=int(tr["seed"]),
        input_size=int(tr["input_size"]), points=int(tr["points"]))
    cfg.depth_arch = None
    cfg.cloud_arch = None
    if tr["depth_arch"] is not None:
        da = _take(tr["depth_arch"], {"tower_widths": [8, 16, 32], "combined_width": 0,
                                      "fc_hidden": 256}, "train.depth_arch")
        cfg.depth_arch = DepthArch(input_size=cfg.train.input_size,
                                   tower_widths=tuple(da["tower_widths"]),
                                   combined_width=int(da["combined_width"]),
                                   fc_hidden=int(da["fc_hidden"]))
    if tr["cloud_arch"] is not None:
        ca = _take(tr["cloud_arch"], {"mlp_widths": [8, 8, 8, 16, 128], "feature_dim": 16,
                                      "head_widths": [64, 32]}, "train.cloud_arch")
        cfg.cloud_arch = CloudArch(n_points=cfg.train.points,
                                   mlp_widths=tuple(ca["mlp_widths"]),
                                   feature_dim=int(ca["feature_dim"]),
                                   head_widths=tuple(ca["head_widths"]))
    cfg.__post_init__()

    inf = _take(top["infer"], {"batch": 64, "seed": 5, "overlays": False}, "infer")
    cfg.infer = InferConfig(batch=int(inf["batch"]), seed=int(inf["seed"]),
                            overlays=bool(inf["overlays"]))
    return cfg


def resolved_config_json(cfg: RunConfig) -> dict:
    return {
        "out_dir": cfg.out_dir,
        "model": {
            "id": cfg.model.id, "kind": cfg.model.kind, "toy": cfg.model.toy,
            "mesh_path": cfg.model.mesh_path, "symmetry": cfg.model.symmetry.to_json(),
            "n_samples": cfg.model.n_samples, "seed": cfg.model.seed,
        },
        "camera": cfg.camera.to_json(),
        "scene": {"instances": list(cfg.dataset_train.instances),
                  "box": cfg.scene_box.to_json()},
        "noise": cfg.noise.to_json(),
        "dataset": {"train": cfg.dataset_train.to_json(), "val": cfg.dataset_val.to_json()},
        "train": {**cfg.train.to_json(),
                  "depth_arch": cfg.depth_arch.to_json(),
                  "cloud_arch": cfg.cloud_arch.to_json()},
        "infer": {"batch": cfg.infer.batch, "seed": cfg.infer.seed,
                  "overlays": cfg.infer.overlays},
    }


def write_resolved_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config_resolved.json", "w", encoding="utf-8") as fh:
        json.dump(resolved_config_json(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_object_model(cfg: RunConfig) -> ObjectModel:
    if cfg.model.kind == "toy":
        mesh, sym = datagen.make_toy_mesh(cfg.model.toy)
    else:
        mesh_path = (cfg.base_dir / cfg.model.mesh_path)
        mesh = load_obj(mesh_path)
        sym = cfg.model.symmetry
    return build_model(mesh, sym, n_samples=cfg.model.n_samples,
                       seed=cfg.model.seed, model_id=cfg.model.id)


def make_dataset(cfg: RunConfig, split: str, model: ObjectModel | None = None,
                 log=None) -> datagen.DatasetManifest:
    if split not in ("train", "val"):
        raise ConfigError(f"split must be 'train' or 'val', got {split!r}")
    model = model or build_object_model(cfg)
    ds_cfg = cfg.dataset_train if split == "train" else cfg.dataset_val
    out = cfg.out_path / f"dataset_{split}"
    manifest = datagen.build_dataset(model, cfg.camera, ds_cfg, cfg.noise, out,
                                     cfg.scene_box, log=log)
    write_resolved_config(cfg, out)
    return manifest


# ------------------------------------------------------ input materialization

class _SceneCache:
    """Per-scene depth image and point cloud, loaded once."""

    def __init__(self, manifest_dir: Path, manifest: datagen.DatasetManifest):
        self.dir = Path(manifest_dir)
        self.manifest = manifest
        self._depth: dict = {}
        self._cloud: dict = {}

    def depth(self, scene_id: str) -> rasterizer.DepthImage:
        if scene_id not in self._depth:
            rec = self.manifest.scenes[scene_id]
            self._depth[scene_id] = rasterizer.read_dpr(self.dir / rec.depth_path)
        return self._depth[scene_id]

    def cloud(self, scene_id: str) -> cloudprep.PointCloud:
        if scene_id not in self._cloud:
            rec = self.manifest.scenes[scene_id]
            self._cloud[scene_id] = cloudprep.load_xyz(self.dir / rec.cloud_path)
        return self._cloud[scene_id]


def depth_pair_input(model: ObjectModel, det: datagen.DetectionRecord,
                     scene_depth: rasterizer.DepthImage,
                     cam: rasterizer.CameraIntrinsics, input_size: int) -> np.ndarray:
    """Normalized (S, S, 2) stack: scene crop then synthetic model crop."""
    d, d_tilde, _ = rasterizer.make_depth_pair(model, det.pose, scene_depth, cam, input_size)
    tz = float(det.pose.translation[2])
    return np.stack([
        rasterizer.normalize_depth_crop(d, tz, model.radius),
        rasterizer.normalize_depth_crop(d_tilde, tz, model.radius),
    ], axis=-1)


def cloud_input(model: ObjectModel, det: datagen.DetectionRecord,
                scene_cloud: cloudprep.PointCloud, n_points: int,
                seed) -> np.ndarray | None:
    """Canonicalized, resampled (P, 3) scene crop; None when support is too thin."""
    crop = cloudprep.crop_canonicalize(scene_cloud, det.pose, model)
    if len(crop) < cloudprep.MIN_SUPPORT_POINTS:
        return None
    return cloudprep.resample(crop, n_points, seed).points.astype(np.float32)


def materialize(cfg: RunConfig, manifest_dir, model: ObjectModel,
                drop_insufficient: bool, log=None):
    """Network inputs for every manifest record.

    Returns (depth DepthDataset, cloud CloudDataset, cloud_row_of_record,
    manifest).  Records whose cloud crop has fewer than MIN_SUPPORT_POINTS
    points are dropped from the cloud set; cloud_row_of_record maps record
    index -> row or -1.
    """
    manifest_dir = Path(manifest_dir)
    manifest = datagen.load_manifest(manifest_dir / "manifest.json")
    cache = _SceneCache(manifest_dir, manifest)
    mcloud = cloudprep.model_cloud(model, cfg.train.points, seed=cfg.model.seed)
    mpoints = mcloud.points.astype(np.float32)

    xs, ys = [], []
    clouds, cloud_rows, cy = [], [], []
    for i, det in enumerate(manifest.records):
        xs.append(depth_pair_input(model, det, cache.depth(det.scene_id), cfg.camera,
                                   cfg.train.input_size))
        label_idx = LABEL_INDEX[det.gt_label]
        ys.append(label_idx)
        pts = cloud_input(model, det, cache.cloud(det.scene_id), cfg.train.points,
                          seed=(cfg.infer.seed, i))
        if pts is None:
            cloud_rows.append(-1)
            if not drop_insufficient:
                raise DataError(f"record {i} has insufficient cloud support")
        else:
            cloud_rows.append(len(clouds))
            clouds.append(pts)
            cy.append(label_idx)
        if log and (i + 1) % 500 == 0:
            log(f"materialized {i + 1}/{len(manifest.records)} records")

    depth_ds = DepthDataset(np.stack(xs), np.array(ys, dtype=np.int64))
    cloud_ds = CloudDataset(
        np.stack(clouds) if clouds else np.zeros((0, cfg.train.points, 3), np.float32),
        mpoints, np.array(cy, dtype=np.int64))
    return depth_ds, cloud_ds, np.array(cloud_rows), manifest


# ----------------------------------------------------------------- train/infer

def run_training(cfg: RunConfig, streams=("depth", "cloud"), model=None, log=None):
    """Train the requested streams on the train split; writes checkpoints + history."""
    model = model or build_object_model(cfg)
    train_dir = cfg.out_path / "dataset_train"
    if not (train_dir / "manifest.json").exists():
        raise DataError(f"missing training dataset at {train_dir}; run make-dataset first")
    depth_ds, cloud_ds, _, _ = materialize(cfg, train_dir, model,
                                           drop_insufficient=True, log=log)
    ckpt_dir = cfg.out_path / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for stream in streams:
        data = depth_ds if stream == "depth" else cloud_ds
        arch = cfg.depth_arch if stream == "depth" else cfg.cloud_arch
        if log:
            log(f"training {stream} stream on {len(data.y)} samples")
        net, history = train_stream(data, stream, cfg.train, arch=arch, log=log)
        save_checkpoint(net, ckpt_dir / f"{stream}.vnw", seed=cfg.train.seed,
                        epoch=cfg.train.epochs)
        with open(ckpt_dir / f"history_{stream}.json", "w", encoding="utf-8") as fh:
            json.dump(history, fh, indent=2, sort_keys=True)
            fh.write("\n")
        results[stream] = (net, history)
    write_resolved_config(cfg, ckpt_dir)
    return results


def _batched_probs(kind: str, net: NetParams, inputs, model_pts=None, batch=64):
    n = len(inputs)
    out = np.zeros((n, 2))
    for start in range(0, n, batch):
        sl = slice(start, min(start + batch, n))
        if kind == "depth":
            logits, _ = depth_forward(inputs[sl], net, False, 0)
        else:
            mb = np.broadcast_to(model_pts, (sl.stop - sl.start,) + model_pts.shape)
            logits, _ = cloud_forward(inputs[sl], mb, net, False, 0)
        out[sl] = softmax(logits.astype(np.float64))
    return out


def run_inference(cfg: RunConfig, manifest_dir, out_path, model=None, log=None,
                  overlays: bool | None = None) -> dict:
    """Annotate a manifest with stream/fused probabilities and predicted labels.

    Writes a new annotated manifest; the input manifest is never modified.
    Detections without cloud support are auto-classified invalid.
    """
    model = model or build_object_model(cfg)
    ckpt_dir = cfg.out_path / "checkpoints"
    for stream in ("depth", "cloud"):
        if not (ckpt_dir / f"{stream}.vnw").exists():
            raise DataError(f"missing checkpoint {ckpt_dir / f'{stream}.vnw'}; train first")
    depth_net, _ = load_checkpoint(ckpt_dir / "depth.vnw")
    cloud_net, _ = load_checkpoint(ckpt_dir / "cloud.vnw")
    _check_arch(depth_net.arch, cfg.depth_arch, "depth")
    _check_arch(cloud_net.arch, cfg.cloud_arch, "cloud")

    depth_ds, cloud_ds, cloud_rows, manifest = materialize(
        cfg, manifest_dir, model, drop_insufficient=True, log=log)
    p_depth = _batched_probs("depth", depth_net, depth_ds.x, batch=cfg.infer.batch)
    p_cloud_rows = _batched_probs("cloud", cloud_net, cloud_ds.scene,
                                  model_pts=cloud_ds.model, batch=cfg.infer.batch)

    with open(Path(manifest_dir) / "manifest.json", "r", encoding="utf-8") as fh:
        manifest_json = json.load(fh)

    vi = LABEL_INDEX[VALID]
    annotated = []
    for i, robj in enumerate(manifest_json["records"]):
        row = int(cloud_rows[i])
        entry = dict(robj)
        pd_valid = float(p_depth[i, vi])
        if row < 0:
            pc_valid = 0.0
            fused = 0.0
            pred = INVALID
            entry["insufficient_support"] = True
        else:
            pc_valid = float(p_cloud_rows[row, vi])
            fused_prob, pred = fuse(Prob2(pd_valid, 1.0 - pd_valid),
                                    Prob2(pc_valid, 1.0 - pc_valid))
            fused = fused_prob.p_valid
            entry["insufficient_support"] = False
        entry["p_valid_depth"] = pd_valid
        entry["p_valid_cloud"] = pc_valid
        entry["p_valid_fused"] = fused
        entry["pred_label"] = pred
        annotated.append(entry)

    out_obj = dict(manifest_json)
    out_obj["records"] = annotated
    out_obj["checkpoints"] = {"depth": "checkpoints/depth.vnw", "cloud": "checkpoints/cloud.vnw"}
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(out_obj, fh, indent=2, sort_keys=True)
        fh.write("\n")

    want_overlays = cfg.infer.overlays if overlays is None else overlays
    if want_overlays:
        _write_overlays(cfg, model, manifest, annotated, out_path.parent / "overlays")
    write_resolved_config(cfg, out_path.parent)
    return out_obj


def _check_arch(loaded, expected, name: str) -> None:
    if loaded.to_json() != expected.to_json():
        raise DataError(
            f"{name} checkpoint architecture {loaded.to_json()} does not match "
            f"the configured {expected.to_json()}")


def _write_overlays(cfg, model, manifest, annotated, out_dir: Path) -> None:
    """Per-scene silhouette masks of predicted-valid vs predicted-invalid detections."""
    out_dir.mkdir(parents=True, exist_ok=True)
    by_scene: dict = {}
    for entry in annotated:
        by_scene.setdefault(entry["scene"], []).append(entry)
    from .geometry import pose_from_json

    for scene_id, entries in sorted(by_scene.items()):
        masks = {VALID: np.zeros((cfg.camera.height, cfg.camera.width), bool),
                 INVALID: np.zeros((cfg.camera.height, cfg.camera.width), bool)}
        for entry in entries:
            img = rasterizer.render_depth(model, [pose_from_json(entry["pose"])], cfg.camera)
            masks[entry["pred_label"]] |= np.isfinite(img.pixels)
        rasterizer.write_pgm8(masks[VALID], out_dir / f"{scene_id}_pred_valid.pgm")
        rasterizer.write_pgm8(masks[INVALID], out_dir / f"{scene_id}_pred_invalid.pgm")


# ------------------------------------------------------------------- evaluate

def run_evaluation(cfg: RunConfig, annotated_path, out_prefix, model=None) -> dict:
    """ACA/OA plus the confidence-replacement AP experiment on an annotated manifest."""
    model = model or build_object_model(cfg)
    annotated_path = Path(annotated_path)
    try:
        with open(annotated_path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"annotated manifest not found: {annotated_path}") from exc

    records = obj["records"]
    if any("pred_label" not in r for r in records):
        raise DataError("manifest is not annotated; run infer first")

    cm = evaluation.confusion((r["label"], r["pred_label"]) for r in records)
    aca_pct = evaluation.aca(cm)
    oa_pct = evaluation.oa(cm)

    from .geometry import pose_from_json

    gts = {sid: GroundTruthSet([pose_from_json(p) for p in sobj["gts"]], obj["model_id"])
           for sid, sobj in obj["scenes"].items()}
    dets_before = [(r["scene"], pose_from_json(r["pose"]), float(r["confidence"]))
                   for r in records]
    dets_after = [(r["scene"], pose_from_json(r["pose"]), float(r["p_valid_fused"]))
                  for r in records]
    ap_before = evaluation.average_precision(dets_before, gts, model)
    ap_after = evaluation.average_precision(dets_after, gts, model)

    rep = evaluation.report([{
        "name": obj["model_id"], "aca": aca_pct, "oa": oa_pct,
        "ap_before": ap_before, "ap_after": ap_after,
    }])
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    evaluation.save_report(rep, out_prefix.with_suffix(".json"),
                           out_prefix.with_suffix(".txt"))
    summary = {
        "confusion": {"tp": cm.tp, "fn": cm.fn, "tn": cm.tn, "fp": cm.fp},
        "aca": aca_pct, "oa": oa_pct, "ap_before": ap_before, "ap_after": ap_after,
    }
    with open(out_prefix.parent / (out_prefix.name + "_summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_resolved_config(cfg, out_prefix.parent)
    return summary


def combine_reports(paths, out_prefix) -> evaluation.EvalReport:
    """Merge single-object report JSONs into one multi-object table."""
    rows = []
    for p in paths:
        with open(p, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        rows.extend(obj["objects"])
    rep = evaluation.report(rows)
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    evaluation.save_report(rep, out_prefix.with_suffix(".json"),
                           out_prefix.with_suffix(".txt"))
    return rep
