"""Synthetic objects, scenes, and corrupted detections for validator training.

The detection simulator plays the role of an upstream pose estimator whose
accuracy hovers near 50%: each ground-truth instance spawns either a lightly
perturbed pose, a heavily corrupted one, or occasionally a spurious pose in
empty space.  Labels are always assigned afterwards by the pose metric, never
by the generating mode, so corruptions that happen to land on a symmetry
element are correctly labeled valid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cloudprep, rasterizer
from .errors import DataError
from .geometry import (
    INVALID,
    VALID,
    GroundTruthSet,
    Mesh,
    ObjectModel,
    Pose,
    SymmetrySpec,
    label_detection,
    pose_compose,
    pose_from_json,
    pose_to_json,
    random_rotation,
    rotation_about_axis,
)

TOY_KINDS = ("wedge", "bar2", "cross4", "cone_rev")


def make_toy_mesh(kind: str) -> tuple[Mesh, SymmetrySpec]:
    """Unit-scale toy objects with exactly the declared proper symmetry.

    wedge: none; bar2: cyclic-2 about z; cross4: cyclic-4 about z;
    cone_rev: revolution about z (64 facets).  All symmetry axes pass through
    the mesh-frame origin, and tapers along z kill the accidental flip
    symmetries a plain box or untapered cross would have.
    """
    if kind == "wedge":
        verts = np.array(
            [
                [-0.45, -0.30, -0.20],
                [0.55, -0.25, -0.15],
                [-0.35, 0.45, -0.10],
                [0.05, 0.05, 0.50],
            ]
        )
        faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
        return Mesh(verts, faces), SymmetrySpec("none")
    if kind == "bar2":
        mesh = _tapered_box(half_length=0.5, half_width=0.15, half_height=0.10,
                            top_shrink=0.60)
        return mesh, SymmetrySpec("cyclic", order=2, axis=[0.0, 0.0, 1.0])
    if kind == "cross4":
        bar = _tapered_box(half_length=0.5, half_width=0.11, half_height=0.09,
                           top_shrink=0.64)
        rot90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        verts = np.concatenate([bar.vertices, bar.vertices @ rot90.T])
        faces = np.concatenate([bar.faces, bar.faces + len(bar.vertices)])
        return Mesh(verts, faces), SymmetrySpec("cyclic", order=4, axis=[0.0, 0.0, 1.0])
    if kind == "cone_rev":
        return _cone(radius=0.35, z_base=-0.22, z_apex=0.43, facets=64), SymmetrySpec(
            "revolution", axis=[0.0, 0.0, 1.0]
        )
    raise ValueError(f"unknown toy kind {kind!r}; choose from {TOY_KINDS}")


def _tapered_box(half_length: float, half_width: float, half_height: float,
                 top_shrink: float) -> Mesh:
    """Box whose top rectangle is shrunk in y, leaving only 180-degree z symmetry."""
    hw_top = half_width * top_shrink
    verts = np.array(
        [
            [-half_length, -half_width, -half_height],
            [half_length, -half_width, -half_height],
            [half_length, half_width, -half_height],
            [-half_length, half_width, -half_height],
            [-half_length, -hw_top, half_height],
            [half_length, -hw_top, half_height],
            [half_length, hw_top, half_height],
            [-half_length, hw_top, half_height],
        ]
    )
    faces = np.array(
        [
            [0, 2, 1], [0, 3, 2],  # bottom
            [4, 5, 6], [4, 6, 7],  # top
            [0, 1, 5], [0, 5, 4],  # -y side
            [2, 3, 7], [2, 7, 6],  # +y side
            [1, 2, 6], [1, 6, 5],  # +x cap
            [3, 0, 4], [3, 4, 7],  # -x cap
        ]
    )
    return Mesh(verts, faces)


def _cone(radius: float, z_base: float, z_apex: float, facets: int) -> Mesh:
    ang = 2.0 * math.pi * np.arange(facets) / facets
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang),
                     np.full(facets, z_base)], axis=1)
    verts = np.concatenate([ring, [[0.0, 0.0, z_apex]], [[0.0, 0.0, z_base]]])
    apex, center = facets, facets + 1
    side = [[j, (j + 1) % facets, apex] for j in range(facets)]
    base = [[(j + 1) % facets, j, center] for j in range(facets)]
    return Mesh(verts, np.array(side + base))


@dataclass
class SceneBox:
    """Axis-aligned translation sampling box in camera coordinates."""

    x: tuple = (-0.4, 0.4)
    y: tuple = (-0.4, 0.4)
    z: tuple = (1.3, 2.5)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.array(
            [rng.uniform(*self.x), rng.uniform(*self.y), rng.uniform(*self.z)]
        )

    def to_json(self) -> dict:
        return {"x": list(self.x), "y": list(self.y), "z": list(self.z)}

    @staticmethod
    def from_json(obj: dict) -> "SceneBox":
        return SceneBox(tuple(obj["x"]), tuple(obj["y"]), tuple(obj["z"]))


@dataclass
class NoiseConfig:
    """Detection corruption mixture; mode weights target a roughly even label split."""

    p_perturb: float = 0.5
    p_corrupt: float = 0.45
    p_spurious: float = 0.05
    perturb_rot_deg: float = 5.0
    perturb_trans_frac: float = 0.02  # of the object diameter
    corrupt_rot_deg: tuple = (30.0, 180.0)
    corrupt_trans_frac: tuple = (0.3, 1.0)  # of the object radius
    confidence_range: tuple = (0.4, 1.0)
    min_confidence: float | None = None  # optional manifest pre-filter

    def __post_init__(self):
        total = self.p_perturb + self.p_corrupt + self.p_spurious
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mode weights must sum to 1, got {total}")

    def to_json(self) -> dict:
        return {
            "p_perturb": self.p_perturb, "p_corrupt": self.p_corrupt,
            "p_spurious": self.p_spurious,
            "perturb_rot_deg": self.perturb_rot_deg,
            "perturb_trans_frac": self.perturb_trans_frac,
            "corrupt_rot_deg": list(self.corrupt_rot_deg),
            "corrupt_trans_frac": list(self.corrupt_trans_frac),
            "confidence_range": list(self.confidence_range),
            "min_confidence": self.min_confidence,
        }


@dataclass(eq=False)
class SceneRecord:
    scene_id: str
    gt: GroundTruthSet
    depth_path: str
    cloud_path: str
    camera: rasterizer.CameraIntrinsics

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "gts": [pose_to_json(p) for p in self.gt.poses],
            "depth_file": self.depth_path,
            "cloud_file": self.cloud_path,
            "camera": self.camera.to_json(),
        }

    @staticmethod
    def from_json(obj: dict, model_id: str = "object") -> "SceneRecord":
        return SceneRecord(
            scene_id=obj["scene_id"],
            gt=GroundTruthSet([pose_from_json(p) for p in obj["gts"]], model_id),
            depth_path=obj["depth_file"],
            cloud_path=obj["cloud_file"],
            camera=rasterizer.CameraIntrinsics.from_json(obj["camera"]),
        )


@dataclass(eq=False)
class DetectionRecord:
    pose: Pose
    detector_confidence: float
    gt_label: str
    gt_distance: float
    scene_id: str
    matched_gt: int = -1
    validator_prob: object = None  # Prob2, filled at inference


@dataclass
class DatasetManifest:
    model_id: str
    symmetry: SymmetrySpec
    seed: int
    scenes: dict = field(default_factory=dict)  # scene_id -> SceneRecord
    records: list = field(default_factory=list)

    @property
    def counts(self) -> dict:
        out = {VALID: 0, INVALID: 0}
        for r in self.records:
            out[r.gt_label] += 1
        return out


def generate_scene(
    model: ObjectModel,
    n_instances: int,
    cam: rasterizer.CameraIntrinsics,
    seed: int,
    out_dir,
    scene_id: str = "scene_0000",
    box: SceneBox | None = None,
    max_trials: int = 10_000,
) -> SceneRecord:
    """Place instances with rejection sampling, render depth, back-project the cloud.

    Instance centers keep a pairwise separation of at least 0.9 * (r_i + r_j).
    """
    box = box or SceneBox()
    rng = np.random.default_rng(seed)
    min_sep = 0.9 * 2.0 * model.radius
    trials = 0
    centers: list[np.ndarray] = []
    # dart throwing with restarts: a bad prefix would otherwise block forever
    while len(centers) < n_instances:
        if trials >= max_trials:
            raise DataError(
                f"scene too crowded: placed {len(centers)}/{n_instances} instances "
                f"after {max_trials} trials")
        trials += 1
        t = box.sample(rng)
        if any(np.linalg.norm(t - c) < min_sep for c in centers):
            if trials % 200 == 0:
                centers = []
            continue
        centers.append(t)
    poses = [Pose(random_rotation(rng), c) for c in centers]

    depth = rasterizer.render_depth(model, poses, cam)
    cloud = rasterizer.backproject(depth, cam)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    depth_file = f"{scene_id}.dpr"
    cloud_file = f"{scene_id}.xyz"
    rasterizer.write_dpr(depth, out_dir / depth_file)
    cloudprep.save_xyz(cloud, out_dir / cloud_file)
    return SceneRecord(
        scene_id=scene_id,
        gt=GroundTruthSet(poses, model.model_id),
        depth_path=depth_file,
        cloud_path=cloud_file,
        camera=cam,
    )


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _perturbed_pose(gt: Pose, model: ObjectModel, cfg: NoiseConfig,
                    rng: np.random.Generator) -> Pose:
    angle = math.radians(rng.uniform(0.0, cfg.perturb_rot_deg))
    delta_r = rotation_about_axis(_random_unit(rng), angle)
    offset = _random_unit(rng) * rng.uniform(0.0, cfg.perturb_trans_frac * model.diameter)
    return Pose(gt.rotation @ delta_r, gt.translation + offset)


def _corrupted_pose(gt: Pose, model: ObjectModel, cfg: NoiseConfig,
                    rng: np.random.Generator) -> Pose:
    mode = rng.choice(["rot", "trans", "both"])
    rot = gt.rotation
    t = gt.translation.copy()
    if mode in ("rot", "both"):
        angle = math.radians(rng.uniform(*cfg.corrupt_rot_deg))
        rot = rot @ rotation_about_axis(_random_unit(rng), angle)
    if mode in ("trans", "both"):
        t = t + _random_unit(rng) * (rng.uniform(*cfg.corrupt_trans_frac) * model.radius)
    return Pose(rot, t)


def simulate_detections(
    scene: SceneRecord,
    model: ObjectModel,
    noise_cfg: NoiseConfig,
    seed: int,
    box: SceneBox | None = None,
) -> list[DetectionRecord]:
    """One detection per ground-truth instance, labeled by the pose metric."""
    rng = np.random.default_rng(seed)
    box = box or SceneBox()
    out = []
    modes = ["perturb", "corrupt", "spurious"]
    weights = [noise_cfg.p_perturb, noise_cfg.p_corrupt, noise_cfg.p_spurious]
    for gt in scene.gt.poses:
        mode = rng.choice(modes, p=weights)
        if mode == "perturb":
            det = _perturbed_pose(gt, model, noise_cfg, rng)
        elif mode == "corrupt":
            det = _corrupted_pose(gt, model, noise_cfg, rng)
        else:
            det = Pose(random_rotation(rng), box.sample(rng))
        conf = float(rng.uniform(*noise_cfg.confidence_range))
        if scene.gt.poses:
            label, dist, matched = label_detection(det, scene.gt, model)
        else:
            label, dist, matched = INVALID, math.inf, -1
        out.append(DetectionRecord(det, conf, label, dist, scene.scene_id, matched))
    return out


@dataclass
class DatasetConfig:
    scenes: int = 100
    instances: tuple = (2, 3)
    per_class: int | None = None  # balance target; None keeps the minority count
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "scenes": self.scenes, "instances": list(self.instances),
            "per_class": self.per_class, "seed": self.seed,
        }


def build_dataset(
    model: ObjectModel,
    cam: rasterizer.CameraIntrinsics,
    cfg: DatasetConfig,
    noise_cfg: NoiseConfig,
    out_dir,
    box: SceneBox | None = None,
    log=None,
) -> DatasetManifest:
    """Generate scenes + detections, balance the classes, write the manifest."""
    box = box or SceneBox()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(model.model_id, model.symmetry, cfg.seed)
    records = []
    for i in range(cfg.scenes):
        scene_id = f"scene_{i:04d}"
        n_inst = int(np.random.default_rng((cfg.seed, i, 0)).integers(
            cfg.instances[0], cfg.instances[1] + 1))
        scene = generate_scene(model, n_inst, cam, (cfg.seed, i, 1), out_dir,
                               scene_id, box)
        manifest.scenes[scene_id] = scene
        records.extend(simulate_detections(scene, model, noise_cfg, (cfg.seed, i, 2), box))
        if log and (i + 1) % 50 == 0:
            log(f"generated {i + 1}/{cfg.scenes} scenes")

    if noise_cfg.min_confidence is not None:
        records = [r for r in records if r.detector_confidence > noise_cfg.min_confidence]

    pos = [r for r in records if r.gt_label == VALID]
    neg = [r for r in records if r.gt_label == INVALID]
    if not pos or not neg:
        raise DataError(
            f"degenerate dataset: {len(pos)} valid vs {len(neg)} invalid detections")
    target = min(len(pos), len(neg))
    if cfg.per_class is not None:
        if target < cfg.per_class:
            raise DataError(
                f"not enough detections to balance at {cfg.per_class} per class: "
                f"have {len(pos)} valid, {len(neg)} invalid")
        target = cfg.per_class
    order = {id(r): i for i, r in enumerate(records)}
    rng = np.random.default_rng((cfg.seed, 999_983))
    keep = []
    for bucket in (pos, neg):
        sel = rng.choice(len(bucket), size=target, replace=False)
        keep.extend(bucket[j] for j in sorted(sel))
    # deterministic order: original generation order (scene by scene)
    manifest.records = sorted(keep, key=lambda r: order[id(r)])
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def save_manifest(manifest: DatasetManifest, path) -> None:
    obj = {
        "model_id": manifest.model_id,
        "symmetry": manifest.symmetry.to_json(),
        "seed": manifest.seed,
        "counts": manifest.counts,
        "scenes": {sid: s.to_json() for sid, s in sorted(manifest.scenes.items())},
        "records": [
            {
                "scene": r.scene_id,
                "depth_file": manifest.scenes[r.scene_id].depth_path,
                "cloud_file": manifest.scenes[r.scene_id].cloud_path,
                "pose": pose_to_json(r.pose),
                "confidence": r.detector_confidence,
                "label": r.gt_label,
                "distance": r.gt_distance,
                "matched_gt": r.matched_gt,
            }
            for r in manifest.records
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    model_id = obj["model_id"]
    manifest = DatasetManifest(
        model_id=model_id,
        symmetry=SymmetrySpec.from_json(obj["symmetry"]),
        seed=obj["seed"],
    )
    for sid, sobj in obj["scenes"].items():
        manifest.scenes[sid] = SceneRecord.from_json(sobj, model_id)
    for robj in obj["records"]:
        manifest.records.append(
            DetectionRecord(
                pose=pose_from_json(robj["pose"]),
                detector_confidence=float(robj["confidence"]),
                gt_label=robj["label"],
                gt_distance=float(robj["distance"]),
                scene_id=robj["scene"],
                matched_gt=int(robj.get("matched_gt", -1)),
            )
        )
    return manifest
