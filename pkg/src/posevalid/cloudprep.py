"""Point-cloud stream inputs: canonical model cloud and cropped scene clouds."""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from .errors import DataError, InsufficientSupportError
from .geometry import ObjectModel, Pose, sample_surface

CROP_RADIUS_FACTOR = 1.2

# crops with fewer points carry no usable evidence: auto-invalid at inference,
# skipped at training
MIN_SUPPORT_POINTS = 16


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray  # (N, 3) meters

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.points.size and not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


_model_cloud_cache: "weakref.WeakKeyDictionary[ObjectModel, dict]" = weakref.WeakKeyDictionary()


def model_cloud(model: ObjectModel, n: int = 1024, seed: int = 0) -> PointCloud:
    """Area-weighted surface samples of the model in its canonical frame.

    The canonical frame is already centroid-centered by build_model.  Results
    are cached per (model, n, seed) since the model cloud never changes.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    per_model = _model_cloud_cache.setdefault(model, {})
    key = (n, seed)
    if key not in per_model:
        rng = np.random.default_rng(seed)
        per_model[key] = PointCloud(sample_surface(model.mesh, n, rng))
    return per_model[key]


def crop_canonicalize(scene: PointCloud, theta_hat: Pose, model: ObjectModel) -> PointCloud:
    """Inverse-transform the scene by the hypothesis and keep the ROI ball.

    Points map to q = R^T (x - t); those with |q| <= 1.2 * radius survive.  A
    correct hypothesis therefore lands the instance in the model's canonical
    frame regardless of where it sat in the scene.
    """
    if len(scene) == 0:
        return PointCloud(np.zeros((0, 3)))
    q = (scene.points - theta_hat.translation) @ theta_hat.rotation
    keep = np.linalg.norm(q, axis=1) <= CROP_RADIUS_FACTOR * model.radius
    return PointCloud(q[keep])


def resample(cloud: PointCloud, n: int, seed: int = 0) -> PointCloud:
    """Fixed-size resample: without replacement when enough points, else with."""
    count = len(cloud)
    if count == 0:
        raise InsufficientSupportError("cannot resample an empty point cloud")
    rng = np.random.default_rng(seed)
    if count >= n:
        idx = rng.choice(count, size=n, replace=False)
    else:
        idx = rng.choice(count, size=n, replace=True)
    return PointCloud(cloud.points[idx])


def shuffle_points(cloud: PointCloud, seed: int = 0) -> PointCloud:
    rng = np.random.default_rng(seed)
    return PointCloud(cloud.points[rng.permutation(len(cloud))])


def save_xyz(cloud: PointCloud, path) -> None:
    """ASCII cloud: one 'x y z' triple per line; '#' lines are comments."""
    lines = [f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in cloud.points]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# posevalid point cloud, meters\n")
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def load_xyz(path) -> PointCloud:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'x y z'")
            rows.append([float(v) for v in parts])
    return PointCloud(np.array(rows) if rows else np.zeros((0, 3)))
