"""Rigid poses, object models, symmetry groups, and the representative pose metric.

A pose places the object's canonical (centroid-centered) frame in camera
coordinates.  Poses of symmetric objects are compared through sets of
Euclidean "representatives" built from the square root of the surface-sample
covariance; the minimum representative distance then equals the RMS
displacement of the object's surface between the two placements.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

VALID = "valid"
INVALID = "invalid"

# a detection counts as a true positive below this fraction of the object diameter
TP_DIAMETER_FRACTION = 0.1

# discretization of the continuous revolution group used for sampling/symmetrization
REVOLUTION_STEPS = 64

_ORTHO_TOL = 1e-9


@dataclass(eq=False)
class Pose:
    """Rigid transform: x_camera = rotation @ x_model + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
        det = np.linalg.det(self.rotation)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation must have determinant +1, got {det!r}")


def identity_pose() -> Pose:
    return Pose(np.eye(3), np.zeros(3))


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Apply b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (normalized) axis."""
    k = np.asarray(axis, dtype=np.float64).reshape(3)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * kx + (1.0 - math.cos(angle)) * (kx @ kx)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation via a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def pose_to_json(p: Pose) -> dict:
    return {"r": [float(v) for v in p.rotation.reshape(-1)], "t": [float(v) for v in p.translation]}


def pose_from_json(obj: dict) -> Pose:
    if "r" not in obj or "t" not in obj:
        raise DataError("pose JSON must contain 'r' (9 numbers) and 't' (3 numbers)")
    r = np.asarray(obj["r"], dtype=np.float64)
    t = np.asarray(obj["t"], dtype=np.float64)
    if r.size != 9 or t.size != 3:
        raise DataError(f"pose JSON has wrong sizes: r={r.size}, t={t.size}")
    return Pose(r.reshape(3, 3), t)


@dataclass
class SymmetrySpec:
    """Proper symmetry of an object: none, cyclic of a given order, or revolution.

    The axis is a direction in the model frame; the rotation axis is the line
    through the model-frame origin along it.
    """

    kind: str = "none"
    order: int = 0
    axis: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "cyclic", "revolution"):
            raise ValueError(f"unknown symmetry kind {self.kind!r}")
        if self.kind == "cyclic" and self.order < 2:
            raise ValueError("cyclic symmetry needs order >= 2")
        if self.kind in ("cyclic", "revolution"):
            if self.axis is None:
                raise ValueError(f"{self.kind} symmetry needs an axis")
            self.axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
            n = np.linalg.norm(self.axis)
            if abs(n - 1.0) > _ORTHO_TOL:
                self.axis = self.axis / n

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "cyclic":
            out["order"] = int(self.order)
        if self.axis is not None:
            out["axis"] = [float(v) for v in self.axis]
        return out

    @staticmethod
    def from_json(obj: dict) -> "SymmetrySpec":
        return SymmetrySpec(
            kind=obj.get("kind", "none"),
            order=int(obj.get("order", 0)),
            axis=obj.get("axis"),
        )


def symmetry_group(sym: SymmetrySpec, revolution_steps: int = REVOLUTION_STEPS) -> np.ndarray:
    """Rotation matrices of the (discretized) proper symmetry group, identity first."""
    if sym.kind == "none":
        return np.eye(3)[None]
    steps = sym.order if sym.kind == "cyclic" else revolution_steps
    return np.stack(
        [rotation_about_axis(sym.axis, 2.0 * math.pi * j / steps) for j in range(steps)]
    )


@dataclass(eq=False)
class Mesh:
    """Triangle mesh: vertices in meters, faces as vertex index triples."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)


def load_obj(path) -> Mesh:
    """Parse ASCII OBJ: 'v x y z' vertices, 'f i j k' triangles (1-based)."""
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise DataError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = [tok.split("/")[0] for tok in parts[1:]]
                if len(idx) != 3:
                    raise DataError(f"{path}:{lineno}: only triangular faces are supported")
                faces.append([int(i) - 1 for i in idx])
            # every other record type is ignored
    if not verts or not faces:
        raise DataError(f"{path}: no triangles found")
    mesh = Mesh(np.array(verts), np.array(faces))
    if mesh.faces.min() < 0 or mesh.faces.max() >= len(mesh.vertices):
        raise DataError(f"{path}: face index out of range")
    return mesh


def save_obj(mesh: Mesh, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def triangle_areas(mesh: Mesh) -> np.ndarray:
    tri = mesh.vertices[mesh.faces]
    return 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1
    )


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """n points drawn area-weighted and uniformly within each triangle."""
    areas = triangle_areas(mesh)
    total = areas.sum()
    if total <= 0.0:
        raise DataError("degenerate mesh: zero total surface area")
    idx = rng.choice(len(areas), size=n, p=areas / total)
    tri = mesh.vertices[mesh.faces[idx]]
    r1 = rng.random(n)
    r2 = rng.random(n)
    s = np.sqrt(r1)
    a = (1.0 - s)[:, None]
    b = (s * (1.0 - r2))[:, None]
    c = (s * r2)[:, None]
    return a * tri[:, 0] + b * tri[:, 1] + c * tri[:, 2]


def _max_pairwise_distance(pts: np.ndarray) -> float:
    best = 0.0
    step = max(1, 4_000_000 // max(len(pts), 1))
    for i in range(0, len(pts), step):
        chunk = pts[i : i + step]
        d2 = ((chunk[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


@dataclass(eq=False)
class ObjectModel:
    """Canonical object: centered mesh, surface samples, and metric quantities.

    lam is the symmetric PSD square root of the (symmetry-averaged) surface
    sample covariance; it is invariant under every symmetry group element.
    """

    mesh: Mesh
    surface_samples: np.ndarray
    centroid: np.ndarray
    radius: float
    diameter: float
    lam: np.ndarray
    symmetry: SymmetrySpec
    model_id: str = "object"


def build_model(
    mesh: Mesh,
    symmetry: SymmetrySpec | None = None,
    n_samples: int = 8192,
    seed: int = 0,
    model_id: str = "object",
) -> ObjectModel:
    """Derive the canonical model from a mesh.

    Samples are drawn area-weighted and then replicated over the symmetry
    group (about the axis through the input-frame origin), which makes the
    sample covariance exactly group-invariant; everything is finally
    re-centered at the sample centroid.
    """
    symmetry = symmetry or SymmetrySpec()
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    group = symmetry_group(symmetry)
    rng = np.random.default_rng(seed)
    n_base = -(-n_samples // len(group))
    base = sample_surface(mesh, n_base, rng)
    samples = np.concatenate([base @ g.T for g in group])

    centroid = samples.mean(axis=0)
    samples = samples - centroid
    centered = Mesh(mesh.vertices - centroid, mesh.faces)

    radius = float(np.linalg.norm(samples, axis=1).max())
    diameter = _max_pairwise_distance(samples)

    cov = samples.T @ samples / len(samples)
    cov = np.mean([g.T @ cov @ g for g in group], axis=0)
    evals, evecs = np.linalg.eigh(cov)
    lam = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    lam = 0.5 * (lam + lam.T)

    return ObjectModel(
        mesh=centered,
        surface_samples=samples,
        centroid=centroid,
        radius=radius,
        diameter=diameter,
        lam=lam,
        symmetry=symmetry,
        model_id=model_id,
    )


def _axis_frame(axis: np.ndarray) -> np.ndarray:
    """Orthonormal basis with the symmetry axis as third column."""
    a = axis / np.linalg.norm(axis)
    h = np.array([0.0, 0.0, 1.0]) if abs(a[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(h, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return np.stack([e1, e2, a], axis=1)


def representatives(p: Pose, model: ObjectModel) -> np.ndarray:
    """Euclidean representative vectors of a pose (one row per group element).

    none/cyclic: rows (t | vec(R @ M_j @ lam)); revolution: single row
    (t | lam_axis * R @ axis).
    """
    sym = model.symmetry
    if sym.kind == "revolution":
        lam_axis = float(sym.axis @ model.lam @ sym.axis)
        return np.concatenate([p.translation, lam_axis * (p.rotation @ sym.axis)])[None]
    group = symmetry_group(sym)
    rows = [
        np.concatenate([p.translation, (p.rotation @ g @ model.lam).reshape(-1)])
        for g in group
    ]
    return np.stack(rows)


def _revolution_rot_term(a: Pose, b: Pose, model: ObjectModel) -> tuple[float, float]:
    """Min over the revolution angle of |Ra lam - Rb M(phi) lam|_F^2 and the optimal phi.

    The angle-dependent trace is A cos(phi) + B sin(phi), maximal at
    atan2(B, A); the minimum is then evaluated as a direct Frobenius
    difference, which stays exact near zero where the trace form would
    cancel catastrophically.
    """
    axis = model.symmetry.axis
    cov = model.lam @ model.lam
    frame = _axis_frame(axis)
    k = b.rotation.T @ a.rotation
    x = frame.T @ (k @ cov) @ frame
    aa = x[0, 0] + x[1, 1]
    bb = x[1, 0] - x[0, 1]
    phi = math.atan2(bb, aa)
    diff = (a.rotation - b.rotation @ rotation_about_axis(axis, phi)) @ model.lam
    return float((diff * diff).sum()), phi


def pose_distance(a: Pose, b: Pose, model: ObjectModel) -> float:
    """Minimum Euclidean distance between the two poses' representative sets.

    Equals the RMS displacement of the model surface between the placements,
    minimized over the symmetry group.  Revolution uses the closed-form
    optimum over the continuous angle.
    """
    dt = a.translation - b.translation
    t2 = float(dt @ dt)
    if model.symmetry.kind == "revolution":
        rot2, _ = _revolution_rot_term(a, b, model)
        return math.sqrt(t2 + rot2)
    group = symmetry_group(model.symmetry)
    ra = np.stack([a.rotation @ g @ model.lam for g in group])
    rb = np.stack([b.rotation @ g @ model.lam for g in group])
    diff = ra[:, None, :, :] - rb[None, :, :, :]
    rot2 = float((diff * diff).sum(axis=(2, 3)).min())
    return math.sqrt(t2 + rot2)


def label_detection(
    theta_hat: Pose, gts: "GroundTruthSet", model: ObjectModel
) -> tuple[str, float, int]:
    """Label a detection against a scene's ground truths.

    Returns (label, distance to nearest ground truth, index of that ground
    truth).  A detection is valid iff the distance is strictly below
    TP_DIAMETER_FRACTION of the model diameter.  Ties pick the lowest index.
    """
    if not gts.poses:
        raise DataError("label_detection needs a non-empty ground-truth set")
    dists = [pose_distance(theta_hat, gt, model) for gt in gts.poses]
    best = int(np.argmin(dists))
    d = float(dists[best])
    label = VALID if d < TP_DIAMETER_FRACTION * model.diameter else INVALID
    return label, d, best


@dataclass
class GroundTruthSet:
    """Ground-truth instance poses of one scene."""

    poses: list = field(default_factory=list)
    model_id: str = "object"


def load_pose(path) -> Pose:
    with open(path, "r", encoding="utf-8") as fh:
        return pose_from_json(json.load(fh))


def save_pose(p: Pose, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(pose_to_json(p), fh, indent=2, sort_keys=True)
        fh.write("\n")
