"""Depth rendering of posed models, ROI cropping, and depth back-projection.

Pinhole camera at the origin looking down +z.  Continuous pixel coordinates
run over [0, width] x [0, height]; the center of pixel (row i, col j) is at
(u, v) = (j + 0.5, i + 0.5).  Depth images store camera-space z per pixel,
with +inf as the no-hit sentinel.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .cloudprep import PointCloud
from .errors import DataError
from .geometry import ObjectModel, Pose

ROI_RADIUS_FACTOR = 1.2


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.width < 8 or self.height < 8:
            raise ValueError("image must be at least 8x8")

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "near": self.near, "far": self.far,
        }

    @staticmethod
    def from_json(obj: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(
            fx=float(obj["fx"]), fy=float(obj["fy"]),
            cx=float(obj["cx"]), cy=float(obj["cy"]),
            width=int(obj["width"]), height=int(obj["height"]),
            near=float(obj["near"]), far=float(obj["far"]),
        )


@dataclass(eq=False)
class DepthImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) float32, +inf where nothing was hit

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32).reshape(self.height, self.width)


@dataclass
class RoiRect:
    center_u: float
    center_v: float
    half_extent: float

    def __post_init__(self):
        if self.half_extent <= 0:
            raise ValueError("roi half_extent must be positive")


def render_depth(model: ObjectModel, poses: list[Pose], cam: CameraIntrinsics) -> DepthImage:
    """Z-buffer rasterization of the model at each pose.

    Triangles with any camera-space vertex at z <= near are discarded (no
    clipping); fragments beyond far are culled.  Depth is perspective-correct
    (1/z interpolated in screen space).
    """
    buf = np.full((cam.height, cam.width), np.inf, dtype=np.float64)
    faces = model.mesh.faces
    for pose in poses:
        verts = model.mesh.vertices @ pose.rotation.T + pose.translation
        tris = verts[faces]  # (F, 3, 3)
        keep = (tris[:, :, 2] > cam.near).all(axis=1)
        for tri in tris[keep]:
            _raster_triangle(buf, tri, cam)
    return DepthImage(cam.width, cam.height, buf.astype(np.float32))


def _raster_triangle(buf: np.ndarray, tri: np.ndarray, cam: CameraIntrinsics) -> None:
    z = tri[:, 2]
    u = cam.fx * tri[:, 0] / z + cam.cx
    v = cam.fy * tri[:, 1] / z + cam.cy
    inv_z = 1.0 / z

    j0 = max(0, math.ceil(u.min() - 0.5))
    j1 = min(cam.width - 1, math.floor(u.max() - 0.5))
    i0 = max(0, math.ceil(v.min() - 0.5))
    i1 = min(cam.height - 1, math.floor(v.max() - 0.5))
    if j0 > j1 or i0 > i1:
        return

    area = (u[1] - u[0]) * (v[2] - v[0]) - (v[1] - v[0]) * (u[2] - u[0])
    if area == 0.0:
        return

    uu = np.arange(j0, j1 + 1, dtype=np.float64) + 0.5
    vv = np.arange(i0, i1 + 1, dtype=np.float64) + 0.5
    pu, pv = np.meshgrid(uu, vv)

    w0 = (u[2] - u[1]) * (pv - v[1]) - (v[2] - v[1]) * (pu - u[1])
    w1 = (u[0] - u[2]) * (pv - v[2]) - (v[0] - v[2]) * (pu - u[2])
    w2 = (u[1] - u[0]) * (pv - v[0]) - (v[1] - v[0]) * (pu - u[0])
    if area < 0.0:
        w0, w1, w2, denom = -w0, -w1, -w2, -area
    else:
        denom = area
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not inside.any():
        return

    num = w0 + w1 + w2
    den = w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = num / den
    ok = inside & (depth <= cam.far) & (den > 0)
    if not ok.any():
        return
    window = buf[i0 : i1 + 1, j0 : j1 + 1]
    np.copyto(window, np.minimum(window, depth), where=ok)


def roi_from_pose(p: Pose, model: ObjectModel, cam: CameraIntrinsics) -> RoiRect:
    """Square ROI around the projected hypothesis centroid, sized by the object radius."""
    tz = p.translation[2]
    if tz <= cam.near:
        raise DataError(f"detection at z={tz:.4f} is behind the near plane")
    cu = cam.fx * p.translation[0] / tz + cam.cx
    cv = cam.fy * p.translation[1] / tz + cam.cy
    half = max(cam.fx, cam.fy) * (ROI_RADIUS_FACTOR * model.radius) / tz
    return RoiRect(cu, cv, half)


def crop_resize(img: DepthImage, roi: RoiRect, out_size: int, far: float) -> DepthImage:
    """Bilinear crop of the square ROI to out_size x out_size.

    No-hit and out-of-bounds source pixels are treated as the far value so
    the interpolation stays finite; outputs at (or beyond) far map back to
    the +inf sentinel.
    """
    if out_size < 8:
        raise ValueError("out_size must be >= 8")
    src = np.where(np.isfinite(img.pixels), img.pixels.astype(np.float64), far)

    step = 2.0 * roi.half_extent / out_size
    us = roi.center_u - roi.half_extent + (np.arange(out_size) + 0.5) * step
    vs = roi.center_v - roi.half_extent + (np.arange(out_size) + 0.5) * step
    out = _bilinear_sample(src, us, vs, fill=far)
    out = np.where(out >= far - 1e-6, np.inf, out)
    return DepthImage(out_size, out_size, out.astype(np.float32))


def _bilinear_sample(src: np.ndarray, us: np.ndarray, vs: np.ndarray, fill: float) -> np.ndarray:
    """Sample src at the grid us x vs (continuous coords); outside -> fill."""
    h, w = src.shape
    x = us - 0.5
    y = vs - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0

    # gather the four neighbours with out-of-range cells replaced by fill
    def grab(yy, xx):
        oky = (yy >= 0) & (yy < h)
        okx = (xx >= 0) & (xx < w)
        vals = src[np.clip(yy, 0, h - 1)[:, None], np.clip(xx, 0, w - 1)[None, :]]
        return np.where(oky[:, None] & okx[None, :], vals, fill)

    v00 = grab(y0, x0)
    v01 = grab(y0, x0 + 1)
    v10 = grab(y0 + 1, x0)
    v11 = grab(y0 + 1, x0 + 1)
    top = v00 * (1 - fx)[None, :] + v01 * fx[None, :]
    bot = v10 * (1 - fx)[None, :] + v11 * fx[None, :]
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def make_depth_pair(
    model: ObjectModel,
    theta_hat: Pose,
    scene: DepthImage,
    cam: CameraIntrinsics,
    out_size: int,
) -> tuple[DepthImage, DepthImage, RoiRect]:
    """Matching scene/model depth crops around one pose hypothesis."""
    roi = roi_from_pose(theta_hat, model, cam)
    synth = render_depth(model, [theta_hat], cam)
    d_tilde = crop_resize(synth, roi, out_size, cam.far)
    d = crop_resize(scene, roi, out_size, cam.far)
    return d, d_tilde, roi


def backproject(img: DepthImage, cam: CameraIntrinsics) -> PointCloud:
    """Lift every finite depth pixel to a camera-space 3D point."""
    rows, cols = np.nonzero(np.isfinite(img.pixels))
    d = img.pixels[rows, cols].astype(np.float64)
    u = cols + 0.5
    v = rows + 0.5
    x = (u - cam.cx) * d / cam.fx
    y = (v - cam.cy) * d / cam.fy
    return PointCloud(np.stack([x, y, d], axis=1))


def normalize_depth_crop(img: DepthImage, hypothesis_z: float, radius: float) -> np.ndarray:
    """Network input normalization: clamp((d - t_z) / (1.2 * radius), -1, 1), no-hit -> +1."""
    x = (img.pixels.astype(np.float32) - np.float32(hypothesis_z)) / np.float32(
        ROI_RADIUS_FACTOR * radius
    )
    x = np.where(np.isfinite(img.pixels), x, np.float32(1.0))
    return np.clip(x, -1.0, 1.0).astype(np.float32)


_DPR_MAGIC = b"DPR1"


def write_dpr(img: DepthImage, path) -> None:
    """Binary raster: 'DPR1', LE u32 width/height, LE f32 pixels (top row first)."""
    with open(path, "wb") as fh:
        fh.write(_DPR_MAGIC)
        fh.write(struct.pack("<II", img.width, img.height))
        fh.write(img.pixels.astype("<f4").tobytes())


def read_dpr(path) -> DepthImage:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _DPR_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected DPR1")
        width, height = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * width * height), dtype="<f4")
        if data.size != width * height:
            raise DataError(f"{path}: truncated pixel payload")
    return DepthImage(width, height, data.reshape(height, width).copy())


def write_pgm16(img: DepthImage, path, near: float, far: float) -> None:
    """16-bit PGM preview: depth mapped [near, far] -> [0, 65535], no-hit -> 65535."""
    scale = 65535.0 / (far - near)
    gray = np.clip(np.rint((img.pixels - near) * scale), 0, 65535)
    gray = np.where(np.isfinite(img.pixels), gray, 65535.0).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n65535\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_pgm8(mask: np.ndarray, path) -> None:
    """8-bit PGM for binary overlay masks."""
    arr = np.asarray(mask)
    gray = np.where(arr > 0, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())
