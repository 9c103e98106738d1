"""LiDAR / SLAM point clouds projected into fisheye images as sparse depth."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .fisheye_models import IntrinsicCalibration, project_points


@dataclass(frozen=True, eq=False)
class RigidPose:
    """Rotation (unit quaternion, scalar last ``x, y, z, w``) and translation in metres.

    Maps points from the pose's local frame into the parent frame:
    ``p_parent = R @ p_local + t``.
    """

    quat: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        q = np.asarray(self.quat, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError(f"quaternion norm {np.linalg.norm(q):.12g} != 1")
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, rot: np.ndarray, translation) -> "RigidPose":
        q = Rotation.from_matrix(rot).as_quat()
        return cls(q / np.linalg.norm(q), translation)

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidPose":
        rot = self.rotation.T
        return RigidPose.from_matrix(rot, -rot @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        return RigidPose.from_matrix(self.rotation @ other.rotation, self.apply(other.translation))


@dataclass(eq=False)
class Projections:
    """Projected points: pixel, Euclidean range, camera-frame unit ray, source index."""

    pixels: np.ndarray  # (N, 2)
    depths: np.ndarray  # (N,)
    rays: np.ndarray  # (N, 3)
    index: np.ndarray  # (N,) into the original cloud

    def __len__(self) -> int:
        return self.depths.size

    def subset(self, keep: np.ndarray) -> "Projections":
        return Projections(self.pixels[keep], self.depths[keep], self.rays[keep], self.index[keep])


@dataclass(eq=False)
class SparseDepthMap:
    width: int
    height: int
    depth: np.ndarray  # (H, W), NaN where invalid

    def __post_init__(self) -> None:
        finite = np.isfinite(self.depth)
        if np.any(self.depth[finite] <= 0):
            raise ValueError("depths must be positive")

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())


def project_cloud(points, cam_pose: RigidPose, cal: IntrinsicCalibration) -> Projections:
    """Project world points into the camera.

    ``cam_pose`` is the camera's pose in the world (camera -> world). Points
    outside the lens FOV, off the sensor or at the camera centre are dropped.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    cam = cam_pose.inverse().apply(pts)
    rng = np.linalg.norm(cam, axis=1)
    keep = np.flatnonzero(rng > 0)
    cam, rng = cam[keep], rng[keep]
    uv, ok = project_points(cal, cam) if keep.size else (np.empty((0, 2)), np.empty(0, bool))
    ok &= (uv[:, 0] >= -0.5) & (uv[:, 0] < cal.width - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] < cal.height - 0.5)
    return Projections(uv[ok], rng[ok], cam[ok] / rng[ok, None], keep[ok])


def occlusion_filter(proj: Projections, cell_deg: float = 0.5, tau: float = 0.1) -> Projections:
    """Angular-cell z-buffer.

    Rays are bucketed by (azimuth, elevation) cells of ``cell_deg``; inside a
    cell only points with ``depth <= min_depth * (1 + tau)`` survive. Output
    keeps the input order.
    """
    if cell_deg <= 0:
        raise ValueError("cell_deg must be positive")
    if len(proj) == 0:
        return proj
    x, y, z = proj.rays.T
    az = np.arctan2(x, z)
    el = np.arctan2(y, np.hypot(x, z))
    cell = math.radians(cell_deg)
    ia = np.floor(az / cell).astype(np.int64)
    ie = np.floor(el / cell).astype(np.int64)
    _, inverse = np.unique(np.stack([ia, ie], axis=1), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    cell_min = np.full(inverse.max() + 1, np.inf)
    np.minimum.at(cell_min, inverse, proj.depths)
    keep = proj.depths <= cell_min[inverse] * (1 + tau)
    return proj.subset(keep)


def rasterize_depth(proj: Projections, cal: IntrinsicCalibration) -> SparseDepthMap:
    """Nearest depth wins per integer pixel (pixel centres at integer coordinates)."""
    depth = np.full((cal.height, cal.width), np.inf)
    if len(proj):
        col = np.floor(proj.pixels[:, 0] + 0.5).astype(np.int64)
        row = np.floor(proj.pixels[:, 1] + 0.5).astype(np.int64)
        inside = (col >= 0) & (col < cal.width) & (row >= 0) & (row < cal.height)
        np.minimum.at(depth, (row[inside], col[inside]), proj.depths[inside])
    depth[np.isinf(depth)] = np.nan
    return SparseDepthMap(cal.width, cal.height, depth)


# --- file formats -------------------------------------------------------------

_PLY_TYPES = {
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
}


def read_ply_points(path: str | Path) -> np.ndarray:
    """x, y, z of the ``vertex`` element of an ascii or binary PLY file."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = raw.index(b"\n", end) + 1
    header = raw[:end].decode("ascii").splitlines()
    fmt, elements = None, []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties are not supported")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if not elements or elements[0][0] != "vertex":
        raise ValueError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise ValueError(f"{path}: vertex lacks x/y/z")
    if fmt == "ascii":
        lines = raw[body_start:].decode("ascii").split("\n")[:count]
        data = np.array([list(map(float, ln.split()[: len(names)])) for ln in lines], dtype=float)
        return data[:, [names.index(c) for c in "xyz"]].reshape(-1, 3)
    endian = {"binary_little_endian": "<", "binary_big_endian": ">"}.get(fmt)
    if endian is None:
        raise ValueError(f"{path}: unknown PLY format {fmt!r}")
    dtype = np.dtype([(n, endian + t) for n, t in props])
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=body_start)
    return np.column_stack([data["x"], data["y"], data["z"]]).astype(float)


def write_ply_points(path: str | Path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(pts.tobytes())


def read_points(path: str | Path) -> np.ndarray:
    """PLY, or whitespace-separated text with x y z in the first three columns."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(3)
    if magic == b"ply":
        pts = read_ply_points(path)
    else:
        pts = np.loadtxt(path, ndmin=2, comments="#")[:, :3]
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{path}: non-finite coordinates")
    return pts


def write_pfm(path: str | Path, image: np.ndarray) -> None:
    """Single-channel little-endian PFM (rows stored bottom to top)."""
    img = np.asarray(image, dtype="<f4")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(img).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=("<" if scale < 0 else ">") + "f4")
    shape = (h, w, channels) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(float)


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    img = np.asarray(image)
    maxval = 255 if img.max(initial=0) <= 255 else 65535
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(img.astype(">u1" if maxval == 255 else ">u2").tobytes())


def save_depth_map(depth: SparseDepthMap, pfm_path: str | Path, mask_path: str | Path) -> None:
    """Depth as PFM (0 where invalid) plus a 0/255 validity mask PGM."""
    write_pfm(pfm_path, np.where(depth.valid, depth.depth, 0.0))
    write_pgm(mask_path, depth.valid.astype(np.uint8) * 255)


def load_depth_map(pfm_path: str | Path, mask_path: str | Path | None = None) -> SparseDepthMap:
    from PIL import Image

    d = read_pfm(pfm_path)
    if mask_path is not None:
        valid = np.asarray(Image.open(mask_path)) > 0
    else:
        valid = np.isfinite(d) & (d > 0)
    if valid.shape != d.shape:
        raise ValueError("depth and mask sizes differ")
    return SparseDepthMap(d.shape[1], d.shape[0], np.where(valid, d, np.nan))
