"""Remap tables for rectilinear, piecewise-linear and cylindrical viewports.

A remap table stores, for each output pixel, the fisheye source coordinate to
sample. Output pixels whose viewport ray falls outside the lens field of view
or off the source sensor carry NaN.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .fisheye_models import IntrinsicCalibration, project_points

REMAP_MAGIC = b"WSRM"


class ViewportKind(str, Enum):
    RECTILINEAR = "rect"
    PIECEWISE = "piecewise"
    CYLINDRICAL = "cyl"


@dataclass(frozen=True)
class Plane:
    """One plane of a piecewise viewport.

    ``yaw`` is the plane normal's azimuth; the plane covers azimuths
    ``[phi_lo, phi_hi)``. All radians.
    """

    yaw: float
    phi_lo: float
    phi_hi: float


def default_planes(side_yaw: float = math.radians(55.0), outer: float = math.radians(95.0)) -> tuple[Plane, ...]:
    # seams sit on the bisectors between plane normals, which keeps the map continuous
    seam = side_yaw / 2
    return (
        Plane(-side_yaw, -outer, -seam),
        Plane(0.0, -seam, seam),
        Plane(side_yaw, seam, outer),
    )


@dataclass(frozen=True, eq=False)
class ViewportSpec:
    kind: ViewportKind
    out_width: int
    out_height: int
    focal: float
    orientation: np.ndarray = field(default_factory=lambda: np.eye(3))  # viewport -> camera
    planes: tuple[Plane, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ViewportKind(self.kind))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=float))
        if self.focal <= 0:
            raise ValueError("viewport focal must be positive")
        if self.out_width <= 0 or self.out_height <= 0:
            raise ValueError("viewport size must be positive")
        rot = self.orientation
        if rot.shape != (3, 3) or not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9):
            raise ValueError("orientation must be a 3x3 rotation matrix")
        if self.kind is ViewportKind.PIECEWISE:
            if not self.planes:
                object.__setattr__(self, "planes", default_planes())
            _check_planes(self.planes)

    @property
    def center(self) -> tuple[float, float]:
        return (self.out_width - 1) / 2, (self.out_height - 1) / 2


def _check_planes(planes: Sequence[Plane]) -> None:
    for p in planes:
        if not p.phi_lo < p.phi_hi:
            raise ValueError("plane extent must be non-empty")
        if max(abs(p.phi_lo - p.yaw), abs(p.phi_hi - p.yaw)) >= math.pi / 2:
            raise ValueError("plane extent must stay within 90 deg of its normal")
    for a, b in zip(planes, planes[1:]):
        if abs(a.phi_hi - b.phi_lo) > 1e-12:
            raise ValueError("piecewise planes must be contiguous and ordered left to right")


def default_viewport(cal: IntrinsicCalibration, kind: ViewportKind | str,
                     out_width: int | None = None, out_height: int | None = None) -> ViewportSpec:
    """Viewport the size of the source image with a kind-appropriate focal.

    rect: 170 deg horizontal span; cyl: the lens FOV across the width;
    piecewise: the default three planes across the width.
    """
    kind = ViewportKind(kind)
    w = out_width or cal.width
    h = out_height or cal.height
    if kind is ViewportKind.RECTILINEAR:
        focal = (w / 2) / math.tan(math.radians(85.0))
        return ViewportSpec(kind, w, h, focal)
    if kind is ViewportKind.CYLINDRICAL:
        return ViewportSpec(kind, w, h, w / math.radians(cal.fov_deg))
    planes = default_planes()
    span = sum(math.tan(p.phi_hi - p.yaw) - math.tan(p.phi_lo - p.yaw) for p in planes)
    return ViewportSpec(kind, w, h, w / span, planes=planes)


def viewport_rays(vp: ViewportSpec, rows: slice | None = None) -> np.ndarray:
    """Camera-frame (unnormalised) rays ``(h, w, 3)``; NaN where the viewport has no surface."""
    rows = rows or slice(0, vp.out_height)
    cu, cv = vp.center
    u, v = np.meshgrid(
        np.arange(vp.out_width, dtype=float),
        np.arange(rows.start, rows.stop, dtype=float),
    )
    b = (v - cv) / vp.focal
    if vp.kind is ViewportKind.RECTILINEAR:
        rays = np.stack([(u - cu) / vp.focal, b, np.ones_like(u)], axis=-1)
    elif vp.kind is ViewportKind.CYLINDRICAL:
        phi = (u - cu) / vp.focal
        rays = np.stack([np.sin(phi), b, np.cos(phi)], axis=-1)
    else:
        rays = _piecewise_rays(vp, u, b)
    return rays @ vp.orientation.T


def _piecewise_rays(vp: ViewportSpec, u: np.ndarray, b: np.ndarray) -> np.ndarray:
    f = vp.focal
    widths = [f * (math.tan(p.phi_hi - p.yaw) - math.tan(p.phi_lo - p.yaw)) for p in vp.planes]
    starts = np.concatenate([[0.0], np.cumsum(widths)])
    x = u - (vp.center[0] - starts[-1] / 2)
    rays = np.full(u.shape + (3,), np.nan)
    for k, p in enumerate(vp.planes):
        last = k == len(vp.planes) - 1
        inside = (x >= starts[k]) & ((x <= starts[k + 1]) if last else (x < starts[k + 1]))
        a = math.tan(p.phi_lo - p.yaw) + (x[inside] - starts[k]) / f
        c, s = math.cos(p.yaw), math.sin(p.yaw)
        rays[inside] = np.stack([c * a + s, b[inside], -s * a + c], axis=-1)
    return rays


@dataclass(eq=False)
class RemapTable:
    """Per-output-pixel source coordinates, NaN marking invalid pixels."""

    map_x: np.ndarray
    map_y: np.ndarray
    src_width: int | None = None
    src_height: int | None = None

    def __post_init__(self) -> None:
        self.map_x = np.asarray(self.map_x, dtype=float)
        self.map_y = np.asarray(self.map_y, dtype=float)
        if self.map_x.shape != self.map_y.shape or self.map_x.ndim != 2:
            raise ValueError("map_x and map_y must be equally shaped 2-D arrays")

    @property
    def out_width(self) -> int:
        return self.map_x.shape[1]

    @property
    def out_height(self) -> int:
        return self.map_x.shape[0]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.map_x) & np.isfinite(self.map_y)

    @classmethod
    def identity(cls, width: int, height: int) -> "RemapTable":
        u, v = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
        return cls(u, v, width, height)

    def save(self, path: str | Path) -> None:
        header = REMAP_MAGIC + struct.pack("<III", self.out_width, self.out_height, 0)
        body = np.stack([self.map_x, self.map_y], axis=-1).astype("<f4")
        with open(path, "wb") as f:
            f.write(header)
            f.write(body.tobytes(order="C"))

    @classmethod
    def load(cls, path: str | Path) -> "RemapTable":
        raw = Path(path).read_bytes()
        if len(raw) < 16 or raw[:4] != REMAP_MAGIC:
            raise ValueError(f"{path}: not a remap table (bad magic)")
        w, h, flags = struct.unpack("<III", raw[4:16])
        if flags != 0:
            raise ValueError(f"{path}: unsupported flags {flags}")
        body = np.frombuffer(raw, dtype="<f4", offset=16)
        if body.size != w * h * 2:
            raise ValueError(f"{path}: expected {w * h * 2} floats, found {body.size}")
        body = body.reshape(h, w, 2).astype(float)
        return cls(body[..., 0], body[..., 1])


def _remap_rows(cal: IntrinsicCalibration, vp: ViewportSpec, rows: slice) -> tuple[np.ndarray, np.ndarray]:
    rays = viewport_rays(vp, rows)
    shape = rays.shape[:2]
    flat = rays.reshape(-1, 3)
    has_ray = np.all(np.isfinite(flat), axis=1)
    sx = np.full(flat.shape[0], np.nan)
    sy = np.full(flat.shape[0], np.nan)
    if np.any(has_ray):
        uv, ok = project_points(cal, flat[has_ray])
        inside = ok & (uv[:, 0] >= 0) & (uv[:, 0] <= cal.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= cal.height - 1)
        idx = np.flatnonzero(has_ray)[inside]
        sx[idx] = uv[inside, 0]
        sy[idx] = uv[inside, 1]
    return sx.reshape(shape), sy.reshape(shape)


def build_remap(cal: IntrinsicCalibration, vp: ViewportSpec, threads: int = 1) -> RemapTable:
    """Source coordinates for every output pixel of ``vp``.

    Rays beyond the lens FOV or landing off the source image are NaN.
    """
    step = max(1, math.ceil(vp.out_height / max(1, threads)))
    chunks = [slice(r, min(r + step, vp.out_height)) for r in range(0, vp.out_height, step)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda rows: _remap_rows(cal, vp, rows), chunks))
    else:
        parts = [_remap_rows(cal, vp, rows) for rows in chunks]
    sx = np.concatenate([p[0] for p in parts], axis=0)
    sy = np.concatenate([p[1] for p in parts], axis=0)
    return RemapTable(sx, sy, cal.width, cal.height)


def apply_remap(table: RemapTable, image: np.ndarray, fill: float = 0) -> np.ndarray:
    """Bilinear resampling of ``image`` (``(H, W)`` or ``(H, W, C)``) through ``table``."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    if table.src_width is not None and (w, h) != (table.src_width, table.src_height):
        raise ValueError(
            f"image is {w}x{h} but table expects {table.src_width}x{table.src_height}"
        )
    valid = table.valid
    sx = np.where(valid, table.map_x, 0.0)
    sy = np.where(valid, table.map_y, 0.0)
    valid &= (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x0 = np.clip(np.floor(sx).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(sy).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = np.clip(sx - x0, 0.0, 1.0)
    wy = np.clip(sy - y0, 0.0, 1.0)
    src = img.astype(float)
    if src.ndim == 3:
        wx, wy = wx[..., None], wy[..., None]
    top = src[y0, x0] * (1 - wx) + src[y0, x1] * wx
    bot = src[y1, x0] * (1 - wx) + src[y1, x1] * wx
    out = top * (1 - wy) + bot * wy
    mask = valid[..., None] if out.ndim == 3 else valid
    out = np.where(mask, out, fill)
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    return out.astype(img.dtype)


def resampling_distortion_map(table: RemapTable) -> np.ndarray:
    """Local area magnification of the warp, per output pixel.

    Output area per unit source area, i.e. ``1 / |det d(sx, sy)/d(u, v)|``
    with central differences. 1 means no resampling distortion, values above
    1 mean a small source region is stretched over a larger output region.
    NaN on the border and wherever a neighbour is invalid.
    """
    mx, my = table.map_x, table.map_y
    out = np.full(mx.shape, np.nan)
    if mx.shape[0] < 3 or mx.shape[1] < 3:
        return out
    dxu = (mx[1:-1, 2:] - mx[1:-1, :-2]) / 2
    dyu = (my[1:-1, 2:] - my[1:-1, :-2]) / 2
    dxv = (mx[2:, 1:-1] - mx[:-2, 1:-1]) / 2
    dyv = (my[2:, 1:-1] - my[:-2, 1:-1]) / 2
    det = np.abs(dxu * dyv - dxv * dyu)
    with np.errstate(divide="ignore", invalid="ignore"):
        out[1:-1, 1:-1] = np.where(det > 0, 1.0 / det, np.nan)
    return out
