"""Segmentation, 2D detection, soiling, depth and visual-odometry metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .box3d_metrics import average_precision, greedy_match
from .cloud_projection import SparseDepthMap


# --- semantic / motion segmentation ---------------------------------------------


@dataclass(eq=False)
class LabelMask:
    ids: np.ndarray  # (H, W) integer class ids
    class_names: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.ids = np.asarray(self.ids)
        if self.ids.ndim != 2 or not np.issubdtype(self.ids.dtype, np.integer):
            raise ValueError("label mask must be a 2-D integer array")
        if self.class_names and self.ids.size and self.ids.max() >= len(self.class_names):
            raise ValueError("mask contains ids beyond the class table")


def _ids(mask) -> np.ndarray:
    return mask.ids if isinstance(mask, LabelMask) else np.asarray(mask)


def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    """``cm[g, p]`` counts pixels of ground-truth class g predicted as p."""
    p, g = _ids(pred), _ids(gt)
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    p, g = p.ravel().astype(np.int64), g.ravel().astype(np.int64)
    if p.size and (min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= n_classes):
        raise ValueError(f"class ids must lie in [0, {n_classes})")
    return np.bincount(g * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def mean_iou(pred, gt, n_classes: int) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean.

    Classes absent from both prediction and ground truth get NaN and are left
    out of the mean rather than counted as 0.
    """
    cm = confusion_matrix(pred, gt, n_classes)
    inter = np.diag(cm).astype(float)
    union = cm.sum(0) + cm.sum(1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)
    present = ~np.isnan(iou)
    return iou, float(iou[present].mean()) if present.any() else float("nan")


def read_mask(path: str | Path) -> np.ndarray:
    """Indexed PNG or raw PGM as an integer id array."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("P", "L", "I;16", "I;16B", "I;16L", "I"):
            raise ValueError(f"{path}: expected an indexed or grayscale mask, got mode {im.mode}")
        arr = np.asarray(im)
    return arr.astype(np.int64)


# --- 2D detection -------------------------------------------------------------------


def iou_2d(a, b) -> np.ndarray:
    """Pairwise IoU of ``(N, 4)`` and ``(M, 4)`` boxes given as x1, y1, x2, y2."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


@dataclass(frozen=True)
class Det2D:
    frame: str
    label: str
    bbox: tuple[float, float, float, float]
    conf: float | None = None

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = map(float, self.bbox)
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate box {self.bbox}")
        object.__setattr__(self, "bbox", (x1, y1, x2, y2))


def map_2d(preds: Sequence[Det2D], gts: Sequence[Det2D], iou_thresh: float = 0.5) -> tuple[dict[str, float], float]:
    """Per-class 41-point AP and their mean over classes with ground truth."""
    per_class: dict[str, float] = {}
    labels = sorted({d.label for d in gts})
    for label in labels:
        frames = sorted({d.frame for d in gts if d.label == label} | {d.frame for d in preds if d.label == label})
        confs, hits, n_gt = [], [], 0
        for fr in frames:
            p = [d for d in preds if d.label == label and d.frame == fr]
            g = [d for d in gts if d.label == label and d.frame == fr]
            conf = np.array([1.0 if d.conf is None else d.conf for d in p])
            scores = iou_2d([d.bbox for d in p], [d.bbox for d in g]) if p and g else np.zeros((len(p), len(g)))
            assigned = greedy_match(scores, conf, iou_thresh)
            confs.append(conf)
            hits.append(assigned >= 0)
            n_gt += len(g)
        per_class[label] = average_precision(np.concatenate(confs), np.concatenate(hits), n_gt)
    return per_class, float(np.mean(list(per_class.values()))) if per_class else float("nan")


def read_det2d_jsonl(path: str | Path) -> list[Det2D]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(Det2D(str(rec["frame"]), str(rec["class"]), tuple(rec["bbox"]), rec.get("conf")))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return out


# --- soiling --------------------------------------------------------------------------


def soiling_jaccard(labels, preds) -> tuple[float, float]:
    """Mean per-sample Jaccard index and exact-match accuracy of binary label vectors.

    A sample whose label and prediction are both all-zero (clean lens,
    predicted clean) scores 1.
    """
    y = np.asarray(labels).astype(bool)
    z = np.asarray(preds).astype(bool)
    if y.shape != z.shape or y.ndim != 2:
        raise ValueError(f"labels {y.shape} and predictions {z.shape} must be equal (n, k) arrays")
    inter = (y & z).sum(1)
    union = (y | z).sum(1)
    jac = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    exact = np.all(y == z, axis=1)
    return float(jac.mean()), float(exact.mean())


def read_binary_csv(path: str | Path) -> np.ndarray:
    """Rows of 0/1 values; a non-numeric first row is treated as a header."""
    with open(path) as f:
        first = f.readline()
    skip = 0
    try:
        [float(v) for v in first.replace(",", " ").split()]
    except ValueError:
        skip = 1
    arr = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{path}: expected 0/1 entries")
    return arr.astype(np.int64)


# --- depth -----------------------------------------------------------------------------


def depth_rmse(pred: SparseDepthMap, gt: SparseDepthMap) -> tuple[float, int]:
    """RMSE in metres over pixels valid in both maps, and the pixel count."""
    if pred.depth.shape != gt.depth.shape:
        raise ValueError("depth maps differ in size")
    both = pred.valid & gt.valid
    n = int(both.sum())
    if n == 0:
        raise ValueError("no pixel is valid in both depth maps")
    diff = pred.depth[both] - gt.depth[both]
    return float(np.sqrt(np.mean(diff * diff))), n


# --- visual odometry ---------------------------------------------------------------------


@dataclass(eq=False)
class PoseTrack:
    """Timestamped poses (body -> world), quaternions scalar-last."""

    timestamps: np.ndarray
    positions: np.ndarray  # (N, 3)
    quats: np.ndarray  # (N, 4) x, y, z, w

    def __post_init__(self) -> None:
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        n = self.timestamps.size
        if self.positions.shape[0] != n or self.quats.shape[0] != n:
            raise ValueError("timestamps, positions and quaternions differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(np.abs(norms - 1) > 1e-6):
            raise ValueError("quaternions must be unit length")
        self.quats = self.quats / norms[:, None]

    def __len__(self) -> int:
        return self.timestamps.size

    @property
    def rotations(self) -> np.ndarray:
        return Rotation.from_quat(self.quats).as_matrix()

    @classmethod
    def from_matrices(cls, timestamps, mats) -> "PoseTrack":
        mats = np.asarray(mats, dtype=float)
        return cls(timestamps, mats[:, :3, 3], Rotation.from_matrix(mats[:, :3, :3]).as_quat())

    @classmethod
    def read_tum(cls, path: str | Path) -> "PoseTrack":
        """TUM format: ``timestamp tx ty tz qx qy qz qw`` per line."""
        data = np.loadtxt(path, comments="#", ndmin=2)
        if data.shape[1] != 8:
            raise ValueError(f"{path}: expected 8 columns, found {data.shape[1]}")
        return cls(data[:, 0], data[:, 1:4], data[:, 4:8])

    def write_tum(self, path: str | Path) -> None:
        np.savetxt(path, np.column_stack([self.timestamps, self.positions, self.quats]), fmt="%.9f")


def umeyama_scale(src: np.ndarray, dst: np.ndarray) -> float:
    """Scale of the least-squares similarity transform taking ``src`` onto ``dst``."""
    src_c = src - src.mean(0)
    dst_c = dst - dst.mean(0)
    var = float(np.mean(np.sum(src_c * src_c, axis=1)))
    if var == 0:
        return 1.0
    cov = dst_c.T @ src_c / src.shape[0]
    u, d, vt = np.linalg.svd(cov)
    sign = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sign[-1] = -1
    return float(np.sum(d * sign) / var)


@dataclass(frozen=True)
class VoResult:
    translation_pct: float
    rotation_pct: float
    scale: float
    translation_err: np.ndarray  # metres, per consecutive pair
    rotation_err_deg: np.ndarray


def relative_deltas(track: PoseTrack) -> tuple[np.ndarray, np.ndarray]:
    rot = track.rotations
    d_rot = np.einsum("nji,njk->nik", rot[:-1], rot[1:])
    d_t = np.einsum("nji,nj->ni", rot[:-1], track.positions[1:] - track.positions[:-1])
    return d_rot, d_t


def vo_tolerance(pred: PoseTrack, gt: PoseTrack, t_tol: float = 0.005, r_tol: float = 0.1) -> VoResult:
    """Share of consecutive-frame motions within translation / rotation tolerance.

    The predicted track is first brought to the ground-truth scale with a
    single global similarity fit; then each relative motion is compared.
    ``t_tol`` is in metres, ``r_tol`` in degrees.
    """
    if len(pred) != len(gt):
        raise ValueError(f"tracks differ in length: {len(pred)} vs {len(gt)}")
    if len(gt) < 2:
        raise ValueError("need at least two poses")
    if not np.allclose(pred.timestamps, gt.timestamps, rtol=0, atol=1e-6):
        raise ValueError("timestamps do not match")
    scale = umeyama_scale(pred.positions, gt.positions)
    rp, tp = relative_deltas(pred)
    rg, tg = relative_deltas(gt)
    t_err = np.linalg.norm(scale * tp - tg, axis=1)
    r_rel = np.einsum("nji,njk->nik", rp, rg)
    # atan2 of the skew and symmetric parts stays accurate near zero angle, unlike arccos
    cos = (np.trace(r_rel, axis1=1, axis2=2) - 1) / 2
    skew = np.stack([r_rel[:, 2, 1] - r_rel[:, 1, 2], r_rel[:, 0, 2] - r_rel[:, 2, 0],
                     r_rel[:, 1, 0] - r_rel[:, 0, 1]], axis=1)
    r_err = np.degrees(np.arctan2(np.linalg.norm(skew, axis=1) / 2, cos))
    return VoResult(
        translation_pct=float(np.mean(t_err < t_tol) * 100),
        rotation_pct=float(np.mean(r_err < r_tol) * 100),
        scale=scale,
        translation_err=t_err,
        rotation_err_deg=r_err,
    )
