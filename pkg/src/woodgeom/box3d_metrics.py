"""3D box similarity (SRT score, rotated 3D IoU), matching and AP/AOS.

Boxes live in a z-up frame: ``center`` is the geometric centre, ``size`` is
(length, width, height) along the box's own x, y, z axes and ``yaw`` rotates
the box about +z.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numba
import numpy as np

N_RECALL_POINTS = 41


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, 2 * math.pi)
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    label: str = ""
    conf: float | None = None

    def __post_init__(self) -> None:
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("center and size need three components")
        if not all(v > 0 for v in s):
            raise ValueError(f"box sizes must be positive, got {s}")
        if self.conf is not None and not 0 <= self.conf <= 1:
            raise ValueError(f"confidence {self.conf} outside [0, 1]")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    @property
    def diagonal(self) -> float:
        return math.sqrt(sum(v * v for v in self.size))

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw])


@dataclass(frozen=True)
class SrtWeights:
    w_s: float = 0.3
    w_t: float = 1.0
    w_r: float = 0.5
    alpha: float = 0.3
    beta: float = 0.3
    gamma: float = 0.4

    def __post_init__(self) -> None:
        for name in ("w_s", "w_t", "w_r"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name}={v} must lie in (0, 1]")
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if abs(self.alpha + self.beta + self.gamma - 1) > 1e-12:
            raise ValueError("alpha + beta + gamma must equal 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_s, self.w_t, self.w_r, self.alpha, self.beta, self.gamma])


@dataclass(frozen=True)
class SrtComponents:
    score: float
    s_s: float
    s_t: float
    s_r: float
    p_t: int


def srt_score(pred: Box3D, gt: Box3D, w: SrtWeights = SrtWeights()) -> SrtComponents:
    """Scaling-rotation-translation similarity of ``pred`` against ``gt``.

    Size ratios are ``pred / gt`` per axis, so S_s is not symmetric in its
    arguments. The yaw difference is wrapped to [0, pi]: opposite headings
    are penalised.
    """
    if not isinstance(w, SrtWeights):
        raise TypeError("w must be SrtWeights")
    ratio_err = sum(abs(1 - p / g) for p, g in zip(pred.size, gt.size))
    s_s = 1 - min(ratio_err / w.w_s, 1.0)
    theta = abs(wrap_angle(pred.yaw - gt.yaw))
    s_r = max(0.0, 1 - theta / (w.w_r * math.pi))
    r_sum = (pred.diagonal + gt.diagonal) * w.w_t / 2
    t = math.dist(pred.center, gt.center)
    s_t = max(0.0, (r_sum - t) / r_sum)
    p_t = 0 if r_sum < t else 1
    score = p_t * (w.alpha * s_s + w.beta * s_t + w.gamma * s_r)
    return SrtComponents(score, s_s, s_t, s_r, p_t)


# --- compiled kernels ---------------------------------------------------------
# box rows: (x, y, z, l, w, h, yaw); weight rows: (w_s, w_t, w_r, alpha, beta, gamma)


@numba.njit(cache=True, error_model="numpy")
def srt_score_batch(a, b, wt):
    """SRT score for each row pair of two ``(N, 7)`` box arrays.

    Yaws are expected in (-pi, pi]; larger differences fall back to a modulo.
    """
    n = a.shape[0]
    out = np.empty(n)
    inv_ws = 1.0 / wt[0]
    inv_wr = 1.0 / (wt[2] * math.pi)
    half_wt = wt[1] / 2
    for i in range(n):
        la, wa, ha = a[i, 3], a[i, 4], a[i, 5]
        lb, wb, hb = b[i, 3], b[i, 4], b[i, 5]
        r_sum = (math.sqrt(la * la + wa * wa + ha * ha) + math.sqrt(lb * lb + wb * wb + hb * hb)) * half_wt
        dx, dy, dz = a[i, 0] - b[i, 0], a[i, 1] - b[i, 1], a[i, 2] - b[i, 2]
        t = math.sqrt(dx * dx + dy * dy + dz * dz)
        s_t = max(0.0, (r_sum - t) / r_sum)
        err = abs(1 - la / lb) + abs(1 - wa / wb) + abs(1 - ha / hb)
        s_s = 1.0 - min(err * inv_ws, 1.0)
        d = abs(a[i, 6] - b[i, 6])
        if d > 2 * math.pi:
            d = d % (2 * math.pi)
        d = min(d, 2 * math.pi - d)
        s_r = max(0.0, 1.0 - d * inv_wr)
        # branch-free p_t gate
        out[i] = (wt[3] * s_s + wt[4] * s_t + wt[5] * s_r) * (r_sum >= t)
    return out


@numba.njit(cache=True, error_model="numpy")
def _footprint(box, px, py):
    c, s = math.cos(box[6]), math.sin(box[6])
    hl, hw = box[3] / 2, box[4] / 2
    # counter-clockwise
    lx = (hl, -hl, -hl, hl)
    ly = (hw, hw, -hw, -hw)
    for k in range(4):
        px[k] = box[0] + c * lx[k] - s * ly[k]
        py[k] = box[1] + s * lx[k] + c * ly[k]


@numba.njit(cache=True, error_model="numpy")
def _clip_polygon_area(px, py, qx, qy, sx, sy, tx, ty):
    """Area of convex CCW quad (px, py) clipped by convex CCW quad (qx, qy).

    ``sx, sy, tx, ty`` are scratch buffers of length >= 16.
    """
    n = 4
    for k in range(4):
        sx[k] = px[k]
        sy[k] = py[k]
    for e in range(4):
        ax, ay = qx[e], qy[e]
        bx, by = qx[(e + 1) % 4], qy[(e + 1) % 4]
        ex, ey = bx - ax, by - ay
        m = 0
        for i in range(n):
            cx, cy = sx[i], sy[i]
            j = i - 1 if i > 0 else n - 1
            ppx, ppy = sx[j], sy[j]
            dc = ex * (cy - ay) - ey * (cx - ax)
            dp = ex * (ppy - ay) - ey * (ppx - ax)
            if dc >= 0:
                if dp < 0:
                    t = dp / (dp - dc)
                    tx[m] = ppx + t * (cx - ppx)
                    ty[m] = ppy + t * (cy - ppy)
                    m += 1
                tx[m] = cx
                ty[m] = cy
                m += 1
            elif dp >= 0:
                t = dp / (dp - dc)
                tx[m] = ppx + t * (cx - ppx)
                ty[m] = ppy + t * (cy - ppy)
                m += 1
        n = m
        for k in range(n):
            sx[k] = tx[k]
            sy[k] = ty[k]
        if n == 0:
            return 0.0
    area = 0.0
    for i in range(n):
        j = (i + 1) % n
        area += sx[i] * sy[j] - sx[j] * sy[i]
    return abs(area) / 2


@numba.njit(cache=True, error_model="numpy")
def _iou3d_pair(a, b, buf):
    za0, za1 = a[2] - a[5] / 2, a[2] + a[5] / 2
    zb0, zb1 = b[2] - b[5] / 2, b[2] + b[5] / 2
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0:
        return 0.0
    _footprint(a, buf[0], buf[1])
    _footprint(b, buf[2], buf[3])
    inter = _clip_polygon_area(buf[0], buf[1], buf[2], buf[3], buf[4], buf[5], buf[6], buf[7]) * dz
    va = a[3] * a[4] * a[5]
    vb = b[3] * b[4] * b[5]
    iou = inter / (va + vb - inter)
    return min(max(iou, 0.0), 1.0)


@numba.njit(cache=True, error_model="numpy")
def iou_3d_batch(a, b):
    """Rotated 3D IoU for each row pair of two ``(N, 7)`` box arrays."""
    out = np.empty(a.shape[0])
    buf = np.empty((8, 16))
    for i in range(a.shape[0]):
        out[i] = _iou3d_pair(a[i], b[i], buf)
    return out


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Intersection over union of two yaw-rotated boxes.

    Intersection is the clipped bird's-eye footprint area times the vertical
    overlap.
    """
    return float(_iou3d_pair(a.as_array(), b.as_array(), np.empty((8, 16))))


def footprint_corners(box: Box3D) -> np.ndarray:
    px, py = np.empty(4), np.empty(4)
    _footprint(box.as_array(), px, py)
    return np.column_stack([px, py])


# --- matching -----------------------------------------------------------------


@dataclass
class MatchResult:
    """Greedy matching of one frame's predictions (one class) to ground truth.

    Arrays are indexed like the input predictions.
    """

    gt_index: np.ndarray  # -1 when unmatched
    score: np.ndarray  # match score of the assigned GT, NaN when unmatched
    conf: np.ndarray
    delta_yaw: np.ndarray  # |wrapped yaw difference| for TPs, NaN otherwise
    n_gt: int

    @property
    def is_tp(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def tp(self) -> int:
        return int(self.is_tp.sum())

    @property
    def fp(self) -> int:
        return int((~self.is_tp).sum())

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp


def score_matrix(preds: Sequence[Box3D], gts: Sequence[Box3D], criterion: str,
                 weights: SrtWeights = SrtWeights()) -> np.ndarray:
    if criterion not in ("iou3d", "srt"):
        raise ValueError(f"unknown criterion {criterion!r}")
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    pa = np.array([p.as_array() for p in preds])
    ga = np.array([g.as_array() for g in gts])
    ii, jj = np.meshgrid(np.arange(len(preds)), np.arange(len(gts)), indexing="ij")
    a, b = pa[ii.ravel()], ga[jj.ravel()]
    flat = srt_score_batch(a, b, weights.as_array()) if criterion == "srt" else iou_3d_batch(a, b)
    return flat.reshape(len(preds), len(gts))


def greedy_match(scores: np.ndarray, conf: np.ndarray, threshold: float) -> np.ndarray:
    """Assign GT indices to predictions in descending confidence (stable on ties)."""
    n_pred, n_gt = scores.shape
    assigned = np.full(n_pred, -1, dtype=np.int64)
    taken = np.zeros(n_gt, dtype=bool)
    for i in np.argsort(-np.asarray(conf, dtype=float), kind="stable"):
        if n_gt == 0:
            break
        cand = np.where(taken, -np.inf, scores[i])
        j = int(np.argmax(cand))
        if cand[j] >= threshold:
            assigned[i] = j
            taken[j] = True
    return assigned


def match_detections(preds: Sequence[Box3D], gts: Sequence[Box3D], criterion: str = "iou3d",
                     threshold: float = 0.5, weights: SrtWeights = SrtWeights()) -> MatchResult:
    conf = np.array([1.0 if p.conf is None else p.conf for p in preds], dtype=float)
    scores = score_matrix(preds, gts, criterion, weights)
    gt_index = greedy_match(scores, conf, threshold)
    matched = gt_index >= 0
    score = np.full(len(preds), np.nan)
    dyaw = np.full(len(preds), np.nan)
    for i in np.flatnonzero(matched):
        score[i] = scores[i, gt_index[i]]
        dyaw[i] = abs(wrap_angle(preds[i].yaw - gts[gt_index[i]].yaw))
    return MatchResult(gt_index, score, conf, dyaw, len(gts))


# --- AP / AOS -----------------------------------------------------------------


def _interpolated(conf: np.ndarray, hits: np.ndarray, n_gt: int, weight: np.ndarray) -> float:
    if n_gt <= 0:
        raise ValueError("n_gt must be positive")
    if conf.size == 0:
        return 0.0
    order = np.argsort(-conf, kind="stable")
    c = conf[order]
    tp = np.cumsum(hits[order])
    sim = np.cumsum(weight[order])
    # evaluate only at the end of each group of tied confidences
    last = np.append(c[1:] != c[:-1], True)
    rank = np.arange(1, c.size + 1)[last]
    recall = tp[last] / n_gt
    prec = sim[last] / rank
    # running max from the high-recall end gives max precision for recall >= r
    best = np.maximum.accumulate(prec[::-1])[::-1]
    grid = np.arange(N_RECALL_POINTS) / (N_RECALL_POINTS - 1)
    pos = np.searchsorted(recall, grid, side="left")
    vals = np.where(pos < recall.size, best[np.minimum(pos, recall.size - 1)], 0.0)
    return float(vals.sum() / N_RECALL_POINTS)


def average_precision(conf, is_tp, n_gt: int) -> float | None:
    """41-point interpolated AP; ``None`` when there is no ground truth."""
    if n_gt == 0:
        return None
    hits = np.asarray(is_tp, dtype=float)
    return _interpolated(np.asarray(conf, dtype=float), hits, n_gt, hits)


def aos(conf, is_tp, delta_yaw, n_gt: int) -> float | None:
    """Average orientation similarity: AP with each TP weighted by (1 + cos dyaw) / 2."""
    if n_gt == 0:
        return None
    hits = np.asarray(is_tp, dtype=float)
    dyaw = np.nan_to_num(np.asarray(delta_yaw, dtype=float))
    weight = hits * (1 + np.cos(dyaw)) / 2
    return _interpolated(np.asarray(conf, dtype=float), hits, n_gt, weight)


def pool_matches(results: Iterable[MatchResult]) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    results = list(results)
    if not results:
        return np.empty(0), np.empty(0, bool), np.empty(0), 0
    conf = np.concatenate([r.conf for r in results])
    tp = np.concatenate([r.is_tp for r in results])
    dyaw = np.concatenate([r.delta_yaw for r in results])
    return conf, tp, dyaw, sum(r.n_gt for r in results)


# --- dataset evaluation ---------------------------------------------------------


@dataclass
class FrameBox:
    frame: str
    box: Box3D


def read_boxes_jsonl(path: str | Path, require_conf: bool = False) -> list[FrameBox]:
    """One JSON object per line: frame, class, center, size, yaw, conf (predictions)."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if require_conf and "conf" not in rec:
                    raise ValueError("missing 'conf'")
                box = Box3D(rec["center"], rec["size"], rec["yaw"], str(rec["class"]), rec.get("conf"))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            out.append(FrameBox(str(rec["frame"]), box))
    return out


def write_boxes_jsonl(path: str | Path, items: Iterable[FrameBox]) -> None:
    with open(path, "w") as f:
        for it in items:
            rec = {"frame": it.frame, "class": it.box.label, "center": list(it.box.center),
                   "size": list(it.box.size), "yaw": it.box.yaw}
            if it.box.conf is not None:
                rec["conf"] = it.box.conf
            f.write(json.dumps(rec) + "\n")


def _hist(values: np.ndarray, bins: int = 10) -> dict:
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    return {"edges": edges.tolist(), "counts": counts.tolist()}


def evaluate_detections(preds: Sequence[FrameBox], gts: Sequence[FrameBox], criterion: str = "iou3d",
                        threshold: float = 0.5, weights: SrtWeights = SrtWeights(),
                        map_fn=map) -> dict:
    """Per-class AP/AOS over a single difficulty pool.

    ``map_fn`` lets callers parallelise the per-frame matching; results are
    merged in sorted (class, frame) order so the output does not depend on it.
    """
    groups: dict[tuple[str, str], tuple[list, list]] = {}
    for fb in gts:
        groups.setdefault((fb.box.label, fb.frame), ([], []))[1].append(fb.box)
    for fb in preds:
        groups.setdefault((fb.box.label, fb.frame), ([], []))[0].append(fb.box)
    keys = sorted(groups)
    results = list(map_fn(lambda k: match_detections(groups[k][0], groups[k][1], criterion, threshold, weights),
                          keys))

    per_class: dict[str, dict] = {}
    comp = {"s_s": [], "s_t": [], "s_r": [], "srt": [], "iou3d": []}
    for label in sorted({k[0] for k in keys}):
        res = [r for k, r in zip(keys, results) if k[0] == label]
        conf, tp, dyaw, n_gt = pool_matches(res)
        per_class[label] = {
            "ap": average_precision(conf, tp, n_gt),
            "aos": aos(conf, tp, dyaw, n_gt),
            "n_gt": n_gt,
            "n_pred": int(conf.size),
            "tp": int(tp.sum()),
            "fp": int((~tp).sum()),
            "fn": int(n_gt - tp.sum()),
        }
    for k, r in zip(keys, results):
        p_boxes, g_boxes = groups[k]
        for i in np.flatnonzero(r.is_tp):
            c = srt_score(p_boxes[i], g_boxes[r.gt_index[i]], weights)
            comp["s_s"].append(c.s_s)
            comp["s_t"].append(c.s_t)
            comp["s_r"].append(c.s_r)
            comp["srt"].append(c.score)
            comp["iou3d"].append(iou_3d(p_boxes[i], g_boxes[r.gt_index[i]]))
    aps = [v["ap"] for v in per_class.values() if v["ap"] is not None]
    aoss = [v["aos"] for v in per_class.values() if v["aos"] is not None]
    return {
        "criterion": criterion,
        "threshold": threshold,
        "weights": weights.__dict__ if criterion == "srt" else None,
        "recall_points": N_RECALL_POINTS,
        "difficulty": "single pool (no difficulty bins)",
        "per_class": per_class,
        "ap": float(np.mean(aps)) if aps else None,
        "aos": float(np.mean(aoss)) if aoss else None,
        "counts": {
            "pred": sum(v["n_pred"] for v in per_class.values()),
            "gt": sum(v["n_gt"] for v in per_class.values()),
            "tp": sum(v["tp"] for v in per_class.values()),
            "fp": sum(v["fp"] for v in per_class.values()),
            "fn": sum(v["fn"] for v in per_class.values()),
        },
        "matched_component_histograms": {k: _hist(np.asarray(v)) for k, v in comp.items()},
    }


# --- runtime benchmark ----------------------------------------------------------


def random_box_pairs(n_pairs: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Overlapping-ish random pairs as ``(N, 7)`` arrays: B is a perturbed copy of A."""
    a = np.empty((n_pairs, 7))
    a[:, 0:2] = rng.uniform(-40.0, 40.0, (n_pairs, 2))
    a[:, 2] = rng.uniform(-1.0, 1.0, n_pairs)
    a[:, 3:6] = rng.uniform(0.5, 5.0, (n_pairs, 3))
    a[:, 6] = rng.uniform(-math.pi, math.pi, n_pairs)
    b = a.copy()
    b[:, 0:3] += rng.normal(0.0, 0.5, (n_pairs, 3))
    b[:, 3:6] *= rng.uniform(0.8, 1.2, (n_pairs, 3))
    b[:, 6] = (b[:, 6] + rng.normal(0.0, 0.5, n_pairs) + math.pi) % (2 * math.pi) - math.pi
    return a, b


def batch_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for arr in arrays:
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class BenchResult:
    n_pairs: int
    seed: int
    digest: str
    ns_per_pair: dict[str, float] = field(default_factory=dict)
    total_s: dict[str, float] = field(default_factory=dict)

    @property
    def speedup(self) -> float:
        return self.ns_per_pair["iou3d"] / self.ns_per_pair["srt"]


def bench_pairwise(n_pairs: int = 100_000, metrics: Sequence[str] = ("srt", "iou3d"), seed: int = 0,
                   repeats: int = 3, weights: SrtWeights = SrtWeights()) -> BenchResult:
    """Per-pair wall-clock cost of each metric on one seeded batch.

    Both metrics run as compiled per-pair loops; the best of ``repeats`` runs
    is reported.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    a, b = random_box_pairs(n_pairs, rng)
    wt = weights.as_array()
    kernels = {
        "srt": lambda: srt_score_batch(a, b, wt),
        "iou3d": lambda: iou_3d_batch(a, b),
    }
    res = BenchResult(n_pairs, seed, batch_digest(a, b))
    for name in metrics:
        fn = kernels[name]
        srt_score_batch(a[:2], b[:2], wt), iou_3d_batch(a[:2], b[:2])  # compile outside the timer
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            best = min(best, time.perf_counter() - t0)
        res.total_s[name] = best
        res.ns_per_pair[name] = best * 1e9 / n_pairs
    return res
