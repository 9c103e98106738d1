"""Independent reference computations used by the tests.

Nothing here calls the code path it is meant to check.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np
from scipy.optimize import minimize_scalar


# --- boxes -------------------------------------------------------------------------


def inside_box(box, pts):
    c = np.asarray(box.center)
    d = pts - c
    cy, sy = math.cos(-box.yaw), math.sin(-box.yaw)
    lx = cy * d[:, 0] - sy * d[:, 1]
    ly = sy * d[:, 0] + cy * d[:, 1]
    l, w, h = box.size
    return (np.abs(lx) <= l / 2) & (np.abs(ly) <= w / 2) & (np.abs(d[:, 2]) <= h / 2)


def _half_extent(box):
    l, w, h = box.size
    c, s = abs(math.cos(box.yaw)), abs(math.sin(box.yaw))
    return np.array([c * l / 2 + s * w / 2, s * l / 2 + c * w / 2, h / 2])


def monte_carlo_iou(a, b, n, rng):
    """IoU by uniform sampling of the axis-aligned bounding box of both boxes."""
    ea, eb = _half_extent(a), _half_extent(b)
    lo = np.minimum(np.asarray(a.center) - ea, np.asarray(b.center) - eb)
    hi = np.maximum(np.asarray(a.center) + ea, np.asarray(b.center) + eb)
    pts = rng.uniform(lo, hi, size=(n, 3))
    ia, ib = inside_box(a, pts), inside_box(b, pts)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def aabb_iou(a, b):
    """Analytic IoU of two zero-yaw boxes."""
    inter = 1.0
    for k in range(3):
        lo = max(a.center[k] - a.size[k] / 2, b.center[k] - b.size[k] / 2)
        hi = min(a.center[k] + a.size[k] / 2, b.center[k] + b.size[k] / 2)
        inter *= max(0.0, hi - lo)
    return inter / (a.volume + b.volume - inter)


# --- matching / AP -------------------------------------------------------------------


def brute_greedy(scores, conf, threshold):
    """Run a plain-loop greedy over every confidence-sorted ordering of the predictions.

    With distinct confidences there is exactly one such ordering; the result
    of all admissible orderings must agree.
    """
    n_pred, n_gt = len(scores), len(scores[0]) if len(scores) else 0
    outcomes = set()
    for order in itertools.permutations(range(n_pred)):
        if any(conf[order[k]] < conf[order[k + 1]] for k in range(n_pred - 1)):
            continue
        assigned = [-1] * n_pred
        used = set()
        for i in order:
            best, best_j = -math.inf, -1
            for j in range(n_gt):
                if j not in used and scores[i][j] > best:
                    best, best_j = scores[i][j], j
            if best_j >= 0 and best >= threshold:
                assigned[i] = best_j
                used.add(best_j)
        outcomes.add(tuple(assigned))
    return outcomes


def brute_ap(conf, is_tp, n_gt, weights=None, n_points=41):
    """Interpolated AP by sweeping every distinct confidence as a threshold.

    Recall comparisons are exact (fractions); precision is a float mean.
    """
    conf = [float(c) for c in conf]
    is_tp = [bool(t) for t in is_tp]
    weights = [1.0 if t else 0.0 for t in is_tp] if weights is None else [float(w) for w in weights]
    curve = []
    for thr in sorted(set(conf), reverse=True):
        sel = [i for i in range(len(conf)) if conf[i] >= thr]
        rec = Fraction(sum(is_tp[i] for i in sel), n_gt)
        prec = math.fsum(weights[i] for i in sel) / len(sel)
        curve.append((rec, prec))
    total = 0.0
    for j in range(n_points):
        r = Fraction(j, n_points - 1)
        cands = [p for rr, p in curve if rr >= r]
        total += max(cands) if cands else 0.0
    return total / n_points


# --- fisheye / remap -------------------------------------------------------------------


def bilinear(arr, u, v):
    x0, y0 = int(math.floor(u)), int(math.floor(v))
    fx, fy = u - x0, v - y0
    return ((1 - fx) * (1 - fy) * arr[y0, x0] + fx * (1 - fy) * arr[y0, x0 + 1]
            + (1 - fx) * fy * arr[y0 + 1, x0] + fx * fy * arr[y0 + 1, x0 + 1])


def invert_table(table, target, iters=30):
    """Output coordinate whose table entry equals ``target`` (Newton on the bilinear table)."""
    d = (table.map_x - target[0]) ** 2 + (table.map_y - target[1]) ** 2
    d = np.where(np.isfinite(d), d, np.inf)
    v, u = np.unravel_index(np.argmin(d), d.shape)
    u, v = float(u), float(v)
    for _ in range(iters):
        sx, sy = bilinear(table.map_x, u, v), bilinear(table.map_y, u, v)
        h = 1e-3
        j = np.array([
            [(bilinear(table.map_x, u + h, v) - sx) / h, (bilinear(table.map_x, u, v + h) - sx) / h],
            [(bilinear(table.map_y, u + h, v) - sy) / h, (bilinear(table.map_y, u, v + h) - sy) / h],
        ])
        du, dv = np.linalg.solve(j, [target[0] - sx, target[1] - sy])
        u, v = u + du, v + dv
        if abs(du) + abs(dv) < 1e-10:
            break
    return u, v


# --- occlusion scene ---------------------------------------------------------------------


def direction(az, el):
    return np.stack([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)], axis=-1)


def two_surface_scene(rng, cell_deg=0.5, panel_z=4.0, wall_z=20.0,
                      lidar=(0.4, -0.3, 0.0), panel_az=(-10, 10), panel_el=(-5, 5),
                      wall_az=(-30, 30), wall_el=(-15, 15), per_cell=2):
    """Panel at ``panel_z`` in front of a wall at ``wall_z``, sampled as a LiDAR at ``lidar`` sees it.

    The panel occupies exactly the camera angular cells in ``panel_az`` x
    ``panel_el`` (degrees, cell aligned). Returns points, a label per point
    ('panel', 'hidden', 'visible' as seen from the camera at the origin) and
    the true camera range to each point's surface.
    """
    c = math.radians(cell_deg)

    def cell_samples(az_rng, el_rng, k):
        ia = np.arange(round(az_rng[0] / cell_deg), round(az_rng[1] / cell_deg))
        ie = np.arange(round(el_rng[0] / cell_deg), round(el_rng[1] / cell_deg))
        a, e = np.meshgrid(ia, ie, indexing="ij")
        a = np.repeat(a.ravel(), k)
        e = np.repeat(e.ravel(), k)
        return (a + rng.uniform(0.1, 0.9, a.size)) * c, (e + rng.uniform(0.1, 0.9, e.size)) * c

    def in_panel(az, el):
        return ((az >= math.radians(panel_az[0])) & (az < math.radians(panel_az[1]))
                & (el >= math.radians(panel_el[0])) & (el < math.radians(panel_el[1])))

    pa, pe = cell_samples(panel_az, panel_el, 1)
    pd = direction(pa, pe)
    panel = pd * (panel_z / pd[:, 2:3])

    wa, we = cell_samples(wall_az, wall_el, per_cell)
    wd = direction(wa, we)
    wall = wd * (wall_z / wd[:, 2:3])

    # LiDAR visibility: segment lidar -> wall point must miss the panel
    L = np.asarray(lidar, dtype=float)
    s = (panel_z - L[2]) / (wall[:, 2] - L[2])
    hit = L + s[:, None] * (wall - L)
    hit_az = np.arctan2(hit[:, 0], hit[:, 2])
    hit_el = np.arctan2(hit[:, 1], np.hypot(hit[:, 0], hit[:, 2]))
    seen = ~in_panel(hit_az, hit_el)
    wall, wa, we, wd = wall[seen], wa[seen], we[seen], wd[seen]

    hidden = in_panel(wa, we)
    labels = np.array(["panel"] * len(panel) + ["hidden" if h else "visible" for h in hidden])
    true_range = np.concatenate([
        panel_z / (pd[:, 2] / np.linalg.norm(pd, axis=1)),
        wall_z / (wd[:, 2] / np.linalg.norm(wd, axis=1)),
    ])
    return np.vstack([panel, wall]), labels, true_range


# --- visual odometry -------------------------------------------------------------------------


def _kabsch_rmse(src, dst, s):
    a = s * src
    ac, bc = a - a.mean(0), dst - dst.mean(0)
    u, _, vt = np.linalg.svd(bc.T @ ac)
    d = np.diag([1, 1, np.sign(np.linalg.det(u @ vt))])
    r = u @ d @ vt
    res = bc - ac @ r.T
    return math.sqrt(np.mean(np.sum(res * res, axis=1)))


def brute_vo(pred_mats, gt_mats, t_tol, r_tol_deg):
    """Scale by 1-D search on the aligned-trajectory RMSE, then per-delta checks with 4x4 matrices."""
    src = np.array([m[:3, 3] for m in pred_mats])
    dst = np.array([m[:3, 3] for m in gt_mats])
    s = minimize_scalar(lambda s: _kabsch_rmse(src, dst, s), bounds=(1e-3, 1e3), method="bounded",
                        options={"xatol": 1e-12}).x
    ok_t, ok_r = 0, 0
    n = len(gt_mats) - 1
    for i in range(n):
        dp = np.linalg.inv(pred_mats[i]) @ pred_mats[i + 1]
        dg = np.linalg.inv(gt_mats[i]) @ gt_mats[i + 1]
        t_err = np.linalg.norm(s * dp[:3, 3] - dg[:3, 3])
        rel = dp[:3, :3].T @ dg[:3, :3]
        ang = math.degrees(math.acos(max(-1.0, min(1.0, (np.trace(rel) - 1) / 2))))
        ok_t += t_err < t_tol
        ok_r += ang < r_tol_deg
    return 100.0 * ok_t / n, 100.0 * ok_r / n, s
