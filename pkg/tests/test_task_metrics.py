import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from scipy.spatial.transform import Rotation

from oracles import brute_ap, brute_vo
from woodgeom.box3d_metrics import average_precision
from woodgeom.cloud_projection import SparseDepthMap
from woodgeom.task_metrics import (
    Det2D,
    LabelMask,
    PoseTrack,
    confusion_matrix,
    depth_rmse,
    iou_2d,
    map_2d,
    mean_iou,
    read_binary_csv,
    read_det2d_jsonl,
    read_mask,
    soiling_jaccard,
    umeyama_scale,
    vo_tolerance,
)

# --- segmentation ---------------------------------------------------------------------------


def test_miou_perfect(rng):
    m = rng.integers(0, 4, (20, 30))
    iou, miou = mean_iou(m, m, 6)
    assert miou == 1.0
    assert np.all(iou[np.isin(np.arange(6), m)] == 1.0)


def test_miou_half_coverage():
    gt = np.zeros((10, 10), int)
    gt[:, :4] = 1
    pred = np.zeros_like(gt)
    pred[:, :2] = 1
    iou, _ = mean_iou(pred, gt, 2)
    assert iou[1] == 0.5


def test_miou_absent_class_excluded():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    iou, miou = mean_iou(pred, gt, 3)
    assert math.isnan(iou[2])
    assert miou == pytest.approx((0.5 + 2 / 3) / 2)


def test_miou_errors():
    with pytest.raises(ValueError):
        mean_iou(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
    with pytest.raises(ValueError):
        mean_iou(np.full((2, 2), 5), np.zeros((2, 2), int), 2)
    with pytest.raises(ValueError):
        LabelMask(np.zeros((2, 2)))


def test_confusion_orientation():
    cm = confusion_matrix(np.array([[1]]), np.array([[0]]), 2)
    assert cm[0, 1] == 1 and cm.sum() == 1


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_miou_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    n = 5
    gt, pred = r.integers(0, n, (8, 9)), r.integers(0, n, (8, 9))
    perm = r.permutation(n)
    iou, miou = mean_iou(pred, gt, n)
    iou_p, miou_p = mean_iou(perm[pred], perm[gt], n)
    np.testing.assert_array_equal(iou_p[perm], iou)
    assert miou_p == pytest.approx(miou, abs=1e-12)


def test_read_mask(tmp_path):
    arr = np.array([[0, 1, 2], [3, 0, 1]], dtype=np.uint8)
    im = Image.fromarray(arr, mode="L").convert("P")
    im.save(tmp_path / "m.png")
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png"), arr)
    Image.new("RGB", (2, 2)).save(tmp_path / "rgb.png")
    with pytest.raises(ValueError):
        read_mask(tmp_path / "rgb.png")


# --- 2D detection --------------------------------------------------------------------------


def test_iou_2d_half_offset():
    assert iou_2d([0, 0, 1, 1], [0.5, 0, 1.5, 1])[0, 0] == pytest.approx(1 / 3, abs=1e-12)


def test_map_perfect_and_fp():
    gts = [Det2D("a", "car", (0, 0, 10, 10)), Det2D("a", "sign", (20, 20, 30, 25)),
           Det2D("b", "car", (5, 5, 15, 15))]
    preds = [Det2D(g.frame, g.label, g.bbox, 0.9) for g in gts]
    per, m = map_2d(preds, gts)
    assert m == 1.0 and set(per) == {"car", "sign"}
    shifted = [Det2D("a", "car", (5, 0, 15, 10), 0.9)]
    per, _ = map_2d(shifted, [Det2D("a", "car", (0, 0, 10, 10))])
    assert per["car"] == 0.0


def test_map_matches_ap_kernel(rng):
    # boxes either coincide with a GT (TP) or lie far away (FP), so AP is known from the flags
    for _ in range(30):
        n_gt = int(rng.integers(1, 6))
        gts = [Det2D("f", "car", (100 * k, 0, 100 * k + 10, 10)) for k in range(n_gt)]
        n_pred = int(rng.integers(1, 9))
        conf = rng.choice([0.2, 0.4, 0.6, 0.8], n_pred)
        hit_gt = rng.permutation(n_gt)[: min(n_gt, n_pred)]
        preds, tp = [], []
        for i in range(n_pred):
            if i < len(hit_gt) and rng.random() < 0.7:
                preds.append(Det2D("f", "car", gts[hit_gt[i]].bbox, conf[i]))
                tp.append(True)
            else:
                preds.append(Det2D("f", "car", (-500 - 20 * i, 0, -490 - 20 * i, 10), conf[i]))
                tp.append(False)
        per, _ = map_2d(preds, gts)
        assert per["car"] == pytest.approx(brute_ap(conf, tp, n_gt), abs=1e-12)
        assert per["car"] == pytest.approx(average_precision(conf, tp, n_gt), abs=1e-12)


def test_read_det2d(tmp_path):
    (tmp_path / "d.jsonl").write_text('{"frame": "a", "class": "car", "bbox": [0, 0, 4, 3], "conf": 0.5}\n\n')
    (d,) = read_det2d_jsonl(tmp_path / "d.jsonl")
    assert d.bbox == (0, 0, 4, 3) and d.conf == 0.5
    (tmp_path / "bad.jsonl").write_text('{"frame": "a", "class": "car", "bbox": [4, 0, 0, 3]}\n')
    with pytest.raises(ValueError, match=":1:"):
        read_det2d_jsonl(tmp_path / "bad.jsonl")


# --- soiling --------------------------------------------------------------------------------


def test_soiling_examples():
    y = np.array([[1, 0], [0, 1], [1, 1]])
    assert soiling_jaccard(y, y) == (1.0, 1.0)
    assert soiling_jaccard([[1, 0]], [[1, 1]])[0] == 0.5
    assert soiling_jaccard([[0, 0]], [[0, 0]]) == (1.0, 1.0)
    with pytest.raises(ValueError):
        soiling_jaccard([[1, 0]], [[1, 0, 0]])


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_soiling_cross_checks_mean_iou(seed, k):
    r = np.random.default_rng(seed)
    y, z = r.integers(0, 2, (15, k)), r.integers(0, 2, (15, k))
    per_sample = []
    for yi, zi in zip(y, z):
        iou, _ = mean_iou(zi[None, :], yi[None, :], 2)
        per_sample.append(1.0 if math.isnan(iou[1]) else iou[1])
    jac, _ = soiling_jaccard(y, z)
    assert jac == pytest.approx(np.mean(per_sample), abs=1e-12)


def test_read_binary_csv(tmp_path):
    (tmp_path / "a.csv").write_text("opaque,transparent\n1,0\n0,0\n")
    np.testing.assert_array_equal(read_binary_csv(tmp_path / "a.csv"), [[1, 0], [0, 0]])
    (tmp_path / "b.csv").write_text("1,2\n")
    with pytest.raises(ValueError):
        read_binary_csv(tmp_path / "b.csv")


# --- depth -----------------------------------------------------------------------------------


def _dm(d):
    return SparseDepthMap(d.shape[1], d.shape[0], d)


def test_depth_rmse_examples(rng):
    gt = rng.uniform(1, 40, (20, 30))
    gt[rng.random(gt.shape) < 0.3] = np.nan
    assert depth_rmse(_dm(gt), _dm(gt))[0] == 0.0
    rmse, n = depth_rmse(_dm(gt + 1.0), _dm(gt))
    assert rmse == pytest.approx(1.0, abs=1e-12) and n == np.isfinite(gt).sum()
    pred = gt + rng.normal(0, 2, gt.shape)
    pred = np.where(pred > 0, pred, 0.5)
    pred[rng.random(gt.shape) < 0.2] = np.nan
    both = np.isfinite(pred) & np.isfinite(gt)
    res = [float(pred[i, j] - gt[i, j]) for i, j in zip(*np.nonzero(both))]
    want = math.sqrt(math.fsum(r * r for r in res) / len(res))
    got, n = depth_rmse(_dm(pred), _dm(gt))
    assert n == len(res)
    assert got == pytest.approx(want, abs=1e-12)


def test_depth_rmse_no_overlap():
    a = np.array([[1.0, np.nan]])
    b = np.array([[np.nan, 2.0]])
    with pytest.raises(ValueError):
        depth_rmse(_dm(a), _dm(b))


# --- visual odometry ---------------------------------------------------------------------------


def _trajectory(rng, n=20, step=0.3):
    mats = np.tile(np.eye(4), (n, 1, 1))
    yaw = np.cumsum(rng.normal(0, 0.05, n))
    pos = np.cumsum(np.column_stack([np.cos(yaw), np.sin(yaw), rng.normal(0, 0.05, n)]) * step, axis=0)
    rots = Rotation.from_euler("zyx", np.column_stack([yaw, rng.normal(0, 0.02, (n, 2))])).as_matrix()
    mats[:, :3, :3] = rots
    mats[:, :3, 3] = pos
    return mats


def _track(mats):
    return PoseTrack.from_matrices(np.arange(len(mats), dtype=float), mats)


def test_vo_perfect_and_scaled(rng):
    mats = _trajectory(rng)
    res = vo_tolerance(_track(mats), _track(mats))
    assert (res.translation_pct, res.rotation_pct) == (100.0, 100.0)
    scaled = mats.copy()
    scaled[:, :3, 3] *= 2
    res = vo_tolerance(_track(scaled), _track(mats))
    assert (res.translation_pct, res.rotation_pct) == (100.0, 100.0)
    assert res.scale == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("bad, expect", [(0, "end"), (19, "end"), (7, "interior")])
def test_vo_corrupted_frame(rng, bad, expect):
    n = 20
    gt = _trajectory(rng, n)
    pred = gt.copy()
    pred[:, :3, 3] *= 1.7
    pred[bad, :3, 3] += [0.5, -0.3, 0.2]
    res = vo_tolerance(_track(pred), _track(gt), t_tol=0.1, r_tol=0.1)
    bt, br, s = brute_vo(list(pred), list(gt), 0.1, 0.1)
    assert res.scale == pytest.approx(s, rel=1e-6)
    assert res.translation_pct == pytest.approx(bt, abs=1e-12)
    assert res.rotation_pct == pytest.approx(br, abs=1e-12) == 100.0
    failing = 2 if expect == "interior" else 1
    assert res.translation_pct == pytest.approx((n - 1 - failing) / (n - 1) * 100, abs=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_vo_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    gt = _trajectory(r, 12)
    noise = Rotation.from_rotvec(r.normal(0, 0.002, (12, 3))).as_matrix()
    pred = gt.copy()
    pred[:, :3, :3] = noise @ gt[:, :3, :3]
    pred[:, :3, 3] = r.uniform(0.5, 3) * (gt[:, :3, 3] + r.normal(0, 0.01, (12, 3)))
    res = vo_tolerance(_track(pred), _track(gt), t_tol=0.01, r_tol=0.2)
    bt, br, s = brute_vo(list(pred), list(gt), 0.01, 0.2)
    assert res.scale == pytest.approx(s, rel=1e-6)
    assert res.translation_pct == pytest.approx(bt, abs=1e-12)
    assert res.rotation_pct == pytest.approx(br, abs=1e-12)


def test_vo_rigid_invariance(rng):
    gt = _trajectory(rng)
    pred = gt.copy()
    pred[:, :3, 3] = 1.3 * (gt[:, :3, 3] + rng.normal(0, 0.004, (20, 3)))
    pred[:, :3, :3] = Rotation.from_rotvec(rng.normal(0, 0.002, (20, 3))).as_matrix() @ gt[:, :3, :3]
    g = np.eye(4)
    g[:3, :3] = Rotation.from_euler("xyz", [0.4, -1.0, 2.0]).as_matrix()
    g[:3, 3] = [10, -5, 3]
    a = vo_tolerance(_track(pred), _track(gt))
    b = vo_tolerance(_track(g @ pred), _track(g @ gt))
    np.testing.assert_allclose(b.translation_err, a.translation_err, atol=1e-9)
    np.testing.assert_allclose(b.rotation_err_deg, a.rotation_err_deg, atol=1e-6)
    assert (a.translation_pct, a.rotation_pct) == (b.translation_pct, b.rotation_pct)


def test_umeyama_recovers_scale(rng):
    src = rng.normal(size=(30, 3))
    rot = Rotation.random(random_state=5).as_matrix()
    assert umeyama_scale(src, 3.5 * src @ rot.T + 2) == pytest.approx(3.5, abs=1e-12)


def test_posetrack_validation_and_tum(tmp_path, rng):
    with pytest.raises(ValueError):
        PoseTrack([0, 0], np.zeros((2, 3)), [[0, 0, 0, 1]] * 2)
    with pytest.raises(ValueError):
        vo_tolerance(_track(_trajectory(rng, 5)), _track(_trajectory(rng, 6)))
    t = _track(_trajectory(rng, 6))
    t.write_tum(tmp_path / "t.txt")
    back = PoseTrack.read_tum(tmp_path / "t.txt")
    np.testing.assert_allclose(back.positions, t.positions, atol=1e-8)
    np.testing.assert_allclose(np.abs(np.sum(back.quats * t.quats, axis=1)), 1.0, atol=1e-8)
