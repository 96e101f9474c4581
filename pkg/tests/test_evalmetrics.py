import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fusionpaint.errors import ConfigError, DataError
from fusionpaint.evalmetrics import (
    APConfig, Detection, ap_report, average_precision, cluster_detections, mean_ap, precision_recall,
    read_detections, write_detections,
)


def union_find_clusters(xy, radius):
    """Component count of the pairwise distance graph, by union-find over all pairs."""
    parent = list(range(len(xy)))

    def root(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(xy)):
        for j in range(i + 1, len(xy)):
            if math.dist(xy[i], xy[j]) <= radius:
                parent[root(i)] = root(j)
    groups = {}
    for i in range(len(xy)):
        groups.setdefault(root(i), []).append(i)
    return list(groups.values())


def ref_ap(dets, gts, cls, thr, points=101):
    """Exact-arithmetic AP: all-pairs greedy matching, rational precision, 101-point envelope."""
    mine = sorted([d for d in dets if d.class_id == cls], key=lambda d: -d.score)
    gt = [g for g in gts if g[1] == cls]
    if not gt or not mine:
        return 0.0
    used = set()
    curve = []
    tp = 0
    for n, d in enumerate(mine, 1):
        best, best_j = None, None
        for j, g in enumerate(gt):
            if j in used or g[2] != d.sample:
                continue
            dist = math.hypot(g[0][0] - d.bev_center[0], g[0][1] - d.bev_center[1])
            if best is None or dist < best:
                best, best_j = dist, j
        if best is not None and best <= thr:
            used.add(best_j)
            tp += 1
        curve.append((Fraction(tp, len(gt)), Fraction(tp, n)))
    total = Fraction(0)
    for k in range(points):
        level = Fraction(k, points - 1)
        reach = [p for r, p in curve if r >= level]
        total += max(reach) if reach else 0
    return float(total / points)


def random_case(rng, n_gt=4, n_det=6, classes=3, samples=2):
    gts = [((float(x), float(y)), int(c), int(s)) for x, y, c, s in zip(
        rng.uniform(0, 10, n_gt), rng.uniform(0, 10, n_gt), rng.integers(1, classes, n_gt),
        rng.integers(0, samples, n_gt))]
    dets = [Detection((x, y), c, sc, s) for x, y, c, sc, s in zip(
        rng.uniform(0, 10, n_det), rng.uniform(0, 10, n_det), rng.integers(1, classes, n_det),
        rng.uniform(0, 1, n_det), rng.integers(0, samples, n_det))]
    # make some detections land close to a ground truth
    for d, g in zip(dets[::2], gts):
        d.bev_center = (g[0][0] + rng.normal(0, 0.7), g[0][1] + rng.normal(0, 0.7))
        d.class_id, d.sample = g[1], g[2]
    return dets, gts


def test_detection_validation():
    with pytest.raises(ConfigError):
        Detection((0, 0), 1, 1.5)
    with pytest.raises(ConfigError):
        Detection((0, 0), 1, float("nan"))
    with pytest.raises(ConfigError):
        APConfig(thresholds=(2.0, 1.0))
    with pytest.raises(ConfigError):
        APConfig(thresholds=(0.0, 1.0))
    with pytest.raises(ConfigError):
        average_precision([], [((0, 0), 1)], 1, 0.0)


def test_cluster_single_clump(rng):
    xyz = np.c_[rng.normal(3, 0.1, (20, 2)), np.zeros(20)]
    probs = np.zeros((20, 4))
    probs[:, 2] = 0.8
    probs[:, 0] = 0.2
    dets = cluster_detections(xyz, probs)
    assert len(dets) == 1 and dets[0].class_id == 2
    np.testing.assert_allclose(dets[0].bev_center, xyz[:, :2].mean(axis=0))
    assert dets[0].score == pytest.approx(0.8)


def test_cluster_two_clumps(rng):
    xy = np.vstack([rng.normal(0, 0.2, (10, 2)), rng.normal((10, 0), 0.2, (10, 2))])
    probs = np.tile([0.1, 0.9], (20, 1))
    dets = cluster_detections(np.c_[xy, np.zeros(20)], probs, radius=1.0)
    assert len(dets) == 2
    assert cluster_detections(np.c_[xy, np.zeros(20)], probs, min_pts=11) == []
    with pytest.raises(ConfigError):
        cluster_detections(xy, probs, radius=0)


def test_cluster_union_find_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(5, 60))
        xyz = np.c_[rng.uniform(0, 8, (n, 2)), rng.normal(size=n)]
        probs = rng.dirichlet(np.ones(3), n)
        dets = cluster_detections(xyz, probs, min_pts=2, radius=0.9)
        labels = probs.argmax(axis=1)
        expect = []
        for c in (1, 2):
            idx = np.flatnonzero(labels == c)
            if idx.size < 2:
                continue
            for grp in union_find_clusters(xyz[idx, :2].tolist(), 0.9):
                if len(grp) >= 2:
                    expect.append((c, tuple(xyz[idx[grp], :2].mean(axis=0))))
        got = sorted((d.class_id, d.bev_center) for d in dets)
        assert len(got) == len(expect)
        for (c1, p1), (c2, p2) in zip(got, sorted(expect)):
            assert c1 == c2 and np.allclose(p1, p2, atol=1e-9)


def test_ap_perfect_and_zero():
    gts = [((0, 0), 1), ((5, 5), 1)]
    dets = [Detection((0.1, 0), 1, 0.9), Detection((5, 5.2), 1, 0.6)]
    assert average_precision(dets, gts, 1, 0.5) == 1.0
    assert average_precision([], gts, 1, 0.5) == 0.0
    assert average_precision(dets, [], 1, 0.5) == 0.0


def test_ap_hand_case():
    gts = [((0, 0), 1), ((10, 0), 1)]
    dets = [Detection((0, 0.1), 1, 0.9), Detection((5, 5), 1, 0.8), Detection((10, 0.1), 1, 0.7)]
    precision, recall = precision_recall(dets, gts, 1, 1.0)
    np.testing.assert_allclose(precision, [1, 0.5, 2 / 3])
    np.testing.assert_allclose(recall, [0.5, 0.5, 1])
    # 51 recall levels up to 0.5 at precision 1, 50 above at 2/3
    assert average_precision(dets, gts, 1, 1.0) == float(Fraction(253, 303))


def test_matching_respects_sample():
    gts = [((0, 0), 1, 0)]
    assert average_precision([Detection((0, 0), 1, 0.9, sample=1)], gts, 1, 1.0) == 0.0
    assert average_precision([Detection((0, 0), 1, 0.9, sample=0)], gts, 1, 1.0) == 1.0


def test_duplicates_count_as_false_positives():
    gts = [((0, 0), 1)]
    dets = [Detection((0, 0), 1, 0.9), Detection((0.1, 0), 1, 0.8), Detection((0, 0.1), 1, 0.7)]
    precision, recall = precision_recall(dets, gts, 1, 1.0)
    np.testing.assert_allclose(precision, [1, 0.5, 1 / 3])
    assert recall[-1] == 1.0


def test_equal_scores_keep_detection_order():
    gts = [((0, 0), 1)]
    hit_first = [Detection((0, 0), 1, 0.5), Detection((9, 9), 1, 0.5)]
    miss_first = hit_first[::-1]
    assert average_precision(hit_first, gts, 1, 1.0) == 1.0
    assert average_precision(miss_first, gts, 1, 1.0) == pytest.approx(0.5)


def test_mean_ap_examples():
    gts = [((0, 0), 1), ((5, 0), 1)]
    dets = [Detection((0.5, 0), 1, 0.9), Detection((6.5, 0), 1, 0.8)]
    cfg = APConfig(thresholds=(1.0, 2.0))
    a1, a2 = (average_precision(dets, gts, 1, t) for t in (1.0, 2.0))
    assert (a1, a2) == (51 / 101, 1.0)
    assert mean_ap(dets, gts, cfg) == pytest.approx((a1 + a2) / 2)
    perfect = [Detection(g[0], g[1], 1.0) for g in gts]
    assert mean_ap(perfect, gts) == 1.0
    assert mean_ap(dets, []) is None
    rep = ap_report(dets, gts, cfg)
    assert set(rep["per_threshold"]) == {"1", "2"} and set(rep["per_class"]) == {"1"}


def test_ap_reference_oracle(rng):
    for _ in range(100):
        dets, gts = random_case(rng)
        for cls in (1, 2):
            for t in (0.5, 1.0, 2.0, 4.0):
                assert abs(average_precision(dets, gts, cls, t) - ref_ap(dets, gts, cls, t)) <= 1e-12


def test_mean_ap_from_json_dump(rng, tmp_path):
    dets, gts = random_case(rng, n_gt=8, n_det=15)
    write_detections(tmp_path / "d" / "dets.jsonl", dets)
    back = read_detections(tmp_path / "d" / "dets.jsonl")
    assert [(d.bev_center, d.class_id, d.score, d.sample) for d in back] == \
        [(d.bev_center, d.class_id, d.score, d.sample) for d in dets]
    classes = sorted({g[1] for g in gts})
    ref = np.mean([ref_ap(back, gts, c, t) for c in classes for t in (0.5, 1, 2, 4)])
    assert mean_ap(back, gts) == pytest.approx(ref, abs=1e-12)


def test_read_detections_reports_offset(tmp_path):
    p = tmp_path / "bad.jsonl"
    good = b'{"center": [0, 0], "class_id": 1, "score": 0.5}\n'
    p.write_bytes(good + b"{oops\n")
    with pytest.raises(DataError, match=f"offset {len(good)}"):
        read_detections(p)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0))
def test_ap_properties(seed, scale):
    rng = np.random.default_rng(seed)
    dets, gts = random_case(rng)
    for cls in (1, 2):
        aps = [average_precision(dets, gts, cls, t) for t in (0.25, 0.5, 1, 2, 4, 8)]
        assert all(b >= a for a, b in zip(aps, aps[1:]))
        scaled = [Detection(d.bev_center, d.class_id, d.score * scale, d.sample) for d in dets]
        for t in (0.5, 2.0):
            assert average_precision(scaled, gts, cls, t) == average_precision(dets, gts, cls, t)
