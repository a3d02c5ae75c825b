import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lidar_nsm import bev
from lidar_nsm import detector as det
from lidar_nsm import evaluation as ev
from lidar_nsm.bev import OrientedBox
from lidar_nsm.manifest import DatasetManifest, Entry
from oracles import ap_bruteforce, random_ap_instance


def gt_box(x, y=0.0):
    return OrientedBox(x, y, 1.8, 4.2)


def scored(b, s):
    return bev.with_score(b, s)


def test_perfect_detections_give_one():
    gts = {"a": [gt_box(5), gt_box(15)], "b": [gt_box(8)]}
    dets = [(f, scored(b, 0.9)) for f, bs in gts.items() for b in bs]
    assert ev.average_precision(dets, gts).ap == 1.0


def test_no_detections_give_zero():
    assert ev.average_precision([], {"a": [gt_box(5)]}).ap == 0.0


def test_empty_conventions():
    both = ev.average_precision([], {"a": []})
    assert both.ap == 1.0 and both.empty
    dets_only = ev.average_precision([("a", scored(gt_box(1), 0.5))], {"a": []})
    assert dets_only.ap == 0.0 and not dets_only.empty


def test_tp_fp_tp_tp_hand_case():
    gts = {"a": [gt_box(5), gt_box(15), gt_box(25)]}
    dets = [("a", scored(gt_box(5), 0.9)), ("a", scored(gt_box(45), 0.8)),
            ("a", scored(gt_box(15), 0.7)), ("a", scored(gt_box(25), 0.6))]
    r = ev.average_precision(dets, gts)
    # precision 1, 1/2, 2/3, 3/4 at recall 1/3, 1/3, 2/3, 1 -> 1/3 + 1/3 * 3/4 + 1/3 * 3/4
    assert abs(r.ap - (1 / 3 + 0.25 + 0.25)) < 1e-12
    assert abs(r.ap - float(ap_bruteforce(dets, gts, 0.5))) < 1e-12
    assert r.recall == pytest.approx([1 / 3, 1 / 3, 2 / 3, 1.0])


def test_each_gt_matched_once():
    gts = {"a": [gt_box(5)]}
    dets = [("a", scored(gt_box(5), 0.9)), ("a", scored(gt_box(5.1), 0.8))]
    assert ev.match_detections(ev.rank_detections(dets), gts, 0.5) == [True, False]


def test_class_must_agree():
    gts = {"a": [OrientedBox(5, 0, 1.8, 4.2, class_id=1)]}
    dets = [("a", OrientedBox(5, 0, 1.8, 4.2, class_id=0, score=0.9))]
    assert ev.match_detections(dets, gts, 0.5) == [False]


@pytest.mark.parametrize("seed", range(0, 500, 25))
def test_bruteforce_oracle_sample(seed):
    dets, gts = random_ap_instance(seed)
    for thr in (0.3, 0.5, 0.7):
        assert abs(ev.average_precision(dets, gts, thr).ap - float(ap_bruteforce(dets, gts, thr))) <= 1e-9


def _distinct_scores(dets):
    return len({d.score for _, d in dets}) == len(dets)


@given(st.integers(0, 10**6), st.randoms(use_true_random=False))
def test_order_invariance(seed, rnd):
    dets, gts = random_ap_instance(seed)
    if not _distinct_scores(dets):
        return
    shuffled = list(dets)
    rnd.shuffle(shuffled)
    frames = list(gts.items())
    rnd.shuffle(frames)
    assert ev.average_precision(shuffled, dict(frames)).ap == ev.average_precision(dets, gts).ap


@given(st.integers(0, 10**6), st.floats(0.05, 0.9), st.floats(0.0, 0.5))
def test_higher_threshold_never_raises_ap(seed, lo, step):
    dets, gts = random_ap_instance(seed)
    hi = min(lo + step, 1.0)
    assert ev.average_precision(dets, gts, hi).ap <= ev.average_precision(dets, gts, lo).ap + 1e-12
    assert float(ap_bruteforce(dets, gts, hi)) <= float(ap_bruteforce(dets, gts, lo))


@given(st.integers(0, 10**6), st.floats(0.0, 1.0))
def test_duplicate_of_matched_detection_cannot_raise_ap(seed, frac):
    # the duplicate ranks at or below the detection it copies; a higher-scored
    # copy would just move the true positive up the list
    dets, gts = random_ap_instance(seed)
    ranked = ev.rank_detections(dets)
    flags = ev.match_detections(ranked, gts, 0.5)
    matched = [d for d, ok in zip(ranked, flags) if ok]
    if not matched:
        return
    fid, d = matched[0]
    extra = dets + [(fid, scored(d, d.score * frac))]
    assert ev.average_precision(extra, gts).ap <= ev.average_precision(dets, gts).ap + 1e-12


def test_pr_curve_recall_monotone():
    dets, gts = random_ap_instance(11)
    r = ev.average_precision(dets, gts)
    assert all(a <= b for a, b in zip(r.recall, r.recall[1:]))
    assert 0.0 <= r.ap <= 1.0


# -- manifest-level reports ---------------------------------------------------------

@pytest.fixture
def small_set(tmp_path):
    entries = []
    labels = {"f0": [gt_box(5), gt_box(12, 3)], "f1": [gt_box(7, -2)], "f2": []}
    for fid, boxes in labels.items():
        np.save(tmp_path / f"{fid}.npy", np.zeros((4, 4), np.float32))
        bev.write_labels(tmp_path / f"{fid}.txt", boxes)
        entries.append(Entry(tmp_path / f"{fid}.npy", tmp_path / f"{fid}.txt", "real"))
    return DatasetManifest(entries), labels


def test_map_over_manifest_perfect(small_set, tmp_path):
    man, labels = small_set
    det.write_detections(tmp_path / "d.txt", list(labels),
                         [[scored(b, 1.0) for b in bs] for bs in labels.values()])
    rep = ev.map_over_manifest(tmp_path / "d.txt", man)
    assert rep.mAP == 1.0 == rep.per_class[0].ap
    assert rep.dataset_hash == man.content_hash
    csv_path, json_path = rep.write(tmp_path / "rep")
    doc = json.loads(json_path.read_text())
    assert doc["mAP"] == 1.0 and doc["iou_threshold"] == 0.5
    assert "all-point" in csv_path.read_text().splitlines()[0]


def test_map_line_order_invariant(small_set, tmp_path):
    man, labels = small_set
    det.write_detections(tmp_path / "d.txt", ["f0", "f1", "f2"],
                         [[scored(gt_box(5), 0.9), scored(gt_box(20), 0.4)], [scored(gt_box(7.5, -2), 0.7)],
                          [scored(gt_box(3), 0.2)]])
    lines = (tmp_path / "d.txt").read_text().splitlines()
    (tmp_path / "r.txt").write_text("\n".join(reversed(lines)) + "\n")
    a = ev.map_over_manifest(tmp_path / "d.txt", man)
    b = ev.map_over_manifest(tmp_path / "r.txt", man)
    assert a.to_json() == b.to_json()


def test_unknown_frame_is_hard_error(small_set, tmp_path):
    man, _ = small_set
    (tmp_path / "d.txt").write_text("zz 0 0.9 1 1 1 1 0\n")
    with pytest.raises(ev.EvalError, match="zz"):
        ev.map_over_manifest(tmp_path / "d.txt", man)


def test_multi_class_map_is_mean():
    gts = {"a": [OrientedBox(5, 0, 1.8, 4.2, class_id=0), OrientedBox(15, 0, 1.8, 4.2, class_id=1)]}
    dets = [("a", OrientedBox(5, 0, 1.8, 4.2, class_id=0, score=0.9))]
    rep = ev.evaluate(dets, gts)
    assert rep.per_class[0].ap == 1.0 and rep.per_class[1].ap == 0.0
    assert rep.mAP == 0.5


def test_curve_svg(tmp_path):
    ev.write_curve_svg(tmp_path / "c.svg", {"identity": [(0, 50.0), (1, 55.0)], "cyclegan": [(0, 50.0)]})
    text = (tmp_path / "c.svg").read_text()
    assert text.lstrip().startswith("<?xml") and "</svg>" in text
