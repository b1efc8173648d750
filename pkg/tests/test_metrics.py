import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conda_cl.datagen import CLASS_NAMES
from conda_cl.errors import BadShape, EmptyMetric, IncompleteRecords, WriteError
from conda_cl.metrics import (REFERENCE_RESULTS, ForgettingReport, MetricsRecord,
                              accumulate_confusion, compute_iou, export, forgetting_report,
                              load_export, new_confusion, records_to_csv)
from conda_cl.rng import Rng
from conda_cl.selftest import brute_force_iou, brute_force_miou


def test_accumulate_examples():
    cm = new_confusion(3)
    gt = np.full(10, 2)
    cm2 = accumulate_confusion(gt, gt, cm)
    assert cm2[2, 2] == 10 and cm2.sum() == 10
    ignored = accumulate_confusion(np.zeros(4), np.full(4, 255), cm)
    assert np.array_equal(ignored, cm)
    with pytest.raises(BadShape):
        accumulate_confusion(np.zeros(3), np.zeros(4), cm)


def test_rows_are_ground_truth():
    cm = accumulate_confusion(np.array([1]), np.array([0]), new_confusion(2))
    assert cm[0, 1] == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**40), st.integers(1, 63))
def test_merge_equivalence(seed, cut):
    rng = Rng(seed)
    gt = rng.integers(0, 5, size=64)
    gt[rng.uniform((64,)) < 0.1] = 255
    pred = rng.integers(0, 5, size=64)
    whole = accumulate_confusion(pred, gt, new_confusion(5))
    a = accumulate_confusion(pred[:cut], gt[:cut], new_confusion(5))
    b = accumulate_confusion(pred[cut:], gt[cut:], new_confusion(5))
    assert np.array_equal(a + b, whole)
    assert whole.sum() == int(np.sum(gt != 255))


def test_iou_examples():
    ious, miou = compute_iou(np.diag([3, 0, 5]))
    assert ious == [1.0, None, 1.0] and miou == 1.0
    ious, miou = compute_iou(np.array([[5, 5], [0, 10]]))
    assert ious == [0.5, 10 / 15]
    assert miou == pytest.approx((0.5 + 2 / 3) / 2, abs=1e-15)
    with pytest.raises(EmptyMetric):
        compute_iou(np.zeros((3, 3), dtype=int))


def test_iou_matches_brute_force_sets_exactly():
    for i in range(50):
        r = Rng(1000 + i)
        gt = r.integers(0, 7, size=(8, 8))
        pred = r.integers(0, 7, size=(8, 8))
        ious, miou = compute_iou(accumulate_confusion(pred, gt, new_confusion(7)))
        assert ious == brute_force_iou(pred, gt, 7)
        assert miou == brute_force_miou(pred, gt, 7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**40))
def test_iou_bounds_and_permutation_invariance(seed):
    r = Rng(seed)
    gt = r.integers(0, 4, size=30)
    pred = r.integers(0, 4, size=30)
    perm = r.permutation(30)
    ious, miou = compute_iou(accumulate_confusion(pred, gt, new_confusion(4)))
    _, miou_p = compute_iou(accumulate_confusion(pred[perm], gt[perm], new_confusion(4)))
    assert miou == miou_p
    assert all(v is None or 0 <= v <= 1 for v in ious) and 0 <= miou <= 1


def _records(values):
    """values: {(domain, stage): miou}"""
    return [MetricsRecord(s, d, [m] * 7, m, timestamp=s) for (d, s), m in sorted(values.items())]


ADAPTED = {"source": 0, "t1": 1, "t2": 2, "t3": 3}


def test_forgetting_examples():
    vals = {(d, s): 0.5 for d in ADAPTED for s in range(4)}
    rep = forgetting_report(_records(vals), ADAPTED, 3)
    assert all(v == 0 for v in rep.deltas.values())
    vals[("t1", 1)] = 0.70
    vals[("t1", 3)] = 0.65
    rep = forgetting_report(_records(vals), ADAPTED, 3)
    assert rep.deltas[("t1", 3)] == pytest.approx(-0.05, abs=1e-15)
    assert ("t1", 0) not in rep.deltas and ("t3", 2) not in rep.deltas
    assert set(rep.deltas) == {(d, s) for d, k in ADAPTED.items() for s in range(k, 4)}
    del vals[("t2", 1)]
    with pytest.raises(IncompleteRecords):
        forgetting_report(_records(vals), ADAPTED, 3)


def test_reference_results_recorded():
    assert REFERENCE_RESULTS["ours"]["avg"] == 68.9
    assert REFERENCE_RESULTS["continual_baseline"]["avg"] == 67.0
    assert [REFERENCE_RESULTS["ours"][k] for k in ("Cityscapes", "IDD", "Mapillary")] == [69.4, 66.2, 71.2]


def _full_records():
    rng = Rng(3)
    return [MetricsRecord(s, d, [float(x) for x in rng.uniform((7,))], float(rng.uniform(())), s, "abc")
            for s in range(4) for d in ADAPTED]


def test_csv_schema():
    records = _full_records()
    text = records_to_csv(records, CLASS_NAMES)
    lines = text.splitlines()
    assert lines[0] == "stage,domain,class,iou"
    assert len(lines) - 1 == 4 * 4 * (7 + 1)
    assert all(len(line.split(",")) == 4 for line in lines)
    assert lines[8].split(",")[2] == "ALL"


def test_csv_undefined_class_blank():
    rec = MetricsRecord(0, "s", [None, 0.5] + [1.0] * 5, 0.9)
    assert "0,s,flat,\n" in records_to_csv([rec], CLASS_NAMES)


def test_export_roundtrip_and_determinism(tmp_path):
    records = _full_records()
    rep = forgetting_report(records, ADAPTED, 3)
    p1 = export(records, rep, tmp_path / "a" / "run", CLASS_NAMES, "abc", 7)
    p2 = export(list(reversed(records)), rep, tmp_path / "b" / "run", CLASS_NAMES, "abc", 7)
    for kind in ("csv", "json", "svg"):
        assert open(p1[kind], "rb").read() == open(p2[kind], "rb").read()
    back, rep_back, doc = load_export(p1["json"])
    assert sorted(back, key=lambda r: (r.stage, r.domain)) == sorted(records, key=lambda r: (r.stage, r.domain))
    assert rep_back.deltas == rep.deltas and rep_back.stage_average == rep.stage_average
    assert doc["seed"] == 7 and doc["config_hash"] == "abc"
    svg = open(p1["svg"]).read()
    assert svg.startswith("<svg") and svg.count("<polyline") == 4


def test_export_write_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    records = _full_records()
    with pytest.raises(WriteError):
        export(records, forgetting_report(records, ADAPTED, 3), blocker / "sub" / "run", CLASS_NAMES)


def test_report_json_roundtrip():
    rep = ForgettingReport({("t1", 2): -0.1, ("t1", 1): 0.0}, {0: 0.5, 1: 0.4})
    assert ForgettingReport.from_json(rep.to_json()) == rep
