import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradirn.data import SamplePair, synth_pair, to_sample
from gradirn.evaluation import (EvalReport, LabelMask, dice, evaluate_dataset, hausdorff,
                                warp_labels, warp_labels_array)
from gradirn.registration import RegistrationConfig, RegistrationParams, Variant

masks = hnp.arrays(np.uint8, (6, 7), elements=st.integers(0, 3))


def mask(a):
    return LabelMask.from_array(np.asarray(a, dtype=np.uint8))


def test_zero_field_leaves_mask_unchanged(rng):
    m = mask(rng.integers(0, 4, size=(5, 6)))
    np.testing.assert_array_equal(warp_labels(m, np.zeros((2, 5, 6))).grid, m.grid)


def test_constant_shift_hand_example():
    d = np.zeros((2, 1, 3))
    d[1] = 1.0
    np.testing.assert_array_equal(warp_labels_array(np.array([[1, 2, 3]]), d), [[2, 3, 3]])


def test_warp_labels_size_mismatch():
    with pytest.raises(ValueError):
        warp_labels_array(np.zeros((3, 3)), np.zeros((2, 3, 4)))


@settings(max_examples=40, deadline=None)
@given(masks, hnp.arrays(np.float64, (2, 6, 7), elements=st.floats(-4, 4)))
def test_warped_labels_are_a_subset(m, d):
    out = warp_labels_array(m, d)
    assert set(np.unique(out)) <= set(np.unique(m))


def test_dice_examples():
    a = np.zeros((4, 4), np.uint8)
    a[0, :] = 1
    assert dice(mask(a), mask(a), 1) == 1.0
    b = np.zeros((4, 4), np.uint8)
    b[3, :] = 1
    assert dice(mask(a), mask(b), 1) == 0.0
    c = np.zeros((4, 4), np.uint8)
    c[0, 2:] = 1
    c[1, :2] = 1
    assert dice(mask(a), mask(c), 1) == 0.5


@settings(max_examples=40, deadline=None)
@given(masks, masks, st.permutations([1, 2, 3]))
def test_dice_symmetric_and_relabel_invariant(a, b, perm):
    lut = np.array([0, *perm], dtype=np.uint8)
    for lab in (1, 2, 3):
        d = dice(mask(a), mask(b), lab)
        assert d == dice(mask(b), mask(a), lab)
        assert d == dice(mask(lut[a]), mask(lut[b]), lut[lab])


def test_hausdorff_examples():
    a = np.zeros((5, 6), np.uint8)
    b = np.zeros((5, 6), np.uint8)
    a[0, 0] = 1
    b[3, 4] = 1
    assert hausdorff(mask(a), mask(b), 1) == 5.0
    assert hausdorff(mask(a), mask(a), 1) == 0.0


def test_hausdorff_empty_side_is_named():
    a = np.zeros((4, 4), np.uint8)
    b = a.copy()
    b[1, 1] = 1
    with pytest.raises(ValueError, match="first"):
        hausdorff(mask(a), mask(b), 1)
    with pytest.raises(ValueError, match="second"):
        hausdorff(mask(b), mask(a), 1)


@settings(max_examples=40, deadline=None)
@given(masks, masks)
def test_hausdorff_symmetric_nonnegative(a, b):
    if not (a == 1).any() or not (b == 1).any():
        return
    h = hausdorff(mask(a), mask(b), 1)
    assert h >= 0 and h == hausdorff(mask(b), mask(a), 1)
    assert hausdorff(mask(a), mask(b), 1, percentile=95) <= h


def test_percentile_hausdorff_single_points():
    a = np.zeros((5, 5), np.uint8)
    b = a.copy()
    a[0, 0], b[0, 3] = 1, 1
    assert hausdorff(mask(a), mask(b), 1, percentile=95) == 3.0


@pytest.fixture(scope="module")
def small_set():
    return [to_sample(synth_pair(1, 32, index=i, pair_id=f"s{i}")) for i in range(3)]


def test_identity_registration_reproduces_initial_metrics(small_set):
    cfg = RegistrationConfig(variant=Variant.VN_NOGRAD)
    report = evaluate_dataset(small_set, RegistrationParams.init(cfg), cfg)
    for r in report.records:
        assert r.dice == r.initial_dice and r.hd == r.initial_hd
        assert r.folding_percent == 0 and r.std_log_jac == 0
        assert r.endpoint_error == pytest.approx(r.initial_endpoint_error)


def test_aggregate_recomputed_from_json(small_set, tmp_path):
    cfg = RegistrationConfig(variant=Variant.PLAIN_GD, plain_gd_step=1.0)
    report = evaluate_dataset(small_set, None, cfg)
    path = tmp_path / "report.json"
    path.write_text(json.dumps(report.to_dict()))
    data = json.loads(path.read_text())
    agg = data["aggregate"]
    for lab, stats in agg["per_label"].items():
        vals = [r["dice"][lab] for r in data["records"] if lab in r["dice"]]
        assert stats["dice"]["mean"] == float(np.mean(vals))
    assert agg["mean_dice"]["mean"] == float(np.mean([r["mean_dice"] for r in data["records"]]))
    assert agg["folding_percent"]["mean"] == float(np.mean([r["folding_percent"] for r in data["records"]]))


def test_missing_masks_are_skipped_and_counted(small_set):
    s = small_set[0]
    bare = SamplePair("bare", s.moving, s.fixed)
    report = evaluate_dataset([bare, *small_set[1:]], None, RegistrationConfig(variant=Variant.PLAIN_GD))
    assert report.skipped == ["bare"] and report.aggregate()["num_skipped"] == 1
    assert len(report.records) == 2


def test_threaded_evaluation_matches_serial(small_set):
    cfg = RegistrationConfig(variant=Variant.PLAIN_GD, plain_gd_step=1.0)
    serial = evaluate_dataset(small_set, None, cfg, threads=1).to_dict(include_timing=False)
    threaded = evaluate_dataset(small_set, None, cfg, threads=3).to_dict(include_timing=False)
    assert json.dumps(serial) == json.dumps(threaded)


def test_empty_report_aggregates():
    agg = EvalReport().aggregate()
    assert agg["num_pairs"] == 0 and agg["mean_dice"]["mean"] is None
