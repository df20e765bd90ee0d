import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmsage.channel import RfConfig, synthesize_channel, trace_scene_paths
from gmsage.config import load_preset
from gmsage.evaluation import (
    BounceClassMismatch,
    GroundTruth,
    blockage_confusion,
    build_report,
    concatenated_pdp,
    emit_report,
    format_table,
    localization_error,
    match_by_delay,
    sns_amplitude_map,
)
from gmsage.geometry import SPEED_OF_LIGHT
from gmsage.sage import ONE_BOUNCE, TWO_BOUNCE, PathEstimate
from gmsage.serialize import (DocumentError, estimates_from_dict, truth_from_dict, truth_to_dict,
                              estimate_to_dict)

RF = RfConfig()
BLOCKED = load_preset("blocked")
PATHS = trace_scene_paths(BLOCKED.scene)
TRUTH = GroundTruth.from_paths(PATHS)

pairs_of_points = st.integers(1, 3).flatmap(
    lambda k: st.tuples(*[st.lists(st.floats(-10, 10), min_size=2 * k, max_size=2 * k)] * 2))


def estimate_from_truth(t, offset=(0.0, 0.0), mask=None):
    kind = {0: "los", 1: ONE_BOUNCE, 2: TWO_BOUNCE}[t.bounce_order]
    dims = t.blockage_mask.shape
    return PathEstimate(
        bounce_class=kind,
        scatterers=t.scatterers + np.asarray(offset),
        walls=t.walls,
        reference_delay=t.reference_delay,
        delays=np.full(dims, t.reference_delay),
        equivalent_amplitude=np.full(dims, 0.1 + 0j) * (t.blockage_mask if mask is None else mask),
        blockage_estimate=t.blockage_mask.copy() if mask is None else mask,
        objective_value=1.0,
    )


# --- localization error -------------------------------------------------------------


def test_error_examples():
    assert localization_error([(1, 2)], [(1, 2)]) == [0.0]
    assert localization_error([(2.4, 6)], [(2.46, 6)]) == [pytest.approx(0.06)]
    assert localization_error([(0, 2.9)], [(0, 2.88)]) == [pytest.approx(0.02)]
    assert localization_error([(0, 0), (3, 4)], [(0, 0), (0, 0)]) == [0.0, 5.0]


def test_error_length_mismatch():
    with pytest.raises(BounceClassMismatch):
        localization_error([(0, 0)], [(0, 0), (1, 1)])


@settings(max_examples=100, deadline=None)
@given(pairs_of_points)
def test_error_symmetry_and_sign(pair):
    a, b = (np.reshape(v, (-1, 2)) for v in pair)
    ab, ba = localization_error(a, b), localization_error(b, a)
    assert ab == ba
    assert all(v >= 0 for v in ab)


# --- PDP and amplitude map ------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 5), st.integers(2, 64))
def test_pdp_energy_conservation(seed, m, n, p):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((m, n, p)) + 1j * rng.standard_normal((m, n, p))
    tx = int(rng.integers(0, m))
    _, pdp = concatenated_pdp(y, tx, 10e6)
    energy = np.sum(np.abs(y[tx]) ** 2, axis=-1)
    np.testing.assert_allclose(pdp.sum(axis=1), energy, rtol=1e-9)


def test_pdp_single_path_bright_column():
    k = 33
    tau = k * RF.delay_bin
    y = np.exp(-2j * np.pi * tau * np.arange(RF.sub_band_count) * RF.sub_bandwidth)
    y = np.broadcast_to(y, (2, 7, RF.sub_band_count))
    distances, pdp = concatenated_pdp(y, 1, RF.sub_bandwidth)
    assert pdp.shape == (7, RF.sub_band_count)
    assert np.all(np.argmax(pdp, axis=1) == k)
    assert distances[k] == pytest.approx(SPEED_OF_LIGHT * tau)


def test_pdp_index_checked():
    with pytest.raises(IndexError):
        concatenated_pdp(np.zeros((2, 2, 4)), 2, 1e6)


def test_blocked_path_leaves_null_band():
    y = synthesize_channel(PATHS, RF).values
    _, pdp = concatenated_pdp(y, 0, RF.sub_bandwidth)
    for path in PATHS:
        row = path.blockage_mask[0]
        if row.all():
            continue
        k = int(round(path.delays[0, 0] / RF.delay_bin))
        inside = pdp[row == 0, k].mean()
        outside = pdp[row == 1, k].mean()
        # neighbouring paths still leak into the bin, but the null is clear
        assert outside > 5 * inside


def test_amplitude_map_examples():
    flat = [estimate_from_truth(t) for t in TRUTH.paths if t.blockage_mask.all()]
    amp = sns_amplitude_map(flat, floor_db=None)
    assert amp.shape == (len(flat), TRUTH.dims[1])
    assert np.ptp(amp, axis=1).max() <= 1e-9
    blocked = [estimate_from_truth(t) for t in TRUTH.paths if not t.blockage_mask.all()]
    amp = sns_amplitude_map(blocked, floor_db=-40)
    assert amp.min() == pytest.approx(amp.max() - 40)
    with pytest.raises(ValueError):
        sns_amplitude_map([])


# --- confusion and matching -----------------------------------------------------------


def test_confusion_examples():
    ones = np.ones((4, 5))
    assert blockage_confusion(ones, ones) == (20, 0, 0, 0)
    truth = np.zeros((4, 5))
    truth[:, :2] = 1
    tp, fp, tn, fn = blockage_confusion(1 - truth, truth)
    assert tp == 0 and tn == 0 and fp + fn == 20
    with pytest.raises(ValueError):
        blockage_confusion(np.ones(3), np.ones(4))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=60), st.randoms())
def test_confusion_sums(bits, rnd):
    other = bits[:]
    rnd.shuffle(other)
    assert sum(blockage_confusion(bits, other)) == len(bits)


def test_match_by_delay():
    bin_ = 1e-9
    pairs, spurious, missed = match_by_delay([10e-9, 30e-9, 90e-9], [10.4e-9, 29e-9, 50e-9], bin_)
    assert pairs == {0: 0, 1: 1}
    assert spurious == [2] and missed == [2]
    assert match_by_delay([], [1e-9], bin_) == ({}, [], [0])


# --- report -----------------------------------------------------------------------------


def _estimates():
    return [estimate_from_truth(t) for t in TRUTH.paths]


def test_report_from_truth_has_zero_errors():
    report = build_report(_estimates(), TRUTH, RF.delay_bin)
    scored = [r for r in report.paths if r.scored]
    assert len(scored) == 7 and len(report.paths) == 8
    assert all(max(r.errors) <= 0.1 for r in scored)
    assert all(r.class_correct and r.walls_correct for r in report.paths)
    assert report.record("left->right").ambiguity_exempt
    for r in report.paths:
        c = r.confusion
        assert c["fp"] == c["fn"] == 0
        assert sum(c.values()) == TRUTH.dims[0] * TRUTH.dims[1]
    table = format_table(report)
    assert table.count("\n") == 2 + 8
    assert "(direction ambiguity)" in table and "(not scored)" in table


def test_report_order_invariance(tmp_path):
    est = _estimates()
    shuffled = est[:]
    random.Random(3).shuffle(shuffled)
    a = build_report(est, TRUTH, RF.delay_bin).to_dict()
    b = build_report(shuffled, TRUTH, RF.delay_bin).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_report_marks_class_mismatch_and_spurious():
    est = _estimates()
    upper = next(i for i, t in enumerate(TRUTH.paths) if t.label == "upper")
    est[upper].scatterers = np.array([[2.4, 6.0], [6.0, 2.0]])
    est[upper].bounce_class = TWO_BOUNCE
    ghost = estimate_from_truth(TRUTH.paths[1])
    ghost.reference_delay = 90e-9
    report = build_report(est + [ghost], TRUTH, RF.delay_bin)
    rec = report.record("upper")
    assert rec.errors is None and not rec.class_correct
    assert len(report.spurious) == 1 and report.missed == []
    assert "class mismatch" in format_table(report)


def test_emit_report_byte_identical(tmp_path):
    kwargs = dict(objective_trace=[3.0, 2.0, 1.5], noise_variance=1e-3, iterations=2,
                  converged=True, config={"seed": 1})
    first = emit_report(build_report(_estimates(), TRUTH, RF.delay_bin, runtime=1.0, **kwargs),
                        tmp_path / "a")
    second = emit_report(build_report(_estimates(), TRUTH, RF.delay_bin, runtime=7.0, **kwargs),
                         tmp_path / "b")
    assert first["report"].read_bytes() == second["report"].read_bytes()
    assert first["table"].read_bytes() == second["table"].read_bytes()
    doc = json.loads(first["report"].read_text())
    assert doc["schema_version"] == 1 and len(doc["paths"]) == 8
    header = first["trace"].read_text().splitlines()[0]
    assert header == "sweep,objective"
    assert first["amplitude_map"].read_text().startswith("path,rx1_dB")


def test_empty_report(tmp_path):
    empty = GroundTruth([], (0, 0))
    report = build_report([], empty, RF.delay_bin)
    files = emit_report(report, tmp_path)
    doc = json.loads(files["report"].read_text())
    assert doc["paths"] == [] and doc["spurious"] == [] and doc["missed"] == []
    assert "amplitude_map" not in files


def test_emit_report_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    report = build_report([], GroundTruth([], (0, 0)), RF.delay_bin)
    with pytest.raises(OSError, match="cannot write report"):
        emit_report(report, blocker / "sub")


# --- truth and serialization -----------------------------------------------------------


def test_truth_lies_on_walls():
    TRUTH.check_on_walls(BLOCKED.scene)
    bad = GroundTruth.from_paths(PATHS)
    bad.paths[1].scatterers = bad.paths[1].scatterers + 0.5
    with pytest.raises(ValueError):
        bad.check_on_walls(BLOCKED.scene)


def test_truth_round_trip():
    back = truth_from_dict(json.loads(json.dumps(truth_to_dict(TRUTH))))
    assert back.dims == TRUTH.dims
    for a, b in zip(back.paths, TRUTH.paths):
        assert a.label == b.label and a.walls == b.walls
        np.testing.assert_array_equal(a.scatterers, b.scatterers)
        np.testing.assert_array_equal(a.blockage_mask, b.blockage_mask)
        assert a.reference_delay == b.reference_delay


def test_estimates_round_trip_and_schema():
    est = _estimates()
    doc = {"schema": "gmsage-estimates/1", "estimates": [estimate_to_dict(e) for e in est]}
    back, _ = estimates_from_dict(json.loads(json.dumps(doc)))
    for a, b in zip(back, est):
        np.testing.assert_array_equal(a.scatterers.reshape(-1, 2), b.scatterers.reshape(-1, 2))
        np.testing.assert_array_equal(a.equivalent_amplitude, b.equivalent_amplitude)
        assert a.bounce_class == b.bounce_class
    with pytest.raises(DocumentError):
        estimates_from_dict({"schema": "gmsage-truth/1"})
    with pytest.raises(DocumentError):
        truth_from_dict({"schema": "gmsage-truth/1", "paths": [{}], "dims": [1, 1]})
