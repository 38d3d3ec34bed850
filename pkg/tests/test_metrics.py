import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anesgan.metrics import (AugmentationScore, RunScore, REPORT_HEADER, compare_runs,
                             default_window, discriminator_accuracy, format_report, score_batch,
                             score_bis)
from anesgan.pkpd import PatientModel, synth_dataset

MODEL = PatientModel()


def test_score_invariants():
    with pytest.raises(ValueError):
        AugmentationScore(-1.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        AugmentationScore(1.0, 0.0, 0.0, 0.0, d_accuracy=1.5)
    assert math.isnan(AugmentationScore(1.0, 0.0, 1.0, 0.0).d_accuracy)


def test_ground_truth_batch_is_stable():
    ds = synth_dataset(12, T=180, seed=4)
    s = score_batch(ds.doses(), ds.covariates, MODEL)
    assert s.bis_stability <= 10.0
    assert s.peak_score > 2.0


def test_flat_fifty_and_constant_doses():
    T = 60
    bis = np.full((3, T), 50.0)
    doses = np.ones((3, 2, T))
    s = score_bis(bis, doses, default_window(T))
    assert s.bis_stability == 0.0 and s.bis_drift == 0.0
    assert math.isclose(s.peak_score, 1.0) and s.dose_dispersion == 0.0


def test_zero_doses_baseline():
    s = score_batch(np.zeros((4, 2, 60)), None, MODEL)
    assert s.bis_drift == 0.0 and s.bis_stability == abs(MODEL.e0 - 50.0)
    assert s.peak_score == 0.0


def test_drift_recovers_linear_slope():
    T = 100
    lo, hi = default_window(T)
    bis = np.tile(40.0 + 0.2 * np.arange(T), (2, 1))
    s = score_bis(bis, np.ones((2, 2, T)), (lo, hi))
    assert math.isclose(s.bis_drift, 0.2, rel_tol=1e-12)


def test_window_and_batch_validation():
    with pytest.raises(ValueError, match="window"):
        score_batch(np.ones((1, 2, 60)), None, MODEL, window=(5, 50))
    with pytest.raises(ValueError, match="non-empty"):
        score_batch(np.ones((0, 2, 60)), None, MODEL)


def test_discriminator_accuracy_modes():
    assert discriminator_accuracy([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert discriminator_accuracy([0.4, 0.6], [0.4, 0.6]) == 0.5
    assert discriminator_accuracy([0.5], [-0.5], mode="linear", linear_threshold=0.0) == 1.0
    assert discriminator_accuracy([10.0, 12.0], [1.0, 3.0], mode="critic") == 1.0


def run(label, seed, stab, h="h"):
    return RunScore(label, seed, h, AugmentationScore(stab, 0.0, 1.0, 0.1, 0.5))


def test_compare_runs_ranking_and_spread():
    rows = compare_runs([run("b", 0, 3.0), run("a", 0, 9.0), run("b", 1, 5.0), run("untrained", 0, 36.0)])
    assert [r["variant"] for r in rows] == ["b", "b", "a", "untrained"]
    assert rows[0]["variant_mean_bis_stability"] == 4.0 and rows[0]["variant_spread_bis_stability"] == 2.0
    assert rows[0]["n_seeds"] == 2 and rows[-1]["rank"] == 3


def test_compare_runs_ties_and_refusals():
    rows = compare_runs([run("y", 0, 2.0), run("x", 0, 2.0)])
    assert [r["variant"] for r in rows] == ["x", "y"]
    with pytest.raises(ValueError, match="different datasets"):
        compare_runs([run("x", 0, 1.0, "h1"), run("y", 0, 1.0, "h2")])
    with pytest.raises(ValueError, match="at least two"):
        compare_runs([run("x", 0, 1.0)])
    with pytest.raises(ValueError, match="probe seeds"):
        compare_runs([run("x", 0, 1.0), RunScore("y", 0, "h", run("y", 0, 1.0).score, probe_seed=9)])


@settings(max_examples=50, deadline=None)
@given(st.permutations(range(5)))
def test_ranking_invariant_to_input_order(perm):
    runs = [run("v", 0, 4.0), run("w", 1, 2.0), run("v", 1, 6.0), run("x", 0, 5.0), run("w", 0, 3.0)]
    base = format_report(compare_runs(runs))
    assert format_report(compare_runs([runs[i] for i in perm])) == base


def test_report_format():
    text = format_report(compare_runs([run("a", 0, 1.5), run("b", 0, 2.5)]))
    lines = text.splitlines()
    assert lines[0].split(",") == list(REPORT_HEADER)
    assert lines[1].startswith("1,a,0,1,1.5,")
