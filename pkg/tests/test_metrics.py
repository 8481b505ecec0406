import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import metric_oracle as oracle
from speechnas import metrics as mt


def test_cosine_examples():
    assert mt.cosine_score([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
    assert mt.cosine_score([1.0, 0.0], [0.0, 3.0]) == 0.0
    assert mt.cosine_score([1.0, 0.0], [1.0, 1.0]) == pytest.approx(np.sqrt(2) / 2)
    assert mt.cosine_score([0.0, 0.0], [1.0, 1.0]) == 0.0
    with pytest.raises(ValueError):
        mt.cosine_score([1.0], [1.0, 2.0])


def test_cosine_rows_match_single():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    np.testing.assert_allclose(mt.cosine_scores(A, B), [mt.cosine_score(a, b) for a, b in zip(A, B)])


def test_eer_perfect_separation():
    assert mt.eer([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])[0] == 0.0


def test_eer_crossing_example():
    value, thr = mt.eer([0.1, 0.9, 0.2, 0.8], [1, 1, 0, 0])
    assert value == 0.5
    assert 0.2 < thr <= 0.8


def test_eer_interpolates_between_sweep_points():
    # miss - fa steps from -1/6 (t=1) to +1/6 (t=2), so the crossing sits halfway between
    scores = [0.0, 1.0, 2.0, 0.5, 2.5]
    labels = [1, 1, 1, 0, 0]
    assert mt.eer(scores, labels)[0] == pytest.approx(0.5)
    assert mt.eer(scores, labels)[1] == pytest.approx(1.5)
    assert oracle.eer(scores, labels) == pytest.approx(0.5)
    assert mt.eer_nearest(scores, labels) >= mt.eer(scores, labels)[0]


def test_eer_symmetry_under_flip():
    rng = np.random.default_rng(3)
    s, l = rng.normal(size=50), rng.random(50) < 0.5
    assert mt.eer(s, l)[0] == pytest.approx(mt.eer(-s, ~l)[0], abs=1e-12)


def test_single_class_is_rejected():
    with pytest.raises(ValueError, match="target"):
        mt.eer([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        mt.min_dcf([0.1, 0.2], [0, 0])


@pytest.mark.parametrize("seed", range(20))
def test_agrees_with_exhaustive_oracle(seed):
    s, l = oracle.random_instance(np.random.default_rng(seed))
    assert mt.eer(s, l)[0] == pytest.approx(oracle.eer(s, l), abs=1e-9)
    for p in (0.01, 0.001):
        assert mt.min_dcf(s, l, p) == pytest.approx(oracle.min_dcf(s, l, p), abs=1e-9)
        assert mt.min_dcf(s, l, p, normalize=False) == pytest.approx(oracle.min_dcf(s, l, p, False), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), kind=st.sampled_from(["exp", "cube", "affine", "arctan"]))
def test_monotone_transform_invariance(seed, kind):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=int(rng.integers(4, 200)))
    l = rng.random(s.size) < 0.5
    l[0], l[1] = True, False
    f = {"exp": np.exp, "cube": lambda x: x ** 3, "affine": lambda x: 3 * x - 7, "arctan": np.arctan}[kind]
    assert mt.eer(f(s), l)[0] == pytest.approx(mt.eer(s, l)[0], abs=1e-12)
    assert mt.min_dcf(f(s), l, 0.01) == pytest.approx(mt.min_dcf(s, l, 0.01), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_duplicate_trial_moves_eer_by_at_most_one_step(seed):
    rng = np.random.default_rng(seed)
    s, l = oracle.random_instance(rng)
    s, l = s[:200], l[:200]
    i = int(rng.integers(0, s.size))
    s2, l2 = np.append(s, s[i]), np.append(l, l[i])
    bound = 1.0 / min(l.sum(), (~l).sum())
    assert abs(mt.eer(s2, l2)[0] - mt.eer(s, l)[0]) <= bound + 1e-12


def test_dcf_perfect_separation_and_identical_scores():
    assert mt.min_dcf([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0], 0.01) == 0.0
    same, labels = [0.3] * 6, [1, 0, 1, 0, 0, 0]
    # accept all costs 0.99/0.01 = 99, reject all costs 0.01/0.01 = 1
    assert mt.min_dcf(same, labels, 0.01) == pytest.approx(1.0)
    assert mt.min_dcf(same, labels, 0.01) == pytest.approx(oracle.min_dcf(same, labels, 0.01))
    assert mt.min_dcf(same, labels, 0.01, normalize=False) == pytest.approx(0.01)


@pytest.mark.parametrize("seed", range(5))
def test_min_dcf_below_cost_at_eer_threshold(seed):
    s, l = oracle.random_instance(np.random.default_rng(100 + seed))
    _, thr = mt.eer(s, l)
    for p in (0.01, 0.001):
        assert mt.min_dcf(s, l, p) <= mt.dcf_at(s, l, thr, p) + 1e-12


def test_eer_in_unit_interval():
    rng = np.random.default_rng(9)
    for _ in range(20):
        s, l = oracle.random_instance(rng)
        assert 0.0 <= mt.eer(s, l)[0] <= 1.0


def test_trial_files_round_trip(tmp_path):
    trials = [mt.Trial("a", "b", True), mt.Trial("a", "c", False)]
    mt.write_trials(tmp_path / "t.tsv", trials)
    assert mt.read_trials(tmp_path / "t.tsv").trials == trials
    mt.write_trials(tmp_path / "s.tsv", trials, [0.5, -0.25])
    back = mt.read_trials(tmp_path / "s.tsv")
    np.testing.assert_array_equal(back.scores, [0.5, -0.25])
    (tmp_path / "bad.tsv").write_text("a\tb\t2\n")
    with pytest.raises(ValueError, match="malformed"):
        mt.read_trials(tmp_path / "bad.tsv")


def test_scoring_reports_unresolved_ids():
    ts = mt.TrialSet([mt.Trial("a", "zz", True)])
    with pytest.raises(KeyError, match="zz"):
        ts.score_with({"a": np.ones(3)})


def test_report_round_trip():
    values = mt.evaluate_scores([0.9, 0.1, 0.8, 0.3], [1, 0, 1, 0])
    parsed = mt.parse_report(mt.format_report(values))
    assert float(parsed["eer"]) == 0.0
    assert set(parsed) >= {"eer", "threshold", "dcf_0.01", "dcf_0.001", "dcf_0.01_raw", "n_target"}
