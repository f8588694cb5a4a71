import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import (
    REFERENCE_CORRECT,
    REFERENCE_NAMED_CELLS,
    REFERENCE_TOTAL,
    TASKS,
    numeric_t_cdf,
    reference_confusion,
)
from sbgnn.errors import ValidationError
from sbgnn.metrics import (
    ConfusionMatrix,
    confusion,
    paired_t_test,
    regularized_incomplete_beta,
    report,
    student_t_cdf,
    student_t_sf2,
    write_confusion_csv,
    write_metrics_json,
)


def test_confusion_perfect():
    labels = [0, 1, 1, 2, 2, 2]
    cm = confusion(labels, labels, 3)
    np.testing.assert_array_equal(cm.counts, np.diag([1, 2, 3]))


def test_confusion_single_error():
    cm = confusion([1], [0], 2)
    np.testing.assert_array_equal(cm.counts, [[0, 1], [0, 0]])


@pytest.mark.parametrize("preds, labels", [([0, 1], [0]), ([0, 3], [0, 1]), ([-1], [0])])
def test_confusion_rejects_bad_input(preds, labels):
    with pytest.raises(ValidationError):
        confusion(preds, labels, 3)


def test_reference_matrix_accuracy():
    m = reference_confusion()
    for (i, j), v in REFERENCE_NAMED_CELLS.items():
        assert m[i, j] == v
    social = TASKS.index("Social")
    assert m[social].sum() == m[social, social] == 209
    cm = ConfusionMatrix(m)
    assert (cm.total, cm.correct) == (REFERENCE_TOTAL, REFERENCE_CORRECT)
    rep = report(cm)
    assert rep.accuracy == 1444 / 1489
    assert rep.accuracy == pytest.approx(0.96978, abs=5e-6)


def test_report_perfect():
    rep = report(ConfusionMatrix([[5, 0], [0, 5]]))
    assert (rep.accuracy, rep.macro_precision, rep.macro_recall, rep.macro_f1) == (1, 1, 1, 1)


def test_report_half():
    rep = report(ConfusionMatrix([[1, 1], [1, 1]]))
    assert (rep.accuracy, rep.macro_precision, rep.macro_recall, rep.macro_f1) == (0.5, 0.5, 0.5, 0.5)


def test_report_hand_computed_three_class():
    # rows true, cols pred
    m = [[3, 1, 0], [0, 2, 2], [1, 0, 1]]
    rep = report(ConfusionMatrix(m))
    prec = [3 / 4, 2 / 3, 1 / 3]
    rec = [3 / 4, 2 / 4, 1 / 2]
    f1 = [2 * p * r / (p + r) for p, r in zip(prec, rec)]
    assert rep.accuracy == 6 / 10
    np.testing.assert_allclose(rep.precision, prec)
    np.testing.assert_allclose(rep.recall, rec)
    assert rep.macro_f1 == pytest.approx(sum(f1) / 3)


def test_report_zero_denominator_counts_as_zero():
    with pytest.warns(RuntimeWarning, match="undefined"):
        rep = report(ConfusionMatrix([[2, 0], [2, 0]]))
    assert rep.precision[1] == 0.0 and rep.undefined_classes == [1]
    assert rep.macro_precision == 0.25


def test_report_empty_matrix():
    with pytest.raises(ValidationError):
        report(ConfusionMatrix(np.zeros((2, 2), dtype=int)))


labelings = st.integers(2, 6).flatmap(
    lambda c: st.tuples(
        st.just(c),
        st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=60),
    )
)


@settings(max_examples=80, deadline=None)
@given(labelings)
def test_accuracy_matches_direct_fraction(data):
    c, pairs = data
    preds, labels = zip(*pairs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = report(confusion(preds, labels, c))
        assert report(confusion(labels, labels, c)).accuracy == 1.0
    direct = sum(p == l for p, l in pairs) / len(pairs)
    assert abs(rep.accuracy - direct) <= 1e-15


@settings(max_examples=60, deadline=None)
@given(labelings, st.randoms(use_true_random=False))
def test_macro_metrics_permutation_invariant(data, rnd):
    c, pairs = data
    perm = list(range(c))
    rnd.shuffle(perm)
    preds, labels = zip(*pairs)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = report(confusion(preds, labels, c))
        b = report(confusion([perm[p] for p in preds], [perm[l] for l in labels], c))
    for name in ("accuracy", "macro_precision", "macro_recall", "macro_f1"):
        assert getattr(a, name) == pytest.approx(getattr(b, name), abs=1e-15)


@pytest.mark.parametrize("df", [1, 5, 9, 29])
@pytest.mark.parametrize("t", [0.5, 1, 2, 3])
def test_t_cdf_against_quadrature(t, df):
    assert abs(student_t_cdf(t, df) - numeric_t_cdf(t, df)) < 1e-8


def test_t_cdf_cauchy_closed_form():
    assert student_t_sf2(1.0, 1) == pytest.approx(1 - 2 / math.pi * math.atan(1.0), abs=1e-12)
    assert student_t_sf2(1.0, 1) == pytest.approx(0.5, abs=1e-12)


def test_t_cdf_symmetry_and_monotonicity():
    grid = np.linspace(0, 8, 81)
    for df in (1, 3, 29):
        ps = [student_t_sf2(t, df) for t in grid]
        assert all(b <= a for a, b in zip(ps, ps[1:]))
        for t in grid:
            assert student_t_sf2(-t, df) == student_t_sf2(t, df)
            assert student_t_cdf(-t, df) == pytest.approx(1 - student_t_cdf(t, df), abs=1e-15)


def test_incomplete_beta_edges():
    assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
    assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0
    # I_x(1, 1) = x
    assert regularized_incomplete_beta(1.0, 1.0, 0.3) == pytest.approx(0.3, abs=1e-14)
    with pytest.raises(ValidationError):
        regularized_incomplete_beta(0.0, 1.0, 0.5)


def test_paired_identical_samples():
    res = paired_t_test([0.9, 0.8, 0.95], [0.9, 0.8, 0.95])
    assert (res.t_statistic, res.p_value, res.degrees_of_freedom, res.n) == (0.0, 1.0, 2, 3)


def test_paired_symmetric_differences():
    res = paired_t_test([1.0, 0.0], [0.0, 1.0])
    assert (res.t_statistic, res.p_value) == (0.0, 1.0)


def test_paired_t_statistic_by_hand():
    a = [0.91, 0.95, 0.93, 0.97]
    b = [0.90, 0.92, 0.93, 0.93]
    d = [x - y for x, y in zip(a, b)]
    mean = sum(d) / 4
    sd = math.sqrt(sum((x - mean) ** 2 for x in d) / 3)
    res = paired_t_test(a, b)
    assert res.t_statistic == pytest.approx(mean / (sd / 2), rel=1e-12)
    assert res.p_value == pytest.approx(student_t_sf2(res.t_statistic, 3), rel=1e-15)
    assert 0 < res.p_value < 1
    one = paired_t_test(a, b, "greater")
    assert one.p_value == pytest.approx(res.p_value / 2, rel=1e-12)


def test_paired_errors():
    with pytest.raises(ValidationError, match="degenerate differences"):
        paired_t_test([1.0, 2.0], [0.0, 1.0])
    with pytest.raises(ValidationError):
        paired_t_test([1.0], [1.0])
    with pytest.raises(ValidationError):
        paired_t_test([1.0, 2.0], [1.0, 2.0, 3.0])


def test_writers(tmp_path):
    cm = ConfusionMatrix([[2, 1], [0, 3]])
    write_confusion_csv(cm, ["a", "b"], tmp_path / "cm.csv")
    assert (tmp_path / "cm.csv").read_text().splitlines() == ["true/pred,a,b", "a,2,1", "b,0,3"]
    write_metrics_json(report(cm), tmp_path / "m.json", {"n": 6})
    import json

    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["accuracy"] == 5 / 6 and doc["n"] == 6
