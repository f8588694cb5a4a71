"""Confusion matrices, macro-averaged classification metrics and the paired t-test."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import NumericalError, ValidationError

BETACF_RTOL = 1e-12
BETACF_MAX_ITER = 10_000
_TINY = 1e-300


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.counts)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValidationError(f"confusion matrix must be square, got {m.shape}")
        if np.any(m < 0) or not np.array_equal(m, np.round(m)):
            raise ValidationError("confusion counts must be nonnegative integers")
        m = m.astype(np.int64)
        m.flags.writeable = False
        object.__setattr__(self, "counts", m)

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def correct(self) -> int:
        return int(np.trace(self.counts))

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    undefined_classes: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    n: int
    alternative: str = "two-sided"


def confusion(preds: Sequence[int], labels: Sequence[int], c: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValidationError(
            f"preds and labels must be equal-length vectors, got {preds.shape} and {labels.shape}"
        )
    for name, v in (("prediction", preds), ("label", labels)):
        bad = (v < 0) | (v >= c)
        if np.any(bad):
            raise ValidationError(f"{name} {int(v[bad][0])} out of range for {c} classes")
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def _ratio(num: float, den: float) -> float | None:
    return num / den if den > 0 else None


def report(cm: ConfusionMatrix) -> MetricsReport:
    """One-vs-rest per-class metrics and their unweighted means.

    A per-class ratio with a zero denominator counts as 0 and the class is
    listed in ``undefined_classes`` (a warning is also raised).
    """
    m = cm.counts
    total = cm.total
    if total == 0:
        raise ValidationError("cannot report on an empty confusion matrix")
    tp = np.diag(m).astype(np.float64)
    fp = m.sum(axis=0) - tp
    fn = m.sum(axis=1) - tp
    precision, recall, f1, undefined = [], [], [], []
    for k in range(cm.n_classes):
        p = _ratio(tp[k], tp[k] + fp[k])
        r = _ratio(tp[k], tp[k] + fn[k])
        if p is None or r is None:
            undefined.append(k)
        p = 0.0 if p is None else p
        r = 0.0 if r is None else r
        precision.append(p)
        recall.append(r)
        f1.append(2.0 * p * r / (p + r) if p + r > 0 else 0.0)
    if undefined:
        warnings.warn(
            f"precision or recall undefined for classes {undefined}; counted as 0",
            RuntimeWarning,
            stacklevel=2,
        )
    return MetricsReport(
        accuracy=cm.correct / total,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f1=float(np.mean(f1)),
        precision=precision,
        recall=recall,
        f1=f1,
        undefined_classes=undefined,
    )


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETACF_RTOL:
            return h
    raise NumericalError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ValidationError(f"beta parameters must be positive, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise ValidationError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail mass P(|T| >= |t|)."""
    if df <= 0:
        raise ValidationError(f"degrees of freedom must be positive, got {df}")
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


def student_t_cdf(t: float, df: float) -> float:
    tail = 0.5 * student_t_sf2(t, df)
    return 1.0 - tail if t > 0 else tail


def paired_t_test(a: Sequence[float], b: Sequence[float], alternative: str = "two-sided") -> TTestResult:
    """Paired t-test on ``a - b``; ``alternative`` is two-sided, greater or less."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"paired samples must have equal lengths, got {a.size} and {b.size}")
    n = a.size
    if n < 2:
        raise ValidationError(f"paired t-test needs n >= 2, got {n}")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValidationError(f"unknown alternative {alternative!r}")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean != 0.0:
            raise ValidationError("degenerate differences: zero variance with nonzero mean")
        return TTestResult(0.0, df, 1.0, n, alternative)
    t = mean / (sd / math.sqrt(n))
    if alternative == "two-sided":
        p = student_t_sf2(t, df)
    elif alternative == "greater":
        p = 1.0 - student_t_cdf(t, df)
    else:
        p = student_t_cdf(t, df)
    return TTestResult(t, df, min(1.0, max(0.0, p)), n, alternative)


def write_metrics_json(rep: MetricsReport, path, extra: dict | None = None) -> None:
    doc = rep.to_dict()
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def write_confusion_csv(cm: ConfusionMatrix, class_names: Sequence[str], path) -> None:
    """Header row of class names (predicted); each following row starts with the true class."""
    with open(path, "w", newline="") as fh:
        fh.write("true/pred," + ",".join(class_names) + "\n")
        for name, row in zip(class_names, cm.counts):
            fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
