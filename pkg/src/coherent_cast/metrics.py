"""Accuracy and coherence metrics.

Inputs are node-major: shape ``(n,)`` or ``(n, steps)``; extra columns are
pooled.  Relative errors use the realised value as denominator / weight,
and entries with a zero denominator are left out and counted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionMismatch, NoUpperNodes, ZeroDenominator, ZeroWeightSum
from .hierarchy import Hierarchy

ZERO = 1e-12


def _pair(truth, forecast):
    truth = np.asarray(truth, dtype=float)
    forecast = np.asarray(forecast, dtype=float)
    if truth.shape != forecast.shape:
        raise DimensionMismatch(f"truth {truth.shape} vs forecast {forecast.shape}")
    return truth, forecast


def mape_terms(truth, forecast) -> tuple[np.ndarray, int]:
    truth, forecast = _pair(truth, forecast)
    keep = np.abs(truth) >= ZERO
    terms = np.abs(truth[keep] - forecast[keep]) / np.abs(truth[keep])
    return terms, int((~keep).sum())


def mape(truth, forecast) -> float:
    """Mean of |truth - forecast| / |truth| (as a fraction, not percent)."""
    terms, _ = mape_terms(truth, forecast)
    if terms.size == 0:
        raise ZeroDenominator("every truth entry is zero")
    return float(terms.mean())


def w_mape(truth, forecast) -> float:
    """sum(|truth| * |forecast - truth|) / sum(|truth|)."""
    truth, forecast = _pair(truth, forecast)
    weight = np.abs(truth)
    denom = weight.sum()
    if denom < ZERO:
        raise ZeroWeightSum("weights sum to zero")
    return float((weight * np.abs(forecast - truth)).sum() / denom)


def co_mape(y, h: Hierarchy) -> float:
    """Mean over non-leaf nodes of |y_i - sum of children| / |y_i|.

    Columns of a matrix input are pooled; non-leaf entries with a zero value
    are excluded.
    """
    terms, _ = co_mape_terms(y, h)
    if terms.size == 0:
        raise ZeroDenominator("every upper-level value is zero")
    return float(terms.mean())


def co_mape_terms(y, h: Hierarchy) -> tuple[np.ndarray, int]:
    y = np.asarray(y, dtype=float)
    if y.shape[0] != h.n:
        raise DimensionMismatch(f"expected {h.n} rows, got {y.shape[0]}")
    if h.r == 0:
        raise NoUpperNodes("hierarchy has no upper-level nodes")
    terms, excluded = [], 0
    for i in range(h.r):
        child_sum = y[list(h.children[i])].sum(axis=0)
        val = np.atleast_1d(y[i])
        keep = np.abs(val) >= ZERO
        excluded += int((~keep).sum())
        terms.append(np.abs(val - np.atleast_1d(child_sum))[keep] / np.abs(val[keep]))
    return np.concatenate(terms), excluded


@dataclass
class EvalReport:
    mape: float
    w_mape: float
    co_mape: float | None
    mape_per_level: list[float] = field(default_factory=list)
    w_mape_per_level: list[float] = field(default_factory=list)
    excluded: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _safe(fn, *args):
    try:
        return fn(*args)
    except (ZeroDenominator, ZeroWeightSum):
        return float("nan")


def evaluate(truth, forecast, h: Hierarchy, coherence_of=None) -> EvalReport:
    """Overall and per-level accuracy, plus co_mape of ``coherence_of``
    (defaults to the forecast)."""
    truth, forecast = _pair(truth, forecast)
    per_level_mape, per_level_w = [], []
    for nodes in h.level_sets:
        idx = list(nodes)
        per_level_mape.append(_safe(mape, truth[idx], forecast[idx]))
        per_level_w.append(_safe(w_mape, truth[idx], forecast[idx]))
    target = forecast if coherence_of is None else np.asarray(coherence_of, dtype=float)
    co = None
    co_excluded = 0
    if h.r > 0:
        co = _safe(co_mape, target, h)
        _, co_excluded = co_mape_terms(target, h)
    _, mape_excluded = mape_terms(truth, forecast)
    return EvalReport(
        mape=_safe(mape, truth, forecast),
        w_mape=_safe(w_mape, truth, forecast),
        co_mape=co,
        mape_per_level=per_level_mape,
        w_mape_per_level=per_level_w,
        excluded={"mape": mape_excluded, "co_mape": co_excluded},
    )
