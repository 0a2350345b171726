"""Metrics, per-seed aggregation, and two-sample significance tests.

MAE and RMSE follow the usual elementwise definitions over the incidence
channel of a test range. The t-test defaults to the Welch (unequal
variance) form with Welch-Satterthwaite degrees of freedom; a
pooled-variance variant sits behind a flag for sensitivity checks. The t
cumulative distribution is evaluated through the regularized incomplete
beta function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

ALPHA = 0.05
SIDES = ("one_less", "one_greater", "two")


class DegenerateVarianceError(ValueError):
    """Both samples have zero variance; the t statistic is undefined."""


@dataclass(frozen=True)
class MetricRecord:
    region_set: str
    fold: str
    horizon: int
    variant: str
    channels: str
    seed: int
    mae: float
    rmse: float

    def __post_init__(self):
        if not (math.isfinite(self.mae) and math.isfinite(self.rmse)):
            raise ValueError("metrics must be finite")
        if self.mae < 0 or self.rmse < 0:
            raise ValueError("metrics must be non-negative")


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p: float
    sided: str
    alpha: float = ALPHA

    @property
    def significant(self) -> bool:
        return self.p < self.alpha


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mae: shapes {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("mae: empty input")
    return float(np.abs(pred - target).mean())


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"rmse: shapes {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("rmse: empty input")
    return float(np.sqrt(((pred - target) ** 2).mean()))


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """(mean, sample std); std uses the n-1 denominator and is 0 for n = 1."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("aggregate: empty group")
    mu = float(arr.mean())
    sigma = 0.0 if arr.size == 1 else float(arr.std(ddof=1))
    return mu, sigma


def group_aggregate(records: Iterable[MetricRecord],
                    key: Callable[[MetricRecord], tuple]) -> dict[tuple, dict]:
    """Group records and report mean +/- std of both metrics per group."""
    groups: dict[tuple, list[MetricRecord]] = {}
    for rec in records:
        groups.setdefault(key(rec), []).append(rec)
    out = {}
    for k, recs in groups.items():
        mae_mu, mae_sd = aggregate([r.mae for r in recs])
        rmse_mu, rmse_sd = aggregate([r.rmse for r in recs])
        out[k] = {"n": len(recs), "mae_mean": mae_mu, "mae_std": mae_sd,
                  "rmse_mean": rmse_mu, "rmse_std": rmse_sd}
    return out


def t_cdf(t: float, df: float) -> float:
    """Student-t CDF via the regularized incomplete beta function."""
    if df <= 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * float(special.betainc(df / 2.0, 0.5, x))
    return 1.0 - tail if t > 0 else tail


def t_test(a: Sequence[float], b: Sequence[float], sided: str = "two", *,
           equal_var: bool = False, alpha: float = ALPHA) -> TTestResult:
    """Two-sample independent t-test.

    ``one_less`` tests the alternative mean(a) < mean(b); ``one_greater``
    the reverse; ``two`` is the two-sided test. Welch by default;
    ``equal_var=True`` switches to the pooled-variance form.
    """
    if sided not in SIDES:
        raise ValueError(f"sided must be one of {SIDES}, got {sided!r}")
    xa = np.asarray(list(a), dtype=np.float64)
    xb = np.asarray(list(b), dtype=np.float64)
    na, nb = xa.size, xb.size
    if na < 2 or nb < 2:
        raise ValueError(f"need >= 2 samples per group, got {na} and {nb}")
    va, vb = xa.var(ddof=1), xb.var(ddof=1)
    if equal_var:
        sp2 = ((na - 1) * va + (nb - 1) * vb) / (na + nb - 2)
        se2 = sp2 * (1.0 / na + 1.0 / nb)
        df = float(na + nb - 2)
    else:
        se2 = va / na + vb / nb
        if se2 > 0:
            df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    if se2 == 0:
        raise DegenerateVarianceError("both samples are constant; t statistic undefined")
    t = float((xa.mean() - xb.mean()) / math.sqrt(se2))
    cdf = t_cdf(t, df)
    if sided == "one_less":
        p = cdf
    elif sided == "one_greater":
        p = 1.0 - cdf
    else:
        p = 2.0 * min(cdf, 1.0 - cdf)
    return TTestResult(t=t, df=float(df), p=float(p), sided=sided, alpha=alpha)
