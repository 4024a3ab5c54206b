"""Point-forecast error metrics and the seasonal-naive reference used by OWA.

Inputs may be 1-D ``(H,)`` or batched ``(..., H)``; the last axis is the
horizon.  MSE/MAE/SMAPE/MAPE average over every element.  MASE scales each
series by its own in-sample seasonal-naive error and then averages.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, UndefinedMetricError

log = logging.getLogger(__name__)


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionError(f"target {y.shape} and forecast {y_hat.shape} differ")
    if y.ndim == 0 or y.shape[-1] == 0:
        raise DimensionError("horizon must contain at least one point")
    return y, y_hat


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean((y - y_hat) ** 2))


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def _guarded_ratio(num: np.ndarray, den: np.ndarray, label: str) -> np.ndarray:
    zero = den == 0
    if zero.any():
        log.info("%s: %d zero-denominator terms counted as 0", label, int(zero.sum()))
    return np.divide(num, den, out=np.zeros_like(num), where=~zero)


def smape(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    terms = _guarded_ratio(np.abs(y - y_hat), np.abs(y) + np.abs(y_hat), "smape")
    return float(200.0 * np.mean(terms))


def mape(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    terms = _guarded_ratio(np.abs(y - y_hat), np.abs(y), "mape")
    return float(100.0 * np.mean(terms))


def seasonal_scale(series, s: int) -> np.ndarray:
    """Mean absolute seasonal difference along the last axis."""
    series = np.asarray(series, dtype=np.float64)
    if s < 1:
        raise UndefinedMetricError(f"seasonal period must be >= 1, got {s}")
    if series.shape[-1] <= s:
        raise UndefinedMetricError(f"need more than {s} points to form seasonal differences")
    return np.mean(np.abs(series[..., s:] - series[..., :-s]), axis=-1)


def mase(y, y_hat, insample=None, s: int = 1, horizon_scaled: bool = False) -> float:
    """Mean absolute scaled error.

    The scale is the in-sample seasonal-naive MAE.  With ``horizon_scaled``
    the scale is computed on ``y`` itself instead (no in-sample history).
    """
    y, y_hat = _pair(y, y_hat)
    ref = y if horizon_scaled else insample
    if ref is None:
        raise UndefinedMetricError("MASE needs an in-sample series (or horizon_scaled=True)")
    ref = np.asarray(ref, dtype=np.float64)
    if ref.shape[:-1] != y.shape[:-1]:
        raise DimensionError(f"in-sample batch shape {ref.shape[:-1]} does not match {y.shape[:-1]}")
    scale = seasonal_scale(ref, s)
    if np.any(scale == 0):
        raise UndefinedMetricError("in-sample series has zero seasonal variation")
    errors = np.mean(np.abs(y - y_hat), axis=-1)
    return float(np.mean(errors / scale))


def owa(smape_value: float, mase_value: float, smape_naive: float, mase_naive: float) -> float:
    if smape_naive <= 0 or mase_naive <= 0:
        raise UndefinedMetricError("naive reference scores must be positive")
    return 0.5 * (smape_value / smape_naive + mase_value / mase_naive)


def seasonal_naive(insample, horizon: int, s: int = 1) -> np.ndarray:
    """Repeat the last ``s`` in-sample values over the horizon."""
    insample = np.asarray(insample, dtype=np.float64)
    if insample.shape[-1] < s:
        raise DimensionError(f"in-sample length {insample.shape[-1]} shorter than season {s}")
    last = insample[..., -s:]
    reps = -(-horizon // s)
    return np.concatenate([last] * reps, axis=-1)[..., :horizon]


@dataclass
class MetricsReport:
    mse: float | None = None
    mae: float | None = None
    smape: float | None = None
    mape: float | None = None
    mase: float | None = None
    owa: float | None = None
    horizon: int = 0
    periodicity: int = 1

    def __post_init__(self):
        for key in ("mse", "mae", "smape", "mape", "mase", "owa"):
            v = getattr(self, key)
            if v is not None and not (np.isfinite(v) and v >= 0):
                raise UndefinedMetricError(f"{key}={v} is not a finite non-negative value")
        if self.smape is not None and self.smape > 200.0 + 1e-9:
            raise UndefinedMetricError(f"smape={self.smape} outside [0, 200]")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        from .serialization import dumps

        return dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> MetricsReport:
        return cls(**{k: obj.get(k) for k in ("mse", "mae", "smape", "mape", "mase", "owa")},
                   horizon=int(obj.get("horizon", 0)), periodicity=int(obj.get("periodicity", 1)))


def evaluate_forecast(y, y_hat, insample=None, s: int = 1, short_term: bool = False) -> MetricsReport:
    """Full report; percentage/scaled metrics and OWA only in short-term mode."""
    y, y_hat = _pair(y, y_hat)
    report = MetricsReport(mse=mse(y, y_hat), mae=mae(y, y_hat), horizon=y.shape[-1], periodicity=s)
    if short_term:
        if insample is None:
            raise UndefinedMetricError("short-term metrics need the in-sample history")
        report.smape = smape(y, y_hat)
        report.mape = mape(y, y_hat)
        report.mase = mase(y, y_hat, insample, s)
        naive = seasonal_naive(insample, y.shape[-1], s)
        report.owa = owa(report.smape, report.mase, smape(y, naive), mase(y, naive, insample, s))
    return report


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    out = {}
    for key in ("mse", "mae", "smape", "mape", "mase", "owa"):
        vals = [getattr(r, key) for r in reports]
        out[key] = None if any(v is None for v in vals) else float(np.mean(vals))
    return MetricsReport(**out, horizon=reports[0].horizon, periodicity=reports[0].periodicity)

