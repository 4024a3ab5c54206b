"""Series ingestion, chronological windowing and synthetic generators."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
# 12/4/4 months
ETT_FRACTIONS = (0.6, 0.2, 0.2)
SYNTHETIC_FRACTIONS = (0.7, 0.1, 0.2)
SEASONALITY = {"yearly": 1, "quarterly": 4, "monthly": 12, "weekly": 1, "daily": 1, "hourly": 24}


@dataclass
class RawSeries:
    name: str
    columns: list[str]
    values: np.ndarray  # (length, channels)
    freq: str = ""
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.shape[0] < 1:
            raise IngestionError(f"series {self.name!r} is empty")
        if self.values.shape[1] != len(self.columns):
            raise IngestionError(f"{len(self.columns)} column names for {self.values.shape[1]} channels")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def num_channels(self) -> int:
        return self.values.shape[1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date"] + list(self.columns))
            for t, row in enumerate(self.values):
                w.writerow([t] + [repr(float(v)) for v in row])


def _parse_time(text: str):
    try:
        return float(text)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(text.strip()).timestamp()
    except ValueError:
        return None


def _fill_gaps(col: np.ndarray, name: str) -> np.ndarray:
    mask = np.isnan(col)
    if not mask.any():
        return col
    if mask.all():
        raise IngestionError(f"column {name!r} has no numeric values")
    idx = np.where(~mask, np.arange(len(col)), 0)
    np.maximum.accumulate(idx, out=idx)
    out = col[idx]
    first = np.flatnonzero(~mask)[0]
    out[:first] = col[first]
    return out


def load_csv(path, schema: dict | None = None) -> RawSeries:
    """Read a timestamp-first CSV; empty cells are forward- then back-filled.

    ``schema`` may name ``columns`` (subset to keep), ``freq`` and ``name``.
    Error messages cite 1-based file line numbers.
    """
    schema = schema or {}
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from None
    if len(rows) < 2:
        raise IngestionError(f"{path} has no data rows")
    header = [h.strip() for h in rows[0]]
    wanted = schema.get("columns") or header[1:]
    missing = [c for c in wanted if c not in header[1:]]
    if missing:
        raise IngestionError(f"{path}: columns {missing} not found")
    col_idx = [header.index(c) for c in wanted]
    stamps, data = [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise IngestionError(f"{path}: row {line_no} has {len(row)} cells, header has {len(header)}")
        stamp = _parse_time(row[0])
        if stamp is None:
            raise IngestionError(f"{path}: row {line_no}, col {header[0]!r}: unparseable timestamp {row[0]!r}")
        values = []
        for j in col_idx:
            cell = row[j].strip()
            if cell == "" or cell.lower() in ("nan", "na"):
                values.append(np.nan)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise IngestionError(f"{path}: row {line_no}, col {header[j]!r}: non-numeric value {cell!r}") from None
            if not math.isfinite(v):
                raise IngestionError(f"{path}: row {line_no}, col {header[j]!r}: non-finite value {cell!r}")
            values.append(v)
        stamps.append(stamp)
        data.append(values)
    if not data:
        raise IngestionError(f"{path} has no data rows")
    values = np.array(data, dtype=np.float64)
    stamps = np.array(stamps)
    if np.any(np.diff(stamps) < 0):
        log.warning("%s: timestamps out of order; rows re-sorted", path)
        order = np.argsort(stamps, kind="stable")
        values = values[order]
    for c, name in enumerate(wanted):
        values[:, c] = _fill_gaps(values[:, c], name)
    return RawSeries(schema.get("name", path.stem), list(wanted), values, schema.get("freq", ""))


@dataclass
class WindowedDataset:
    """Stride-1 (lookback, horizon) pairs from one contiguous, normalized span."""

    split: str
    series: np.ndarray  # normalized span, (length, channels)
    lookback: int
    horizon: int
    mean: np.ndarray
    std: np.ndarray

    def __len__(self) -> int:
        return max(0, self.series.shape[0] - self.lookback - self.horizon + 1)

    @property
    def num_channels(self) -> int:
        return self.series.shape[1]

    @property
    def inputs(self) -> np.ndarray:
        """``(n, channels, lookback)`` read-only view."""
        view = np.lib.stride_tricks.sliding_window_view(self.series, self.lookback, axis=0)
        return view[: len(self)]

    @property
    def targets(self) -> np.ndarray:
        view = np.lib.stride_tricks.sliding_window_view(self.series[self.lookback:], self.horizon, axis=0)
        return view[: len(self)]

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx)
        return np.ascontiguousarray(self.inputs[idx]), np.ascontiguousarray(self.targets[idx])

    def denormalize(self, arr: np.ndarray) -> np.ndarray:
        """Map ``(..., channels, time)`` values back to the original scale."""
        return arr * self.std[:, None] + self.mean[:, None]

    def subset(self, start: int, stop: int | None = None, split: str | None = None) -> WindowedDataset:
        """Windows ``start:stop`` as their own dataset (shares normalization)."""
        stop = len(self) if stop is None else stop
        span = self.series[start: stop + self.lookback + self.horizon - 1]
        return WindowedDataset(split or self.split, span, self.lookback, self.horizon, self.mean, self.std)


def window_count(length: int, lookback: int, horizon: int) -> int:
    return max(0, length - lookback - horizon + 1)


def normalize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (values - mean) / std


def denormalize(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return values * std + mean


def make_windows(series: RawSeries, lookback: int, horizon: int,
                 split_fractions=SYNTHETIC_FRACTIONS, normalize_data: bool = True) -> dict[str, WindowedDataset]:
    """Chronological disjoint spans, each windowed independently.

    Normalization statistics come from the train span only.  Splits whose
    fraction is 0 are omitted.
    """
    fractions = tuple(float(f) for f in split_fractions)
    if not 1 <= len(fractions) <= 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be 1-3 non-negative values summing to 1, got {fractions}")
    if lookback < 1 or horizon < 1:
        raise ConfigError("lookback and horizon must be >= 1")
    n = series.length
    if n < lookback + horizon:
        raise ConfigError(f"series of length {n} is shorter than lookback+horizon={lookback + horizon}")
    bounds = [0]
    for f in fractions[:-1]:
        bounds.append(bounds[-1] + round(f * n))
    bounds.append(n)
    train = series.values[bounds[0]:bounds[1]]
    if normalize_data:
        mean = train.mean(axis=0)
        std = train.std(axis=0)
        std = np.where(std > 0, std, 1.0)
    else:
        mean = np.zeros(series.num_channels)
        std = np.ones(series.num_channels)
    out = {}
    for name, lo, hi, frac in zip(SPLITS, bounds[:-1], bounds[1:], fractions):
        if frac == 0:
            continue
        if hi - lo < lookback + horizon:
            raise ConfigError(f"{name} span of {hi - lo} steps cannot hold lookback+horizon={lookback + horizon}")
        out[name] = WindowedDataset(name, normalize(series.values[lo:hi], mean, std), lookback, horizon, mean, std)
    return out


def short_term_windows(series: RawSeries, horizon: int, val_fraction: float = 0.1) -> dict[str, WindowedDataset]:
    """Short-horizon protocol: lookback = 2 * horizon, the final window is the test set.

    There is no validation span, so the last ``val_fraction`` of train windows
    is held out for early stopping.
    """
    lookback = 2 * horizon
    n = series.length
    if n < 2 * (lookback + horizon):
        raise ConfigError(f"series of length {n} too short for horizon {horizon}")
    train_values = series.values[: n - horizon]
    mean = train_values.mean(axis=0)
    std = train_values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    full_train = WindowedDataset("train", normalize(train_values, mean, std), lookback, horizon, mean, std)
    n_val = max(1, round(val_fraction * len(full_train)))
    cut = len(full_train) - n_val
    test = WindowedDataset("test", normalize(series.values[n - lookback - horizon:], mean, std),
                           lookback, horizon, mean, std)
    return {
        "train": full_train.subset(0, cut, "train"),
        "val": full_train.subset(cut, None, "val"),
        "test": test,
    }


# ---------------------------------------------------------------------------
# synthetic series
# ---------------------------------------------------------------------------

SYNTHETIC_KINDS = ("sines", "ar", "teacher")


def _sines(length, channels, rng, params):
    periods = params.get("periods", [24.0, 7.0])
    noise = float(params.get("noise", 0.1))
    t = np.arange(length, dtype=np.float64)
    out = np.zeros((length, channels))
    for c in range(channels):
        for p in periods:
            amp = rng.uniform(0.5, 1.5)
            phase = rng.uniform(0, 2 * np.pi)
            out[:, c] += amp * np.sin(2 * np.pi * t / p + phase)
    if noise > 0:
        out += noise * rng.standard_normal(out.shape)
    return out


def _ar(length, channels, rng, params):
    coefs = np.atleast_1d(np.asarray(params.get("coefficients", [0.9]), dtype=np.float64))
    sigma = float(params.get("sigma", 1.0))
    burn = int(params.get("burn_in", 200))
    p = len(coefs)
    total = length + burn
    out = np.zeros((total, channels))
    eps = sigma * rng.standard_normal((total, channels))
    for t in range(p, total):
        out[t] = coefs @ out[t - p:t][::-1] + eps[t]
    return out[burn:]


TEACHER_DEFAULTS = {
    "d_m": 16, "num_heads": 2, "patch_len": 8, "patch_stride": 4, "lookback": 32,
    "noise": 0.1, "sharpness": 3.0, "burn_in": 64, "gain": 1.0,
}


def _teacher(length, channels, rng, params):
    from . import diffcore as dc
    from .nnops import ForecastModel, ModelConfig
    from .searchspace import parse_spec

    p = {**TEACHER_DEFAULTS, **params}
    spec_obj = p.get("spec")
    if spec_obj is None:
        raise ConfigError("teacher series need a 'spec' parameter")
    spec = parse_spec(spec_obj if isinstance(spec_obj, str) else json.dumps(spec_obj))
    cfg = ModelConfig(d_m=p["d_m"], num_blocks=len(spec.blocks), num_heads=p["num_heads"],
                      patch_len=p["patch_len"], patch_stride=p["patch_stride"], lookback=p["lookback"],
                      horizon=1, dropout=0.0, instance_norm=False)
    model = ForecastModel(cfg, spec, seed=int(rng.integers(2**63)))
    sharp = float(p["sharpness"])
    for blk in model.blocks:
        for w in (blk.attn.wq, blk.attn.wk):
            w.data *= sharp
        for w in blk.attn.score.values():
            w.data *= sharp
    model.eval()
    lookback, burn, noise = cfg.lookback, int(p["burn_in"]), float(p["noise"])
    if p["gain"] is not None:
        # standardize the teacher's prediction on random windows so the rollout
        # neither collapses onto a fixed point nor saturates the tanh
        with dc.no_grad():
            probe = model.forward(rng.standard_normal((256, 1, lookback))).data[:, 0, 0]
        scale = float(p["gain"]) / max(float(probe.std()), 1e-12)
        model.head.weight.data *= scale
        model.head.bias.data[:] = (model.head.bias.data - probe.mean()) * scale
    total = length + burn
    out = np.zeros((total, channels))
    out[:lookback] = rng.standard_normal((lookback, channels))
    eps = rng.standard_normal((total, channels))
    with dc.no_grad():
        for t in range(lookback, total):
            window = out[t - lookback:t].T[None]  # (1, channels, lookback)
            pred = model.forward(window).data[0, :, 0]
            out[t] = np.tanh(pred) + noise * eps[t]
    return out[burn:]


def gen_synthetic(kind: str, length: int, channels: int = 1, seed: int = 0, params: dict | None = None) -> RawSeries:
    """Reproducible synthetic series; the manifest records kind, seed and parameters."""
    params = dict(params or {})
    if kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if length < 1 or channels < 1:
        raise ConfigError("length and channels must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    values = {"sines": _sines, "ar": _ar, "teacher": _teacher}[kind](length, channels, rng, params)
    manifest = {"kind": kind, "length": length, "channels": channels, "seed": seed, "params": params}
    return RawSeries(f"synthetic-{kind}", [f"c{i}" for i in range(channels)], values, "", manifest)


def from_manifest(manifest: dict) -> RawSeries:
    return gen_synthetic(manifest["kind"], int(manifest["length"]), int(manifest.get("channels", 1)),
                         int(manifest.get("seed", 0)), manifest.get("params"))
