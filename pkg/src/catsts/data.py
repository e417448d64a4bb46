"""Series ingestion, splits, standardization, windowing and synthetic generators."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

SPLIT_RATIOS = (0.7, 0.1, 0.2)
STD_EPS = 1e-8
MULTI_LAGS = (96, 192, 336, 720)
SHIFT_LAG = 96


@dataclass
class SeriesFrame:
    """A T x C table of float64 values with channel names and split markers."""

    values: np.ndarray
    channel_names: list
    split_bounds: tuple | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"series values must be 2-D (T, C), got shape {self.values.shape}")
        if len(self.channel_names) != self.values.shape[1]:
            raise DataError("channel_names length does not match the number of columns")
        if not np.all(np.isfinite(self.values)):
            raise DataError("series contains NaN or infinite values")
        if self.split_bounds is not None:
            train_end, val_end = self.split_bounds
            if not 0 < train_end < val_end < self.T:
                raise DataError(f"invalid split bounds {self.split_bounds} for T={self.T}")

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def C(self):
        return self.values.shape[1]

    def with_values(self, values):
        return SeriesFrame(values, list(self.channel_names), self.split_bounds, dict(self.manifest))


@dataclass
class WindowBatch:
    X_I: np.ndarray  # (B, L_I, C)
    X_P: np.ndarray  # (B, L_P, C)
    window_origins: np.ndarray  # first input row of each window

    def __len__(self):
        return len(self.window_origins)

    def subset(self, idx):
        return WindowBatch(self.X_I[idx], self.X_P[idx], self.window_origins[idx])


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, values):
        return (np.asarray(values) - self.mean) / self.std

    def inverse(self, values):
        return np.asarray(values) * self.std + self.mean

    def transform(self, frame):
        return frame.with_values(self.apply(frame.values))


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def load_csv(path, date_column="date"):
    """Read a header-first CSV; every column except ``date_column`` is a channel."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    if not body:
        raise DataError(f"{path} has a header but no data rows")
    keep = [j for j, name in enumerate(header) if not (date_column and name == date_column)]
    if not keep:
        raise DataError(f"{path} has no numeric channel columns")
    values = np.empty((len(body), len(keep)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i + 2} has {len(row)} fields, header has {len(header)}")
        for out_j, j in enumerate(keep):
            try:
                values[i, out_j] = float(row[j])
            except ValueError:
                raise DataError(
                    f"{path}: cannot parse {row[j]!r} at row {i + 2}, column {j + 1} ({header[j]!r})"
                ) from None
    bad = ~np.isfinite(values).all(axis=1)
    if bad.any():
        raise DataError(f"{path}: NaN/inf in rows {(np.flatnonzero(bad) + 2).tolist()[:10]}")
    manifest = {}
    sidecar = manifest_path(path)
    if sidecar.exists():
        manifest = json.loads(sidecar.read_text())
    return SeriesFrame(values, [header[j] for j in keep], manifest=manifest)


def manifest_path(csv_path):
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + ".manifest.json")


def save_csv(frame, path):
    """Write ``frame`` (header row, no date column) plus its manifest sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(frame.channel_names)
        for row in frame.values:
            writer.writerow([repr(float(v)) for v in row])
    if frame.manifest:
        manifest_path(path).write_text(json.dumps(frame.manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# splits, scaling, windows
# ---------------------------------------------------------------------------


def _bounds(T, ratios):
    # round before flooring so 0.7 + 0.1 of 1000 rows is 800, not 799
    train_end = int(np.floor(round(ratios[0] * T, 9)))
    val_end = int(np.floor(round((ratios[0] + ratios[1]) * T, 9)))
    return train_end, val_end


def min_rows(L_I, L_P, ratios=SPLIT_RATIOS):
    """Smallest T for which train holds one full window and val/test hold one horizon."""
    T = 2
    while True:
        train_end, val_end = _bounds(T, ratios)
        if train_end >= L_I + L_P and val_end - train_end >= L_P and T - val_end >= L_P:
            return T
        T += 1


def split(frame, ratios=SPLIT_RATIOS, L_I=None, L_P=None):
    """Chronological split at floor(r0 T) and floor((r0 + r1) T)."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {ratios}")
    T = frame.T
    train_end, val_end = _bounds(T, ratios)
    if L_I is not None and L_P is not None:
        need = min_rows(L_I, L_P, ratios)
        if T < need:
            raise DataError(f"T={T} rows is too short for L_I={L_I}, L_P={L_P}; need at least T={need}")
    if not 0 < train_end < val_end < T:
        raise DataError(f"T={T} rows cannot be split with ratios {ratios}")
    return SeriesFrame(frame.values, list(frame.channel_names), (train_end, val_end), dict(frame.manifest))


def fit_standardizer(frame, eps=STD_EPS):
    """Per-channel population mean/std on the train rows."""
    if frame.split_bounds is None:
        raise DataError("fit_standardizer needs a split frame")
    train = frame.values[: frame.split_bounds[0]]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    flat = std < eps
    if flat.any():
        names = [frame.channel_names[j] for j in np.flatnonzero(flat)]
        logger.warning("constant channel(s) %s in train split; std floored at %g", names, eps)
        std = np.where(flat, eps, std)
    return Standardizer(mean, std)


def _target_range(frame, which, L_I, L_P):
    """Admissible target-start rows for a split; inputs may reach into earlier splits."""
    T = frame.T
    if which == "all":
        return L_I, T - L_P
    if frame.split_bounds is None:
        raise DataError("frame has no split bounds")
    train_end, val_end = frame.split_bounds
    lo, hi = {"train": (L_I, train_end), "val": (train_end, val_end), "test": (val_end, T)}[which]
    lo = max(lo, L_I)
    if hi - lo < L_P:
        raise DataError(f"{which} split has {hi - lo} usable rows, fewer than L_P={L_P} (+ L_I={L_I} of context)")
    return lo, hi - L_P


def make_windows(frame, which, L_I, L_P, stride=1):
    """One window per admissible origin; ``which`` in {train, val, test, all}."""
    if L_I < 1 or L_P < 1 or stride < 1:
        raise ConfigError("L_I, L_P and stride must be positive")
    first, last = _target_range(frame, which, L_I, L_P)
    if last < first:
        raise DataError(f"no complete window fits in the {which} split")
    starts = np.arange(first, last + 1, stride)
    origins = starts - L_I
    view = sliding_window_view(frame.values, L_I + L_P, axis=0)  # (n, C, L_I + L_P)
    block = view[origins].transpose(0, 2, 1)
    return WindowBatch(
        np.ascontiguousarray(block[:, :L_I]),
        np.ascontiguousarray(block[:, L_I:]),
        origins,
    )


# ---------------------------------------------------------------------------
# training-time input transforms and the naive baseline
# ---------------------------------------------------------------------------


def last_value_demean(X_I):
    """Subtract each window's last value per channel; returns (X_I', anchors)."""
    X_I = np.asarray(X_I, dtype=np.float64)
    anchors = X_I[..., -1:, :]
    return X_I - anchors, anchors


def remean(Y, anchors):
    return np.asarray(Y) + anchors


def random_drop_prefix(X_I, p_drop, rng):
    """With probability ``p_drop`` per window, zero a prefix of length d ~ U{0..L_I-1}."""
    X_I = np.array(X_I, dtype=np.float64, copy=True)
    if p_drop <= 0.0:
        return X_I
    B, L_I = X_I.shape[0], X_I.shape[1]
    hit = rng.random(B) < p_drop
    lengths = rng.integers(0, L_I, size=B)
    cut = np.where(hit, lengths, 0)
    mask = np.arange(L_I)[None, :] >= cut[:, None]
    return X_I * mask[:, :, None]


def repeat_forecast(X_I, L_P):
    X_I = np.asarray(X_I)
    last = X_I[..., -1:, :]
    return np.repeat(last, L_P, axis=-2)


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------


def _walk(rng, n, ar_coef=1.0):
    """AR(1) with unit Gaussian innovations; ar_coef=1 gives a random walk."""
    eps = rng.standard_normal(n)
    if ar_coef == 1.0:
        return np.cumsum(eps)
    out = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = ar_coef * acc + eps[i]
        out[i] = acc
    return out


def gen_shifting_toy(T, seed, lag=SHIFT_LAG):
    """Two channels: a random walk and the same walk delayed by ``lag`` steps."""
    rng = np.random.default_rng(seed)
    walk = _walk(rng, T + lag)
    values = np.column_stack([walk[lag:], walk[:T]])
    manifest = {"generator": "shifting_toy", "seed": seed, "T": T, "lag": lag}
    return SeriesFrame(values, ["x1", "x2"], manifest=manifest)


def gen_multi(T, seed, ar_coef=1.0):
    """Eight channels: a master walk, four lagged copies, three mixtures of the first five."""
    rng = np.random.default_rng(seed)
    span = max(MULTI_LAGS)
    master = _walk(rng, T + span, ar_coef)
    base = [master[span:]] + [master[span - lag : span - lag + T] for lag in MULTI_LAGS]
    base = np.column_stack(base)
    coef = rng.uniform(-1.0, 1.0, size=(3, 5))
    coef /= np.abs(coef).sum(axis=1, keepdims=True)
    values = np.column_stack([base, base @ coef.T])
    manifest = {
        "generator": "multi",
        "seed": seed,
        "T": T,
        "lags": list(MULTI_LAGS),
        "ar_coef": ar_coef,
        "combination_coefficients": coef.tolist(),
    }
    return SeriesFrame(values, [f"s{i + 1}" for i in range(8)], manifest=manifest)


def multix_offsets(X, S=720):
    """Cumulative lag of each channel behind the master: round(i S / (X - 1))."""
    return [int(round(i * S / (X - 1))) for i in range(X)]


def gen_multix(X, T, seed, S=720, noise_scale=0.1, ar_coef=1.0):
    """X channels chained by lag; each hop adds fresh Gaussian noise that accumulates."""
    if X < 2:
        raise ConfigError(f"MultiX needs X >= 2 channels, got {X}")
    if X > S:
        raise ConfigError(f"MultiX with X={X} > S={S} would produce zero strides")
    rng = np.random.default_rng(seed)
    n = T + S
    master = _walk(rng, n, ar_coef)
    inc_std = float(np.std(np.diff(master)))
    offsets = multix_offsets(X, S)
    chain = [master]
    prev = master
    for i in range(1, X):
        stride = offsets[i] - offsets[i - 1]
        noisy = prev + noise_scale * inc_std * rng.standard_normal(n)
        shifted = np.empty(n)
        shifted[stride:] = noisy[: n - stride]
        shifted[:stride] = np.nan  # never retained: rows < offsets[i] <= S are trimmed
        chain.append(shifted)
        prev = shifted
    values = np.column_stack([c[S:] for c in chain])
    manifest = {
        "generator": "multix",
        "seed": seed,
        "T": T,
        "X": X,
        "S": S,
        "noise_scale": noise_scale,
        "ar_coef": ar_coef,
        "offsets": offsets,
    }
    return SeriesFrame(values, [f"s{i + 1}" for i in range(X)], manifest=manifest)
