"""Adam, linear learning-rate decay, early stopping and checkpoints."""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .data import make_windows
from .errors import ConfigError, DataError, NumericError
from .model import CatsModel, ModelConfig, total_loss


@dataclass
class TrainConfig:
    lr: float = 5e-5
    epochs: int = 100
    patience: int = 30
    batch: int = 32
    beta_cont: float = 1.0
    p_drop: float = 0.5
    seed: int = 0
    L_I: int = 720
    L_P: int = 96
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int | None = None  # optional cap on optimizer steps
    train_stride: int = 1  # window stride in the train split
    val_stride: int = 1  # window stride for the per-epoch validation pass
    batches_per_epoch: int | None = None  # optional cap; each epoch draws a fresh random subset

    def validate(self):
        for name in ("lr", "adam_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "patience", "batch", "L_I", "L_P", "train_stride", "val_stride"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"train.{name} must be a positive integer, got {value!r}")
        if self.patience > self.epochs:
            raise ConfigError(f"train.patience ({self.patience}) exceeds train.epochs ({self.epochs})")
        if self.beta_cont < 0:
            raise ConfigError(f"train.beta_cont must be >= 0, got {self.beta_cont}")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigError(f"train.p_drop must lie in [0, 1], got {self.p_drop}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"train.{name} must lie in [0, 1), got {getattr(self, name)}")
        for name in ("max_steps", "batches_per_epoch"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"train.{name} must be positive, got {value}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads, lr_t):
    """One bias-corrected Adam update in place.

    ``params`` maps names to Tensors, ``grads`` maps the same names to arrays
    (a missing or ``None`` gradient counts as zero).
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_schedule(epoch, cfg):
    """Linear decay lr * (1 - epoch / epochs) for 0 <= epoch < epochs."""
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr * (1.0 - epoch / cfg.epochs)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    lr: float


@dataclass
class History:
    records: list = field(default_factory=list)
    initial_val_mse: float = math.nan
    best_val_mse: float = math.nan
    best_epoch: int = 0  # 0 means the initial model was never beaten
    steps: int = 0
    stopped_early: bool = False

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]


def validation_mse(model, windows, batch_size=256):
    if len(windows) == 0:
        raise DataError("validation split has no windows")
    pred = model.predict(windows.X_I, batch_size=batch_size)
    return float(np.mean((pred - windows.X_P) ** 2))


def train(model, frame, cfg, val_windows=None, log=None):
    """Fit ``model`` on the train split of a standardized frame.

    Returns ``(model, history)``; the model carries the parameters with the
    best validation MSE seen, the untrained model included.
    """
    cfg.validate()
    L_I, L_P = model.L_I, model.L_P
    if (cfg.L_I, cfg.L_P) != (L_I, L_P):
        raise ConfigError(f"train config windows ({cfg.L_I}, {cfg.L_P}) differ from model ({L_I}, {L_P})")
    train_w = make_windows(frame, "train", L_I, L_P, stride=cfg.train_stride)
    if val_windows is None:
        val_windows = make_windows(frame, "val", L_I, L_P, stride=cfg.val_stride)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = AdamState(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)

    hist = History()
    best = validation_mse(model, val_windows)
    hist.initial_val_mse = hist.best_val_mse = best
    best_state = model.state_dict()
    best_trained, since_best = math.inf, 0
    for epoch in range(cfg.epochs):
        lr_t = lr_schedule(epoch, cfg)
        order = rng.permutation(len(train_w))
        if cfg.batches_per_epoch is not None:
            order = order[: cfg.batches_per_epoch * cfg.batch]
        losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch)):
            idx = order[start : start + cfg.batch]
            model.zero_grad()
            loss, _, _, _ = total_loss(
                model,
                train_w.X_I[idx],
                train_w.X_P[idx],
                training=True,
                rng=rng,
                p_drop=cfg.p_drop,
                beta=cfg.beta_cont,
            )
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}, batch {b}")
            T.backward(loss)
            try:
                adam_step(state, params, {k: p.grad for k, p in params.items()}, lr_t)
            except NumericError as exc:
                raise NumericError(f"{exc} at epoch {epoch + 1}, batch {b}") from None
            losses.append(value)
            hist.steps += 1
            if cfg.max_steps is not None and hist.steps >= cfg.max_steps:
                break
        val = validation_mse(model, val_windows)
        if not math.isfinite(val):
            raise NumericError(f"non-finite validation MSE at epoch {epoch + 1}")
        hist.records.append(EpochRecord(epoch + 1, float(np.mean(losses)), val, lr_t))
        if log is not None:
            log(f"epoch {epoch + 1:3d}  train {np.mean(losses):.5f}  val {val:.5f}  lr {lr_t:.2e}")
        if val < best:
            best = val
            best_state = model.state_dict()
            hist.best_val_mse, hist.best_epoch = val, epoch + 1
        # patience counts from the first trained epoch; the untrained model
        # only takes part in selection
        if val < best_trained:
            best_trained, since_best = val, 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                hist.stopped_early = True
                break
        if cfg.max_steps is not None and hist.steps >= cfg.max_steps:
            break
    model.load_state_dict(best_state)
    return model, hist


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_mse", "lr"])
        for r in history.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_mse), repr(r.lr)])


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little endian):
#   8s   magic b"CATSCKPT"
#   u32  format version
#   u32  n bytes of UTF-8 JSON header {C, L_I, L_P, seed, model: {...}, extra: {...}}
#   ...  JSON header
#   u32  parameter count
#   per parameter, in module order:
#     u16 name length, name (UTF-8), u8 ndim, ndim x u64 dims, float64 data (C order)
# ---------------------------------------------------------------------------

MAGIC = b"CATSCKPT"
VERSION = 1


def save_checkpoint(model, path, extra=None):
    header = {
        "C": model.C,
        "L_I": model.L_I,
        "L_P": model.L_P,
        "seed": model.seed,
        "model": model.config.to_dict(),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    params = model.parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            raw = name.encode()
            fh.write(struct.pack("<HB", len(raw), p.data.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def _read(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"{path}: truncated checkpoint")
    return buf


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, extra)``."""
    with open(path, "rb") as fh:
        if _read(fh, 8, path) != MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        version, n = struct.unpack("<II", _read(fh, 8, path))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(_read(fh, n, path))
        (count,) = struct.unpack("<I", _read(fh, 4, path))
        state = {}
        for _ in range(count):
            name_len, ndim = struct.unpack("<HB", _read(fh, 3, path))
            name = _read(fh, name_len, path).decode()
            shape = struct.unpack(f"<{ndim}Q", _read(fh, 8 * ndim, path))
            size = int(np.prod(shape, dtype=np.int64))
            state[name] = np.frombuffer(_read(fh, 8 * size, path), dtype="<f8").reshape(shape).astype(np.float64)
    cfg = ModelConfig(**header["model"])
    model = CatsModel(header["C"], header["L_I"], header["L_P"], cfg, seed=header["seed"])
    model.load_state_dict(state)
    return model, header.get("extra", {})

