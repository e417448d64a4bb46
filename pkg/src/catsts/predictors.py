"""First-stage predictors mapping (B, k, L_I) -> (B, k, L_P) along time."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

KINDS = ("twolayer", "indlin", "mean", "dlinear")


@dataclass
class PredictorConfig:
    kind: str = "twolayer"
    L_I: int = 720
    L_P: int = 96
    mlp_ratio: int = 4
    dropout: float = 0.75
    k: int | None = None
    ma_kernel: int = 25

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown predictor {self.kind!r}; expected one of {KINDS}")
        if self.L_I < 1 or self.L_P < 1:
            raise ConfigError("L_I and L_P must be positive")
        if self.kind == "twolayer" and self.mlp_ratio < 1:
            raise ConfigError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.kind == "indlin" and (self.k is None or self.k < 1):
            raise ConfigError("indlin needs the channel count k at build time")
        if self.kind == "dlinear" and (self.ma_kernel < 1 or self.ma_kernel % 2 == 0):
            raise ConfigError(f"dlinear moving-average kernel must be odd, got {self.ma_kernel}")


def _linear_params(rng, n_in, n_out):
    bound = 1.0 / math.sqrt(n_in)
    W = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, (n_out,)), requires_grad=True)
    return W, b


def _check(Z, L_I):
    if Z.ndim != 3 or Z.shape[2] != L_I:
        raise ShapeError(f"predictor expects (B, k, {L_I}) input, got {Z.shape}")


class TwoLayer:
    """Channel-shared MLP over time: L_I -> q L_I (GELU, dropout) -> L_P."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        H = cfg.mlp_ratio * cfg.L_I
        W1, b1 = _linear_params(rng, cfg.L_I, H)
        W2, b2 = _linear_params(rng, H, cfg.L_P)
        self.params = {"W1": W1, "b1": b1, "W2": W2, "b2": b2}

    def forward(self, Z, training=False, rng=None):
        _check(Z, self.cfg.L_I)
        p = self.params
        hidden = T.gelu(T.affine(Z, p["W1"], p["b1"]))
        hidden = T.dropout(hidden, self.cfg.dropout, training, rng)
        return T.affine(hidden, p["W2"], p["b2"])


class IndLin:
    """One L_I -> L_P linear map per channel; k is fixed at build time."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        bound = 1.0 / math.sqrt(cfg.L_I)
        self.params = {
            "W": Tensor(rng.uniform(-bound, bound, (cfg.k, cfg.L_I, cfg.L_P)), requires_grad=True),
            "b": Tensor(rng.uniform(-bound, bound, (cfg.k, cfg.L_P)), requires_grad=True),
        }

    def forward(self, Z, training=False, rng=None):
        _check(Z, self.cfg.L_I)
        if Z.shape[1] != self.cfg.k:
            raise ShapeError(f"indlin was built for k={self.cfg.k} channels, got {Z.shape[1]}")
        Zt = T.transpose(Z, (1, 0, 2))  # (k, B, L_I)
        Y = T.transpose(T.matmul(Zt, self.params["W"]), (1, 0, 2))
        return T.add(Y, self.params["b"])


class MeanPredictor:
    """Repeats each channel's input mean over the horizon. No parameters."""

    def __init__(self, cfg, rng=None):
        self.cfg = cfg
        self.params = {}

    def forward(self, Z, training=False, rng=None):
        _check(Z, self.cfg.L_I)
        return T.mul(T.mean_over_time(Z), np.ones(self.cfg.L_P))


def moving_average_matrix(L, kernel):
    """M with (z @ M)[t] = mean of z over [t - k//2, t + k//2], edges replicated."""
    half = kernel // 2
    M = np.zeros((L, L))
    for t in range(L):
        for j in range(-half, half + 1):
            M[min(max(t + j, 0), L - 1), t] += 1.0 / kernel
    return M


class DLinear:
    """Trend/seasonal split by moving average, one shared linear map per part."""

    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.ma = moving_average_matrix(cfg.L_I, cfg.ma_kernel)
        Wt, bt = _linear_params(rng, cfg.L_I, cfg.L_P)
        Ws, bs = _linear_params(rng, cfg.L_I, cfg.L_P)
        self.params = {"W_trend": Wt, "b_trend": bt, "W_seasonal": Ws, "b_seasonal": bs}

    def decompose(self, Z):
        trend = T.matmul(Z, self.ma)
        return trend, T.sub(Z, trend)

    def forward(self, Z, training=False, rng=None):
        _check(Z, self.cfg.L_I)
        p = self.params
        trend, seasonal = self.decompose(Z)
        return T.add(
            T.affine(trend, p["W_trend"], p["b_trend"]),
            T.affine(seasonal, p["W_seasonal"], p["b_seasonal"]),
        )


_CLASSES = {"twolayer": TwoLayer, "indlin": IndLin, "mean": MeanPredictor, "dlinear": DLinear}


def make_predictor(cfg, rng):
    cfg.validate()
    return _CLASSES[cfg.kind](cfg, rng)


def predict(predictor, Z, training=False, rng=None):
    return predictor.forward(T.as_tensor(Z), training=training, rng=rng)


def n_params(predictor):
    return sum(p.size for p in predictor.params.values())
