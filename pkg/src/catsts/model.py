"""CATS assembly, losses and the parameter audit."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .constructors import LARGE_C, ConstructorBank, ConstructorSpec, preset_specs
from .data import last_value_demean, random_drop_prefix
from .errors import ConfigError, ShapeError
from .predictors import KINDS as PREDICTOR_KINDS
from .predictors import PredictorConfig, make_predictor
from .sparsity import ChannelGate, TemporalCutoff, apply_channel_gate
from .tensor import Tensor


@dataclass
class ModelConfig:
    predictor: str = "twolayer"
    bank: object = "default"  # preset name or list of constructor dicts
    channel_sparsity: bool = True
    temporal_sparsity: bool = True
    shortcut: bool = True
    beta_cont: float = 1.0
    mlp_ratio: int | None = None  # None: 4 for C < 16, 8 otherwise
    dropout: float | None = None  # None: 0.75 for C < 16, 0.5 otherwise
    per_channel_aggregation: bool = False
    demean: bool = True
    ma_kernel: int = 25

    def resolved(self, C):
        """Copy with regime-dependent defaults filled in for C channels."""
        small = C < LARGE_C
        out = ModelConfig(**asdict(self))
        if out.mlp_ratio is None:
            out.mlp_ratio = 4 if small else 8
        if out.dropout is None:
            out.dropout = 0.75 if small else 0.5
        return out

    def bank_specs(self, C):
        if isinstance(self.bank, str):
            return preset_specs(self.bank, C)
        return [s if isinstance(s, ConstructorSpec) else ConstructorSpec.from_dict(s) for s in self.bank]

    def validate(self):
        if self.beta_cont < 0:
            raise ConfigError(f"beta_cont must be >= 0, got {self.beta_cont}")
        if self.dropout is not None and not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.predictor not in PREDICTOR_KINDS:
            raise ConfigError(f"unknown predictor {self.predictor!r}; expected one of {PREDICTOR_KINDS}")
        self.bank_specs(1)  # unknown presets and malformed entries fail here

    def to_dict(self):
        d = asdict(self)
        if not isinstance(self.bank, str):
            d["bank"] = [s.to_dict() if isinstance(s, ConstructorSpec) else dict(s) for s in self.bank]
        return d


@dataclass
class ForwardDiagnostics:
    ats: np.ndarray  # (B, N, L_I) post-gate ATS
    gamma: np.ndarray | None  # (B, N)
    masks: np.ndarray | None  # (B, N + C, L_I)
    cutoff_h: np.ndarray | None  # (B, N + C, L_I)
    predictor_input: np.ndarray  # (B, N + C, L_I) after cutoff, demeaned
    first_stage: np.ndarray  # (B, N + C, L_P), demeaned units
    residual: np.ndarray | None  # (B, L_P, C), demeaned units
    final: np.ndarray  # (B, L_P, C), original units
    anchors: np.ndarray  # (B, 1, C)
    extras: dict = field(default_factory=dict)


class CatsModel:
    def __init__(self, C, L_I, L_P, config=None, seed=0):
        config = ModelConfig() if config is None else config
        config.validate()
        self.C, self.L_I, self.L_P = C, L_I, L_P
        self.config = config.resolved(C)
        self.seed = seed
        cfg = self.config
        # one stream per component, so toggling an optional part leaves the
        # initialization of every other part unchanged
        bank_rng, gate_rng, pred_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        self.bank = ConstructorBank(cfg.bank_specs(C), C, L_I, bank_rng)
        N = self.N = self.bank.N
        self.gate = None
        if cfg.channel_sparsity and N > 0:
            self.gate = ChannelGate(C, N, L_I, cfg.mlp_ratio * C, gate_rng, cfg.per_channel_aggregation)
        self.cutoff = TemporalCutoff(N + C, L_I) if cfg.temporal_sparsity else None
        self.predictor_config = PredictorConfig(
            kind=cfg.predictor,
            L_I=L_I,
            L_P=L_P,
            mlp_ratio=cfg.mlp_ratio,
            dropout=cfg.dropout,
            k=N + C,
            ma_kernel=cfg.ma_kernel,
        )
        self.predictor = make_predictor(self.predictor_config, pred_rng)
        # Without ATS and with the shortcut on, the projection is dropped so the
        # model reduces exactly to the bare predictor.
        self.projection = None
        if N > 0 or not cfg.shortcut:
            self.projection = {
                "P": Tensor(np.zeros((N + C, C)), requires_grad=True),
                "b": Tensor(np.zeros(C), requires_grad=True),
            }

    # -- parameters ----------------------------------------------------------

    def parameters(self):
        named = dict(self.bank.parameters())
        if self.gate is not None:
            named.update({f"gate.{k}": v for k, v in self.gate.params.items()})
        if self.cutoff is not None:
            named.update({f"cutoff.{k}": v for k, v in self.cutoff.params.items()})
        named.update({f"predictor.{k}": v for k, v in self.predictor.params.items()})
        if self.projection is not None:
            named.update({f"projection.{k}": v for k, v in self.projection.items()})
        return named

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state):
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ConfigError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    # -- forward -------------------------------------------------------------

    def forward(
        self,
        X_I,
        training=False,
        rng=None,
        p_drop=0.0,
        gate_override=None,
        surrogate_offset=None,
    ):
        """Forecast (B, L_P, C) in input units, plus diagnostics.

        ``gate_override`` replaces the computed channel scores (test hook);
        ``surrogate_offset`` is forwarded to the temporal cutoff.
        """
        X_I = np.asarray(X_I, dtype=np.float64)
        if X_I.ndim != 3 or X_I.shape[1:] != (self.L_I, self.C):
            raise ShapeError(f"input: expected (B, {self.L_I}, {self.C}), got {X_I.shape}")
        cfg = self.config
        B = X_I.shape[0]
        if cfg.demean:
            D, anchors = last_value_demean(X_I)
        else:
            D, anchors = X_I, np.zeros((B, 1, self.C))
        if training and p_drop > 0.0:
            D = random_drop_prefix(D, p_drop, rng)
        x = Tensor(np.ascontiguousarray(D.transpose(0, 2, 1)))  # (B, C, L_I)

        A = self.bank.forward(x)
        gamma = None
        if A is not None:
            if gate_override is not None:
                gamma = T.as_tensor(np.broadcast_to(np.asarray(gate_override, float), (B, self.N)).copy())
            elif self.gate is not None:
                gamma = self.gate.scores(x)
            if gamma is not None:
                A = apply_channel_gate(A, gamma)
            Q = T.concat_channels([A, x])
        else:
            Q = x

        masks = h = None
        if self.cutoff is not None:
            Q, masks, h = self.cutoff.forward(Q, surrogate_offset=surrogate_offset)

        Y = self.predictor.forward(Q, training=training, rng=rng)  # (B, N + C, L_P)
        if Y.shape != (B, self.N + self.C, self.L_P):
            raise ShapeError(f"predictor: expected {(B, self.N + self.C, self.L_P)}, got {Y.shape}")
        X_hat = T.transpose(Y[:, self.N :, :], (0, 2, 1))  # (B, L_P, C)

        residual = None
        if self.projection is not None:
            residual = T.affine(T.transpose(Y, (0, 2, 1)), self.projection["P"], self.projection["b"])
            out = T.add(X_hat, residual) if cfg.shortcut else residual
        else:
            out = X_hat
        out = T.add(out, anchors)

        diag = ForwardDiagnostics(
            ats=A.data if A is not None else np.zeros((B, 0, self.L_I)),
            gamma=None if gamma is None else gamma.data,
            masks=masks,
            cutoff_h=h,
            predictor_input=Q.data,
            first_stage=Y.data,
            residual=None if residual is None else residual.data,
            final=out.data,
            anchors=anchors,
        )
        diag.extras["ats_tensor"] = A
        return out, diag

    def predict(self, X_I, batch_size=256):
        """Eval-mode forecasts as a numpy array (B, L_P, C)."""
        X_I = np.asarray(X_I, dtype=np.float64)
        outs = []
        with T.no_grad():
            for i in range(0, len(X_I), batch_size):
                outs.append(self.forward(X_I[i : i + batch_size])[0].data)
        if not outs:
            return np.zeros((0, self.L_P, self.C))
        return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def continuity_loss(A, beta=1.0, eps=T.STD_EPS):
    """beta / (L_I N) * sum_t sum_n ((A_t - A_{t-1}) / sigma_n)^2, averaged over the batch.

    sigma_n is the population std of channel n over the window, floored at eps.
    """
    if A is None:
        return Tensor(0.0)
    A = T.as_tensor(A)
    B, N, L = A.shape
    if N == 0 or beta == 0.0:
        return Tensor(0.0)
    diffs = T.sub(A[:, :, 1:], A[:, :, :-1])
    ratio = T.div(diffs, T.std_over_time(A, eps))
    return T.mul(T.tsum(T.square(ratio)), beta / (L * N * B))


def mse_loss(pred, target):
    pred = T.as_tensor(pred)
    return T.tmean(T.square(T.sub(pred, np.asarray(target, dtype=np.float64))))


def total_loss(model, X_I, X_P, training=True, rng=None, p_drop=0.0, beta=None, **forward_kw):
    """Returns (loss, mse, continuity, diagnostics)."""
    beta = model.config.beta_cont if beta is None else beta
    out, diag = model.forward(X_I, training=training, rng=rng, p_drop=p_drop, **forward_kw)
    mse = mse_loss(out, X_P)
    cont = continuity_loss(diag.extras.get("ats_tensor"), beta)
    return T.add(mse, cont), mse, cont, diag


# ---------------------------------------------------------------------------
# parameter audit
# ---------------------------------------------------------------------------

_KIND_LABELS = {
    "conv": "Conv",
    "noconv": "NOConv",
    "iconv": "IConv",
    "lin": "Lin",
    "id": "Id",
    "emb": "Emb",
}


def count_params(model):
    """Exact element counts grouped by module, plus ``total``."""
    out = {f"Predictor ({model.config.predictor})": sum(p.size for p in model.predictor.params.values())}
    for c in model.bank.constructors:
        label = _KIND_LABELS[c.spec.kind]
        out[label] = out.get(label, 0) + c.n_params()
    out["Channel Sparsity"] = model.gate.n_params() if model.gate is not None else 0
    out["Temporal Sparsity"] = model.cutoff.n_params() if model.cutoff is not None else 0
    out["Output Projection"] = sum(p.size for p in model.projection.values()) if model.projection else 0
    out["total"] = sum(v for k, v in out.items())
    return out
