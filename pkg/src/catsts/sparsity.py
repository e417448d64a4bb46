"""Channel gating of the auxiliary series and the learned input cutoff."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, _result


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


class ChannelGate:
    """Soft per-ATS-channel scores computed from the OTS window.

    Each OTS channel is summarised to a scalar by one linear map over time
    (shared across channels unless ``per_channel_aggregation``), then an
    upscaling MLP C -> U -> N with GELU and a final sigmoid.
    """

    def __init__(self, C, N, L_I, hidden, rng, per_channel_aggregation=False):
        self.C, self.N, self.L_I, self.hidden = C, N, L_I, hidden
        self.per_channel_aggregation = per_channel_aggregation
        b_agg = 1.0 / math.sqrt(L_I)
        if per_channel_aggregation:
            agg_w, agg_b = _uniform(rng, b_agg, (C, L_I)), _uniform(rng, b_agg, (C,))
        else:
            agg_w, agg_b = _uniform(rng, b_agg, (L_I, 1)), _uniform(rng, b_agg, ())
        b1, b2 = 1.0 / math.sqrt(C), 1.0 / math.sqrt(hidden)
        self.params = {
            "agg_w": Tensor(agg_w, requires_grad=True),
            "agg_b": Tensor(agg_b, requires_grad=True),
            "W1": Tensor(_uniform(rng, b1, (C, hidden)), requires_grad=True),
            "b1": Tensor(_uniform(rng, b1, (hidden,)), requires_grad=True),
            "W2": Tensor(_uniform(rng, b2, (hidden, N)), requires_grad=True),
            "b2": Tensor(_uniform(rng, b2, (N,)), requires_grad=True),
        }

    def n_params(self):
        return sum(p.size for p in self.params.values())

    def scores(self, x):
        """(B, C, L_I) -> gamma (B, N), strictly inside (0, 1)."""
        if x.ndim != 3 or x.shape[1:] != (self.C, self.L_I):
            raise ShapeError(f"channel gate expects (B, {self.C}, {self.L_I}), got {x.shape}")
        p = self.params
        B = x.shape[0]
        if self.per_channel_aggregation:
            summary = T.add(T.tsum(T.mul(x, p["agg_w"]), axis=-1), p["agg_b"])
        else:
            summary = T.add(T.reshape(T.matmul(x, p["agg_w"]), (B, self.C)), p["agg_b"])
        hidden = T.gelu(T.affine(summary, p["W1"], p["b1"]))
        return T.sigmoid(T.affine(hidden, p["W2"], p["b2"]))


def channel_scores(gate, x):
    return gate.scores(T.as_tensor(x))


def apply_channel_gate(A, gamma):
    """Scale ATS channel n of every window by gamma[:, n]."""
    A, gamma = T.as_tensor(A), T.as_tensor(gamma)
    if gamma.shape != A.shape[:2]:
        raise ShapeError(f"gate scores {gamma.shape} do not match ATS {A.shape}")
    return T.mul(A, T.reshape(gamma, gamma.shape + (1,)))


def cutoff_line(a, L_I):
    """h(t) = a (t - L_I) + 1 for t = 1..L_I, broadcast over a's shape."""
    t = np.arange(1, L_I + 1, dtype=np.float64) - L_I
    return T.add(T.mul(T.reshape(a, a.shape + (1,)), t), 1.0)


def _straight_through(Q, h):
    """Forward Q * 1{h > 0}; backward as d/dQ -> 1{h > 0}, d/dh -> Q."""
    mask = (h.data > 0).astype(np.float64)
    qd = Q.data
    return _result(qd * mask, (Q, h), lambda g: (g * mask, g * qd)), mask


class TemporalCutoff:
    """Per-channel learned prefix cutoff with a straight-through gradient.

    Slopes a_i come from an independent linear map over each channel's window;
    timesteps with h_i(t) <= 0 are zeroed. Parameters start at zero, so the
    initial mask keeps every step.
    """

    def __init__(self, p, L_I):
        self.p, self.L_I = p, L_I
        self.params = {
            "W": Tensor(np.zeros((p, L_I)), requires_grad=True),
            "b": Tensor(np.zeros(p), requires_grad=True),
        }

    def n_params(self):
        return sum(q.size for q in self.params.values())

    def slopes(self, Q):
        return T.add(T.tsum(T.mul(Q, self.params["W"]), axis=-1), self.params["b"])

    def forward(self, Q, surrogate_offset=None):
        """Returns (Q', mask, h). ``surrogate_offset`` freezes sg(h - 1{h>0}).

        With a frozen offset the forward becomes the smooth surrogate
        Q * (h - offset), whose true gradient equals the straight-through
        gradient at the point the offset was taken; used for finite-difference
        checks only.
        """
        Q = T.as_tensor(Q)
        if Q.ndim != 3 or Q.shape[1:] != (self.p, self.L_I):
            raise ShapeError(f"temporal cutoff expects (B, {self.p}, {self.L_I}), got {Q.shape}")
        h = cutoff_line(self.slopes(Q), self.L_I)
        if surrogate_offset is not None:
            mask = (h.data > 0).astype(np.float64)
            return T.mul(Q, T.sub(h, surrogate_offset)), mask, h.data
        out, mask = _straight_through(Q, h)
        return out, mask, h.data


def temporal_cutoff(tc, Q):
    return tc.forward(Q)[0]


def ste_offset(h):
    """sg(h - 1{h > 0}) for a recorded cutoff line ``h``; feeds ``surrogate_offset``."""
    h = np.asarray(h, dtype=np.float64)
    return h - (h > 0)
