"""Auxiliary-series constructors and the default constructor banks.

Every constructor maps channels-first OTS ``(B, C, L_I)`` to ``(B, n_m, L_I)``
and applies GELU to its output (switchable per constructor through ``activation``).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

KINDS = ("conv", "noconv", "iconv", "lin", "id", "emb")
LARGE_C = 16
EMB_INIT_STD = 0.02


@dataclass(frozen=True)
class ConstructorSpec:
    kind: str
    n: int | None = None
    K: int | None = None
    v: int = 1
    activation: bool = True

    def out_channels(self, C):
        if self.kind == "id":
            return C
        if self.kind == "iconv":
            return self.v * C
        return self.n

    def validate(self, C):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown constructor kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("conv", "noconv", "lin", "emb") and (self.n is None or self.n < 1):
            raise ConfigError(f"{self.kind} constructor needs n >= 1, got {self.n}")
        if self.kind in ("conv", "iconv"):
            if self.K is None or self.K < 1 or self.K % 2 == 0:
                raise ConfigError(f"{self.kind} constructor needs an odd kernel size, got K={self.K}")
        if self.kind == "noconv" and (self.K is None or self.K < 1):
            raise ConfigError(f"noconv constructor needs K >= 1, got K={self.K}")
        if self.kind == "iconv" and self.v < 1:
            raise ConfigError(f"iconv multiplier v must be >= 1, got {self.v}")
        if self.kind == "id" and self.n not in (None, C):
            raise ConfigError(f"id constructor always yields C={C} channels, got n={self.n}")

    def to_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"kind", "n", "K", "v", "activation"}
        if unknown:
            raise ConfigError(f"unknown constructor keys {sorted(unknown)}")
        return cls(**d)


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape)


def _activate(spec, y):
    return T.gelu(y) if spec.activation else y


class Constructor:
    """Base class: holds ``spec`` and a name -> Tensor parameter dict."""

    def __init__(self, spec, C, L_I):
        self.spec = spec
        self.C = C
        self.L_I = L_I
        self.n_out = spec.out_channels(C)
        self.params = {}

    def forward(self, x):
        raise NotImplementedError

    def n_params(self):
        return sum(p.size for p in self.params.values())


class ConvConstructor(Constructor):
    """Same-length conv: pad floor((K-1)/2), stride 1; groups=1 (conv) or C (iconv)."""

    def __init__(self, spec, C, L_I, rng):
        super().__init__(spec, C, L_I)
        self.groups = C if spec.kind == "iconv" else 1
        cig = C // self.groups
        bound = 1.0 / math.sqrt(cig * spec.K)
        self.params["weight"] = Tensor(_uniform(rng, bound, (self.n_out, cig, spec.K)), requires_grad=True)
        self.params["bias"] = Tensor(_uniform(rng, bound, (self.n_out,)), requires_grad=True)

    def forward(self, x):
        y = T.conv1d(
            x,
            self.params["weight"],
            self.params["bias"],
            pad=(self.spec.K - 1) // 2,
            stride=1,
            groups=self.groups,
        )
        return _activate(self.spec, y)


class LinConstructor(Constructor):
    """Per-timestep channel mixing, i.e. a K=1 convolution."""

    def __init__(self, spec, C, L_I, rng):
        super().__init__(spec, C, L_I)
        bound = 1.0 / math.sqrt(C)
        self.params["weight"] = Tensor(_uniform(rng, bound, (self.n_out, C, 1)), requires_grad=True)
        self.params["bias"] = Tensor(_uniform(rng, bound, (self.n_out,)), requires_grad=True)

    def forward(self, x):
        return _activate(self.spec, T.conv1d(x, self.params["weight"], self.params["bias"]))


def noconv_padding(L_I, K):
    """Extra padding E and its (front, back) split for non-overlapping convolution."""
    E = (K - (L_I % K)) % K
    return E, E // 2, E - E // 2


class NOConvConstructor(Constructor):
    """Patch-wise conv (kernel = stride = K) with K phase kernels.

    The padded axis is cut into patches of K steps; output step ``tau`` uses the
    phase ``tau mod K`` kernel applied to patch ``tau // K``. Cropping the padding
    back off keeps the output length at L_I.
    """

    def __init__(self, spec, C, L_I, rng):
        super().__init__(spec, C, L_I)
        K = spec.K
        self.E, self.front, self.back = noconv_padding(L_I, K)
        bound = 1.0 / math.sqrt(C * K)
        # output channel o = m * K + phase
        self.params["weight"] = Tensor(_uniform(rng, bound, (self.n_out * K, C, K)), requires_grad=True)
        self.params["bias"] = Tensor(_uniform(rng, bound, (self.n_out * K,)), requires_grad=True)

    def forward(self, x):
        K, n = self.spec.K, self.n_out
        B, _, L = x.shape
        xp = T.pad_time(x, self.front, self.back)
        y = T.conv1d(xp, self.params["weight"], self.params["bias"], stride=K)
        P = y.shape[-1]
        y = T.reshape(y, (B, n, K, P))
        y = T.transpose(y, (0, 1, 3, 2))
        y = T.reshape(y, (B, n, P * K))
        y = y[:, :, self.front : self.front + L]
        return _activate(self.spec, y)


class IdConstructor(Constructor):
    def forward(self, x):
        return _activate(self.spec, x)


class EmbConstructor(Constructor):
    """A learned (n_m, L_I) matrix broadcast over the batch, independent of the input."""

    def __init__(self, spec, C, L_I, rng):
        super().__init__(spec, C, L_I)
        self.params["weight"] = Tensor(rng.normal(0.0, EMB_INIT_STD, (self.n_out, L_I)), requires_grad=True)

    def forward(self, x):
        B = x.shape[0]
        y = T.mul(self.params["weight"], np.ones((B, 1, 1)))
        return _activate(self.spec, y)


_CLASSES = {
    "conv": ConvConstructor,
    "iconv": ConvConstructor,
    "noconv": NOConvConstructor,
    "lin": LinConstructor,
    "emb": EmbConstructor,
}


def make_constructor(spec, C, L_I, rng):
    spec.validate(C)
    if spec.kind == "id":
        return IdConstructor(spec, C, L_I)
    return _CLASSES[spec.kind](spec, C, L_I, rng)


# ---------------------------------------------------------------------------
# banks
# ---------------------------------------------------------------------------


def default_specs(C, large=None):
    """The eight default constructors; the wide regime applies from C >= 16."""
    if C < 1:
        raise ConfigError(f"need at least one channel, got C={C}")
    if large is None:
        large = C >= LARGE_C
    if large:
        width, v, emb = 32, max(1, math.ceil(32 / C)), 16
    else:
        width, v, emb = 8, 1, 4
    return [
        ConstructorSpec("conv", n=width, K=49),
        ConstructorSpec("conv", n=width, K=193),
        ConstructorSpec("noconv", n=width, K=12),
        ConstructorSpec("noconv", n=width, K=24),
        ConstructorSpec("iconv", K=49, v=v),
        ConstructorSpec("lin", n=width),
        ConstructorSpec("id"),
        ConstructorSpec("emb", n=emb),
    ]


PRESETS = ("default", "default-small", "default-large", "pure-linear", "pure-conv", "identity-only", "empty")


def preset_specs(name, C):
    """Specs for a named bank preset (see ``PRESETS``)."""
    if name == "default":
        return default_specs(C)
    if name == "default-small":
        return default_specs(C, large=False)
    if name == "default-large":
        return default_specs(C, large=True)
    if name == "pure-linear":
        return [ConstructorSpec("lin", n=s.out_channels(C)) for s in default_specs(C)]
    if name == "pure-conv":
        return [
            ConstructorSpec("conv", n=s.out_channels(C), K=193 if i == 1 else 49)
            for i, s in enumerate(default_specs(C))
        ]
    if name == "identity-only":
        return [ConstructorSpec("id")]
    if name == "empty":
        return []
    raise ConfigError(f"unknown bank preset {name!r}; expected one of {PRESETS}")


class ConstructorBank:
    """Ordered constructors; output channels are their concatenation in order."""

    def __init__(self, specs, C, L_I, rng):
        self.specs = [s if isinstance(s, ConstructorSpec) else ConstructorSpec.from_dict(s) for s in specs]
        self.C = C
        self.L_I = L_I
        self.constructors = [make_constructor(s, C, L_I, rng) for s in self.specs]
        self.N = sum(c.n_out for c in self.constructors)

    def __len__(self):
        return len(self.constructors)

    def slices(self):
        """Channel slice of each constructor inside the concatenated ATS."""
        out, start = [], 0
        for c in self.constructors:
            out.append(slice(start, start + c.n_out))
            start += c.n_out
        return out

    def parameters(self):
        named = {}
        for i, c in enumerate(self.constructors):
            for name, p in c.params.items():
                named[f"bank.{i}.{c.spec.kind}.{name}"] = p
        return named

    def forward(self, x):
        """(B, C, L_I) -> (B, N, L_I); ``None`` for an empty bank."""
        if x.ndim != 3 or x.shape[1] != self.C or x.shape[2] != self.L_I:
            raise ShapeError(f"constructor bank expects (B, {self.C}, {self.L_I}) input, got {x.shape}")
        if not self.constructors:
            return None
        outs = [c.forward(x) for c in self.constructors]
        return outs[0] if len(outs) == 1 else T.concat_channels(outs)


def build_bank(C, L_I, rng=None, preset="default"):
    rng = np.random.default_rng(0) if rng is None else rng
    return ConstructorBank(preset_specs(preset, C), C, L_I, rng)


def construct_ats(bank, x):
    """Channels-first ATS for ``x`` (B, C, L_I); an empty (B, 0, L_I) tensor for an empty bank."""
    x = T.as_tensor(x)
    out = bank.forward(x)
    if out is None:
        return Tensor(np.zeros((x.shape[0], 0, x.shape[2])))
    return out
