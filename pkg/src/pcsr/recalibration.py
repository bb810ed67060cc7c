"""Conditioned scale-shift recalibration of attention Query/Key/Value.

Per transformer layer there are two small trainable networks:

* a domain separation network (``dsn``): a d->d linear map applied to every
  patch token, whose pooled output is the per-sample domain token;
* a factor generator network (``fgn``): a d->2d linear map (d->6d when the
  three attention components get independent factors) from a conditioning
  vector to scale factors ``gamma`` and shift factors ``beta``.

The factors recalibrate Q/K/V right after the fused qkv projection, before
the head split. At initialization the fgn weights are zero and its bias is
(ones || zeros), so recalibration is exactly the identity and the equipped
model reproduces the frozen source model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

CONDITIONING_MODES = ("both", "class_only", "domain_only", "mean_token")
AGGREGATIONS = ("avg", "max")
SHARING_MODES = ("shared", "independent")


@dataclass(frozen=True)
class PcsrConfig:
    conditioning: str = "both"
    aggregation: str = "avg"
    sharing: str = "shared"
    layer_shared: bool = False  # one dsn/fgn pair reused by every layer

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigError(f"conditioning must be one of {CONDITIONING_MODES}, got {self.conditioning!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.sharing not in SHARING_MODES:
            raise ConfigError(f"sharing must be one of {SHARING_MODES}, got {self.sharing!r}")

    @property
    def factor_mult(self) -> int:
        """Output width of the fgn in multiples of d."""
        return 2 if self.sharing == "shared" else 6


@dataclass
class PcsrParams:
    """Per-layer dsn/fgn weights; the only tensors trained during adaptation.

    With ``layer_shared`` the per-layer lists alias one underlying tensor
    quadruple, so gradients accumulate across layers and updates apply once.
    """

    config: PcsrConfig
    dsn_w: list[Tensor]
    dsn_b: list[Tensor]
    fgn_w: list[Tensor]
    fgn_b: list[Tensor]

    @property
    def n_layers(self) -> int:
        return len(self.dsn_w)

    @property
    def d_model(self) -> int:
        return self.dsn_w[0].dims[0]

    def dsn_tensors(self) -> list[Tensor]:
        return _dedupe(self.dsn_w + self.dsn_b)

    def fgn_tensors(self) -> list[Tensor]:
        return _dedupe(self.fgn_w + self.fgn_b)

    def tensors(self) -> list[Tensor]:
        return self.dsn_tensors() + self.fgn_tensors()

    def named_tensors(self):
        """Canonical (name, tensor) pairs in checkpoint order."""
        for l in range(self.n_layers):
            yield f"dsn.{l}.weight", self.dsn_w[l]
            yield f"dsn.{l}.bias", self.dsn_b[l]
            yield f"fgn.{l}.weight", self.fgn_w[l]
            yield f"fgn.{l}.bias", self.fgn_b[l]

    def zero_grad(self):
        for t in self.tensors():
            t.grad = None


def _dedupe(tensors: list[Tensor]) -> list[Tensor]:
    seen, out = set(), []
    for t in tensors:
        if id(t) not in seen:
            seen.add(id(t))
            out.append(t)
    return out


def init_pcsr(n_layers: int, d_model: int, config: PcsrConfig | None = None,
              seed: int = 0, dtype=np.float32) -> PcsrParams:
    """Identity-initialized adapter parameters.

    dsn starts as the identity map; fgn starts with zero weights and a
    (ones || zeros) bias so every generated factor pair is (1, 0). The scheme
    has no randomness: `seed` only keeps the constructor signature uniform
    with the other initializers.
    """
    del seed
    config = config or PcsrConfig()
    m = config.factor_mult

    def one_layer():
        dw = Tensor(np.eye(d_model), requires_grad=True, dtype=dtype)
        db = Tensor(np.zeros(d_model), requires_grad=True, dtype=dtype)
        fw = Tensor(np.zeros((d_model, m * d_model)), requires_grad=True, dtype=dtype)
        fb = Tensor(np.tile(np.concatenate([np.ones(d_model), np.zeros(d_model)]), m // 2),
                    requires_grad=True, dtype=dtype)
        return dw, db, fw, fb

    if config.layer_shared:
        dw, db, fw, fb = one_layer()
        layers = [(dw, db, fw, fb)] * n_layers
    else:
        layers = [one_layer() for _ in range(n_layers)]
    return PcsrParams(
        config=config,
        dsn_w=[l[0] for l in layers],
        dsn_b=[l[1] for l in layers],
        fgn_w=[l[2] for l in layers],
        fgn_b=[l[3] for l in layers],
    )


# -- per-layer computations -------------------------------------------------


def dsn_features(patches: Tensor, dsn_w: Tensor, dsn_b: Tensor) -> Tensor:
    """Apply the domain separation map to patch tokens [B,N,d] -> [B,N,d]."""
    if patches.ndim != 3:
        raise ShapeError(f"dsn_features expects [B,N,d], got {list(patches.dims)}")
    return T.matmul(patches, dsn_w) + dsn_b


class DegeneracyCounter:
    """Counts zero-norm patch features seen by similarity_matrix."""

    def __init__(self):
        self.zero_norm_features = 0

    def reset(self):
        self.zero_norm_features = 0


degeneracy = DegeneracyCounter()


def similarity_matrix(features: Tensor) -> Tensor:
    """Pairwise cosine similarities of patch features: [B,N,d] -> [B,N,N].

    Zero-norm features produce zero similarity for every pair they join; each
    occurrence bumps the module-level degeneracy counter.
    """
    norms = np.sqrt((features.data ** 2).sum(axis=-1))
    n_zero = int((norms == 0.0).sum())
    if n_zero:
        degeneracy.zero_norm_features += n_zero
    return T.cosine_similarity(features)


def similarity_loss(matrices: list[Tensor]) -> Tensor:
    """Negative mean similarity across layers, token pairs and the batch."""
    if not matrices:
        raise ContractError("similarity_loss needs at least one layer matrix")
    total = matrices[0].mean()
    for m in matrices[1:]:
        total = total + m.mean()
    return total * (-1.0 / len(matrices))


def domain_token(features: Tensor, aggregation: str = "avg") -> Tensor:
    """Pool dsn features over the patch axis: [B,N,d] -> [B,d]."""
    if features.ndim != 3:
        raise ShapeError(f"domain_token expects [B,N,d], got {list(features.dims)}")
    if features.dims[1] < 1:
        raise ContractError("domain_token needs at least one patch token")
    if aggregation == "avg":
        return features.mean(axis=1)
    if aggregation == "max":
        return T.tensor_max(features, axis=1)
    raise ConfigError(f"unknown aggregation {aggregation!r}")


def conditioning_input(config: PcsrConfig, domain_tok: Tensor | None,
                       class_tok: Tensor, patches: Tensor) -> Tensor:
    """The [B,d] vector fed to the fgn, per the configured conditioning mode."""
    mode = config.conditioning
    if mode == "both":
        return domain_tok + class_tok
    if mode == "class_only":
        return class_tok
    if mode == "domain_only":
        return domain_tok
    if mode == "mean_token":
        return patches.mean(axis=1)
    raise ConfigError(f"unknown conditioning mode {mode!r}")


def generate_factors(cond: Tensor, fgn_w: Tensor, fgn_b: Tensor,
                     sharing: str = "shared") -> tuple[Tensor, ...]:
    """Map the conditioning vector to scale/shift factors.

    Returns (gamma, beta) for shared factors, or six tensors
    (gamma_q, beta_q, gamma_k, beta_k, gamma_v, beta_v) for independent ones;
    every factor is [B,d].
    """
    if cond.ndim != 2:
        raise ShapeError(f"conditioning input must be [B,d], got {list(cond.dims)}")
    d = cond.dims[1]
    mult = 2 if sharing == "shared" else 6
    if fgn_w.dims != (d, mult * d):
        raise ShapeError(
            f"fgn weight must be [{d},{mult * d}] for sharing={sharing!r}, got {list(fgn_w.dims)}"
        )
    out = T.matmul(cond, fgn_w) + fgn_b
    return tuple(out[:, i * d:(i + 1) * d] for i in range(mult))


def recalibrate_qkv(q: Tensor, k: Tensor, v: Tensor,
                    factors: tuple[Tensor, ...], sharing: str = "shared"):
    """Apply gamma*X + beta to each of Q/K/V [B,T,d], broadcasting over tokens."""
    if sharing == "shared":
        if len(factors) != 2:
            raise ContractError(f"shared recalibration takes (gamma, beta), got {len(factors)} factors")
        pairs = [factors] * 3
    elif sharing == "independent":
        if len(factors) != 6:
            raise ContractError(f"independent recalibration takes six factors, got {len(factors)}")
        pairs = [(factors[0], factors[1]), (factors[2], factors[3]), (factors[4], factors[5])]
    else:
        raise ConfigError(f"unknown sharing mode {sharing!r}")

    outs = []
    for x, (gamma, beta) in zip((q, k, v), pairs):
        b, d = gamma.dims
        if x.dims[0] != b or x.dims[-1] != d:
            raise ShapeError(f"factors {list(gamma.dims)} do not match component {list(x.dims)}")
        g3 = gamma.reshape(b, 1, d)
        b3 = beta.reshape(b, 1, d)
        outs.append(x * g3 + b3)
    return tuple(outs)


def recalibrated_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over [B,T,d] components."""
    b, t, d = q.dims
    if d % n_heads != 0:
        raise ShapeError(f"model width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split(x):
        return x.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)  # [B,H,T,dh]

    qh, kh, vh = split(q), split(k), split(v)
    scores = T.matmul(qh, T.swap_last(kh)) * (1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, vh)  # [B,H,T,dh]
    return out.transpose(0, 2, 1, 3).reshape(b, t, d)
