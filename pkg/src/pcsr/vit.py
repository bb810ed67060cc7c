"""A small pre-LN Vision Transformer with recalibration hooks.

The forward pass optionally threads adapter parameters through every layer:
patch/class tokens are read from each layer's input (before the first
LayerNorm), the generated scale-shift factors are applied to the full-width
Q/K/V right after the fused qkv projection, and the per-layer patch-feature
similarity matrices are returned for the similarity loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import recalibration as R
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    n_classes: int = 8

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("image_size", "patch_size", "d_model", "n_layers", "n_heads", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def mlp_dim(self) -> int:
        return int(round(self.d_model * self.mlp_ratio))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    qkv_w: Tensor
    qkv_b: Tensor
    proj_w: Tensor
    proj_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


_LAYER_FIELD_NAMES = [
    ("ln1.gamma", "ln1_g"), ("ln1.beta", "ln1_b"),
    ("qkv.weight", "qkv_w"), ("qkv.bias", "qkv_b"),
    ("proj.weight", "proj_w"), ("proj.bias", "proj_b"),
    ("ln2.gamma", "ln2_g"), ("ln2.beta", "ln2_b"),
    ("mlp.fc1.weight", "fc1_w"), ("mlp.fc1.bias", "fc1_b"),
    ("mlp.fc2.weight", "fc2_w"), ("mlp.fc2.bias", "fc2_b"),
]


@dataclass
class VitParams:
    """All backbone weights. Frozen during adaptation; trainable during source training."""

    config: VitConfig
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    layers: list[LayerParams]
    norm_g: Tensor
    norm_b: Tensor
    head_w: Tensor
    head_b: Tensor

    def named_tensors(self):
        """Canonical (name, tensor) pairs in checkpoint order."""
        yield "patch.weight", self.patch_w
        yield "patch.bias", self.patch_b
        yield "cls_token", self.cls_token
        yield "pos_embed", self.pos_embed
        for i, layer in enumerate(self.layers):
            for suffix, attr in _LAYER_FIELD_NAMES:
                yield f"layers.{i}.{suffix}", getattr(layer, attr)
        yield "norm.gamma", self.norm_g
        yield "norm.beta", self.norm_b
        yield "head.weight", self.head_w
        yield "head.bias", self.head_b

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def ln_affine_tensors(self) -> list[Tensor]:
        """The LayerNorm scale/shift params (the entropy-only baseline's trainable set)."""
        out = []
        for layer in self.layers:
            out += [layer.ln1_g, layer.ln1_b, layer.ln2_g, layer.ln2_b]
        out += [self.norm_g, self.norm_b]
        return out

    def set_requires_grad(self, flag: bool):
        for t in self.tensors():
            t.requires_grad = flag

    def clone(self) -> "VitParams":
        def cp(t: Tensor) -> Tensor:
            out = Tensor(t.data.copy(), dtype=t.data.dtype)
            out.requires_grad = t.requires_grad
            return out

        return VitParams(
            config=self.config,
            patch_w=cp(self.patch_w), patch_b=cp(self.patch_b),
            cls_token=cp(self.cls_token), pos_embed=cp(self.pos_embed),
            layers=[LayerParams(**{attr: cp(getattr(l, attr)) for _, attr in _LAYER_FIELD_NAMES})
                    for l in self.layers],
            norm_g=cp(self.norm_g), norm_b=cp(self.norm_b),
            head_w=cp(self.head_w), head_b=cp(self.head_b),
        )


def expected_tensor_names(config: VitConfig) -> list[str]:
    names = ["patch.weight", "patch.bias", "cls_token", "pos_embed"]
    for i in range(config.n_layers):
        names += [f"layers.{i}.{suffix}" for suffix, _ in _LAYER_FIELD_NAMES]
    names += ["norm.gamma", "norm.beta", "head.weight", "head.bias"]
    return names


def init_vit(config: VitConfig, seed: int = 0, dtype=np.float32) -> VitParams:
    """Fresh backbone weights: Xavier projections, unit LNs, zero head."""
    rng = np.random.default_rng(seed)
    d, c = config.d_model, config.n_classes

    def w(*shape):
        std = math.sqrt(2.0 / (shape[0] + shape[-1])) if len(shape) > 1 else 0.02
        return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=dtype)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerParams(
            ln1_g=ones(d), ln1_b=zeros(d),
            qkv_w=w(d, 3 * d), qkv_b=zeros(3 * d),
            proj_w=w(d, d), proj_b=zeros(d),
            ln2_g=ones(d), ln2_b=zeros(d),
            fc1_w=w(d, config.mlp_dim), fc1_b=zeros(config.mlp_dim),
            fc2_w=w(config.mlp_dim, d), fc2_b=zeros(d),
        ))
    return VitParams(
        config=config,
        patch_w=w(config.patch_dim, d), patch_b=zeros(d),
        cls_token=w(d), pos_embed=w(config.seq_len, d),
        layers=layers,
        norm_g=ones(d), norm_b=zeros(d),
        head_w=zeros(d, c), head_b=zeros(c),
    )


@dataclass
class LayerTokens:
    """Class/patch tokens read from a layer's input, before its first LayerNorm."""

    class_token: Tensor  # [B, d]
    patch_tokens: Tensor  # [B, N, d]


@dataclass
class ForwardResult:
    logits: Tensor  # [B, C]
    layer_tokens: list[LayerTokens] | None = None
    sim_matrices: list[Tensor] | None = None  # per layer [B, N, N]
    domain_tokens: list[Tensor] | None = None  # per layer [B, d]


def patch_embed(images: Tensor, params: VitParams) -> Tensor:
    """[B,3,S,S] images -> [B, N+1, d] tokens (class token first, plus positions)."""
    cfg = params.config
    if images.ndim != 4 or images.dims[1] != 3 or images.dims[2] != cfg.image_size \
            or images.dims[3] != cfg.image_size:
        raise ShapeError(
            f"expected images [B,3,{cfg.image_size},{cfg.image_size}], got {list(images.dims)}"
        )
    b = images.dims[0]
    g, p = cfg.grid, cfg.patch_size
    patches = images.reshape(b, 3, g, p, g, p)
    patches = patches.transpose(0, 2, 4, 1, 3, 5).reshape(b, cfg.n_patches, cfg.patch_dim)
    tokens = T.matmul(patches, params.patch_w) + params.patch_b
    cls = T.broadcast_to(params.cls_token.reshape(1, 1, cfg.d_model), (b, 1, cfg.d_model))
    return T.concat([cls, tokens], axis=1) + params.pos_embed


def forward(images: Tensor | np.ndarray, params: VitParams,
            pcsr: R.PcsrParams | None = None,
            capture_tokens: bool = False) -> ForwardResult:
    """Run the backbone, optionally with scale-shift recalibration.

    With `pcsr` given, each layer's attention runs on recalibrated Q/K/V and
    the per-layer similarity matrices and domain tokens are returned alongside
    the logits. Without it this is the plain source model.
    """
    cfg = params.config
    if not isinstance(images, Tensor):
        images = Tensor(images, dtype=params.patch_w.data.dtype)
    if pcsr is not None and pcsr.n_layers != cfg.n_layers:
        raise ShapeError(
            f"adapter has {pcsr.n_layers} layers but backbone has {cfg.n_layers}"
        )

    x = patch_embed(images, params)
    tokens_out: list[LayerTokens] | None = [] if (capture_tokens or pcsr is not None) else None
    sims: list[Tensor] | None = [] if pcsr is not None else None
    domains: list[Tensor] | None = [] if pcsr is not None else None

    for i, layer in enumerate(params.layers):
        factors = None
        if tokens_out is not None:
            cls_tok = x[:, 0, :]
            patch_tok = x[:, 1:, :]
            tokens_out.append(LayerTokens(class_token=cls_tok, patch_tokens=patch_tok))
        if pcsr is not None:
            pc = pcsr.config
            feats = R.dsn_features(patch_tok, pcsr.dsn_w[i], pcsr.dsn_b[i])
            sims.append(R.similarity_matrix(feats))
            dom = R.domain_token(feats, pc.aggregation)
            domains.append(dom)
            cond = R.conditioning_input(pc, dom, cls_tok, patch_tok)
            factors = R.generate_factors(cond, pcsr.fgn_w[i], pcsr.fgn_b[i], pc.sharing)

        h = T.layernorm(x, layer.ln1_g, layer.ln1_b)
        qkv = T.matmul(h, layer.qkv_w) + layer.qkv_b
        d = cfg.d_model
        q, k, v = qkv[:, :, 0:d], qkv[:, :, d:2 * d], qkv[:, :, 2 * d:3 * d]
        if factors is not None:
            q, k, v = R.recalibrate_qkv(q, k, v, factors, pcsr.config.sharing)
        attn = R.recalibrated_attention(q, k, v, cfg.n_heads)
        x = x + (T.matmul(attn, layer.proj_w) + layer.proj_b)

        h2 = T.layernorm(x, layer.ln2_g, layer.ln2_b)
        mlp = T.matmul(T.gelu(T.matmul(h2, layer.fc1_w) + layer.fc1_b), layer.fc2_w) + layer.fc2_b
        x = x + mlp

    x = T.layernorm(x, params.norm_g, params.norm_b)
    logits = T.matmul(x[:, 0, :], params.head_w) + params.head_b
    return ForwardResult(logits=logits, layer_tokens=tokens_out,
                         sim_matrices=sims, domain_tokens=domains)
