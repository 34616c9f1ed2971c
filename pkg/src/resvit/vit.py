"""Vision transformer used inside ART blocks, plus attention rollout."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigError, ContractError, DimensionError
from .nn import LayerNorm, Linear, Module
from .tensor import Parameter, Tensor, get_default_dtype

PRESETS = {
    "base": dict(layers=12, embed_dim=768, heads=12, mlp_hidden=3073),
    "large": dict(layers=24, embed_dim=1024, heads=16, mlp_hidden=4096),
}


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 12
    embed_dim: int = 768
    heads: int = 12
    mlp_hidden: int = 3073
    patch_size: int = 1
    seq_len: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.layers < 0:
            raise ConfigError("layer count must be >= 0")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.patch_size < 1 or self.seq_len < 1:
            raise ConfigError("patch size and sequence length must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TransformerConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown transformer preset {name!r}")
        return cls(**{**PRESETS[name], **overrides})

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


@dataclass
class AttentionRecord:
    """Attention matrices captured during one encoder pass.

    ``maps[l]`` has shape (N, S, N_P, N_P).  ``grid`` is the (H', W')
    token layout used to reshape rollout maps.
    """

    maps: List[np.ndarray] = field(default_factory=list)
    grid: Optional[Tuple[int, int]] = None


class PatchEmbedding(Module):
    def __init__(self, in_channels: int, cfg: TransformerConfig, rng: np.random.Generator):
        self.proj = Linear(in_channels * cfg.patch_size ** 2, cfg.embed_dim, rng)
        self.pos = Parameter((rng.standard_normal((cfg.seq_len, cfg.embed_dim)) * 0.02)
                             .astype(get_default_dtype()))
        self.patch_size = cfg.patch_size

    def forward(self, x: Tensor) -> Tensor:
        return patch_embed(x, self)


def patchify(x: Tensor, p: int) -> Tensor:
    """(N, C, H, W) -> (N, H*W/p^2, C*p^2), patches in row-major grid order."""
    n, c, h, w = x.shape
    if h % p or w % p:
        raise DimensionError(f"{h}x{w} map is not divisible into {p}x{p} patches")
    x = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, (h // p) * (w // p), c * p * p)


def deflatten(z: Tensor, grid: Tuple[int, int]) -> Tensor:
    """Inverse of ``patchify`` for unit patches: (N, N_P, D) -> (N, D, H', W')."""
    n, npatch, d = z.shape
    if grid[0] * grid[1] != npatch:
        raise DimensionError(f"cannot lay {npatch} tokens on a {grid} grid")
    return z.transpose(0, 2, 1).reshape(n, d, grid[0], grid[1])


def patch_embed(x: Tensor, embed: PatchEmbedding) -> Tensor:
    tokens = patchify(x, embed.patch_size)
    if tokens.shape[1] != embed.pos.shape[0]:
        raise ConfigError(f"sequence length {tokens.shape[1]} does not match positional "
                          f"table of {embed.pos.shape[0]}")
    return embed.proj(tokens) + embed.pos


class Attention(Module):
    """Multi-head self-attention; per-head projections are column blocks."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        d = cfg.embed_dim
        self.query = Linear(d, d, rng, bias=False)
        self.key = Linear(d, d, rng, bias=False)
        self.value = Linear(d, d, rng, bias=False)
        self.out = Linear(d, d, rng)
        self.heads = cfg.heads


def msa(z: Tensor, attn: Attention) -> Tuple[Tensor, np.ndarray]:
    """Multi-head self-attention; returns output and (N, S, N_P, N_P) weights."""
    n, t, d = z.shape
    s = attn.heads
    dh = d // s

    def split(x):
        return x.reshape(n, t, s, dh).transpose(0, 2, 1, 3)

    q, k, v = split(attn.query(z)), split(attn.key(z)), split(attn.value(z))
    logits = F.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    a = F.softmax(logits, axis=-1)
    heads = F.matmul(a, v).transpose(0, 2, 1, 3).reshape(n, t, d)
    return attn.out(heads), a.data


class EncoderLayer(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.norm1 = LayerNorm(cfg.embed_dim)
        self.attn = Attention(cfg, rng)
        self.norm2 = LayerNorm(cfg.embed_dim)
        self.fc1 = Linear(cfg.embed_dim, cfg.mlp_hidden, rng)
        self.fc2 = Linear(cfg.mlp_hidden, cfg.embed_dim, rng)
        self.dropout = cfg.dropout
        self.rng: Optional[np.random.Generator] = None

    def forward(self, z: Tensor) -> Tuple[Tensor, np.ndarray]:
        return transformer_layer(z, self)


def transformer_layer(z: Tensor, layer: EncoderLayer) -> Tuple[Tensor, np.ndarray]:
    """Pre-norm residual MSA followed by pre-norm residual MLP."""
    drop = layer.dropout if layer.training else 0.0
    attended, weights = msa(layer.norm1(z), layer.attn)
    z = z + F.dropout(attended, drop, layer.rng)
    hidden = F.dropout(F.gelu(layer.fc1(layer.norm2(z))), drop, layer.rng)
    z = z + F.dropout(layer.fc2(hidden), drop, layer.rng)
    return z, weights


class TransformerEncoder(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator):
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.layers)]

    def forward(self, z: Tensor, record: Optional[AttentionRecord] = None) -> Tensor:
        return transformer_encoder(z, self, record)


def transformer_encoder(z: Tensor, encoder: TransformerEncoder,
                        record: Optional[AttentionRecord] = None) -> Tensor:
    for layer in encoder.layers:
        z, weights = transformer_layer(z, layer)
        if record is not None:
            record.maps.append(weights)
    return z


class VisionTransformer(Module):
    """Patch embedding + encoder; maps (N, C', H', W') to (N, N_D, H', W')."""

    def __init__(self, in_channels: int, cfg: TransformerConfig, rng: np.random.Generator):
        if cfg.patch_size != 1:
            raise ConfigError("the ART transformer supports unit patches only")
        self.embed = PatchEmbedding(in_channels, cfg, rng)
        self.encoder = TransformerEncoder(cfg, rng)
        self.config = cfg

    def forward(self, x: Tensor, record: Optional[AttentionRecord] = None) -> Tensor:
        z = patch_embed(x, self.embed)
        if record is not None:
            record.grid = tuple(x.shape[2:])
        z = transformer_encoder(z, self.encoder, record)
        return deflatten(z, x.shape[2:])


def rollout_matrices(record: AttentionRecord, sample: int = 0) -> List[np.ndarray]:
    """Head-averaged, identity-mixed, row-renormalised attention per layer."""
    if not record.maps:
        raise ContractError("attention rollout needs at least one captured layer")
    mixed = []
    for layer_maps in record.maps:
        a = np.asarray(layer_maps, dtype=np.float64)
        if a.ndim == 4:
            a = a[sample]
        if a.ndim == 3:
            a = a.mean(axis=0)
        a = 0.5 * a + 0.5 * np.eye(a.shape[-1])
        mixed.append(a / a.sum(axis=-1, keepdims=True))
    return mixed


def attention_rollout(record: AttentionRecord, sample: int = 0) -> np.ndarray:
    """Rollout map on the token grid, min-max scaled to [0, 1].

    Layer matrices are multiplied as ``A_L ... A_1``; each token's score is
    the mean of its column, i.e. how much all outputs draw on it.  A
    constant map (no contrast) is returned as zeros.
    """
    mats = rollout_matrices(record, sample)
    r = mats[0]
    for a in mats[1:]:
        r = a @ r
    scores = r.mean(axis=0)
    lo, hi = scores.min(), scores.max()
    scores = np.zeros_like(scores) if hi - lo <= 1e-12 else (scores - lo) / (hi - lo)
    grid = record.grid
    if grid is None:
        side = int(round(np.sqrt(scores.size)))
        grid = (side, side) if side * side == scores.size else (1, scores.size)
    return scores.reshape(grid)
