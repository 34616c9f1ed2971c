"""Hybrid CNN-transformer generator built from aggregated residual transformer blocks.

Layout: a convolutional encoder brings the masked multi-modality input to
``N_C`` channels at 1/4 resolution, a chain of ART blocks processes it at
that resolution, and a transposed-convolution decoder returns one output
channel per modality.  An ART block optionally runs a transformer path
(downsample, ViT, upsample, skip) whose output is fused with the block
input by channel compression before a residual CNN.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .nn import Conv2d, ConvBlock, InstanceNorm, Module
from .tensor import Tensor, concat
from .vit import AttentionRecord, TransformerConfig, VisionTransformer

TIED_GROUP = "transformer.encoder"


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults give the full-size model."""

    modalities: int = 3
    image_size: int = 256
    base_channels: int = 64
    bottleneck_channels: Optional[int] = None
    art_blocks: int = 9
    transformer_positions: Tuple[int, ...] = (1, 6)
    downsample_factor: int = 4
    transformer_preset: str = "base"
    transformer_layers: int = 12
    embed_dim: int = 768
    heads: int = 12
    mlp_hidden: int = 3073
    patch_size: int = 1
    dropout: float = 0.0
    tie_weights: bool = True
    disc_channels: int = 64
    no_transformers: bool = False
    no_conv_in_art: bool = False
    no_skip_conv: bool = False
    no_skip_trans: bool = False
    unlearned_sampling: bool = False
    no_art_sampling: bool = False

    def __post_init__(self):
        self.transformer_positions = tuple(int(p) for p in self.transformer_positions)
        if self.modalities < 2:
            raise ConfigError("need at least two modalities")
        if self.art_blocks < 1:
            raise ConfigError("need at least one ART block")
        m = self.downsample_factor
        if m < 2 or m & (m - 1):
            raise ConfigError(f"downsample factor {m} is not a power of two >= 2")
        positions = self.transformer_positions
        if len(set(positions)) != len(positions) or list(positions) != sorted(positions):
            raise ConfigError("transformer positions must be strictly increasing")
        if any(not 1 <= p <= self.art_blocks for p in positions):
            raise ConfigError(f"transformer positions {positions} outside 1..{self.art_blocks}")
        if self.no_transformers and positions:
            raise ConfigError("no_transformers requires an empty transformer position set")
        if self.image_size % (4 * m):
            raise ConfigError(f"image size {self.image_size} not divisible by {4 * m}")
        if self.transformer_preset not in ("base", "large", "custom"):
            raise ConfigError(f"unknown transformer preset {self.transformer_preset!r}")
        self.transformer_config()

    @property
    def n_c(self) -> int:
        return self.bottleneck_channels or 4 * self.base_channels

    @property
    def token_grid(self) -> Tuple[int, int]:
        side = self.image_size // (4 * self.downsample_factor)
        return side, side

    @property
    def sampling_stages(self) -> int:
        return int(math.log2(self.downsample_factor))

    def transformer_config(self) -> TransformerConfig:
        h, w = self.token_grid
        seq = (h * w) // (self.patch_size ** 2)
        if self.transformer_preset == "custom":
            return TransformerConfig(self.transformer_layers, self.embed_dim, self.heads,
                                     self.mlp_hidden, self.patch_size, seq, self.dropout)
        return TransformerConfig.preset(self.transformer_preset, patch_size=self.patch_size,
                                        seq_len=seq, dropout=self.dropout)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transformer_positions"] = list(self.transformer_positions)
        return d

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in fields(cls)]


# ------------------------------------------------------------------ pieces
class Encoder(Module):
    """conv7 -> conv3/s2 -> conv3/s2, each followed by norm and relu."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        b, nc = cfg.base_channels, cfg.n_c
        self.stages = [
            ConvBlock(cfg.modalities, b, 7, rng),
            ConvBlock(b, 2 * b, 3, rng, stride=2),
            ConvBlock(2 * b, nc, 3, rng, stride=2),
        ]
        if cfg.no_art_sampling:
            self.stages += [ConvBlock(nc, nc, 3, rng, stride=2) for _ in range(cfg.sampling_stages)]
        self.in_channels = cfg.modalities

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"encoder expects (N, {self.in_channels}, H, W), got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise DimensionError(f"spatial size {x.shape[2:]} not divisible by 4")
        for stage in self.stages:
            x = stage(x)
        return x


class Downsample(Module):
    """Strided conv stack N_C -> 2 N_C, or unlearned max pooling."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.factor = cfg.downsample_factor
        self.stages = []
        if cfg.unlearned_sampling:
            self.out_channels = cfg.n_c
            return
        nc, k = cfg.n_c, cfg.sampling_stages
        ladder = [nc + (nc * i) // k for i in range(k + 1)]
        self.stages = [ConvBlock(ladder[i], ladder[i + 1], 3, rng, stride=2) for i in range(k)]
        self.out_channels = ladder[-1]

    def forward(self, f: Tensor) -> Tensor:
        h, w = f.shape[2:]
        if h % self.factor or w % self.factor:
            raise DimensionError(f"{h}x{w} map not divisible by factor {self.factor}")
        if not self.stages:
            return F.max_pool2d(f, self.factor)
        for stage in self.stages:
            f = stage(f)
        return f


class Upsample(Module):
    """Transposed conv stack N_D -> 2 N_C -> N_C, or bilinear + 1x1 projection."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, in_channels: int):
        nc, k = cfg.n_c, cfg.sampling_stages
        self.factor = cfg.downsample_factor
        self.stages = []
        self.project = None
        if cfg.unlearned_sampling:
            self.project = Conv2d(in_channels, nc, 1, rng)
            return
        ladder = [in_channels] + [2 * nc - (nc * i) // max(k - 1, 1) for i in range(k)]
        if k == 1:
            ladder = [in_channels, nc]
        self.stages = [ConvBlock(ladder[i], ladder[i + 1], 3, rng, stride=2, transposed=True)
                       for i in range(k)]

    def forward(self, g: Tensor) -> Tensor:
        if self.project is not None:
            h, w = g.shape[2:]
            return self.project(F.upsample_bilinear(g, (h * self.factor, w * self.factor)))
        for stage in self.stages:
            g = stage(g)
        return g


class ChannelCompression(Module):
    """relu(norm(conv1x1(c) + conv3x3(c))) with c = concat(f, g)."""

    def __init__(self, nc: int, rng: np.random.Generator):
        self.branch1 = Conv2d(2 * nc, nc, 1, rng)
        self.branch3 = Conv2d(2 * nc, nc, 3, rng, padding=1)
        self.norm = InstanceNorm(nc)

    def forward(self, f: Tensor, g: Tensor) -> Tensor:
        return channel_compress(f, g, self)


def channel_compress(f: Tensor, g: Tensor, cc: ChannelCompression) -> Tensor:
    if f.shape != g.shape:
        raise DimensionError(f"channel compression inputs differ: {f.shape} vs {g.shape}")
    c = concat([f, g], axis=1)
    return F.relu(cc.norm(cc.branch1(c) + cc.branch3(c)))


class ResCNN(Module):
    """h + norm(conv(relu(norm(conv(h))))); the skip is optional."""

    def __init__(self, nc: int, rng: np.random.Generator, skip: bool = True):
        self.conv1 = Conv2d(nc, nc, 3, rng, padding=1)
        self.norm1 = InstanceNorm(nc)
        self.conv2 = Conv2d(nc, nc, 3, rng, padding=1)
        self.norm2 = InstanceNorm(nc)
        self.skip = skip

    def forward(self, h: Tensor) -> Tensor:
        r = self.norm2(self.conv2(F.relu(self.norm1(self.conv1(h)))))
        return h + r if self.skip else r


def res_cnn(h: Tensor, block: ResCNN) -> Tensor:
    return block(h)


class TransformerPath(Module):
    """Downsample -> patch embedding -> encoder -> deflatten -> upsample."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        tcfg = cfg.transformer_config()
        if cfg.no_art_sampling:
            self.ds = None
            self.vit = VisionTransformer(cfg.n_c, tcfg, rng)
            self.us = Conv2d(tcfg.embed_dim, cfg.n_c, 1, rng)
        else:
            self.ds = Downsample(cfg, rng)
            self.vit = VisionTransformer(self.ds.out_channels, tcfg, rng)
            self.us = Upsample(cfg, rng, tcfg.embed_dim)

    def forward(self, f: Tensor, record: Optional[AttentionRecord] = None) -> Tensor:
        x = f if self.ds is None else self.ds(f)
        return self.us(self.vit(x, record))


class ArtBlock(Module):
    def __init__(self, cfg: ModelConfig, index: int, rng: np.random.Generator):
        self.index = index
        self.transformer: Optional[TransformerPath] = None
        self.cc: Optional[ChannelCompression] = None
        self.res: Optional[ResCNN] = ResCNN(cfg.n_c, rng, skip=not cfg.no_skip_conv)
        self._cfg = cfg

    def insert_transformer(self, rng: np.random.Generator) -> None:
        cfg = self._cfg
        self.transformer = TransformerPath(cfg, rng)
        self.cc = ChannelCompression(cfg.n_c, rng)
        if cfg.no_conv_in_art:
            self.res = None

    def forward(self, f: Tensor, record: Optional[AttentionRecord] = None) -> Tensor:
        return art_forward(f, self, record)


def art_forward(f: Tensor, block: ArtBlock, record: Optional[AttentionRecord] = None) -> Tensor:
    if block.transformer is None:
        return block.res(f)
    g = block.transformer(f, record)
    if not block._cfg.no_skip_trans:
        g = g + f
    h = channel_compress(f, g, block.cc)
    return h if block.res is None else block.res(h)


class Decoder(Module):
    """convT3/s2 -> convT3/s2 -> conv7 -> tanh."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        b, nc = cfg.base_channels, cfg.n_c
        self.stages = []
        if cfg.no_art_sampling:
            self.stages += [ConvBlock(nc, nc, 3, rng, stride=2, transposed=True)
                            for _ in range(cfg.sampling_stages)]
        self.stages += [
            ConvBlock(nc, 2 * b, 3, rng, stride=2, transposed=True),
            ConvBlock(2 * b, b, 3, rng, stride=2, transposed=True),
        ]
        self.out = Conv2d(b, cfg.modalities, 7, rng, padding=3)

    def forward(self, f: Tensor) -> Tensor:
        for stage in self.stages:
            f = stage(f)
        return F.tanh(self.out(f))


class Generator(Module):
    """Full generator.  Built conv-only when ``with_transformers`` is False.

    Parameters
    ----------
    cfg : ModelConfig
    rng : numpy Generator used for initialisation
    with_transformers : bool
        Insert transformer paths immediately.  Two-phase training builds
        the model without them and calls ``insert_transformers`` later.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator,
                 with_transformers: bool = True):
        self.config = cfg
        self.encoder = Encoder(cfg, rng)
        self.art = [ArtBlock(cfg, j, rng) for j in range(1, cfg.art_blocks + 1)]
        self.decoder = Decoder(cfg, rng)
        if with_transformers:
            self.insert_transformers(rng)

    @property
    def has_transformers(self) -> bool:
        return any(b.transformer is not None for b in self.art)

    @property
    def retaining_blocks(self) -> List[int]:
        return [b.index for b in self.art if b.transformer is not None]

    def insert_transformers(self, rng: np.random.Generator) -> None:
        if self.has_transformers:
            return
        for pos in self.config.transformer_positions:
            self.art[pos - 1].insert_transformer(rng)
        if self.config.tie_weights and len(self.config.transformer_positions) > 1:
            tie_weights(self)

    def forward(self, x: Tensor, records: Optional[Dict[int, AttentionRecord]] = None) -> Tensor:
        f = self.encoder(x)
        for block in self.art:
            rec = None
            if records is not None and block.transformer is not None:
                rec = records.setdefault(block.index, AttentionRecord())
            f = art_forward(f, block, rec)
        return self.decoder(f)

    def synthesize(self, m: Tensor, availability: Sequence[int]) -> Tensor:
        """Mask unavailable channels of ``m`` and run the generator."""
        a = np.asarray(availability).reshape(1, -1, 1, 1)
        if a.shape[1] != m.shape[1]:
            raise DimensionError(f"availability has {a.shape[1]} entries, input {m.shape[1]} channels")
        return self.forward(Tensor(np.where(a == 1, m.data, m.dtype.type(0))))


def tie_weights(model: Generator) -> Dict[str, List[str]]:
    """Alias the encoder layers of every transformer path to the first one.

    Patch embeddings, positional tables and the down/upsampling blocks stay
    private to each block.  Returns ``{group: [parameter names]}``.
    """
    paths = [b.transformer for b in model.art if b.transformer is not None]
    if len(paths) < 2:
        raise ConfigError("weight tying needs at least two transformer-retaining blocks")
    shared = paths[0].vit.encoder
    ref = [p.shape for p in shared.parameters()]
    for path in paths[1:]:
        if [p.shape for p in path.vit.encoder.parameters()] != ref:
            raise ConfigError("cannot tie transformers with different geometries")
    for path in paths[1:]:
        path.vit.encoder = shared
    first = next(b for b in model.art if b.transformer is not None)
    prefix = f"art.{first.index - 1}.transformer.vit.encoder."
    names = []
    for name, p in shared.named_parameters(prefix):
        p.group = TIED_GROUP
        names.append(name)
    return {TIED_GROUP: names}


def untie_weights(model: Generator) -> None:
    """Give every transformer path its own copy of the (possibly shared) encoder."""
    seen = set()
    for block in model.art:
        if block.transformer is None:
            continue
        enc = block.transformer.vit.encoder
        if id(enc) in seen:
            enc = copy.deepcopy(enc)
            block.transformer.vit.encoder = enc
        seen.add(id(enc))
        for p in enc.parameters():
            p.group = None


def encoder_parameter_count(model: Generator) -> int:
    path = next(b.transformer for b in model.art if b.transformer is not None)
    return path.vit.encoder.num_parameters()
