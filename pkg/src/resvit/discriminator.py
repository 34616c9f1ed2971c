"""Conditional PatchGAN critic with availability-guided input selection."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .nn import Conv2d, InstanceNorm, Module
from .tensor import Tensor, concat, make_node


def _availability(a: Sequence[int], channels: int, dtype) -> np.ndarray:
    bits = np.asarray(a).reshape(-1)
    if bits.size != channels:
        raise DimensionError(f"availability has {bits.size} entries for {channels} modalities")
    if not np.isin(bits, (0, 1)).all():
        raise ConfigError(f"availability must be binary, got {bits.tolist()}")
    if bits.all() or not bits.any():
        raise ConfigError("availability needs at least one source and one target")
    return bits.astype(dtype).reshape(1, -1, 1, 1)


def _keep(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero ``x`` outside ``mask`` (exact +0.0), passing gradient only inside."""
    keep = mask.astype(x.dtype)
    return make_node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * keep,), "mask")


def select_discriminator_inputs(m: Tensor, y_hat: Tensor,
                                a: Sequence[int]) -> Tuple[Tensor, Tensor]:
    """Build the synthetic and acquired critic inputs.

    Returns ``(concat(a*m, (1-a)*y_hat), concat(a*m, (1-a)*m))``, each with
    2I channels: the I masked sources first, then the I masked targets.
    """
    if m.shape != y_hat.shape:
        raise DimensionError(f"reference {m.shape} and synthesis {y_hat.shape} differ")
    av = _availability(a, m.shape[1], m.dtype) == 1
    source = Tensor(np.where(av, m.data, 0).astype(m.dtype))
    acquired = Tensor(np.where(av, 0, m.data).astype(m.dtype))
    synthetic = _keep(y_hat, ~av)
    return concat([source, synthetic], axis=1), concat([source, acquired], axis=1)


class PatchDiscriminator(Module):
    """Five 4x4 convolutions; each output unit sees a 70x70 input patch.

    Output spatial size is H/8 - 2 for inputs divisible by 8.
    """

    receptive_field = 70

    def __init__(self, in_channels: int, rng: np.random.Generator, base: int = 64):
        b = base
        self.conv1 = Conv2d(in_channels, b, 4, rng, stride=2, padding=1)
        self.conv2 = Conv2d(b, 2 * b, 4, rng, stride=2, padding=1)
        self.norm2 = InstanceNorm(2 * b)
        self.conv3 = Conv2d(2 * b, 4 * b, 4, rng, stride=2, padding=1)
        self.norm3 = InstanceNorm(4 * b)
        self.conv4 = Conv2d(4 * b, 8 * b, 4, rng, stride=1, padding=1)
        self.norm4 = InstanceNorm(8 * b)
        self.conv5 = Conv2d(8 * b, 1, 4, rng, stride=1, padding=1)
        self.in_channels = in_channels

    def forward(self, x: Tensor) -> Tensor:
        return patchgan_forward(x, self)


def patchgan_forward(x: Tensor, d: PatchDiscriminator) -> Tensor:
    if x.ndim != 4 or x.shape[1] != d.in_channels:
        raise DimensionError(f"critic expects (N, {d.in_channels}, H, W), got {x.shape}")
    h, w = x.shape[2:]
    if h // 8 - 2 < 1 or w // 8 - 2 < 1:
        raise DimensionError(f"input {h}x{w} is too small for the patch critic")
    x = F.leaky_relu(d.conv1(x))
    x = F.leaky_relu(d.norm2(d.conv2(x)))
    x = F.leaky_relu(d.norm3(d.conv3(x)))
    x = F.leaky_relu(d.norm4(d.conv4(x)))
    return d.conv5(x)
