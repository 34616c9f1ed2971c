"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError
from .tensor import Tensor, default_dtype, no_grad


def grad_check(f: Callable[..., Tensor], x: Union[Tensor, Sequence[Tensor]],
               step: float = 1e-5, max_coords: Optional[int] = None,
               seed: int = 0) -> float:
    """Compare backprop gradients of a scalar function against central differences.

    Parameters
    ----------
    f : callable
        Called as ``f(*xs)``; must return a single-element tensor.  Tensors
        in ``x`` are perturbed in place, so ``f`` may also ignore its
        arguments and close over them (e.g. model parameters).
    x : Tensor or sequence of Tensor
        Points of evaluation.  They should be float64 and require grad.
    step : float
        Finite-difference step h.
    max_coords : int, optional
        If given, only this many randomly chosen coordinates per tensor
        are differenced (the analytic gradient is still computed in full).
    seed : int
        Seed for the coordinate subsample.

    Returns
    -------
    float
        ``max |analytic - numeric| / max(1, |analytic|)`` over checked
        coordinates.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, grad in zip(xs, analytic):
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ContractError("grad_check needs contiguous tensors")
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        gflat = grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                up = f(*xs).item()
                flat[i] = orig - step
                down = f(*xs).item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst


# ----------------------------------------------------------------- harness
PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4


def toy_model_config(**overrides):
    """Small generator geometry used by gradient checks and quick tests."""
    from .generator import ModelConfig

    kw = dict(modalities=2, image_size=64, base_channels=8, art_blocks=3,
              transformer_positions=(1,), transformer_preset="custom",
              transformer_layers=2, embed_dim=16, heads=2, mlp_hidden=32,
              disc_channels=8)
    kw.update(overrides)
    return ModelConfig(**kw)


def _primitive_cases(rng: np.random.Generator) -> List[Tuple[str, Callable, List[Tensor]]]:
    from . import functional as F
    from .tensor import concat
    from .vit import deflatten, patchify

    def t(*shape, lo=None):
        data = rng.standard_normal(shape)
        if lo is not None:
            data = lo + np.abs(data)
        return Tensor(data, requires_grad=True)

    w = rng.standard_normal((5, 3, 4, 4))
    # weighted sums keep every output coordinate in play
    def wsum(y: Tensor) -> Tensor:
        c = np.random.default_rng(1).standard_normal(y.shape)
        return (y * Tensor(c)).sum()

    return [
        ("add_broadcast", lambda a, b: wsum(a + b), [t(3, 4), t(4)]),
        ("mul", lambda a, b: wsum(a * b), [t(3, 4), t(3, 1)]),
        ("div", lambda a, b: wsum(a / b), [t(3, 4), t(3, 4, lo=0.5)]),
        ("pow", lambda a: wsum(a ** 3), [t(4, 3)]),
        ("exp", lambda a: wsum(a.exp()), [t(4, 3)]),
        ("abs", lambda a: wsum(a.abs()), [t(4, 3, lo=0.1)]),
        ("sum_mean", lambda a: wsum(a.sum(axis=1)) + wsum(a.mean(axis=0)), [t(4, 5)]),
        ("reshape_transpose", lambda a: wsum(a.reshape(6, 4).transpose(1, 0)), [t(2, 3, 4)]),
        ("getitem", lambda a: wsum(a[1:, ::2]) + wsum(a[[0, 0, 2]]), [t(4, 5)]),
        ("concat", lambda a, b: wsum(concat([a, b], axis=1)), [t(2, 3, 2), t(2, 1, 2)]),
        ("matmul_batched", lambda a, b: wsum(a @ b), [t(2, 3, 4), t(4, 5)]),
        ("conv2d", lambda x, k, b: wsum(F.conv2d(x, k, b, stride=1, padding=1)),
         [t(2, 3, 6, 6), t(4, 3, 3, 3), t(4)]),
        ("conv2d_strided", lambda x, k: wsum(F.conv2d(x, k, None, stride=2, padding=1)),
         [t(1, 3, 8, 8), Tensor(w.copy(), requires_grad=True)]),
        ("conv_transpose2d", lambda x, k, b: wsum(F.conv_transpose2d(x, k, b, stride=2, padding=1,
                                                                     output_padding=1)),
         [t(1, 3, 4, 4), t(3, 2, 3, 3), t(2)]),
        ("softmax", lambda a: wsum(F.softmax(a, axis=-1)), [t(3, 5)]),
        ("layer_norm", lambda x, g, b: wsum(F.normalize(x, "layer", g, b, 1e-6)),
         [t(3, 6), t(6), t(6)]),
        ("instance_norm", lambda x, g, b: wsum(F.normalize(x, "instance", g, b, 1e-5)),
         [t(2, 3, 4, 4), t(3), t(3)]),
        ("relu", lambda a: wsum(F.relu(a)), [t(4, 5)]),
        ("leaky_relu", lambda a: wsum(F.leaky_relu(a)), [t(4, 5)]),
        ("tanh", lambda a: wsum(F.tanh(a)), [t(4, 5)]),
        ("gelu", lambda a: wsum(F.gelu(a)), [t(4, 5)]),
        ("max_pool2d", lambda a: wsum(F.max_pool2d(a, 2)), [t(1, 2, 4, 4)]),
        ("upsample_bilinear", lambda a: wsum(F.upsample_bilinear(a, (6, 8))), [t(1, 2, 3, 4)]),
        ("dropout", lambda a: wsum(F.dropout(a, 0.3, np.random.default_rng(3))), [t(4, 5)]),
        ("l1_mse", lambda a, b: F.l1(a, b) + F.mse(a, b), [t(3, 4), t(3, 4)]),
        ("patchify_deflatten", lambda a: wsum(deflatten(patchify(a, 1), (2, 3))), [t(1, 2, 2, 3)]),
    ]


def primitive_suite(seed: int = 0) -> List[Tuple[str, float]]:
    """Finite-difference check of every differentiable primitive in float64."""
    with default_dtype(np.float64):
        rng = np.random.default_rng(seed)
        return [(name, grad_check(f, xs)) for name, f, xs in _primitive_cases(rng)]


def toy_model_check(seed: int = 0, max_coords: int = 2, step: float = 1e-7) -> float:
    """End-to-end check of generator plus critic on the toy geometry.

    The scalar combines the pixel, reconstruction and adversarial terms with
    the critic unfrozen so that both networks receive gradients.  Only
    ``max_coords`` randomly chosen entries per parameter tensor are
    differenced; the input tensor is checked the same way.  The step is
    smaller than for primitives because thousands of rectifier units make
    larger steps likely to straddle a kink somewhere in the network.
    """
    from . import functional as F
    from .discriminator import PatchDiscriminator, select_discriminator_inputs
    from .generator import Generator
    from .trainer import pixel_loss, reconstruction_loss

    with default_dtype(np.float64):
        cfg = toy_model_config()
        rng = np.random.default_rng(seed)
        gen = Generator(cfg, rng)
        disc = PatchDiscriminator(2 * cfg.modalities, rng, cfg.disc_channels)
        a = (1, 0)
        m = Tensor(np.tanh(rng.standard_normal((1, 2, 64, 64))))
        x = Tensor(m.data * np.array(a, dtype=np.float64).reshape(1, -1, 1, 1))

        def objective(*_):
            y = gen(x)
            syn, acq = select_discriminator_inputs(m, y, a)
            return (pixel_loss(y, m, a) + reconstruction_loss(y, m, a)
                    + F.mse(disc(syn), 1.0) + F.mse(disc(acq), 0.0))

        params = [x] + gen.parameters() + disc.parameters()
        return grad_check(objective, params, step=step, max_coords=max_coords, seed=seed)
