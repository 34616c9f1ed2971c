"""Training objective, optimiser, schedule and the two-phase training loop."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .checkpoint import Checkpoint, config_fingerprint
from .data import Dataset, TaskConfig, leave_one_out_tasks, mask_inputs
from .discriminator import PatchDiscriminator, select_discriminator_inputs
from .errors import ConfigError, DataError, NumericError
from .generator import Generator, ModelConfig
from .nn import Module
from .tensor import Parameter, Tensor, no_grad

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "step", "task", "L_pix", "L_rec", "L_G_adv", "L_D", "lr"]


# ------------------------------------------------------------------ losses
@dataclass
class LossWeights:
    pix: float = 100.0
    rec: float = 100.0
    adv: float = 1.0

    def __post_init__(self):
        if min(self.pix, self.rec, self.adv) < 0:
            raise ConfigError("loss weights must be nonnegative")


def _channel_l1(y_hat: Tensor, m: Tensor) -> Tensor:
    """Mean absolute error per modality channel, shape (I,)."""
    return (y_hat - m).abs().mean(axis=(0, 2, 3))


def pixel_loss(y_hat: Tensor, m: Tensor, a: Sequence[int]) -> Tensor:
    """L1 over target channels: sum_i (1 - a_i) mean|y_i - m_i|."""
    w = 1.0 - np.asarray(a, dtype=y_hat.dtype)
    return (_channel_l1(y_hat, m) * Tensor(w)).sum()


def reconstruction_loss(y_hat: Tensor, m: Tensor, a: Sequence[int]) -> Tensor:
    """L1 over source channels: sum_i a_i mean|y_i - m_i|."""
    w = np.asarray(a, dtype=y_hat.dtype)
    return (_channel_l1(y_hat, m) * Tensor(w)).sum()


def discriminator_loss(d: Module, x_synthetic: Tensor, x_acquired: Tensor) -> Tensor:
    """Least-squares critic loss; the synthetic input is detached."""
    return F.mse(d(x_acquired), 1.0) + F.mse(d(x_synthetic.detach()), 0.0)


def generator_adversarial_loss(d: Module, x_synthetic: Tensor) -> Tensor:
    """Least-squares generator loss with the critic's parameters frozen."""
    flags = [p.requires_grad for p in d.parameters()]
    d.requires_grad_(False)
    try:
        return F.mse(d(x_synthetic), 1.0)
    finally:
        for p, flag in zip(d.parameters(), flags):
            p.requires_grad = flag


def adversarial_losses(d: Module, x_synthetic: Tensor, x_acquired: Tensor) -> Tuple[Tensor, Tensor]:
    return discriminator_loss(d, x_synthetic, x_acquired), generator_adversarial_loss(d, x_synthetic)


def total_generator_loss(l_pix, l_rec, l_g_adv, weights: LossWeights):
    return weights.pix * l_pix + weights.rec * l_rec + weights.adv * l_g_adv


# --------------------------------------------------------------- optimiser
class Adam:
    """Bias-corrected Adam.  State is keyed by parameter identity, so a tied
    parameter has exactly one entry and is updated once per step."""

    def __init__(self, named_params: Iterable[Tuple[str, Parameter]],
                 betas: Tuple[float, float] = (0.5, 0.999), eps: float = 1e-8):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        self.state: Dict[int, dict] = {}
        self.add(named_params)

    def add(self, named_params: Iterable[Tuple[str, Parameter]]) -> None:
        for name, p in named_params:
            if id(p) in self.state:
                continue
            self.params[name] = p
            self.state[id(p)] = dict(m=np.zeros_like(p.data), v=np.zeros_like(p.data), t=0)

    def step(self, lr: float) -> None:
        live = [(n, p) for n, p in self.params.items() if p.grad is not None]
        for name, p in live:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient for {name}")
        b1, b2 = self.beta1, self.beta2
        for _, p in live:
            s = self.state[id(p)]
            g = p.grad
            s["t"] += 1
            s["m"] = b1 * s["m"] + (1.0 - b1) * g
            s["v"] = b2 * s["v"] + (1.0 - b2) * (g * g)
            m_hat = s["m"] / (1.0 - b1 ** s["t"])
            v_hat = s["v"] / (1.0 - b2 ** s["t"])
            p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def state_tensors(self, prefix: str) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, p in self.params.items():
            s = self.state[id(p)]
            out[f"{prefix}m.{name}"] = s["m"]
            out[f"{prefix}v.{name}"] = s["v"]
            out[f"{prefix}t.{name}"] = np.array([s["t"]], dtype=np.float32)
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray], prefix: str) -> None:
        for name, p in self.params.items():
            key = f"{prefix}m.{name}"
            if key not in tensors:
                continue
            s = self.state[id(p)]
            s["m"] = np.array(tensors[key], dtype=p.dtype)
            s["v"] = np.array(tensors[f"{prefix}v.{name}"], dtype=p.dtype)
            s["t"] = int(tensors[f"{prefix}t.{name}"][0])


# ----------------------------------------------------------------- schedule
@dataclass
class TrainPlan:
    phase1_epochs: int = 50
    phase2_epochs: int = 50
    lr_phase1: float = 2e-4
    lr_phase2: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    seed: int = 0
    tasks: Optional[List[str]] = None
    unified: bool = True
    checkpoint_every: int = 10
    early_insertion: bool = False
    no_adv: bool = False

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0 or self.total_epochs < 1:
            raise ConfigError("epoch counts must be nonnegative with a positive total")
        if self.lr_phase1 < 0 or self.lr_phase2 < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch size and checkpoint interval must be positive")
        if self.tasks is not None:
            self.tasks = list(self.tasks)
            if not self.tasks:
                raise ConfigError("task list must not be empty")
            if not self.unified and len(self.tasks) != 1:
                raise ConfigError("a task-specific plan takes exactly one task")

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs

    def phase_of(self, epoch: int) -> int:
        return 1 if epoch < self.phase1_epochs else 2


def window_lr(local_epoch: float, window: int, base: float) -> float:
    """Constant for the first half of a window, then linear to zero at its end."""
    hold = window // 2
    span = window - hold
    if local_epoch <= hold:
        return base
    return base * max(0.0, 1.0 - (local_epoch - hold) / span)


def lr_at_epoch(epoch: int, plan: TrainPlan) -> float:
    """Learning rate for a global epoch; each phase has its own decay window."""
    if not 0 <= epoch < plan.total_epochs:
        raise ConfigError(f"epoch {epoch} outside 0..{plan.total_epochs - 1}")
    if epoch < plan.phase1_epochs:
        return window_lr(epoch, plan.phase1_epochs, plan.lr_phase1)
    return window_lr(epoch - plan.phase1_epochs, plan.phase2_epochs, plan.lr_phase2)


def sample_task(rng: np.random.Generator, tasks: Sequence[TaskConfig]) -> TaskConfig:
    if not tasks:
        raise ConfigError("cannot sample from an empty task list")
    return tasks[int(rng.integers(len(tasks)))]


# ------------------------------------------------------------ configuration
VARIANTS: Dict[str, Tuple[dict, dict]] = {
    "full": ({}, {}),
    "no_transformers": ({"no_transformers": True, "transformer_positions": ()}, {}),
    "no_conv_in_art": ({"no_conv_in_art": True}, {}),
    "no_adv": ({}, {"no_adv": True}),
    "untied": ({"tie_weights": False}, {}),
    "A1_only": ({"transformer_positions": (1,)}, {}),
    "A6_only": ({"transformer_positions": (6,)}, {}),
    "no_skip_conv": ({"no_skip_conv": True}, {}),
    "no_skip_trans": ({"no_skip_trans": True}, {}),
    "unlearned_sampling": ({"unlearned_sampling": True}, {}),
    "no_art_sampling": ({"no_art_sampling": True}, {}),
    "early_insertion": ({}, {"early_insertion": True}),
}

_LOSS_KEYS = {"lambda_pix": "pix", "lambda_rec": "rec", "lambda_adv": "adv"}


@dataclass
class TrainConfig:
    """Model, plan and loss weights resolved from one flat JSON object."""

    model: ModelConfig = field(default_factory=ModelConfig)
    plan: TrainPlan = field(default_factory=TrainPlan)
    weights: LossWeights = field(default_factory=LossWeights)
    variant: str = "full"

    @classmethod
    def from_dict(cls, d: dict, variant: Optional[str] = None) -> "TrainConfig":
        model_keys = set(ModelConfig.field_names())
        plan_keys = {f.name for f in fields(TrainPlan)}
        errors = []
        for key in d:
            if key not in model_keys | plan_keys | set(_LOSS_KEYS) | {"variant"}:
                errors.append(f"unknown key {key!r}")
        if "tasks" in d and d["tasks"] is not None and not (
                isinstance(d["tasks"], list) and all(isinstance(t, str) for t in d["tasks"])):
            errors.append("'tasks' should be a list of strings like \"T1+T2->PD\"")
        for key, value in d.items():
            expected = _field_type(key)
            if expected is not None and not _type_ok(value, expected):
                errors.append(f"{key!r} should be {expected}, got {type(value).__name__}")
        variant = variant or d.get("variant") or "full"
        if variant not in VARIANTS:
            errors.append(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        if errors:
            raise ConfigError("invalid training config: " + "; ".join(errors))
        model_kw = {k: v for k, v in d.items() if k in model_keys}
        plan_kw = {k: v for k, v in d.items() if k in plan_keys}
        loss_kw = {_LOSS_KEYS[k]: float(v) for k, v in d.items() if k in _LOSS_KEYS}
        model_over, plan_over = VARIANTS[variant]
        model_kw.update(model_over)
        plan_kw.update(plan_over)
        plan = TrainPlan(**plan_kw)
        weights = LossWeights(**loss_kw)
        if plan.no_adv:
            weights = replace(weights, adv=0.0)
        if not plan.unified:
            weights = replace(weights, rec=0.0)
        return cls(ModelConfig(**model_kw), plan, weights, variant)

    @classmethod
    def load(cls, path, variant: Optional[str] = None) -> "TrainConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        return cls.from_dict(d, variant)

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        d.update(asdict(self.plan))
        d.update({k: getattr(self.weights, v) for k, v in _LOSS_KEYS.items()})
        d["variant"] = self.variant
        return d

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def _field_type(key: str):
    for dc in (ModelConfig, TrainPlan):
        for f in fields(dc):
            if f.name == key:
                return f.default if f.default is not None else None
    if key in _LOSS_KEYS:
        return 0.0
    return None


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, tuple):
        return isinstance(value, list) and all(isinstance(v, int) for v in value)
    return True


# ------------------------------------------------------------------ training
@dataclass
class StepLosses:
    epoch: int
    step: int
    task: str
    pix: float
    rec: float
    g_adv: float
    d: float
    lr: float

    def row(self) -> List[str]:
        return [str(self.epoch), str(self.step), self.task, repr(self.pix), repr(self.rec),
                repr(self.g_adv), repr(self.d), repr(self.lr)]


class Trainer:
    """Two-phase adversarial training on a slice dataset.

    Phase 1 trains the conv-only generator (every ART block is a residual
    CNN) and the critic.  Phase 2 inserts transformer paths at the
    configured positions, ties them, and continues at the phase-2 rate.
    Each epoch shuffles the training slices; each batch draws one task
    uniformly, masks its targets, then performs a critic step followed by
    a generator step.

    ``run`` is a generator yielding checkpoints; per-step losses are kept
    in ``history`` and, if ``log_path`` is set, appended to a CSV file.
    """

    def __init__(self, config: TrainConfig, dataset: Dataset,
                 transformer_init: Optional[Checkpoint] = None,
                 log_path: Optional[Path] = None):
        self.config = config
        cfg, plan = config.model, config.plan
        if tuple(dataset.modalities) and len(dataset.modalities) != cfg.modalities:
            raise ConfigError(f"dataset has {len(dataset.modalities)} modalities, "
                              f"model expects {cfg.modalities}")
        self.images, self.refs = dataset.arrays("train")
        if len(self.images) == 0:
            raise DataError(f"{dataset.root}: no training slices")
        if self.images.shape[-1] != cfg.image_size or self.images.shape[-2] != cfg.image_size:
            raise ConfigError(f"model image_size {cfg.image_size} does not match data "
                              f"{self.images.shape[-2:]}")
        names = plan.tasks
        self.tasks = ([TaskConfig.parse(t, dataset.modalities) for t in names] if names
                      else leave_one_out_tasks(dataset.modalities))
        self.fingerprint = config_fingerprint(cfg)
        self.transformer_init = transformer_init
        self.log_path = log_path

        seed = plan.seed
        self._data_rng = np.random.default_rng([seed, 2])
        self._task_rng = np.random.default_rng([seed, 3])
        self._insert_rng = np.random.default_rng([seed, 4])
        init_rng = np.random.default_rng([seed, 1])
        self.generator = Generator(cfg, init_rng, with_transformers=False)
        self.discriminator = (None if plan.no_adv else
                              PatchDiscriminator(2 * cfg.modalities, init_rng, cfg.disc_channels))
        betas = (plan.beta1, plan.beta2)
        self.opt_g = Adam(self.generator.named_parameters(), betas)
        self.opt_d = None if self.discriminator is None else \
            Adam(self.discriminator.named_parameters(), betas)
        self.history: List[StepLosses] = []
        self.phase = 1
        if plan.early_insertion:
            self._insert()

    # -------------------------------------------------------------- phases
    def _insert(self) -> None:
        self.generator.insert_transformers(self._insert_rng)
        if self.transformer_init is not None:
            src = {k[len("gen."):]: v for k, v in self.transformer_init.tensors.items()
                   if k.startswith("gen.") and ".transformer." in k}
            self.generator.load_state_dict(src, strict=False)
        self.opt_g.add(self.generator.named_parameters())

    # ---------------------------------------------------------------- step
    def train_step(self, batch: np.ndarray, task: TaskConfig, lr: float) -> Tuple[float, float, float, float]:
        a = task.availability
        m = Tensor(batch)
        y_hat = self.generator(Tensor(mask_inputs(batch, task)))
        l_d_val = l_g_adv_val = 0.0
        l_g_adv = 0.0
        d = self.discriminator
        if d is not None:
            x_syn, x_acq = select_discriminator_inputs(m, y_hat.detach(), a)
            d.zero_grad()
            l_d = discriminator_loss(d, x_syn, x_acq)
            l_d.backward()
            l_d_val = l_d.item()
            self._guard(l_d_val, "L_D")
            self.opt_d.step(lr)
            x_syn_g, _ = select_discriminator_inputs(m, y_hat, a)
            l_g_adv = generator_adversarial_loss(d, x_syn_g)
            l_g_adv_val = l_g_adv.item()
        l_pix = pixel_loss(y_hat, m, a)
        l_rec = reconstruction_loss(y_hat, m, a)
        total = total_generator_loss(l_pix, l_rec, l_g_adv, self.config.weights)
        self._guard(total.item(), "generator loss")
        self.generator.zero_grad()
        total.backward()
        self.opt_g.step(lr)
        return l_pix.item(), l_rec.item(), l_g_adv_val, l_d_val

    @staticmethod
    def _guard(value: float, what: str) -> None:
        if not math.isfinite(value):
            raise NumericError(f"{what} diverged ({value})")

    # ----------------------------------------------------------------- loop
    def run(self) -> Iterator[Checkpoint]:
        plan = self.config.plan
        n = len(self.images)
        writer = None
        fh = None
        if self.log_path is not None:
            fh = open(self.log_path, "w", newline="")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_HEADER)
        try:
            step = 0
            for epoch in range(plan.total_epochs):
                if epoch == plan.phase1_epochs and epoch > 0:
                    self.phase = 2
                    self._insert()
                elif epoch == 0 and plan.phase1_epochs == 0:
                    self.phase = 2
                    self._insert()
                lr = lr_at_epoch(epoch, plan)
                order = self._data_rng.permutation(n)
                for start in range(0, n, plan.batch_size):
                    idx = np.sort(order[start:start + plan.batch_size])
                    task = sample_task(self._task_rng, self.tasks)
                    pix, rec, gadv, dl = self.train_step(self.images[idx], task, lr)
                    rec_ = StepLosses(epoch + 1, step, task.name, pix, rec, gadv, dl, lr)
                    self.history.append(rec_)
                    if writer is not None:
                        writer.writerow(rec_.row())
                    step += 1
                if fh is not None:
                    fh.flush()
                log.info("epoch %d/%d phase %d lr %.3g L_pix %.4f", epoch + 1,
                         plan.total_epochs, self.phase, lr, self.epoch_mean("pix", epoch + 1))
                last = epoch + 1 == plan.total_epochs
                boundary = epoch + 1 == plan.phase1_epochs
                if last or boundary or (epoch + 1) % plan.checkpoint_every == 0:
                    yield self.checkpoint(epoch + 1)
        finally:
            if fh is not None:
                fh.close()

    def epoch_mean(self, key: str, epoch: int) -> float:
        vals = [getattr(h, key) for h in self.history if h.epoch == epoch]
        return float(np.mean(vals)) if vals else math.nan

    def checkpoint(self, epoch: int) -> Checkpoint:
        tensors = OrderedDict()
        tensors.update(self.generator.state_dict("gen."))
        if self.discriminator is not None:
            tensors.update(self.discriminator.state_dict("disc."))
        tensors.update(self.opt_g.state_tensors("opt.gen."))
        if self.opt_d is not None:
            tensors.update(self.opt_d.state_tensors("opt.disc."))
        return Checkpoint(tensors, self.phase, self.fingerprint, epoch)


# ------------------------------------------------------------------ inference
def generator_from_checkpoint(ckpt: Checkpoint, cfg: ModelConfig) -> Generator:
    """Rebuild a generator (with or without transformers) and load its weights."""
    fp = config_fingerprint(cfg)
    if ckpt.fingerprint != fp:
        raise ConfigError(f"checkpoint fingerprint {ckpt.fingerprint:016x} does not match "
                          f"config fingerprint {fp:016x}")
    gen_tensors = ckpt.subset("gen.")
    with_t = any(".transformer." in k for k in gen_tensors)
    gen = Generator(cfg, np.random.default_rng(0), with_transformers=with_t)
    gen.load_state_dict(gen_tensors, prefix="gen.")
    return gen.eval()


def synthesize(generator: Generator, images: np.ndarray, task: TaskConfig,
               batch_size: int = 4) -> np.ndarray:
    """Mask ``images`` (N, I, H, W) for ``task`` and run the generator."""
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = mask_inputs(images[start:start + batch_size], task)
            out.append(generator(Tensor(x.astype(np.float32))).data)
    return np.concatenate(out) if out else np.zeros_like(images)
