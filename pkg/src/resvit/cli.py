"""Command-line entry point: ``resvit <command> [options]``.

Commands
--------
phantom    write a procedural multi-modality dataset
train      two-phase training from a flat JSON config
infer      synthesise target modalities for the test split
eval       PSNR / SSIM / Frechet report for a synthesised tree
rollout    attention-rollout map of one slice as a P5 graymap
gradcheck  finite-difference check of primitives and a toy model

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric error.
``RESVIT_THREADS`` caps BLAS worker threads.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import functional as F
from .checkpoint import read_checkpoint, write_checkpoint
from .data import (TaskConfig, denormalize_intensity, generate_phantom_dataset,
                   leave_one_out_tasks, load_dataset, mask_inputs, write_manifest, write_slice)
from .errors import ConfigError, ContractError, DataError, ResViTError
from .gradcheck import MODEL_TOL, PRIMITIVE_TOL, primitive_suite, toy_model_check
from .metrics import evaluate_datasets
from .tensor import Tensor, no_grad
from .trainer import VARIANTS, TrainConfig, Trainer, generator_from_checkpoint, synthesize
from .vit import attention_rollout

log = logging.getLogger("resvit")

CONFIG_NAME = "config.json"
LOG_NAME = "loss_log.csv"
FINAL_NAME = "final.rvck"


# ------------------------------------------------------------------ helpers
def _thread_limit():
    value = os.environ.get("RESVIT_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"RESVIT_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("RESVIT_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _load_run_config(checkpoint: Path, config: Optional[Path]) -> TrainConfig:
    path = config or checkpoint.parent / CONFIG_NAME
    if not path.is_file():
        raise ConfigError(f"{path}: no training config next to the checkpoint; pass --config")
    return TrainConfig.load(path)


def _load_generator(checkpoint: Path, config: Optional[Path]):
    run = _load_run_config(checkpoint, config)
    ckpt = read_checkpoint(checkpoint)
    return generator_from_checkpoint(ckpt, run.model), run


def write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary graymap from values in [0, 1], row-major."""
    pixels = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def _parse_slice(text: Optional[str], refs):
    """``SUBJECT:INDEX`` or a position in the list of test slices."""
    if text is None:
        return refs[0]
    if ":" in text:
        subject, _, idx = text.partition(":")
        for r in refs:
            if r.subject == subject and str(r.index) == idx:
                return r
        raise DataError(f"slice {text!r} not found among the test slices")
    try:
        return refs[int(text)]
    except (ValueError, IndexError):
        raise ConfigError(f"--slice must be SUBJECT:INDEX or 0..{len(refs) - 1}") from None


# ----------------------------------------------------------------- commands
def cmd_phantom(args) -> int:
    ds = generate_phantom_dataset(args.out, seed=args.seed, subjects=args.subjects,
                                  slices=args.slices, height=args.size)
    print(f"wrote {len(ds)} slices x {len(ds.modalities)} modalities to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = TrainConfig.load(args.config, variant=args.variant)
    if args.seed is not None:
        run.plan.seed = args.seed
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.dump(out / CONFIG_NAME)
    init = read_checkpoint(args.init_transformers) if args.init_transformers else None
    trainer = Trainer(run, ds, transformer_init=init, log_path=out / LOG_NAME)
    last = None
    for ckpt in trainer.run():
        last = out / f"ckpt_e{ckpt.epoch:03d}_p{ckpt.phase}.rvck"
        write_checkpoint(last, ckpt)
        log.info("wrote %s", last)
    shutil.copyfile(last, out / FINAL_NAME)
    print(f"trained {run.plan.total_epochs} epochs ({run.variant}); checkpoint {out / FINAL_NAME}")
    return 0


def cmd_infer(args) -> int:
    checkpoint = Path(args.checkpoint)
    gen, _ = _load_generator(checkpoint, args.config)
    ds = load_dataset(args.data)
    task = TaskConfig.parse(args.task, ds.modalities)
    images, refs = ds.arrays(args.split)
    if not refs:
        raise DataError(f"{ds.root}: no slices in split {args.split!r}")
    syn = synthesize(gen, images, task)
    out = Path(args.out)
    subjects = {}
    for img, ref in zip(syn, refs):
        peaks = ds.subject_peak(ref.subject)
        (out / ref.subject).mkdir(parents=True, exist_ok=True)
        files: List[Optional[str]] = [None] * len(ds.modalities)
        for t in task.targets:
            rel = f"{ref.subject}/{ref.index:03d}_{ds.modalities[t]}.mms"
            write_slice(out / rel, denormalize_intensity(img[t], peaks[t]))
            files[t] = rel
        entry = subjects.setdefault(ref.subject, dict(id=ref.subject, split=ref.split, slices=[]))
        entry["slices"].append(dict(index=ref.index, files=files, max=list(ref.peaks)))
    manifest = dict(modalities=list(ds.modalities), task=task.name, split=args.split,
                    subjects=list(subjects.values()))
    if ds.shape is not None:
        manifest["shape"] = list(ds.shape)
    write_manifest(out, manifest)
    print(f"synthesised {len(refs) * len(task.targets)} slices for {task.name} into {out}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_datasets(load_dataset(args.ref), load_dataset(args.syn), args.split)
    report.write(args.out)
    for row in report.summary():
        print(f"{row['task']}: PSNR {row['mean_psnr']:.2f}+-{row['std_psnr']:.2f} dB, "
              f"SSIM {row['mean_ssim']:.4f}+-{row['std_ssim']:.4f}, FID {row['fid']:.4g}")
    return 0


def cmd_rollout(args) -> int:
    checkpoint = Path(args.checkpoint)
    gen, _ = _load_generator(checkpoint, args.config)
    retaining = gen.retaining_blocks
    block = retaining[0] if args.block is None and retaining else args.block
    if block not in retaining:
        raise ContractError(f"block {block} has no transformer; retaining blocks: {retaining}")
    ds = load_dataset(args.data)
    refs = ds.slices("test") or ds.slices()
    ref = _parse_slice(args.slice, refs)
    task = (TaskConfig.parse(args.task, ds.modalities) if args.task
            else leave_one_out_tasks(ds.modalities)[0])
    x = mask_inputs(ds.read(ref).images[None], task)
    records = {}
    with no_grad():
        gen(Tensor(x), records)
    grid = attention_rollout(records[block])
    h, w = x.shape[-2:]
    up = F.bilinear_matrix(grid.shape[0], h) @ grid @ F.bilinear_matrix(grid.shape[1], w).T
    lo, hi = up.min(), up.max()
    up = np.zeros_like(up) if hi - lo <= 1e-12 else (up - lo) / (hi - lo)
    write_pgm(Path(args.out), up)
    print(f"rollout of block {block} for {ref.subject}:{ref.index} -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    failed = 0
    for name, err in primitive_suite(args.seed):
        ok = err < PRIMITIVE_TOL
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name:<22s} {err:.2e} (< {PRIMITIVE_TOL:g})")
    if args.size == "toy":
        err = toy_model_check(args.seed)
        ok = err < MODEL_TOL
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {'toy_generator_critic':<22s} {err:.2e} (< {MODEL_TOL:g})")
    print("gradcheck", "failed" if failed else "passed")
    return 1 if failed else 0


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="resvit", description="ResViT-style synthesis on numpy")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int, default=12)
    s.add_argument("--slices", type=int, default=16)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=sorted(VARIANTS))
    s.add_argument("--seed", type=int)
    s.add_argument("--init-transformers", help="checkpoint holding transformer weights to import")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="synthesise targets for one task")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--task", required=True, help='e.g. "T1+T2->PD"')
    s.add_argument("--out", required=True)
    s.add_argument("--config", type=Path, help="defaults to config.json beside the checkpoint")
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score a synthesised tree")
    s.add_argument("--ref", required=True)
    s.add_argument("--syn", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rollout", help="export an attention-rollout map")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--slice", help="SUBJECT:INDEX or position among test slices")
    s.add_argument("--block", type=int, help="defaults to the first transformer block")
    s.add_argument("--task", help="defaults to the first leave-one-out task")
    s.add_argument("--config", type=Path)
    s.set_defaults(func=cmd_rollout)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--size", choices=("primitives", "toy"), default="toy")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ResViTError as exc:
        print(f"resvit {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
