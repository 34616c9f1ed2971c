"""
A short unified training run
============================

Two epochs at tiny widths: one conv-only epoch, then transformers are
inserted into the first and last ART blocks.  One checkpoint then serves
every leave-one-out task, and the first transformer's attention rollout
is written as a graymap.  The same steps are available from the shell as
``resvit train``, ``resvit infer`` and ``resvit rollout``.
"""

import tempfile
from pathlib import Path

import numpy as np

from resvit.cli import write_pgm
from resvit.data import generate_phantom_dataset, mask_inputs
from resvit.metrics import psnr
from resvit.tensor import Tensor, no_grad
from resvit.trainer import TrainConfig, Trainer, generator_from_checkpoint, synthesize
from resvit.vit import attention_rollout

out = Path(tempfile.mkdtemp())
ds = generate_phantom_dataset(out / "data", seed=1, subjects=6, slices=4, height=80)

cfg = TrainConfig.from_dict(dict(
    modalities=3, image_size=80, base_channels=4, art_blocks=3, transformer_positions=[1, 3],
    transformer_preset="custom", transformer_layers=1, embed_dim=8, heads=2, mlp_hidden=16,
    disc_channels=4, phase1_epochs=1, phase2_epochs=1, batch_size=2, checkpoint_every=1))
trainer = Trainer(cfg, ds, log_path=out / "loss_log.csv")
for ckpt in trainer.run():
    print(f"epoch {ckpt.epoch} phase {ckpt.phase}: {len(ckpt.tensors)} tensors, "
          f"L_pix {trainer.epoch_mean('pix', ckpt.epoch):.3f}")

gen = generator_from_checkpoint(ckpt, cfg.model)
images, refs = ds.arrays("test")
for task in trainer.tasks:
    (t,) = task.targets
    syn = synthesize(gen, images, task)
    score = np.mean([psnr((a + 1) / 2, (b + 1) / 2) for a, b in zip(images[:, t], syn[:, t])])
    print(f"{task.name:<10s} PSNR {score:.2f} dB after two epochs")

records = {}
with no_grad():
    gen(Tensor(mask_inputs(images[:1], trainer.tasks[0])), records)
grid = attention_rollout(records[gen.retaining_blocks[0]])
write_pgm(out / "rollout.pgm", (grid - grid.min()) / max(np.ptp(grid), 1e-12))
print("rollout grid", grid.shape, "->", out / "rollout.pgm")
