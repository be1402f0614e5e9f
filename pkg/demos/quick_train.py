"""Pretrain a small generator, transfer it into WGAN training, and denoise.

A desk-sized run of a few minutes on one core. Use the CLI with
``--paper-scale`` for the full training budget.
"""

import time

from petdenoise.data import PhantomSpec, build_dataset, make_pair, normalize_pair, splitmix64
from petdenoise.metrics import evaluate_volume, format_table
from petdenoise.trainer import (
    TrainConfig,
    denoise_volume,
    generator_from_checkpoint,
    pretrain_generator,
    train_wgan,
    validation_batch,
)

SEED = 5
PATCH = (9, 16, 16)
spec = PhantomSpec(dims=(16, 64, 64))
train = [make_pair(spec, splitmix64(SEED, i), sensitivity=1.0) for i in range(3)]
low, normal = make_pair(spec, splitmix64(SEED + 1, 0), sensitivity=1.0)

ds = build_dataset(train)
low, normal = normalize_pair(low, normal, ds.scale)
vbatch = validation_batch(ds, PATCH, count=4, seed=1)
common = dict(batch_size=4, steps_per_epoch=25, patch_size=PATCH, seed=SEED)

t0 = time.perf_counter()
pre, pre_log = pretrain_generator(TrainConfig(phase="pretrain", epochs=2, **common), ds, validation=vbatch)
print(f"pretrain: {pre_log.g_updates} updates in {time.perf_counter() - t0:.0f} s, "
      f"validation MSE {pre_log.validation[0][1]:.4g} -> {pre_log.validation[-1][1]:.4g}")

t0 = time.perf_counter()
cfg = TrainConfig(phase="wgan", init="checkpoint", epochs=1, **common)
post, wgan_log = train_wgan(cfg, ds, g_init=pre, validation=vbatch)
print(f"wgan: {wgan_log.d_updates} critic and {wgan_log.g_updates} generator updates "
      f"in {time.perf_counter() - t0:.0f} s")

rows = [("low dose", evaluate_volume(normal, low))]
for name, ckpt in (("pretrained", pre), ("wgan", post)):
    rows.append((name, evaluate_volume(normal, denoise_volume(generator_from_checkpoint(ckpt), low))))
print()
print(format_table(rows))
