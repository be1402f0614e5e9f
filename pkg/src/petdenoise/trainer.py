"""Generator pretraining, parameter transfer, the WGAN-GP loop, PTWG
checkpoints and sliding-window inference."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, adam_step, backward, no_grad
from .autodiff.optim import AdamState
from .data import PATCH_SIZE, PatchSampler, Volume, splitmix64
from .losses import (
    LossWeights,
    RandomConvExtractor,
    discriminator_objective,
    generator_loss,
    mse_loss,
    perceptual_loss,
    ssim_loss,
)
from .models import (
    DEPTH_WINDOW,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    Model,
    build_discriminator,
    build_generator,
)

log = logging.getLogger(__name__)

PRETRAIN_LOSSES = ("mse", "ssim", "perceptual")
SCRATCH_LR = 1e-4
TRANSFER_LR = 1e-5
PAPER_BATCH = 80
PAPER_PATCHES = 169_000


# -- configuration ---------------------------------------------------------------


@dataclass
class AdamConfig:
    lr: float = SCRATCH_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    """Settings for one training phase.

    ``init`` is ``"xavier"`` or ``"checkpoint"``. When ``adam`` is left
    unset the learning rate follows the initialization: ``1e-4`` from
    scratch and ``1e-5`` for a transferred generator. ``steps_per_epoch``
    counts generator updates.
    """

    phase: str = "pretrain"
    pretrain_loss: str = "mse"
    init: str = "xavier"
    adam: Optional[AdamConfig] = None
    batch_size: int = 8
    epochs: int = 1
    steps_per_epoch: int = 100
    d_steps_per_g_step: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    deterministic: bool = True
    patch_size: Tuple[int, int, int] = PATCH_SIZE
    variant: str = "hybrid"

    def __post_init__(self):
        if self.phase not in ("pretrain", "wgan"):
            raise ValueError(f"phase must be 'pretrain' or 'wgan', got {self.phase!r}")
        if self.pretrain_loss not in PRETRAIN_LOSSES:
            raise ValueError(f"pretrain_loss must be one of {PRETRAIN_LOSSES}, got {self.pretrain_loss!r}")
        if self.init not in ("xavier", "checkpoint"):
            raise ValueError(f"init must be 'xavier' or 'checkpoint', got {self.init!r}")
        if self.adam is None:
            self.adam = AdamConfig(lr=TRANSFER_LR if self.init == "checkpoint" else SCRATCH_LR)
        if not self.adam.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.adam.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.d_steps_per_g_step < 1:
            raise ValueError(f"d_steps_per_g_step must be >= 1, got {self.d_steps_per_g_step}")
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValueError(f"need epochs >= 0 and steps_per_epoch >= 1, got {self.epochs}, {self.steps_per_epoch}")
        self.patch_size = tuple(int(s) for s in self.patch_size)
        if self.patch_size[0] != DEPTH_WINDOW:
            raise ValueError(f"patch depth must be {DEPTH_WINDOW}, got {self.patch_size[0]}")

    @classmethod
    def paper_scale(cls, phase: str = "pretrain", init: str = "xavier", **overrides) -> "TrainConfig":
        """Batch 80, 169K patches per epoch, and 30 pretraining, 40 direct or
        10 transfer epochs."""
        if phase == "pretrain":
            epochs = 30
        else:
            epochs = 10 if init == "checkpoint" else 40
        kw = dict(
            phase=phase,
            init=init,
            batch_size=PAPER_BATCH,
            epochs=epochs,
            steps_per_epoch=PAPER_PATCHES // PAPER_BATCH,
        )
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_size"] = list(self.patch_size)
        d["weights"]["lambda_m"] = _json_float(self.weights.lambda_m)
        return d


# -- log -------------------------------------------------------------------------


@dataclass
class TrainLog:
    """Per-update records plus bookkeeping.

    Each record is ``{"step", "kind", "loss"}`` with ``kind`` one of
    ``"pretrain"``, ``"d"`` or ``"g"``; critic records also carry
    ``"wasserstein"`` and ``"penalty"``. ``validation`` holds
    ``(g_step, mse)`` pairs measured on a fixed batch.
    """

    records: List[dict] = field(default_factory=list)
    validation: List[Tuple[int, float]] = field(default_factory=list)
    epoch_seconds: List[float] = field(default_factory=list)
    diverged: bool = False
    g_updates: int = 0
    d_updates: int = 0

    def add(self, kind: str, loss: float, **extra) -> None:
        self.records.append({"step": len(self.records), "kind": kind, "loss": float(loss), **extra})

    def losses(self, kind: str) -> np.ndarray:
        return np.array([r["loss"] for r in self.records if r["kind"] == kind])

    def schedule_ok(self, ratio: int = 4) -> bool:
        g = sum(r["kind"] == "g" for r in self.records)
        d = sum(r["kind"] == "d" for r in self.records)
        return g == self.g_updates and d == self.d_updates and abs(d - ratio * g) <= ratio

    def to_dict(self, timing: bool = True) -> dict:
        d = {
            "records": self.records,
            "validation": [list(v) for v in self.validation],
            "diverged": self.diverged,
            "g_updates": self.g_updates,
            "d_updates": self.d_updates,
        }
        if timing:
            d["epoch_seconds"] = self.epoch_seconds
        return d


# -- checkpoints -------------------------------------------------------------------

PTWG_MAGIC = b"PTWG"
PTWG_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Ordered named float32 parameters of one model plus a JSON-able
    provenance dict (kind, architecture config, phase, loss, epochs, seed,
    intensity scale)."""

    params: List[Tuple[str, np.ndarray]]
    provenance: dict = field(default_factory=dict)
    version: int = PTWG_VERSION

    @property
    def kind(self) -> str:
        return self.provenance.get("kind", "generator")

    def arrays(self) -> dict:
        return dict(self.params)


def snapshot(model: Model, **provenance) -> Checkpoint:
    prov = {"kind": model.kind, "config": model.config.to_dict()}
    prov.update(provenance)
    params = [(name, np.array(p.data, dtype=np.float32, copy=True)) for name, p in model.named_parameters()]
    return Checkpoint(params, prov)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    out = [PTWG_MAGIC, struct.pack("<II", ckpt.version, len(ckpt.params))]
    for name, arr in ckpt.params:
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = json.dumps(ckpt.provenance, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes, source: str):
        self.blob, self.pos, self.source = blob, 0, source

    def take(self, n: int, what: str) -> bytes:
        have = len(self.blob) - self.pos
        if n > have:
            raise CheckpointFormatError(
                f"{self.source}: truncated {what} at offset {self.pos}: expected {n} bytes, "
                f"got {have} (file length {len(self.blob)})"
            )
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(blob, source)
    magic = r.take(4, "magic")
    if magic != PTWG_MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {magic!r} at offset 0, expected {PTWG_MAGIC!r}")
    version, count = r.unpack("<II", "header")
    if version != PTWG_VERSION:
        raise CheckpointFormatError(
            f"{source}: unsupported PTWG version {version} at offset 4 (reader handles {PTWG_VERSION})"
        )
    params = []
    for i in range(count):
        (nlen,) = r.unpack("<H", f"name length of parameter {i}")
        at = r.pos
        try:
            name = r.take(nlen, f"name of parameter {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{source}: parameter {i} name at offset {at} is not UTF-8") from exc
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}I", f"dims of {name!r}")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(r.take(4 * n, f"values of {name!r}"), dtype="<f4").astype(np.float32)
        params.append((name, data.reshape(dims)))
    (plen,) = r.unpack("<I", "provenance length")
    at = r.pos
    try:
        prov = json.loads(r.take(plen, "provenance").decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointFormatError(f"{source}: corrupt provenance JSON at offset {at}: {exc}") from exc
    if r.pos != len(blob):
        raise CheckpointFormatError(
            f"{source}: {len(blob) - r.pos} trailing bytes after offset {r.pos}, expected length {r.pos}"
        )
    return Checkpoint(params, prov, version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


def init_from_checkpoint(gen: Model, ckpt: Checkpoint) -> Model:
    """Overwrite `gen`'s parameters with the checkpoint's, bit for bit.

    Raises ``ValueError`` naming the first parameter whose name or shape
    differs.
    """
    if ckpt.kind != gen.kind:
        raise ValueError(f"checkpoint holds a {ckpt.kind}, target is a {gen.kind}")
    gen.load_arrays(ckpt.params)
    return gen


def generator_from_checkpoint(ckpt: Checkpoint) -> Generator:
    if ckpt.kind != "generator":
        raise ValueError(f"checkpoint holds a {ckpt.kind}, not a generator")
    config = GeneratorConfig.from_dict(ckpt.provenance.get("config", {}))
    return build_generator(config, init="from_checkpoint", checkpoint=ckpt)


# -- helpers -----------------------------------------------------------------------


@contextlib.contextmanager
def deterministic_threads(enabled: bool = True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


@contextlib.contextmanager
def frozen(model: Model):
    """Stop gradients into `model`'s parameters for the duration."""
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad = False
    try:
        yield model
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad = f


def _finite_grads(grads) -> bool:
    return all(np.isfinite(g).all() for g in grads.values())


def _adam_state(cfg: AdamConfig) -> AdamState:
    return AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)


def _pretrain_objective(name: str) -> Callable:
    if name == "mse":
        return mse_loss
    if name == "ssim":
        return ssim_loss
    extractor = RandomConvExtractor(seed=0)
    return lambda a, b: perceptual_loss(a, b, extractor)


def validation_batch(dataset, size=PATCH_SIZE, count: int = 8, seed: int = 0):
    """A fixed ``(low, normal)`` batch for tracking progress."""
    return PatchSampler(dataset.pairs, size, seed).batch(count)


def validation_mse(gen: Generator, batch) -> float:
    low, normal = batch
    with no_grad():
        return mse_loss(gen(Tensor(low)), Tensor(normal)).item()


def _initial_generator(config: TrainConfig, init_ckpt: Optional[Checkpoint]) -> Generator:
    if config.init == "checkpoint":
        if init_ckpt is None:
            raise ValueError("init='checkpoint' needs a checkpoint")
        gen = generator_from_checkpoint(init_ckpt)
        if gen.config.variant != config.variant:
            raise ValueError(f"checkpoint variant {gen.config.variant!r} differs from config {config.variant!r}")
        return gen
    return build_generator(GeneratorConfig(config.variant), seed=splitmix64(config.seed, 0))


def _provenance(config: TrainConfig, dataset, epochs_done: int, **extra) -> dict:
    prov = {
        "phase": config.phase,
        "loss": config.pretrain_loss if config.phase == "pretrain" else "wgan",
        "epochs": epochs_done,
        "seed": config.seed,
        "intensity_scale": float(getattr(dataset, "scale", 1.0)),
        "train_config": config.to_dict(),
    }
    prov.update(extra)
    return prov


# -- pretraining ---------------------------------------------------------------------


def pretrain_generator(
    config: TrainConfig,
    dataset,
    init_ckpt: Optional[Checkpoint] = None,
    validation=None,
    on_epoch: Optional[Callable[[int, Checkpoint], None]] = None,
) -> Tuple[Checkpoint, TrainLog]:
    """Train the generator alone on MSE, SSIM or perceptual loss.

    `dataset` needs ``pairs`` (normalized ``(low, normal)`` volumes) and
    ``scale``. Returns the final checkpoint, or the last epoch-boundary
    checkpoint if a loss turns non-finite.
    """
    if config.phase != "pretrain":
        raise ValueError(f"pretrain_generator needs phase 'pretrain', got {config.phase!r}")
    if not getattr(dataset, "pairs", None):
        raise ValueError("dataset is empty")
    objective = _pretrain_objective(config.pretrain_loss)
    tlog = TrainLog()
    with deterministic_threads(config.deterministic):
        gen = _initial_generator(config, init_ckpt)
        sampler = PatchSampler(dataset.pairs, config.patch_size, splitmix64(config.seed, 1))
        state = _adam_state(config.adam)
        params = gen.parameters()
        last = snapshot(gen, **_provenance(config, dataset, 0))
        if validation is not None:
            tlog.validation.append((0, validation_mse(gen, validation)))
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            for _ in range(config.steps_per_epoch):
                low, normal = sampler.batch(config.batch_size)
                loss = objective(gen(Tensor(low)), Tensor(normal))
                value = loss.item()
                grads = backward(loss, params)
                if not (math.isfinite(value) and _finite_grads(grads)):
                    tlog.diverged = True
                    log.warning("pretraining diverged at update %d", tlog.g_updates)
                    return last, tlog
                adam_step(params, grads, state)
                tlog.g_updates += 1
                tlog.add("pretrain", value)
            tlog.epoch_seconds.append(time.perf_counter() - t0)
            if validation is not None:
                tlog.validation.append((tlog.g_updates, validation_mse(gen, validation)))
            last = snapshot(gen, **_provenance(config, dataset, epoch))
            log.info("pretrain epoch %d: loss %.6g", epoch, tlog.records[-1]["loss"])
            if on_epoch is not None:
                on_epoch(epoch, last)
    return last, tlog


# -- WGAN ---------------------------------------------------------------------------


def train_wgan(
    config: TrainConfig,
    dataset,
    g_init: Optional[Checkpoint] = None,
    d_init: Optional[Checkpoint] = None,
    validation=None,
    on_epoch: Optional[Callable[[int, Checkpoint], None]] = None,
) -> Tuple[Checkpoint, TrainLog]:
    """Alternate ``d_steps_per_g_step`` critic updates with one generator
    update.

    Every critic update draws its own batch and runs the generator without
    recording a graph. Generator and critic keep separate Adam states. The
    critic starts from Xavier weights unless `d_init` is given. With
    ``lambda_m = inf`` the generator objective ignores the critic, so
    critic updates are skipped.
    """
    if config.phase != "wgan":
        raise ValueError(f"train_wgan needs phase 'wgan', got {config.phase!r}")
    if not getattr(dataset, "pairs", None):
        raise ValueError("dataset is empty")
    weights = config.weights
    mse_only = math.isinf(weights.lambda_m)
    tlog = TrainLog()
    with deterministic_threads(config.deterministic):
        gen = _initial_generator(config, g_init)
        dcfg = DiscriminatorConfig(input_shape=config.patch_size)
        disc = build_discriminator(dcfg, seed=splitmix64(config.seed, 2))
        if d_init is not None:
            init_from_checkpoint(disc, d_init)
        sampler = PatchSampler(dataset.pairs, config.patch_size, splitmix64(config.seed, 1))
        eps_rng = np.random.default_rng(splitmix64(config.seed, 3))
        g_state, d_state = _adam_state(config.adam), _adam_state(config.adam)
        g_params, d_params = gen.parameters(), disc.parameters()
        extra = {"lambda_m": _json_float(weights.lambda_m), "lambda_gp": weights.lambda_gp}
        if g_init is not None:
            extra["init_from"] = g_init.provenance.get("loss")
        last = snapshot(gen, **_provenance(config, dataset, 0, **extra))
        if validation is not None:
            tlog.validation.append((0, validation_mse(gen, validation)))

        def fail(what):
            tlog.diverged = True
            log.warning("WGAN training diverged in %s update", what)
            return last, tlog

        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            for _ in range(config.steps_per_epoch):
                for _ in range(0 if mse_only else config.d_steps_per_g_step):
                    low, normal = sampler.batch(config.batch_size)
                    with no_grad():
                        fake = gen(Tensor(low))
                    loss, wdist, pen = discriminator_objective(disc, fake, Tensor(normal), weights, eps_rng)
                    value = loss.item()
                    grads = backward(loss, d_params)
                    if not (math.isfinite(value) and _finite_grads(grads)):
                        return fail("critic")
                    adam_step(d_params, grads, d_state)
                    tlog.d_updates += 1
                    tlog.add("d", value, wasserstein=wdist, penalty=pen)
                low, normal = sampler.batch(config.batch_size)
                with frozen(disc):
                    loss = generator_loss(disc, gen(Tensor(low)), Tensor(normal), weights)
                    value = loss.item()
                    grads = backward(loss, g_params)
                if not (math.isfinite(value) and _finite_grads(grads)):
                    return fail("generator")
                adam_step(g_params, grads, g_state)
                tlog.g_updates += 1
                tlog.add("g", value)
            tlog.epoch_seconds.append(time.perf_counter() - t0)
            if validation is not None:
                tlog.validation.append((tlog.g_updates, validation_mse(gen, validation)))
            last = snapshot(gen, **_provenance(config, dataset, epoch, **extra))
            log.info("wgan epoch %d: g loss %.6g", epoch, tlog.records[-1]["loss"])
            if on_epoch is not None:
                on_epoch(epoch, last)
    return last, tlog


def _json_float(x: float):
    return x if math.isfinite(x) else str(x)


# -- inference ----------------------------------------------------------------------


def _starts(n: int, window: int, step: int) -> List[int]:
    out = list(range(0, n - window + 1, step))
    if out[-1] != n - window:
        out.append(n - window)
    return out


def denoise_volume(
    gen: Generator,
    volume: Volume,
    stride_z: int = 1,
    spatial_tile: Optional[Sequence[int]] = None,
    overlap: int = 8,
    batch_size: int = 1,
) -> Volume:
    """Apply `gen` to a whole normalized volume.

    Depth-9 windows start every `stride_z` slices, with a final window
    flush against the last slice. With `spatial_tile` set, each window is
    cut into ``(h, w)`` tiles overlapping by at least `overlap` voxels.
    Overlapping predictions are averaged with equal weights.
    """
    data = np.asarray(volume.data, dtype=np.float32)
    depth, height, width = data.shape
    if depth < DEPTH_WINDOW:
        raise ValueError(f"volume depth {depth} is below the {DEPTH_WINDOW}-slice window")
    if stride_z < 1:
        raise ValueError(f"stride_z must be >= 1, got {stride_z}")
    th, tw = (height, width) if spatial_tile is None else (min(spatial_tile[0], height), min(spatial_tile[1], width))
    if spatial_tile is not None and (th < height and th <= overlap or tw < width and tw <= overlap):
        raise ValueError(f"tile {spatial_tile} must exceed the {overlap}-voxel overlap")
    ys = _starts(height, th, max(th - overlap, 1) if th < height else th)
    xs = _starts(width, tw, max(tw - overlap, 1) if tw < width else tw)
    boxes = [(z, y, x) for z in _starts(depth, DEPTH_WINDOW, stride_z) for y in ys for x in xs]

    acc = np.zeros(data.shape, dtype=np.float64)
    count = np.zeros(data.shape, dtype=np.float64)
    with no_grad():
        for i in range(0, len(boxes), batch_size):
            chunk = boxes[i:i + batch_size]
            batch = np.stack([data[z:z + DEPTH_WINDOW, y:y + th, x:x + tw] for z, y, x in chunk])[:, None]
            out = gen(Tensor(batch)).data
            for (z, y, x), o in zip(chunk, out):
                acc[z:z + DEPTH_WINDOW, y:y + th, x:x + tw] += o[0]
                count[z:z + DEPTH_WINDOW, y:y + th, x:x + tw] += 1.0
    prov = dict(volume.provenance)
    prov["denoised"] = {"stride_z": stride_z, "spatial_tile": list(spatial_tile) if spatial_tile else None}
    return Volume((acc / count).astype(np.float32), volume.spacing, volume.intensity_scale, prov)
