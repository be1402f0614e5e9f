"""Hybrid 2D/3D generator, its pure-2D / pure-3D ablations, and the 3D critic.

The generator works on ``[B, 1, 9, H, W]`` windows. In the hybrid variant
the outer four layers are 3-D and zero padded, the inner six run on each
axial slice in 2-D without padding. Splitting the 9 slices and running the
same 2-D layer on each one is computed by folding depth into the batch axis;
:func:`split_z` / :func:`concat_z` give the literal form.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, conv_forward, deconv_forward, dense_forward, leaky_relu, relu, stack
from .autodiff.engine import add, reshape, transpose

DEPTH_WINDOW = 9
MIN_EXTENT = 7

DEFAULT_SKIPS = ((0, 10), (2, 8), (4, 6))
FULL_SKIPS = ((0, 10), (1, 9), (2, 8), (3, 7), (4, 6))

VARIANTS = ("hybrid", "pure2d", "pure3d")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" | "deconv"
    dims: int
    in_ch: int
    out_ch: int
    padding: str  # "zero" | "none"
    kernel: int = 3

    @property
    def weight_shape(self) -> tuple:
        k = (self.kernel,) * self.dims
        if self.kind == "conv":
            return (self.out_ch, self.in_ch) + k
        return (self.in_ch, self.out_ch) + k


@dataclass
class GeneratorConfig:
    variant: str = "hybrid"
    channels: Optional[int] = None
    depth_window: int = DEPTH_WINDOW
    kernel: int = 3
    skip_plan: Sequence[Tuple[int, int]] = DEFAULT_SKIPS

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.channels is None:
            self.channels = 48 if self.variant == "pure2d" else 32
        if self.depth_window != DEPTH_WINDOW:
            raise ValueError(f"depth_window is fixed at {DEPTH_WINDOW}, got {self.depth_window}")
        if self.kernel != 3:
            raise ValueError("only 3-voxel kernels are supported")
        self.skip_plan = tuple((int(s), int(t)) for s, t in self.skip_plan)

    def layers(self) -> List[LayerSpec]:
        c = self.channels
        outer = 2 if self.variant == "pure2d" else 3
        inner = 3 if self.variant == "pure3d" else 2
        return [
            LayerSpec("L1", "conv", outer, 1, c, "zero"),
            LayerSpec("L2", "conv", outer, c, c, "zero"),
            LayerSpec("L3", "conv", inner, c, c, "none"),
            LayerSpec("L4", "conv", inner, c, c, "none"),
            LayerSpec("L5", "conv", inner, c, c, "none"),
            LayerSpec("L6", "deconv", inner, c, c, "none"),
            LayerSpec("L7", "deconv", inner, c, c, "none"),
            LayerSpec("L8", "deconv", inner, c, c, "none"),
            LayerSpec("L9", "deconv", outer, c, c, "zero"),
            LayerSpec("L10", "deconv", outer, c, 1, "zero"),
        ]

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "channels": self.channels,
            "depth_window": self.depth_window,
            "kernel": self.kernel,
            "skip_plan": [list(p) for p in self.skip_plan],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        d["skip_plan"] = tuple(tuple(p) for p in d.get("skip_plan", DEFAULT_SKIPS))
        return cls(**d)


def layer_shapes(config: GeneratorConfig, height: int = 64, width: int = 64) -> List[tuple]:
    """Output shape ``(C, D, H, W)`` of every layer; index 0 is the input."""
    shapes = [(1, config.depth_window, height, width)]
    for spec in config.layers():
        c, d, h, w = shapes[-1]
        grow = 0 if spec.padding == "zero" else (spec.kernel - 1) * (1 if spec.kind == "deconv" else -1)
        if spec.dims == 3:
            d = d + grow
        shapes.append((spec.out_ch, d, h + grow, w + grow))
    return shapes


def _check_skips(config: GeneratorConfig) -> None:
    shapes = layer_shapes(config)
    seen_targets = set()
    for src, dst in config.skip_plan:
        if not (0 <= src < dst <= 10):
            raise ValueError(f"skip ({src} -> {dst}) must satisfy 0 <= source < target <= 10")
        if dst in seen_targets:
            raise ValueError(f"layer {dst} is the target of more than one skip")
        seen_targets.add(dst)
        if shapes[src] != shapes[dst]:
            raise ValueError(
                f"skip ({src} -> {dst}) joins mismatched shapes: source {shapes[src]} vs target {shapes[dst]}"
            )


def xavier_uniform(shape: tuple, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Model:
    """Ordered collection of named parameters."""

    kind = "model"

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True, name=name)

    def load_arrays(self, named: Sequence[Tuple[str, np.ndarray]]) -> None:
        """Copy ``(name, array)`` pairs into the parameters; names, order and
        shapes must match exactly."""
        named = list(named)
        mine = self.named_parameters()
        if len(named) != len(mine):
            raise ValueError(f"expected {len(mine)} parameters, got {len(named)}")
        for (name, arr), (own, p) in zip(named, mine):
            arr = np.asarray(arr)
            if name != own:
                raise ValueError(f"parameter name mismatch: expected {own!r}, got {name!r}")
            if arr.shape != p.shape:
                raise ValueError(f"parameter {own!r}: expected shape {p.shape}, got {arr.shape}")
        for (name, arr), (_, p) in zip(named, mine):
            p.data = np.array(arr, dtype=np.float32, copy=True)


def count_parameters(model: Model) -> int:
    return int(sum(p.size for p in model.parameters()))


# -- generator ---------------------------------------------------------------


class Generator(Model):
    kind = "generator"

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        self.specs = config.layers()

    def __call__(self, batch: Tensor) -> Tensor:
        return generator_forward(self, batch)


def build_generator(
    config: Optional[GeneratorConfig] = None,
    init: str = "xavier",
    seed: int = 0,
    checkpoint=None,
) -> Generator:
    """Construct a generator.

    ``init='xavier'`` draws uniform Xavier kernels from `seed` with zero
    biases; ``init='from_checkpoint'`` copies `checkpoint`'s parameters.
    """
    config = config or GeneratorConfig()
    _check_skips(config)
    gen = Generator(config)
    rng = np.random.default_rng(seed)
    for spec in gen.specs:
        rf = spec.kernel**spec.dims
        w = xavier_uniform(spec.weight_shape, spec.in_ch * rf, spec.out_ch * rf, rng)
        gen._add(f"{spec.name}.weight", w)
        gen._add(f"{spec.name}.bias", np.zeros(spec.out_ch, dtype=np.float32))
    if init == "from_checkpoint":
        if checkpoint is None:
            raise ValueError("init='from_checkpoint' needs a checkpoint")
        from .trainer import init_from_checkpoint

        init_from_checkpoint(gen, checkpoint)
    elif init != "xavier":
        raise ValueError(f"init must be 'xavier' or 'from_checkpoint', got {init!r}")
    return gen


def split_z(x: Tensor) -> List[Tensor]:
    """Split ``[B, C, 9, H, W]`` into nine ``[B, C, H, W]`` slices."""
    if x.ndim != 5 or x.shape[2] != DEPTH_WINDOW:
        raise ValueError(f"split_z expects [B, C, {DEPTH_WINDOW}, H, W], got {x.shape}")
    return [x[:, :, i] for i in range(DEPTH_WINDOW)]


def concat_z(slices: Sequence[Tensor]) -> Tensor:
    """Inverse of :func:`split_z`."""
    if len(slices) != DEPTH_WINDOW:
        raise ValueError(f"concat_z expects {DEPTH_WINDOW} slices, got {len(slices)}")
    return stack(slices, axis=2)


def _fold(x: Tensor) -> Tensor:
    b, c, d, h, w = x.shape
    return reshape(transpose(x, (0, 2, 1, 3, 4)), (b * d, c, h, w))


def _unfold(x: Tensor, depth: int) -> Tensor:
    bd, c, h, w = x.shape
    return transpose(reshape(x, (bd // depth, depth, c, h, w)), (0, 2, 1, 3, 4))


def generator_forward(gen: Generator, batch: Tensor) -> Tensor:
    """Denoise a ``[B, 1, 9, H, W]`` batch; output has the same shape."""
    if batch.ndim != 5 or batch.shape[1] != 1:
        raise ValueError(f"generator input must be [B, 1, {DEPTH_WINDOW}, H, W], got {batch.shape}")
    if batch.shape[2] != DEPTH_WINDOW:
        raise ValueError(f"generator input depth must be {DEPTH_WINDOW}, got {batch.shape[2]}")
    if batch.shape[3] < MIN_EXTENT or batch.shape[4] < MIN_EXTENT:
        raise ValueError(f"generator input H and W must be >= {MIN_EXTENT}, got {batch.shape[3:]}")
    depth = batch.shape[2]
    skips = {dst: src for src, dst in gen.config.skip_plan}

    # each stored output carries its layout: 3 = [B, C, D, H, W], 2 = folded
    outputs = [(batch, 3)]
    h, layout = batch, 3
    for i, spec in enumerate(gen.specs, start=1):
        if spec.dims != layout:
            h = _fold(h) if spec.dims == 2 else _unfold(h, depth)
            layout = spec.dims
        op = conv_forward if spec.kind == "conv" else deconv_forward
        z = op(h, gen.params[f"{spec.name}.weight"], gen.params[f"{spec.name}.bias"], 1, spec.padding, spec.dims)
        if i in skips:
            src, src_layout = outputs[skips[i]]
            if src_layout != layout:
                src = _fold(src) if layout == 2 else _unfold(src, depth)
            z = add(z, src)
        h = relu(z)
        outputs.append((h, layout))
    if layout == 2:
        h = _unfold(h, depth)
    return h


# -- discriminator -------------------------------------------------------------


@dataclass
class DiscriminatorConfig:
    conv_channels: Sequence[int] = (64, 128, 256, 512)
    dense_widths: Sequence[int] = (1024, 1)
    kernel: int = 3
    stride: int = 2
    slope: float = 0.2
    input_shape: Sequence[int] = (9, 64, 64)

    def flatten_size(self) -> int:
        d, h, w = self.input_shape
        for _ in self.conv_channels:
            d, h, w = (-(-d // self.stride), -(-h // self.stride), -(-w // self.stride))
        return int(self.conv_channels[-1] * d * h * w)

    def to_dict(self) -> dict:
        return {
            "conv_channels": list(self.conv_channels),
            "dense_widths": list(self.dense_widths),
            "kernel": self.kernel,
            "stride": self.stride,
            "slope": self.slope,
            "input_shape": list(self.input_shape),
        }


class Discriminator(Model):
    kind = "discriminator"

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config

    def __call__(self, batch: Tensor) -> Tensor:
        return discriminator_forward(self, batch)


def build_discriminator(config: Optional[DiscriminatorConfig] = None, seed: int = 0) -> Discriminator:
    config = config or DiscriminatorConfig()
    d = Discriminator(config)
    rng = np.random.default_rng(seed)
    k3 = config.kernel**3
    c_in = 1
    for i, c in enumerate(config.conv_channels, start=1):
        shape = (c, c_in) + (config.kernel,) * 3
        d._add(f"conv{i}.weight", xavier_uniform(shape, c_in * k3, c * k3, rng))
        d._add(f"conv{i}.bias", np.zeros(c, dtype=np.float32))
        c_in = c
    n_in = config.flatten_size()
    for i, m in enumerate(config.dense_widths, start=1):
        d._add(f"fc{i}.weight", xavier_uniform((m, n_in), n_in, m, rng))
        d._add(f"fc{i}.bias", np.zeros(m, dtype=np.float32))
        n_in = m
    return d


def discriminator_forward(d: Discriminator, batch: Tensor) -> Tensor:
    """Critic score ``[B, 1]`` (no terminal activation)."""
    cfg = d.config
    h = batch
    for i in range(1, len(cfg.conv_channels) + 1):
        h = conv_forward(h, d.params[f"conv{i}.weight"], d.params[f"conv{i}.bias"], cfg.stride, "zero", 3)
        h = leaky_relu(h, cfg.slope)
    flat = int(np.prod(h.shape[1:]))
    expected = d.params["fc1.weight"].shape[1]
    if flat != expected:
        raise ValueError(
            f"discriminator flatten size mismatch: dense layer expects {expected}, got {flat} "
            f"from input {batch.shape[2:]}"
        )
    h = reshape(h, (h.shape[0], flat))
    n_dense = len(cfg.dense_widths)
    for i in range(1, n_dense + 1):
        h = dense_forward(h, d.params[f"fc{i}.weight"], d.params[f"fc{i}.bias"])
        if i < n_dense:
            h = leaky_relu(h, cfg.slope)
    return h
