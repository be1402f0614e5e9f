"""Differentiable layer operations: convolution, deconvolution, activations,
dense layers."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import _conv as kernels
from .engine import Tensor, _make, add, mask_mul, matmul, reshape, transpose

__all__ = [
    "conv_forward",
    "deconv_forward",
    "activation",
    "relu",
    "leaky_relu",
    "dense_forward",
    "padding_amount",
]


def padding_amount(padding: str, k: int) -> int:
    if padding == "zero":
        return (k - 1) // 2
    if padding == "none":
        return 0
    raise ValueError(f"padding must be 'zero' or 'none', got {padding!r}")


def _conv(x: Tensor, w: Tensor, stride, pads) -> Tensor:
    in_spatial = x.shape[2:]
    ksize = w.shape[2:]

    def bw(g):
        gx = _conv_t(g, w, stride, pads, in_spatial) if x.requires_grad else None
        gw = _conv_w(x, g, stride, pads, ksize) if w.requires_grad else None
        return gx, gw

    return _make(kernels.conv(x.data, w.data, stride, pads), (x, w), bw, "conv")


def _conv_t(g: Tensor, w: Tensor, stride, pads, in_spatial) -> Tensor:
    ksize = w.shape[2:]

    def bw(h):
        gg = _conv(h, w, stride, pads) if g.requires_grad else None
        gw = _conv_w(h, g, stride, pads, ksize) if w.requires_grad else None
        return gg, gw

    data = kernels.conv_transpose(g.data, w.data, stride, pads, in_spatial)
    return _make(data, (g, w), bw, "conv_transpose")


def _conv_w(x: Tensor, g: Tensor, stride, pads, ksize) -> Tensor:
    in_spatial = x.shape[2:]

    def bw(h):
        gx = _conv_t(g, h, stride, pads, in_spatial) if x.requires_grad else None
        gg = _conv(x, h, stride, pads) if g.requires_grad else None
        return gx, gg

    data = kernels.conv_weight(x.data, g.data, stride, pads, ksize)
    return _make(data, (x, g), bw, "conv_weight")


def _check_geometry(op, input, kernel, stride, dims, in_axis):
    if stride < 1 or int(stride) != stride:
        raise ValueError(f"{op}: stride must be a positive integer, got {stride}")
    if dims not in (2, 3):
        raise ValueError(f"{op}: dims must be 2 or 3, got {dims}")
    if input.ndim != dims + 2:
        raise ValueError(
            f"{op}: input must have rank {dims + 2} [batch, channel, spatial...], got shape {input.shape}"
        )
    if kernel.ndim != dims + 2:
        raise ValueError(f"{op}: kernel must have rank {dims + 2}, got shape {kernel.shape}")
    if input.shape[1] != kernel.shape[in_axis]:
        raise ValueError(
            f"{op}: channel axis mismatch, input has {input.shape[1]} channels "
            f"but kernel axis {in_axis} expects {kernel.shape[in_axis]}"
        )


def _add_bias(y: Tensor, bias: Optional[Tensor], channels: int, op: str) -> Tensor:
    if bias is None:
        return y
    if bias.shape != (channels,):
        raise ValueError(f"{op}: bias shape {bias.shape} does not match {channels} output channels")
    return add(y, reshape(bias, (1, channels) + (1,) * (y.ndim - 2)))


def conv_forward(
    input: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: str = "zero",
    dims: Optional[int] = None,
) -> Tensor:
    """Cross-correlation (no kernel flip) in 2-D or 3-D.

    Parameters
    ----------
    input : Tensor
        ``[batch, in_ch, *spatial]``.
    kernel : Tensor
        ``[out_ch, in_ch, *k]``.
    bias : Tensor, optional
        ``[out_ch]``.
    stride : int
        Same stride on every spatial axis.
    padding : {'zero', 'none'}
        ``'zero'`` pads ``(k - 1) // 2`` zeros per side, ``'none'`` is a
        valid correlation.
    dims : {2, 3}, optional
        Spatial rank; inferred from the kernel when omitted.
    """
    dims = kernel.ndim - 2 if dims is None else dims
    _check_geometry("conv_forward", input, kernel, stride, dims, 1)
    pads = tuple(padding_amount(padding, k) for k in kernel.shape[2:])
    for axis, (n, k, p) in enumerate(zip(input.shape[2:], kernel.shape[2:], pads)):
        if n + 2 * p < k:
            raise ValueError(
                f"conv_forward: spatial axis {axis + 2} has padded extent {n + 2 * p} "
                f"smaller than kernel extent {k}"
            )
    y = _conv(input, kernel, (int(stride),) * dims, pads)
    return _add_bias(y, bias, kernel.shape[0], "conv_forward")


def deconv_forward(
    input: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: str = "zero",
    dims: Optional[int] = None,
    output_size: Optional[Sequence[int]] = None,
) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv_forward`.

    The kernel is ``[in_ch, out_ch, *k]``: the same array that, used in
    :func:`conv_forward`, maps ``out_ch`` channels to ``in_ch``. With zero
    bias, ``<deconv(x), y> == <x, conv(y)>``.

    At stride 1, ``padding='none'`` grows each spatial extent by ``k - 1``
    and ``padding='zero'`` preserves it. For larger strides the output size
    is ambiguous and may be fixed with `output_size`.
    """
    dims = kernel.ndim - 2 if dims is None else dims
    _check_geometry("deconv_forward", input, kernel, stride, dims, 0)
    ksize = kernel.shape[2:]
    pads = tuple(padding_amount(padding, k) for k in ksize)
    if output_size is None:
        output_size = tuple((n - 1) * stride - 2 * p + k for n, k, p in zip(input.shape[2:], ksize, pads))
    output_size = tuple(int(n) for n in output_size)
    for axis, (n, o, k, p) in enumerate(zip(output_size, input.shape[2:], ksize, pads)):
        if n < 1 or kernels.out_size(n, k, stride, p) != o:
            raise ValueError(
                f"deconv_forward: spatial axis {axis + 2} cannot produce extent {n} from {o}"
            )
    y = _conv_t(input, kernel, (int(stride),) * dims, pads, output_size)
    return _add_bias(y, bias, kernel.shape[1], "deconv_forward")


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the gradient at 0 is 0."""
    return mask_mul(x, x.data > 0)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    return mask_mul(x, np.where(x.data > 0, 1.0, slope))


def activation(x: Tensor, kind: str = "relu", slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    raise ValueError(f"unknown activation {kind!r}")


def dense_forward(input: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``input @ weight.T + bias`` for ``input [batch, n]``,
    ``weight [m, n]``, ``bias [m]``."""
    if input.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"dense_forward: expected 2-D input and weight, got {input.shape} and {weight.shape}")
    if input.shape[1] != weight.shape[1]:
        raise ValueError(
            f"dense_forward: input has {input.shape[1]} features, weight expects {weight.shape[1]}"
        )
    y = matmul(input, transpose(weight))
    if bias is None:
        return y
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"dense_forward: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    return add(y, bias)
