"""Training objectives: Wasserstein critic terms with gradient penalty, MSE,
slice-wise SSIM, slice-wise perceptual distance and the mixed generator loss.

Reduction conventions
---------------------
MSE is the squared Frobenius distance summed over each sample and averaged
over the batch. ``lambda_m = 1e7`` is meant for this convention on
intensities normalized so the normal-dose training maximum is 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, conv_forward, relu
from .autodiff.engine import add, grad, mul, reshape, sample_norm, sub
from .metrics import SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW, gaussian_window


@dataclass
class LossWeights:
    lambda_gp: float = 10.0
    lambda_m: float = 1e7

    def __post_init__(self):
        if not (math.isfinite(self.lambda_gp) and self.lambda_gp >= 0):
            raise ValueError(f"lambda_gp must be finite and >= 0, got {self.lambda_gp}")
        if math.isnan(self.lambda_m) or self.lambda_m < 0:
            raise ValueError(f"lambda_m must be >= 0 (inf allowed), got {self.lambda_m}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _slices(x: Tensor) -> Tensor:
    """``[B, 1, D, H, W]`` (or ``[D, H, W]``) -> ``[B*D, 1, H, W]``."""
    if x.ndim == 3:
        return reshape(x, (x.shape[0], 1) + x.shape[1:])
    if x.ndim != 5 or x.shape[1] != 1:
        raise ValueError(f"expected a [B, 1, D, H, W] batch or a [D, H, W] volume, got {x.shape}")
    b, _, d, h, w = x.shape
    return reshape(x, (b * d, 1, h, w))


def mse_loss(denoised: Tensor, target: Tensor) -> Tensor:
    denoised, target = _as_tensor(denoised), _as_tensor(target)
    _same_shape("mse_loss", denoised, target)
    diff = sub(denoised, target)
    return mul((diff * diff).sum(), 1.0 / denoised.shape[0])


def interpolate_samples(
    denoised: Tensor,
    normal: Tensor,
    seed=None,
    eps: Optional[np.ndarray] = None,
) -> Tensor:
    """``eps * denoised + (1 - eps) * normal`` with one ``eps ~ U[0, 1]`` per
    batch element.

    `seed` may be an int or a ``numpy.random.Generator``; `eps` overrides
    the draw. The result is always differentiable: if neither input needs
    gradients it is returned as a fresh leaf.
    """
    denoised, normal = _as_tensor(denoised), _as_tensor(normal)
    _same_shape("interpolate_samples", denoised, normal)
    n = denoised.shape[0]
    if eps is None:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        eps = rng.uniform(0.0, 1.0, size=n)
    eps = np.asarray(eps, dtype=denoised.dtype).reshape((n,) + (1,) * (denoised.ndim - 1))
    v_hat = add(mul(denoised, eps), mul(normal, 1.0 - eps))
    if not v_hat.requires_grad:
        v_hat.requires_grad_()
    return v_hat


def gradient_penalty(d: Callable, v_hat: Tensor, lambda_gp: float = 10.0) -> Tensor:
    """``lambda_gp * mean_b (||grad_v D(v)_b||_2 - 1)^2``.

    The norm runs over all voxels of a sample. The result stays
    differentiable with respect to the critic's parameters.
    """
    if not v_hat.requires_grad:
        v_hat = Tensor(v_hat.data, requires_grad=True)
    scores = d(v_hat)
    (g,) = grad(scores.sum(), [v_hat], create_graph=True, allow_unused=True)
    if g is None:
        g = Tensor(np.zeros_like(v_hat.data))
    dev = sub(sample_norm(g), 1.0)
    return mul((dev * dev).mean(), float(lambda_gp))


def discriminator_objective(d: Callable, generator_output, normal, weights: LossWeights = None, seed=None):
    """Critic loss and its parts.

    Returns
    -------
    loss : Tensor
        ``E[D(G(x))] - E[D(y)] + penalty``.
    wasserstein : float
        ``E[D(y)] - E[D(G(x))]``, the distance estimate.
    penalty : float
    """
    weights = weights or LossWeights()
    fake = _as_tensor(generator_output).detach()
    normal = _as_tensor(normal)
    _same_shape("discriminator_loss", fake, normal)
    d_fake = d(fake).mean()
    d_real = d(normal).mean()
    penalty = gradient_penalty(d, interpolate_samples(fake, normal, seed), weights.lambda_gp)
    loss = add(sub(d_fake, d_real), penalty)
    return loss, float(d_real.item() - d_fake.item()), penalty.item()


def discriminator_loss(d: Callable, generator_output, normal, weights: LossWeights = None, seed=None) -> Tensor:
    return discriminator_objective(d, generator_output, normal, weights, seed)[0]


def generator_loss(d: Callable, generator_output: Tensor, normal, weights: LossWeights = None) -> Tensor:
    """``-E[D(G(x))] + lambda_m * MSE``.

    ``lambda_m = inf`` gives the MSE alone, ``lambda_m = 0`` the adversarial
    term alone.
    """
    weights = weights or LossWeights()
    generator_output, normal = _as_tensor(generator_output), _as_tensor(normal)
    _same_shape("generator_loss", generator_output, normal)
    if math.isinf(weights.lambda_m):
        return mse_loss(generator_output, normal)
    adv = mul(d(generator_output).mean(), -1.0)
    if weights.lambda_m == 0:
        return adv
    return add(adv, mul(mse_loss(generator_output, normal), float(weights.lambda_m)))


# -- SSIM ----------------------------------------------------------------------


def ssim_loss(denoised_vol, target_vol, data_range: float = 1.0) -> Tensor:
    """Mean over slices of ``1 - SSIM``.

    Uses the same Gaussian window and constants as
    :func:`petdenoise.metrics.ssim_index`, with a fixed `data_range`
    (intensities are normalized during training).
    """
    a, b = _slices(_as_tensor(denoised_vol)), _slices(_as_tensor(target_vol))
    _same_shape("ssim_loss", a, b)
    if a.shape[2] < SSIM_WINDOW or a.shape[3] < SSIM_WINDOW:
        raise ValueError(f"ssim_loss: slice {a.shape[2:]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA).astype(a.dtype)
    kernel = Tensor(win[None, None])

    def filt(x):
        return conv_forward(x, kernel, None, 1, "none", 2)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    s_aa = filt(a * a) - mu_aa
    s_bb = filt(b * b) - mu_bb
    s_ab = filt(a * b) - mu_ab
    num = (mu_ab * 2.0 + c1) * (s_ab * 2.0 + c2)
    den = (mu_aa + mu_bb + c1) * (s_aa + s_bb + c2)
    per_slice = (num / den).mean(axis=(1, 2, 3))
    return (1.0 - per_slice).mean()


# -- perceptual ----------------------------------------------------------------


class FeatureExtractor:
    """Fixed differentiable map from ``[N, 1, H, W]`` slices to features.

    Inputs are normalized with a fixed ``mean`` / ``std`` before
    :meth:`features` is applied. Subclasses override :meth:`features`.
    """

    identifier = "base"
    layer_index = 0
    mean = 0.0
    std = 1.0
    min_size = 1

    def features(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, slices: Tensor) -> Tensor:
        h, w = slices.shape[2:]
        if h < self.min_size or w < self.min_size:
            raise ValueError(f"{self.identifier}: slices {h}x{w} are below the {self.min_size}-pixel minimum")
        x = slices if (self.mean == 0.0 and self.std == 1.0) else (slices - self.mean) * (1.0 / self.std)
        return self.features(x)


class IdentityExtractor(FeatureExtractor):
    identifier = "identity"

    def features(self, x: Tensor) -> Tensor:
        return x


class RandomConvExtractor(FeatureExtractor):
    """Seeded 5-layer ReLU convolution pyramid standing in for a pretrained
    ImageNet network.

    Weights are He-normal draws from `seed` and never trained. The output
    of the last layer is the feature map.
    """

    def __init__(
        self,
        seed: int = 0,
        channels: Sequence[int] = (16, 16, 32, 32, 64),
        strides: Sequence[int] = (1, 1, 2, 1, 2),
        mean: float = 0.5,
        std: float = 0.5,
    ):
        if len(channels) != len(strides):
            raise ValueError("channels and strides must have the same length")
        self.seed = seed
        self.mean, self.std = float(mean), float(std)
        self.layer_index = len(channels)
        self.identifier = f"random-conv-{len(channels)}-seed{seed}"
        self.min_size = 2 ** sum(1 for s in strides if s > 1) * 2
        self.strides = tuple(int(s) for s in strides)
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 1
        for c in channels:
            std_w = math.sqrt(2.0 / (c_in * 9))
            self.weights.append(Tensor(rng.normal(0.0, std_w, size=(c, c_in, 3, 3)).astype(np.float32)))
            c_in = c

    def features(self, x: Tensor) -> Tensor:
        for w, s in zip(self.weights, self.strides):
            x = relu(conv_forward(x, w, None, s, "zero", 2))
        return x


def perceptual_loss(denoised_vol, target_vol, extractor: Optional[FeatureExtractor] = None) -> Tensor:
    """Mean over slices of ``||phi(a_i) - phi(b_i)||_F^2``."""
    extractor = extractor or RandomConvExtractor()
    a, b = _slices(_as_tensor(denoised_vol)), _slices(_as_tensor(target_vol))
    _same_shape("perceptual_loss", a, b)
    diff = sub(extractor(a), extractor(b))
    return mul((diff * diff).sum(), 1.0 / a.shape[0])
