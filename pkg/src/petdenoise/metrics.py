"""Image quality metrics for (reference, test) volume pairs.

PSNR and NRMSE are computed over the whole volume. SSIM, RFSIM and VIF are
computed per axial slice and averaged. PSNR, NRMSE and VIF treat their first
argument as the reference and are not symmetric.

All tunable constants live in :data:`CONSTANTS`; reports carry a hash of
that dictionary so numbers computed under different settings cannot be
mixed up silently.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage, signal

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

RFSIM_C = 0.01
CANNY_SIGMA = 1.4
CANNY_LOW = 0.1
CANNY_HIGH = 0.2

VIF_SCALES = 4
VIF_SIGMA_NSQ = 2.0
VIF_EPS = 1e-10

CONSTANTS = {
    "ssim": {"window": SSIM_WINDOW, "sigma": SSIM_SIGMA, "k1": SSIM_K1, "k2": SSIM_K2, "filter": "valid"},
    "rfsim": {"c": RFSIM_C, "canny_sigma": CANNY_SIGMA, "canny_low": CANNY_LOW, "canny_high": CANNY_HIGH,
              "intensity": "reference min/max to [0,1]", "feature_mean_floor": 0.0},
    "vif": {"scales": VIF_SCALES, "sigma_nsq": VIF_SIGMA_NSQ, "eps": VIF_EPS,
            "intensity": "reference min/max to [0,255]", "domain": "pixel", "ceiling": 1.0},
    "psnr": {"max": "reference volume max"},
    "nrmse": {"range": "reference volume max - min", "unit": "percent"},
}


def fingerprint(constants: dict = CONSTANTS) -> str:
    blob = json.dumps(constants, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _array(x) -> np.ndarray:
    """Raw-unit float64 array from an ndarray or a Volume-like object."""
    if hasattr(x, "raw"):
        return np.asarray(x.raw(), dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def _pair(ref, test, op):
    r, t = _array(ref), _array(test)
    if r.shape != t.shape:
        raise ValueError(f"{op}: shape mismatch {r.shape} vs {t.shape}")
    return r, t


def psnr(ref, test) -> float:
    """``10 log10(MAX^2 / MSE)`` in dB with MAX the reference maximum.

    Returns ``inf`` when the volumes are identical.
    """
    r, t = _pair(ref, test, "psnr")
    mse = float(np.mean((r - t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(float(r.max()) ** 2 / mse)


def nrmse(ref, test) -> float:
    """RMSE divided by the reference range, in percent."""
    r, t = _pair(ref, test, "nrmse")
    rng = float(r.max() - r.min())
    if rng <= 0:
        raise ValueError("nrmse: reference has zero intensity range")
    return 100.0 * math.sqrt(float(np.mean((r - t) ** 2))) / rng


# -- SSIM ------------------------------------------------------------------------


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian window."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    return signal.correlate(img, win, mode="valid", method="direct")


def ssim_map(ref_slice, test_slice, data_range: Optional[float] = None) -> np.ndarray:
    r, t = _pair(ref_slice, test_slice, "ssim")
    if r.ndim != 2:
        raise ValueError(f"ssim expects 2-D slices, got shape {r.shape}")
    if r.shape[0] < SSIM_WINDOW or r.shape[1] < SSIM_WINDOW:
        raise ValueError(f"ssim: slice {r.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if data_range is None:
        data_range = float(r.max() - r.min())
        if data_range <= 0:
            data_range = 1.0
    win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_r, mu_t = _filter_valid(r, win), _filter_valid(t, win)
    s_rr = _filter_valid(r * r, win) - mu_r**2
    s_tt = _filter_valid(t * t, win) - mu_t**2
    s_rt = _filter_valid(r * t, win) - mu_r * mu_t
    return ((2 * mu_r * mu_t + c1) * (2 * s_rt + c2)) / ((mu_r**2 + mu_t**2 + c1) * (s_rr + s_tt + c2))


def ssim_index(ref_slice, test_slice, data_range: Optional[float] = None) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Parameters
    ----------
    ref_slice, test_slice : array_like
        2-D images of equal shape, at least 11x11.
    data_range : float, optional
        Dynamic range ``L``; defaults to the reference slice's max - min.
    """
    return float(ssim_map(ref_slice, test_slice, data_range).mean())


# -- Riesz features and key-location mask -------------------------------------------


@dataclass
class RieszFeatureSet:
    rx: np.ndarray
    ry: np.ndarray
    rxx: np.ndarray
    rxy: np.ndarray
    ryy: np.ndarray

    def as_list(self) -> List[np.ndarray]:
        return [self.rx, self.ry, self.rxx, self.rxy, self.ryy]


def riesz_transfer(shape) -> tuple:
    """First-order Riesz transfer functions ``(-i wx/|w|, -i wy/|w|)``;
    zero at DC."""
    h, w = shape
    wy = np.fft.fftfreq(h)[:, None]
    wx = np.fft.fftfreq(w)[None, :]
    r = np.sqrt(wx**2 + wy**2)
    r[0, 0] = 1.0
    hx = -1j * wx / r
    hy = -1j * wy / r
    hx[0, 0] = 0.0
    hy[0, 0] = 0.0
    return np.broadcast_to(hx, shape), np.broadcast_to(hy, shape)


def riesz_features(img) -> RieszFeatureSet:
    """First- and second-order Riesz transforms of a 2-D slice (>= 8x8)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 8:
        raise ValueError(f"riesz_features needs a 2-D slice of at least 8x8, got {img.shape}")
    f = np.fft.fft2(img)
    hx, hy = riesz_transfer(img.shape)

    def apply(h):
        return np.real(np.fft.ifft2(h * f))

    return RieszFeatureSet(apply(hx), apply(hy), apply(hx * hx), apply(hx * hy), apply(hy * hy))


def _edge_mask(img: np.ndarray, sigma: float, low: float, high: float) -> np.ndarray:
    sm = ndimage.gaussian_filter(np.asarray(img, dtype=np.float64), sigma, mode="nearest")
    mag = np.hypot(ndimage.sobel(sm, axis=1), ndimage.sobel(sm, axis=0))
    peak = float(mag.max())
    if peak <= 1e-12 * max(1.0, float(np.abs(sm).max())):
        return np.zeros(img.shape, dtype=bool)
    strong = mag >= high * peak
    weak = mag >= low * peak
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=int))
    keep = np.zeros(n + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return keep[labels]


def canny_mask(ref_slice, test_slice, sigma: float = CANNY_SIGMA, low: float = CANNY_LOW,
               high: float = CANNY_HIGH) -> np.ndarray:
    """Key-location mask: union of both images' Canny edge bands.

    Gaussian smoothing, Sobel magnitude and hysteresis thresholding at
    `low` / `high` times each image's peak magnitude. Non-maximum
    suppression (edge thinning) is deliberately skipped, so edges stay
    several pixels wide.
    """
    r, t = np.asarray(ref_slice), np.asarray(test_slice)
    if r.shape != t.shape:
        raise ValueError(f"canny_mask: shape mismatch {r.shape} vs {t.shape}")
    return _edge_mask(r, sigma, low, high) | _edge_mask(t, sigma, low, high)


def _unit_range(ref: np.ndarray, test: np.ndarray, top: float = 1.0):
    lo, hi = float(ref.min()), float(ref.max())
    span = hi - lo if hi > lo else 1.0
    return (ref - lo) * (top / span), (test - lo) * (top / span)


def rfsim_slice(ref_slice: np.ndarray, test_slice: np.ndarray, c: float = RFSIM_C) -> float:
    """RFSIM of one pair of slices already scaled to [0, 1]."""
    mask = canny_mask(ref_slice, test_slice)
    if not mask.any():
        return 1.0
    fr, ft = riesz_features(ref_slice).as_list(), riesz_features(test_slice).as_list()
    score = 1.0
    for a, b in zip(fr, ft):
        d = (2 * a * b + c) / (a * a + b * b + c)
        score *= max(0.0, float(d[mask].mean()))
    return score


def rfsim_slices(ref, test) -> List[float]:
    r, t = _pair(ref, test, "rfsim")
    if r.ndim != 3:
        raise ValueError(f"rfsim expects (z, y, x) volumes, got shape {r.shape}")
    r, t = _unit_range(r, t)
    return [rfsim_slice(r[z], t[z]) for z in range(r.shape[0])]


def rfsim(ref, test) -> float:
    """Riesz-transform feature similarity, averaged over axial slices.

    Per slice, each of the five Riesz features contributes the masked mean
    of ``(2 f_r f_t + c) / (f_r^2 + f_t^2 + c)`` (floored at 0); the slice
    score is the product of the five. A slice with an empty key-location
    mask scores 1.
    """
    return float(np.mean(rfsim_slices(ref, test)))


# -- VIF -------------------------------------------------------------------------


def _vif_window(scale: int) -> np.ndarray:
    n = 2 ** (VIF_SCALES - scale + 1) + 1
    return gaussian_window(n, n / 5.0)


def vif_min_size() -> int:
    n = 1
    while True:
        m, ok = n, True
        for scale in range(1, VIF_SCALES + 1):
            k = 2 ** (VIF_SCALES - scale + 1) + 1
            if scale > 1:
                m = -(-(m - k + 1) // 2)
            if m < k:
                ok = False
                break
        if ok:
            return n
        n += 1


def vif_terms(ref_slice: np.ndarray, test_slice: np.ndarray, sigma_nsq: float = VIF_SIGMA_NSQ):
    """Numerator and denominator information sums for one slice."""
    r = np.asarray(ref_slice, dtype=np.float64)
    t = np.asarray(test_slice, dtype=np.float64)
    num = den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        win = _vif_window(scale)
        if scale > 1:
            r = _filter_valid(r, win)[::2, ::2]
            t = _filter_valid(t, win)[::2, ::2]
        if min(r.shape) < win.shape[0]:
            raise ValueError(f"vif: slice too small for scale {scale} (need >= {vif_min_size()} pixels)")
        mu_r, mu_t = _filter_valid(r, win), _filter_valid(t, win)
        s_rr = np.maximum(_filter_valid(r * r, win) - mu_r**2, 0.0)
        s_tt = np.maximum(_filter_valid(t * t, win) - mu_t**2, 0.0)
        s_rt = _filter_valid(r * t, win) - mu_r * mu_t

        g = s_rt / (s_rr + VIF_EPS)
        sv = s_tt - g * s_rt
        flat_r = s_rr < VIF_EPS
        g[flat_r] = 0.0
        sv[flat_r] = s_tt[flat_r]
        s_rr = np.where(flat_r, 0.0, s_rr)
        flat_t = s_tt < VIF_EPS
        g[flat_t] = 0.0
        sv[flat_t] = 0.0
        neg = g < 0
        sv[neg] = s_tt[neg]
        g[neg] = 0.0
        sv = np.maximum(sv, VIF_EPS)

        num += float(np.sum(np.log2(1.0 + g * g * s_rr / (sv + sigma_nsq))))
        den += float(np.sum(np.log2(1.0 + s_rr / sigma_nsq)))
    return num, den


def vif_slices(ref, test) -> List[float]:
    r, t = _pair(ref, test, "vif")
    if r.ndim != 3:
        raise ValueError(f"vif expects (z, y, x) volumes, got shape {r.shape}")
    r, t = _unit_range(r, t, 255.0)
    out = []
    for z in range(r.shape[0]):
        num, den = vif_terms(r[z], t[z])
        if den <= 0.0:
            if np.array_equal(r[z], t[z]):
                out.append(1.0)
                continue
            raise ValueError(
                f"vif: reference slice {z} carries no information (flat at every scale) "
                "and the test slice differs from it"
            )
        out.append(min(1.0, num / den))
    return out


def vif(ref, test) -> float:
    """Multiscale pixel-domain visual information fidelity, slice-averaged.

    Both volumes are mapped to [0, 255] by the reference min/max before the
    usual noise variance of 2 is applied. Slice scores are capped at 1
    (contrast enhancement can otherwise push VIF above 1).
    """
    return float(np.mean(vif_slices(ref, test)))


# -- reports -------------------------------------------------------------------------


@dataclass
class MetricReport:
    psnr: float
    nrmse: float
    rfsim: float
    vif: float
    ssim: float
    per_slice: Dict[str, List[float]] = field(default_factory=dict)
    fingerprint: str = field(default_factory=fingerprint)

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(d["psnr"]):
            d["psnr"] = "inf"
        d["constants"] = CONSTANTS
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = {k: v for k, v in d.items() if k != "constants"}
        if d.get("psnr") == "inf":
            d["psnr"] = math.inf
        return cls(**d)


def evaluate_volume(ref, test) -> MetricReport:
    r, t = _pair(ref, test, "evaluate_volume")
    if r.ndim != 3:
        raise ValueError(f"evaluate_volume expects (z, y, x) volumes, got shape {r.shape}")
    span = float(r.max() - r.min())
    data_range = span if span > 0 else 1.0
    ssim_s = [ssim_index(r[z], t[z], data_range) for z in range(r.shape[0])]
    rf_s = rfsim_slices(r, t)
    vif_s = vif_slices(r, t)
    return MetricReport(
        psnr=psnr(r, t),
        nrmse=nrmse(r, t),
        rfsim=float(np.mean(rf_s)),
        vif=float(np.mean(vif_s)),
        ssim=float(np.mean(ssim_s)),
        per_slice={"ssim": ssim_s, "rfsim": rf_s, "vif": vif_s},
    )


TABLE_COLUMNS = ("PSNR", "NRMSE (%)", "RFSIM", "VIF")


def format_table(rows: Sequence[tuple]) -> str:
    """Aligned text table from ``(label, MetricReport)`` rows."""
    label_w = max([len("Model")] + [len(label) for label, _ in rows])
    head = f"{'Model':<{label_w}}  " + "  ".join(f"{c:>10}" for c in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for label, rep in rows:
        vals = (rep.psnr, rep.nrmse, rep.rfsim, rep.vif)
        cells = ["inf".rjust(10) if math.isinf(v) else f"{v:10.3f}" for v in vals]
        lines.append(f"{label:<{label_w}}  " + "  ".join(cells))
    return "\n".join(lines)
