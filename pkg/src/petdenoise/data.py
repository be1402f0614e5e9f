"""Synthetic paired-dose phantoms, intensity normalization, patch sampling and
the PVOL volume file format.

The acquisition model works in image space: Poisson counts at
``activity * dose_fraction * sensitivity``, rescaled back to activity units,
then blurred by a Gaussian point-spread function. Sinogram simulation and
iterative reconstruction are not modelled.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

CLINICAL_SPACING = (1.897, 2.734, 2.734)  # mm, (z, y, x)
CLINICAL_DIMS = (87, 256, 256)
DESK_DIMS = (32, 96, 96)
PATCH_SIZE = (9, 64, 64)
DEFAULT_SENSITIVITY = 50.0


@dataclass
class Volume:
    """A (z, y, x) scalar field.

    ``data * intensity_scale`` gives raw activity units; normalized volumes
    keep ``intensity_scale`` equal to the normalization constant.
    """

    data: np.ndarray
    spacing: Tuple[float, float, float] = CLINICAL_SPACING
    intensity_scale: float = 1.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3-D array, got shape {self.data.shape}")
        if not self.intensity_scale > 0:
            raise ValueError(f"intensity_scale must be positive, got {self.intensity_scale}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def raw(self) -> np.ndarray:
        return self.data.astype(np.float64) * self.intensity_scale


# -- seeds ----------------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, index: int = 0) -> int:
    """SplitMix64 output number `index` for the stream started at `seed`.

    Used to derive independent per-volume seeds from one master seed.
    """
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


# -- phantom --------------------------------------------------------------------


@dataclass
class Ellipsoid:
    """Axis-aligned ellipsoid; `center` and `radii` are fractions of the
    volume extent along (z, y, x)."""

    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]
    uptake: float = 1.0
    name: str = ""

    def mask(self, dims) -> np.ndarray:
        zz, yy, xx = np.meshgrid(*[(np.arange(n) + 0.5) / n for n in dims], indexing="ij")
        q = sum(((g - c) / r) ** 2 for g, c, r in zip((zz, yy, xx), self.center, self.radii))
        return q <= 1.0


def _default_organs() -> List[Ellipsoid]:
    return [
        Ellipsoid((0.45, 0.45, 0.33), (0.30, 0.20, 0.17), 1.6, "liver"),
        Ellipsoid((0.45, 0.42, 0.70), (0.20, 0.10, 0.08), 1.4, "spleen"),
        Ellipsoid((0.80, 0.45, 0.55), (0.15, 0.13, 0.12), 3.0, "heart"),
        Ellipsoid((0.25, 0.60, 0.35), (0.15, 0.07, 0.06), 2.0, "kidney_r"),
        Ellipsoid((0.25, 0.60, 0.65), (0.15, 0.07, 0.06), 2.0, "kidney_l"),
    ]


def _ellipsoid(d: dict) -> Ellipsoid:
    d = dict(d)
    d["center"], d["radii"] = tuple(d["center"]), tuple(d["radii"])
    return Ellipsoid(**d)


@dataclass
class PhantomSpec:
    dims: Tuple[int, int, int] = DESK_DIMS
    body: Ellipsoid = field(default_factory=lambda: Ellipsoid((0.5, 0.5, 0.5), (0.49, 0.40, 0.46), 0.6, "body"))
    organs: List[Ellipsoid] = field(default_factory=_default_organs)
    lesion_count: int = 3
    lesion_radius: Tuple[float, float] = (1.5, 3.0)  # voxels
    lesion_multiplier: float = 3.0
    texture_sigma: float = 3.0  # voxels
    texture_amplitude: float = 0.15
    psf_sigma: float = 1.0  # voxels

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive extents, got {self.dims}")
        for e in [self.body] + list(self.organs):
            for axis, (c, r) in enumerate(zip(e.center, e.radii)):
                if r <= 0 or c - r < 0.0 or c + r > 1.0:
                    raise ValueError(
                        f"structure {e.name or '?'} leaves the volume along axis {axis} "
                        f"(center {c}, radius {r})"
                    )
            if e.uptake < 0:
                raise ValueError(f"structure {e.name or '?'} has negative uptake {e.uptake}")
        lo, hi = self.lesion_radius
        if self.lesion_count < 0 or lo <= 0 or hi < lo:
            raise ValueError(f"invalid lesion settings: count {self.lesion_count}, radius {self.lesion_radius}")
        if 2 * hi + 1 > min(self.dims):
            raise ValueError(f"lesion radius {hi} does not fit in dims {self.dims}")
        if self.lesion_multiplier < 0 or self.texture_amplitude < 0 or self.psf_sigma < 0:
            raise ValueError("lesion_multiplier, texture_amplitude and psf_sigma must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "dims" in d:
            d["dims"] = tuple(int(n) for n in d["dims"])
        if "body" in d:
            d["body"] = _ellipsoid(d["body"])
        if "organs" in d:
            d["organs"] = [_ellipsoid(o) for o in d["organs"]]
        if "lesion_radius" in d:
            d["lesion_radius"] = tuple(d["lesion_radius"])
        return cls(**d)


def generate_phantom(spec: Optional[PhantomSpec] = None, seed: int = 0) -> Volume:
    """Activity volume: uniform body, textured organs and spherical lesions.

    Deterministic in ``(spec, seed)``. Activity is zero outside the body.
    """
    spec = spec or PhantomSpec()
    spec.validate()
    dims = tuple(spec.dims)
    rng = np.random.default_rng(seed)
    body = spec.body.mask(dims)
    act = np.where(body, spec.body.uptake, 0.0)

    texture = np.zeros(dims)
    if spec.organs and spec.texture_amplitude > 0:
        texture = ndimage.gaussian_filter(rng.standard_normal(dims), spec.texture_sigma, mode="wrap")
        std = texture.std()
        if std > 0:
            texture /= std
    organ_any = np.zeros(dims, dtype=bool)
    for organ in spec.organs:
        m = organ.mask(dims) & body
        act[m] = organ.uptake * np.maximum(1.0 + spec.texture_amplitude * texture[m], 0.0)
        organ_any |= m

    hosts = organ_any if organ_any.any() else body
    lo, hi = spec.lesion_radius
    margin = int(np.ceil(hi))
    inner = np.zeros(dims, dtype=bool)
    inner[margin:dims[0] - margin, margin:dims[1] - margin, margin:dims[2] - margin] = True
    candidates = np.argwhere(hosts & inner)
    grid = np.indices(dims).astype(np.float64)
    lesions = []
    for _ in range(spec.lesion_count if len(candidates) else 0):
        center = candidates[rng.integers(len(candidates))]
        radius = float(rng.uniform(lo, hi))
        dist2 = sum((g - c) ** 2 for g, c in zip(grid, center))
        sphere = (dist2 <= radius**2) & body
        act[sphere] *= spec.lesion_multiplier
        lesions.append({"center": [int(c) for c in center], "radius": radius})

    return Volume(
        act.astype(np.float32),
        provenance={"kind": "phantom", "seed": int(seed), "lesions": lesions},
    )


def simulate_acquisition(
    activity: Volume,
    dose_fraction: float,
    seed: int = 0,
    sensitivity: float = DEFAULT_SENSITIVITY,
    psf_sigma: float = 1.0,
) -> Volume:
    """Noisy image of `activity` at a given fraction of the full dose.

    Counts ``~ Poisson(activity * dose_fraction * sensitivity)`` are divided
    by ``dose_fraction * sensitivity`` and blurred with a Gaussian PSF of
    `psf_sigma` voxels. Noise variance therefore scales as
    ``1 / dose_fraction``.
    """
    if not (0.0 < dose_fraction <= 1.0):
        raise ValueError(f"dose_fraction must be in (0, 1], got {dose_fraction}")
    act = activity.raw()
    if (act < 0).any():
        raise ValueError("activity must be non-negative")
    rng = np.random.default_rng(seed)
    gain = dose_fraction * sensitivity
    img = rng.poisson(act * gain) / gain
    if psf_sigma > 0:
        img = ndimage.gaussian_filter(img, psf_sigma, mode="constant")
    img = np.maximum(img, 0.0)
    prov = dict(activity.provenance)
    prov.update({"dose_fraction": dose_fraction, "acquisition_seed": int(seed),
                 "sensitivity": sensitivity, "psf_sigma": psf_sigma})
    return Volume(img.astype(np.float32), activity.spacing, 1.0, prov)


def make_pair(spec: PhantomSpec, seed: int, dose_fraction: float = 0.2,
              sensitivity: float = DEFAULT_SENSITIVITY) -> Tuple[Volume, Volume]:
    """``(low_dose, normal_dose)`` volumes of one phantom, with seeds derived
    from `seed` by :func:`splitmix64`."""
    phantom = generate_phantom(spec, splitmix64(seed, 0))
    low = simulate_acquisition(phantom, dose_fraction, splitmix64(seed, 1), sensitivity, spec.psf_sigma)
    normal = simulate_acquisition(phantom, 1.0, splitmix64(seed, 2), sensitivity, spec.psf_sigma)
    return low, normal


# -- normalization ----------------------------------------------------------------


def normalization_scale(normal_volumes: Sequence[Volume]) -> float:
    """Maximum raw intensity over the normal-dose training volumes."""
    if not normal_volumes:
        raise ValueError("need at least one normal-dose volume")
    return float(max(v.raw().max() for v in normal_volumes))


def normalize(volume: Volume, scale: float) -> Volume:
    """Divide raw intensities by `scale`; the data is kept in float64 so that
    :func:`denormalize` restores float32 inputs exactly."""
    if not scale > 0:
        raise ValueError(f"normalization scale must be positive, got {scale}")
    return Volume(volume.raw() / scale, volume.spacing, float(scale), dict(volume.provenance))


def normalize_pair(low: Volume, normal: Volume, scale: float) -> Tuple[Volume, Volume]:
    return normalize(low, scale), normalize(normal, scale)


def denormalize(volume: Volume, dtype=np.float32) -> Volume:
    return Volume(volume.raw().astype(dtype), volume.spacing, 1.0, dict(volume.provenance))


@dataclass
class PairedDataset:
    """Normalized ``(low, normal)`` pairs sharing one intensity scale."""

    pairs: List[Tuple[Volume, Volume]]
    scale: float


def build_dataset(raw_pairs: Sequence[Tuple[Volume, Volume]], scale: Optional[float] = None) -> PairedDataset:
    """Normalize `raw_pairs`; the scale defaults to their normal-dose maximum."""
    if not raw_pairs:
        raise ValueError("dataset is empty")
    scale = normalization_scale([n for _, n in raw_pairs]) if scale is None else scale
    return PairedDataset([normalize_pair(lo, n, scale) for lo, n in raw_pairs], float(scale))


# -- patches ----------------------------------------------------------------------


@dataclass
class PatchPair:
    low: np.ndarray  # [1, d, h, w]
    normal: np.ndarray
    coords: Tuple[int, int, int]
    source: int = 0


def _check_size(dims, size):
    if len(size) != 3 or any(s > n for s, n in zip(size, dims)):
        raise ValueError(f"patch size {tuple(size)} exceeds volume dims {tuple(dims)}")


def _cut(vol: np.ndarray, corner, size) -> np.ndarray:
    z, y, x = corner
    d, h, w = size
    return np.asarray(vol[z:z + d, y:y + h, x:x + w], dtype=np.float32)[None]


def extract_patches(pair, count: int, size=PATCH_SIZE, seed=0) -> Iterator[PatchPair]:
    """Stream `count` coordinate-aligned patch pairs from ``(low, normal)``.

    Corners are uniform over all in-bounds positions; the sequence is fixed
    by `seed`.
    """
    low, normal = pair
    if low.dims != normal.dims:
        raise ValueError(f"paired volumes differ in dims: {low.dims} vs {normal.dims}")
    _check_size(low.dims, size)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for _ in range(count):
        corner = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(low.dims, size))
        yield PatchPair(_cut(low.data, corner, size), _cut(normal.data, corner, size), corner)


class PatchSampler:
    """Endless mini-batch source over several normalized volume pairs.

    Each patch picks a pair uniformly, then a uniform corner. Batches come
    out as ``[B, 1, d, h, w]`` float32 arrays.
    """

    def __init__(self, pairs: Sequence[Tuple[Volume, Volume]], size=PATCH_SIZE, seed: int = 0):
        if not pairs:
            raise ValueError("dataset is empty")
        for low, normal in pairs:
            if low.dims != normal.dims:
                raise ValueError(f"paired volumes differ in dims: {low.dims} vs {normal.dims}")
            _check_size(low.dims, size)
        self.pairs = list(pairs)
        self.size = tuple(size)
        self.rng = np.random.default_rng(seed)

    def patch(self) -> PatchPair:
        k = int(self.rng.integers(len(self.pairs)))
        low, normal = self.pairs[k]
        corner = tuple(int(self.rng.integers(0, n - s + 1)) for n, s in zip(low.dims, self.size))
        return PatchPair(_cut(low.data, corner, self.size), _cut(normal.data, corner, self.size), corner, k)

    def batch(self, batch_size: int) -> Tuple[np.ndarray, np.ndarray]:
        patches = [self.patch() for _ in range(batch_size)]
        return np.stack([p.low for p in patches]), np.stack([p.normal for p in patches])


# -- PVOL format --------------------------------------------------------------------

PVOL_MAGIC = b"PVOL"
PVOL_VERSION = 1
_MAX_VOXELS = 1 << 34


class VolumeFormatError(ValueError):
    pass


def write_volume(volume: Volume, path) -> None:
    """Write `volume` as PVOL.

    Layout: ``b"PVOL"``, u32 version, u32 reserved, u32 header length, a
    UTF-8 JSON header (dims, spacing, intensity_scale, provenance), then
    float32 little-endian voxels in (z, y, x) order. Data is stored as
    float32.
    """
    header = json.dumps(
        {
            "dims": [int(n) for n in volume.dims],
            "spacing": list(volume.spacing),
            "intensity_scale": float(volume.intensity_scale),
            "provenance": volume.provenance,
        },
        sort_keys=True,
    ).encode("utf-8")
    payload = np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(PVOL_MAGIC + struct.pack("<III", PVOL_VERSION, 0, len(header)))
        fh.write(header)
        fh.write(payload)


def read_volume(path) -> Volume:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise VolumeFormatError(f"{path}: truncated header, expected 16 bytes, got {len(blob)}")
    if blob[:4] != PVOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {blob[:4]!r} at offset 0, expected {PVOL_MAGIC!r}")
    version, _, hlen = struct.unpack_from("<III", blob, 4)
    if version != PVOL_VERSION:
        raise VolumeFormatError(f"{path}: unsupported PVOL version {version} (reader handles {PVOL_VERSION})")
    if 16 + hlen > len(blob):
        raise VolumeFormatError(f"{path}: header of {hlen} bytes runs past end of file at offset {len(blob)}")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
        dims = [int(n) for n in header["dims"]]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise VolumeFormatError(f"{path}: corrupt JSON header at offset 16: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeFormatError(f"{path}: invalid dims {dims}")
    n = int(np.prod(dims, dtype=object))
    if n > _MAX_VOXELS:
        raise VolumeFormatError(f"{path}: dims {dims} overflow the {_MAX_VOXELS}-voxel limit")
    expected = 16 + hlen + 4 * n
    if len(blob) != expected:
        raise VolumeFormatError(
            f"{path}: payload length mismatch, expected {expected} bytes for dims {dims}, got {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=16 + hlen).reshape(dims).astype(np.float32)
    return Volume(
        data,
        tuple(header.get("spacing", CLINICAL_SPACING)),
        float(header.get("intensity_scale", 1.0)),
        header.get("provenance", {}),
    )
