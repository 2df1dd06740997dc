"""Volume storage, intensity normalization and synthetic phantom data.

A Volume is a multi-channel 3-d image plus a class-label volume and voxel
spacing in mm. Phantoms are nested ellipsoidal lesions (enhancing inside
core inside edema) rendered into a synthetic brain ellipsoid with
tissue-dependent channel intensities, and stand in for clinical data in
every test and pipeline here.

The brain mask is defined once, as "any channel nonzero", and that same
definition feeds normalization, the loss mask and patch sampling.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

VOLUME_MAGIC = b"VOL1"
HEADER_SIZE = 46  # magic(4) + extents(16) + spacing(24) + dtype(1) + labels(1)
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}

# label scheme: 0 background, 1 necrotic/non-enhancing core, 2 edema,
# 3 enhancing; matches the region composition in evaluation
LABEL_BACKGROUND = 0
LABEL_CORE = 1
LABEL_EDEMA = 2
LABEL_ENHANCING = 3


class VolumeFormatError(ValueError):
    """Malformed or truncated volume file."""


@dataclass
class Volume:
    """channels (C, D, H, W) real values, labels (D, H, W) class indices."""
    channels: np.ndarray
    labels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    subject_id: str = ""

    def __post_init__(self):
        self.channels = np.asarray(self.channels)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.channels.ndim != 4:
            raise ValueError("channels must be (C, D, H, W)")
        if self.labels.shape != self.channels.shape[1:]:
            raise ValueError(
                f"label extents {self.labels.shape} do not match channel "
                f"extents {self.channels.shape[1:]}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3:
            raise ValueError("spacing must have three entries")

    @property
    def num_channels(self):
        return self.channels.shape[0]

    @property
    def extents(self):
        return self.channels.shape[1:]


def brain_mask(channels: np.ndarray) -> np.ndarray:
    """Voxels where any channel is nonzero; the one mask definition used
    for normalization, loss masking and patch sampling."""
    return np.any(channels != 0, axis=0)


def normalize(vol: Volume, eps: float = 1e-12) -> Volume:
    """Standardize each channel to zero mean, unit std over brain voxels,
    using the volume's own statistics. Background stays exactly zero."""
    mask = brain_mask(vol.channels)
    if not mask.any():
        raise ValueError(f"volume {vol.subject_id!r} has an empty brain region")
    out = np.zeros_like(vol.channels)
    for c in range(vol.num_channels):
        values = vol.channels[c][mask]
        mu = values.mean()
        sd = values.std()
        if sd < eps:
            logger.warning("channel %d of %r has (near-)zero variance; "
                           "flooring std", c, vol.subject_id)
            sd = eps
        out[c][mask] = (values - mu) / sd
    return Volume(out, vol.labels.copy(), vol.spacing, vol.subject_id)


@dataclass
class PhantomSpec:
    """Synthetic volume recipe: nested ellipsoidal lesions inside a brain
    ellipsoid, per-tissue channel contrasts, additive Gaussian noise."""
    extents: tuple = (4, 32, 48, 48)  # (C, D, H, W)
    num_lesions: int = 1
    edema_radius_range: tuple = (5.0, 8.0)
    core_fraction_range: tuple = (0.55, 0.7)       # core radius / edema radius
    enhancing_fraction_range: tuple = (0.5, 0.65)  # enhancing / core
    brain_intensity: tuple = (1.0, 1.0, 1.0, 1.0)
    edema_intensity: tuple = (1.3, 1.1, 2.1, 2.5)
    core_intensity: tuple = (0.6, 0.8, 1.7, 1.4)
    enhancing_intensity: tuple = (1.4, 2.7, 1.2, 1.8)
    noise: float = 0.05
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        c = self.extents[0]
        for name in ("brain_intensity", "edema_intensity", "core_intensity",
                     "enhancing_intensity"):
            profile = getattr(self, name)
            if len(profile) < c:
                raise ValueError(f"{name} needs {c} entries")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not (0 < self.core_fraction_range[0]
                and self.core_fraction_range[1] < 1
                and 0 < self.enhancing_fraction_range[0]
                and self.enhancing_fraction_range[1] < 1):
            raise ValueError("nested radius fractions must lie in (0, 1)")


def _ellipsoid_mask(extents, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, e) for e in extents)]
    acc = np.zeros(extents, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Render one deterministic phantom from its spec seed.

    Labels follow the nesting exactly: enhancing voxels sit inside the
    core, the core inside the edema, so the evaluation regions are
    nonempty and properly nested whenever a lesion is placed.
    """
    rng = np.random.default_rng(spec.seed)
    c, d, h, w = spec.extents
    brain_center = (d / 2.0, h / 2.0, w / 2.0)
    brain_radii = (d * 0.44, h * 0.44, w * 0.44)
    brain = _ellipsoid_mask((d, h, w), brain_center, brain_radii)

    labels = np.zeros((d, h, w), dtype=np.uint8)
    for _ in range(spec.num_lesions):
        base = rng.uniform(*spec.edema_radius_range)
        aniso = rng.uniform(0.8, 1.2, size=3)
        edema_r = base * aniso
        core_r = edema_r * rng.uniform(*spec.core_fraction_range)
        enh_r = core_r * rng.uniform(*spec.enhancing_fraction_range)
        if np.any(enh_r < 1.0):
            enh_r = np.maximum(enh_r, 1.0)
        # conservative containment: normalized center offset plus the
        # largest normalized lesion radius must stay inside the unit ball
        radii_arr = np.asarray(brain_radii)
        reach = float((edema_r / radii_arr).max())
        if reach >= 0.98:
            raise ValueError("lesion does not fit the volume extents")
        placed = False
        for _attempt in range(500):
            u = rng.uniform(-0.6, 0.6, size=3)
            if np.linalg.norm(u) + reach <= 0.98:
                center = np.asarray(brain_center) + u * radii_arr
                placed = True
                break
        if not placed:
            raise ValueError("lesion does not fit the volume extents")
        edema = _ellipsoid_mask((d, h, w), center, edema_r)
        core = _ellipsoid_mask((d, h, w), center, core_r)
        enh = _ellipsoid_mask((d, h, w), center, enh_r)
        labels[edema] = LABEL_EDEMA
        labels[core] = LABEL_CORE
        labels[enh] = LABEL_ENHANCING

    channels = np.zeros((c, d, h, w), dtype=np.float32)
    tissue_masks = (
        (brain & (labels == LABEL_BACKGROUND), spec.brain_intensity),
        (labels == LABEL_EDEMA, spec.edema_intensity),
        (labels == LABEL_CORE, spec.core_intensity),
        (labels == LABEL_ENHANCING, spec.enhancing_intensity),
    )
    for mask, profile in tissue_masks:
        for ch in range(c):
            channels[ch][mask] = profile[ch]
    if spec.noise > 0:
        noise = rng.normal(0.0, spec.noise, size=channels.shape)
        channels[:, brain] += noise[:, brain].astype(np.float32)
        channels = channels.astype(np.float32)
    return Volume(channels, labels, spec.spacing,
                  subject_id=f"phantom_{spec.seed:04d}")


def write_volume(vol: Volume, path) -> None:
    """VOL1 container: fixed 46-byte little-endian header, then raw channel
    data, then raw uint8 labels. Round-trips are bit-exact."""
    path = Path(path)
    dtype = np.dtype(vol.channels.dtype)
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"unsupported channel dtype {dtype}")
    c = vol.num_channels
    d, h, w = vol.extents
    for extent in (c, d, h, w):
        if extent >= 2 ** 32:
            raise VolumeFormatError("extent overflows the header field")
    header = VOLUME_MAGIC
    header += struct.pack("<4I", c, d, h, w)
    header += struct.pack("<3d", *vol.spacing)
    header += struct.pack("<BB", _DTYPE_CODES[dtype], 1)
    assert len(header) == HEADER_SIZE
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(vol.channels).astype(
            dtype.newbyteorder("<"), copy=False).tobytes())
        fh.write(np.ascontiguousarray(vol.labels).tobytes())


def read_volume(path) -> Volume:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError(f"{path}: truncated header")
    if raw[:4] != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {raw[:4]!r}")
    c, d, h, w = struct.unpack_from("<4I", raw, 4)
    spacing = struct.unpack_from("<3d", raw, 20)
    code, has_labels = struct.unpack_from("<BB", raw, 44)
    if code not in _CODE_DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    n_channel_bytes = c * d * h * w * dtype.itemsize
    n_label_bytes = d * h * w if has_labels else 0
    expected = HEADER_SIZE + n_channel_bytes + n_label_bytes
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{path}: expected {expected} bytes, found {len(raw)}")
    off = HEADER_SIZE
    channels = np.frombuffer(raw[off:off + n_channel_bytes], dtype=dtype)
    channels = channels.reshape(c, d, h, w).astype(
        dtype.newbyteorder("="), copy=True)
    off += n_channel_bytes
    if has_labels:
        labels = np.frombuffer(raw[off:off + n_label_bytes],
                               dtype=np.uint8).reshape(d, h, w).copy()
    else:
        labels = np.zeros((d, h, w), dtype=np.uint8)
    return Volume(channels, labels, spacing, subject_id=path.stem)


def generate_dataset(out_dir, count: int, base_spec: PhantomSpec = None,
                     seed: int = 0) -> list:
    """Write `count` phantoms with per-subject seeds derived from `seed`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if base_spec is None:
        base_spec = PhantomSpec()
    seeds = np.random.SeedSequence(seed).generate_state(count)
    paths = []
    for i, subject_seed in enumerate(seeds):
        spec = PhantomSpec(**{**base_spec.__dict__, "seed": int(subject_seed)})
        vol = generate_phantom(spec)
        path = out_dir / f"subject_{i:03d}.vol"
        write_volume(vol, path)
        paths.append(path)
    return paths


def load_dataset(directory) -> list:
    directory = Path(directory)
    paths = sorted(directory.glob("*.vol"))
    if not paths:
        raise FileNotFoundError(f"no .vol files in {directory}")
    return [read_volume(p) for p in paths]
