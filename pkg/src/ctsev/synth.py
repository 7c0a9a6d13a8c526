"""Synthetic chest phantoms for exercising the full pipeline.

Each phantom is an HU-valued volume with the gross anatomy the preprocessing
stages care about: an air background, a soft-tissue body ellipse, two lung
ellipsoids, a thin bright table band below the body, and Gaussian-blob
opacities placed inside the lungs. Severity class controls what fraction of
the lung volume the opacities cover, so the classes are geometrically
separable but share identical anatomy otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tensor import Tensor
from .volio import (
    SCORE_SETS,
    DatasetManifest,
    PatientRecord,
    SeverityClass,
    Volume,
    save_manifest,
    save_volume_raw,
    stratified_split,
)

HU_AIR = -1000.0
HU_BODY = 40.0
HU_LUNG = -850.0
HU_TABLE = 300.0
LESION_AMPLITUDE = 700.0  # peak added on top of lung baseline

# fraction of lung volume covered by opacity, per severity class
CLASS_FRACTION_RANGES = {
    SeverityClass.LOW: (0.0, 0.03),
    SeverityClass.MEDIUM: (0.06, 0.12),
    SeverityClass.HIGH: (0.18, 0.30),
}

# sampling targets sit strictly inside the class ranges so blob-size
# granularity cannot push a phantom over a boundary
_TARGET_RANGES = {
    SeverityClass.LOW: (0.004, 0.025),
    SeverityClass.MEDIUM: (0.066, 0.114),
    SeverityClass.HIGH: (0.19, 0.28),
}

_DEPTH_BINS = 8


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 96
    width: int = 96
    depth_range: tuple[int, int] = (32, 48)
    noise_std: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ConfigError("phantom height/width must be >= 32")
        lo, hi = self.depth_range
        if not 8 <= lo <= hi:
            raise ConfigError(f"bad depth_range {self.depth_range}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass
class PhantomResult:
    volume: Volume
    score: int
    lesion_fraction: float


def _ellipsoid_mask(shape, center, semi) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    return (
        ((zz - center[0]) / semi[0]) ** 2
        + ((yy - center[1]) / semi[1]) ** 2
        + ((xx - center[2]) / semi[2]) ** 2
    ) <= 1.0


def _anatomy(depth: int, height: int, width: int):
    """Base HU volume plus the lung mask blobs may occupy."""
    hu = np.full((depth, height, width), HU_AIR, dtype=np.float64)

    yy, xx = np.ogrid[:height, :width]
    body = (
        ((yy - 0.45 * height) / (0.30 * height)) ** 2
        + ((xx - 0.50 * width) / (0.40 * width)) ** 2
    ) <= 1.0
    hu[:, body] = HU_BODY

    lungs = np.zeros((depth, height, width), dtype=bool)
    for cx in (0.33, 0.67):
        lungs |= _ellipsoid_mask(
            (depth, height, width),
            (0.5 * (depth - 1), 0.45 * height, cx * width),
            (0.42 * depth, 0.20 * height, 0.13 * width),
        )
    lungs &= body[None, :, :]
    hu[lungs] = HU_LUNG

    # scanner table: a thin bright band near the bottom, separated from the
    # body by air, which the crop stage is expected to discard
    r0 = height - 5
    c0, c1 = int(0.20 * width), int(0.80 * width)
    hu[:, r0 : r0 + 3, c0:c1] = HU_TABLE
    return hu, lungs


def _stratified_center(lung_idx: np.ndarray, blob_i: int, rng) -> np.ndarray:
    """Draw a blob center, cycling depth bins so opacities spread axially."""
    zs = lung_idx[:, 0]
    z_lo, z_hi = int(zs.min()), int(zs.max())
    span = z_hi - z_lo + 1
    b = blob_i % _DEPTH_BINS
    lo = z_lo + span * b // _DEPTH_BINS
    hi = z_lo + span * (b + 1) // _DEPTH_BINS
    pool = lung_idx[(zs >= lo) & (zs < max(hi, lo + 1))]
    if len(pool) == 0:
        pool = lung_idx
    return pool[int(rng.integers(len(pool)))]


def _add_blob(field, center, sigma, lung_mask):
    """Accumulate one Gaussian opacity (restricted to lung) into field."""
    depth, height, width = field.shape
    reach = int(math.ceil(4.0 * sigma))
    z0, z1 = max(center[0] - reach, 0), min(center[0] + reach + 1, depth)
    y0, y1 = max(center[1] - reach, 0), min(center[1] + reach + 1, height)
    x0, x1 = max(center[2] - reach, 0), min(center[2] + reach + 1, width)
    zz, yy, xx = np.ogrid[z0:z1, y0:y1, x0:x1]
    r2 = (
        (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    ) / (2.0 * sigma * sigma)
    patch = np.exp(-r2) * lung_mask[z0:z1, y0:y1, x0:x1]
    field[z0:z1, y0:y1, x0:x1] += patch


def _place_lesions(lungs: np.ndarray, severity: SeverityClass, rng):
    """Grow the opacity field until its half-peak footprint covers the
    target fraction of lung volume. Returns (field in [0..1], fraction)."""
    lung_idx = np.argwhere(lungs)
    lung_count = len(lung_idx)
    if lung_count == 0:
        raise ConfigError("phantom has no lung voxels to place lesions in")
    lo, hi = _TARGET_RANGES[severity]
    cap = CLASS_FRACTION_RANGES[severity][1]
    target = float(rng.uniform(lo, hi))
    field = np.zeros(lungs.shape, dtype=np.float64)
    covered = np.zeros(lungs.shape, dtype=bool)
    frac = 0.0
    for blob_i in range(400):
        if frac >= target:
            break
        center = _stratified_center(lung_idx, blob_i, rng)
        sigma = float(rng.uniform(2.2, 4.5))
        while True:
            trial = np.array(field)
            _add_blob(trial, center, sigma, lungs)
            trial_mask = covered | (trial >= 0.5)
            trial_frac = np.count_nonzero(trial_mask) / lung_count
            if trial_frac <= cap - 0.005 or sigma <= 1.0:
                break
            sigma *= 0.6
        if trial_frac > cap - 0.005:
            break  # even the smallest blob would overshoot; settle here
        field, covered, frac = trial, trial_mask, trial_frac
    lo_class, hi_class = CLASS_FRACTION_RANGES[severity]
    if not lo_class <= frac <= hi_class:
        raise ConfigError(
            f"lesion fraction {frac:.4f} for class {severity.label} falls outside "
            f"[{lo_class}, {hi_class}]; the lung region is too small for the target"
        )
    return np.clip(field, 0.0, 1.0), frac


def generate_phantom(
    spec: PhantomSpec, severity: SeverityClass, patient_seed: int
) -> PhantomResult:
    """Deterministically build one phantom for (spec.seed, class, patient)."""
    severity = SeverityClass(severity)
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((spec.seed, int(severity), patient_seed)))
    )
    depth = int(rng.integers(spec.depth_range[0], spec.depth_range[1] + 1))
    hu, lungs = _anatomy(depth, spec.height, spec.width)
    field, frac = _place_lesions(lungs, severity, rng)
    hu += LESION_AMPLITUDE * field
    if spec.noise_std > 0:
        hu += rng.normal(0.0, spec.noise_std, hu.shape)
    scores = SCORE_SETS[severity]
    score = int(scores[int(rng.integers(len(scores)))])
    volume = Volume(
        voxels=Tensor(hu.astype(np.float32)),
        intensity_unit="HU",
        spacing_mm=(5.0, 1.0, 1.0),
    )
    return PhantomResult(volume=volume, score=score, lesion_fraction=frac)


def generate_dataset(
    out_dir: str | Path,
    spec: PhantomSpec,
    counts: tuple[int, int, int],
    test_fraction: float = 0.2,
) -> DatasetManifest:
    """Write a phantom dataset: volumes/p####/ raw volumes + manifest.json.

    counts gives patients per class (low, medium, high). Output bytes depend
    only on spec and counts.
    """
    if any(c < 0 for c in counts) or sum(counts) == 0:
        raise ConfigError(f"bad class counts {counts}")
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    records = []
    index = 0
    for severity in (SeverityClass.LOW, SeverityClass.MEDIUM, SeverityClass.HIGH):
        for _ in range(counts[int(severity)]):
            pid = f"p{index:04d}"
            result = generate_phantom(spec, severity, index)
            rel = f"volumes/{pid}"
            save_volume_raw(result.volume, out / rel)
            records.append(
                PatientRecord(id=pid, volume_path=rel, score=result.score)
            )
            index += 1
    manifest = DatasetManifest(records=records, source_note="synthetic phantoms")
    if test_fraction > 0:
        manifest = stratified_split(manifest, test_fraction, seed=spec.seed)
    else:
        manifest = DatasetManifest(
            records=[
                PatientRecord(r.id, r.volume_path, r.score, "train")
                for r in manifest.records
            ],
            source_note=manifest.source_note,
        )
    save_manifest(manifest, out / "manifest.json")
    return manifest
