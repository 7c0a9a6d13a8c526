"""Dataset ingestion: manifests, severity labels, and volume storage.

Two interchange formats are supported, both with a sidecar ``meta.json``:

* raw         -- ``volume.raw`` holding little-endian 32-bit floats in
                 depth-major row-major order;
                 meta: ``{"depth", "height", "width", "intensity_unit"}``
                 with ``intensity_unit`` one of ``"HU" | "normalized"``.
* slice_stack -- ``slice_0000.png .. slice_NNNN.png`` (16-bit, single
                 channel) in ascending, gap-free order;
                 meta: ``{"num_slices", "height", "width", "rescale_slope",
                 "rescale_intercept", "spacing_mm"}``. When both rescale
                 fields are present, stored values are converted to
                 Hounsfield units as ``value * slope + intercept`` at load;
                 otherwise values pass through with unit ``"normalized"``.

Severity scores are clinician-style integers 1..6 and are grouped into
three classes: low (1-2), medium (3), high (4-6).
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import LabelError, ManifestError, VolumeFormatError
from .tensor import Tensor, active_dtype

VOLUME_FORMATS = ("raw", "slice_stack")
_SLICE_RE = re.compile(r"^slice_(\d{4})\.png$")


class SeverityClass(IntEnum):
    LOW = 0
    MEDIUM = 1
    HIGH = 2

    @property
    def label(self) -> str:
        return self.name.lower()


SCORE_SETS = {
    SeverityClass.LOW: (1, 2),
    SeverityClass.MEDIUM: (3,),
    SeverityClass.HIGH: (4, 5, 6),
}


def map_severity(score: int, record_id: str | None = None) -> SeverityClass:
    """Group a 1..6 severity score into the three-class severity level."""
    if not isinstance(score, int) or isinstance(score, bool) or not 1 <= score <= 6:
        where = f" in record {record_id!r}" if record_id else ""
        raise LabelError(f"severity score must be an integer in [1, 6], got {score!r}{where}")
    if score <= 2:
        return SeverityClass.LOW
    if score == 3:
        return SeverityClass.MEDIUM
    return SeverityClass.HIGH


@dataclass
class PatientRecord:
    id: str
    volume_path: str
    score: int
    split: str | None = None  # "train" | "test" | None

    @property
    def severity_class(self) -> SeverityClass:
        return map_severity(self.score, self.id)


@dataclass
class DatasetManifest:
    records: list[PatientRecord] = field(default_factory=list)
    source_note: str = ""

    def split_records(self, split: str) -> list[PatientRecord]:
        return [r for r in self.records if r.split == split]


@dataclass
class Volume:
    """One patient scan: voxels of shape [depth, height, width] plus metadata."""

    voxels: Tensor
    intensity_unit: str  # "HU" | "normalized"
    spacing_mm: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.voxels.rank != 3:
            raise VolumeFormatError(f"volume must be rank 3, got shape {self.voxels.shape}")
        if self.intensity_unit not in ("HU", "normalized"):
            raise VolumeFormatError(f"unknown intensity unit {self.intensity_unit!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape  # type: ignore[return-value]


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest JSON document."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "records" not in doc:
        raise ManifestError(f"manifest {path} must be an object with a 'records' list")
    records: list[PatientRecord] = []
    seen: set[str] = set()
    for i, entry in enumerate(doc["records"]):
        if not isinstance(entry, dict):
            raise ManifestError(f"record #{i} is not an object")
        try:
            rid = entry["id"]
            rpath = entry["path"]
            score = entry["severity_score"]
        except KeyError as exc:
            raise ManifestError(f"record #{i} is missing field {exc}") from exc
        if not isinstance(rid, str) or not rid:
            raise ManifestError(f"record #{i} has an empty or non-string id")
        if rid in seen:
            raise ManifestError(f"duplicate record id {rid!r}")
        seen.add(rid)
        if not isinstance(score, int) or isinstance(score, bool) or not 1 <= score <= 6:
            raise LabelError(
                f"severity score must be an integer in [1, 6], got {score!r} in record {rid!r}"
            )
        split = entry.get("split")
        if split not in (None, "train", "test"):
            raise ManifestError(f"record {rid!r} has invalid split {split!r}")
        records.append(PatientRecord(id=rid, volume_path=str(rpath), score=score, split=split))
    return DatasetManifest(records=records, source_note=str(doc.get("source_note", "")))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    doc = {
        "records": [
            {"id": r.id, "path": r.volume_path, "severity_score": r.score, "split": r.split}
            for r in manifest.records
        ],
        "source_note": manifest.source_note,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def class_histogram(manifest: DatasetManifest) -> list[int]:
    """Patient counts per severity class, ordered [low, medium, high]."""
    counts = [0, 0, 0]
    for r in manifest.records:
        counts[r.severity_class] += 1
    return counts


def stratified_split(
    manifest: DatasetManifest, test_fraction: float, seed: int
) -> DatasetManifest:
    """Assign patient-level train/test splits, stratified by severity class.

    Per class, floor(test_fraction * n) patients (at least 1) go to test.
    Assignment is deterministic given the seed and independent of record
    order in the manifest.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ManifestError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    by_class: dict[SeverityClass, list[str]] = {c: [] for c in SeverityClass}
    for r in manifest.records:
        by_class[r.severity_class].append(r.id)
    rng = np.random.Generator(np.random.PCG64(seed))
    test_ids: set[str] = set()
    for cls in SeverityClass:
        ids = sorted(by_class[cls])
        if len(ids) < 2:
            raise ManifestError(
                f"class {cls.label} has {len(ids)} patient(s); need at least 2 to split"
            )
        n_test = max(1, math.floor(test_fraction * len(ids)))
        order = rng.permutation(len(ids))
        test_ids.update(ids[i] for i in order[:n_test])
    records = [
        replace(r, split="test" if r.id in test_ids else "train") for r in manifest.records
    ]
    return DatasetManifest(records=records, source_note=manifest.source_note)


# -- volume storage ----------------------------------------------------------


def _read_meta(directory: Path) -> dict:
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise VolumeFormatError(f"missing meta.json in {directory}")
    try:
        return json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{meta_path} is not valid JSON: {exc}") from exc


def _meta_int(meta: dict, key: str, where: Path) -> int:
    value = meta.get(key)
    if not isinstance(value, int) or value < 1:
        raise VolumeFormatError(f"{where}/meta.json field {key!r} must be a positive integer")
    return value


def load_volume(path: str | Path, fmt: str) -> Volume:
    """Load one volume directory in the declared format."""
    directory = Path(path)
    if fmt == "raw":
        return _load_raw(directory)
    if fmt == "slice_stack":
        return _load_slice_stack(directory)
    raise VolumeFormatError(f"unknown volume format {fmt!r}; expected one of {VOLUME_FORMATS}")


def _load_raw(directory: Path) -> Volume:
    meta = _read_meta(directory)
    depth = _meta_int(meta, "depth", directory)
    height = _meta_int(meta, "height", directory)
    width = _meta_int(meta, "width", directory)
    unit = meta.get("intensity_unit")
    if unit not in ("HU", "normalized"):
        raise VolumeFormatError(f"{directory}/meta.json intensity_unit must be 'HU' or 'normalized'")
    blob_path = directory / "volume.raw"
    if not blob_path.is_file():
        raise VolumeFormatError(f"missing volume.raw in {directory}")
    blob = blob_path.read_bytes()
    expected = depth * height * width * 4
    if len(blob) != expected:
        raise VolumeFormatError(
            f"{blob_path}: expected {expected} bytes for {depth}x{height}x{width}, got {len(blob)}"
        )
    voxels = np.frombuffer(blob, dtype="<f4").reshape(depth, height, width)
    return Volume(voxels=Tensor(voxels), intensity_unit=unit, spacing_mm=None)


def _load_slice_stack(directory: Path) -> Volume:
    meta = _read_meta(directory)
    num_slices = _meta_int(meta, "num_slices", directory)
    height = _meta_int(meta, "height", directory)
    width = _meta_int(meta, "width", directory)
    found: dict[int, Path] = {}
    for entry in directory.iterdir():
        m = _SLICE_RE.match(entry.name)
        if m:
            found[int(m.group(1))] = entry
    if len(found) != num_slices:
        raise VolumeFormatError(
            f"{directory}: meta declares {num_slices} slices, directory has {len(found)}"
        )
    for i in range(num_slices):
        if i not in found:
            raise VolumeFormatError(f"{directory}: missing slice index {i} in sequence")
    stack = np.empty((num_slices, height, width), dtype=np.float64)
    for i in range(num_slices):
        with Image.open(found[i]) as img:
            arr = np.asarray(img)
        if arr.ndim != 2:
            raise VolumeFormatError(f"{found[i]}: slice must be single-channel")
        if arr.shape != (height, width):
            raise VolumeFormatError(
                f"{found[i]}: slice shape {arr.shape} does not match meta ({height}, {width})"
            )
        stack[i] = arr
    slope = meta.get("rescale_slope")
    intercept = meta.get("rescale_intercept")
    if slope is not None and intercept is not None:
        stack = stack * float(slope) + float(intercept)
        unit = "HU"
    else:
        unit = "normalized"
    spacing = meta.get("spacing_mm")
    spacing_t = tuple(float(s) for s in spacing) if spacing is not None else None
    if spacing_t is not None and (len(spacing_t) != 3 or any(s <= 0 for s in spacing_t)):
        raise VolumeFormatError(f"{directory}/meta.json spacing_mm must be 3 positive reals")
    return Volume(
        voxels=Tensor(stack.astype(active_dtype())),
        intensity_unit=unit,
        spacing_mm=spacing_t,  # type: ignore[arg-type]
    )


def save_volume_raw(volume: Volume, directory: str | Path) -> None:
    """Write a volume in the raw format (bit-exact round trip at float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    depth, height, width = volume.shape
    blob = np.ascontiguousarray(volume.voxels.array, dtype="<f4").tobytes()
    (directory / "volume.raw").write_bytes(blob)
    meta = {
        "depth": depth,
        "height": height,
        "width": width,
        "intensity_unit": volume.intensity_unit,
    }
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def save_slice_stack(
    stored: np.ndarray,
    directory: str | Path,
    rescale_slope: float | None = None,
    rescale_intercept: float | None = None,
    spacing_mm: tuple[float, float, float] | None = None,
) -> None:
    """Write 16-bit stored slice values plus metadata as a slice stack."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stored = np.asarray(stored)
    if stored.ndim != 3:
        raise VolumeFormatError(f"slice stack data must be rank 3, got shape {stored.shape}")
    num_slices, height, width = stored.shape
    for i in range(num_slices):
        img = Image.fromarray(stored[i].astype(np.uint16))
        img.save(directory / f"slice_{i:04d}.png")
    meta = {
        "num_slices": num_slices,
        "height": height,
        "width": width,
        "rescale_slope": rescale_slope,
        "rescale_intercept": rescale_intercept,
        "spacing_mm": list(spacing_mm) if spacing_mm is not None else None,
    }
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
