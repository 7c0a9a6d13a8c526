"""In-memory dataset assembly: load manifest records, preprocess once, and
stack volumes into arrays ready for batching."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ManifestError
from .preprocess import PreprocessConfig, preprocess_volume
from .tensor import active_dtype
from .volio import DatasetManifest, PatientRecord, Volume, load_volume


@dataclass
class LoadedDataset:
    """Preprocessed volumes stacked as [N, 1, D, H, W] with class labels."""

    inputs: np.ndarray
    labels: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def resolve_volume_path(record: PatientRecord, base_dir: str | Path | None) -> Path:
    path = Path(record.volume_path)
    if path.is_absolute() or base_dir is None:
        return path
    return Path(base_dir) / path


def prepare_volume(
    volume: Volume, cfg: PreprocessConfig, record_id: str | None = None
) -> np.ndarray:
    final_shape = (cfg.target_depth, *cfg.target_hw)
    if volume.intensity_unit == "normalized" and volume.shape == final_shape:
        # already in final form (e.g. output of the preprocess command)
        return volume.voxels.array.astype(active_dtype())
    return preprocess_volume(volume, cfg, record_id=record_id).voxels.array


def load_split(
    manifest: DatasetManifest,
    cfg: PreprocessConfig,
    split: str,
    base_dir: str | Path | None = None,
    fmt: str = "raw",
) -> LoadedDataset:
    """Load and preprocess every record of one split, in manifest order."""
    records = manifest.split_records(split)
    if not records:
        raise ManifestError(f"manifest has no records in split {split!r}")
    inputs = np.empty(
        (len(records), 1, cfg.target_depth, *cfg.target_hw), dtype=active_dtype()
    )
    labels = np.empty(len(records), dtype=np.int64)
    ids = []
    for i, record in enumerate(records):
        volume = load_volume(resolve_volume_path(record, base_dir), fmt)
        inputs[i, 0] = prepare_volume(volume, cfg, record.id)
        labels[i] = int(record.severity_class)
        ids.append(record.id)
    return LoadedDataset(inputs=inputs, labels=labels, ids=ids)


def to_slice_dataset(dataset: LoadedDataset) -> LoadedDataset:
    """Explode volumes into depth-1 slices labeled with the patient class."""
    n, _, depth, height, width = dataset.inputs.shape
    inputs = np.ascontiguousarray(
        dataset.inputs.transpose(0, 2, 1, 3, 4).reshape(n * depth, 1, 1, height, width)
    )
    labels = np.repeat(dataset.labels, depth)
    ids = [f"{pid}/slice{z:04d}" for pid in dataset.ids for z in range(depth)]
    return LoadedDataset(inputs=inputs, labels=labels, ids=ids)
