"""Held-out evaluation: confusion matrix, per-class recall, and a JSON
report with a stable schema."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import load_split
from .errors import ConfigError, ManifestError, ShapeError
from .network import N_CLASSES, Network
from .preprocess import PreprocessConfig
from .train import TRAIN_MODES, predict_classes, predict_patient_slicevote
from .volio import DatasetManifest, SeverityClass, Volume

CLASS_NAMES = ("low", "medium", "high")


def accuracy(preds, labels) -> float:
    """Fraction of exact matches."""
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise ShapeError(
            f"got {len(preds)} predictions for {len(labels)} labels"
        )
    if not preds:
        raise ConfigError("accuracy of empty prediction list is undefined")
    return sum(int(p) == int(t) for p, t in zip(preds, labels)) / len(preds)


def confusion_matrix(preds, labels) -> "ConfusionMatrix":
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise ShapeError(
            f"got {len(preds)} predictions for {len(labels)} labels"
        )
    return ConfusionMatrix.from_predictions(np.array(labels), np.array(preds))


def _volume_input(volume) -> np.ndarray:
    if isinstance(volume, Volume):
        arr = volume.voxels.array
    else:
        arr = np.asarray(volume)
    if arr.ndim != 3:
        raise ShapeError(f"expected a [D, H, W] volume, got shape {arr.shape}")
    return arr[None, :, :, :]


def predict_volume_3d(net: Network, volume) -> SeverityClass:
    """Whole-volume prediction; logit ties resolve to the more severe class."""
    if net.planar:
        raise ConfigError("predict_volume_3d needs a volumetric network")
    cls = int(predict_classes(net, _volume_input(volume)[None])[0])
    return SeverityClass(cls)


def predict_volume_2d_baseline(net: Network, volume) -> SeverityClass:
    """Per-slice predictions aggregated by majority vote (ties: more severe)."""
    if not net.planar:
        raise ConfigError("predict_volume_2d_baseline needs a planar network")
    return SeverityClass(predict_patient_slicevote(net, _volume_input(volume)))


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted."""

    counts: np.ndarray  # [3, 3] int64
    empty_rows: list[int] = field(default_factory=list)

    @classmethod
    def from_predictions(cls, true: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
        for t, p in zip(true, pred):
            counts[int(t), int(p)] += 1
        empty = [c for c in range(N_CLASSES) if counts[c].sum() == 0]
        return cls(counts=counts, empty_rows=empty)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def row_normalized(self) -> np.ndarray:
        """Each row divided by its count; rows with no samples become zeros."""
        out = np.zeros((N_CLASSES, N_CLASSES), dtype=np.float64)
        for c in range(N_CLASSES):
            row_sum = self.counts[c].sum()
            if row_sum:
                out[c] = self.counts[c] / row_sum
        return out

    def per_class_recall(self) -> list[float]:
        norm = self.row_normalized()
        return [float(norm[c, c]) for c in range(N_CLASSES)]


@dataclass
class EvalReport:
    model: str
    mode: str
    n_test: int
    confusion: ConfusionMatrix
    class_histogram: list[int]

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "mode": self.mode,
            "n_test": self.n_test,
            "accuracy": self.confusion.accuracy(),
            "confusion_counts": self.confusion.counts.tolist(),
            "confusion_row_norm": self.confusion.row_normalized().tolist(),
            "per_class_recall": self.confusion.per_class_recall(),
            "class_histogram": list(self.class_histogram),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path: str | Path):
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def evaluate(
    net: Network,
    manifest: DatasetManifest,
    cfg: PreprocessConfig,
    mode: str = "volumetric3d",
    base_dir: str | Path | None = None,
    fmt: str = "raw",
) -> EvalReport:
    """Score the test split patient by patient, in sorted-id order."""
    if mode not in TRAIN_MODES:
        raise ConfigError(f"unknown evaluation mode {mode!r}")
    planar_needed = mode == "slicevote2d"
    if net.planar != planar_needed:
        kind = "planar" if net.planar else "volumetric"
        raise ConfigError(f"mode {mode!r} cannot run on a {kind} network")
    test_records = manifest.split_records("test")
    if not test_records:
        raise ManifestError("manifest has no test split to evaluate")

    ds = load_split(manifest, cfg, "test", base_dir, fmt)
    order = np.argsort(np.array(ds.ids))  # report independent of record order
    inputs = ds.inputs[order]
    labels = ds.labels[order]
    if planar_needed:
        pred = np.array([predict_patient_slicevote(net, v) for v in inputs])
    else:
        pred = predict_classes(net, inputs)
    confusion = ConfusionMatrix.from_predictions(labels, pred)
    hist = [int(np.count_nonzero(labels == c)) for c in range(N_CLASSES)]
    return EvalReport(
        model=net.preset.name,
        mode=mode,
        n_test=len(labels),
        confusion=confusion,
        class_histogram=hist,
    )


def render_report(report: EvalReport) -> str:
    """Human-readable summary with one-decimal percentages."""
    norm = report.confusion.row_normalized()
    lines = [
        f"model {report.model}  mode {report.mode}  patients {report.n_test}",
        f"accuracy {100.0 * report.confusion.accuracy():.1f}%",
        "confusion (rows true, cols predicted, % of row):",
        "          " + "".join(f"{name:>8}" for name in CLASS_NAMES),
    ]
    for c in range(N_CLASSES):
        cells = "".join(f"{100.0 * norm[c, j]:8.1f}" for j in range(N_CLASSES))
        lines.append(f"{CLASS_NAMES[c]:>10}" + cells)
    recall = report.confusion.per_class_recall()
    lines.append(
        "recall  "
        + "  ".join(
            f"{name} {100.0 * r:.1f}%" for name, r in zip(CLASS_NAMES, recall)
        )
    )
    lines.append(
        "test histogram  "
        + "  ".join(f"{n} {c}" for n, c in zip(CLASS_NAMES, report.class_histogram))
    )
    return "\n".join(lines) + "\n"
