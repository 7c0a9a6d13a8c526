"""Volumetric CT severity classification, from raw scans to trained models."""

from .errors import (
    CheckpointError,
    ConfigError,
    LabelError,
    ManifestError,
    PipelineError,
    SamplerError,
    ShapeError,
    ValidationError,
    VolumeFormatError,
)
from .tensor import Tensor, get_precision, set_precision
from .volio import (
    DatasetManifest,
    PatientRecord,
    SeverityClass,
    Volume,
    class_histogram,
    load_manifest,
    load_volume,
    map_severity,
    save_manifest,
    stratified_split,
)
from .preprocess import CropPolicy, PreprocessConfig, preprocess_volume
from .network import NetworkPreset, build_network, get_preset
from .train import RunConfig, TrainConfig, load_checkpoint, run_training, save_checkpoint
from .evaluate import EvalReport, evaluate, render_report
from .synth import PhantomSpec, generate_dataset, generate_phantom

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "CropPolicy",
    "DatasetManifest",
    "EvalReport",
    "LabelError",
    "ManifestError",
    "NetworkPreset",
    "PatientRecord",
    "PhantomSpec",
    "PipelineError",
    "PreprocessConfig",
    "RunConfig",
    "SamplerError",
    "SeverityClass",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "ValidationError",
    "Volume",
    "VolumeFormatError",
    "build_network",
    "class_histogram",
    "evaluate",
    "generate_dataset",
    "generate_phantom",
    "get_precision",
    "get_preset",
    "load_checkpoint",
    "load_manifest",
    "load_volume",
    "map_severity",
    "preprocess_volume",
    "render_report",
    "run_training",
    "save_checkpoint",
    "save_manifest",
    "set_precision",
    "stratified_split",
    "__version__",
]
