"""Training: uniform per-class sampling, SGD with momentum, metrics logging,
and a small versioned checkpoint format.

The loop is deliberately plain. One sampler drives both the volumetric model
and the per-slice baseline; budgets stay comparable because the number of
gradient steps per epoch is fixed by the patient count, not by how many
slices a volume explodes into.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import LoadedDataset, load_split, to_slice_dataset
from .errors import CheckpointError, ConfigError, SamplerError, ShapeError
from .network import (
    N_CLASSES,
    Network,
    NetworkPreset,
    build_network,
    config_digest,
    get_preset,
    preset_descriptor,
)
from .layers import softmax_cross_entropy
from .preprocess import PreprocessConfig
from .tensor import Tensor, argmax_last, set_precision
from .volio import DatasetManifest

CHECKPOINT_MAGIC = b"CTSCKPT1"
CHECKPOINT_VERSION = 1

TRAIN_MODES = ("volumetric3d", "slicevote2d")


@dataclass(frozen=True)
class TrainConfig:
    per_class_batch: int = 3
    epochs: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    precision: str = "single"
    # optional step decay: lr * gamma^(epoch // step); step <= 0 disables
    lr_step: int = 0
    lr_gamma: float = 0.1

    def __post_init__(self):
        if self.per_class_batch < 1:
            raise ConfigError("per_class_batch must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        # 0 is allowed so the zero-step-size invariance property is checkable
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @property
    def batch_size(self) -> int:
        return self.per_class_batch * N_CLASSES

    def lr_at(self, epoch: int) -> float:
        if self.lr_step <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_gamma ** (epoch // self.lr_step)


class UniformClassSampler:
    """Yields batches with exactly k indices per class.

    Each epoch reshuffles a per-class pool and deals it out in order; a class
    that runs short is topped up by sampling its members with replacement, so
    minority classes appear as often as majority ones.
    """

    def __init__(self, labels: np.ndarray, seed: int):
        self.class_indices = [
            np.flatnonzero(labels == c).tolist() for c in range(N_CLASSES)
        ]
        for c, members in enumerate(self.class_indices):
            if not members:
                raise SamplerError(f"class {c} has no training samples")
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self._pools: list[list[int]] = [[] for _ in range(N_CLASSES)]

    def start_epoch(self):
        self._pools = [
            [members[i] for i in self.rng.permutation(len(members))]
            for members in self.class_indices
        ]

    def batch(self, per_class: int) -> list[int]:
        out = []
        for c in range(N_CLASSES):
            pool = self._pools[c]
            take, self._pools[c] = pool[:per_class], pool[per_class:]
            while len(take) < per_class:
                members = self.class_indices[c]
                take.append(members[int(self.rng.integers(len(members)))])
            out.extend(take)
        return out


def init_velocity(net: Network) -> list[np.ndarray]:
    return [np.zeros_like(p.array) for _, p in net.parameters()]


def sgd_step(
    net: Network,
    grads: list[Tensor],
    velocity: list[np.ndarray],
    learning_rate: float,
    momentum: float,
):
    """In-place update: v <- momentum*v + g; p <- p - lr*v."""
    params = net.parameters()
    if len(grads) != len(params) or len(velocity) != len(params):
        raise ShapeError("gradient/velocity list length does not match parameters")
    for (name, p), g, v in zip(params, grads, velocity):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
        v *= momentum
        v += g.array
        p.array -= learning_rate * v


@dataclass
class EpochStats:
    mean_loss: float
    train_accuracy: float


def train_epoch(
    net: Network,
    dataset: LoadedDataset,
    sampler: UniformClassSampler,
    velocity: list[np.ndarray],
    cfg: TrainConfig,
    epoch: int,
    step_offset: int,
    n_batches: int | None = None,
) -> tuple[EpochStats, int]:
    """One pass: ceil(N / batch_size) uniform batches unless overridden.

    Returns stats and the updated global step counter. Train accuracy is
    measured on the training-mode logits of each batch (dropout active).
    """
    if n_batches is None:
        n_batches = math.ceil(len(dataset) / cfg.batch_size)
    lr = cfg.lr_at(epoch)
    sampler.start_epoch()
    losses = []
    hits = 0
    step = step_offset
    for _ in range(n_batches):
        idx = sampler.batch(cfg.per_class_batch)
        xb = Tensor(dataset.inputs[idx])
        yb = dataset.labels[idx]
        logits, cache = net.forward(xb, mode="train", rng_key=(cfg.seed, step))
        loss, grad_logits = softmax_cross_entropy(logits, yb)
        grads = net.backward(cache, grad_logits)
        sgd_step(net, grads, velocity, lr, cfg.momentum)
        losses.append(loss)
        hits += int(np.count_nonzero(argmax_last(logits) == yb))
        step += 1
    total = n_batches * cfg.batch_size
    stats = EpochStats(
        mean_loss=float(np.mean(losses)) if losses else 0.0,
        train_accuracy=hits / total if total else 0.0,
    )
    return stats, step


# -- inference helpers --------------------------------------------------------


def infer_logits(net: Network, inputs: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Forward in inference mode, chunked to bound peak memory."""
    parts = []
    for start in range(0, len(inputs), chunk):
        logits, _ = net.forward(Tensor(inputs[start : start + chunk]), mode="infer")
        parts.append(logits.array)
    return np.concatenate(parts, axis=0)


def predict_classes(net: Network, inputs: np.ndarray) -> np.ndarray:
    return argmax_last(Tensor(infer_logits(net, inputs)))


def predict_patient_slicevote(net: Network, volume_input: np.ndarray) -> int:
    """Majority vote over per-slice predictions; ties go to the more severe
    class so borderline patients are not understaged."""
    depth = volume_input.shape[1]
    slices = np.ascontiguousarray(
        volume_input.transpose(1, 0, 2, 3)[:, :, None, :, :]
    )  # [D, 1, 1, H, W]
    votes = predict_classes(net, slices)
    counts = np.bincount(votes, minlength=N_CLASSES)
    return int(argmax_last(Tensor(counts.astype(np.float64))))


def dataset_accuracy(net: Network, dataset: LoadedDataset, mode: str) -> float:
    """Patient-level inference accuracy for either decision rule."""
    if mode == "volumetric3d":
        pred = predict_classes(net, dataset.inputs)
    elif mode == "slicevote2d":
        pred = np.array(
            [predict_patient_slicevote(net, vol) for vol in dataset.inputs]
        )
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return float(np.count_nonzero(pred == dataset.labels)) / len(dataset)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(net: Network, epoch: int, path: str | Path):
    """magic + u32 header length + JSON header + little-endian float32 blob."""
    params = net.parameters()
    header = {
        "version": CHECKPOINT_VERSION,
        "preset": preset_descriptor(net.preset, net.planar),
        "epoch": int(epoch),
        "param_count": int(sum(p.size for _, p in params)),
        "config_digest": config_digest(net.preset, net.planar),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, p in params:
            fh.write(np.ascontiguousarray(p.array, dtype="<f4").tobytes())


def _read_checkpoint(path: str | Path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        raw = fh.read(4)
        if len(raw) < 4:
            raise CheckpointError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<I", raw)
        blob = fh.read(hlen)
        if len(blob) < hlen:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
        params = fh.read()
    version = header.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version!r}")
    return header, params


def read_checkpoint_header(path: str | Path) -> dict:
    header, _ = _read_checkpoint(path)
    return header


def load_checkpoint(
    path: str | Path,
    expected_preset: str | None = None,
    expected_planar: bool | None = None,
) -> tuple[Network, int]:
    """Rebuild the network described by the header and restore parameters."""
    header, blob = _read_checkpoint(path)
    desc = header.get("preset", {})
    try:
        preset = NetworkPreset(
            name=desc["name"],
            blocks_per_stage=tuple(desc["blocks_per_stage"]),
            base_channels=desc["base_channels"],
            dropout_rate=desc["dropout_rate"],
        )
        planar = bool(desc["planar"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: incomplete preset descriptor") from exc
    if expected_preset is not None and preset.name != expected_preset:
        raise CheckpointError(
            f"{path}: checkpoint preset {preset.name!r} does not match "
            f"expected {expected_preset!r}"
        )
    if expected_planar is not None and planar != expected_planar:
        raise CheckpointError(
            f"{path}: checkpoint planar={planar} does not match expected "
            f"planar={expected_planar}"
        )
    if header.get("config_digest") != config_digest(preset, planar):
        raise CheckpointError(f"{path}: config digest mismatch")

    net = build_network(preset, seed=0, planar=planar)
    params = net.parameters()
    count = int(sum(p.size for _, p in params))
    if header.get("param_count") != count:
        raise CheckpointError(
            f"{path}: header says {header.get('param_count')} parameters, "
            f"topology needs {count}"
        )
    if len(blob) != count * 4:
        raise CheckpointError(
            f"{path}: parameter blob is {len(blob)} bytes, expected {count * 4}"
        )
    flat = np.frombuffer(blob, dtype="<f4")
    pos = 0
    for _, p in params:
        chunk = flat[pos : pos + p.size].reshape(p.shape)
        p.array[...] = chunk.astype(p.array.dtype)
        pos += p.size
    return net, int(header["epoch"])


# -- metrics log ---------------------------------------------------------------

METRICS_HEADER = "epoch,loss,train_acc,val_acc"


@dataclass
class MetricsLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def append(self, epoch: int, loss: float, train_acc: float, val_acc: float):
        self.rows.append((epoch, float(loss), float(train_acc), float(val_acc)))

    def to_csv(self) -> str:
        lines = [METRICS_HEADER]
        for epoch, loss, train_acc, val_acc in self.rows:
            lines.append(f"{epoch},{loss!r},{train_acc!r},{val_acc!r}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path):
        Path(path).write_text(self.to_csv(), encoding="utf-8")


# -- run configuration and orchestration ---------------------------------------


@dataclass(frozen=True)
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    preset: str = "nano"
    base_channels: int | None = None
    dropout_rate: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)

    def network_preset(self) -> NetworkPreset:
        return get_preset(
            self.preset, base_channels=self.base_channels, dropout_rate=self.dropout_rate
        )

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"run config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        known = {"preprocess", "network", "train"}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown run config sections: {sorted(extra)}")
        pre_raw = raw.get("preprocess", {})
        if not isinstance(pre_raw, dict):
            raise ConfigError("preprocess section must be an object")
        pre = PreprocessConfig.from_json(pre_raw)
        net = raw.get("network", {})
        if not isinstance(net, dict):
            raise ConfigError("network section must be an object")
        unknown_net = set(net) - {"preset", "base_channels", "dropout_rate"}
        if unknown_net:
            raise ConfigError(f"unknown network keys: {sorted(unknown_net)}")
        train_raw = raw.get("train", {})
        if not isinstance(train_raw, dict):
            raise ConfigError("train section must be an object")
        allowed = {
            "per_class_batch",
            "epochs",
            "learning_rate",
            "momentum",
            "seed",
            "precision",
            "lr_step",
            "lr_gamma",
        }
        unknown_train = set(train_raw) - allowed
        if unknown_train:
            raise ConfigError(f"unknown train keys: {sorted(unknown_train)}")
        try:
            train = TrainConfig(**train_raw)
        except TypeError as exc:
            raise ConfigError(f"bad train section: {exc}") from exc
        return cls(
            preprocess=pre,
            preset=net.get("preset", "nano"),
            base_channels=net.get("base_channels"),
            dropout_rate=net.get("dropout_rate", 0.5),
            train=train,
        )

    def to_json(self) -> str:
        payload = {
            "preprocess": self.preprocess.to_json(),
            "network": {
                "preset": self.preset,
                "base_channels": self.base_channels,
                "dropout_rate": self.dropout_rate,
            },
            "train": {
                "per_class_batch": self.train.per_class_batch,
                "epochs": self.train.epochs,
                "learning_rate": self.train.learning_rate,
                "momentum": self.train.momentum,
                "seed": self.train.seed,
                "precision": self.train.precision,
                "lr_step": self.train.lr_step,
                "lr_gamma": self.train.lr_gamma,
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)


@dataclass
class TrainResult:
    network: Network
    metrics: MetricsLog
    mode: str


def run_training(
    manifest: DatasetManifest,
    run_cfg: RunConfig,
    mode: str = "volumetric3d",
    base_dir: str | Path | None = None,
    fmt: str = "raw",
    out_dir: str | Path | None = None,
    log=None,
) -> TrainResult:
    """Train one model end to end and optionally write checkpoint + metrics.

    slicevote2d trains on individual slices (patient label broadcast to every
    slice) but takes the same number of gradient steps per epoch as the
    volumetric run on the same manifest, so the two are budget-matched.
    """
    if mode not in TRAIN_MODES:
        raise ConfigError(f"unknown training mode {mode!r}")
    cfg = run_cfg.train
    set_precision(cfg.precision)
    train_ds = load_split(manifest, run_cfg.preprocess, "train", base_dir, fmt)
    val_ds = None
    if any(r.split == "test" for r in manifest.records):
        val_ds = load_split(manifest, run_cfg.preprocess, "test", base_dir, fmt)

    n_batches = math.ceil(len(train_ds) / cfg.batch_size)
    planar = mode == "slicevote2d"
    fit_ds = to_slice_dataset(train_ds) if planar else train_ds

    net = build_network(run_cfg.network_preset(), seed=cfg.seed, planar=planar)
    sampler = UniformClassSampler(fit_ds.labels, seed=cfg.seed + 1)
    velocity = init_velocity(net)
    metrics = MetricsLog()
    step = 0
    for epoch in range(cfg.epochs):
        stats, step = train_epoch(
            net, fit_ds, sampler, velocity, cfg, epoch, step, n_batches=n_batches
        )
        val_acc = dataset_accuracy(net, val_ds, mode) if val_ds is not None else 0.0
        metrics.append(epoch, stats.mean_loss, stats.train_accuracy, val_acc)
        if log is not None:
            log(
                f"epoch {epoch}: loss {stats.mean_loss:.4f} "
                f"train_acc {stats.train_accuracy:.3f} val_acc {val_acc:.3f}"
            )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, max(cfg.epochs - 1, 0), out / "checkpoint.ckpt")
        metrics.save(out / "metrics.csv")
        (out / "run_config.json").write_text(run_cfg.to_json() + "\n", encoding="utf-8")
    return TrainResult(network=net, metrics=metrics, mode=mode)
