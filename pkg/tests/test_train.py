import json
import math
import struct

import numpy as np
import pytest

from ctsev.data import LoadedDataset
from ctsev.errors import CheckpointError, ConfigError, SamplerError, ShapeError
from ctsev.layers import softmax_cross_entropy
from ctsev.network import build_network, get_preset
from ctsev.preprocess import PreprocessConfig
from ctsev.synth import PhantomSpec, generate_dataset
from ctsev.tensor import Tensor
from ctsev.train import (
    CHECKPOINT_MAGIC,
    MetricsLog,
    RunConfig,
    TrainConfig,
    UniformClassSampler,
    dataset_accuracy,
    infer_logits,
    init_velocity,
    load_checkpoint,
    predict_patient_slicevote,
    read_checkpoint_header,
    run_training,
    save_checkpoint,
    sgd_step,
    train_epoch,
)


def make_dataset(rng, counts=(6, 6, 6), shape=(4, 8, 8)) -> LoadedDataset:
    n = sum(counts)
    inputs = rng.uniform(0.0, 1.0, size=(n, 1, *shape)).astype(np.float32)
    labels = np.repeat(np.arange(3), counts)
    ids = [f"p{i:03d}" for i in range(n)]
    return LoadedDataset(inputs=inputs, labels=labels, ids=ids)


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.per_class_batch == 3
        assert cfg.batch_size == 9
        assert cfg.momentum == 0.9

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"per_class_batch": 0},
            {"epochs": 0},
            {"learning_rate": -0.1},
            {"momentum": 1.0},
            {"momentum": -0.1},
            {"precision": "half"},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_zero_learning_rate_allowed(self):
        assert TrainConfig(learning_rate=0.0).learning_rate == 0.0

    def test_lr_schedule(self):
        cfg = TrainConfig(learning_rate=0.1, lr_step=2, lr_gamma=0.1)
        got = [cfg.lr_at(e) for e in range(5)]
        assert got == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001])

    def test_lr_constant_without_step(self):
        cfg = TrainConfig(learning_rate=0.1)
        assert all(cfg.lr_at(e) == 0.1 for e in range(10))


class TestUniformClassSampler:
    def assert_exact_per_class(self, labels, batch_idx, per_class):
        picked = labels[batch_idx]
        for c in range(3):
            assert np.count_nonzero(picked == c) == per_class

    def test_every_batch_balanced(self):
        labels = np.repeat(np.arange(3), (10, 10, 10))
        sampler = UniformClassSampler(labels, seed=0)
        for _ in range(2):
            sampler.start_epoch()
            for _ in range(math.ceil(30 / 6)):
                self.assert_exact_per_class(labels, sampler.batch(2), 2)

    def test_imbalanced_classes_stay_balanced(self):
        labels = np.repeat(np.arange(3), (100, 40, 20))
        sampler = UniformClassSampler(labels, seed=1)
        sampler.start_epoch()
        n_batches = math.ceil(160 / 9)
        for _ in range(n_batches):
            idx = sampler.batch(3)
            assert len(idx) == 9
            self.assert_exact_per_class(labels, np.array(idx), 3)

    def test_replacement_tops_up_short_class(self):
        labels = np.array([0, 0, 0, 0, 0, 1, 1, 2, 2])
        sampler = UniformClassSampler(labels, seed=2)
        sampler.start_epoch()
        idx = np.array(sampler.batch(5))
        self.assert_exact_per_class(labels, idx, 5)
        # class 2 only has members at positions 7 and 8
        assert set(idx[labels[idx] == 2]) <= {7, 8}

    def test_missing_class_rejected(self):
        with pytest.raises(SamplerError, match="class 2"):
            UniformClassSampler(np.array([0, 0, 1, 1]), seed=0)

    def test_deterministic_given_seed(self):
        labels = np.repeat(np.arange(3), (7, 5, 4))
        seq = []
        for _ in range(2):
            sampler = UniformClassSampler(labels, seed=9)
            epoch_batches = []
            for _ in range(2):
                sampler.start_epoch()
                epoch_batches.extend(sampler.batch(2) for _ in range(3))
            seq.append(epoch_batches)
        assert seq[0] == seq[1]

    def test_epoch_covers_each_class_pool(self):
        # within one epoch a class of exactly k*b members is dealt without repeats
        labels = np.repeat(np.arange(3), (6, 6, 6))
        sampler = UniformClassSampler(labels, seed=4)
        sampler.start_epoch()
        seen = [i for _ in range(3) for i in sampler.batch(2)]
        assert sorted(seen) == list(range(18))


class _Pair:
    """Minimal parameters() carrier for optimizer unit tests."""

    def __init__(self, w, b=0.0):
        self.w = Tensor(np.array([w], dtype=np.float64))
        self.b = Tensor(np.array([b], dtype=np.float64))

    def parameters(self):
        return [("w", self.w), ("b", self.b)]


def _grads(gw, gb=0.0):
    return [Tensor(np.array([gw], dtype=np.float64)), Tensor(np.array([gb], dtype=np.float64))]


class TestSgdStep:
    def test_plain_descent_hand_value(self):
        net = _Pair(1.0)
        v = [np.zeros(1), np.zeros(1)]
        sgd_step(net, _grads(2.0), v, learning_rate=0.1, momentum=0.0)
        assert net.w.array[0] == pytest.approx(0.8)

    def test_momentum_two_steps_hand_values(self):
        net = _Pair(0.0)
        v = [np.zeros(1), np.zeros(1)]
        sgd_step(net, _grads(1.0), v, learning_rate=1.0, momentum=0.9)
        assert net.w.array[0] == pytest.approx(-1.0)
        sgd_step(net, _grads(1.0), v, learning_rate=1.0, momentum=0.9)
        assert v[0][0] == pytest.approx(1.9)
        assert net.w.array[0] == pytest.approx(-2.9)

    def test_zero_gradient_zero_velocity_is_fixed_point(self):
        net = _Pair(3.0, -2.0)
        v = [np.zeros(1), np.zeros(1)]
        sgd_step(net, _grads(0.0), v, learning_rate=0.5, momentum=0.9)
        assert net.w.array[0] == 3.0 and net.b.array[0] == -2.0

    def test_length_mismatch_rejected(self):
        net = _Pair(1.0)
        with pytest.raises(ShapeError, match="length"):
            sgd_step(net, _grads(1.0)[:1], [np.zeros(1), np.zeros(1)], 0.1, 0.0)

    def test_shape_mismatch_rejected(self):
        net = _Pair(1.0)
        bad = [Tensor(np.zeros((2, 2))), Tensor(np.zeros(1))]
        with pytest.raises(ShapeError, match="w"):
            sgd_step(net, bad, [np.zeros(1), np.zeros(1)], 0.1, 0.0)


class TestTrainEpoch:
    def setup_run(self, rng, **cfg_kwargs):
        base = dict(per_class_batch=2, epochs=1, learning_rate=0.05, seed=0)
        base.update(cfg_kwargs)
        cfg = TrainConfig(**base)
        ds = make_dataset(rng)
        net = build_network(get_preset("nano"), seed=cfg.seed)
        sampler = UniformClassSampler(ds.labels, seed=cfg.seed + 1)
        return net, ds, sampler, cfg

    def test_step_counter_and_batch_count(self, rng):
        net, ds, sampler, cfg = self.setup_run(rng)
        velocity = init_velocity(net)
        stats, step = train_epoch(net, ds, sampler, velocity, cfg, epoch=0, step_offset=5)
        assert step == 5 + math.ceil(18 / 6)
        assert 0.0 <= stats.train_accuracy <= 1.0
        assert np.isfinite(stats.mean_loss)

    def test_n_batches_override(self, rng):
        net, ds, sampler, cfg = self.setup_run(rng)
        _, step = train_epoch(
            net, ds, sampler, init_velocity(net), cfg, epoch=0, step_offset=0, n_batches=7
        )
        assert step == 7

    def test_zero_learning_rate_leaves_parameters_untouched(self, rng):
        net, ds, sampler, cfg = self.setup_run(rng, learning_rate=0.0)
        before = [p.array.copy() for _, p in net.parameters()]
        train_epoch(net, ds, sampler, init_velocity(net), cfg, epoch=0, step_offset=0)
        for (_, p), b in zip(net.parameters(), before):
            assert np.array_equal(p.array, b)

    def test_identical_runs_bit_identical(self, rng):
        results = []
        for _ in range(2):
            rng2 = np.random.default_rng(77)
            ds = make_dataset(rng2)
            cfg = TrainConfig(per_class_batch=2, epochs=1, learning_rate=0.05, seed=1)
            net = build_network(get_preset("nano"), seed=cfg.seed)
            sampler = UniformClassSampler(ds.labels, seed=cfg.seed + 1)
            stats, _ = train_epoch(net, ds, sampler, init_velocity(net), cfg, 0, 0)
            results.append((stats, [p.array.copy() for _, p in net.parameters()]))
        assert results[0][0] == results[1][0]
        for a, b in zip(results[0][1], results[1][1]):
            assert np.array_equal(a, b)

    def test_training_reduces_loss_on_fixed_batch(self, rng):
        # several epochs over a tiny dataset should strictly reduce the loss
        ds = make_dataset(rng, counts=(2, 2, 2))
        cfg = TrainConfig(per_class_batch=2, epochs=1, learning_rate=0.05, seed=3)
        net = build_network(get_preset("nano"), seed=3)
        sampler = UniformClassSampler(ds.labels, seed=4)
        velocity = init_velocity(net)

        def full_loss():
            logits = infer_logits(net, ds.inputs)
            loss, _ = softmax_cross_entropy(Tensor(logits), ds.labels)
            return loss

        start = full_loss()
        step = 0
        for epoch in range(8):
            _, step = train_epoch(net, ds, sampler, velocity, cfg, epoch, step)
        assert full_loss() < start

    def test_fresh_network_first_batch_loss_is_uniform(self, rng):
        # the zero-initialized head predicts uniformly before any update,
        # so the first-batch loss starts at ln 3 regardless of data or seed
        ds = make_dataset(rng, counts=(3, 3, 3))
        net = build_network(get_preset("nano"), seed=0)
        logits, _ = net.forward(Tensor(ds.inputs), mode="train", rng_key=(0, 0))
        loss, _ = softmax_cross_entropy(logits, ds.labels)
        assert abs(loss - math.log(3)) <= 1e-6
        assert abs(loss - math.log(3)) <= 0.2  # the contract-level band


class TestInference:
    def test_chunked_logits_match_single_pass(self, rng):
        # batch-shape-dependent BLAS blocking reorders float32 sums, so the
        # comparison is close, not bitwise
        ds = make_dataset(rng, counts=(3, 3, 3))
        net = build_network(get_preset("nano"), seed=0)
        net.head.weights.array[...] = 0.3 * rng.normal(size=net.head.weights.shape)
        whole = infer_logits(net, ds.inputs, chunk=64)
        chunked = infer_logits(net, ds.inputs, chunk=2)
        assert np.allclose(whole, chunked, rtol=1e-5, atol=1e-6)

    def test_slicevote_majority(self, rng):
        # planar net votes per slice; force agreement by feeding equal slices
        net = build_network(get_preset("nano"), seed=1, planar=True)
        net.head.weights.array[...] = 0.3 * rng.normal(size=net.head.weights.shape)
        vol = np.broadcast_to(
            rng.uniform(size=(1, 1, 8, 8)).astype(np.float32), (1, 6, 8, 8)
        ).copy()
        cls = predict_patient_slicevote(net, vol)
        per_slice = infer_logits(net, vol.transpose(1, 0, 2, 3)[:, :, None])
        assert cls == int(np.argmax(per_slice[0]))

    def test_dataset_accuracy_modes(self, rng):
        ds = make_dataset(rng, counts=(2, 2, 2))
        net3 = build_network(get_preset("nano"), seed=0)
        acc = dataset_accuracy(net3, ds, "volumetric3d")
        assert 0.0 <= acc <= 1.0
        with pytest.raises(ConfigError, match="mode"):
            dataset_accuracy(net3, ds, "2d")


def rewrite_header(path, mutate):
    data = path.read_bytes()
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen])
    mutate(header)
    blob = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob + data[12 + hlen :])


class TestCheckpoints:
    def save_one(self, tmp_path, seed=3, planar=False):
        net = build_network(get_preset("nano"), seed=seed, planar=planar)
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, epoch=4, path=path)
        return net, path

    def test_round_trip_bit_exact(self, tmp_path, rng):
        net, path = self.save_one(tmp_path)
        loaded, epoch = load_checkpoint(path)
        assert epoch == 4
        for (na, pa), (nb, pb) in zip(net.parameters(), loaded.parameters()):
            assert na == nb
            assert np.array_equal(pa.array, pb.array), na
        x = Tensor(rng.uniform(size=(2, 1, 8, 8, 8)).astype(np.float32))
        la, _ = net.forward(x)
        lb, _ = loaded.forward(x)
        assert np.array_equal(la.array, lb.array)

    def test_save_is_deterministic(self, tmp_path):
        net, path = self.save_one(tmp_path)
        other = tmp_path / "again.ckpt"
        save_checkpoint(net, epoch=4, path=other)
        assert path.read_bytes() == other.read_bytes()

    def test_header_fields(self, tmp_path):
        net, path = self.save_one(tmp_path, planar=True)
        header = read_checkpoint_header(path)
        assert header["epoch"] == 4
        assert header["preset"]["name"] == "nano"
        assert header["preset"]["planar"] is True
        assert header["param_count"] == sum(p.size for _, p in net.parameters())

    def test_expected_preset_mismatch(self, tmp_path):
        _, path = self.save_one(tmp_path)
        with pytest.raises(CheckpointError, match="does not match"):
            load_checkpoint(path, expected_preset="s50")

    def test_expected_planar_mismatch(self, tmp_path):
        _, path = self.save_one(tmp_path, planar=False)
        with pytest.raises(CheckpointError, match="planar"):
            load_checkpoint(path, expected_planar=True)

    def test_bad_magic(self, tmp_path):
        _, path = self.save_one(tmp_path)
        data = path.read_bytes()
        path.write_bytes(b"NOTACKPT" + data[8:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_header_length(self, tmp_path):
        path = tmp_path / "net.ckpt"
        path.write_bytes(CHECKPOINT_MAGIC + b"\x01\x02")
        with pytest.raises(CheckpointError, match="header length"):
            load_checkpoint(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "net.ckpt"
        path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", 999) + b"{}")
        with pytest.raises(CheckpointError, match="truncated header"):
            load_checkpoint(path)

    def test_corrupt_header_json(self, tmp_path):
        path = tmp_path / "net.ckpt"
        junk = b"not json at all"
        path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(junk)) + junk)
        with pytest.raises(CheckpointError, match="corrupt header"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        _, path = self.save_one(tmp_path)
        rewrite_header(path, lambda h: h.update(version=99))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_digest_mismatch(self, tmp_path):
        _, path = self.save_one(tmp_path)
        rewrite_header(path, lambda h: h.update(config_digest="0" * 64))
        with pytest.raises(CheckpointError, match="digest"):
            load_checkpoint(path)

    def test_param_count_mismatch(self, tmp_path):
        _, path = self.save_one(tmp_path)
        rewrite_header(path, lambda h: h.update(param_count=h["param_count"] + 1))
        with pytest.raises(CheckpointError, match="parameters"):
            load_checkpoint(path)

    def test_truncated_blob(self, tmp_path):
        _, path = self.save_one(tmp_path)
        data = path.read_bytes()
        path.write_bytes(data[:-4])
        with pytest.raises(CheckpointError, match="blob"):
            load_checkpoint(path)


class TestMetricsLog:
    def test_header_and_repr_rows(self):
        log = MetricsLog()
        log.append(0, 1 / 3, 2 / 3, 1.0)
        log.append(1, 0.5, 1.0, 0.25)
        lines = log.to_csv().splitlines()
        assert lines[0] == "epoch,loss,train_acc,val_acc"
        assert lines[1] == f"0,{(1 / 3)!r},{(2 / 3)!r},1.0"
        assert lines[2] == "1,0.5,1.0,0.25"

    def test_save_round_trip_bytes(self, tmp_path):
        log = MetricsLog()
        log.append(0, 0.1234567890123, 0.5, 0.5)
        path = tmp_path / "metrics.csv"
        log.save(path)
        assert path.read_text() == log.to_csv()
        assert path.read_text().endswith("\n")


class TestRunConfig:
    def test_default_round_trip(self):
        cfg = RunConfig()
        assert RunConfig.from_json(cfg.to_json()) == cfg

    def test_custom_round_trip(self):
        cfg = RunConfig(
            preprocess=PreprocessConfig(target_hw=(32, 32), target_depth=16),
            preset="s50",
            base_channels=4,
            dropout_rate=0.3,
            train=TrainConfig(per_class_batch=2, epochs=7, learning_rate=0.2, seed=5),
        )
        assert RunConfig.from_json(cfg.to_json()) == cfg

    def test_empty_object_gives_defaults(self):
        assert RunConfig.from_json("{}") == RunConfig()

    @pytest.mark.parametrize(
        "doc,frag",
        [
            ('{"foo": {}}', "unknown run config sections"),
            ('{"network": {"depth": 50}}', "unknown network keys"),
            ('{"train": {"lr": 0.1}}', "unknown train keys"),
            ('{"train": []}', "train section"),
            ("[1, 2]", "JSON object"),
            ("{nope", "not valid JSON"),
        ],
    )
    def test_bad_documents_rejected(self, doc, frag):
        with pytest.raises(ConfigError, match=frag):
            RunConfig.from_json(doc)

    def test_network_preset_override(self):
        cfg = RunConfig(preset="s100", base_channels=2, dropout_rate=0.1)
        p = cfg.network_preset()
        assert p.name == "s100" and p.base_channels == 2 and p.dropout_rate == 0.1


@pytest.fixture(scope="module")
def phantom_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    spec = PhantomSpec(height=48, width=48, depth_range=(8, 10), seed=11)
    manifest = generate_dataset(out, spec, counts=(2, 2, 2), test_fraction=0.2)
    return out, manifest


def tiny_run_config(epochs=2):
    return RunConfig(
        preprocess=PreprocessConfig(target_hw=(16, 16), target_depth=8),
        preset="nano",
        train=TrainConfig(per_class_batch=1, epochs=epochs, learning_rate=0.01, seed=0),
    )


class TestRunTraining:
    def test_unknown_mode_rejected(self, phantom_dataset):
        out, manifest = phantom_dataset
        with pytest.raises(ConfigError, match="mode"):
            run_training(manifest, tiny_run_config(), mode="3d", base_dir=out)

    def test_volumetric_artifacts_and_metrics(self, phantom_dataset, tmp_path):
        out, manifest = phantom_dataset
        run_dir = tmp_path / "run"
        result = run_training(
            manifest, tiny_run_config(), mode="volumetric3d", base_dir=out, out_dir=run_dir
        )
        assert result.mode == "volumetric3d"
        assert len(result.metrics.rows) == 2
        net, epoch = load_checkpoint(run_dir / "checkpoint.ckpt", expected_preset="nano")
        assert epoch == 1
        assert not net.planar
        csv = (run_dir / "metrics.csv").read_text()
        assert csv.splitlines()[0] == "epoch,loss,train_acc,val_acc"
        assert len(csv.splitlines()) == 3
        reread = RunConfig.from_json((run_dir / "run_config.json").read_text())
        assert reread == tiny_run_config()

    def test_repeat_runs_byte_identical(self, phantom_dataset, tmp_path):
        out, manifest = phantom_dataset
        dirs = [tmp_path / "a", tmp_path / "b"]
        for d in dirs:
            run_training(manifest, tiny_run_config(), mode="volumetric3d", base_dir=out, out_dir=d)
        for name in ("checkpoint.ckpt", "metrics.csv", "run_config.json"):
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name

    def test_slicevote_trains_planar_with_matched_budget(self, phantom_dataset, tmp_path):
        out, manifest = phantom_dataset
        run_dir = tmp_path / "run2d"
        result = run_training(
            manifest, tiny_run_config(epochs=1), mode="slicevote2d", base_dir=out, out_dir=run_dir
        )
        assert result.network.planar
        header = read_checkpoint_header(run_dir / "checkpoint.ckpt")
        assert header["preset"]["planar"] is True
