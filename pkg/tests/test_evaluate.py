import json

import numpy as np
import pytest

import ctsev.train
from ctsev.errors import ConfigError, ManifestError, ShapeError
from ctsev.evaluate import (
    CLASS_NAMES,
    ConfusionMatrix,
    EvalReport,
    accuracy,
    confusion_matrix,
    evaluate,
    predict_volume_2d_baseline,
    predict_volume_3d,
    render_report,
)
from ctsev.network import build_network, get_preset
from ctsev.preprocess import PreprocessConfig
from ctsev.tensor import Tensor
from ctsev.train import predict_patient_slicevote
from ctsev.volio import (
    DatasetManifest,
    PatientRecord,
    SeverityClass,
    Volume,
    save_volume_raw,
)

CFG = PreprocessConfig(target_hw=(16, 16), target_depth=8)


class TestAccuracy:
    def test_hand_cases(self):
        assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
        assert accuracy([0, 1, 2], [0, 1, 1]) == pytest.approx(2 / 3)
        assert accuracy([2], [0]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ShapeError, match="2 predictions for 3 labels"):
            accuracy([0, 1], [0, 1, 2])

    def test_empty_rejected(self):
        with pytest.raises(ConfigError, match="empty"):
            accuracy([], [])


class TestConfusionMatrix:
    def test_single_true_class_hand_case(self):
        true = [0] * 20
        pred = [0] * 17 + [1] + [2] * 2
        cm = confusion_matrix(pred, true)
        assert cm.counts[0].tolist() == [17, 1, 2]
        norm = cm.row_normalized()
        assert norm[0].tolist() == pytest.approx([0.85, 0.05, 0.10])
        assert cm.per_class_recall()[0] == pytest.approx(0.85)
        assert cm.empty_rows == [1, 2]
        assert np.all(norm[1] == 0.0) and np.all(norm[2] == 0.0)

    def test_accuracy_is_trace_over_total(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 40))
            true = rng.integers(0, 3, size=n)
            pred = rng.integers(0, 3, size=n)
            cm = confusion_matrix(pred, true)
            assert cm.total == n
            assert cm.accuracy() == pytest.approx(np.trace(cm.counts) / n)
            assert cm.accuracy() == pytest.approx(accuracy(pred, true))

    def test_nonempty_rows_sum_to_one(self, rng):
        true = rng.integers(0, 3, size=60)
        pred = rng.integers(0, 3, size=60)
        norm = confusion_matrix(pred, true).row_normalized()
        for c in range(3):
            assert abs(norm[c].sum() - 1.0) <= 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            confusion_matrix([0], [0, 1])


class TestSingleVolumePrediction:
    def test_3d_tie_resolves_to_more_severe(self, rng):
        # fresh networks emit all-zero logits: a three-way tie
        net = build_network(get_preset("nano"), seed=0)
        vol = rng.uniform(size=(8, 16, 16)).astype(np.float32)
        assert predict_volume_3d(net, vol) == SeverityClass.HIGH

    def test_3d_rejects_planar_net(self, rng):
        net = build_network(get_preset("nano"), seed=0, planar=True)
        with pytest.raises(ConfigError, match="volumetric"):
            predict_volume_3d(net, rng.uniform(size=(8, 16, 16)))

    def test_2d_rejects_volumetric_net(self, rng):
        net = build_network(get_preset("nano"), seed=0)
        with pytest.raises(ConfigError, match="planar"):
            predict_volume_2d_baseline(net, rng.uniform(size=(8, 16, 16)))

    def test_2d_all_slices_tied_votes_severe(self, rng):
        net = build_network(get_preset("nano"), seed=0, planar=True)
        vol = rng.uniform(size=(6, 16, 16)).astype(np.float32)
        assert predict_volume_2d_baseline(net, vol) == SeverityClass.HIGH

    def test_accepts_volume_object(self, rng):
        net = build_network(get_preset("nano"), seed=0)
        vol = Volume(
            voxels=Tensor(rng.uniform(size=(8, 16, 16)).astype(np.float32)),
            intensity_unit="normalized",
        )
        assert predict_volume_3d(net, vol) == SeverityClass.HIGH

    def test_rank_checked(self, rng):
        net = build_network(get_preset("nano"), seed=0)
        with pytest.raises(ShapeError, match="D, H, W"):
            predict_volume_3d(net, rng.uniform(size=(16, 16)))

    def test_vote_tie_breaks_to_more_severe(self, monkeypatch, rng):
        fixed = iter([np.array([0, 0, 0, 2, 2, 2]), np.array([0, 1, 1, 0])])
        monkeypatch.setattr(ctsev.train, "predict_classes", lambda net, x: next(fixed))
        vol = rng.uniform(size=(1, 6, 8, 8)).astype(np.float32)
        assert predict_patient_slicevote(object(), vol) == 2
        vol4 = rng.uniform(size=(1, 4, 8, 8)).astype(np.float32)
        assert predict_patient_slicevote(object(), vol4) == 1

    def test_vote_invariant_to_slice_order(self, rng):
        net = build_network(get_preset("nano"), seed=1, planar=True)
        net.head.weights.array[...] = 0.3 * rng.normal(size=net.head.weights.shape)
        vol = rng.uniform(size=(1, 10, 16, 16)).astype(np.float32)
        perm = rng.permutation(10)
        assert predict_patient_slicevote(net, vol) == predict_patient_slicevote(
            net, vol[:, perm]
        )


class TestEvalReport:
    def make_report(self):
        true = [0] * 3 + [1] * 2 + [2] * 1
        pred = [0, 0, 1, 1, 1, 2]
        cm = confusion_matrix(pred, true)
        return EvalReport(
            model="nano",
            mode="volumetric3d",
            n_test=6,
            confusion=cm,
            class_histogram=[3, 2, 1],
        )

    def test_schema_keys_and_order(self):
        doc = self.make_report().to_dict()
        assert list(doc) == [
            "model",
            "mode",
            "n_test",
            "accuracy",
            "confusion_counts",
            "confusion_row_norm",
            "per_class_recall",
            "class_histogram",
        ]
        assert doc["accuracy"] == pytest.approx(5 / 6)
        assert doc["confusion_counts"][0] == [2, 1, 0]
        assert doc["per_class_recall"] == pytest.approx([2 / 3, 1.0, 1.0])

    def test_json_round_trip_and_save(self, tmp_path):
        report = self.make_report()
        parsed = json.loads(report.to_json())
        assert parsed == report.to_dict()
        path = tmp_path / "report.json"
        report.save(path)
        assert path.read_text() == report.to_json() + "\n"

    def test_render_one_decimal_percentages(self):
        text = render_report(self.make_report())
        assert "accuracy 83.3%" in text
        assert "model nano" in text and "patients 6" in text
        for name in CLASS_NAMES:
            assert name in text
        # low row: 2/3, 1/3, 0 as percentages of the row
        low_row = [
            ln
            for ln in text.splitlines()
            if ln.strip().startswith("low") and any(ch.isdigit() for ch in ln)
        ][0]
        assert "66.7" in low_row and "33.3" in low_row


class TestEvaluate:
    def build_manifest(self, tmp_path, rng, order=None):
        # normalized volumes at the final shape skip preprocessing entirely
        specs = [("a", 1), ("b", 2), ("c", 3), ("d", 3), ("e", 5)]
        if order is not None:
            specs = [specs[i] for i in order]
        records = []
        for pid, score in specs:
            rel = f"vols/{pid}"
            vol = Volume(
                voxels=Tensor(rng.uniform(size=(8, 16, 16)).astype(np.float32)),
                intensity_unit="normalized",
            )
            save_volume_raw(vol, tmp_path / rel)
            records.append(
                PatientRecord(id=pid, volume_path=rel, score=score, split="test")
            )
        return DatasetManifest(records=records)

    def test_fresh_volumetric_report(self, tmp_path, rng):
        manifest = self.build_manifest(tmp_path, rng)
        net = build_network(get_preset("nano"), seed=0)
        report = evaluate(net, manifest, CFG, mode="volumetric3d", base_dir=tmp_path)
        assert report.n_test == 5
        assert report.class_histogram == [2, 2, 1]
        # zero-initialized head predicts high for every patient
        assert report.confusion.counts[:, 2].tolist() == [2, 2, 1]
        assert report.confusion.accuracy() == pytest.approx(1 / 5)
        assert report.model == "nano"

    def test_report_independent_of_record_order(self, tmp_path, rng):
        rng_data = np.random.default_rng(5)
        m1 = self.build_manifest(tmp_path / "x", rng_data)
        rng_data = np.random.default_rng(5)
        m2 = self.build_manifest(tmp_path / "y", rng_data, order=[4, 2, 0, 3, 1])
        net = build_network(get_preset("nano"), seed=0)
        net.head.weights.array[...] = 0.3 * rng.normal(size=net.head.weights.shape)
        r1 = evaluate(net, m1, CFG, base_dir=tmp_path / "x")
        r2 = evaluate(net, m2, CFG, base_dir=tmp_path / "y")
        assert r1.to_json() == r2.to_json()

    def test_slicevote_mode(self, tmp_path, rng):
        manifest = self.build_manifest(tmp_path, rng)
        net = build_network(get_preset("nano"), seed=0, planar=True)
        report = evaluate(net, manifest, CFG, mode="slicevote2d", base_dir=tmp_path)
        assert report.mode == "slicevote2d"
        assert report.n_test == 5

    def test_mode_network_mismatch(self, tmp_path, rng):
        manifest = self.build_manifest(tmp_path, rng)
        planar = build_network(get_preset("nano"), seed=0, planar=True)
        volumetric = build_network(get_preset("nano"), seed=0)
        with pytest.raises(ConfigError, match="planar"):
            evaluate(planar, manifest, CFG, mode="volumetric3d", base_dir=tmp_path)
        with pytest.raises(ConfigError, match="volumetric"):
            evaluate(volumetric, manifest, CFG, mode="slicevote2d", base_dir=tmp_path)

    def test_unknown_mode(self, tmp_path, rng):
        manifest = self.build_manifest(tmp_path, rng)
        net = build_network(get_preset("nano"), seed=0)
        with pytest.raises(ConfigError, match="mode"):
            evaluate(net, manifest, CFG, mode="both", base_dir=tmp_path)

    def test_missing_test_split(self, rng):
        manifest = DatasetManifest(
            records=[PatientRecord(id="a", volume_path="x", score=1, split="train")]
        )
        net = build_network(get_preset("nano"), seed=0)
        with pytest.raises(ManifestError, match="test split"):
            evaluate(net, manifest, CFG)
