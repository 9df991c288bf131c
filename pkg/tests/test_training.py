import csv
import logging
import time

import numpy as np
import pytest

from pshape.autodiff import Parameter, Tape
from pshape.checkpoint import load_checkpoint, read_header, save_checkpoint
from pshape.exceptions import (
    ConfigurationError,
    DataError,
    DivergenceError,
    LabelError,
    NonFiniteGradientError,
    NumericError,
)
from pshape.training import (
    Adam,
    TrainConfig,
    evaluate_loss,
    init_references,
    optimizer_step,
    ordered_map,
    sample_objective,
    train,
)
from pshape.types import LOSS_LOG_COLUMNS, LossReport
from tests import random_samples, tiny_model


def read_log(path):
    with path.open() as handle:
        return list(csv.reader(handle))


class TestTrainConfig:
    def test_defaults(self):
        config = TrainConfig()
        assert (config.learning_rate, config.beta1, config.beta2) == (1e-3, 0.9, 0.999)
        assert config.patience == 20

    @pytest.mark.parametrize(
        "overrides",
        [
            dict(learning_rate=0),
            dict(beta1=1.0),
            dict(beta2=0.0),
            dict(batch_size=0),
            dict(patience=0),
            dict(workers=0),
        ],
    )
    def test_invalid_raisesConfigurationError(self, overrides):
        with pytest.raises(ConfigurationError):
            TrainConfig(**overrides)


class TestAdam:
    def test_zeroGradient_leavesParameterUnchanged(self):
        param = Parameter("w", [[1.0, -2.0]])
        optimizer = Adam([param], learning_rate=0.1)
        optimizer.step()
        np.testing.assert_array_equal(param.value, [[1.0, -2.0]])

    def test_firstStep_isUnitUpdate(self):
        param = Parameter("w", [[1.0]])
        optimizer_step(Adam([param], learning_rate=0.1), {"w": np.ones((1, 1))})
        assert param.value[0, 0] == pytest.approx(0.9)

    def test_constantGradient_movesByLearningRate(self):
        param = Parameter("w", [[0.0]])
        optimizer = Adam([param], learning_rate=0.01)
        for _ in range(5):
            optimizer_step(optimizer, {"w": np.full((1, 1), 3.0)})
        assert param.value[0, 0] == pytest.approx(-0.05, rel=1e-6)

    def test_nonFiniteGradient_abortsBeforeAnyUpdate(self):
        first = Parameter("first", [[1.0]])
        second = Parameter("second", [[1.0]])
        optimizer = Adam([first, second], learning_rate=0.1)
        gradients = {"first": np.ones((1, 1)), "second": np.array([[np.nan]])}
        with pytest.raises(NonFiniteGradientError, match="second"):
            optimizer_step(optimizer, gradients)
        assert first.value[0, 0] == 1.0
        assert optimizer.t == 0

    def test_nonTrainableParametersAreSkipped(self):
        frozen = Parameter("frozen", [[1.0]], trainable=False)
        optimizer = Adam([frozen], learning_rate=0.1)
        optimizer_step(optimizer, {"frozen": np.ones((1, 1))})
        assert frozen.value[0, 0] == 1.0
        assert optimizer.params == []

    def test_fromConfig(self):
        config = TrainConfig(learning_rate=0.5, beta1=0.8)
        optimizer = Adam.from_config([Parameter("w", [[0.0]])], config)
        assert (optimizer.learning_rate, optimizer.beta1) == (0.5, 0.8)


class TestOrderedMap:
    def test_keepsInputOrder(self):
        def slow_square(x):
            time.sleep(0.001 * (5 - x))
            return x * x

        assert ordered_map(slow_square, [0, 1, 2, 3, 4], workers=4) == [0, 1, 4, 9, 16]

    def test_serial(self):
        assert ordered_map(str, [1, 2], workers=1) == ["1", "2"]


class TestSampleObjective:
    def test_discriminativeReport(self):
        model = tiny_model()
        init_references(model, random_samples(2))
        loss, report = sample_objective(model, Tape(), random_samples(2)[1])
        assert report.total == pytest.approx(report.align + report.cls, abs=1e-12)
        assert loss.item() == report.total

    def test_regressionWithoutTarget_raisesLabelError(self):
        model = tiny_model(task="regression")
        sample = random_samples(1)[0]._replace(target=None)
        with pytest.raises(LabelError, match="s000"):
            sample_objective(model, Tape(), sample)

    def test_generativeTotalIsWeightedSum(self):
        model = tiny_model("generative", m=2)
        sample = random_samples(1)[0]
        _, report = sample_objective(model, Tape(), sample, eps=[0.5, -0.5])
        expected = report.align + report.rec + 10 * report.latent
        assert report.total == pytest.approx(expected, abs=1e-12)

    def test_evaluateLoss_isMeanOverSamples(self):
        model = tiny_model()
        samples = random_samples(4)
        reports = [sample_objective(model, Tape(), s)[1] for s in samples]
        actual = evaluate_loss(model, samples, workers=2)
        assert actual.total == pytest.approx(np.mean([r.total for r in reports]))


class TestInitReferences:
    def test_firstSampleBecomesReference(self):
        model = tiny_model()
        samples = random_samples(3)
        init_references(model, samples)
        np.testing.assert_array_equal(model.references[0].value, samples[0].clouds[0])

    def test_existingReferencesKept(self):
        model = tiny_model()
        samples = random_samples(3)
        init_references(model, samples, clouds=samples[2].clouds)
        init_references(model, samples)
        np.testing.assert_array_equal(model.references[0].value, samples[2].clouds[0])


class TestTrain:
    def test_writesCheckpointsAndLog(self, tmp_path):
        config = TrainConfig(epochs=3, batch_size=2, learning_rate=0.01)
        samples = random_samples(4)
        result = train(tiny_model(), samples, samples[:2], config, tmp_path)
        assert result.best_checkpoint.is_file()
        assert result.last_checkpoint.is_file()
        rows = read_log(tmp_path / "loss.csv")
        assert tuple(rows[0]) == LOSS_LOG_COLUMNS
        assert [row[0] for row in rows[1:]] == ["1", "2", "3"]
        assert len(result.history) == 3

    def test_logTotalsMatchWeightedComponents(self, tmp_path):
        config = TrainConfig(epochs=2, batch_size=2)
        model = tiny_model("generative", m=2)
        train(model, random_samples(4), random_samples(2), config, tmp_path)
        for row in read_log(tmp_path / "loss.csv")[1:]:
            align, rec, latent, _, total = (float(v) for v in row[1:6])
            assert total == pytest.approx(align + rec + 10 * latent, abs=1e-12)

    def test_sameSeed_bitIdenticalCheckpoints(self, tmp_path):
        config = TrainConfig(epochs=2, batch_size=3, learning_rate=0.01, seed=4)
        for name in ("a", "b"):
            model = tiny_model("generative", m=2)
            train(model, random_samples(5), random_samples(2), config, tmp_path / name)
        for name in ("best.psaf", "last.psaf", "loss.csv"):
            first = (tmp_path / "a" / name).read_bytes()
            assert first == (tmp_path / "b" / name).read_bytes()

    def test_workerCountDoesNotChangeResult(self, tmp_path):
        for workers in (1, 3):
            config = TrainConfig(epochs=2, batch_size=3, seed=1, workers=workers)
            model = tiny_model()
            out_dir = tmp_path / str(workers)
            train(model, random_samples(6), random_samples(2), config, out_dir)
        serial = (tmp_path / "1" / "last.psaf").read_bytes()
        assert serial == (tmp_path / "3" / "last.psaf").read_bytes()

    def test_trainingLowersLoss(self, tmp_path):
        config = TrainConfig(epochs=30, batch_size=4, learning_rate=0.01)
        samples = random_samples(8)
        result = train(tiny_model(), samples, samples[:2], config, tmp_path)
        assert result.history[-1].train.total < result.history[0].train.total

    def test_reconstructionOnlyTraining_memorizesOneSample(self, tmp_path):
        model = tiny_model("generative", loss_weights=(0, 1, 0))
        sample = random_samples(1)
        coarse = TrainConfig(epochs=600, batch_size=1, learning_rate=0.01, patience=600)
        train(model, sample, sample, coarse, tmp_path)
        fine = TrainConfig(epochs=600, batch_size=1, learning_rate=0.002, patience=600)
        result = train(model, sample, sample, fine, tmp_path, start_epoch=600)
        best = load_checkpoint(result.best_checkpoint)
        assert evaluate_loss(best, sample).rec < 0.02
        assert read_header(result.best_checkpoint)["val_total"] < 0.02

    def test_trainingDoesNotTouchSamples(self, tmp_path):
        samples = random_samples(4)
        before = [s.clouds[0].copy() for s in samples]
        train(tiny_model(), samples, samples[:1], TrainConfig(epochs=1), tmp_path)
        for original, sample in zip(before, samples):
            np.testing.assert_array_equal(sample.clouds[0], original)

    def test_earlyStop(self, tmp_path, monkeypatch, caplog):
        caplog.set_level(logging.INFO)
        monkeypatch.setattr(
            "pshape.training.evaluate_loss", lambda *args: LossReport(total=1.0)
        )
        config = TrainConfig(epochs=10, patience=2)
        samples = random_samples(2)
        result = train(tiny_model(), samples, samples[:1], config, tmp_path)
        assert len(result.history) == 3
        assert result.best_epoch == 1
        assert "No validation improvement for 2 epochs" in caplog.text

    def test_resumeAppendsToLog(self, tmp_path):
        config = TrainConfig(epochs=2)
        model = tiny_model()
        samples = random_samples(2)
        train(model, samples, samples[:1], config, tmp_path)
        train(model, samples, samples[:1], config, tmp_path, start_epoch=2)
        rows = read_log(tmp_path / "loss.csv")
        assert [row[0] for row in rows[1:]] == ["1", "2", "3", "4"]

    def test_resumeKeepsBetterStoredBest(self, tmp_path, monkeypatch):
        samples = random_samples(2)
        model = tiny_model()
        train(model, samples, samples[:1], TrainConfig(epochs=2), tmp_path)
        stored = (tmp_path / "best.psaf").read_bytes()
        assert read_header(tmp_path / "best.psaf")["val_total"] < 1e6

        monkeypatch.setattr(
            "pshape.training.evaluate_loss", lambda *args: LossReport(total=1e6)
        )
        config = TrainConfig(epochs=2, learning_rate=0.05)
        result = train(model, samples, samples[:1], config, tmp_path, start_epoch=2)
        assert (tmp_path / "best.psaf").read_bytes() == stored
        assert result.best_epoch == 2

    def test_resumeWithoutRecordedTotal_evaluatesStoredBest(
        self, tmp_path, monkeypatch
    ):
        samples = random_samples(2)
        model = tiny_model()
        save_checkpoint(model, tmp_path / "best.psaf", epoch=3)
        stored = (tmp_path / "best.psaf").read_bytes()
        monkeypatch.setattr(
            "pshape.training.evaluate_loss", lambda *args: LossReport(total=1.0)
        )
        config = TrainConfig(epochs=2, learning_rate=0.05)
        train(model, samples, samples[:1], config, tmp_path, start_epoch=3)
        assert (tmp_path / "best.psaf").read_bytes() == stored

    def test_emptyTrainingSplit_raisesDataError(self, tmp_path):
        with pytest.raises(DataError, match="Training"):
            train(tiny_model(), [], random_samples(1), TrainConfig(), tmp_path)

    def test_emptyValidationSplit_raisesDataError(self, tmp_path):
        with pytest.raises(DataError, match="Validation"):
            train(tiny_model(), random_samples(1), [], TrainConfig(), tmp_path)

    def test_divergence_keepsLastCheckpoint(self, tmp_path, monkeypatch):
        def diverge(*args, **kwargs):
            raise NumericError("loss exploded")

        monkeypatch.setattr("pshape.training.sample_objective", diverge)
        with pytest.raises(DivergenceError, match="epoch 1"):
            samples = random_samples(2)
            train(tiny_model(), samples, samples[:1], TrainConfig(), tmp_path)
        assert (tmp_path / "last.psaf").is_file()
        assert len(read_log(tmp_path / "loss.csv")) == 1
