"""
Seeded mini-batch training with an adaptive-moment optimizer, per-epoch
validation, best/last checkpoints and early stopping.

Batch items may be evaluated on worker threads; their gradients are reduced in
batch order, so results do not depend on the schedule.
"""

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from pshape.autodiff import Parameter, Tape
from pshape.checkpoint import load_checkpoint, read_header, save_checkpoint
from pshape.data.manifest import LoadedSample
from pshape.exceptions import (
    ConfigurationError,
    DataError,
    DivergenceError,
    LabelError,
    NonFiniteGradientError,
    NumericError,
)
from pshape.logging import LogConfig, Warnings
from pshape.models import (
    DiscriminativeModel,
    GenerativeModel,
    ShapeModel,
    discriminative_loss,
    generative_loss,
)
from pshape.types import LOSS_LOG_COLUMNS, LossReport


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    seed: int = 0
    patience: int = 20
    workers: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(
                f"learning_rate must be positive, got {self.learning_rate}"
            )
        for name in ("beta1", "beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigurationError(
                    f"{name} must lie in (0, 1), got {getattr(self, name)}"
                )
        if self.batch_size < 1:
            raise ConfigurationError(
                f"batch_size must be at least 1, got {self.batch_size}"
            )
        if self.epochs < 0 or self.patience < 1 or self.workers < 1:
            raise ConfigurationError("epochs must be >= 0, patience and workers >= 1")


class Adam:
    def __init__(
        self,
        params: Sequence[Parameter],
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps_hat: float = 1e-8,
    ):
        self.params = [p for p in params if p.trainable]
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps_hat = beta1, beta2, eps_hat
        self.t = 0
        self.m: Dict[str, np.ndarray] = {
            p.name: np.zeros_like(p.value) for p in self.params
        }
        self.v: Dict[str, np.ndarray] = {
            p.name: np.zeros_like(p.value) for p in self.params
        }

    @classmethod
    def from_config(cls, params: Sequence[Parameter], config: TrainConfig) -> "Adam":
        return cls(
            params, config.learning_rate, config.beta1, config.beta2, config.eps_hat
        )

    def step(self) -> None:
        # every gradient is checked before any parameter moves
        for param in self.params:
            if not np.all(np.isfinite(param.grad)):
                raise NonFiniteGradientError(param.name)
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for param in self.params:
            m = self.beta1 * self.m[param.name] + (1.0 - self.beta1) * param.grad
            v = self.beta2 * self.v[param.name] + (1.0 - self.beta2) * param.grad**2
            self.m[param.name], self.v[param.name] = m, v
            update = (m / correction1) / (np.sqrt(v / correction2) + self.eps_hat)
            param.value = param.value - self.learning_rate * update


def optimizer_step(optimizer: Adam, gradients: Dict[str, np.ndarray]) -> None:
    """Load `gradients` (keyed by parameter name) and take one step."""
    for param in optimizer.params:
        param.grad = np.array(gradients.get(param.name, np.zeros_like(param.value)))
    optimizer.step()


def _condition(model: ShapeModel, sample: LoadedSample):
    if model.architecture.m == 0:
        return None
    return sample.condition


def sample_objective(
    model: ShapeModel,
    tape: Tape,
    sample: LoadedSample,
    eps: Optional[np.ndarray] = None,
):
    """Record the composite loss of one sample; returns (loss tensor, report)."""
    arch = model.architecture
    if isinstance(model, DiscriminativeModel):
        output = model.forward(tape, sample.clouds)
        label = sample.label if arch.task == "classification" else sample.target
        if label is None:
            raise LabelError(f"Subject '{sample.subject}' has no {arch.task} label")
        return discriminative_loss(
            output.prediction, label, output.align_losses, arch.task
        )
    output = model.forward(tape, sample.clouds, _condition(model, sample), eps)
    return generative_loss(output, arch.loss_weights, model.settings, arch.kl_form)


def _latent_noise(model: ShapeModel, seed: int, epoch: int, index: int):
    if not isinstance(model, GenerativeModel):
        return None
    rng = np.random.default_rng([seed, epoch, index, 7])
    return rng.standard_normal(model.architecture.k)


def ordered_map(fn: Callable, items: Sequence, workers: int) -> List:
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def evaluate_loss(
    model: ShapeModel, samples: Sequence[LoadedSample], workers: int = 1
) -> LossReport:
    """Mean loss with the posterior mean (eps = 0) for generative models."""

    def run(sample):
        return sample_objective(model, Tape(), sample)[1]

    return LossReport.mean(ordered_map(run, list(samples), workers))


class EpochRecord(NamedTuple):
    epoch: int
    train: LossReport
    val_total: float


class TrainResult(NamedTuple):
    best_checkpoint: Path
    last_checkpoint: Path
    history: List[EpochRecord]
    best_epoch: int


def _finite(report: LossReport) -> bool:
    return all(math.isfinite(v) for v in report)


def _write_log_row(path: Path, record: EpochRecord) -> None:
    values = [*record.train, record.val_total]
    with path.open("a", newline="") as handle:
        csv.writer(handle).writerow([record.epoch] + [repr(float(v)) for v in values])


def init_references(
    model: ShapeModel,
    samples: Sequence[LoadedSample],
    clouds: Optional[Sequence] = None,
) -> None:
    """Use `clouds` as alignment templates, else the first training sample's clouds."""
    if clouds is None:
        if any(np.any(ref.value) for ref in model.references):
            return
        clouds = samples[0].clouds
        LogConfig.get_logger().debug(
            f"Using subject '{samples[0].subject}' as the alignment reference"
        )
    model.set_references(clouds)


def stored_best_total(
    best_path: Path, model: ShapeModel, val_samples, workers: int = 1
) -> float:
    """Validation total of an existing best checkpoint, so a resumed run only
    replaces it with a better model."""
    if not best_path.exists():
        return math.inf
    val_total = read_header(best_path).get("val_total")
    if val_total is not None:
        return float(val_total)
    stored = load_checkpoint(best_path, model.architecture, model.settings)
    return evaluate_loss(stored, val_samples, workers).total


def train(
    model: ShapeModel,
    train_samples: Sequence[LoadedSample],
    val_samples: Sequence[LoadedSample],
    config: TrainConfig,
    out_dir,
    start_epoch: int = 0,
) -> TrainResult:
    if not train_samples:
        raise DataError("Training split is empty")
    if not val_samples:
        raise DataError("Validation split is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path, last_path = out_dir / "best.psaf", out_dir / "last.psaf"
    log_path = out_dir / "loss.csv"
    if start_epoch == 0 or not log_path.exists():
        with log_path.open("w", newline="") as handle:
            csv.writer(handle).writerow(LOSS_LOG_COLUMNS)

    init_references(model, train_samples)
    logger = LogConfig.get_logger()
    optimizer = Adam.from_config(model.parameters(), config)
    trainable = optimizer.params
    history: List[EpochRecord] = []
    best_total, best_epoch, stale = math.inf, start_epoch, 0
    if start_epoch > 0:
        best_total = stored_best_total(best_path, model, val_samples, config.workers)
    save_checkpoint(model, last_path, start_epoch)
    if not best_path.exists():
        save_checkpoint(model, best_path, start_epoch)

    for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
        LogConfig.switch(f"In epoch {epoch}")
        shuffle = np.random.default_rng([config.seed, epoch])
        order = shuffle.permutation(len(train_samples))
        reports: List[LossReport] = []
        try:
            for start in range(0, len(order), config.batch_size):
                batch = [int(i) for i in order[start : start + config.batch_size]]

                def step(index: int) -> Tuple[Dict[str, np.ndarray], LossReport]:
                    tape = Tape()
                    eps = _latent_noise(model, config.seed, epoch, index)
                    sample = train_samples[index]
                    loss, report = sample_objective(model, tape, sample, eps)
                    return tape.backward(loss).parameters(), report

                results = ordered_map(step, batch, config.workers)
                model.zero_grad()
                for grads, report in results:
                    if not _finite(report):
                        raise DivergenceError(f"Non-finite loss {report}")
                    for param in trainable:
                        if param.name in grads:
                            param.grad = param.grad + grads[param.name] / len(batch)
                    reports.append(report)
                optimizer.step()
            validation = evaluate_loss(model, val_samples, config.workers)
            if not _finite(validation):
                raise DivergenceError(f"Non-finite validation loss {validation}")
        except NumericError as error:
            Warnings.divergence(epoch, str(last_path))
            LogConfig.switch()
            raise DivergenceError(f"Training diverged in epoch {epoch}: {error}")

        record = EpochRecord(epoch, LossReport.mean(reports), validation.total)
        history.append(record)
        _write_log_row(log_path, record)
        save_checkpoint(model, last_path, epoch)
        logger.info(
            f"align={record.train.align:.5f} rec={record.train.rec:.5f} "
            f"latent={record.train.latent:.5f} cls={record.train.cls:.5f} "
            f"total={record.train.total:.5f} val_total={record.val_total:.5f}"
        )
        if validation.total < best_total:
            best_total, best_epoch, stale = validation.total, epoch, 0
            save_checkpoint(model, best_path, epoch, best_total)
        else:
            stale += 1
            if stale >= config.patience:
                Warnings.early_stop(epoch, config.patience)
                break
    LogConfig.switch()
    return TrainResult(best_path, last_path, history, best_epoch)
