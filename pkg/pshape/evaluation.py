"""
Metrics and experiment drivers: classification and regression scores, the
reconstruction-error curve over latent size, synthesize-then-classify, latent
feature heads, latent traversals and deformation localisation.
"""

import csv
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from pshape import DEFAULT_SYNTH_SIZES
from pshape.autodiff import Parameter, Tape, softmax_cross_entropy, squared_error
from pshape.blocks import MLP
from pshape.checkpoint import load_checkpoint
from pshape.config import RunConfig
from pshape.data.io import PathLike, normalize, write_ply
from pshape.data.manifest import LoadedSample
from pshape.exceptions import (
    ConfigurationError,
    DataError,
    DegenerateCloudError,
    LabelError,
)
from pshape.logging import LogConfig, Warnings
from pshape.models import DiscriminativeModel, GenerativeModel, build_model, generate
from pshape.training import Adam, TrainConfig, ordered_map, train
from pshape.transport import emd
from pshape.types import (
    RECON_CURVE_COLUMNS,
    SCENARIOS,
    SYNTH_CURVE_COLUMNS,
    BumpCap,
    ClassificationReport,
    CurvePoint,
    PointCloud,
)

FEATURE_HEAD_HIDDEN = (128,)
MAX_REDRAWS = 20


def _paired(predictions, targets) -> Tuple[np.ndarray, np.ndarray]:
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    if len(predictions) == 0 or len(targets) == 0:
        raise DataError("Cannot score an empty prediction set")
    if predictions.shape != targets.shape:
        raise DataError(
            f"{len(predictions)} prediction(s) but {len(targets)} target(s)"
        )
    return predictions, targets


def classify_metrics(
    predictions: Sequence[int], labels: Sequence[int], classes: Optional[int] = None
) -> ClassificationReport:
    """Macro-averaged precision, recall and F1 plus the confusion matrix.

    Rows of the confusion matrix are true labels, columns predictions. A class that
    is never predicted scores precision 0; classes absent from `labels` are left out
    of the averages.
    """
    predictions, labels = _paired(predictions, labels)
    predictions, labels = predictions.astype(int), labels.astype(int)
    if classes is None:
        classes = int(max(predictions.max(), labels.max())) + 1
    confusion = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    true_positive = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    present = actual > 0
    precision = np.divide(
        true_positive, predicted, out=np.zeros(classes), where=predicted > 0
    )
    recall = np.divide(true_positive, actual, out=np.zeros(classes), where=actual > 0)
    denominator = precision + recall
    f1 = np.divide(
        2 * precision * recall,
        denominator,
        out=np.zeros(classes),
        where=denominator > 0,
    )
    return ClassificationReport(
        precision=float(precision[present].mean()),
        recall=float(recall[present].mean()),
        f1=float(f1[present].mean()),
        confusion=confusion,
        accuracy=float(true_positive.sum() / len(labels)),
    )


def regression_mae(predictions: Sequence[float], targets: Sequence[float]) -> float:
    predictions, targets = _paired(predictions, targets)
    return float(np.mean(np.abs(predictions.astype(float) - targets.astype(float))))


def predict(
    model: DiscriminativeModel, samples: Sequence[LoadedSample], workers: int = 1
) -> np.ndarray:
    """Class indices for classifiers, scalar predictions for regressors."""
    outputs = ordered_map(lambda s: model.predict(s.clouds), list(samples), workers)
    if model.architecture.task == "classification":
        return np.array([int(np.argmax(o)) for o in outputs], dtype=int)
    return np.array([float(o[0]) for o in outputs])


def _labels(samples: Sequence[LoadedSample]) -> np.ndarray:
    if any(s.label is None for s in samples):
        raise LabelError("Every evaluated sample needs a class label")
    return np.array([s.label for s in samples], dtype=int)


def _targets(samples: Sequence[LoadedSample]) -> np.ndarray:
    if any(s.target is None for s in samples):
        raise LabelError("Every evaluated sample needs a regression target")
    return np.array([s.target for s in samples], dtype=float)


def evaluate_classifier(
    model: DiscriminativeModel, samples: Sequence[LoadedSample], workers: int = 1
) -> ClassificationReport:
    return classify_metrics(
        predict(model, samples, workers), _labels(samples), model.architecture.classes
    )


def evaluate_regressor(
    model: DiscriminativeModel, samples: Sequence[LoadedSample], workers: int = 1
) -> float:
    return regression_mae(predict(model, samples, workers), _targets(samples))


def constant_baseline_mae(train_samples, test_samples) -> float:
    """MAE of always predicting the mean training target."""
    mean = float(np.mean(_targets(train_samples)))
    targets = _targets(test_samples)
    return regression_mae(np.full(len(targets), mean), targets)


# reconstruction-error curve


class CurveJob(NamedTuple):
    scenario: str
    k: int
    structures: Tuple[int, ...]
    conditional: bool

    @property
    def name(self) -> str:
        members = "-".join(str(s) for s in self.structures)
        return f"{self.scenario}-k{self.k}-s{members}"


def curve_jobs(
    scenarios: Sequence[str], ks: Sequence[int], structures: int
) -> List[CurveJob]:
    """One model per structure for single scenarios, one joint model otherwise."""
    jobs = []
    for scenario in scenarios:
        if scenario not in SCENARIOS:
            raise ConfigurationError(
                f"Unknown scenario '{scenario}', expected {SCENARIOS}"
            )
        conditional = scenario.endswith("-cond")
        if scenario.startswith("single"):
            groups = [(s,) for s in range(structures)]
        else:
            groups = [tuple(range(structures))]
        for k in ks:
            for group in groups:
                jobs.append(CurveJob(scenario, k, group, conditional))
    return jobs


def _restrict(samples: Sequence[LoadedSample], job: CurveJob) -> List[LoadedSample]:
    restricted = []
    for sample in samples:
        if job.conditional and sample.condition is None:
            raise ConfigurationError(
                f"Scenario '{job.scenario}' needs a condition "
                f"for subject '{sample.subject}'"
            )
        restricted.append(
            sample._replace(
                clouds=[sample.clouds[s] for s in job.structures],
                condition=sample.condition if job.conditional else None,
            )
        )
    return restricted


def _job_config(config: RunConfig, job: CurveJob, m: int) -> RunConfig:
    values = config.to_dict()
    values.update(
        structures=len(job.structures), k=job.k, m=m if job.conditional else 0
    )
    return RunConfig.from_dict(values)


def reconstruction_curve(
    config: RunConfig,
    splits: Tuple[Sequence[LoadedSample], ...],
    ks: Sequence[int] = (1, 2, 3, 4, 5),
    scenarios: Sequence[str] = SCENARIOS,
    out_dir: PathLike = ".",
    train_missing: bool = True,
    workers: int = 1,
) -> List[CurvePoint]:
    """Mean posterior-mean reconstruction EMD on the test split per scenario and k.

    Each grid point uses the checkpoint `<out_dir>/<job>/best.psaf`, trained on the
    train/val splits when absent and `train_missing` is set. Multi-structure points
    report the latent size per structure, k / (number of structures).
    """
    train_samples, val_samples, test_samples = splits
    if not test_samples:
        raise DataError("Test split is empty")
    out_dir = Path(out_dir)
    logger = LogConfig.get_logger()
    structures = len(test_samples[0].clouds)
    conditions = [s.condition for s in test_samples if s.condition is not None]
    m = len(conditions[0]) if conditions else 0

    errors: Dict[Tuple[str, int], List[float]] = {}
    for job in curve_jobs(scenarios, ks, structures):
        job_config = _job_config(config, job, m)
        checkpoint = out_dir / job.name / "best.psaf"
        if not checkpoint.exists():
            if not train_missing:
                raise ConfigurationError(
                    f"Missing checkpoint {checkpoint} for {job.name}"
                )
            logger.info(f"Training {job.name}")
            model = build_model(
                job_config.architecture("generative"), job_config.transport_settings()
            )
            train(
                model,
                _restrict(train_samples, job),
                _restrict(val_samples, job),
                job_config.train_config(workers),
                checkpoint.parent,
            )
        model = load_checkpoint(
            checkpoint,
            job_config.architecture("generative"),
            job_config.transport_settings(),
        )

        def reconstruction_error(sample: LoadedSample) -> float:
            output = model.forward(Tape(), sample.clouds, sample.condition)
            return float(
                np.mean(
                    [
                        emd(target.value, recon.value, model.settings)
                        for target, recon in zip(output.aligned, output.reconstructions)
                    ]
                )
            )

        test_job = _restrict(test_samples, job)
        scores = ordered_map(reconstruction_error, test_job, workers)
        errors.setdefault((job.scenario, job.k), []).append(float(np.mean(scores)))

    points = []
    for scenario in scenarios:
        single = scenario.startswith("single")
        for k in ks:
            per_structure = float(k) if single else k / structures
            mean_emd = float(np.mean(errors[(scenario, k)]))
            points.append(CurvePoint(scenario, per_structure, mean_emd))
            logger.info(f"{scenario} k={per_structure:g}: mean EMD {mean_emd:.5f}")
    return points


# synthesize-then-classify


def synthesize(
    model: GenerativeModel, size: int, seed: int, normalized: bool = True
) -> List[LoadedSample]:
    """Generated samples whose labels equal their one-hot conditions, alternating.

    With `normalized`, a latent vector whose decoded clouds collapse to a point is
    redrawn, up to `MAX_REDRAWS` times per sample.
    """
    classes = model.architecture.m
    if classes < 1:
        raise ConfigurationError("Synthesis needs a conditional generative model")
    rng = np.random.default_rng([seed, size])
    samples = []
    for index in range(size):
        label = index % classes
        condition = np.eye(classes)[label]
        clouds = _draw_clouds(model, rng, condition, index, normalized)
        subject = f"synthetic{index:05d}"
        samples.append(LoadedSample(clouds, label, None, condition, subject))
    return samples


def _draw_clouds(model, rng, condition, index: int, normalized: bool):
    for _ in range(MAX_REDRAWS + 1):
        clouds = generate(model, rng.standard_normal(model.architecture.k), condition)
        if not normalized:
            return clouds
        try:
            return [normalize(cloud) for cloud in clouds]
        except DegenerateCloudError:
            Warnings.degenerate_sample(index)
    raise DegenerateCloudError(
        f"Generator keeps producing collapsed clouds for condition {list(condition)} "
        f"({MAX_REDRAWS + 1} latent draws); is the checkpoint trained?"
    )


def _fit_classifier(
    config: RunConfig,
    train_samples: Sequence[LoadedSample],
    val_samples: Sequence[LoadedSample],
    out_dir: Path,
    workers: int,
    classes: int,
) -> DiscriminativeModel:
    values = config.to_dict()
    values.update(task="classification", m=0, classes=classes, label=None)
    job_config = RunConfig.from_dict(values)
    model = build_model(
        job_config.architecture("discriminative"), job_config.transport_settings()
    )
    result = train(
        model, train_samples, val_samples, job_config.train_config(workers), out_dir
    )
    return load_checkpoint(
        result.best_checkpoint, settings=job_config.transport_settings()
    )


def synth_then_classify(
    generator: GenerativeModel,
    config: RunConfig,
    splits: Tuple[Sequence[LoadedSample], ...],
    sizes: Sequence[int] = DEFAULT_SYNTH_SIZES,
    out_dir: PathLike = ".",
    include_real: bool = True,
    workers: int = 1,
) -> List[Tuple[str, float]]:
    """Accuracy on the real test split of classifiers trained on generated clouds.

    One seventh of every synthetic set is held out for early stopping. With
    `include_real` a classifier trained on the real train split is scored too,
    reported with size "real".
    """
    train_samples, val_samples, test_samples = splits
    if not test_samples:
        raise DataError("Test split is empty")
    out_dir = Path(out_dir)
    logger = LogConfig.get_logger()
    rows = []
    for size in sizes:
        synthetic = synthesize(generator, size, config.seed, config.normalize)
        held_out = max(1, size // 7)
        if size - held_out < 1:
            raise ConfigurationError(
                f"Synthetic set of size {size} is too small to split"
            )
        classifier = _fit_classifier(
            config,
            synthetic[:-held_out],
            synthetic[-held_out:],
            out_dir / f"synth{size}",
            workers,
            generator.architecture.m,
        )
        accuracy = evaluate_classifier(classifier, test_samples, workers).accuracy
        logger.info(f"Synthetic set of {size}: test accuracy {accuracy:.4f}")
        rows.append((str(size), accuracy))
    if include_real:
        classifier = _fit_classifier(
            config,
            train_samples,
            val_samples,
            out_dir / "real",
            workers,
            generator.architecture.m,
        )
        accuracy = evaluate_classifier(classifier, test_samples, workers).accuracy
        logger.info(f"Real training split: test accuracy {accuracy:.4f}")
        rows.append(("real", accuracy))
    return rows


# latent features


def encode_dataset(
    model: GenerativeModel, samples: Sequence[LoadedSample], workers: int = 1
) -> np.ndarray:
    """Posterior means, one row per sample."""
    if not samples:
        raise DataError("Nothing to encode")
    means = ordered_map(lambda s: model.encode(s.clouds).mu, list(samples), workers)
    return np.vstack(means)


class FeatureHead:
    """Small MLP predicting a label or target from latent features."""

    def __init__(self, features: int, task: str, classes: int, seed: int = 0):
        self.task = task
        self.classes = classes
        outputs = classes if task == "classification" else 1
        rng = np.random.default_rng(seed)
        self.mlp = MLP("feature_head", (features, *FEATURE_HEAD_HIDDEN, outputs), rng)

    def parameters(self) -> List[Parameter]:
        return self.mlp.parameters()

    def loss(self, tape: Tape, feature: np.ndarray, target):
        output = self.mlp(tape.constant(feature))
        if self.task == "classification":
            return softmax_cross_entropy(output, int(target))
        return squared_error(output, float(target))

    def predict(self, features: np.ndarray) -> np.ndarray:
        rows = np.atleast_2d(features)
        outputs = [self.mlp(Tape().constant(f)).value[0] for f in rows]
        if self.task == "classification":
            return np.array([int(np.argmax(o)) for o in outputs], dtype=int)
        return np.array([float(o[0]) for o in outputs])


def fit_feature_head(
    features: np.ndarray,
    targets: Sequence,
    task: str,
    config: TrainConfig,
    classes: int = 2,
) -> FeatureHead:
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    targets = list(targets)
    if len(features) == 0 or len(features) != len(targets):
        raise DataError(f"{len(features)} feature row(s) for {len(targets)} target(s)")
    if any(t is None for t in targets):
        raise LabelError(f"Every sample needs a {task} label")
    head = FeatureHead(features.shape[1], task, classes, config.seed)
    optimizer = Adam.from_config(head.parameters(), config)
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(features))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            for param in optimizer.params:
                param.zero_grad()
            for index in batch:
                tape = Tape()
                loss = head.loss(tape, features[index], targets[index])
                tape.backward(loss).accumulate_into(1.0 / len(batch))
            optimizer.step()
    return head


def evaluate_feature_head(head: FeatureHead, features: np.ndarray, targets: Sequence):
    """ClassificationReport for classifiers, MAE for regressors."""
    predictions = head.predict(features)
    if head.task == "classification":
        labels = np.asarray(targets, dtype=int)
        return classify_metrics(predictions, labels, head.classes)
    return regression_mae(predictions, np.asarray(targets, dtype=float))


# latent exploration


def latent_traversal(
    model: GenerativeModel, dim: int, values: Sequence[float], condition=None
) -> List[List[np.ndarray]]:
    """Decode z = value * e_dim for each value."""
    k = model.architecture.k
    if not 0 <= dim < k:
        raise ConfigurationError(f"Latent dimension {dim} outside [0, {k})")
    decoded = []
    for value in values:
        z = np.zeros(k)
        z[dim] = value
        decoded.append(generate(model, z, condition))
    return decoded


def latent_grid(
    model: GenerativeModel, values: Sequence[float], condition=None
) -> List[Tuple[Tuple[float, float], List[np.ndarray]]]:
    k = model.architecture.k
    if k != 2:
        raise ConfigurationError(
            f"A latent grid needs a 2-dimensional latent space, model has k={k}"
        )
    return [
        ((u, v), generate(model, np.array([u, v]), condition))
        for u in values
        for v in values
    ]


def deformation_overlap(
    points: PointCloud, distances: Sequence[float], cap: BumpCap, fraction: float = 0.1
) -> float:
    """Share of the most displaced points (top `fraction`) lying inside `cap`."""
    points = np.asarray(points, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64)
    if len(points) == 0 or len(points) != len(distances):
        raise DataError(f"{len(points)} point(s) for {len(distances)} distance(s)")
    count = max(1, int(np.ceil(fraction * len(points))))
    top = np.argsort(-distances, kind="stable")[:count]
    selected = points[top].copy()
    if cap.structure == 1:
        selected[:, 2] = 0.0
    norms = np.linalg.norm(selected, axis=1, keepdims=True)
    # a point on the centre (or the torus axis) has no direction and is outside
    directions = selected / np.where(norms > 0, norms, 1.0)
    angles = np.arccos(np.clip(directions @ np.asarray(cap.center), -1.0, 1.0))
    inside = (norms[:, 0] > 0) & (angles < cap.radius)
    return float(np.mean(inside))


# reports


def write_rows(
    path: PathLike, columns: Sequence[str], rows: Sequence[Sequence]
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def write_curve_csv(path: PathLike, points: Sequence[CurvePoint]) -> Path:
    return write_rows(path, RECON_CURVE_COLUMNS, points)


def write_synth_csv(path: PathLike, rows: Sequence[Tuple[str, float]]) -> Path:
    return write_rows(path, SYNTH_CURVE_COLUMNS, rows)


def write_metrics_csv(path: PathLike, metrics: Dict[str, float]) -> Path:
    rows = [(name, float(value)) for name, value in metrics.items()]
    return write_rows(path, ("metric", "value"), rows)


def report_metrics(report: ClassificationReport) -> Dict[str, float]:
    return {
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "accuracy": report.accuracy,
    }


def dump_clouds(
    out_dir: PathLike,
    prefix: str,
    clouds: Sequence[PointCloud],
    names: Sequence[str],
    qualities: Optional[Sequence[Sequence[float]]] = None,
) -> List[Path]:
    """One PLY per structure, `<prefix>_<name>.ply`, with an optional quality."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, (cloud, name) in enumerate(zip(clouds, names)):
        path = out_dir / f"{prefix}_{name}.ply"
        write_ply(path, cloud, None if qualities is None else qualities[i])
        written.append(path)
    return written
