import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import click
import numpy as np

from pshape import DEFAULT_SYNTH_SIZES, __version__
from pshape.checkpoint import load_checkpoint, read_header
from pshape.config import RunConfig, find_pyproject_toml, worker_count
from pshape.data.io import load_cloud, normalize, resample
from pshape.data.manifest import DatasetManifest, LoadedSample, load_samples, split
from pshape.data.phantom import PhantomSpec, make_phantom_dataset, recorded_caps
from pshape.evaluation import (
    constant_baseline_mae,
    deformation_overlap,
    dump_clouds,
    encode_dataset,
    evaluate_classifier,
    evaluate_feature_head,
    evaluate_regressor,
    fit_feature_head,
    latent_grid,
    latent_traversal,
    reconstruction_curve,
    report_metrics,
    synth_then_classify,
    write_curve_csv,
    write_metrics_csv,
    write_rows,
    write_synth_csv,
)
from pshape.exceptions import ConfigurationError, DataError, NumericError
from pshape.logging import LogConfig
from pshape.models import (
    DiscriminativeModel,
    GenerativeModel,
    ShapeModel,
    build_model,
    deformation_map,
    generate,
)
from pshape.training import init_references, train
from pshape.transport import NORMS, SOLVERS, TransportSettings, solve, solver_name
from pshape.types import SCENARIOS

sys.tracebacklimit = 0  # Disable exceptions tracebacks

PathLike = Union[Path, str]
RUN_RECORD = "run.json"


def exits_with_code(command):
    """Log pshape errors as `ClassName: message` and exit with their code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ConfigurationError, DataError, NumericError) as error:
            LogConfig.get_logger().error(f"{error.__class__.__name__}: {error}")
            click.get_current_context().exit(error.exit_code.value)

    return wrapper


def config_options(command):
    command = click.option(
        "--set",
        "overrides",
        multiple=True,
        metavar="KEY=VALUE",
        help="Override one configuration key; VALUE is read as JSON when possible.",
    )(command)
    return click.option(
        "-c",
        "--config",
        type=click.Path(exists=True, dir_okay=False, readable=True),
        metavar="PATH",
        help=(
            "Read the run configuration from a JSON file. Defaults come from "
            "[tool.pshape] in the project's pyproject.toml."
        ),
    )(command)


def resolve_config(
    config: Optional[PathLike], overrides: Sequence[str], base: Optional[Dict] = None
) -> RunConfig:
    pyproject = find_pyproject_toml()
    LogConfig.get_logger().debug(f"Project configuration: {pyproject}")
    return RunConfig.resolve(config, overrides, pyproject, base)


def record_run(
    command: str,
    config: Optional[RunConfig],
    inputs: Dict[str, Any],
    out_dir: Optional[PathLike] = None,
) -> Dict[str, Any]:
    """Print the resolved run record and store it as run.json in `out_dir`."""
    record = {
        "command": command,
        "config": None if config is None else config.to_dict(),
        "inputs": dict(inputs),
        "seed": None if config is None else config.seed,
        "version": __version__,
    }
    text = json.dumps(record, indent=2, sort_keys=True, default=str)
    click.echo(text)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / RUN_RECORD).write_text(text + "\n")
    return record


def parse_vector(text: str, name: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        raise ConfigurationError(
            f"{name} '{text}' is not a comma-separated list of numbers"
        )


def parse_condition(text: Optional[str]) -> Optional[np.ndarray]:
    if text is None or text.strip().lower() == "none":
        return None
    return parse_vector(text, "Condition")


def parse_range(text: str) -> List[int]:
    """`1..5` or `1,2,4`."""
    try:
        if ".." in text:
            start, stop = text.split("..")
            values = list(range(int(start), int(stop) + 1))
        else:
            values = [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigurationError(
            f"'{text}' is neither a range a..b nor a list of integers"
        )
    if not values or min(values) < 1:
        raise ConfigurationError(f"'{text}' must select positive integers")
    return values


def load_splits(
    config: RunConfig, manifest_path: PathLike
) -> Tuple[DatasetManifest, Tuple[List[LoadedSample], ...]]:
    """Load every sample once, then partition them by the per-subject split."""
    manifest = DatasetManifest.load(manifest_path)
    if config.label is not None:
        manifest = manifest.with_label(config.label)
        if not manifest.samples:
            raise DataError(f"No sample carries label {config.label}")
    if len(manifest.structures) != config.structures:
        raise ConfigurationError(
            f"Manifest has {len(manifest.structures)} structure(s), "
            f"configuration expects {config.structures}"
        )
    loaded = load_samples(manifest, config.points, config.normalize, config.seed)
    parts = split(manifest, config.split, config.seed)
    groups = []
    for part in parts:
        subjects = set(part.subjects())
        groups.append([s for s in loaded if s.subject in subjects])
    return manifest, tuple(groups)


def reference_clouds(config: RunConfig) -> Optional[List[np.ndarray]]:
    paths = config.reference_paths()
    if not paths:
        return None
    clouds = []
    for structure, path in enumerate(paths):
        cloud = resample(load_cloud(path), config.points, [config.seed, structure])
        clouds.append(normalize(cloud) if config.normalize else cloud)
    return clouds


def open_checkpoint(
    path: PathLike, config: Optional[RunConfig] = None
) -> ShapeModel:
    settings = None if config is None else config.transport_settings()
    return load_checkpoint(path, settings=settings)


def checkpoint_config(
    path: PathLike, config: Optional[PathLike], overrides: Sequence[str]
) -> RunConfig:
    """Run configuration taking its architecture defaults from a checkpoint."""
    architecture = read_header(path)["architecture"]
    base = {
        k: v
        for k, v in architecture.items()
        if k in RunConfig.field_names() and k != "init_seed"
    }
    base["normalize"] = architecture.get("normalization", "unit-sphere") != "none"
    return resolve_config(config, overrides, base)


def _structure_names(count: int) -> List[str]:
    return [f"structure{i}" for i in range(count)]


def _require(model: ShapeModel, kind: type, purpose: str):
    if not isinstance(model, kind):
        raise ConfigurationError(
            f"{purpose} needs a {kind.__name__}, got a {model.kind} model"
        )
    return model


@click.group()
@click.help_option("--help", "-h")
@click.version_option(__version__, "--version", "-V")
@click.option("-v", "--verbose", help="Turns on debug-level logger.", is_flag=True)
def main(verbose: bool):
    """Point-cloud shape analysis: alignment, classification, regression and
    conditional generation of anatomical shapes.
    """
    log_level = logging.DEBUG if verbose else logging.INFO
    LogConfig.init(log_level)


@main.command()
@click.argument("out", type=click.Path(file_okay=False))
@click.option(
    "--spec",
    type=click.Path(exists=True, dir_okay=False),
    help="JSON phantom specification. Defaults reproduce a 100/100 two-class set.",
)
@click.option("--seed", type=int, default=None, help="Override the generator seed.")
@click.option("--count-per-class", type=int, default=None)
@click.option("--classes", type=int, default=None)
@click.option("--structures", type=click.IntRange(1, 2), default=None)
@exits_with_code
def phantom(out, spec, seed, count_per_class, classes, structures):
    """Generate a synthetic phantom dataset with its manifest in OUT."""
    phantom_spec = PhantomSpec.load(spec)
    if seed is not None:
        phantom_spec = PhantomSpec.from_dict({**phantom_spec.to_dict(), "seed": seed})
    inputs = {
        "spec": phantom_spec.to_dict(),
        "count_per_class": count_per_class,
        "classes": classes,
        "structures": structures,
    }
    record_run("phantom", None, inputs, out)
    make_phantom_dataset(phantom_spec, out, count_per_class, classes, structures)
    LogConfig.get_logger().info("All done 🎉")


@main.command(name="train")
@click.argument("kind", type=click.Choice(["discriminative", "generative"]))
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True)
@click.option(
    "--resume",
    type=click.Path(exists=True, dir_okay=False),
    help="Continue from a checkpoint; epochs are numbered after its stored epoch.",
)
@config_options
@exits_with_code
def train_command(kind, manifest, out, resume, config, overrides):
    """Train a KIND model on the samples listed in MANIFEST."""
    run_config = resolve_config(config, overrides)
    inputs = {"kind": kind, "manifest": manifest, "resume": resume}
    record_run("train", run_config, inputs, out)
    workers = worker_count()
    _, (train_samples, val_samples, _) = load_splits(run_config, manifest)
    architecture = run_config.architecture(kind)
    settings = run_config.transport_settings()
    start_epoch = 0
    if resume is None:
        model = build_model(architecture, settings)
    else:
        model = load_checkpoint(resume, architecture, settings)
        start_epoch = int(read_header(resume)["epoch"])
    init_references(model, train_samples, reference_clouds(run_config))
    result = train(
        model,
        train_samples,
        val_samples,
        run_config.train_config(workers),
        out,
        start_epoch,
    )
    LogConfig.get_logger().info(
        f"Best validation loss in epoch {result.best_epoch}; "
        f"checkpoint written to {result.best_checkpoint}"
    )


@main.command(name="generate")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True)
@click.option(
    "--condition",
    "conditions",
    multiple=True,
    metavar="VECTOR",
    help="Comma-separated condition vector or 'none'. Give two for a deformation map.",
)
@click.option("--count", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--z", "latent", metavar="VECTOR", help="Decode this latent vector.")
@click.option(
    "--traverse",
    type=int,
    default=None,
    metavar="DIM",
    help="Decode z = value * e_DIM for each of --values.",
)
@click.option("--grid", is_flag=True, help="Decode a 2-D grid of --values (k=2 only).")
@click.option("--values", default="-2,-1,0,1,2", show_default=True, metavar="VECTOR")
@config_options
@exits_with_code
def generate_command(
    checkpoint,
    out,
    conditions,
    count,
    seed,
    latent,
    traverse,
    grid,
    values,
    config,
    overrides,
):
    """Generate shapes from a conditional generative CHECKPOINT."""
    run_config = checkpoint_config(checkpoint, config, overrides)
    inputs = {
        "checkpoint": checkpoint,
        "conditions": list(conditions),
        "count": count,
        "seed": seed,
        "z": latent,
        "traverse": traverse,
        "grid": grid,
        "values": values,
    }
    record_run("generate", run_config, inputs, out)
    model = open_checkpoint(checkpoint, run_config)
    _require(model, GenerativeModel, "Generation")
    names = _structure_names(model.architecture.structures)
    parsed = [parse_condition(c) for c in conditions] or [None]
    if len(parsed) > 2:
        raise ConfigurationError("At most two conditions can be compared")
    logger = LogConfig.get_logger()

    if traverse is not None or grid:
        steps = parse_vector(values, "Values")
        if grid:
            decoded = latent_grid(model, steps, parsed[0])
            for i, ((u, v), clouds) in enumerate(decoded):
                dump_clouds(out, f"grid{i:04d}", clouds, names)
                logger.debug(f"grid{i:04d}: z=({u}, {v})")
        else:
            decoded = latent_traversal(model, traverse, steps, parsed[0])
            for i, clouds in enumerate(decoded):
                dump_clouds(out, f"traverse{traverse}_{i:04d}", clouds, names)
        logger.info(f"Wrote traversal clouds to {out}")
        return

    k = model.architecture.k
    if latent is not None:
        latents = [parse_vector(latent, "Latent vector")] * count
    else:
        latents = [
            np.random.default_rng([seed, i]).standard_normal(k) for i in range(count)
        ]
    for i, z in enumerate(latents):
        if len(parsed) == 1:
            dump_clouds(out, f"sample{i:04d}", generate(model, z, parsed[0]), names)
            continue
        decoded = [generate(model, z, condition) for condition in parsed]
        for j, clouds in enumerate(decoded):
            dump_clouds(out, f"sample{i:04d}_c{j}", clouds, names)
        distances = deformation_map(model, z, parsed[0], parsed[1])
        dump_clouds(out, f"deformation{i:04d}", decoded[0], names, distances)
    logger.info(f"Wrote {len(latents)} generated sample(s) to {out}")


@main.command(name="align")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument(
    "clouds",
    nargs=-1,
    required=True,
    type=click.Path(exists=True, dir_okay=False),
)
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True)
@config_options
@exits_with_code
def align_command(checkpoint, clouds, out, config, overrides):
    """Rotate CLOUDS (one per structure) into the CHECKPOINT's reference frame."""
    run_config = checkpoint_config(checkpoint, config, overrides)
    inputs = {"checkpoint": checkpoint, "clouds": list(clouds)}
    record_run("align", run_config, inputs, out)
    model = open_checkpoint(checkpoint, run_config)
    points = []
    for structure, path in enumerate(clouds):
        LogConfig.switch(f'In "{path}"')
        seed = [run_config.seed, structure]
        cloud = resample(load_cloud(path), run_config.points, seed)
        points.append(normalize(cloud) if run_config.normalize else cloud)
    LogConfig.switch()
    thetas, aligned = model.align_clouds(points)
    stems = [Path(p).stem for p in clouds]
    dump_clouds(out, "aligned", aligned, stems)
    angles = {stem: [float(t) for t in theta] for stem, theta in zip(stems, thetas)}
    text = json.dumps(angles, indent=2, sort_keys=True)
    (Path(out) / "angles.json").write_text(text + "\n")
    LogConfig.get_logger().info(f"Wrote aligned clouds to {out}")


@main.command(name="encode")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True)
@config_options
@exits_with_code
def encode_command(checkpoint, manifest, out, config, overrides):
    """Write the posterior mean of every MANIFEST sample to latents.csv."""
    run_config = checkpoint_config(checkpoint, config, overrides)
    inputs = {"checkpoint": checkpoint, "manifest": manifest}
    record_run("encode", run_config, inputs, out)
    model = open_checkpoint(checkpoint, run_config)
    _require(model, GenerativeModel, "Encoding")
    samples = load_samples(
        DatasetManifest.load(manifest),
        run_config.points,
        run_config.normalize,
        run_config.seed,
    )
    latents = encode_dataset(model, samples, worker_count())
    latent_columns = [f"z{i}" for i in range(latents.shape[1])]
    rows = [
        [
            s.subject,
            "" if s.label is None else s.label,
            "" if s.target is None else s.target,
        ]
        + [float(v) for v in z]
        for s, z in zip(samples, latents)
    ]
    write_rows(
        Path(out) / "latents.csv", ["subject", "label", "target"] + latent_columns, rows
    )
    LogConfig.get_logger().info(f"Encoded {len(samples)} sample(s)")


@main.group(name="eval")
def eval_group():
    """Evaluation experiments writing CSV reports."""


def _feature_scores(model, splits, run_config: RunConfig, task: str, workers: int):
    train_samples, _, test_samples = splits
    attribute = "label" if task == "classification" else "target"
    head = fit_feature_head(
        encode_dataset(model, train_samples, workers),
        [getattr(s, attribute) for s in train_samples],
        task,
        run_config.train_config(workers),
        run_config.classes,
    )
    return evaluate_feature_head(
        head,
        encode_dataset(model, test_samples, workers),
        [getattr(s, attribute) for s in test_samples],
    )


def _echo_metrics(out: PathLike, metrics: Dict[str, float]):
    write_metrics_csv(Path(out) / "metrics.csv", metrics)
    click.echo(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))


@eval_group.command(name="classify")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True)
@click.option(
    "--features",
    is_flag=True,
    help="Classify from the latent features of a generative checkpoint.",
)
@config_options
@exits_with_code
def eval_classify(checkpoint, manifest, out, features, config, overrides):
    """Precision, recall and F1 on the test split of MANIFEST."""
    run_config = checkpoint_config(checkpoint, config, overrides)
    inputs = {"checkpoint": checkpoint, "manifest": manifest, "features": features}
    record_run("eval classify", run_config, inputs, out)
    workers = worker_count()
    _, splits = load_splits(run_config, manifest)
    if not splits[2]:
        raise DataError("Test split is empty")
    model = open_checkpoint(checkpoint, run_config)
    if features:
        _require(model, GenerativeModel, "Feature classification")
        report = _feature_scores(model, splits, run_config, "classification", workers)
    else:
        _require(model, DiscriminativeModel, "Classification")
        report = evaluate_classifier(model, splits[2], workers)
    _echo_metrics(out, report_metrics(report))


@eval_group.command(name="regress")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True)
@click.option(
    "--features",
    is_flag=True,
    help="Regress from the latent features of a generative checkpoint.",
)
@click.option(
    "--label",
    type=int,
    default=None,
    help="Only use samples of this class, e.g. healthy controls.",
)
@config_options
@exits_with_code
def eval_regress(checkpoint, manifest, out, features, label, config, overrides):
    """Mean absolute error on the test split of MANIFEST."""
    if label is not None:
        overrides = tuple(overrides) + (f"label={label}",)
    run_config = checkpoint_config(checkpoint, config, overrides)
    inputs = {"checkpoint": checkpoint, "manifest": manifest, "features": features}
    record_run("eval regress", run_config, inputs, out)
    workers = worker_count()
    _, splits = load_splits(run_config, manifest)
    if not splits[2]:
        raise DataError("Test split is empty")
    model = open_checkpoint(checkpoint, run_config)
    if features:
        _require(model, GenerativeModel, "Feature regression")
        mae = _feature_scores(model, splits, run_config, "regression", workers)
    else:
        _require(model, DiscriminativeModel, "Regression")
        if model.architecture.task != "regression":
            raise ConfigurationError("Checkpoint holds a classifier, not a regressor")
        mae = evaluate_regressor(model, splits[2], workers)
    baseline = constant_baseline_mae(splits[0], splits[2])
    _echo_metrics(out, {"mae": mae, "baseline_mae": baseline})


@eval_group.command(name="recon-curve")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True)
@click.option(
    "--k",
    "ks",
    default="1..5",
    show_default=True,
    metavar="RANGE",
    help="Latent sizes, as a..b or a comma-separated list.",
)
@click.option(
    "--scenario",
    "scenarios",
    multiple=True,
    type=click.Choice(SCENARIOS),
    help="Scenarios to run. [default: all]",
)
@click.option(
    "--no-train",
    is_flag=True,
    help="Fail instead of training grid points without a checkpoint.",
)
@config_options
@exits_with_code
def eval_recon_curve(manifest, out, ks, scenarios, no_train, config, overrides):
    """Reconstruction error over latent size for each model scenario."""
    run_config = resolve_config(config, overrides)
    scenarios = scenarios or SCENARIOS
    inputs = {"manifest": manifest, "k": ks, "scenarios": list(scenarios)}
    record_run("eval recon-curve", run_config, inputs, out)
    _, splits = load_splits(run_config, manifest)
    points = reconstruction_curve(
        run_config,
        splits,
        parse_range(ks),
        scenarios,
        Path(out) / "models",
        train_missing=not no_train,
        workers=worker_count(),
    )
    write_curve_csv(Path(out) / "recon_curve.csv", points)


@eval_group.command(name="synth-curve")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", type=click.Path(file_okay=False), required=True)
@click.option(
    "--sizes",
    default=",".join(str(s) for s in DEFAULT_SYNTH_SIZES),
    show_default=True,
    metavar="LIST",
)
@click.option("--no-real", is_flag=True, help="Skip the real-data baseline row.")
@config_options
@exits_with_code
def eval_synth_curve(checkpoint, manifest, out, sizes, no_real, config, overrides):
    """Accuracy of classifiers trained on clouds generated by CHECKPOINT."""
    run_config = checkpoint_config(checkpoint, config, overrides)
    inputs = {"checkpoint": checkpoint, "manifest": manifest, "sizes": sizes}
    record_run("eval synth-curve", run_config, inputs, out)
    generator = open_checkpoint(checkpoint, run_config)
    _require(generator, GenerativeModel, "Synthesis")
    _, splits = load_splits(run_config, manifest)
    rows = synth_then_classify(
        generator,
        run_config,
        splits,
        parse_range(sizes),
        Path(out) / "models",
        include_real=not no_real,
        workers=worker_count(),
    )
    write_synth_csv(Path(out) / "synth_curve.csv", rows)


@eval_group.command(name="emd")
@click.argument("first", type=click.Path(exists=True, dir_okay=False))
@click.argument("second", type=click.Path(exists=True, dir_okay=False))
@click.option("--norm", type=click.Choice(NORMS), default="l1", show_default=True)
@click.option(
    "--solver", type=click.Choice(SOLVERS), default="auto", show_default=True
)
@click.option("--epsilon", type=float, default=0.01, show_default=True)
@exits_with_code
def eval_emd(first, second, norm, solver, epsilon):
    """Earth mover's distance between two equal-size clouds, as loaded."""
    settings = TransportSettings(norm=norm, solver=solver, epsilon=epsilon)
    inputs = {"first": first, "second": second, **settings._asdict()}
    record_run("eval emd", None, inputs)
    transport = solve(load_cloud(first), load_cloud(second), settings)
    click.echo(f"cost={transport.cost!r} solver={solver_name(transport)}")


@eval_group.command(name="overlap")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.option("--count", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@exits_with_code
def eval_overlap(checkpoint, manifest, count, seed):
    """Share of the strongest condition-attributed deformation inside the phantom
    bump recorded in MANIFEST, averaged over COUNT latent draws."""
    inputs = {
        "checkpoint": checkpoint,
        "manifest": manifest,
        "count": count,
        "seed": seed,
    }
    record_run("eval overlap", None, inputs)
    model = open_checkpoint(checkpoint)
    _require(model, GenerativeModel, "Deformation overlap")
    caps = recorded_caps(DatasetManifest.load(manifest, check_files=False))
    if not caps:
        raise DataError(f"{manifest} records no phantom bump caps")
    m = model.architecture.m
    if m < 2:
        raise ConfigurationError(
            "Deformation overlap needs a conditional model with m >= 2"
        )
    first, second = np.eye(m)[0], np.eye(m)[1]
    scores = []
    for i in range(count):
        z = np.random.default_rng([seed, i]).standard_normal(model.architecture.k)
        clouds = generate(model, z, first)
        distances = deformation_map(model, z, first, second)
        for cap in caps:
            s = cap.structure
            scores.append(deformation_overlap(clouds[s], distances[s], cap))
    click.echo(f"overlap={float(np.mean(scores))!r}")


if __name__ == "__main__":
    main()
