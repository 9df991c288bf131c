"""
Code for searching for and parsing pshape run configurations.

A run configuration is assembled from, lowest precedence first: built-in defaults,
the `[tool.pshape]` table of the project's pyproject.toml, a JSON file given with
`--config` and repeated `--set key=value` overrides.
"""

import json
import os
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import toml

from pshape import (
    DEFAULT_EXACT_CAP,
    DEFAULT_LOSS_WEIGHTS,
    DEFAULT_POINTS,
    DEFAULT_ROTATION_FEATURES,
    DEFAULT_SIGNATURE_FEATURES,
    DEFAULT_SPLIT,
    THREADS_ENV_VAR,
)
from pshape.blocks import (
    DECODER_HIDDEN,
    GSN_HIDDEN,
    POSTERIOR_HIDDEN,
    ROTATION_HIDDEN,
)
from pshape.exceptions import ConfigurationError, MalformattedToml
from pshape.models import HEAD_HIDDEN, KINDS, TASKS, Architecture
from pshape.training import TrainConfig
from pshape.transport import NORMS, SOLVERS, TransportSettings

PathLike = Union[Path, str]
KL_FORMS = ("standard", "printed")
_TUPLE_FIELDS = (
    "gsn_hidden",
    "decoder_hidden",
    "head_hidden",
    "loss_weights",
    "split",
)


@lru_cache
def find_project_root(srcs: Tuple[str, ...] = ()) -> Tuple[Path, str]:
    """Return a directory containing .git, .hg, or pyproject.toml.

    That directory will be a common parent of all paths in `srcs` (the working
    directory when empty). If no directory in the tree contains a marker, the root
    of the file system is returned. The second element describes how the root was
    found.
    """
    if not srcs:
        srcs = (str(Path.cwd().resolve()),)
    path_srcs = [Path(Path.cwd(), src).resolve() for src in srcs]
    src_parents = [
        list(path.parents) + ([path] if path.is_dir() else []) for path in path_srcs
    ]
    common_base = max(
        set.intersection(*(set(parents) for parents in src_parents)),
        key=lambda path: path.parts,
    )
    for directory in (common_base, *common_base.parents):
        if (directory / ".git").exists():
            return directory, ".git directory"
        if (directory / ".hg").is_dir():
            return directory, ".hg directory"
        if (directory / "pyproject.toml").is_file():
            return directory, "pyproject.toml"
    return directory, "file system root"


def find_pyproject_toml(srcs: Sequence[str] = ()) -> Optional[str]:
    srcs = tuple(srcs) or (str(Path.cwd().resolve()),)
    root, _ = find_project_root(srcs)
    config_file = root / "pyproject.toml"
    return str(config_file) if config_file.is_file() else None


def read_pshape_config(path: Optional[PathLike]) -> Dict[str, Any]:
    """Parse the `[tool.pshape]` table of a toml file."""
    if path is None:
        return dict()
    try:
        config = toml.load(path).get("tool", {}).get("pshape", {})
    except toml.TomlDecodeError as error:
        raise MalformattedToml(f"{path}: {error}")
    except OSError as error:
        raise ConfigurationError(f"Error reading configuration file {path}: {error}")
    return {k.replace("--", "").replace("-", "_"): v for k, v in config.items()}


def read_json_config(path: PathLike) -> Dict[str, Any]:
    try:
        document = json.loads(Path(path).read_text())
    except OSError as error:
        raise ConfigurationError(f"Error reading configuration file {path}: {error}")
    except json.JSONDecodeError as error:
        raise ConfigurationError(f"{path} is not valid JSON: {error}")
    if not isinstance(document, dict):
        raise ConfigurationError(f"{path} must hold a JSON object")
    return document


def parse_override(text: str) -> Tuple[str, Any]:
    """Split `key=value`; the value is read as JSON when possible."""
    key, sep, raw = text.partition("=")
    key = key.strip().replace("-", "_")
    if not sep or not key:
        raise ConfigurationError(f"Override '{text}' is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return 1
    try:
        count = int(raw)
    except ValueError:
        count = 0
    if count < 1:
        raise ConfigurationError(
            f"{THREADS_ENV_VAR} must be a positive integer, got '{raw}'"
        )
    return count


@dataclass
class RunConfig:
    # architecture
    structures: int = 1
    points: int = DEFAULT_POINTS
    rotation_features: int = DEFAULT_ROTATION_FEATURES
    signature_features: int = DEFAULT_SIGNATURE_FEATURES
    task: str = "classification"
    classes: int = 2
    k: int = 2
    m: int = 0
    gsn_hidden: Tuple[int, ...] = GSN_HIDDEN
    rotation_hidden: int = ROTATION_HIDDEN
    posterior_hidden: int = POSTERIOR_HIDDEN
    decoder_hidden: Tuple[int, ...] = DECODER_HIDDEN
    head_hidden: Tuple[int, ...] = HEAD_HIDDEN
    loss_weights: Tuple[float, ...] = DEFAULT_LOSS_WEIGHTS
    kl_form: str = "standard"
    # transport
    norm: str = "l1"
    solver: str = "auto"
    exact_cap: int = DEFAULT_EXACT_CAP
    epsilon: float = 0.01
    max_iters: int = 50000
    # data
    normalize: bool = True
    reference: Optional[Union[str, List[str]]] = None
    split: Tuple[float, ...] = DEFAULT_SPLIT
    label: Optional[int] = None
    # training
    epochs: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in _TUPLE_FIELDS:
            value = getattr(self, name)
            if isinstance(value, (str, bytes)) or not isinstance(value, Iterable):
                raise ConfigurationError(f"'{name}' must be a list, got {value!r}")
            setattr(self, name, tuple(value))
        self.validate()

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))

    @classmethod
    def from_dict(
        cls, values: Dict[str, Any], source: str = "configuration"
    ) -> "RunConfig":
        unknown = sorted(set(values) - set(cls.field_names()))
        if unknown:
            raise ConfigurationError(f"Unknown key(s) {unknown} in {source}")
        try:
            return cls(**values)
        except TypeError as error:
            raise ConfigurationError(f"Invalid {source}: {error}")

    @classmethod
    def resolve(
        cls,
        config_file: Optional[PathLike] = None,
        overrides: Iterable[str] = (),
        pyproject: Optional[PathLike] = None,
        base: Optional[Dict[str, Any]] = None,
    ) -> "RunConfig":
        values: Dict[str, Any] = dict(base or {})
        for source, layer in (
            (str(pyproject), read_pshape_config(pyproject)),
            (str(config_file), read_json_config(config_file) if config_file else {}),
            ("--set", dict(parse_override(o) for o in overrides)),
        ):
            unknown = sorted(set(layer) - set(cls.field_names()))
            if unknown:
                raise ConfigurationError(f"Unknown key(s) {unknown} in {source}")
            values.update(layer)
        return cls.from_dict(values)

    def validate(self) -> None:
        def positive(*names):
            for name in names:
                value = getattr(self, name)
                if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                    raise ConfigurationError(
                        f"'{name}' must be a positive integer, got {value!r}"
                    )

        positive(
            "structures",
            "points",
            "rotation_features",
            "signature_features",
            "classes",
            "k",
            "rotation_hidden",
            "posterior_hidden",
            "exact_cap",
            "max_iters",
        )
        if not isinstance(self.m, int) or self.m < 0:
            raise ConfigurationError(
                f"'m' must be a non-negative integer, got {self.m!r}"
            )
        for name in ("gsn_hidden", "decoder_hidden", "head_hidden"):
            if not getattr(self, name) or any(
                not isinstance(w, int) or w < 1 for w in getattr(self, name)
            ):
                raise ConfigurationError(f"'{name}' must list positive widths")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ConfigurationError(
                "'loss_weights' must be three non-negative numbers"
            )
        if not any(self.loss_weights):
            raise ConfigurationError("At least one loss weight must be positive")
        choices = {
            "task": TASKS,
            "kl_form": KL_FORMS,
            "norm": NORMS,
            "solver": SOLVERS,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigurationError(
                    f"'{name}' must be one of {allowed}, got {getattr(self, name)!r}"
                )
        if not self.epsilon > 0:
            raise ConfigurationError(f"'epsilon' must be positive, got {self.epsilon}")
        if not isinstance(self.normalize, bool):
            raise ConfigurationError("'normalize' must be true or false")
        references = self.reference_paths()
        if self.reference is not None and len(references) != self.structures:
            raise ConfigurationError(
                f"'reference' must name one cloud per structure ({self.structures})"
            )
        label = self.label
        if label is not None and type(label) is not int:
            raise ConfigurationError(f"'label' must be a class index, got {label!r}")
        if len(self.split) != 3 or any(r < 0 for r in self.split):
            raise ConfigurationError("'split' must hold three non-negative ratios")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigurationError(f"'split' ratios {self.split} must sum to 1")
        self.train_config()

    def to_dict(self) -> Dict[str, Any]:
        return {
            k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def architecture(self, kind: str) -> Architecture:
        if kind not in KINDS:
            raise ConfigurationError(
                f"Unknown model kind '{kind}', expected one of {KINDS}"
            )
        values = {
            f.name: getattr(self, f.name)
            for f in fields(Architecture)
            if f.name in self.field_names()
        }
        values.update(
            kind=kind,
            init_seed=self.seed,
            normalization="unit-sphere" if self.normalize else "none",
        )
        return Architecture(**values)

    def train_config(self, workers: int = 1) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            eps_hat=self.eps_hat,
            seed=self.seed,
            patience=self.patience,
            workers=workers,
        )

    def transport_settings(self) -> TransportSettings:
        return TransportSettings(
            norm=self.norm,
            solver=self.solver,
            exact_cap=self.exact_cap,
            epsilon=self.epsilon,
            max_iters=self.max_iters,
        )

    def reference_paths(self) -> List[str]:
        if self.reference is None:
            return []
        if isinstance(self.reference, str):
            return [self.reference]
        return [str(path) for path in self.reference]
