"""
Dataset manifests: JSON documents listing samples, their per-structure cloud files
(relative to the manifest) and optional label, target and condition.
"""

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from pshape import DEFAULT_SPLIT
from pshape.data.io import PathLike, load_cloud, normalize, resample
from pshape.exceptions import ConfigurationError, DataError
from pshape.logging import LogConfig


@dataclass
class Sample:
    subject: str
    clouds: List[str]
    label: Optional[int] = None
    target: Optional[float] = None
    condition: Optional[List[float]] = None
    deformed: Optional[List[List[int]]] = None

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "Sample":
        try:
            return cls(**values)
        except TypeError as error:
            raise DataError(f"Malformed manifest sample {values!r}: {error}")


@dataclass
class DatasetManifest:
    structures: List[str]
    samples: List[Sample]
    phantom: Optional[Dict[str, Any]] = None
    root: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> Dict[str, Any]:
        document = {
            "structures": list(self.structures),
            "samples": [asdict(sample) for sample in self.samples],
        }
        if self.phantom is not None:
            document["phantom"] = self.phantom
        return document

    @classmethod
    def from_dict(
        cls, document: Dict[str, Any], root: PathLike = "."
    ) -> "DatasetManifest":
        if not isinstance(document, dict) or "samples" not in document:
            raise DataError("Manifest must be an object with a 'samples' list")
        samples = [Sample.from_dict(s) for s in document["samples"]]
        structures = document.get("structures")
        if structures is None:
            count = len(samples[0].clouds) if samples else 1
            structures = [f"structure{i}" for i in range(count)]
        return cls(list(structures), samples, document.get("phantom"), Path(root))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: PathLike) -> None:
        path = Path(path)
        path.write_text(self.dumps())

    @classmethod
    def load(cls, path: PathLike, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        try:
            document = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as error:
            raise DataError(f"Cannot read manifest {path}: {error}")
        manifest = cls.from_dict(document, root=path.parent)
        manifest.validate(check_files)
        return manifest

    def validate(self, check_files: bool = True) -> None:
        for sample in self.samples:
            if len(sample.clouds) != len(self.structures):
                raise DataError(
                    f"Sample of subject '{sample.subject}' lists {len(sample.clouds)} "
                    f"cloud(s), manifest declares {len(self.structures)} structure(s)"
                )
            if check_files:
                for cloud in self.resolve(sample):
                    if not cloud.is_file():
                        raise DataError(f"Cloud file {cloud} does not exist")

    def resolve(self, sample: Sample) -> List[Path]:
        return [self.root / cloud for cloud in sample.clouds]

    def subjects(self) -> List[str]:
        return list(dict.fromkeys(sample.subject for sample in self.samples))

    def subset(self, samples: Sequence[Sample]) -> "DatasetManifest":
        return DatasetManifest(
            list(self.structures), list(samples), self.phantom, self.root
        )

    def with_label(self, label: int) -> "DatasetManifest":
        return self.subset([s for s in self.samples if s.label == label])


def _rounded(value: float) -> int:
    return int(math.floor(value + 0.5))


def split(
    manifest: DatasetManifest,
    ratios: Sequence[float] = DEFAULT_SPLIT,
    seed: int = 0,
) -> Tuple[DatasetManifest, ...]:
    """Partition subjects (never samples) into train/val/test manifests."""
    valid = len(ratios) == 3 and all(r >= 0 for r in ratios)
    if not valid or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(
            f"Split ratios {tuple(ratios)} must be 3 values summing to 1"
        )
    subjects = manifest.subjects()
    wanted = sum(1 for r in ratios if r > 0)
    if len(subjects) < wanted:
        raise DataError(f"{len(subjects)} subject(s) cannot fill {wanted} splits")
    order = np.random.default_rng(seed).permutation(len(subjects))
    counts = [0] + [_rounded(r * len(subjects)) for r in ratios[1:]]
    for i in (1, 2):
        if ratios[i] > 0 and counts[i] == 0:
            counts[i] = 1
    counts[0] = len(subjects) - counts[1] - counts[2]
    if ratios[0] > 0 and counts[0] < 1:
        raise DataError(f"{len(subjects)} subject(s) leave the training split empty")
    groups, start = [], 0
    for count in counts:
        groups.append({subjects[i] for i in order[start : start + count]})
        start += count
    return tuple(
        manifest.subset([s for s in manifest.samples if s.subject in group])
        for group in groups
    )


class LoadedSample(NamedTuple):
    clouds: List[np.ndarray]
    label: Optional[int]
    target: Optional[float]
    condition: Optional[np.ndarray]
    subject: str


def sample_seed(seed: int, sample: Sample, cloud: str) -> List[int]:
    keys = (str(sample.subject), str(cloud))
    return [seed, *(zlib.crc32(key.encode("utf-8")) for key in keys)]


def load_samples(
    manifest: DatasetManifest,
    points: int,
    normalized: bool = True,
    seed: int = 0,
) -> List[LoadedSample]:
    """Load, resample and normalise every cloud. Resampling is seeded by subject
    and cloud file, so reordering the manifest does not change any sample."""
    logger = LogConfig.get_logger()
    loaded = []
    for sample in manifest.samples:
        clouds = []
        for name, path in zip(sample.clouds, manifest.resolve(sample)):
            logger.debug(f"Loading {path}")
            cloud = resample(load_cloud(path), points, sample_seed(seed, sample, name))
            clouds.append(normalize(cloud) if normalized else cloud)
        condition = None
        if sample.condition is not None:
            condition = np.asarray(sample.condition, float)
        loaded.append(
            LoadedSample(clouds, sample.label, sample.target, condition, sample.subject)
        )
    return loaded
