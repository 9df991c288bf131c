"""
Synthetic, seed-reproducible phantom shapes: deformed ellipsoids (and optionally a
torus as second structure) with a class-dependent radial bump, a continuous
elongation used as the regression target, a random rotation and jitter.
"""

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from pshape.blocks import rotation_matrix
from pshape.data.io import PathLike, write_ply
from pshape.data.manifest import DatasetManifest, Sample
from pshape.exceptions import ConfigurationError
from pshape.logging import LogConfig
from pshape.types import BumpCap


@dataclass
class PhantomSpec:
    radii: Tuple[float, float, float] = (1.0, 0.7, 0.5)
    bump_center: Tuple[float, float, float] = (0.0, 0.0, 1.0)
    bump_radius_deg: float = 30.0
    amplitudes: Tuple[float, ...] = (0.0, 0.25)
    deformation: float = 0.3
    rotation_deg: float = 45.0
    jitter: float = 0.005
    points: int = 512
    seed: int = 0
    count_per_class: int = 100
    classes: int = 2
    structures: int = 1
    samples_per_subject: int = 1
    torus: Tuple[float, float] = (0.6, 0.25)

    def __post_init__(self):
        for name in ("radii", "bump_center", "amplitudes", "torus"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if len(self.radii) != 3 or any(r <= 0 for r in self.radii):
            raise ConfigurationError(
                f"Ellipsoid radii must be 3 positive values, got {self.radii}"
            )
        if len(self.bump_center) != 3 or not np.linalg.norm(self.bump_center) > 0:
            raise ConfigurationError("Bump centre must be a non-zero 3-vector")
        if len(self.amplitudes) not in (1, self.classes):
            raise ConfigurationError(
                f"Need one bump amplitude per class ({self.classes}), "
                f"got {len(self.amplitudes)}"
            )
        if not all(np.isfinite(self.amplitudes)):
            raise ConfigurationError("Bump amplitudes must be finite")
        for name in ("points", "count_per_class", "classes", "samples_per_subject"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"Phantom '{name}' must be at least 1")
        if self.structures not in (1, 2):
            raise ConfigurationError(
                "Phantoms have one (ellipsoid) or two (plus torus) structures"
            )
        if self.torus[0] <= self.torus[1] or self.torus[1] <= 0:
            raise ConfigurationError(
                f"Torus radii must satisfy R > r > 0, got {self.torus}"
            )

    def to_dict(self) -> Dict[str, Any]:
        return {
            k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()
        }

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"Unknown phantom spec keys: {sorted(unknown)}")
        try:
            return cls(**values)
        except (TypeError, ValueError) as error:
            raise ConfigurationError(f"Invalid phantom spec: {error}")

    @classmethod
    def load(cls, path: Optional[PathLike]) -> "PhantomSpec":
        if path is None:
            return cls()
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as error:
            raise ConfigurationError(f"Cannot read phantom spec {path}: {error}")

    def amplitude(self, label: int) -> float:
        if len(self.amplitudes) == 1:
            return self.amplitudes[0]
        return self.amplitudes[label]

    def cap(self, structure: int = 0) -> BumpCap:
        center = np.asarray(self.bump_center)
        if structure == 1:
            # the torus bump sits on the ring, at the azimuth of the centre
            center = np.array([center[0], center[1], 0.0])
            if not np.any(center[:2]):
                center = np.array([1.0, 0.0, 0.0])
        center = center / np.linalg.norm(center)
        radius = float(np.radians(self.bump_radius_deg))
        return BumpCap(tuple(center), radius, structure)


def _unit_directions(rng: np.random.Generator, count: int) -> np.ndarray:
    directions = rng.standard_normal((count, 3))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def _bump_profile(directions: np.ndarray, cap: BumpCap) -> np.ndarray:
    angles = np.arccos(np.clip(directions @ np.asarray(cap.center), -1.0, 1.0))
    inside = angles < cap.radius
    return np.where(inside, 0.5 * (1.0 + np.cos(np.pi * angles / cap.radius)), 0.0)


def ellipsoid_surface(
    spec: PhantomSpec, rng: np.random.Generator, amplitude: float
) -> Tuple[np.ndarray, np.ndarray]:
    directions = _unit_directions(rng, spec.points)
    profile = _bump_profile(directions, spec.cap(0))
    bump = amplitude * profile[:, None] * directions
    points = directions * np.asarray(spec.radii) + bump
    return points, profile > 0


def torus_surface(
    spec: PhantomSpec, rng: np.random.Generator, amplitude: float
) -> Tuple[np.ndarray, np.ndarray]:
    major, minor = spec.torus
    phi = rng.uniform(0.0, 2 * np.pi, spec.points)
    psi = rng.uniform(0.0, 2 * np.pi, spec.points)
    normals = np.stack(
        [np.cos(psi) * np.cos(phi), np.cos(psi) * np.sin(phi), np.sin(psi)], axis=1
    )
    ring = major + minor * np.cos(psi)
    points = np.stack(
        [ring * np.cos(phi), ring * np.sin(phi), minor * np.sin(psi)], axis=1
    )
    azimuths = np.stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)], axis=1)
    profile = _bump_profile(azimuths, spec.cap(1))
    return points + amplitude * profile[:, None] * normals, profile > 0


SURFACES = (ellipsoid_surface, torus_surface)


def _subject_shape(spec: PhantomSpec, label: int, subject_index: int):
    """Per-subject parameters: elongation magnitude and rotation angles."""
    rng = np.random.default_rng([spec.seed, label, subject_index, 0])
    magnitude = float(rng.uniform(0.0, spec.deformation))
    limit = np.radians(spec.rotation_deg)
    angles = rng.uniform(-limit, limit, size=3)
    return magnitude, angles


def phantom_scan(
    spec: PhantomSpec, label: int, subject_index: int, scan: int
) -> Tuple[List[np.ndarray], List[List[int]], float]:
    magnitude, angles = _subject_shape(spec, label, subject_index)
    rotation = rotation_matrix(angles)
    clouds, deformed = [], []
    for structure in range(spec.structures):
        seed = [spec.seed, label, subject_index, scan + 1, structure]
        rng = np.random.default_rng(seed)
        amplitude = spec.amplitude(label)
        points, in_cap = SURFACES[structure](spec, rng, amplitude)
        points[:, 0] *= 1.0 + magnitude
        points = points @ rotation.T + spec.jitter * rng.standard_normal(points.shape)
        clouds.append(points)
        deformed.append(np.flatnonzero(in_cap).tolist() if amplitude != 0 else [])
    return clouds, deformed, magnitude


def make_phantom_dataset(
    spec: PhantomSpec,
    out_dir: PathLike,
    count_per_class: Optional[int] = None,
    classes: Optional[int] = None,
    structures: Optional[int] = None,
) -> DatasetManifest:
    overrides = {
        "count_per_class": count_per_class,
        "classes": classes,
        "structures": structures,
    }
    values = spec.to_dict()
    values.update({k: v for k, v in overrides.items() if v is not None})
    spec = PhantomSpec.from_dict(values)

    out_dir = Path(out_dir)
    (out_dir / "clouds").mkdir(parents=True, exist_ok=True)
    logger = LogConfig.get_logger()
    structure_names = ["ellipsoid", "torus"][: spec.structures]
    samples = []
    for label in range(spec.classes):
        condition = [1.0 if c == label else 0.0 for c in range(spec.classes)]
        for index in range(spec.count_per_class):
            subject = f"c{label}s{index:04d}"
            for scan in range(spec.samples_per_subject):
                clouds, deformed, magnitude = phantom_scan(spec, label, index, scan)
                files = []
                for name, cloud in zip(structure_names, clouds):
                    relative = f"clouds/{subject}_{scan}_{name}.ply"
                    write_ply(out_dir / relative, cloud)
                    files.append(relative)
                samples.append(
                    Sample(subject, files, label, magnitude, condition, deformed)
                )
        logger.debug(f"Generated {spec.count_per_class} subject(s) of class {label}")

    record = spec.to_dict()
    record["caps"] = [
        {"structure": cap.structure, "center": list(cap.center), "radius": cap.radius}
        for cap in (spec.cap(s) for s in range(spec.structures))
    ]
    manifest = DatasetManifest(structure_names, samples, record, out_dir)
    manifest.save(out_dir / "manifest.json")
    logger.info(f"Wrote {len(samples)} phantom sample(s) to {out_dir}")
    return manifest


def recorded_caps(manifest: DatasetManifest) -> Sequence[BumpCap]:
    if not manifest.phantom or "caps" not in manifest.phantom:
        return []
    return [
        BumpCap(tuple(cap["center"]), float(cap["radius"]), int(cap["structure"]))
        for cap in manifest.phantom["caps"]
    ]
