from typing import Iterable, NamedTuple, Optional

import numpy as np

# (N, 3) float64 array; row order carries no meaning
PointCloud = np.ndarray

LOSS_LOG_COLUMNS = ("epoch", "align", "rec", "latent", "cls", "total", "val_total")
RECON_CURVE_COLUMNS = ("scenario", "k_per_structure", "mean_emd")
SYNTH_CURVE_COLUMNS = ("size", "accuracy")
SCENARIOS = ("single", "single-cond", "multi", "multi-cond")


class Assignment(NamedTuple):
    """Optimal bijection: point i of A is matched with point mapping[i] of B."""

    mapping: np.ndarray
    cost: float


class TransportPlan(NamedTuple):
    """Feasible coupling found by the entropic solver, scaled to unit row sums."""

    coupling: np.ndarray
    cost: float
    converged: bool
    iterations: int


class LatentPosterior(NamedTuple):
    mu: np.ndarray
    log_var: np.ndarray


class LossReport(NamedTuple):
    align: float = 0.0
    rec: float = 0.0
    latent: float = 0.0
    cls: float = 0.0
    total: float = 0.0

    @classmethod
    def mean(cls, reports: Iterable["LossReport"]) -> "LossReport":
        reports = list(reports)
        if not reports:
            return cls()
        # summed in sample order, whatever order the workers finished in
        columns = zip(*reports)
        return cls(*(float(sum(column) / len(reports)) for column in columns))


class CurvePoint(NamedTuple):
    scenario: str
    k_per_structure: float
    mean_emd: float


class ClassificationReport(NamedTuple):
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray
    accuracy: float


class BumpCap(NamedTuple):
    """Spherical cap (unit centre, angular radius in radians) deformed by a class."""

    center: tuple
    radius: float
    structure: int = 0
    amplitude: Optional[float] = None
