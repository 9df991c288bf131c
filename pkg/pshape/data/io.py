"""
Point-cloud files (ASCII PLY and `x,y,z` CSV), normalisation and resampling.
"""

from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from pshape.exceptions import (
    DegenerateCloudError,
    EmptySetError,
    LineError,
    ParseError,
    UnsupportedFormat,
)
from pshape.logging import Warnings
from pshape.types import PointCloud

PathLike = Union[Path, str]
PLY_NUMERIC_TYPES = {
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double",
    "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64",
}  # fmt: skip


def _parse_float(token: str, path: str, line_nb: int) -> float:
    try:
        value = float(token)
    except ValueError:
        LineError(path, line_nb, f"'{token}' is not a number")
    if not np.isfinite(value):
        LineError(path, line_nb, f"non-finite coordinate '{token}'")
    return value


def _read_ply(lines: List[str], path: str) -> np.ndarray:
    if not lines or lines[0].strip() != "ply":
        LineError(path, 1, "missing 'ply' magic")
    elements = []  # [name, count, [(property, is_list)]]
    line_nb, body_start = 1, None
    for line_nb, raw in enumerate(lines[1:], start=2):
        words = raw.split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        keyword = words[0]
        if keyword == "format":
            if len(words) < 2:
                LineError(path, line_nb, "incomplete format line")
            if words[1] != "ascii":
                raise UnsupportedFormat(
                    f"{path}: PLY format '{words[1]}' is not supported, only ascii"
                )
        elif keyword == "element":
            if len(words) != 3 or not words[2].isdigit():
                LineError(path, line_nb, f"malformed element line '{raw.strip()}'")
            elements.append([words[1], int(words[2]), []])
        elif keyword == "property":
            if not elements:
                LineError(path, line_nb, "property declared before any element")
            if len(words) >= 2 and words[1] == "list":
                elements[-1][2].append((words[-1], True))
            elif len(words) == 3 and words[1] in PLY_NUMERIC_TYPES:
                elements[-1][2].append((words[2], False))
            else:
                LineError(path, line_nb, f"malformed property line '{raw.strip()}'")
        elif keyword == "end_header":
            body_start = line_nb
            break
        else:
            LineError(path, line_nb, f"unexpected header keyword '{keyword}'")
    if body_start is None:
        LineError(path, line_nb, "missing 'end_header'")

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise ParseError(f"{path}: no 'vertex' element declared")
    names = [name for name, _ in vertex[2]]
    missing = [axis for axis in "xyz" if axis not in names]
    if missing:
        raise ParseError(f"{path}: vertex element lacks properties {missing}")
    columns = [names.index(axis) for axis in "xyz"]

    numbered = enumerate(lines[body_start:], body_start + 1)
    body = [(nb, line) for nb, line in numbered if line.strip()]
    cursor, points = 0, []
    for name, count, properties in elements:
        for _ in range(count):
            if cursor >= len(body):
                LineError(
                    path, len(lines), f"expected {count} '{name}' rows, file ended"
                )
            line_nb, line = body[cursor]
            cursor += 1
            if name != "vertex":
                continue
            tokens = line.split()
            if len(tokens) != len(properties):
                LineError(
                    path,
                    line_nb,
                    f"vertex row has {len(tokens)} values, expected {len(properties)}",
                )
            points.append([_parse_float(tokens[c], path, line_nb) for c in columns])
    return np.array(points, dtype=np.float64).reshape(-1, 3)


def _read_csv(lines: List[str], path: str) -> np.ndarray:
    header = [h.strip() for h in lines[0].split(",")] if lines else []
    if header != ["x", "y", "z"]:
        LineError(path, 1, "CSV header must be 'x,y,z'")
    points = []
    for line_nb, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tokens = line.split(",")
        if len(tokens) != 3:
            LineError(path, line_nb, f"expected 3 values, found {len(tokens)}")
        points.append([_parse_float(t.strip(), path, line_nb) for t in tokens])
    return np.array(points, dtype=np.float64).reshape(-1, 3)


def load_cloud(path: PathLike) -> PointCloud:
    """Read every vertex in file order; no normalisation is applied."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        if raw.startswith(b"ply"):
            raise UnsupportedFormat(
                f"{path}: binary PLY is not supported, only ascii"
            )
        raise ParseError(f"{path}: file is not ASCII text")
    lines = text.splitlines()
    if path.suffix.lower() == ".csv":
        return _read_csv(lines, str(path))
    if path.suffix.lower() == ".ply" or (lines and lines[0].strip() == "ply"):
        return _read_ply(lines, str(path))
    raise UnsupportedFormat(
        f"{path}: unknown point-cloud format, expected .ply or .csv"
    )


def _format(value: float) -> str:
    return repr(float(value))


def write_ply(
    path: PathLike, points: PointCloud, quality: Optional[Sequence[float]] = None
) -> None:
    """ASCII PLY with shortest round-trip float text, optionally a `quality` scalar."""
    points = np.asarray(points, dtype=np.float64)
    header = ["ply", "format ascii 1.0", f"element vertex {len(points)}"]
    header += [f"property double {axis}" for axis in "xyz"]
    if quality is not None:
        header.append("property double quality")
    header.append("end_header")
    rows = []
    for i, point in enumerate(points):
        values = [_format(v) for v in point]
        if quality is not None:
            values.append(_format(quality[i]))
        rows.append(" ".join(values))
    Path(path).write_text("\n".join(header + rows) + "\n")


def write_csv(path: PathLike, points: PointCloud) -> None:
    rows = ["x,y,z"]
    rows += [",".join(_format(v) for v in point) for point in np.asarray(points)]
    Path(path).write_text("\n".join(rows) + "\n")


def normalize(points: PointCloud) -> PointCloud:
    """Centre on the centroid and divide by the norm of the furthest point."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise EmptySetError("Cannot normalise an empty cloud")
    centered = points - points.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if len(points) < 2 or radius == 0.0:
        raise DegenerateCloudError("Cloud is degenerate: all points coincide")
    return centered / radius


def resample(points: PointCloud, count: int, seed) -> PointCloud:
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise EmptySetError("Cannot resample an empty cloud")
    rng = np.random.default_rng(seed)
    if len(points) >= count:
        index = rng.permutation(len(points))[:count]
    else:
        Warnings.resampled_with_replacement(len(points), count)
        index = rng.integers(0, len(points), size=count)
    return points[index]
