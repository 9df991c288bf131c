"""
Binary checkpoint format:

    b"PSAF" | uint32 version | uint32 header length | JSON header |
    float64 parameter blob (header order) | uint32 CRC-32 of the blob

All integers and floats are little-endian.
"""

import json
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from pshape.exceptions import (
    ConfigurationError,
    CorruptCheckpointError,
    HeaderMismatch,
)
from pshape.models import Architecture, ShapeModel, build_model
from pshape.transport import TransportSettings

PathLike = Union[Path, str]
MAGIC = b"PSAF"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_CHECKSUM = struct.Struct("<I")


def serialize(
    model: ShapeModel, epoch: int = 0, val_total: Optional[float] = None
) -> bytes:
    params = model.parameters()
    header = {
        "format": "pshape-checkpoint",
        "kind": model.kind,
        "architecture": model.architecture.to_dict(),
        "parameters": [{"name": p.name, "shape": list(p.shape)} for p in params],
        "epoch": int(epoch),
    }
    if val_total is not None:
        header["val_total"] = float(val_total)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(
        np.ascontiguousarray(p.value, dtype="<f8").tobytes() for p in params
    )
    return (
        _PREFIX.pack(MAGIC, VERSION, len(header_bytes))
        + header_bytes
        + blob
        + _CHECKSUM.pack(zlib.crc32(blob) & 0xFFFFFFFF)
    )


def save_checkpoint(
    model: ShapeModel,
    path: PathLike,
    epoch: int = 0,
    val_total: Optional[float] = None,
) -> Path:
    """Write atomically; `val_total` records the validation loss a best checkpoint
    was selected on."""
    path = Path(path)
    partial = path.with_name(path.name + ".partial")
    partial.write_bytes(serialize(model, epoch, val_total))
    partial.replace(path)
    return path


def _parse(data: bytes, source: str):
    if len(data) < _PREFIX.size + _CHECKSUM.size:
        raise CorruptCheckpointError(f"{source}: file is truncated")
    magic, version, header_length = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(
            f"{source}: bad magic {magic!r}, expected {MAGIC!r}"
        )
    if version != VERSION:
        raise CorruptCheckpointError(f"{source}: unsupported format version {version}")
    blob_start = _PREFIX.size + header_length
    blob_end = len(data) - _CHECKSUM.size
    if blob_start > blob_end:
        raise CorruptCheckpointError(f"{source}: header length exceeds file size")
    try:
        header = json.loads(data[_PREFIX.size : blob_start].decode("utf-8"))
        shapes = [tuple(entry["shape"]) for entry in header["parameters"]]
        names = [entry["name"] for entry in header["parameters"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as error:
        raise CorruptCheckpointError(f"{source}: unreadable header ({error})")
    blob = data[blob_start:blob_end]
    expected = 8 * sum(int(np.prod(shape)) for shape in shapes)
    if len(blob) != expected:
        raise CorruptCheckpointError(
            f"{source}: parameter blob has {len(blob)} bytes, "
            f"header declares {expected}"
        )
    (checksum,) = _CHECKSUM.unpack_from(data, blob_end)
    if checksum != zlib.crc32(blob) & 0xFFFFFFFF:
        raise CorruptCheckpointError(f"{source}: checksum mismatch")
    return header, names, shapes, blob


def read_header(path: PathLike) -> Dict[str, Any]:
    header, *_ = _parse(Path(path).read_bytes(), str(path))
    return header


def check_architecture(stored: Architecture, requested: Architecture) -> None:
    stored_values, requested_values = stored.to_dict(), requested.to_dict()
    for key, value in requested_values.items():
        # the initialisation seed is irrelevant once parameters are stored
        if key != "init_seed" and stored_values.get(key) != value:
            HeaderMismatch(key, stored_values.get(key), value)


def load_checkpoint(
    path: PathLike,
    expected: Optional[Architecture] = None,
    settings: Optional[TransportSettings] = None,
) -> ShapeModel:
    header, names, shapes, blob = _parse(Path(path).read_bytes(), str(path))
    try:
        architecture = Architecture.from_dict(header["architecture"])
    except (KeyError, TypeError, ConfigurationError) as error:
        raise CorruptCheckpointError(f"{path}: invalid architecture record ({error})")
    if expected is not None:
        check_architecture(architecture, expected)
    model = build_model(architecture, settings)
    params = model.parameters()
    if [p.name for p in params] != names or [p.shape for p in params] != shapes:
        raise CorruptCheckpointError(
            f"{path}: parameter layout does not match its architecture"
        )
    values = np.frombuffer(blob, dtype="<f8")
    offset = 0
    for param, shape in zip(params, shapes):
        size = int(np.prod(shape))
        param.value = values[offset : offset + size].astype(np.float64).reshape(shape)
        param.zero_grad()
        offset += size
    return model
