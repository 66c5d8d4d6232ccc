"""File formats: binary field dumps, sparse text dumps, slice CSVs with sidecars."""

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from opwalk.utils.errors import ConfigurationError

ENVIRONMENT_MAGIC = b"OPW1"
BACKBONE_MAGIC = b"OPB1"
FLOAT_FORMAT = "%.17g"


# ======================================================================
# BINARY FIELD DUMPS
# ======================================================================

@dataclass(frozen=True)
class FieldHeader:
    """Header of a binary field dump."""

    d: int
    spatial_extents: Tuple[int, ...]
    time_range: Tuple[int, int]
    p: float
    seed: int
    periodic: bool
    center: Tuple[int, ...]
    horizon: Optional[int] = None


def write_field_dump(path: Path, magic: bytes, header: FieldHeader, bits: np.ndarray) -> Path:
    """
    Write a field as header + row-major little-endian packed bits.

    Layout: magic, d (uint32), extents (d x int64), t_lo, t_hi (int64),
    p (float64), seed (uint64), boundary flag (uint8), centre (d x int64),
    then for backbone dumps the horizon (int64), then the packed bits.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = header.d
    blob = bytearray(magic)
    blob += struct.pack("<I", d)
    blob += struct.pack(f"<{d}q", *header.spatial_extents)
    blob += struct.pack("<qq", *header.time_range)
    blob += struct.pack("<d", header.p)
    blob += struct.pack("<Q", header.seed & 0xFFFFFFFFFFFFFFFF)
    blob += struct.pack("<B", int(header.periodic))
    blob += struct.pack(f"<{d}q", *header.center)
    if magic == BACKBONE_MAGIC:
        blob += struct.pack("<q", header.horizon)
    packed = np.packbits(np.ascontiguousarray(bits, dtype=bool).ravel(), bitorder="little")
    blob += packed.tobytes()
    path.write_bytes(bytes(blob))
    return path


def read_field_dump(path: Path) -> Tuple[bytes, FieldHeader, np.ndarray]:
    """Inverse of :func:`write_field_dump`; returns (magic, header, bits)."""
    raw = Path(path).read_bytes()
    magic = raw[:4]
    if magic not in (ENVIRONMENT_MAGIC, BACKBONE_MAGIC):
        raise ConfigurationError(f"{path}: unknown field dump magic {magic!r}")
    pos = 4
    (d,) = struct.unpack_from("<I", raw, pos); pos += 4
    extents = struct.unpack_from(f"<{d}q", raw, pos); pos += 8 * d
    t_lo, t_hi = struct.unpack_from("<qq", raw, pos); pos += 16
    (p,) = struct.unpack_from("<d", raw, pos); pos += 8
    (seed,) = struct.unpack_from("<Q", raw, pos); pos += 8
    (flag,) = struct.unpack_from("<B", raw, pos); pos += 1
    center = struct.unpack_from(f"<{d}q", raw, pos); pos += 8 * d
    horizon = None
    if magic == BACKBONE_MAGIC:
        (horizon,) = struct.unpack_from("<q", raw, pos); pos += 8
    shape = (t_hi - t_lo + 1,) + tuple(2 * e + 1 for e in extents)
    if magic == BACKBONE_MAGIC:
        shape = (horizon - t_lo + 1,) + shape[1:]
    count = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8, offset=pos),
                         count=count, bitorder="little").astype(bool).reshape(shape)
    header = FieldHeader(d=d, spatial_extents=tuple(extents), time_range=(t_lo, t_hi),
                         p=p, seed=seed, periodic=bool(flag), center=tuple(center),
                         horizon=horizon)
    return magic, header, bits


# ======================================================================
# SPARSE TEXT DUMPS
# ======================================================================

def write_sparse_text(path: Path, points: Iterable[Tuple[Sequence[int], int]]) -> Path:
    """One line ``x_1 ... x_d n`` per open site."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [" ".join(str(int(c)) for c in (*x, n)) for x, n in points]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


def read_sparse_text(path: Path) -> np.ndarray:
    """Rows of (x_1, ..., x_d, n) as an integer array."""
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        return np.zeros((0, 0), dtype=np.int64)
    return np.array(rows, dtype=np.int64)


# ======================================================================
# CSV + SIDECAR
# ======================================================================

def write_table(path: Path, frame: pd.DataFrame) -> Path:
    """Deterministic CSV body (fixed float format, no index)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_sidecar(path: Path, metadata: Dict[str, Any]) -> Path:
    """JSON metadata written next to a CSV (``<name>.meta.json``)."""
    path = Path(path)
    sidecar = path.with_suffix(".meta.json")
    sidecar.parent.mkdir(parents=True, exist_ok=True)
    sidecar.write_text(json.dumps(metadata, indent=2, sort_keys=True, default=_jsonable))
    return sidecar


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serialisable: {type(value).__name__}")
