"""Point-set file formats and synthetic data generators.

Binary layout: 24-byte header (magic ``BKNN``, u32 version, u64 row
count, u32 dimension, u32 reserved, little endian) followed by the rows
as packed little-endian float32.  CSV holds one point per line, comma
separated; blank lines and ``#`` comments are skipped.  Loading sniffs
the format from the content, not the file name.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import PointMatrix, as_point_matrix

__all__ = [
    "DatasetFormatError",
    "MAGIC",
    "FORMAT_VERSION",
    "write_dataset",
    "load_dataset",
    "gen_synthetic",
    "gen_mixture",
    "gen_outlier_instance",
]

MAGIC = b"BKNN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQII")  # magic, version, n, d, reserved


class DatasetFormatError(ValueError):
    """A dataset file does not parse; the message locates the fault."""


def write_dataset(path, points, fmt: str = "binary") -> None:
    pm = as_point_matrix(points)
    path = Path(path)
    if fmt == "binary":
        with open(path, "wb") as f:
            f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, pm.n, pm.d, 0))
            f.write(np.ascontiguousarray(pm.data, dtype="<f4").tobytes())
    elif fmt == "csv":
        np.savetxt(path, pm.data, delimiter=",", fmt="%.9g")
    else:
        raise ValueError(f"unknown format {fmt!r}, expected 'binary' or 'csv'")


def _load_binary(path: Path, raw: bytes) -> PointMatrix:
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(
            f"{path}: truncated header, {len(raw)} bytes but need {_HEADER.size}")
    magic, version, n, d, _reserved = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r} at byte 0")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version} at byte 4")
    if n < 1 or d < 1:
        raise DatasetFormatError(f"{path}: header claims {n} points of dimension {d}")
    need = _HEADER.size + 4 * n * d
    if len(raw) != need:
        raise DatasetFormatError(
            f"{path}: payload ends at byte {len(raw)}, expected {need} "
            f"for {n} x {d} float32")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, d)
    if not np.isfinite(data).all():
        bad = int(np.argmin(np.isfinite(data).ravel()))
        raise DatasetFormatError(
            f"{path}: non-finite value in row {bad // d}, column {bad % d}")
    return as_point_matrix(data.astype(np.float32))


def _load_csv(path: Path, raw: bytes) -> PointMatrix:
    rows = []
    d = None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DatasetFormatError(f"{path}: not valid UTF-8 at byte {e.start}") from None
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(",")
        if d is None:
            d = len(fields)
        elif len(fields) != d:
            raise DatasetFormatError(
                f"{path}: line {ln} has {len(fields)} fields, expected {d}")
        try:
            row = [float(x) for x in fields]
        except ValueError:
            raise DatasetFormatError(f"{path}: line {ln} is not numeric: {line!r}") from None
        if not all(np.isfinite(row)):
            raise DatasetFormatError(f"{path}: non-finite value on line {ln}")
        rows.append(row)
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    return as_point_matrix(np.asarray(rows, dtype=np.float32))


def load_dataset(path) -> PointMatrix:
    """Load a point set, sniffing binary versus CSV from the leading bytes."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == MAGIC:
        return _load_binary(path, raw)
    return _load_csv(path, raw)


def gen_synthetic(n: int, d: int, kind: str = "uniform", seed: int = 0,
                  components: int = 8) -> PointMatrix:
    """Synthetic point clouds: ``uniform`` on [0,1)^d or ``mixture`` of
    isotropic gaussians."""
    if kind == "uniform":
        rng = np.random.default_rng(seed)
        return as_point_matrix(rng.random((n, d), dtype=np.float32))
    if kind == "mixture":
        pts, _ = gen_mixture(n, d, components=components, seed=seed)
        return pts
    raise ValueError(f"unknown kind {kind!r}, expected 'uniform' or 'mixture'")


def gen_mixture(n: int, d: int, components: int = 8, spread: float = 0.05,
                seed: int = 0) -> tuple[PointMatrix, np.ndarray]:
    """Gaussian mixture draw; returns the points and their component labels."""
    if components < 1:
        raise ValueError("components must be >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.random((components, d))
    labels = rng.integers(0, components, size=n)
    pts = centers[labels] + rng.normal(0.0, spread, size=(n, d))
    return as_point_matrix(pts.astype(np.float32)), labels


def gen_outlier_instance(n: int, d: int, num_outliers: int, seed: int = 0
                         ) -> tuple[PointMatrix, np.ndarray]:
    """Uniform cloud on [0,1)^d with planted points far outside it.

    The planted rows sit in [3,4)^d, so every planted point is at least
    distance 2 from the cloud in each coordinate; returns the points and
    the planted row indices.
    """
    if not 0 <= num_outliers <= n:
        raise ValueError("num_outliers must be in [0, n]")
    rng = np.random.default_rng(seed)
    pts = rng.random((n, d)).astype(np.float32)
    idx = rng.choice(n, size=num_outliers, replace=False)
    pts[idx] = (3.0 + rng.random((num_outliers, d))).astype(np.float32)
    return as_point_matrix(pts), np.sort(idx)
