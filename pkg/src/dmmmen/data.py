"""Dataset ingestion, logit targets and bootstrap subsets."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._io import atomic_write_bytes
from .errors import DimensionError, ParseError

DEFAULT_EPS = 1e-6
_RAW_HEADER = struct.Struct("<QQ")


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DatasetMatrix:
    """Design matrix ``X`` (n x p) paired with a real response ``y``.

    ``y`` normally holds logit-transformed probabilities from the target
    model for the class named by ``class_tag``. Arrays are stored read-only
    so one instance can be shared between workers.
    """

    X: np.ndarray
    y: np.ndarray
    class_tag: str = ""
    feature_names: Optional[tuple] = None

    def __post_init__(self):
        X = _frozen(self.X)
        y = _frozen(self.y).reshape(-1)
        if X.ndim != 2:
            raise DimensionError(f"X must be 2-D, got shape {X.shape}")
        n, p = X.shape
        if n < 1 or p < 1:
            raise DimensionError(f"X must have at least one row and column, got {X.shape}")
        if y.shape[0] != n:
            raise DimensionError(f"y has length {y.shape[0]} but X has {n} rows")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        names = self.feature_names
        if names is not None:
            names = tuple(str(s) for s in names)
            if len(names) != p:
                raise DimensionError(f"{len(names)} feature names for {p} columns")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, indices) -> "DatasetMatrix":
        idx = np.asarray(indices, dtype=np.intp)
        return DatasetMatrix(self.X[idx], self.y[idx], self.class_tag, self.feature_names)


@dataclass(frozen=True)
class BootstrapSample:
    indices: np.ndarray
    fraction: float = field(default=1.0)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _check_finite(M, path):
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{path}: non-finite entry")


def _load_csv(path, header):
    rows = []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DimensionError(
                    f"{path}:{lineno}: row has {len(vals)} fields, expected {width}")
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def _load_raw(path):
    buf = Path(path).read_bytes()
    if len(buf) < _RAW_HEADER.size:
        raise ParseError(f"{path}: truncated header")
    n, p = _RAW_HEADER.unpack_from(buf)
    body = buf[_RAW_HEADER.size:]
    if len(body) != 8 * n * p:
        raise DimensionError(
            f"{path}: header declares {n}x{p} but body holds {len(body) // 8} values")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(n, p)


def load_matrix(path, format: str = "csv", header: bool = False) -> np.ndarray:
    """Read a numeric matrix from ``csv`` or ``raw-f64``.

    The raw layout is two little-endian uint64 dimensions (rows, cols)
    followed by row-major little-endian float64 values.
    """
    if format == "csv":
        M = _load_csv(path, header)
    elif format in ("raw-f64", "raw"):
        M = _load_raw(path)
    else:
        raise ValueError(f"unknown matrix format {format!r}")
    _check_finite(M, path)
    return M


def matrix_bytes(M, format: str = "csv") -> bytes:
    """Serialize ``M`` (a vector becomes one column); CSV cells use ``repr``."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in M:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue().encode("ascii")
    if format in ("raw-f64", "raw"):
        return _RAW_HEADER.pack(*M.shape) + np.ascontiguousarray(M, dtype="<f8").tobytes()
    raise ValueError(f"unknown matrix format {format!r}")


def save_matrix(M, path, format: str = "csv") -> None:
    atomic_write_bytes(path, matrix_bytes(M, format))


def guess_format(path) -> str:
    return "raw-f64" if str(path).endswith((".bin", ".raw", ".f64")) else "csv"


# ---------------------------------------------------------------------------
# targets
# ---------------------------------------------------------------------------

def sigmoid(v):
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def logit_targets(probs, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Clamped logit: ``ln(v / (1 - v))`` with ``v`` clipped to [eps, 1 - eps]."""
    if not 0 < eps < 0.5:
        raise ValueError(f"eps must lie in (0, 0.5), got {eps}")
    v = np.asarray(probs, dtype=np.float64)
    if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    v = np.clip(v, eps, 1.0 - eps)
    return np.log(v) - np.log1p(-v)


def per_class_split(X, class_probs, eps: float = DEFAULT_EPS,
                    class_tags: Optional[Sequence[str]] = None,
                    feature_names=None) -> list:
    """One regression dataset per class column of ``class_probs``."""
    X = np.asarray(X, dtype=np.float64)
    P = np.asarray(class_probs, dtype=np.float64)
    if P.ndim == 1:
        P = P[:, None]
    if X.shape[0] != P.shape[0]:
        raise DimensionError(f"X has {X.shape[0]} rows, probabilities have {P.shape[0]}")
    C = P.shape[1]
    if C > 1 and not np.allclose(P.sum(axis=1), 1.0, rtol=0, atol=1e-6):
        raise ValueError("class probability rows must sum to 1")
    tags = list(class_tags) if class_tags is not None else [str(c) for c in range(C)]
    if len(tags) != C:
        raise DimensionError(f"{len(tags)} class tags for {C} columns")
    return [DatasetMatrix(X, logit_targets(P[:, c], eps), tags[c], feature_names)
            for c in range(C)]


def minmax_scale(X):
    """Scale columns to [0, 1]; constant columns map to 0.

    Returns the scaled matrix plus the per-column ``(lo, span)`` needed to
    apply the same map to new rows.
    """
    X = np.asarray(X, dtype=np.float64)
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    safe = np.where(span > 0, span, 1.0)
    return (X - lo) / safe, lo, span


def bootstrap(data, fraction: float, seed) -> BootstrapSample:
    """Draw ``ceil(fraction * n)`` distinct row indices (no replacement)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = data.n if isinstance(data, DatasetMatrix) else int(data)
    # round first so that e.g. 0.3 * 100 does not ceil to 31
    size = max(1, math.ceil(round(fraction * n, 9)))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=size, replace=False))
    return BootstrapSample(indices=idx, fraction=float(fraction))
