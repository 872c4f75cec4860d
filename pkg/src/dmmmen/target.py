"""Black-box target models and synthetic fixtures.

Every model maps a batch of feature rows to one probability per row. The
subprocess adapter speaks line-delimited JSON: one request line
``{"x": [[...], ...]}`` on stdin, answered by one line ``{"y": [...]}`` on
stdout.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._io import write_json
from .data import DatasetMatrix, guess_format, load_matrix, sigmoid
from .errors import (ArityError, ConvergenceError, DimensionError, ParseError,
                     ProtocolError, SchemaError)


class BlackBoxModel:
    kind = "abstract"

    def __init__(self, n_features: Optional[int] = None, metadata: str = ""):
        self.n_features = n_features
        self.metadata = metadata

    def predict(self, X) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise TypeError(f"{self.kind} models cannot be serialized")


class LogisticModel(BlackBoxModel):
    kind = "builtin-logistic"

    def __init__(self, weights, bias: float = 0.0, metadata: str = ""):
        self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        self.bias = float(bias)
        super().__init__(self.weights.shape[0], metadata)

    def decision(self, X) -> np.ndarray:
        # row-wise sums keep each row's value independent of the batch it is in
        return (np.asarray(X, dtype=np.float64) * self.weights).sum(axis=1) + self.bias

    def predict(self, X) -> np.ndarray:
        return sigmoid(self.decision(X))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "weights": self.weights, "bias": self.bias,
                "metadata": self.metadata}


class MLPModel(BlackBoxModel):
    """One tanh hidden layer followed by a sigmoid output."""

    kind = "builtin-mlp"

    def __init__(self, W1, b1, w2, b2: float, metadata: str = ""):
        self.W1 = np.asarray(W1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = float(b2)
        super().__init__(self.W1.shape[0], metadata)

    def predict(self, X) -> np.ndarray:
        H = np.tanh(np.asarray(X, dtype=np.float64) @ self.W1 + self.b1)
        return sigmoid((H * self.w2).sum(axis=1) + self.b2)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "W1": self.W1, "b1": self.b1, "w2": self.w2,
                "b2": self.b2, "metadata": self.metadata}


class PredictionFileModel(BlackBoxModel):
    """Serves stored probabilities; row ``i`` of the query gets value ``i``."""

    kind = "prediction-file"

    def __init__(self, values, n_features: Optional[int] = None, metadata: str = ""):
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
            raise ValueError("stored predictions must lie in [0, 1]")
        self.values = v
        super().__init__(n_features, metadata)

    def predict(self, X) -> np.ndarray:
        n = np.asarray(X).shape[0]
        if n != self.values.shape[0]:
            raise DimensionError(f"{n} rows queried, {self.values.shape[0]} predictions stored")
        return self.values.copy()


class SubprocessModel(BlackBoxModel):
    """Queries an external program over the JSON-lines protocol.

    The program must answer deterministically. Requests are serialized on a
    single pipe, so one instance must not be shared by concurrent callers
    expecting parallelism.
    """

    kind = "subprocess"

    def __init__(self, command, n_features: Optional[int] = None, metadata: str = "",
                 timeout: Optional[float] = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc = None
        self._lock = threading.Lock()
        super().__init__(n_features, metadata or " ".join(self.command))

    def _ensure(self):
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE,
                                          stdout=subprocess.PIPE, text=True, bufsize=1)
        return self._proc

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        request = json.dumps({"x": X.tolist()}) + "\n"
        with self._lock:
            proc = self._ensure()
            try:
                proc.stdin.write(request)
                proc.stdin.flush()
                line = proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise ProtocolError(f"model process failed: {exc}") from None
        if not line:
            raise ProtocolError("model process closed its output")
        try:
            reply = json.loads(line)
            y = np.asarray(reply["y"], dtype=np.float64).reshape(-1)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError):
            raise ProtocolError(f"malformed reply: {line.strip()[:200]!r}") from None
        if y.shape[0] != X.shape[0]:
            raise ProtocolError(f"reply has {y.shape[0]} values for {X.shape[0]} rows")
        return y

    def close(self):
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
            if self._proc.stdout:
                self._proc.stdout.close()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def predict_batch(model: BlackBoxModel, X) -> np.ndarray:
    """Query ``model`` and validate the reply (length n, values in [0, 1])."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if model.n_features is not None and X.shape[1] != model.n_features:
        raise ArityError(f"model expects {model.n_features} features, got {X.shape[1]}")
    y = np.asarray(model.predict(X), dtype=np.float64).reshape(-1)
    if y.shape[0] != X.shape[0]:
        raise ProtocolError(f"model returned {y.shape[0]} values for {X.shape[0]} rows")
    if np.any(~np.isfinite(y)) or np.any(y < 0) or np.any(y > 1):
        bad = ProtocolError if isinstance(model, SubprocessModel) else ValueError
        raise bad("model returned values outside [0, 1]")
    return y


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _check_labels(labels):
    t = np.asarray(labels, dtype=np.float64).reshape(-1)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("labels must be 0 or 1")
    return t


def train_builtin_logistic(X, labels, l2: float = 0.0, iters: int = 2000) -> LogisticModel:
    """Full-batch gradient descent on the mean log-loss plus ``l2/2 |w|^2``."""
    X = np.asarray(X, dtype=np.float64)
    t = _check_labels(labels)
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    n, p = X.shape
    # step 1/L with L the gradient Lipschitz bound (bias folded in as a column)
    lip = 0.25 * (np.linalg.norm(X, 2) ** 2 + n) / n + l2
    lr = 1.0 / lip
    w = np.zeros(p)
    b = 0.0
    for _ in range(iters):
        with np.errstate(invalid="ignore", over="ignore"):
            g = sigmoid(X @ w + b) - t
            w -= lr * (X.T @ g / n + l2 * w)
            b -= lr * g.mean()
        if not (np.all(np.isfinite(w)) and np.isfinite(b)):
            raise ConvergenceError("logistic training diverged")
    loss = np.mean(np.logaddexp(0.0, X @ w + b) - t * (X @ w + b)) + 0.5 * l2 * w @ w
    if not np.isfinite(loss):
        raise ConvergenceError("logistic loss is not finite")
    return LogisticModel(w, b, metadata=f"trained: l2={l2}, iters={iters}")


def train_builtin_mlp(X, labels, hidden: int = 16, l2: float = 1e-4, iters: int = 3000,
                      lr: float = 0.1, seed: int = 0) -> MLPModel:
    """Small nonlinear target for demos; plain gradient descent."""
    X = np.asarray(X, dtype=np.float64)
    t = _check_labels(labels)
    n, p = X.shape
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((p, hidden)) / np.sqrt(p)
    b1 = np.zeros(hidden)
    w2 = rng.standard_normal(hidden) / np.sqrt(hidden)
    b2 = 0.0
    for _ in range(iters):
        H = np.tanh(X @ W1 + b1)
        g = sigmoid(H @ w2 + b2) - t
        gw2 = H.T @ g / n + l2 * w2
        gH = np.outer(g, w2) * (1.0 - H ** 2)
        W1 -= lr * (X.T @ gH / n + l2 * W1)
        b1 -= lr * gH.mean(axis=0)
        w2 -= lr * gw2
        b2 -= lr * g.mean()
        if not np.all(np.isfinite(W1)):
            raise ConvergenceError("MLP training diverged")
    return MLPModel(W1, b1, w2, b2, metadata=f"trained: hidden={hidden}, iters={iters}")


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def model_from_dict(d: dict) -> BlackBoxModel:
    kind = d.get("kind")
    try:
        if kind == LogisticModel.kind:
            return LogisticModel(d["weights"], d["bias"], d.get("metadata", ""))
        if kind == MLPModel.kind:
            return MLPModel(d["W1"], d["b1"], d["w2"], d["b2"], d.get("metadata", ""))
        if kind == SubprocessModel.kind:
            return SubprocessModel(d["command"], d.get("n_features"))
    except KeyError as exc:
        raise SchemaError(f"model description lacks {exc}") from None
    raise SchemaError(f"unknown model kind {kind!r}")


def save_model(model: BlackBoxModel, path) -> None:
    write_json(path, model.to_dict())


def load_model(path) -> BlackBoxModel:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from None
    return model_from_dict(d)


def load_prediction_file(path, format: Optional[str] = None, header: bool = False,
                         column: int = 0) -> PredictionFileModel:
    M = load_matrix(path, format or guess_format(path), header=header)
    if column >= M.shape[1]:
        raise DimensionError(f"{path}: no column {column}")
    return PredictionFileModel(M[:, column], metadata=str(path))


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n: int
    p: int
    true_components: Sequence  # (weight, coefficients, noise sd) triples
    seed: int = 0

    def __post_init__(self):
        wts = np.array([c[0] for c in self.true_components], dtype=np.float64)
        if wts.size == 0 or np.any(wts < 0) or abs(wts.sum() - 1) > 1e-9:
            raise ValueError("component weights must form a simplex")
        for _, coef, sd in self.true_components:
            if len(coef) != self.p:
                raise DimensionError(f"coefficient vector of length {len(coef)} for p={self.p}")
            if sd < 0:
                raise ValueError("noise sd must be >= 0")


def generate_synthetic(spec: SyntheticSpec) -> tuple:
    """Mixture-of-regressions data ``y = x beta_z + N(0, sd_z^2)``; returns (data, z)."""
    rng = np.random.default_rng(spec.seed)
    wts = np.array([c[0] for c in spec.true_components], dtype=np.float64)
    B = np.array([c[1] for c in spec.true_components], dtype=np.float64)
    sd = np.array([c[2] for c in spec.true_components], dtype=np.float64)
    z = rng.choice(len(wts), size=spec.n, p=wts / wts.sum())
    X = rng.standard_normal((spec.n, spec.p))
    y = (X * B[z]).sum(axis=1) + sd[z] * rng.standard_normal(spec.n)
    return DatasetMatrix(X, y, class_tag="synthetic"), z


RECOVERY_COEFFICIENTS = (
    (1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0),
    (1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0),
)


def recovery_spec(seed: int = 0, n: int = 2000) -> SyntheticSpec:
    """Two components, weights (0.6, 0.4), unit-magnitude coefficients, noise 0.1."""
    return SyntheticSpec(n=n, p=8, seed=seed, true_components=[
        (0.6, RECOVERY_COEFFICIENTS[0], 0.1), (0.4, RECOVERY_COEFFICIENTS[1], 0.1)])


@dataclass
class ImageTask:
    X: np.ndarray
    model: LogisticModel
    key_pixels: np.ndarray
    side: int
    labels: np.ndarray = field(default_factory=lambda: np.empty(0))


def image_task(side: int = 16, n: int = 1000, n_key: int = 40, weight: float = 0.5,
               seed: int = 0) -> ImageTask:
    """Synthetic grayscale images scored by a logistic model on ``n_key`` pixels.

    Half the images light up the key pixels (values in [0.7, 1]); the rest
    keep them dark like the background ([0, 0.3]). The target's weights are
    ``weight`` on key pixels and zero elsewhere, with the bias placed midway
    between the two groups.
    """
    rng = np.random.default_rng(seed)
    p = side * side
    key = np.sort(rng.choice(p, size=n_key, replace=False))
    X = rng.uniform(0.0, 0.3, size=(n, p))
    labels = (rng.random(n) < 0.5).astype(np.float64)
    pos = labels == 1
    X[np.ix_(pos, key)] = rng.uniform(0.7, 1.0, size=(int(pos.sum()), n_key))
    w = np.zeros(p)
    w[key] = weight
    bias = -weight * n_key * 0.5
    model = LogisticModel(w, bias, metadata=f"image task {side}x{side}, {n_key} key pixels")
    return ImageTask(X=X, model=model, key_pixels=key, side=side, labels=labels)
