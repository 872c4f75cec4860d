"""Global insights and per-instance explanations from a relabeled chain."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import special

from ._io import atomic_write_bytes
from .errors import DimensionError, NumericalError
from .model import LOG_2PI
from .relabel import RelabeledChain

DOMINANCE_THRESHOLD = 0.05
DEFAULT_INSIGHT_K = 150
DEFAULT_SEGMENTS = 20


@dataclass
class InsightMap:
    class_tag: str
    importance: np.ndarray
    top_k: list
    component_weights: np.ndarray
    source: str = ""

    def to_dict(self) -> dict:
        return {"class_tag": self.class_tag, "importance": self.importance,
                "top_k": [int(i) for i in self.top_k],
                "component_weights": self.component_weights, "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "InsightMap":
        return cls(class_tag=d.get("class_tag", ""),
                   importance=np.asarray(d["importance"], dtype=np.float64),
                   top_k=[int(i) for i in d["top_k"]],
                   component_weights=np.asarray(d.get("component_weights", []), dtype=np.float64),
                   source=d.get("source", ""))

    def ranking(self) -> np.ndarray:
        """All features ordered by descending importance (ties: lower index first)."""
        return rank_descending(self.importance)


@dataclass
class Explanation:
    instance_index: int
    assigned_component: int
    coefficients: np.ndarray
    top_segments: list
    responsibility: float
    responsibilities: np.ndarray = field(default_factory=lambda: np.empty(0))
    segment_scores: np.ndarray = field(default_factory=lambda: np.empty(0))

    def to_dict(self) -> dict:
        return {"instance_index": int(self.instance_index),
                "assigned_component": int(self.assigned_component),
                "coefficients": self.coefficients,
                "top_segments": [int(i) for i in self.top_segments],
                "responsibility": float(self.responsibility),
                "responsibilities": self.responsibilities,
                "segment_scores": self.segment_scores}

    @classmethod
    def from_dict(cls, d: dict) -> "Explanation":
        return cls(instance_index=int(d["instance_index"]),
                   assigned_component=int(d.get("assigned_component", 0)),
                   coefficients=np.asarray(d.get("coefficients", []), dtype=np.float64),
                   top_segments=[int(i) for i in d["top_segments"]],
                   responsibility=float(d.get("responsibility", 1.0)),
                   responsibilities=np.asarray(d.get("responsibilities", []), dtype=np.float64),
                   segment_scores=np.asarray(d.get("segment_scores", []), dtype=np.float64))


def rank_descending(values) -> np.ndarray:
    return np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")


@dataclass
class PosteriorSummary:
    pi: np.ndarray       # (J,)
    beta: np.ndarray     # (J, p) feature coefficients
    sigma2: np.ndarray   # (J,)
    intercept: np.ndarray  # (J,), zeros when the fit had none


def posterior_summary(chain: RelabeledChain) -> PosteriorSummary:
    s = chain.chain.samples
    beta = s["beta"].mean(axis=0)
    if chain.chain.hp.intercept:
        icpt, beta = beta[:, -1], beta[:, :-1]
    else:
        icpt = np.zeros(beta.shape[0])
    return PosteriorSummary(pi=s["pi"].mean(axis=0), beta=beta,
                            sigma2=s["sigma2"].mean(axis=0), intercept=icpt)


def insight_importance(pi, beta, threshold: float = DOMINANCE_THRESHOLD) -> np.ndarray:
    """Weighted absolute coefficients over the dominant components."""
    pi = np.asarray(pi, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    keep = pi >= threshold
    if not keep.any():
        keep = pi == pi.max()
    return (pi[keep, None] * np.abs(beta[keep])).sum(axis=0)


def global_insights(chain: RelabeledChain, k: int = DEFAULT_INSIGHT_K,
                    threshold: float = DOMINANCE_THRESHOLD, source: str = "",
                    class_tag: str = "") -> InsightMap:
    summ = posterior_summary(chain)
    p = summ.beta.shape[1]
    if not 0 <= k <= p:
        raise ValueError(f"k={k} is outside [0, {p}]")
    imp = insight_importance(summ.pi, summ.beta, threshold)
    return InsightMap(class_tag=class_tag, importance=imp, top_k=rank_descending(imp)[:k].tolist(),
                      component_weights=summ.pi, source=source)


def grid_segments(width: int, height: int, patch: int) -> np.ndarray:
    """Label each pixel (row-major) with its square patch index."""
    if patch < 1 or width % patch or height % patch:
        raise DimensionError(f"{patch}x{patch} patches do not tile a {width}x{height} image")
    rows = np.arange(height)[:, None] // patch
    cols = np.arange(width)[None, :] // patch
    return (rows * (width // patch) + cols).reshape(-1)


def segment_scores(values, segments) -> np.ndarray:
    segments = np.asarray(segments)
    return np.bincount(segments, weights=np.asarray(values, dtype=np.float64),
                       minlength=int(segments.max()) + 1)


def responsibilities(summ: PosteriorSummary, x, y) -> np.ndarray:
    mu = summ.beta @ x + summ.intercept
    with np.errstate(divide="ignore"):
        lp = (np.log(summ.pi) - 0.5 * (LOG_2PI + np.log(summ.sigma2) + (y - mu) ** 2 / summ.sigma2))
    if not np.any(np.isfinite(lp)):
        raise NumericalError("every component gives zero responsibility")
    return np.exp(lp - special.logsumexp(lp))


def explain_instance(chain: RelabeledChain, x, y: float, k: int = DEFAULT_SEGMENTS,
                     segments=None, rank_by: str = "contribution", index: int = 0,
                     summary: Optional[PosteriorSummary] = None) -> Explanation:
    """Assign ``(x, y)`` to its most responsible component and rank its features.

    ``rank_by="contribution"`` scores a feature by ``|beta_l * x_l|``;
    ``"coefficient"`` uses ``|beta_l|``. With ``segments`` the scores are
    summed per segment label before ranking.
    """
    summ = summary if summary is not None else posterior_summary(chain)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    p = summ.beta.shape[1]
    if x.shape[0] != p:
        raise DimensionError(f"instance has {x.shape[0]} features, model has {p}")
    if not np.all(np.isfinite(x)):
        raise ValueError("instance contains non-finite values")
    r = responsibilities(summ, x, float(y))
    j = int(np.argmax(r))
    coef = summ.beta[j]
    if rank_by == "contribution":
        score = np.abs(coef * x)
    elif rank_by == "coefficient":
        score = np.abs(coef)
    else:
        raise ValueError(f"unknown rank_by {rank_by!r}")
    if segments is not None:
        segments = np.asarray(segments)
        if segments.shape != (p,):
            raise DimensionError("segment labels must cover every feature")
        score = segment_scores(score, segments)
    if not 0 <= k <= score.shape[0]:
        raise ValueError(f"k={k} is outside [0, {score.shape[0]}]")
    return Explanation(instance_index=index, assigned_component=j, coefficients=coef,
                       top_segments=rank_descending(score)[:k].tolist(),
                       responsibility=float(r[j]), responsibilities=r, segment_scores=score)


def explain_mode_level(*args, **kwargs):
    """Combine several components per instance (mode-level assignment).

    Not provided; instances are explained by a single component.
    """
    raise NotImplementedError("mode-level instance assignment is not implemented")


def heatmap_pixels(importance) -> np.ndarray:
    v = np.asarray(importance, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if not hi > lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def emit_heatmap(importance, width: int, height: int, path) -> Path:
    """Write an 8-bit binary PGM (P5), min-max scaled, row-major."""
    v = np.asarray(importance, dtype=np.float64).reshape(-1)
    if width < 1 or height < 1 or width * height != v.shape[0]:
        raise DimensionError(f"{width}x{height} image cannot hold {v.shape[0]} values")
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + heatmap_pixels(v).tobytes())
    return Path(path)


def square_side(p: int) -> Optional[int]:
    s = math.isqrt(p)
    return s if s * s == p else None
