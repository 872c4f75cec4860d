"""Fidelity experiments: perturb inputs along a feature ranking and re-query the target.

Each replicate owns an RNG stream seeded by ``(seed, replicate)``, so
results do not depend on the order in which replicates run. Confidence
intervals are the 2.5 and 97.5 percentiles of the replicate values.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._io import atomic_write_text, dumps
from .data import DatasetMatrix, bootstrap
from .errors import DimensionError, SchemaError
from .explain import Explanation, InsightMap, grid_segments, rank_descending
from .target import BlackBoxModel, predict_batch

DEFAULT_COUNTS = (50, 75, 100, 125, 150)
DEFAULT_REPLICATES = 50
DEFAULT_FRACTION = 0.3
POSITIVE_THRESHOLD = 0.5
EXPERIMENTS = ("nullify-positive", "replace-negative", "craft-cases", "keep-top-k")


@dataclass
class EvalReport:
    experiment: str
    feature_counts: list
    pcr_insight: np.ndarray
    pcr_insight_ci: np.ndarray      # (C, 2) lower, upper
    pcr_random: np.ndarray
    pcr_random_ci: np.ndarray
    replicates: int
    seed: int
    raw_insight: np.ndarray         # (R, C) per-replicate values
    raw_random: np.ndarray
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")

    def to_dict(self) -> dict:
        return {"experiment": self.experiment,
                "feature_counts": [int(c) for c in self.feature_counts],
                "pcr_insight": self.pcr_insight, "pcr_insight_ci": self.pcr_insight_ci,
                "pcr_random": self.pcr_random, "pcr_random_ci": self.pcr_random_ci,
                "replicates": int(self.replicates), "seed": int(self.seed),
                "raw_insight": self.raw_insight, "raw_random": self.raw_random,
                "extra": self.extra}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        try:
            def arr(k):
                return np.asarray(d[k], dtype=np.float64)
            return cls(experiment=d["experiment"],
                       feature_counts=[int(c) for c in d["feature_counts"]],
                       pcr_insight=arr("pcr_insight"), pcr_insight_ci=arr("pcr_insight_ci"),
                       pcr_random=arr("pcr_random"), pcr_random_ci=arr("pcr_random_ci"),
                       replicates=int(d["replicates"]), seed=int(d["seed"]),
                       raw_insight=arr("raw_insight"), raw_random=arr("raw_random"),
                       extra=d.get("extra", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed report: {exc}") from None


def percentile_ci(values, level: float = 0.95) -> np.ndarray:
    """Percentile interval per column, ignoring NaN rows."""
    v = np.asarray(values, dtype=np.float64)
    tail = 100 * (1 - level) / 2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanpercentile(v, [tail, 100 - tail], axis=0).T


def _nanmean(v):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(v, axis=0)


def _summarize(experiment, counts, raw_ins, raw_rnd, replicates, seed, extra) -> EvalReport:
    raw_ins = np.asarray(raw_ins, dtype=np.float64)
    raw_rnd = np.asarray(raw_rnd, dtype=np.float64)
    return EvalReport(experiment=experiment, feature_counts=list(counts),
                      pcr_insight=_nanmean(raw_ins), pcr_insight_ci=percentile_ci(raw_ins),
                      pcr_random=_nanmean(raw_rnd), pcr_random_ci=percentile_ci(raw_rnd),
                      replicates=replicates, seed=int(seed), raw_insight=raw_ins,
                      raw_random=raw_rnd, extra=extra)


def replicate_rng(seed, replicate: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(replicate)])


def _ranking(insights) -> np.ndarray:
    if isinstance(insights, InsightMap):
        return insights.ranking()
    return np.asarray(insights, dtype=np.intp)


def _check_counts(counts, p):
    counts = [int(c) for c in counts]
    if not counts:
        raise ValueError("need at least one feature count")
    for c in counts:
        if not 0 <= c <= p:
            raise ValueError(f"feature count {c} is outside [0, {p}]")
    return counts


def _as_matrix(data) -> np.ndarray:
    return np.asarray(data.X if isinstance(data, DatasetMatrix) else data, dtype=np.float64)


def perturb(X, features, values) -> np.ndarray:
    """Copy of ``X`` with ``features`` overwritten by ``values[features]``."""
    out = np.array(X, dtype=np.float64, copy=True)
    features = np.asarray(features, dtype=np.intp)
    if features.size:
        out[:, features] = np.asarray(values, dtype=np.float64)[features]
    return out


def _pcr(model, X) -> float:
    if X.shape[0] == 0:
        return float("nan")
    return float(np.mean(predict_batch(model, X) >= POSITIVE_THRESHOLD))


def nullify_experiment(data, model: BlackBoxModel, insights, counts: Sequence[int] = DEFAULT_COUNTS,
                       replicates: int = DEFAULT_REPLICATES, fraction: float = DEFAULT_FRACTION,
                       seed: int = 0, nullify: str = "zero") -> tuple:
    """Nullify top features in positive cases and implant them in negative cases.

    Returns ``(nullify_report, replace_report)``. In each replicate a subset
    of ``fraction`` of the rows is drawn. Model-positive rows (probability at
    least 0.5) get the top-``count`` features set to the null value (0, or
    the per-feature minimum with ``nullify="min"``); model-negative rows get
    the same features set to their mean over all model-positive rows. The
    random arm repeats this with uniformly drawn feature sets of equal size.
    A replicate whose subset holds no rows of one class records NaN for that
    experiment and is skipped in the summaries; with no model-negative rows
    at all the replace report is entirely NaN.
    """
    X = _as_matrix(data)
    n, p = X.shape
    counts = _check_counts(counts, p)
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    rank = _ranking(insights)
    base = predict_batch(model, X)
    positive = base >= POSITIVE_THRESHOLD
    if not positive.any():
        raise ValueError("the model labels no row positive")
    pos_mean = X[positive].mean(axis=0)
    if nullify == "zero":
        null = np.zeros(p)
    elif nullify == "min":
        null = X.min(axis=0)
    else:
        raise ValueError(f"unknown nullify mode {nullify!r}")

    C = len(counts)
    shape = (replicates, C)
    null_ins, null_rnd = np.empty(shape), np.empty(shape)
    repl_ins, repl_rnd = np.empty(shape), np.empty(shape)
    for r in range(replicates):
        rng = replicate_rng(seed, r)
        idx = bootstrap(n, fraction, rng).indices
        Xp = X[idx[positive[idx]]]
        Xn = X[idx[~positive[idx]]]
        for ci, c in enumerate(counts):
            top = rank[:c]
            rand = rng.choice(p, size=c, replace=False)
            null_ins[r, ci] = _pcr(model, perturb(Xp, top, null))
            null_rnd[r, ci] = _pcr(model, perturb(Xp, rand, null))
            repl_ins[r, ci] = _pcr(model, perturb(Xn, top, pos_mean))
            repl_rnd[r, ci] = _pcr(model, perturb(Xn, rand, pos_mean))
    extra = {"fraction": float(fraction), "nullify": nullify, "model": model.metadata}
    return (_summarize("nullify-positive", counts, null_ins, null_rnd, replicates, seed, extra),
            _summarize("replace-negative", counts, repl_ins, repl_rnd, replicates, seed, extra))


def craft_cases_experiment(model: BlackBoxModel, insights, counts: Sequence[int] = DEFAULT_COUNTS,
                           n_cases: int = 500, positive_fill: str = "positive-mean", seed: int = 0,
                           data=None, replicates: int = 20, fill_values=None,
                           ranges=None) -> EvalReport:
    """Build synthetic inputs with top features set to positive-looking values.

    Non-selected features are uniform within the observed per-feature range.
    ``positive-mean`` fills with the mean over model-positive rows of
    ``data``; ``max-value`` uses the per-feature maximum. Both arms of a
    replicate share the same uniform background rows. Explicit
    ``fill_values`` and ``ranges`` (a ``(lo, hi)`` pair) replace what would
    be derived from ``data``.
    """
    if ranges is None or fill_values is None:
        if data is None:
            raise ValueError("data is required unless fill_values and ranges are given")
        X = _as_matrix(data)
    if ranges is None:
        lo, hi = X.min(axis=0), X.max(axis=0)
    else:
        lo, hi = (np.asarray(v, dtype=np.float64) for v in ranges)
    p = lo.shape[0]
    if fill_values is None:
        if positive_fill == "positive-mean":
            positive = predict_batch(model, X) >= POSITIVE_THRESHOLD
            if not positive.any():
                raise ValueError("the model labels no row positive")
            fill = X[positive].mean(axis=0)
        elif positive_fill == "max-value":
            fill = X.max(axis=0)
        else:
            raise ValueError(f"unknown positive_fill {positive_fill!r}")
    else:
        fill = np.asarray(fill_values, dtype=np.float64)
    if fill.shape != (p,) or hi.shape != (p,):
        raise DimensionError("fill values and ranges must have one entry per feature")
    counts = _check_counts(counts, p)
    if n_cases < 1 or replicates < 1:
        raise ValueError("n_cases and replicates must be >= 1")
    rank = _ranking(insights)

    C = len(counts)
    raw_ins, raw_rnd = np.empty((replicates, C)), np.empty((replicates, C))
    for r in range(replicates):
        rng = replicate_rng(seed, r)
        for ci, c in enumerate(counts):
            background = rng.uniform(lo, hi, size=(n_cases, p))
            rand = rng.choice(p, size=c, replace=False)
            raw_ins[r, ci] = _pcr(model, perturb(background, rank[:c], fill))
            raw_rnd[r, ci] = _pcr(model, perturb(background, rand, fill))
    extra = {"n_cases": int(n_cases), "positive_fill": positive_fill, "model": model.metadata}
    return _summarize("craft-cases", counts, raw_ins, raw_rnd, replicates, seed, extra)


def keep_segments(x, segments, keep) -> np.ndarray:
    """Zero every feature whose segment label is not in ``keep``."""
    mask = np.isin(np.asarray(segments), np.asarray(keep, dtype=np.intp))
    return np.where(mask, x, 0.0)


def _segment_order(e: Explanation, k: int, n_seg: int):
    """First ``k`` segments of an explanation, re-ranked from its scores if needed."""
    if len(e.top_segments) >= k:
        return e.top_segments[:k]
    if e.segment_scores.shape == (n_seg,):
        return rank_descending(e.segment_scores)[:k]
    raise ValueError(f"explanation of instance {e.instance_index} ranks fewer than k={k} segments")


def _bootstrap_mean_ci(values, rng, n_boot: int = 1000, level: float = 0.95) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    idx = rng.integers(0, v.shape[0], size=(n_boot, v.shape[0]))
    return percentile_ci(v[idx].mean(axis=1)[:, None], level)[0]


def keep_topk_experiment(data, model: BlackBoxModel, rankings: Sequence[Explanation], k: int = 20,
                         segmentation: Optional[dict] = None, seed: int = 0,
                         n_boot: int = 1000) -> EvalReport:
    """Keep the ``k`` top-ranked segments of each explained instance, zero the rest.

    ``segmentation`` is a grid spec ``{"width", "height", "patch"}``. The
    insight arm uses each explanation's segment ranking; the random arm
    keeps ``k`` uniformly drawn segments. Reported per arm: accuracy (the
    fraction of instances keeping their original predicted class) with a
    bootstrap CI over instances. ``extra`` holds the mean probability of the
    original class with its CI and the raw perturbed probabilities.
    """
    X = _as_matrix(data)
    if segmentation is None:
        raise ValueError("a grid segmentation spec is required")
    width, height, patch = (int(segmentation[key]) for key in ("width", "height", "patch"))
    if width * height != X.shape[1]:
        raise DimensionError(f"{width}x{height} grid does not match {X.shape[1]} features")
    seg = grid_segments(width, height, patch)
    n_seg = int(seg.max()) + 1
    if not 0 <= k <= n_seg:
        raise ValueError(f"k={k} is outside [0, {n_seg}]")
    if not rankings:
        raise ValueError("no explanations given")
    idx = np.array([e.instance_index for e in rankings], dtype=np.intp)
    rng = np.random.default_rng(int(seed))
    Xi = X[idx]
    kept_ins = np.array([keep_segments(Xi[i], seg, _segment_order(e, k, n_seg))
                         for i, e in enumerate(rankings)])
    kept_rnd = np.array([keep_segments(x, seg, rng.choice(n_seg, size=k, replace=False))
                         for x in Xi])
    base = predict_batch(model, Xi)
    orig = base >= POSITIVE_THRESHOLD
    prob_ins = predict_batch(model, kept_ins)
    prob_rnd = predict_batch(model, kept_rnd)

    def arm(prob):
        same = ((prob >= POSITIVE_THRESHOLD) == orig).astype(np.float64)
        cls_prob = np.where(orig, prob, 1.0 - prob)
        return same, cls_prob

    same_ins, cp_ins = arm(prob_ins)
    same_rnd, cp_rnd = arm(prob_rnd)
    boot = np.random.default_rng([int(seed), 1])
    extra = {
        "k": int(k), "grid": {"width": width, "height": height, "patch": patch},
        "instances": idx,
        "base_probability": base,
        "probability_insight": prob_ins, "probability_random": prob_rnd,
        "mean_class_probability_insight": float(cp_ins.mean()),
        "class_probability_insight_ci": _bootstrap_mean_ci(cp_ins, boot, n_boot),
        "mean_class_probability_random": float(cp_rnd.mean()),
        "class_probability_random_ci": _bootstrap_mean_ci(cp_rnd, boot, n_boot),
        "model": model.metadata,
    }
    return EvalReport(experiment="keep-top-k", feature_counts=[int(k)],
                      pcr_insight=np.array([same_ins.mean()]),
                      pcr_insight_ci=_bootstrap_mean_ci(same_ins, boot, n_boot)[None, :],
                      pcr_random=np.array([same_rnd.mean()]),
                      pcr_random_ci=_bootstrap_mean_ci(same_rnd, boot, n_boot)[None, :],
                      replicates=len(rankings), seed=int(seed),
                      raw_insight=same_ins[:, None], raw_random=same_rnd[:, None], extra=extra)


def intervals_disjoint(a, b) -> bool:
    return bool(a[1] < b[0] or b[1] < a[0])


def compare_report(reports: Sequence[EvalReport], path=None) -> dict:
    """Align insight and random arms and flag counts with disjoint 95% CIs.

    Writes ``path`` as JSON and a plaintext table next to it (suffix
    ``.txt``) when ``path`` is given.
    """
    if not reports:
        raise SchemaError("no reports to compare")
    counts = list(reports[0].feature_counts)
    for rep in reports[1:]:
        if list(rep.feature_counts) != counts:
            raise SchemaError("reports do not share feature counts")
    rows = []
    for rep in reports:
        for ci, c in enumerate(counts):
            a, b = rep.pcr_insight_ci[ci], rep.pcr_random_ci[ci]
            rows.append({"experiment": rep.experiment, "count": int(c),
                         "insight": float(rep.pcr_insight[ci]),
                         "insight_ci": [float(a[0]), float(a[1])],
                         "random": float(rep.pcr_random[ci]),
                         "random_ci": [float(b[0]), float(b[1])],
                         "disjoint": intervals_disjoint(a, b)})
    out = {"feature_counts": counts, "rows": rows}
    if path is not None:
        path = Path(path)
        atomic_write_text(path, dumps(out))
        atomic_write_text(path.with_suffix(".txt"), comparison_table(rows))
    return out


def comparison_table(rows) -> str:
    head = f"{'experiment':<18}{'count':>6}  {'insight':>24}  {'random':>24}  flag\n"
    lines = [head]
    for r in rows:
        ins = f"{r['insight']:.3f} [{r['insight_ci'][0]:.3f},{r['insight_ci'][1]:.3f}]"
        rnd = f"{r['random']:.3f} [{r['random_ci'][0]:.3f},{r['random_ci'][1]:.3f}]"
        lines.append(f"{r['experiment']:<18}{r['count']:>6}  {ins:>24}  {rnd:>24}  "
                     f"{'*' if r['disjoint'] else ''}\n")
    return "".join(lines)


def replicates_csv(report: EvalReport, header: bool = True) -> str:
    """Long-format CSV of raw replicate values: experiment, replicate, count, arm, value."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(["experiment", "replicate", "count", "arm", "value"])
    for arm, raw in (("insight", report.raw_insight), ("random", report.raw_random)):
        for r in range(raw.shape[0]):
            for ci, c in enumerate(report.feature_counts):
                w.writerow([report.experiment, r, c, arm, repr(float(raw[r, ci]))])
    return buf.getvalue()


def write_replicates_csv(report: EvalReport, path) -> None:
    atomic_write_text(path, replicates_csv(report))


def write_report(report: EvalReport, path) -> None:
    atomic_write_text(path, dumps(report.to_dict()))


def load_report(path) -> EvalReport:
    import json
    with open(path) as fh:
        try:
            return EvalReport.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: {exc}") from None


def grid_for(p: int, patch: int) -> dict:
    """Square grid spec for ``p`` pixels, or DimensionError."""
    side = int(round(np.sqrt(p)))
    if side * side != p:
        raise DimensionError(f"{p} features do not form a square image")
    grid_segments(side, side, patch)
    return {"width": side, "height": side, "patch": patch}
