import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from dmmmen.data import bootstrap, sigmoid
from dmmmen.errors import DimensionError, SchemaError
from dmmmen.explain import Explanation, InsightMap
from dmmmen.harness import (EvalReport, compare_report, craft_cases_experiment,
                            keep_topk_experiment, load_report, nullify_experiment, perturb,
                            replicates_csv, write_report)
from dmmmen.target import LogisticModel, image_task


def _ten_feature_task(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, size=(400, 100))
    w = np.zeros(100)
    w[:10] = 1.0
    model = LogisticModel(w, -3.5)
    ins = InsightMap("pos", importance=w.copy(), top_k=list(range(10)),
                     component_weights=np.ones(1))
    return X, model, ins


def test_constant_positive_model():
    X = np.random.default_rng(0).uniform(size=(50, 8))
    model = LogisticModel(np.zeros(8), 5.0)
    ins = InsightMap("", np.arange(8.0), [], np.ones(1))
    null, repl = nullify_experiment(X, model, ins, counts=[2, 5], replicates=5)
    np.testing.assert_array_equal(null.pcr_insight, [1.0, 1.0])
    np.testing.assert_array_equal(null.pcr_random, [1.0, 1.0])
    assert np.all(np.isnan(repl.pcr_insight))


def test_nullify_against_logistic_formula():
    X, model, ins = _ten_feature_task()
    w, b = model.weights, model.bias
    seed, counts, R = 3, [10, 20], 8
    null, repl = nullify_experiment(X, model, ins, counts=counts, replicates=R, fraction=0.3,
                                    seed=seed)
    # insight arm, closed form: every key feature zeroed leaves logit = b < 0
    np.testing.assert_array_equal(null.raw_insight, 0.0)
    # implanting the positive mean on all key features gives logit = sum(mean) + b > 0
    positive = sigmoid(X @ w + b) >= 0.5
    assert X[positive][:, :10].mean(axis=0).sum() + b > 0
    np.testing.assert_array_equal(repl.raw_insight, 1.0)
    # random arm: recompute through the documented streams and the raw logistic formula
    for r in range(R):
        rng = np.random.default_rng([seed, r])
        idx = bootstrap(400, 0.3, rng).indices
        rows = X[idx[positive[idx]]]
        for ci, c in enumerate(counts):
            feats = rng.choice(100, size=c, replace=False)
            Z = rows.copy()
            Z[:, feats] = 0.0
            expected = np.mean(1 / (1 + np.exp(-(Z @ w + b))) >= 0.5)
            assert null.raw_random[r, ci] == pytest.approx(expected, abs=1e-15)
    assert null.pcr_random[0] > null.pcr_insight[0] + 0.5


def test_report_invariants_and_reproducibility(tmp_path):
    X, model, ins = _ten_feature_task()
    a = nullify_experiment(X, model, ins, counts=[5, 10], replicates=6, seed=1)[0]
    b = nullify_experiment(X, model, ins, counts=[5, 10], replicates=6, seed=1)[0]
    assert json.dumps(a.to_dict(), default=list) == json.dumps(b.to_dict(), default=list)
    for mean, ci in ((a.pcr_insight, a.pcr_insight_ci), (a.pcr_random, a.pcr_random_ci)):
        assert np.all((ci >= 0) & (ci <= 1))
        assert np.all(ci[:, 0] <= mean + 1e-12) and np.all(mean <= ci[:, 1] + 1e-12)
    write_report(a, tmp_path / "r.json")
    back = load_report(tmp_path / "r.json")
    np.testing.assert_array_equal(back.raw_random, a.raw_random)


def test_nullify_min_mode_and_errors():
    X, model, ins = _ten_feature_task()
    null, _ = nullify_experiment(X + 1.0, model, ins, counts=[10], replicates=2, nullify="min")
    # per-feature minimum is about 1, so nullifying keeps the logit near 10 - 3.5 > 0
    assert null.pcr_insight[0] > 0.5
    with pytest.raises(ValueError):
        nullify_experiment(X, model, ins, counts=[101])
    with pytest.raises(ValueError):
        nullify_experiment(X, model, ins, nullify="mean")
    with pytest.raises(ValueError):
        nullify_experiment(X, LogisticModel(np.zeros(100), -5.0), ins, counts=[3])


@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-10, 10)),
       st.sets(st.integers(0, 5), max_size=6))
def test_perturbation_locality(X, feats):
    feats = sorted(feats)
    out = perturb(X, feats, np.full(6, 7.0))
    others = [j for j in range(6) if j not in feats]
    assert out[:, others].tobytes() == X[:, others].tobytes()
    assert np.all(out[:, feats] == 7.0)


@given(hnp.arrays(np.float64, (5, 6), elements=st.floats(0, 5)),
       hnp.arrays(np.float64, 6, elements=st.floats(0, 3)),
       st.sets(st.integers(0, 5)), st.sets(st.integers(0, 5)))
def test_nullify_monotone_for_nonnegative_weights(X, w, a, extra):
    m = LogisticModel(w, -2.0)
    small, big = sorted(a), sorted(a | extra)
    p_small = m.predict(perturb(X, small, np.zeros(6)))
    p_big = m.predict(perturb(X, big, np.zeros(6)))
    assert np.all(p_big <= p_small)


def test_craft_full_count_equals_response_to_fill():
    X, model, ins = _ten_feature_task()
    rep = craft_cases_experiment(model, ins, counts=[100], n_cases=50, data=X, replicates=3)
    positive = model.predict(X) >= 0.5
    expect = float(model.predict(X[positive].mean(axis=0)[None])[0] >= 0.5)
    np.testing.assert_array_equal(rep.raw_insight, expect)
    np.testing.assert_array_equal(rep.raw_random, expect)


def test_craft_random_arm_matches_monte_carlo():
    task = image_task(seed=0, n=600)
    X, model = task.X, task.model
    ins = InsightMap("", model.weights.copy(), [], np.ones(1))
    rep = craft_cases_experiment(model, ins, counts=[150], n_cases=500, data=X, replicates=20,
                                 seed=5)
    lo, hi = X.min(axis=0), X.max(axis=0)
    fill = X[model.predict(X) >= 0.5].mean(axis=0)
    rng = np.random.default_rng(123)
    hits = 0
    for _ in range(10):  # 10 x 10^4 = 10^5 draws
        Z = rng.uniform(lo, hi, size=(10000, 256))
        keys = np.argsort(rng.random((10000, 256)), axis=1)[:, :150]
        np.put_along_axis(Z, keys, fill[keys], axis=1)
        hits += np.count_nonzero(Z @ model.weights + model.bias >= 0)
    oracle = hits / 1e5
    se = rep.raw_random[:, 0].std(ddof=1) / np.sqrt(20)
    assert abs(rep.pcr_random[0] - oracle) < 4 * se + 0.01


def _explanations(task, n=8):
    out = []
    for i in range(n):
        order = list(np.random.default_rng(i).permutation(16))
        out.append(Explanation(i, 0, np.zeros(256), order, 1.0))
    return out


def test_keep_all_segments_is_identity():
    task = image_task(seed=1, n=40)
    grid = {"width": 16, "height": 16, "patch": 4}
    rep = keep_topk_experiment(task.X, task.model, _explanations(task), k=16, segmentation=grid)
    assert rep.pcr_insight[0] == 1.0
    base = task.model.predict(task.X[:8])
    assert np.asarray(rep.extra["probability_insight"]).tobytes() == base.tobytes()


def test_keep_zero_segments_is_all_zero_input():
    task = image_task(seed=1, n=40)
    grid = {"width": 16, "height": 16, "patch": 4}
    rep = keep_topk_experiment(task.X, task.model, _explanations(task), k=0, segmentation=grid)
    zero = task.model.predict(np.zeros((1, 256)))[0]
    assert np.all(np.asarray(rep.extra["probability_insight"]) == zero)


def test_keep_grid_mismatch():
    task = image_task(seed=1, n=10)
    with pytest.raises(DimensionError):
        keep_topk_experiment(task.X, task.model, _explanations(task, 2), k=1,
                             segmentation={"width": 10, "height": 10, "patch": 2})
    with pytest.raises(DimensionError):
        keep_topk_experiment(task.X, task.model, _explanations(task, 2), k=1,
                             segmentation={"width": 16, "height": 16, "patch": 5})


def _report(ins, rnd, counts=(1, 2)):
    ins, rnd = np.asarray(ins, float), np.asarray(rnd, float)
    from dmmmen.harness import _summarize
    return _summarize("craft-cases", list(counts), ins, rnd, ins.shape[0], 0, {})


def test_compare_identical_arms_not_flagged(tmp_path):
    raw = np.random.default_rng(0).uniform(size=(20, 2))
    out = compare_report([_report(raw, raw)], tmp_path / "cmp.json")
    assert not any(r["disjoint"] for r in out["rows"])
    assert (tmp_path / "cmp.txt").read_text().startswith("experiment")


def test_compare_disjoint_arms_all_flagged():
    out = compare_report([_report(np.zeros((10, 2)), np.ones((10, 2)))])
    assert all(r["disjoint"] for r in out["rows"])


def test_compare_flags_recomputed_from_raw():
    rng = np.random.default_rng(2)
    ins = rng.uniform(0, 0.6, size=(30, 2))
    rnd = rng.uniform(0.4, 1.0, size=(30, 2))
    rnd[:, 1] = rng.uniform(0.62, 1.0, size=30)
    out = compare_report([_report(ins, rnd)])
    for ci, row in enumerate(out["rows"]):
        a = np.percentile(ins[:, ci], [2.5, 97.5])
        b = np.percentile(rnd[:, ci], [2.5, 97.5])
        assert row["disjoint"] == bool(a[1] < b[0] or b[1] < a[0])


def test_compare_mismatched_counts():
    with pytest.raises(SchemaError):
        compare_report([_report(np.zeros((2, 2)), np.zeros((2, 2))),
                        _report(np.zeros((2, 1)), np.zeros((2, 1)), counts=(1,))])


def test_replicates_csv_rows():
    text = replicates_csv(_report(np.zeros((3, 2)), np.ones((3, 2))))
    lines = text.strip().split("\n")
    assert lines[0] == "experiment,replicate,count,arm,value" and len(lines) == 1 + 12


def test_report_rejects_unknown_experiment():
    with pytest.raises(ValueError):
        EvalReport("other", [1], *[np.zeros(1)] * 4, 1, 0, np.zeros((1, 1)), np.zeros((1, 1)))
