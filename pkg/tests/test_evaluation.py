import logging
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import average_precision_score, roc_auc_score

from hbert.evaluation import (DegenerateData, EmptyGroup, NoDefinedTasks, NoVisits, TaskResult,
                              aggregate_scores, aps, auc, cohort_separation, metrics_csv, patient_embeddings,
                              pca_csv, pca_top2, score_tasks)


def brute_auc(y, s):
    pos = [v for v, t in zip(s, y) if t]
    neg = [v for v, t in zip(s, y) if not t]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def threshold_aps(y, s):
    """Walk distinct thresholds high to low; add (recall step) * precision."""
    y, s = np.asarray(y, bool), np.asarray(s, float)
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        hit = s >= t
        tp = int((hit & y).sum())
        recall = tp / y.sum()
        total += (recall - prev_recall) * tp / hit.sum()
        prev_recall = recall
    return total


# -- auc / aps -------------------------------------------------------------------

def test_auc_goldens():
    assert auc([1, 0], [0.9, 0.1]) == 1.0
    assert auc([1, 0], [0.5, 0.5]) == 0.5
    assert auc([1, 1], [0.2, 0.3]) is None
    assert auc([0, 0], [0.2, 0.3]) is None


def test_aps_goldens():
    assert aps([1, 1, 0, 0], [0.9, 0.8, 0.2, 0.1]) == 1.0
    assert aps([0, 1], [0.9, 0.1]) == 0.5
    assert aps([1, 1, 1], [0.1, 0.4, 0.4]) == 1.0
    assert aps([0, 0], [0.1, 0.2]) is None


def test_auc_brute_force_with_ties():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, size=30)
    y[:2] = [0, 1]
    s = rng.integers(0, 6, size=30) / 5
    assert Fraction(auc(y, s)).limit_denominator(10**6) == brute_auc(y, s)


def test_against_sklearn():
    rng = np.random.default_rng(1)
    for _ in range(20):
        y = rng.integers(0, 2, size=50)
        y[:2] = [0, 1]
        s = np.round(rng.normal(size=50), 1)
        assert abs(auc(y, s) - roc_auc_score(y, s)) < 1e-12
        assert abs(aps(y, s) - average_precision_score(y, s)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(-3, 3)), min_size=2, max_size=30))
def test_auc_monotone_invariance(pairs):
    y = [p[0] for p in pairs]
    s = np.array([p[1] for p in pairs], float)
    a = auc(y, s)
    assert a == auc(y, np.exp(s)) == auc(y, 3 * s + 7)


def test_perfect_separation_both_one():
    y = [0, 1, 0, 1, 1]
    s = [0.1, 0.8, 0.2, 0.9, 0.7]
    assert auc(y, s) == 1.0 and aps(y, s) == 1.0


def test_length_mismatch():
    with pytest.raises(ValueError):
        auc([1, 0], [0.1])


# -- aggregation -----------------------------------------------------------------

def test_aggregate_mean_and_exclusion(caplog):
    res = [TaskResult("a", 1, 1, 1.0, 1.0), TaskResult("b", 1, 1, 0.5, 0.5), TaskResult("c", 0, 4, None, None)]
    with caplog.at_level(logging.WARNING):
        agg = aggregate_scores(res)
    assert agg.mean_auc == 0.75 and agg.undefined == ("c",)
    assert "excluding" in caplog.text


def test_aggregate_nothing_defined():
    with pytest.raises(NoDefinedTasks):
        aggregate_scores([TaskResult("a", 0, 3, None, None)])


def test_score_tasks_and_csv():
    labels = np.array([[1, 0], [0, 0], [1, 0]])
    scores = np.array([[0.9, 0.1], [0.2, 0.3], [0.8, 0.5]])
    agg = score_tasks(["x", "y"], labels, scores)
    assert agg.mean_auc == 1.0 and agg.undefined == ("y",)
    lines = metrics_csv(agg).splitlines()
    assert lines[0] == "task_id,n_pos,n_neg,auc,aps"
    assert lines[1] == "x,2,1,1.0,1.0" and lines[2] == "y,0,3,,"
    assert lines[-1].startswith("MEAN,,,1.0")


# -- embeddings ------------------------------------------------------------------

def test_patient_embeddings_mean():
    v, w = np.array([1.0, 2.0]), np.array([3.0, -2.0])
    emb = patient_embeddings({"P2": [v, w], "P1": [v]})
    assert emb.patient_ids == ["P1", "P2"]
    np.testing.assert_array_equal(emb.vectors, [v, (v + w) / 2])


def test_patient_embeddings_visit_order_free():
    rng = np.random.default_rng(2)
    arr = rng.normal(size=(6, 3))
    pids = ["a", "b", "a", "c", "b", "a"]
    perm = rng.permutation(6)
    e1 = patient_embeddings(arr, pids)
    e2 = patient_embeddings(arr[perm], [pids[i] for i in perm])
    np.testing.assert_allclose(e1.vectors, e2.vectors, atol=1e-15)


def test_patient_embeddings_no_visits():
    with pytest.raises(NoVisits):
        patient_embeddings({"P1": np.zeros((0, 3))})


def power_iteration_top2(X, iters=5000):
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (len(X) - 1)
    vecs = []
    rng = np.random.default_rng(0)
    for _ in range(2):
        v = rng.normal(size=C.shape[0])
        for _ in range(iters):
            for u in vecs:
                v -= (v @ u) * u
            v = C @ v
            v /= np.linalg.norm(v)
        vecs.append(v)
    return Xc @ np.stack(vecs, axis=1)


def test_pca_matches_power_iteration_up_to_sign():
    X = np.random.default_rng(3).normal(size=(20, 6)) * np.array([5, 3, 2, 1, 0.5, 0.1])
    proj, var = pca_top2(X)
    ref = power_iteration_top2(X)
    for k in range(2):
        sign = np.sign(proj[:, k] @ ref[:, k])
        np.testing.assert_allclose(proj[:, k], sign * ref[:, k], atol=1e-8)
    assert var[0] >= var[1] > 0


def test_pca_sign_convention_and_row_permutation():
    X = np.random.default_rng(4).normal(size=(15, 4))
    proj, _ = pca_top2(X)
    perm = np.random.default_rng(5).permutation(15)
    proj_p, _ = pca_top2(X[perm])
    np.testing.assert_allclose(proj_p, proj[perm], atol=1e-10)


def test_pca_collinear_and_degenerate():
    t = np.linspace(0, 1, 10)[:, None]
    _, var = pca_top2(t * np.array([[1.0, 2.0, -1.0]]))
    assert var[1] == 0.0
    with pytest.raises(DegenerateData):
        pca_top2(np.ones((5, 3)))


def test_separation_identical_groups():
    P = np.random.default_rng(6).normal(size=(10, 2))
    assert cohort_separation(P, np.arange(10), np.arange(10)) == 0.0


def test_separation_closed_form_gaussians():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(200, 2))
    b = rng.normal(size=(200, 2)) + [10.0, 0.0]
    P = np.vstack([a, b])
    sep = cohort_separation(P, np.arange(200), np.arange(200, 400))
    assert abs(sep - 10.0) / 10.0 < 0.2


def test_separation_invariances():
    rng = np.random.default_rng(8)
    P = rng.normal(size=(30, 2))
    A = np.zeros(30, bool)
    A[:12] = True
    base = cohort_separation(P, A, ~A)
    th = 0.7
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    assert abs(cohort_separation(3.5 * P @ R.T + [4, -2], A, ~A) - base) < 1e-12


def test_separation_empty_group():
    with pytest.raises(EmptyGroup):
        cohort_separation(np.zeros((3, 2)), [], [0, 1])


def test_pca_csv_tags():
    emb = patient_embeddings({"P1": [[1.0, 0.0]], "P2": [[0.0, 1.0]], "P3": [[2.0, 2.0]]},
                             tags={"P1": ["RA", "AD"]})
    proj, _ = pca_top2(emb.vectors)
    lines = pca_csv(emb, proj).splitlines()
    assert lines[0] == "patient_id,pc1,pc2,cohort_tag"
    assert lines[1].endswith(",AD+RA") and lines[2].endswith(",none")
