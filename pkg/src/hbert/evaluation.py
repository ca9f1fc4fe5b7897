"""Per-task ranking metrics, patient embeddings, PCA and cohort separation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)


class NoDefinedTasks(ValueError):
    pass


class NoVisits(ValueError):
    pass


class DegenerateData(ValueError):
    pass


class EmptyGroup(ValueError):
    pass


def _check(labels, scores) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels).astype(bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError(f"labels and scores differ in length ({y.size} vs {s.size})")
    return y, s


def auc(labels, scores) -> float | None:
    """ROC AUC by rank sums with tied scores sharing their mean rank.

    Returns None when only one class is present. Computed on doubled ranks in
    integer arithmetic, so the result is (2*wins + ties) / (2*n_pos*n_neg).
    """
    y, s = _check(labels, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    # doubled mean rank of a tie block spanning 1-based ranks [lo, hi] is lo + hi
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    ends = np.r_[starts[1:], ss.size]
    rank2 = np.empty(ss.size, dtype=np.int64)
    for lo, hi in zip(starts, ends):
        rank2[lo:hi] = (lo + 1) + hi
    r2 = int(rank2[y[order]].sum())
    u2 = r2 - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def aps(labels, scores) -> float | None:
    """Average precision: sum over distinct descending thresholds of
    (recall gain) * precision. Returns None without positives."""
    y, s = _check(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-s, kind="mergesort")
    ys, ss = y[order], s[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(~ys)
    last = np.r_[np.flatnonzero(ss[1:] != ss[:-1]), ss.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass(frozen=True)
class TaskResult:
    task_id: str
    n_pos: int
    n_neg: int
    auc: float | None
    aps: float | None

    @property
    def defined(self) -> bool:
        return self.n_pos > 0 and self.n_neg > 0


@dataclass(frozen=True)
class TaskScores:
    tasks: tuple[TaskResult, ...]
    mean_auc: float
    mean_aps: float
    undefined: tuple[str, ...] = field(default=())


def score_task(task_id: str, labels, scores) -> TaskResult:
    y, s = _check(labels, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return TaskResult(task_id, n_pos, n_neg, None, None)
    return TaskResult(task_id, n_pos, n_neg, auc(y, s), aps(y, s))


def aggregate_scores(results: Iterable[TaskResult]) -> TaskScores:
    """Unweighted means over tasks with both classes present."""
    results = tuple(results)
    ok = [r for r in results if r.defined]
    skipped = tuple(r.task_id for r in results if not r.defined)
    if not ok:
        raise NoDefinedTasks("no task has both positive and negative examples")
    if skipped:
        log.warning("excluding %d single-class task(s) from the means: %s", len(skipped), ", ".join(skipped))
    return TaskScores(results,
                      float(np.mean([r.auc for r in ok])),
                      float(np.mean([r.aps for r in ok])),
                      skipped)


def score_tasks(task_ids: Sequence[str], labels: np.ndarray, scores: np.ndarray) -> TaskScores:
    labels = np.asarray(labels)
    scores = np.asarray(scores)
    if labels.shape != scores.shape or labels.shape[1] != len(task_ids):
        raise ValueError("labels/scores must both be [n, n_tasks]")
    return aggregate_scores(score_task(t, labels[:, k], scores[:, k]) for k, t in enumerate(task_ids))


def metrics_csv(scores: TaskScores) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task_id", "n_pos", "n_neg", "auc", "aps"])
    fmt = lambda v: "" if v is None else repr(float(v))
    for r in scores.tasks:
        w.writerow([r.task_id, r.n_pos, r.n_neg, fmt(r.auc), fmt(r.aps)])
    w.writerow(["MEAN", "", "", fmt(scores.mean_auc), fmt(scores.mean_aps)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# embeddings


@dataclass
class EmbeddingMatrix:
    patient_ids: list[str]
    vectors: np.ndarray
    tags: list[tuple[str, ...]]

    def rows_tagged(self, tag: str) -> np.ndarray:
        return np.array([tag in t for t in self.tags], dtype=bool)


def patient_embeddings(visit_embs: Mapping[str, np.ndarray] | np.ndarray,
                       patient_ids: Sequence[str] | None = None,
                       tags: Mapping[str, Sequence[str]] | None = None) -> EmbeddingMatrix:
    """Componentwise mean of each patient's visit embeddings.

    Accepts either ``{patient_id: [k, d] array}`` or a ``[n, d]`` array plus a
    parallel sequence of patient ids. Rows come out sorted by patient id.
    """
    if isinstance(visit_embs, Mapping):
        groups = {pid: np.atleast_2d(np.asarray(v, dtype=np.float64)) for pid, v in visit_embs.items()}
    else:
        arr = np.asarray(visit_embs, dtype=np.float64)
        if patient_ids is None or len(patient_ids) != len(arr):
            raise ValueError("need one patient id per visit embedding row")
        rows: dict[str, list[int]] = {}
        for i, pid in enumerate(patient_ids):
            rows.setdefault(pid, []).append(i)
        groups = {pid: arr[idx] for pid, idx in rows.items()}
    ids = sorted(groups)
    for pid in ids:
        if groups[pid].size == 0:
            raise NoVisits(pid)
    vecs = np.stack([groups[pid].mean(axis=0) for pid in ids]) if ids else np.zeros((0, 0))
    tag_rows = [tuple(sorted((tags or {}).get(pid, ()))) for pid in ids]
    return EmbeddingMatrix(ids, vecs, tag_rows)


def pca_top2(matrix) -> tuple[np.ndarray, np.ndarray]:
    """Project centred rows onto the top two covariance eigenvectors.

    Each component is signed so that its largest-magnitude loading is
    positive. Returns ``(projections [n, 2], variances [2])``.
    """
    X = np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("pca_top2 needs a 2-D matrix with at least two rows")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    if np.trace(cov) <= 0:
        raise DegenerateData("all rows are identical")
    vals, vecs = np.linalg.eigh(cov)
    top = np.argsort(vals)[::-1][:2]
    vals, vecs = vals[top], vecs[:, top]
    if vecs.shape[1] < 2:
        vals = np.r_[vals, 0.0]
        vecs = np.c_[vecs, np.zeros(X.shape[1])]
    for k in range(vecs.shape[1]):
        j = np.argmax(np.abs(vecs[:, k]))
        if vecs[j, k] < 0:
            vecs[:, k] = -vecs[:, k]
    vals = np.where(vals > vals[0] * 1e-12, vals, 0.0)
    return Xc @ vecs, vals


def _as_rows(group, n: int) -> np.ndarray:
    g = np.asarray(group)
    if g.dtype == bool:
        if g.shape != (n,):
            raise ValueError("boolean group mask must have one entry per row")
        return np.flatnonzero(g)
    return g.astype(np.int64)


def cohort_separation(proj, group_a, group_b) -> float:
    """Centroid distance over the mean within-group RMS spread (per coordinate).

    Groups are row indices or boolean masks into ``proj``.
    """
    P = np.asarray(proj, dtype=np.float64)
    a, b = P[_as_rows(group_a, len(P))], P[_as_rows(group_b, len(P))]
    if len(a) == 0 or len(b) == 0:
        raise EmptyGroup("both groups need at least one row")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    spread = lambda g, c: float(np.sqrt(np.mean((g - c) ** 2)))
    dist = float(np.linalg.norm(ca - cb))
    within = 0.5 * (spread(a, ca) + spread(b, cb))
    if within == 0.0:
        return 0.0 if dist == 0.0 else float("inf")
    return dist / within


def pca_csv(emb: EmbeddingMatrix, proj: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "pc1", "pc2", "cohort_tag"])
    for pid, (x, y), tags in zip(emb.patient_ids, proj, emb.tags):
        w.writerow([pid, repr(float(x)), repr(float(y)), "+".join(tags) or "none"])
    return buf.getvalue()


def embeddings_csv(emb: EmbeddingMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id"] + [f"e{k}" for k in range(emb.vectors.shape[1])])
    for pid, vec in zip(emb.patient_ids, emb.vectors):
        w.writerow([pid] + [repr(float(v)) for v in vec])
    return buf.getvalue()
