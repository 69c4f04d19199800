"""Ranking metrics, the per-task metric matrix and forgetting measures."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .numerics import ContractError, DomainError


def _check_scores(scores, labels, need_negative: bool = True) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ContractError(f"{s.size} scores but {y.size} labels")
    if not np.isfinite(s).all():
        raise DomainError("scores contain non-finite values")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0/1")
    y = y.astype(np.int64)
    if y.sum() == 0:
        raise DomainError("need at least one positive label")
    if need_negative and y.sum() == y.size:
        raise DomainError("need at least one negative label")
    return s, y


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count half).

    Computed from midranks, with the numerator kept as an exact integer so the
    value equals the brute-force pairwise count.
    """
    s, y = _check_scores(scores, labels)
    order = np.argsort(s, kind="mergesort")
    ss = s[order]
    # twice the midrank, integer valued: first + last position (1-based) of each tie run
    ranks2 = np.empty(s.size, dtype=np.int64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and ss[j + 1] == ss[i]:
            j += 1
        ranks2[order[i:j + 1]] = (i + 1) + (j + 1)
        i = j + 1
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u2 = int(ranks2[y == 1].sum()) - n_pos * (n_pos + 1)
    return float(Fraction(u2, 2 * n_pos * n_neg))


def aupr(scores, labels) -> float:
    """Average precision: sum over descending thresholds of precision times recall gain.

    Accumulated as an exact rational, so the only rounding is the final one.
    """
    s, y = _check_scores(scores, labels, need_negative=False)
    n_pos = int(y.sum())
    area = Fraction(0)
    tp = fp = 0
    for thr in np.unique(s)[::-1]:
        hit = s == thr
        dtp = int(y[hit].sum())
        tp += dtp
        fp += int(hit.sum()) - dtp
        if dtp:
            area += Fraction(tp * dtp, (tp + fp) * n_pos)
    return float(area)


@dataclass
class TaskEval:
    task_id: int
    image_auroc: float
    pixel_auroc: float
    image_aupr: float
    pixel_aupr: float
    raw: dict | None = None  # per-sample scores and labels, when requested


def evaluate_task(state, dataset, keep_scores: bool = False) -> TaskEval:
    """Score every test sample of one task; pixel metrics are patch-level."""
    from .pipeline import score_sample

    if not dataset.test:
        raise ContractError(f"task {dataset.task_id} has an empty test set")
    patch = state.backbone.cfg.patch_size
    img_s, img_y, pix_s, pix_y = [], [], [], []
    for smp in dataset.test:
        res = score_sample(state, smp)
        img_s.append(res.image_score)
        img_y.append(int(smp.is_anomalous))
        pix_s.append(res.patch_scores)
        pix_y.append(smp.patch_labels(patch))
    flat_s, flat_y = np.concatenate(pix_s), np.concatenate(pix_y)
    out = TaskEval(task_id=dataset.task_id,
                   image_auroc=auroc(img_s, img_y), pixel_auroc=auroc(flat_s, flat_y),
                   image_aupr=aupr(img_s, img_y), pixel_aupr=aupr(flat_s, flat_y))
    if keep_scores:
        out.raw = {
            "sample_ids": [smp.sample_id for smp in dataset.test],
            "image_scores": [float(v) for v in img_s],
            "image_labels": img_y,
            "patch_scores": [[float(v) for v in row] for row in pix_s],
            "patch_labels": [[int(v) for v in row] for row in pix_y],
        }
    return out


def evaluate(state, testsets, keep_scores: bool = False) -> list[TaskEval]:
    """Evaluate the unified model on each task's test split; no task id is used in scoring."""
    if not testsets:
        raise ContractError("no test sets given")
    return [evaluate_task(state, ds, keep_scores) for ds in testsets]


def metrics_from_raw(raw: dict) -> dict:
    """Recompute the four metrics from a raw-score dump."""
    ps = np.concatenate([np.asarray(r, dtype=np.float64) for r in raw["patch_scores"]])
    py = np.concatenate([np.asarray(r, dtype=np.int64) for r in raw["patch_labels"]])
    return {"image_auroc": auroc(raw["image_scores"], raw["image_labels"]),
            "pixel_auroc": auroc(ps, py),
            "image_aupr": aupr(raw["image_scores"], raw["image_labels"]),
            "pixel_aupr": aupr(ps, py)}


class MetricMatrix:
    """``M[j, i]``: metric on task ``i`` after training through task ``j`` (1-based).

    Entries with ``i > j`` are undefined and stored as NaN.
    """

    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise ContractError("need at least one task")
        self.n = n_tasks
        self.values = np.full((n_tasks, n_tasks), np.nan)

    def set(self, after: int, task: int, value: float) -> None:
        if not (1 <= task <= after <= self.n):
            raise ContractError(f"invalid cell (after={after}, task={task}) for {self.n} tasks")
        self.values[after - 1, task - 1] = float(value)

    def get(self, after: int, task: int) -> float:
        return float(self.values[after - 1, task - 1])

    @property
    def final(self) -> np.ndarray:
        return self.values[-1].copy()

    def to_list(self) -> list[list[float | None]]:
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.values]

    @classmethod
    def from_array(cls, arr) -> "MetricMatrix":
        a = np.asarray(arr, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ContractError("metric matrix must be square")
        m = cls(a.shape[0])
        for j in range(m.n):
            for i in range(j + 1):
                if np.isnan(a[j, i]):
                    raise ContractError(f"missing entry (after={j + 1}, task={i + 1})")
                m.values[j, i] = a[j, i]
        return m


def _exact_mean(values) -> float:
    # correctly rounded, so the result does not depend on summation order
    return float(sum(map(Fraction, values), Fraction(0)) / len(values))


def forgetting_measure_e(matrix) -> float:
    """Mean over earlier tasks of best-ever drop to the final value.

    For task ``i < N``: ``max_{i <= j <= N-1} M[j, i] - M[N, i]``, averaged
    over the ``N - 1`` earlier tasks. Needs at least two tasks.
    """
    m = matrix if isinstance(matrix, MetricMatrix) else MetricMatrix.from_array(matrix)
    n = m.n
    if n < 2:
        raise ContractError("forgetting needs at least two tasks")
    if np.isnan(m.values[np.tril_indices(n)]).any():
        raise ContractError("metric matrix has missing cells")
    v = m.values
    drops = [float(np.max(v[i:n - 1, i]) - v[n - 1, i]) for i in range(n - 1)]
    return _exact_mean(drops)


def forgetting_measure_s(known, pred) -> float:
    """Mean gap between task-known and task-agnostic results."""
    k = np.asarray(known, dtype=np.float64).reshape(-1)
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    if k.shape != p.shape or k.size == 0:
        raise ContractError("known and pred must be non-empty and equally long")
    return _exact_mean((k - p).tolist())


@dataclass
class RunReport:
    image_auroc: MetricMatrix
    pixel_auroc: MetricMatrix
    image_aupr: MetricMatrix
    pixel_aupr: MetricMatrix
    extras: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, n: int) -> "RunReport":
        return cls(*(MetricMatrix(n) for _ in range(4)))

    def record(self, after: int, ev: TaskEval) -> None:
        for name in ("image_auroc", "pixel_auroc", "image_aupr", "pixel_aupr"):
            getattr(self, name).set(after, ev.task_id, getattr(ev, name))

    def summary(self) -> dict:
        out = {}
        for name in ("image_auroc", "pixel_auroc", "image_aupr", "pixel_aupr"):
            m = getattr(self, name)
            out[name] = {"final": [float(v) for v in m.final],
                         "mean_final": float(np.mean(m.final)),
                         "fm_e": forgetting_measure_e(m) if m.n > 1 else None,
                         "matrix": m.to_list()}
        out.update(self.extras)
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = []
        for name in ("image_auroc", "pixel_auroc", "image_aupr", "pixel_aupr"):
            m = getattr(self, name)
            finals = " ".join(f"{v:.4f}" for v in m.final)
            fm = f"{forgetting_measure_e(m):.4f}" if m.n > 1 else "n/a"
            lines.append(f"{name:<12} final [{finals}] mean {np.mean(m.final):.4f} FM_e {fm}")
        return "\n".join(lines)
