"""Pure-Python (numpy) versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def _sqdist_to(points: np.ndarray, row: np.ndarray) -> np.ndarray:
    diff = points - row
    return np.einsum("ij,ij->i", diff, diff)


def kcenter_greedy(points, history, n_select):
    """Farthest-first traversal seeded against ``history``.

    Returns the picked row indices and the coverage radius (squared) after
    each pick.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    history = np.ascontiguousarray(history, dtype=np.float64)
    n = points.shape[0]
    if history.shape[0]:
        mind = np.min(np.stack([_sqdist_to(points, h) for h in history]), axis=0)
    else:
        mind = _sqdist_to(points, points.mean(axis=0))
    mind = mind.copy()
    taken = np.zeros(n, dtype=bool)
    picks = np.empty(n_select, dtype=np.int64)
    cover = np.empty(n_select, dtype=np.float64)
    for k in range(n_select):
        masked = np.where(taken, -1.0, mind)
        best = int(np.argmax(masked))
        picks[k] = best
        taken[best] = True
        dist = _sqdist_to(points, points[best])
        mind = dist if (k == 0 and not history.shape[0]) else np.minimum(mind, dist)
        cover[k] = mind.max()
    return picks, cover


def max_cosine(queries, bank):
    """Per query row: best cosine against any bank row, and its index."""
    queries = np.asarray(queries, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    qn = np.linalg.norm(queries, axis=1, keepdims=True)
    bn = np.linalg.norm(bank, axis=1)
    cos = (queries @ bank.T) / (qn * bn)
    arg = np.argmax(cos, axis=1)
    return cos[np.arange(len(queries)), arg], arg.astype(np.int64)
