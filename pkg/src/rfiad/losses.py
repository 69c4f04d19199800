"""Training objectives: prototype alignment, inter-task and task-specific
contrastive terms, and the image-prototype refinement loss.

All functions take and return :class:`~rfiad.numerics.Tensor` values so they
can sit inside a recorded forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import (
    ContractError,
    DomainError,
    NonFiniteError,
    Tensor,
    as_tensor,
    cosine_matrix,
    cosine_similarity,
    norm,
)


@dataclass
class LossReport:
    align: float
    tsc: float
    itc: float
    total: float
    pos_pairs: int = 0
    neg_pairs: int = 0


def loss_align(k_img, proto) -> Tensor:
    """Euclidean distance between the image feature and its task prototype."""
    k_img, proto = as_tensor(k_img), as_tensor(proto)
    if k_img.size != proto.size:
        raise ContractError(f"shape mismatch {k_img.shape} vs {proto.shape}")
    return norm(k_img.reshape(-1) - proto.reshape(-1))


def _history_matrix(history) -> np.ndarray | None:
    if history is None:
        return None
    if hasattr(history, "matrix"):
        history = history.matrix()
    rows = np.asarray(history, dtype=np.float64)
    if rows.size == 0:
        return None
    return rows.reshape(-1, rows.shape[-1])


def loss_itc(k_pix, history) -> Tensor:
    """Mean over patches of the best cosine to any historical pixel prototype.

    ``history`` is a PixelPrototypeBank or an (R, d) array; empty gives 0.
    """
    k_pix = as_tensor(k_pix)
    hist = _history_matrix(history)
    if hist is None:
        return Tensor(0.0)
    if hist.shape[1] != k_pix.shape[-1]:
        raise ContractError("patch features and prototypes disagree on dimension")
    cos = cosine_matrix(k_pix, Tensor(hist))
    return cos.max(axis=1).mean()


def _pair_masks(labels: Sequence[int], n: int) -> tuple[np.ndarray, np.ndarray]:
    lab = np.asarray(labels)
    if lab.shape != (n,):
        raise ContractError(f"expected {n} patch labels, got shape {lab.shape}")
    same = lab[:, None] == lab[None, :]
    off_diag = ~np.eye(n, dtype=bool)
    return same & off_diag, ~same


def loss_tsc(k_pix, labels: Sequence[int], sign: str = "attract") -> Tensor:
    """Task-specific contrastive loss over ordered patch pairs (i != j).

    ``sign="attract"`` returns ``mean_neg - mean_pos`` so that minimizing pulls
    same-segment patches together; ``sign="repel"`` returns
    ``mean_pos - mean_neg``, which pushes them apart.
    """
    k_pix = as_tensor(k_pix)
    pos, neg = _pair_masks(labels, k_pix.shape[0])
    cos = cosine_matrix(k_pix, k_pix)
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    l_pos = (cos * pos.astype(np.float64)).sum() * (1.0 / n_pos) if n_pos else Tensor(0.0)
    l_neg = (cos * neg.astype(np.float64)).sum() * (1.0 / n_neg) if n_neg else Tensor(0.0)
    if sign == "attract":
        return l_neg - l_pos
    if sign == "repel":
        return l_pos - l_neg
    raise ValueError(f"unknown tsc sign convention {sign!r}")


def pair_counts(labels: Sequence[int]) -> tuple[int, int]:
    pos, neg = _pair_masks(labels, len(labels))
    return int(pos.sum()), int(neg.sum())


def loss_total(align, tsc, itc) -> Tensor:
    parts = [as_tensor(x) for x in (align, tsc, itc)]
    for p in parts:
        if not np.isfinite(p.data).all():
            raise NonFiniteError("non-finite loss component")
    return parts[0] + parts[1] + parts[2]


def report(align, tsc, itc, labels: Sequence[int] | None = None) -> LossReport:
    vals = [float(as_tensor(x).item()) for x in (align, tsc, itc)]
    if not all(np.isfinite(vals)):
        raise NonFiniteError("non-finite loss component")
    n_pos, n_neg = pair_counts(labels) if labels is not None else (0, 0)
    a, t, i = vals
    return LossReport(align=a, tsc=t, itc=i, total=a + t + i, pos_pairs=n_pos, neg_pairs=n_neg)


def loss_ipr(proto, raw, history) -> Tensor:
    """``-cos(proto, raw) + max_h cos(proto, h)``; the max over no history is 0."""
    proto, raw = as_tensor(proto), as_tensor(raw)
    if not np.any(proto.data) or not np.any(raw.data):
        raise DomainError("loss_ipr needs nonzero prototype vectors")
    sim = -cosine_similarity(proto, raw)
    hist = _history_matrix(history)
    if hist is None:
        return sim
    cos = cosine_matrix(proto.reshape(1, -1), Tensor(hist))
    return sim + cos.max()
