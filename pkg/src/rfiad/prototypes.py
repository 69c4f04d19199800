"""Image-level and pixel-level prototype banks.

The image bank keeps one refined unit vector per task; the pixel bank keeps
``N_s`` patch features per task, picked by farthest-first traversal that
treats the existing bank as already-placed centres.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .losses import loss_ipr
from .numerics import (
    ContractError,
    DomainError,
    LbfgsConfig,
    Tape,
    Tensor,
    backward,
    lbfgs_minimize,
)

log = logging.getLogger(__name__)


class _Bank:
    def __init__(self):
        self.entries: list[tuple[int, np.ndarray]] = []

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def task_ids(self) -> list[int]:
        return [t for t, _ in self.entries]

    def _check_next(self, task: int) -> None:
        expected = self.entries[-1][0] + 1 if self.entries else 1
        if task != expected:
            raise ContractError(f"expected task id {expected}, got {task}")

    def integrate(self, task: int, entry) -> "_Bank":
        """Append ``entry`` for ``task``; earlier entries are never touched."""
        self._check_next(task)
        arr = np.array(entry, dtype=np.float64)
        arr.setflags(write=False)
        self.entries.append((task, arr))
        return self


class ImagePrototypeBank(_Bank):
    def integrate(self, task: int, entry, atol: float = 1e-9) -> "ImagePrototypeBank":
        vec = np.asarray(entry, dtype=np.float64).reshape(-1)
        if abs(np.linalg.norm(vec) - 1.0) > atol:
            raise ContractError("image prototypes must be unit-norm")
        return super().integrate(task, vec)

    def matrix(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0))
        return np.stack([v for _, v in self.entries])


class PixelPrototypeBank(_Bank):
    def integrate(self, task: int, entry) -> "PixelPrototypeBank":
        rows = np.asarray(entry, dtype=np.float64)
        if rows.ndim != 2:
            raise ContractError("pixel prototypes must be a 2-d (N_s, d) array")
        if self.entries and rows.shape != self.entries[0][1].shape:
            raise ContractError(
                f"pixel prototype block shape {rows.shape} != {self.entries[0][1].shape}")
        return super().integrate(task, rows)

    def matrix(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0))
        return np.concatenate([v for _, v in self.entries], axis=0)

    @property
    def rows_per_task(self) -> int | None:
        return self.entries[0][1].shape[0] if self.entries else None


def compute_raw_prototype(backbone, images) -> np.ndarray:
    """Normalized mean of the un-prompted image-level features."""
    images = list(images)
    if not images:
        raise ContractError("cannot compute a prototype from an empty dataset")
    feats = np.stack([backbone.encode(img).image.reshape(-1) for img in images])
    mean = feats.mean(axis=0)
    n = np.linalg.norm(mean)
    if n == 0:
        raise DomainError("mean image feature is zero")
    return mean / n


@dataclass
class RefineResult:
    prototype: np.ndarray
    loss_before: float
    loss_after: float
    status: str


def _ipr_objective(raw: np.ndarray, hist):
    def objective(x: np.ndarray):
        p = Tensor(x, requires_grad=True)
        with Tape() as tape:
            loss = loss_ipr(p, raw, hist)
        backward(tape, loss)
        return loss.item(), p.grad
    return objective


def refine_image_prototype(raw, history, cfg: LbfgsConfig = LbfgsConfig()) -> RefineResult:
    """Refine the raw task prototype against earlier prototypes with L-BFGS.

    The objective is scale-invariant, so the minimizer is returned
    re-normalized. If the optimizer stops on a failed line search the best
    iterate reached so far is still returned (it is never worse than ``raw``).
    """
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    n = np.linalg.norm(raw)
    if n == 0:
        raise DomainError("raw prototype has zero norm")
    hist = history.matrix() if hasattr(history, "matrix") else np.asarray(history, dtype=np.float64)
    if hist.size == 0:
        hist = None
    # an already unit raw prototype is kept bit-for-bit so the fallback below is exact
    start = raw if abs(n - 1.0) <= 1e-12 else raw / n
    objective = _ipr_objective(raw, hist)
    before = objective(raw)[0]
    result = lbfgs_minimize(objective, start, cfg)
    x = result.x
    xn = np.linalg.norm(x)
    proto = x / xn if xn > 0 else start
    after = loss_ipr(Tensor(proto), raw, hist).item()
    if after > before:
        # no progress beyond rounding; keep the starting point
        proto = start
        after = loss_ipr(Tensor(proto), raw, hist).item()
    if not result.ok:
        log.info("image prototype refinement stopped with status %s", result.status)
    return RefineResult(prototype=proto, loss_before=before, loss_after=after, status=result.status)


@dataclass
class Selection:
    rows: np.ndarray
    indices: np.ndarray
    coverage: np.ndarray  # squared coverage radius after each pick


def select_pixel_prototypes(p_all, history, n_select: int) -> Selection:
    """Greedy minimax coreset of ``n_select`` rows of ``p_all``.

    Seed is the row farthest from the existing bank (from the centroid when
    the bank is empty); every later pick is the row farthest from bank plus
    picks. Distances are squared Euclidean; ties go to the lowest index.
    """
    pts = np.asarray(p_all, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ContractError("p_all must be a non-empty (rows, d) array")
    if n_select > pts.shape[0]:
        raise ContractError(f"cannot select {n_select} prototypes from {pts.shape[0]} rows")
    if n_select < 1:
        raise ContractError("n_select must be >= 1")
    hist = history.matrix() if hasattr(history, "matrix") else np.asarray(history, dtype=np.float64)
    hist = hist.reshape(-1, pts.shape[1]) if hist.size else np.zeros((0, pts.shape[1]))
    idx, cover = kernels.kcenter_greedy(pts, hist, n_select)
    return Selection(rows=pts[idx].copy(), indices=idx, coverage=cover)


def coverage_radius(p_all, centres) -> float:
    """max over rows of the squared distance to the nearest centre."""
    pts = np.asarray(p_all, dtype=np.float64)
    c = np.asarray(centres, dtype=np.float64)
    d2 = ((pts[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    return float(d2.min(axis=1).max())
