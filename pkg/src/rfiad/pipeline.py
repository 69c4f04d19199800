"""Task-sequential training and single-pass inference over the unified banks."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .backbone import Backbone, init_backbone
from .config import RunConfig
from .losses import loss_align, loss_itc, loss_total, loss_tsc
from .numerics import AdamState, ContractError, NonFiniteError, Tape, adam_step, backward
from .prompt_bank import PromptBank
from .prototypes import (
    ImagePrototypeBank,
    PixelPrototypeBank,
    compute_raw_prototype,
    refine_image_prototype,
    select_pixel_prototypes,
)
from .synthdata import TaskDataset

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TaskStats:
    task_id: int
    epoch_losses: list[float]
    ipr_before: float
    ipr_after: float
    ipr_status: str
    seconds: float


@dataclass
class EngineState:
    config: RunConfig
    backbone: Backbone
    prompts: PromptBank
    image_bank: ImagePrototypeBank = field(default_factory=ImagePrototypeBank)
    pixel_bank: PixelPrototypeBank = field(default_factory=PixelPrototypeBank)
    t: int = 0
    stats: list[TaskStats] = field(default_factory=list)
    imported_features: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, config: RunConfig) -> "EngineState":
        return cls(
            config=config,
            backbone=init_backbone(config.backbone),
            prompts=PromptBank(dim=config.backbone.dim,
                               prompt_length=config.train.prompt_length,
                               per_task=config.train.per_task),
        )

    def check(self) -> None:
        if len(self.image_bank) != self.t or len(self.pixel_bank) != self.t:
            raise ContractError("prototype banks out of step with the task counter")
        if len(self.prompts) != self.prompts.per_task * self.t:
            raise ContractError("prompt bank size out of step with the task counter")


@dataclass
class AnomalyResult:
    patch_scores: np.ndarray  # (N_p,) in [0, 2]
    image_score: float

    def anomaly_map(self, grid: int) -> np.ndarray:
        return self.patch_scores.reshape(grid, grid)


def _base_feature(backbone: Backbone, image) -> np.ndarray:
    return backbone.encode(image).image.reshape(-1)


def train_task(state: EngineState, dataset: TaskDataset, access_log: list | None = None) -> EngineState:
    """Run one incremental step on ``dataset`` and return the updated state.

    Pre-stage: expand prompts, refine and store the image prototype.
    Training: Adam on the newly added components only, loss averaged per batch.
    Post-stage: freeze prompts, select and store pixel prototypes.
    Only ``dataset`` is ever read.
    """
    cfg = state.config
    tcfg = cfg.train
    task = dataset.task_id
    if task != state.t + 1:
        raise ContractError(f"engine has completed {state.t} task(s); got task {task}")
    if not dataset.train:
        raise ContractError(f"task {task} has no training samples")
    if any(s.is_anomalous for s in dataset.train):
        raise ContractError(f"task {task} training split contains anomalous samples")
    t0 = time.perf_counter()

    def read(i: int):
        sample = dataset.train[i]
        if access_log is not None:
            access_log.append(sample.sample_id)
        return sample

    samples = [read(i) for i in range(len(dataset.train))]
    base = [_base_feature(state.backbone, s.image) for s in samples]

    # pre-stage
    state.prompts.expand(task, seed=tcfg.seed)
    raw = compute_raw_prototype(state.backbone, [s.image for s in samples])
    refined = refine_image_prototype(raw, state.image_bank, cfg.lbfgs)
    state.image_bank.integrate(task, refined.prototype)
    proto = refined.prototype
    history = state.pixel_bank.matrix() if len(state.pixel_bank) else None

    # training stage
    params, n_params = state.prompts.trainable_parameters()
    log.info("task %d: %d trainable prompt parameters", task, n_params)
    adam = AdamState(lr=tcfg.lr, beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps)
    rng = np.random.default_rng([tcfg.seed, task, 3])
    epoch_losses = []
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(samples))
        totals = []
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start:start + tcfg.batch_size]
            try:
                with Tape() as tape:
                    batch_loss = None
                    for i in batch:
                        smp = read(int(i))
                        asm = state.prompts.assemble(base[i])
                        k_img, k_pix = state.backbone.forward(smp.image, asm.prompt)
                        total = loss_total(loss_align(k_img, proto),
                                           loss_tsc(k_pix, smp.segment_labels, tcfg.tsc_sign),
                                           loss_itc(k_pix, history))
                        totals.append(total.item())
                        batch_loss = total if batch_loss is None else batch_loss + total
                    batch_loss = batch_loss * (1.0 / len(batch))
                backward(tape, batch_loss, params)
                adam_step(adam, params)
            except NonFiniteError as exc:
                raise TrainingError(
                    f"non-finite loss at task {task}, epoch {epoch + 1}, batch "
                    f"{start // tcfg.batch_size + 1}: {exc}") from exc
        epoch_losses.append(float(np.mean(totals)))
        log.info("task %d epoch %d: mean loss %.6f", task, epoch + 1, epoch_losses[-1])

    # post-stage
    state.prompts.freeze_all()
    imported = [state.imported_features.get(s.sample_id) for s in samples]
    if all(f is not None for f in imported):
        # an external backbone supplied the features; the bank must live in its space
        p_all = np.concatenate([f.patches for f in imported])
    else:
        p_all = np.concatenate([
            state.backbone.encode_with_prompt(s.image, state.prompts.assemble(b).prompt).patches
            for s, b in zip(samples, base)
        ])
    sel = select_pixel_prototypes(p_all, state.pixel_bank, cfg.n_select)
    state.pixel_bank.integrate(task, sel.rows)
    state.t = task
    state.stats.append(TaskStats(task_id=task, epoch_losses=epoch_losses,
                                 ipr_before=refined.loss_before, ipr_after=refined.loss_after,
                                 ipr_status=refined.status,
                                 seconds=time.perf_counter() - t0))
    state.check()
    return state


def prompted_features(state: EngineState, image):
    """Image-conditioned features, prompt built from the plain backbone feature."""
    if not len(state.prompts):
        raise ContractError("prompt bank is empty; train at least one task first")
    asm = state.prompts.assemble(_base_feature(state.backbone, image))
    return state.backbone.encode_with_prompt(image, asm.prompt.data)


def score_patches(state: EngineState, patches) -> AnomalyResult:
    """Score given pixel-level features against every stored pixel prototype."""
    if len(state.pixel_bank) == 0:
        raise ContractError("pixel prototype bank is empty")
    best, _ = kernels.max_cosine(patches, state.pixel_bank.matrix())
    scores = np.clip(1.0 - best, 0.0, 2.0)
    return AnomalyResult(patch_scores=scores, image_score=float(scores.max()))


def score_image(state: EngineState, image) -> AnomalyResult:
    """One prompted forward pass and one lookup in the unified bank; no task id."""
    if len(state.pixel_bank) == 0:
        raise ContractError("pixel prototype bank is empty")
    return score_patches(state, prompted_features(state, image).patches)


def run_tasks(config: RunConfig, datasets: list[TaskDataset], checkpoint=None) -> EngineState:
    """Train sequentially over ``datasets``; ``checkpoint(state)`` runs after each task."""
    state = EngineState.fresh(config)
    for ds in datasets:
        train_task(state, ds)
        if checkpoint is not None:
            checkpoint(state)
    return state


def score_sample(state: EngineState, sample) -> AnomalyResult:
    """Score a sample, preferring imported precomputed features when present."""
    bundle = state.imported_features.get(sample.sample_id)
    if bundle is not None:
        return score_patches(state, bundle.patches)
    return score_image(state, sample.image)
