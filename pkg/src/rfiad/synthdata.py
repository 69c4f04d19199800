"""Deterministic synthetic tasks: grating textures with rectangle defects.

Each task has its own pair of sinusoidal gratings (frequency and
orientation drawn from a task-seeded generator) over a task-specific mean
brightness. Segment labels come from
quantizing the phase of the coarse grating into ``segments`` bins and taking
the per-patch majority; they stand in for an off-the-shelf segmenter.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import ConfigError, patchify


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 32
    patch_size: int = 8
    n_train: int = 24
    n_test_normal: int = 16
    n_test_anomalous: int = 16
    noise: float = 0.05
    segments: int = 3
    shift: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 1 or self.patch_size < 1 or self.image_size % self.patch_size:
            raise ConfigError(
                f"data.patch_size={self.patch_size} must divide data.image_size={self.image_size}")
        if self.n_train < 1:
            raise ConfigError("data.n_train must be >= 1")
        if self.n_test_normal < 0 or self.n_test_anomalous < 0:
            raise ConfigError("data test counts must be >= 0")
        if self.segments < 1:
            raise ConfigError("data.segments must be >= 1")
        if self.noise < 0:
            raise ConfigError("data.noise must be >= 0")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskSample:
    sample_id: str
    image: np.ndarray          # (H, W) float64 in [0, 1]
    is_anomalous: bool
    mask: np.ndarray           # (H, W) uint8
    segment_labels: np.ndarray  # (N_p,) int64

    def patch_labels(self, patch: int) -> np.ndarray:
        return mask_to_patch_labels(self.mask, patch)


@dataclass
class TaskDataset:
    task_id: int
    train: list[TaskSample]
    test: list[TaskSample]
    seed: int = 0
    texture: dict = field(default_factory=dict)


def mask_to_patch_labels(mask, patch: int, threshold: float = 0.5) -> np.ndarray:
    """A patch is anomalous iff at least ``threshold`` of its pixels are masked."""
    frac = patchify(np.asarray(mask, dtype=np.float64), patch).mean(axis=1)
    return (frac >= threshold).astype(np.int64)


def _texture_params(task_id: int, seed: int) -> dict:
    rng = np.random.default_rng([seed, task_id, 7])
    # odd tasks brighter than mid-grey, even tasks darker
    sign = 1.0 if task_id % 2 else -1.0
    return {
        "freq_coarse": float(rng.uniform(1.25, 2.0)),
        "angle_coarse": float(rng.uniform(0.0, math.pi)),
        "freq_fine": float(rng.uniform(3.0, 6.0)),
        "angle_fine": float(rng.uniform(0.0, math.pi)),
        "level": 0.5 + sign * float(rng.uniform(0.10, 0.25)),
        "amp_coarse": 0.05,
        "amp_fine": 0.03,
    }


def _phase_field(size: int, freq: float, angle: float) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    return 2.0 * math.pi * freq * (x * math.cos(angle) + y * math.sin(angle)) / size


def _segment_labels(phase: np.ndarray, cfg: DataConfig, rng: np.random.Generator) -> np.ndarray:
    k = cfg.segments
    labels = None
    for _ in range(64):
        offset = rng.uniform(0.0, 2.0 * math.pi)
        pix = np.floor(np.mod(phase + offset, 2.0 * math.pi) / (2.0 * math.pi / k)).astype(np.int64)
        pix = np.minimum(pix, k - 1)
        per_patch = patchify(pix.astype(np.float64), cfg.patch_size).astype(np.int64)
        labels = np.array([np.bincount(row, minlength=k).argmax() for row in per_patch])
        if len(np.unique(labels)) == k:
            return labels
    raise ConfigError(f"could not cover all {k} segment classes; texture too coarse")


def _render(tex: dict, cfg: DataConfig, rng: np.random.Generator):
    s = cfg.image_size
    phase_c = _phase_field(s, tex["freq_coarse"], tex["angle_coarse"]) + rng.uniform(0, 2 * math.pi)
    phase_f = _phase_field(s, tex["freq_fine"], tex["angle_fine"]) + rng.uniform(0, 2 * math.pi)
    img = tex["level"] + tex["amp_coarse"] * np.sin(phase_c) + tex["amp_fine"] * np.sin(phase_f)
    img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    labels = _segment_labels(phase_c, cfg, rng)
    return img, labels


def _make_sample(sample_id: str, tex: dict, cfg: DataConfig, rng: np.random.Generator,
                 anomalous: bool) -> TaskSample:
    img, labels = _render(tex, cfg, rng)
    mask = np.zeros((cfg.image_size, cfg.image_size), dtype=np.uint8)
    if anomalous:
        s = cfg.image_size
        lo, hi = max(1, math.ceil(0.1 * s)), max(1, math.floor(0.4 * s))
        h, w = int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1))
        top, left = int(rng.integers(0, s - h + 1)), int(rng.integers(0, s - w + 1))
        sign = 1.0 if rng.random() < 0.5 else -1.0
        img[top:top + h, left:left + w] += sign * cfg.shift
        mask[top:top + h, left:left + w] = 1
    img = np.clip(img, 0.0, 1.0)
    return TaskSample(sample_id=sample_id, image=img, is_anomalous=anomalous,
                      mask=mask, segment_labels=labels)


def generate_task(task_id: int, cfg: DataConfig = DataConfig(), seed: int | None = None) -> TaskDataset:
    if task_id < 1:
        raise ConfigError(f"task ids start at 1, got {task_id}")
    seed = cfg.seed if seed is None else seed
    tex = _texture_params(task_id, seed)
    rng = np.random.default_rng([seed, task_id, 11])
    train = [_make_sample(f"t{task_id}-train-{i:03d}", tex, cfg, rng, False)
             for i in range(cfg.n_train)]
    test = [_make_sample(f"t{task_id}-test-{i:03d}", tex, cfg, rng, False)
            for i in range(cfg.n_test_normal)]
    test += [_make_sample(f"t{task_id}-test-{cfg.n_test_normal + i:03d}", tex, cfg, rng, True)
             for i in range(cfg.n_test_anomalous)]
    return TaskDataset(task_id=task_id, train=train, test=test, seed=seed, texture=tex)


def generate_tasks(n_tasks: int, cfg: DataConfig = DataConfig(), seed: int | None = None) -> list[TaskDataset]:
    return [generate_task(t, cfg, seed) for t in range(1, n_tasks + 1)]


# -- directory export / import -------------------------------------------------

def export_datasets(datasets: list[TaskDataset], out_dir, cfg: DataConfig) -> Path:
    """Write flat little-endian f32 images, u8 masks and a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "rfiad-dataset", "version": 1, "config": cfg.to_dict(), "tasks": []}
    for ds in datasets:
        tdir = out / f"task{ds.task_id}"
        tdir.mkdir(exist_ok=True)
        entry = {"task_id": ds.task_id, "seed": ds.seed, "texture": ds.texture,
                 "train": [], "test": []}
        for split in ("train", "test"):
            for smp in getattr(ds, split):
                img_file = f"task{ds.task_id}/{smp.sample_id}.f32"
                mask_file = f"task{ds.task_id}/{smp.sample_id}.mask.u8"
                smp.image.astype("<f4").tofile(out / img_file)
                smp.mask.astype(np.uint8).tofile(out / mask_file)
                entry[split].append({
                    "id": smp.sample_id,
                    "image": img_file,
                    "mask": mask_file,
                    "is_anomalous": bool(smp.is_anomalous),
                    "segment_labels": [int(v) for v in smp.segment_labels],
                })
        manifest["tasks"].append(entry)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return out


def load_datasets(data_dir) -> tuple[list[TaskDataset], DataConfig]:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ConfigError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    cfg = DataConfig(**manifest["config"])
    s = cfg.image_size
    out = []
    for entry in manifest["tasks"]:
        splits = {}
        for split in ("train", "test"):
            samples = []
            for rec in entry[split]:
                img = np.fromfile(root / rec["image"], dtype="<f4").astype(np.float64)
                mask = np.fromfile(root / rec["mask"], dtype=np.uint8)
                if img.size != s * s or mask.size != s * s:
                    raise ConfigError(f"sample {rec['id']} does not match image_size={s}")
                samples.append(TaskSample(
                    sample_id=rec["id"], image=img.reshape(s, s),
                    is_anomalous=bool(rec["is_anomalous"]), mask=mask.reshape(s, s),
                    segment_labels=np.asarray(rec["segment_labels"], dtype=np.int64)))
            splits[split] = samples
        out.append(TaskDataset(task_id=int(entry["task_id"]), train=splits["train"],
                               test=splits["test"], seed=int(entry.get("seed", 0)),
                               texture=entry.get("texture", {})))
    return out, cfg
