"""Command-line front end: train, eval, score, inspect, gen-data.

Exit codes: 0 success, 1 domain error, 2 usage error.
Logging verbosity comes from ``ONER_LOG`` (error, info or debug).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .backbone import ConfigError
from .config import DEFAULT_CONFIG, RunConfig, load_config
from .experience import ExperienceFormatError, load_experience, save_experience
from .metrics import RunReport, evaluate
from .numerics import NumericsError
from .pipeline import EngineState, TrainingError, score_image, train_task
from .synthdata import export_datasets, generate_tasks, load_datasets

log = logging.getLogger("rfiad")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
DOMAIN_ERRORS = (ConfigError, ExperienceFormatError, NumericsError, TrainingError, OSError)


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    config_digest: str
    seeds: dict
    backbone_hash: str
    kernel_backend: str
    task_seconds: list[float] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    version: str = __version__


def _write_atomic(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_path(out: Path, task: int) -> Path:
    return out.with_name(f"{out.name}.task{task}")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else load_config(DEFAULT_CONFIG)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.data:
        datasets, data_cfg = load_datasets(args.data)
        if (data_cfg.image_size, data_cfg.patch_size) != (cfg.backbone.image_size,
                                                          cfg.backbone.patch_size):
            raise ConfigError("dataset image/patch size does not match the backbone config")
        datasets = datasets[:cfg.num_tasks]
    else:
        datasets = generate_tasks(cfg.num_tasks, cfg.data)
    state = EngineState.fresh(cfg)
    manifest = RunManifest(
        config_digest=cfg.digest(),
        seeds={"backbone": cfg.backbone.seed, "train": cfg.train.seed, "data": cfg.data.seed},
        backbone_hash=state.backbone.weight_hash(),
        kernel_backend=kernels.BACKEND,
    )
    for ds in datasets:
        t0 = time.perf_counter()
        train_task(state, ds)
        manifest.task_seconds.append(time.perf_counter() - t0)
        ckpt = save_experience(state, checkpoint_path(out, ds.task_id))
        manifest.artifacts.append(str(ckpt))
        print(f"task {ds.task_id}: final epoch loss {state.stats[-1].epoch_losses[-1]:.6f} "
              f"({manifest.task_seconds[-1]:.1f}s)")
    save_experience(state, out)
    manifest.artifacts.append(str(out))
    man_path = out.with_name(out.name + ".manifest.json")
    _write_atomic(man_path, json.dumps(asdict(manifest), indent=2).encode("utf-8"))
    print(f"wrote {out} and {man_path}")
    return 0


def _load_testsets(source: str, cfg: RunConfig):
    p = Path(source)
    if p.is_dir():
        datasets, _ = load_datasets(p)
        return datasets
    data_cfg = load_config(p).data if p.is_file() else None
    if data_cfg is None:
        raise ConfigError(f"--data {source} is neither a dataset directory nor a config file")
    return generate_tasks(cfg.num_tasks, data_cfg)


def cmd_eval(args) -> int:
    final_path = Path(args.experience)
    final = load_experience(final_path)
    if final.t < 1:
        raise ConfigError("experience holds no trained tasks")
    missing = [str(checkpoint_path(final_path, t)) for t in range(1, final.t + 1)
               if not checkpoint_path(final_path, t).is_file()]
    if missing:
        raise ConfigError("forgetting measures need every per-task checkpoint; missing: "
                          + ", ".join(missing))
    testsets = {ds.task_id: ds for ds in _load_testsets(args.data, final.config)}
    absent = [t for t in range(1, final.t + 1) if t not in testsets]
    if absent:
        raise ConfigError(f"no test data for task(s) {absent}")
    report = RunReport.empty(final.t)
    raw = {}
    for j in range(1, final.t + 1):
        state = load_experience(checkpoint_path(final_path, j))
        if state.t != j:
            raise ExperienceFormatError(f"checkpoint for task {j} holds {state.t} task(s)", 0)
        evals = evaluate(state, [testsets[i] for i in range(1, j + 1)],
                         keep_scores=args.dump_scores and j == final.t)
        for ev in evals:
            report.record(j, ev)
            if ev.raw is not None:
                raw[str(ev.task_id)] = ev.raw
    if raw:
        report.extras["raw_scores"] = raw
    text = report.to_text()
    rep_path = Path(args.report)
    rep_path.parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(rep_path, report.to_json().encode("utf-8"))
    _write_atomic(rep_path.with_suffix(".txt"), (text + "\n").encode("utf-8"))
    print(text)
    return 0


def _read_image(path: Path, size: int) -> np.ndarray:
    if path.suffix == ".npy":
        img = np.load(path, allow_pickle=False)
    else:
        img = np.fromfile(path, dtype="<f4")
        if img.size != size * size:
            raise ConfigError(f"{path} holds {img.size} values; expected {size}x{size} f32")
        img = img.reshape(size, size)
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (size, size):
        raise ConfigError(f"image shape {img.shape} does not match ({size}, {size})")
    return img


def cmd_score(args) -> int:
    state = load_experience(args.experience)
    cfg = state.config.backbone
    img = _read_image(Path(args.image), cfg.image_size)
    res = score_image(state, img)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(out, res.anomaly_map(cfg.grid).astype("<f4").tobytes())
    summary = {"image_score": res.image_score, "grid": [cfg.grid, cfg.grid],
               "dtype": "float32-le", "map_file": out.name,
               "max_patch": int(np.argmax(res.patch_scores))}
    _write_atomic(out.with_name(out.name + ".json"), json.dumps(summary, indent=2).encode("utf-8"))
    print(f"image score {res.image_score:.6f}")
    return 0


def inspect_summary(state: EngineState) -> dict:
    _, n_params = state.prompts.trainable_parameters()
    flags = state.prompts.frozen_flags()
    return {
        "tasks": state.t,
        "prompt_components": len(state.prompts),
        "frozen_components": sum(flags),
        "frozen_flags": flags,
        "trainable_parameters": n_params,
        "image_prototypes": len(state.image_bank),
        "pixel_prototypes": int(state.pixel_bank.matrix().shape[0]) if len(state.pixel_bank) else 0,
        "pixel_prototypes_per_task": state.pixel_bank.rows_per_task,
        "imported_features": len(state.imported_features),
        "config_digest": state.config.digest(),
    }


def cmd_inspect(args) -> int:
    summary = inspect_summary(load_experience(args.experience))
    if args.json:
        print(json.dumps(summary, indent=2))
    else:
        for key, value in summary.items():
            print(f"{key}: {value}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = export_datasets(generate_tasks(cfg.num_tasks, cfg.data), args.out, cfg.data)
    print(f"wrote {cfg.num_tasks} task(s) to {out}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rfiad", description="Rehearsal-free incremental anomaly detection on synthetic tasks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train over all configured tasks")
    t.add_argument("--config", help="JSON run config (default: bundled)")
    t.add_argument("--out", required=True, help="experience file to write")
    t.add_argument("--data", help="dataset directory from gen-data (default: generate)")
    t.add_argument("--seed", type=int, help="override every seed in the config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate an experience and its per-task checkpoints")
    e.add_argument("--experience", required=True)
    e.add_argument("--data", required=True, help="dataset directory or config file")
    e.add_argument("--report", required=True, help="JSON report path (text copy next to it)")
    e.add_argument("--dump-scores", action="store_true", help="include raw final-model scores")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="anomaly map for one image")
    s.add_argument("--experience", required=True)
    s.add_argument("--image", required=True, help=".npy or flat little-endian f32 file")
    s.add_argument("--out", required=True, help="flat f32 map; summary goes to <out>.json")
    s.set_defaults(func=cmd_score)

    i = sub.add_parser("inspect", help="print bank and prompt statistics")
    i.add_argument("--experience", required=True)
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect)

    g = sub.add_parser("gen-data", help="write synthetic datasets to a directory")
    g.add_argument("--config", help="JSON run config (default: bundled)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)
    return p


def _setup_logging() -> None:
    level_name = os.environ.get("ONER_LOG", "error").strip().lower()
    if level_name not in LOG_LEVELS:
        raise UsageError(f"ONER_LOG must be one of {sorted(LOG_LEVELS)}, got {level_name!r}")
    logging.basicConfig(level=LOG_LEVELS[level_name], stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def run_cli(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
