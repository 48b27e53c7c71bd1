"""Command-line entry point: ``mbl gen | train | embed | probe | report``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from mbl import __version__
from mbl.data import Dataset, load_dataset, save_dataset, split_indices
from mbl.evaluation import (
    SYNTHETIC_TASKS,
    EmbeddedSplit,
    ProbeTask,
    embed_split,
    pool_group,
    probe_splits,
    timescale_orderings,
)
from mbl.model import BRANCHES, build_default_specs
from mbl.synthgen import GeneratorConfig, generate_dataset
from mbl.trainer import TrainConfig, TrainingDiverged, load_checkpoint, model_config_for, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    """Bad configuration or arguments (exit code 2)."""


# ---------------------------------------------------------------- run config

MODEL_KEYS = {"horizon", "delta", "alpha", "hidden_task", "future_hidden", "hidden_head_hidden", "bootstrap_hidden", "hidden_channels"}
DATA_KEYS = {"train_fraction"}
EVAL_KEYS = {"tasks", "frame_stride", "l2"}


@dataclass
class RunConfig:
    generator: dict = field(default_factory=lambda: GeneratorConfig().to_dict())
    data: dict = field(default_factory=lambda: {"train_fraction": 0.8})
    model: dict = field(default_factory=lambda: {"horizon": 15, "delta": 5, "alpha": 0.1})
    train: dict = field(default_factory=lambda: TrainConfig().to_dict())
    eval: dict = field(default_factory=lambda: {"tasks": [t.name for t in SYNTHETIC_TASKS], "frame_stride": 1, "l2": 1e-4})

    def to_dict(self) -> dict:
        return {"generator": self.generator, "data": self.data, "model": self.model, "train": self.train, "eval": self.eval}

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(**self.generator)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def model_config(self, dataset: Dataset):
        overrides = dict(self.model)
        hidden = overrides.pop("hidden_channels", None)
        if hidden:
            bad = set(hidden) - set(BRANCHES)
            if bad:
                raise ConfigError(f"model.hidden_channels: unknown branches {sorted(bad)}")
            overrides["encoders"] = build_default_specs(len(dataset.input_indices), hidden)
        return model_config_for(dataset, **overrides)


def _check_keys(section: str, given: dict, allowed: set[str]) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in config section {section!r}: {', '.join(unknown)}")


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be an object")
    cfg = RunConfig()
    sections = {
        "generator": {f.name for f in fields(GeneratorConfig)},
        "data": DATA_KEYS,
        "model": MODEL_KEYS,
        "train": {f.name for f in fields(TrainConfig)},
        "eval": EVAL_KEYS,
    }
    unknown = sorted(set(doc) - set(sections))
    if unknown:
        raise ConfigError(f"{source}: unknown config sections: {', '.join(unknown)}")
    for name, allowed in sections.items():
        if name in doc:
            _check_keys(name, doc[name], allowed)
            getattr(cfg, name).update(doc[name])
    # validate eagerly so errors surface before any work starts
    try:
        cfg.generator_config()
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    frac = cfg.data["train_fraction"]
    if not 0 < frac < 1:
        raise ConfigError(f"{source}: data.train_fraction must be in (0, 1), got {frac}")
    return cfg


def load_run_config(path: str | None, seed: int | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_run_config(p.read_text(), str(p))
    if seed is not None:
        cfg.generator["seed"] = seed
        cfg.train["seed"] = seed
    return cfg


# ---------------------------------------------------------------- helpers


def version_string() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=here, capture_output=True, text=True, timeout=5, check=True,
        )
        return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def prepare_out_dir(path: str | Path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(path: str) -> Dataset:
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"data directory not found: {path}")
    try:
        return load_dataset(p)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None


def label_inventory(dataset: Dataset) -> dict:
    seq: dict[str, set] = {}
    frame: dict[str, set] = {}
    for traj in dataset.trajectories:
        for k, v in traj.sequence_labels.items():
            seq.setdefault(k, set()).add(v)
        for k, v in traj.frame_labels.items():
            if k.startswith("dist:"):
                continue
            arr = np.asarray(v)
            if arr.dtype.kind in "iub":
                frame.setdefault(k, set()).update(np.unique(arr).tolist())
    return {
        "sequence": {k: sorted(v, key=str) for k, v in seq.items()},
        "frame": {k: sorted(v) for k, v in frame.items()},
    }


def resolve_tasks(entries) -> tuple[list[ProbeTask], list[str]]:
    """Turn config entries (names or dicts) into tasks; unknown names are returned separately."""
    known = {t.name: t for t in SYNTHETIC_TASKS}
    tasks, unknown = [], []
    for entry in entries:
        if isinstance(entry, dict):
            try:
                tasks.append(ProbeTask(**entry))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad task entry {entry}: {exc}") from None
        elif entry in known:
            tasks.append(known[entry])
        else:
            unknown.append(str(entry))
    return tasks, unknown


def _split(dataset: Dataset, cfg: RunConfig) -> dict:
    train, test = split_indices(len(dataset.groups), cfg.data["train_fraction"], cfg.train["seed"])
    return {"train": train, "test": test}


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    out = prepare_out_dir(args.out, args.force)
    gen_cfg = cfg.generator_config()
    dataset = generate_dataset(gen_cfg)
    extra = {
        "seed": gen_cfg.seed,
        "labels": label_inventory(dataset),
        "config": cfg.to_dict(),
        "version": version_string(),
    }
    save_dataset(out, dataset, extra)
    print(f"wrote {len(dataset)} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.seed)
    dataset = _load_data(args.data)
    try:
        model_cfg = cfg.model_config(dataset)
        train_cfg = cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    need = model_cfg.max_receptive_field + model_cfg.horizon
    if train_cfg.window_length < need:
        raise ConfigError(f"window_length {train_cfg.window_length} is shorter than receptive field + horizon ({need})")
    short = [t.name for t in dataset.trajectories if t.num_frames < train_cfg.window_length]
    if short:
        raise ConfigError(f"window_length {train_cfg.window_length} exceeds sequence {short[0]!r}")
    out = prepare_out_dir(args.out, args.force)
    split_meta = _split(dataset, cfg)
    train_ds = dataset.subset(split_meta["train"])
    meta = {"run_config": cfg.to_dict(), "version": version_string(), "split": split_meta, "data_dir": str(Path(args.data).resolve())}
    (out / "run_config.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    every = max(1, train_cfg.epochs // 20) if train_cfg.epochs else 1

    def progress(step, bundle):
        if args.verbose and step % every == 0:
            print(f"step {step} total {bundle.total:.4f}", file=sys.stderr)

    try:
        result = train(train_ds, model_cfg, train_cfg, out_dir=out, extra_meta=meta, on_step=progress)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    last = result.records[-1]["total"] if result.records else float("nan")
    print(f"trained {result.checkpoint.step} steps; final total loss {last:.4f}; checkpoint {out / 'checkpoint.mblt'}")
    return EXIT_OK


def _load_ckpt(path: str):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(p)


def _check_dims(ckpt, dataset: Dataset) -> None:
    want = ckpt.model_config.input_dim
    have = len(dataset.input_indices)
    if want != have:
        raise ConfigError(f"checkpoint expects {want} input channels, dataset provides {have}")


def embedding_header(dim: int, pooled: bool) -> list[str]:
    cols = ["seq", "t"] + [f"z_{i}" for i in range(dim)]
    if pooled:
        cols += [f"p_{i}" for i in range(2 * dim)]
    return cols


def cmd_embed(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    dataset = _load_data(args.data)
    _check_dims(ckpt, dataset)
    model = ckpt.build_model()
    slices = model.config.branch_slices
    dim = model.config.embedding_dim
    pooled = dataset.agents_per_group >= 2
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists (use --force to overwrite)")
    out.parent.mkdir(parents=True, exist_ok=True)
    inputs = np.array(dataset.input_indices)
    rows = 0
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(embedding_header(dim, pooled))
        for group in dataset.groups:
            zs = [model.embed(ckpt.normalizer.apply(dataset.trajectories[ti].features)[:, inputs]).z for ti in group]
            if pooled:
                length = min(z.shape[0] for z in zs)
                pool = pool_group(np.stack([z[:length] for z in zs]))
            for ti, z in zip(group, zs):
                traj = dataset.trajectories[ti]
                for t in range(z.shape[0]):
                    row = [traj.name, t] + [repr(float(v)) for v in z[t]]
                    if pooled:
                        row += [repr(float(v)) for v in pool[t]] if t < pool.shape[0] else ["nan"] * (2 * dim)
                    writer.writerow(row)
                    rows += 1
    sidecar = {
        "slices": {k: [s.start, s.stop] for k, s in slices.items()},
        "embedding_dim": dim,
        "pooled": pooled,
        "checkpoint": str(Path(args.checkpoint).resolve()),
        "split": ckpt.extra_meta.get("split"),
        "run_config": ckpt.extra_meta.get("run_config"),
        "version": version_string(),
    }
    out.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    print(f"wrote {rows} rows to {out}")
    return EXIT_OK


def read_embeddings(path: str | Path, dataset: Dataset) -> tuple[EmbeddedSplit, dict]:
    """Rebuild per-group embeddings (and labels from ``dataset``) from an embed CSV."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"embeddings file not found: {path}")
    side_path = path.with_suffix(".json")
    side = json.loads(side_path.read_text()) if side_path.exists() else {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    zcols = [i for i, c in enumerate(header) if c.startswith("z_")]
    names = np.loadtxt(path, delimiter=",", skiprows=1, usecols=[0], dtype=str, ndmin=1)
    values = np.loadtxt(path, delimiter=",", skiprows=1, usecols=zcols, ndmin=2)
    by_name: dict[str, list[int]] = {}
    for i, n in enumerate(names):
        by_name.setdefault(str(n), []).append(i)
    per_group, seq_labels, frame_labels = [], [], []
    for group in dataset.groups:
        agents = []
        for ti in group:
            name = dataset.trajectories[ti].name
            if name not in by_name:
                raise ConfigError(f"sequence {name!r} missing from {path}")
            agents.append(values[by_name[name]])
        length = min(a.shape[0] for a in agents)
        per_group.append(np.stack([a[:length] for a in agents]))
        first = dataset.trajectories[group[0]]
        seq_labels.append(dict(first.sequence_labels))
        frame_labels.append({k: np.asarray(v)[:length] for k, v in first.frame_labels.items()})
    return EmbeddedSplit(per_group, seq_labels, frame_labels), side


def _run_probe(args, split: EmbeddedSplit, dataset: Dataset, cfg: RunConfig, split_meta, slices, extra_meta: dict) -> int:
    entries = args.tasks if args.tasks is not None else cfg.eval["tasks"]
    tasks, unknown = resolve_tasks(entries)
    for name in unknown:
        print(f"unknown task {name!r}: skipped (known: {', '.join(t.name for t in SYNTHETIC_TASKS)})", file=sys.stderr)
    if not tasks:
        raise ConfigError("no tasks")
    train_idx, test_idx = split_meta["train"], split_meta["test"]
    pick = lambda idx: EmbeddedSplit(
        [split.per_agent[i] for i in idx], [split.sequence_labels[i] for i in idx], [split.frame_labels[i] for i in idx]
    )
    report = probe_splits(
        pick(train_idx), pick(test_idx), tasks, slices=slices,
        seed=cfg.train["seed"], frame_stride=int(cfg.eval.get("frame_stride", 1)), l2=float(cfg.eval.get("l2", 1e-4)),
    )
    report.skipped.extend(unknown)
    report.meta = {"run_config": cfg.to_dict(), "split": split_meta, "version": version_string(), **extra_meta}
    out = prepare_out_dir(args.out, args.force)
    report.write(out)
    print(report.format_table())
    if args.assert_orderings:
        try:
            checks = timescale_orderings(report)
        except KeyError as exc:
            print(f"cannot check orderings: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        failed = [k for k, (ok, _) in checks.items() if not ok]
        for k, (ok, msg) in checks.items():
            print(f"{'PASS' if ok else 'FAIL'} {k}: {msg}")
        if failed:
            return EXIT_RUNTIME
    return EXIT_OK


def cmd_probe(args) -> int:
    ckpt = _load_ckpt(args.checkpoint)
    dataset = _load_data(args.data)
    _check_dims(ckpt, dataset)
    cfg = _config_from_meta(ckpt.extra_meta.get("run_config"), args)
    model = ckpt.build_model()
    split = embed_split(model, ckpt.normalizer, dataset)
    split_meta = ckpt.extra_meta.get("split") or _split(dataset, cfg)
    return _run_probe(args, split, dataset, cfg, split_meta, model.config.branch_slices, {"checkpoint": str(args.checkpoint)})


def cmd_report(args) -> int:
    dataset = _load_data(args.data)
    split, side = read_embeddings(args.embeddings, dataset)
    cfg = _config_from_meta(side.get("run_config"), args)
    slices = {k: slice(*v) for k, v in side["slices"].items()} if "slices" in side else None
    split_meta = side.get("split") or _split(dataset, cfg)
    return _run_probe(args, split, dataset, cfg, split_meta, slices, {"embeddings": str(args.embeddings)})


def _config_from_meta(saved: dict | None, args) -> RunConfig:
    if args.config is not None or saved is None:
        return load_run_config(args.config, args.seed)
    cfg = parse_run_config(json.dumps(saved), "saved run config")
    if args.seed is not None:
        cfg.train["seed"] = args.seed
    return cfg


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbl", description="Multi-timescale behavioral representation learning")
    parser.add_argument("--version", action="version", version=f"mbl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="run config JSON (sections: generator|data, model, train, eval)")
        p.add_argument("--seed", type=int, help="single seed overriding every seed in the config")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen", help="generate the synthetic dataset")
    common(p, "output dataset directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    common(p, "output run directory")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write per-frame embeddings to CSV")
    common(p, "output CSV path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_embed)

    for name, func, help_ in (("probe", cmd_probe, "probe a checkpoint"), ("report", cmd_report, "probe saved embeddings")):
        p = sub.add_parser(name, help=help_)
        common(p, "output report directory")
        if name == "probe":
            p.add_argument("--checkpoint", required=True)
        else:
            p.add_argument("--embeddings", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--tasks", nargs="*", help="task names (default: eval.tasks from the config)")
        p.add_argument("--assert", dest="assert_orderings", action="store_true", help="exit 1 if an ordering check fails")
        p.set_defaults(func=func)
    return parser


def _thread_limit():
    raw = os.environ.get("MBL_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"MBL_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("MBL_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
