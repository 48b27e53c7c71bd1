"""Adam training loop with deterministic logging and resumable checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from mbl.data import Dataset, Normalizer, Trajectory, check_window, sample_batch
from mbl.model import BOOTSTRAP_BRANCHES, BamsConfig, BamsModel
from mbl.nn.autodiff import backward
from mbl.nn.serialization import read_tensors, write_tensors
from mbl.objectives import LossBundle, PreparedBatch, agent_pairs, compute_losses

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PREDICTOR_PREFIXES = tuple(f"q_{tag}." for tag in BOOTSTRAP_BRANCHES)
LOG_FIELDS = ("step", "epoch", "l_future", "l_hidden", "l_short", "l_long", "total", "lr")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 2000
    base_lr: float = 1e-3
    predictor_lr_multiplier: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    window_length: int = 512
    anchors_per_sequence: int = 64
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 -> only at the end
    grad_clip: float | None = None
    dtype: str = "float64"

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.predictor_lr_multiplier < 1:
            raise ValueError("predictor_lr_multiplier must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.window_length < 1:
            raise ValueError("epochs must be >= 0; batch_size and window_length >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- Adam


def parameter_group(name: str) -> str:
    return "predictor" if name.startswith(PREDICTOR_PREFIXES) else "base"


def group_learning_rates(config: TrainConfig) -> dict[str, float]:
    return {"base": config.base_lr, "predictor": config.base_lr * config.predictor_lr_multiplier}


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
    lrs: dict[str, float],
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place. ``lrs`` maps group -> lr."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        lr = lrs[parameter_group(name)]
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------- data plumbing


class TrainingView:
    """Normalised copy of a dataset split into encoder inputs, targets and hidden parts."""

    def __init__(self, dataset: Dataset, normalizer: Normalizer, dtype=np.float64):
        self.source = dataset
        self.normalizer = normalizer
        self.input_indices = np.array(dataset.input_indices)
        self.target_indices = np.array(dataset.target_indices)
        self.hidden_indices = np.array(dataset.hidden_indices, dtype=np.int64)
        self.dtype = dtype
        normed = [
            Trajectory(normalizer.apply(t.features), t.frame_rate, t.sequence_labels, t.frame_labels, t.agent_id, t.name)
            for t in dataset.trajectories
        ]
        self.dataset = Dataset(normed, dataset.feature_names, dataset.target_indices, dataset.hidden_indices, dataset.groups)
        self.full_inputs = [np.ascontiguousarray(t.features[:, self.input_indices], dtype=dtype) for t in normed]
        self.group_distances = [self._distances(g) for g in dataset.groups]

    def _distances(self, group) -> np.ndarray | None:
        if len(group) < 2:
            return None
        trajs = [self.source.trajectories[i] for i in group]
        cols = []
        for i, j in agent_pairs(len(group)):
            key = f"dist:{trajs[j].agent_id}"
            if key not in trajs[i].frame_labels:
                return None
            cols.append(np.asarray(trajs[i].frame_labels[key], dtype=np.float64))
        return np.stack(cols, axis=1) / self.normalizer.distance_scale

    def sample(self, batch_size: int, window_length: int, rng: np.random.Generator) -> PreparedBatch:
        raw = sample_batch(self.dataset, batch_size, window_length, rng)
        b, a, w, _ = raw.windows.shape
        flat = raw.windows.reshape(b * a, w, -1)
        hidden = flat[..., self.hidden_indices] if self.hidden_indices.size else None
        distances = None
        if a >= 2 and all(self.group_distances[g] is not None for g in raw.group_ids):
            distances = np.stack([self.group_distances[g][s : s + w] for g, s in zip(raw.group_ids, raw.starts)])
        tids = raw.trajectory_ids.reshape(-1)
        return PreparedBatch(
            inputs=np.ascontiguousarray(flat[..., self.input_indices], dtype=self.dtype),
            targets=flat[..., self.target_indices],
            hidden=hidden,
            distances=distances,
            agents=a,
            trajectory_ids=tids,
            starts=np.repeat(raw.starts, a),
            lengths=np.array([self.dataset.trajectories[i].num_frames for i in tids]),
        )

    def steps_per_epoch(self, batch_size: int, window_length: int) -> int:
        frames = sum(t.num_frames for t in self.dataset.trajectories) / self.dataset.agents_per_group
        return max(1, math.ceil(math.ceil(frames / window_length) / batch_size))


def model_config_for(dataset: Dataset, **overrides) -> BamsConfig:
    """Model config whose input/target/hidden sizes match ``dataset``."""
    kwargs = dict(input_dim=len(dataset.input_indices), num_targets=len(dataset.target_indices))
    if dataset.agents_per_group >= 2:
        kwargs.update(hidden_task="pair_distance")
    elif dataset.hidden_indices:
        kwargs.update(hidden_task="features", num_hidden=len(dataset.hidden_indices))
    kwargs.update(overrides)
    return BamsConfig(**kwargs)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model_config: BamsConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    adam: AdamState
    normalizer: Normalizer
    epoch: int
    step: int
    rng_state: dict
    dataset_meta: dict = field(default_factory=dict)
    extra_meta: dict = field(default_factory=dict)

    def build_model(self) -> BamsModel:
        dtype = np.dtype(self.train_config.dtype)
        model = BamsModel(self.model_config, dtype=dtype)
        model.load_state_arrays({f"param/{k}": v for k, v in self.params.items()})
        return model


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    for name in ckpt.params:
        if name in ckpt.adam.m:
            arrays[f"adam_m/{name}"] = ckpt.adam.m[name]
            arrays[f"adam_v/{name}"] = ckpt.adam.v[name]
    arrays.update(ckpt.normalizer.to_arrays())
    meta = {
        "version": CHECKPOINT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config.to_dict(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "adam_t": ckpt.adam.t,
        "rng_state": ckpt.rng_state,
        "dataset": ckpt.dataset_meta,
        "extra": ckpt.extra_meta,
    }
    write_tensors(path, arrays, meta)


def load_checkpoint(path: str | Path, expected_config: BamsConfig | None = None) -> Checkpoint:
    arrays, meta = read_tensors(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {meta.get('version')} is not supported (want {CHECKPOINT_VERSION})")
    model_config = BamsConfig.from_dict(meta["model_config"])
    if expected_config is not None:
        probe = BamsModel(expected_config)
        for name, tensor in probe.params.items():
            key = f"param/{name}"
            if key not in arrays:
                raise ValueError(f"{path}: tensor {name!r} missing from checkpoint")
            if arrays[key].shape != tensor.shape:
                raise ValueError(
                    f"{path}: tensor {name!r} has shape {arrays[key].shape}, config expects {tensor.shape}"
                )
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    adam = AdamState(
        m={k[len("adam_m/"):]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        v={k[len("adam_v/"):]: v for k, v in arrays.items() if k.startswith("adam_v/")},
        t=int(meta["adam_t"]),
    )
    known = {f.name for f in fields(TrainConfig)}
    train_config = TrainConfig(**{k: v for k, v in meta["train_config"].items() if k in known})
    return Checkpoint(
        model_config, train_config, params, adam, Normalizer.from_arrays(arrays),
        int(meta["epoch"]), int(meta["step"]), meta["rng_state"], meta.get("dataset", {}), meta.get("extra", {}),
    )


# ---------------------------------------------------------------- training loop


def format_log_record(step: int, epoch: int, bundle: LossBundle, lr: float) -> str:
    rec = {"step": step, "epoch": epoch, **bundle.as_record(), "lr": lr}
    return json.dumps({k: rec[k] for k in LOG_FIELDS})


def _clip(grads: dict[str, np.ndarray | None], max_norm: float) -> None:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            if g is not None:
                g *= scale


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[dict]
    model: BamsModel


def train(
    dataset: Dataset,
    model_config: BamsConfig,
    train_config: TrainConfig,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    max_steps: int | None = None,
    extra_meta: dict | None = None,
    on_step: Callable[[int, LossBundle], None] | None = None,
) -> TrainResult:
    """Train from scratch (or from ``resume``) and return the final checkpoint.

    With ``out_dir`` the JSONL log is written to ``out_dir/train_log.jsonl``
    and checkpoints to ``out_dir/checkpoint.mblt`` (plus per-epoch copies when
    ``checkpoint_every`` is set). ``max_steps`` caps the global step count;
    a run resumed from any checkpoint continues exactly where it stopped.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    min_window = model_config.max_receptive_field + model_config.horizon
    if train_config.window_length < min_window:
        raise ValueError(
            f"window_length {train_config.window_length} is shorter than receptive field + horizon ({min_window})"
        )
    check_window(dataset, train_config.window_length)
    dtype = np.dtype(train_config.dtype)

    if resume is None:
        init_seed, loop_seed = np.random.SeedSequence(train_config.seed).spawn(2)
        model = BamsModel(model_config, seed=np.random.default_rng(init_seed).integers(2**63), dtype=dtype)
        normalizer = Normalizer.fit(dataset)
        adam = AdamState()
        rng = np.random.default_rng(loop_seed)
        step = 0
    else:
        model = resume.build_model()
        normalizer = resume.normalizer
        adam = AdamState({k: v.copy() for k, v in resume.adam.m.items()}, {k: v.copy() for k, v in resume.adam.v.items()}, resume.adam.t)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        step = resume.step

    view = TrainingView(dataset, normalizer, dtype)
    steps_per_epoch = view.steps_per_epoch(train_config.batch_size, train_config.window_length)
    lrs = group_learning_rates(train_config)
    dataset_meta = {
        "feature_names": list(dataset.feature_names),
        "input_indices": [int(i) for i in dataset.input_indices],
        "target_indices": list(dataset.target_indices),
        "hidden_indices": list(dataset.hidden_indices),
        "agents_per_group": dataset.agents_per_group,
    }

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "a" if resume is not None else "w")

    def snapshot() -> Checkpoint:
        return Checkpoint(
            model_config, train_config,
            {k: p.value.copy() for k, p in model.params.items()},
            AdamState({k: v.copy() for k, v in adam.m.items()}, {k: v.copy() for k, v in adam.v.items()}, adam.t),
            normalizer, step // steps_per_epoch, step, rng.bit_generator.state, dataset_meta, dict(extra_meta or {}),
        )

    records: list[dict] = []
    limit = train_config.epochs * steps_per_epoch
    if max_steps is not None:
        limit = min(limit, max_steps)
    try:
        while step < limit:
            epoch = step // steps_per_epoch
            batch = view.sample(train_config.batch_size, train_config.window_length, rng)
            model.zero_grad()
            total, bundle = compute_losses(model, batch, view.full_inputs, rng, train_config.anchors_per_sequence)
            if not math.isfinite(bundle.total):
                if out is not None:
                    save_checkpoint(out / "diverged.mblt", snapshot())
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch}): {bundle}")
            backward(total)
            grads = {k: p.grad for k, p in model.params.items()}
            if train_config.grad_clip:
                _clip(grads, train_config.grad_clip)
            values = {k: p.value for k, p in model.params.items()}
            adam_step(values, grads, adam, lrs, train_config.beta1, train_config.beta2, train_config.adam_eps)
            line = format_log_record(step, epoch, bundle, train_config.base_lr)
            records.append(json.loads(line))
            if log_fh is not None:
                log_fh.write(line + "\n")
            if on_step is not None:
                on_step(step, bundle)
            step += 1
            every = train_config.checkpoint_every
            if out is not None and every and step % steps_per_epoch == 0 and (step // steps_per_epoch) % every == 0:
                save_checkpoint(out / f"checkpoint_epoch{step // steps_per_epoch:05d}.mblt", snapshot())
    finally:
        if log_fh is not None:
            log_fh.close()

    ckpt = snapshot()
    if out is not None:
        save_checkpoint(out / "checkpoint.mblt", ckpt)
    return TrainResult(ckpt, records, model)
