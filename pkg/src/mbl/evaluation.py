"""Frozen-embedding readouts: pooling, linear probes and timescale ablations."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression, Ridge

from mbl.data import Dataset, Normalizer

log = logging.getLogger(__name__)

DEFAULT_SLICES = {"recent_past": slice(0, 16), "short_term": slice(16, 48), "long_term": slice(48, 64)}
SUBSET_BRANCHES = {
    "full": ("recent_past", "short_term", "long_term"),
    "short_only": ("short_term",),
    "long_only": ("long_term",),
    "recent_only": ("recent_past",),
}
L2_PENALTY = 1e-4


# ---------------------------------------------------------------- metrics


def f1_macro(predictions, labels) -> float:
    """Unweighted mean of per-class F1 over classes seen in labels or predictions."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} predictions vs {labels.shape} labels")
    classes = np.union1d(predictions, labels)
    scores = []
    for c in classes:
        tp = np.sum((predictions == c) & (labels == c))
        fp = np.sum((predictions == c) & (labels != c))
        fn = np.sum((predictions != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores)) if scores else 0.0


def mse(predictions, labels) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} predictions vs {labels.shape} labels")
    return float(np.mean((predictions - labels) ** 2))


# ---------------------------------------------------------------- pooling


def pool_group(embeddings) -> np.ndarray:
    """Pool N agents' embeddings: concat(mean, max - min) over the agent axis 0.

    Accepts a list of equally shaped arrays or one array with agents first.
    """
    if isinstance(embeddings, np.ndarray):
        stack = embeddings
    else:
        shapes = {np.shape(e) for e in embeddings}
        if len(shapes) != 1:
            raise ValueError(f"agent embeddings have unequal shapes: {sorted(shapes)}")
        stack = np.stack([np.asarray(e) for e in embeddings])
    if stack.shape[0] < 1:
        raise ValueError("pool_group needs at least one agent")
    # sorting over agents first makes the float mean independent of agent order
    ordered = np.sort(stack, axis=0)
    return np.concatenate([ordered.mean(axis=0), ordered[-1] - ordered[0]], axis=-1)


# ---------------------------------------------------------------- probes


@dataclass(frozen=True)
class ProbeTask:
    """One labelled readout.

    ``level`` says where the label lives. ``readout`` says what the probe sees:
    ``"frame"`` probes every frame embedding (sequence labels are broadcast to
    frames), ``"mean"`` probes the per-sequence time-mean. ``"auto"`` uses the
    mean for sequence labels and frames for frame labels.
    """

    name: str
    level: str  # "frame" | "sequence"
    kind: str  # "categorical" | "real"
    label: str = ""  # label key; defaults to ``name``
    readout: str = "auto"

    def __post_init__(self):
        if self.level not in ("frame", "sequence"):
            raise ValueError(f"task {self.name!r}: level must be 'frame' or 'sequence'")
        if self.kind not in ("categorical", "real"):
            raise ValueError(f"task {self.name!r}: kind must be 'categorical' or 'real'")
        if self.readout not in ("auto", "frame", "mean"):
            raise ValueError(f"task {self.name!r}: readout must be 'auto', 'frame' or 'mean'")
        if self.level == "frame" and self.readout == "mean":
            raise ValueError(f"task {self.name!r}: frame labels cannot use a time-mean readout")

    @property
    def per_frame(self) -> bool:
        return self.level == "frame" or self.readout == "frame"

    @property
    def label_key(self) -> str:
        return self.label or self.name

    @property
    def metric(self) -> str:
        return "f1_macro" if self.kind == "categorical" else "mse"


SYNTHETIC_TASKS = (
    ProbeTask("global_class", "sequence", "categorical", readout="frame"),
    ProbeTask("regime_class", "frame", "categorical"),
    ProbeTask("global_class_mean", "sequence", "categorical", label="global_class", readout="mean"),
)


def _standardize(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    return (train - mu) / sd, (test - mu) / sd


def linear_probe(train_x, train_y, test_x, test_y, kind: str = "categorical", seed: int = 0, l2: float = L2_PENALTY) -> float:
    """Fit a linear readout on frozen features and score it on the test fold.

    Categorical labels: multinomial logistic regression minimising mean
    cross-entropy + l2/2 * |W|^2, scored by macro-F1. Real labels: ridge
    regression with the same penalty, scored by MSE.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    test_y = np.asarray(test_y)
    xs, xt = _standardize(train_x, test_x)
    n = xs.shape[0]
    if kind == "categorical":
        if np.unique(train_y).size < 2:
            raise ValueError("linear_probe: training fold contains a single class")
        clf = LogisticRegression(C=1.0 / (l2 * n), max_iter=5000, tol=1e-8, random_state=seed)
        clf.fit(xs, train_y)
        return f1_macro(clf.predict(xt), test_y)
    if kind == "real":
        reg = Ridge(alpha=l2 * n)
        reg.fit(xs, train_y.astype(np.float64))
        return mse(reg.predict(xt), test_y)
    raise ValueError(f"unknown probe kind {kind!r}")


# ---------------------------------------------------------------- embeddings


@dataclass
class EmbeddedSplit:
    """Per-group frame embeddings plus the labels needed for probing.

    ``frames[i]`` is (T_i, d). For multi-agent groups each agent's subset slice
    is pooled, so d doubles.
    """

    per_agent: list[np.ndarray]  # (A, T, 64) per group
    sequence_labels: list[dict]
    frame_labels: list[dict]

    def features(self, columns: Sequence[int]) -> list[np.ndarray]:
        cols = np.asarray(columns)
        out = []
        for agents in self.per_agent:
            sl = agents[..., cols]
            out.append(sl[0] if sl.shape[0] == 1 else pool_group(sl))
        return out


def embed_split(model, normalizer: Normalizer, dataset: Dataset) -> EmbeddedSplit:
    inputs = np.array(dataset.input_indices)
    per_group, seq_labels, frame_labels = [], [], []
    for group in dataset.groups:
        agents = []
        for ti in group:
            traj = dataset.trajectories[ti]
            agents.append(model.embed(normalizer.apply(traj.features)[:, inputs]).z)
        length = min(a.shape[0] for a in agents)
        per_group.append(np.stack([a[:length] for a in agents]))
        first = dataset.trajectories[group[0]]
        seq_labels.append(dict(first.sequence_labels))
        frame_labels.append({k: np.asarray(v)[:length] for k, v in first.frame_labels.items()})
    return EmbeddedSplit(per_group, seq_labels, frame_labels)


def subset_columns(subset: str, slices: dict[str, slice] | None = None) -> list[int]:
    slices = slices or DEFAULT_SLICES
    if subset not in SUBSET_BRANCHES:
        raise ValueError(f"unknown embedding subset {subset!r}; choose from {sorted(SUBSET_BRANCHES)}")
    cols: list[int] = []
    for branch in SUBSET_BRANCHES[subset]:
        s = slices[branch]
        cols.extend(range(s.start, s.stop))
    return cols


def _task_arrays(split: EmbeddedSplit, feats: list[np.ndarray], task: ProbeTask, frame_stride: int):
    if not task.per_frame:
        x = np.stack([f.mean(axis=0) for f in feats])
        y = np.array([labels[task.label_key] for labels in split.sequence_labels])
        return x, y
    xs, ys = [], []
    for f, seq, frame in zip(feats, split.sequence_labels, split.frame_labels):
        xs.append(f[::frame_stride])
        if task.level == "sequence":
            ys.append(np.full(len(xs[-1]), seq[task.label_key]))
        else:
            ys.append(np.asarray(frame[task.label_key])[::frame_stride])
    return np.concatenate(xs), np.concatenate(ys)


def has_label(split: EmbeddedSplit, task: ProbeTask) -> bool:
    source = split.sequence_labels if task.level == "sequence" else split.frame_labels
    return bool(source) and all(task.label_key in labels for labels in source)


# ---------------------------------------------------------------- reports


@dataclass
class ProbeReport:
    rows: list[dict] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    CSV_COLUMNS = ("task", "level", "subset", "metric", "score", "rel_change_pct")

    def score(self, task: str, subset: str) -> float:
        for row in self.rows:
            if row["task"] == task and row["subset"] == subset:
                return row["score"]
        raise KeyError(f"no score for task {task!r}, subset {subset!r}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: row[k] for k in self.CSV_COLUMNS})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"rows": self.rows, "skipped": self.skipped, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeReport":
        return cls(list(d.get("rows", [])), list(d.get("skipped", [])), dict(d.get("meta", {})))

    def format_table(self) -> str:
        lines = [f"{'task':<20}{'level':<10}{'subset':<13}{'metric':<10}{'score':>9}{'rel %':>9}"]
        for row in self.rows:
            rel = "" if row["rel_change_pct"] is None else f"{row['rel_change_pct']:+.1f}"
            lines.append(
                f"{row['task']:<20}{row['level']:<10}{row['subset']:<13}{row['metric']:<10}{row['score']:>9.4f}{rel:>9}"
            )
        for name in self.skipped:
            lines.append(f"{name:<20}(skipped: unknown task or missing label)")
        return "\n".join(lines)

    def write(self, out_dir: str | Path, stem: str = "report") -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out_dir / f"{stem}.csv", "json": out_dir / f"{stem}.json", "txt": out_dir / f"{stem}.txt"}
        paths["csv"].write_text(self.to_csv())
        paths["json"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        paths["txt"].write_text(self.format_table() + "\n")
        return paths


def probe_splits(
    train: EmbeddedSplit,
    test: EmbeddedSplit,
    tasks: Iterable[ProbeTask],
    subsets: Sequence[str] = ("full", "short_only", "long_only", "recent_only"),
    slices: dict[str, slice] | None = None,
    seed: int = 0,
    frame_stride: int = 1,
    l2: float = L2_PENALTY,
) -> ProbeReport:
    """Probe every task on every embedding subset; relative change is vs ``full``."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("no tasks")
    report = ProbeReport()
    for task in tasks:
        if not (has_label(train, task) and has_label(test, task)):
            report.skipped.append(task.name)
            continue
        scores = {}
        for subset in subsets:
            cols = subset_columns(subset, slices)
            xtr, ytr = _task_arrays(train, train.features(cols), task, frame_stride)
            xte, yte = _task_arrays(test, test.features(cols), task, frame_stride)
            scores[subset] = linear_probe(xtr, ytr, xte, yte, task.kind, seed, l2)
        base = scores.get("full")
        for subset, score in scores.items():
            rel = None if base is None else (0.0 if subset == "full" else (100.0 * (score - base) / base if base else None))
            report.rows.append(
                {"task": task.name, "level": task.level, "subset": subset, "metric": task.metric, "score": float(score), "rel_change_pct": rel}
            )
    return report


def ablation_report(
    model,
    normalizer: Normalizer,
    train: Dataset,
    test: Dataset,
    tasks: Iterable[ProbeTask] = SYNTHETIC_TASKS,
    seed: int = 0,
    frame_stride: int = 1,
) -> ProbeReport:
    """Embed both splits with a trained model and probe each timescale subset."""
    slices = model.config.branch_slices
    report = probe_splits(
        embed_split(model, normalizer, train),
        embed_split(model, normalizer, test),
        tasks,
        slices=slices,
        seed=seed,
        frame_stride=frame_stride,
    )
    return report


# ---------------------------------------------------------------- orderings


def timescale_orderings(report: ProbeReport) -> dict[str, tuple[bool, str]]:
    """Check the timescale-disentanglement orderings on the synthetic tasks."""
    g_long = report.score("global_class", "long_only")
    g_short = report.score("global_class", "short_only")
    r_full = report.score("regime_class", "full")
    r_best = max(report.score("regime_class", "short_only"), report.score("regime_class", "long_only"))
    return {
        "a_global_long_beats_short": (g_long >= g_short + 0.05, f"{g_long:.3f} >= {g_short:.3f} + 0.05"),
        "b_regime_full_vs_parts": (r_full >= r_best - 0.02, f"{r_full:.3f} >= {r_best:.3f} - 0.02"),
        "c_global_long_high": (g_long >= 0.90, f"{g_long:.3f} >= 0.90"),
        "d_regime_full_above_chance": (r_full >= 0.2 + 0.25, f"{r_full:.3f} >= 0.45"),
    }


