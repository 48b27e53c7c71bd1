"""Training losses: future actions, hidden targets and per-timescale bootstrapping.

The total is ``l_future + l_hidden + alpha * (l_short + l_long)``. All terms use
mean reduction so ``alpha`` does not depend on batch size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from mbl.model import BOOTSTRAP_BRANCHES, BamsModel, no_grad
from mbl.nn import autodiff as ad
from mbl.nn.autodiff import Tensor

NORM_EPS = 1e-8


@dataclass
class LossBundle:
    l_future: float
    l_hidden: float
    l_short: float
    l_long: float
    total: float
    sample_counts: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        d = asdict(self)
        d.pop("sample_counts")
        return d


@dataclass(frozen=True)
class DeltaRule:
    """How the bootstrap target frame is picked for one branch.

    ``short``: uniform over t-delta..t+delta without t, clipped to the sequence.
    ``long``: uniform over every other frame of the sequence.
    """

    branch: str
    delta: int = 5

    def __post_init__(self):
        if self.branch not in BOOTSTRAP_BRANCHES:
            raise ValueError(f"DeltaRule branch must be 'short' or 'long', got {self.branch!r}")
        if self.delta < 1:
            raise ValueError(f"delta must be >= 1, got {self.delta}")

    def candidates(self, t: int, length: int) -> np.ndarray:
        lo, hi = self._bounds(np.asarray(t), np.asarray(length))
        cand = np.arange(lo, hi + 1)
        return cand[cand != t]

    def _bounds(self, t: np.ndarray, length: np.ndarray):
        if self.branch == "short":
            return np.maximum(0, t - self.delta), np.minimum(length - 1, t + self.delta)
        return np.zeros_like(t), length - 1


def sample_delta(rule: DeltaRule, t, length, rng: np.random.Generator) -> np.ndarray:
    """Draw target frames ``t + delta`` (vectorised over ``t`` and ``length``)."""
    t = np.asarray(t, dtype=np.int64)
    length = np.broadcast_to(np.asarray(length, dtype=np.int64), t.shape)
    if np.any(length < 2):
        raise ValueError("sample_delta needs sequences of at least 2 frames (empty candidate set)")
    if np.any((t < 0) | (t >= length)):
        raise ValueError("anchor frame outside its sequence")
    lo, hi = rule._bounds(t, length)
    count = hi - lo  # candidates in [lo, hi] minus the anchor itself
    u = np.floor(rng.random(t.shape) * count).astype(np.int64)
    out = lo + u
    return np.where(out >= t, out + 1, out)


# ---------------------------------------------------------------- loss terms


def future_action_loss(model: BamsModel, z_anchor: Tensor, targets: np.ndarray) -> Tensor:
    """Mean squared error of g(z_t) against the next L frames of target channels."""
    targets = np.asarray(targets)
    if targets.shape[0] == 0:
        raise ValueError("horizon exceeds window: no anchor has L future frames")
    pred = model.predict_future(z_anchor)
    if pred.shape != targets.shape:
        raise ValueError(f"future targets have shape {targets.shape}, head produces {pred.shape}")
    return ad.mean(ad.square(ad.sub(pred, targets)))


def hidden_feature_loss(model: BamsModel, z_anchor: Tensor, hidden: np.ndarray) -> Tensor:
    return ad.mean(ad.square(ad.sub(model.predict_hidden(z_anchor), np.asarray(hidden))))


def agent_pairs(num_agents: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(num_agents) for j in range(i + 1, num_agents)]


def hidden_distance_loss(model: BamsModel, z_agents: Sequence[Tensor], distances: np.ndarray) -> Tensor | None:
    """Mean over frames and unordered agent pairs of (h(z_i, z_j) - d_ij)^2.

    ``distances`` is (M, n_pairs) in :func:`agent_pairs` order. Returns None
    with fewer than two agents.
    """
    pairs = agent_pairs(len(z_agents))
    if not pairs:
        return None
    distances = np.asarray(distances)
    if distances.shape[-1] != len(pairs):
        raise ValueError(f"expected {len(pairs)} distance columns, got {distances.shape[-1]}")
    terms = []
    for k, (i, j) in enumerate(pairs):
        pred = model.predict_pair_distance(z_agents[i], z_agents[j])
        terms.append(ad.mean(ad.square(ad.sub(pred, distances[..., k]))))
    return ad.mul(ad.sum_(ad.concat([ad.reshape(t, (1,)) for t in terms], axis=0)), 1.0 / len(terms))


def latent_predictive_loss(model: BamsModel, branch: str, z_anchor, z_target) -> Tensor:
    """|| q(z_t)/|q(z_t)| - sg(z_tgt/|z_tgt|) ||^2, averaged over anchors."""
    if branch not in BOOTSTRAP_BRANCHES:
        raise ValueError(f"no latent predictive loss for branch {branch!r}")
    pred = ad.l2_normalize(model.bootstrap_predict(branch, z_anchor), NORM_EPS)
    target = ad.l2_normalize(ad.stop_gradient(ad.as_tensor(z_target)), NORM_EPS)
    return ad.mean(ad.sum_(ad.square(ad.sub(pred, target)), axis=-1))


def total_loss(l_future: float, l_hidden: float, l_short: float, l_long: float, alpha: float) -> LossBundle:
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    total = (l_future + l_hidden) + alpha * (l_short + l_long)
    return LossBundle(l_future, l_hidden, l_short, l_long, total)


# ---------------------------------------------------------------- batch pipeline


@dataclass
class PreparedBatch:
    """Normalised windows ready for the loss pipeline.

    Rows are (group, agent) pairs flattened group-major, so row ``b * A + a``
    is agent ``a`` of group ``b``.
    """

    inputs: np.ndarray  # (B*A, W, D_in)
    targets: np.ndarray  # (B*A, W, n_targets)
    hidden: np.ndarray | None  # (B*A, W, n_hidden)
    distances: np.ndarray | None  # (B, W, n_pairs)
    agents: int
    trajectory_ids: np.ndarray  # (B*A,)
    starts: np.ndarray  # (B*A,)
    lengths: np.ndarray  # (B*A,)


def sample_anchors(batch: PreparedBatch, horizon: int, warmup: int, per_sequence: int, rng: np.random.Generator):
    """Anchor positions inside each window, shared by all agents of a group.

    Windows that do not start at frame 0 skip the first ``warmup`` positions
    so every anchor sees its full receptive field of real frames.
    """
    n_groups = batch.inputs.shape[0] // batch.agents
    w = batch.inputs.shape[1]
    hi = w - 1 - horizon
    rows, times = [], []
    for b in range(n_groups):
        start = batch.starts[b * batch.agents]
        lo = 0 if start == 0 else min(warmup, hi)
        if hi < lo or hi < 0:
            continue
        pos = rng.integers(lo, hi + 1, size=per_sequence)
        for a in range(batch.agents):
            rows.append(np.full(per_sequence, b * batch.agents + a))
            times.append(pos)
    if not rows:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(rows), np.concatenate(times)


def full_sequence_embeddings(model: BamsModel, full_inputs: Sequence[np.ndarray], ids, branch: str) -> dict[int, np.ndarray]:
    """Constant (no-graph) embeddings of whole sequences for bootstrap targets."""
    by_length: dict[int, list[int]] = {}
    for tid in sorted(set(int(i) for i in ids)):
        by_length.setdefault(full_inputs[tid].shape[0], []).append(tid)
    out = {}
    with no_grad(model):
        for tids in by_length.values():
            z = model.encode_branch(np.stack([full_inputs[t] for t in tids]), branch).value
            out.update(zip(tids, z))
    return out


def _bootstrap_targets(model, branch, window_z, batch, rows, tgt_t, full_inputs) -> np.ndarray:
    """Embedding values at the target frames.

    A frame inside the window whose whole receptive field is inside the window
    too (or the window starts the sequence) has the same embedding as in a
    whole-sequence pass, so it is read from the window. Other frames get a
    whole-sequence pass.
    """
    rf = model.config.encoder(branch).receptive_field
    starts = batch.starts[rows]
    pos = tgt_t - starts
    w = window_z.shape[1]
    inside = (pos >= 0) & (pos < w) & ((pos >= rf - 1) | (starts == 0))
    target = np.empty((rows.size, window_z.shape[2]), dtype=window_z.dtype)
    target[inside] = window_z[rows[inside], pos[inside]]
    if not np.all(inside):
        out = ~inside
        tids = batch.trajectory_ids[rows[out]]
        emb = full_sequence_embeddings(model, full_inputs, tids, branch)
        target[out] = np.stack([emb[int(i)][int(t)] for i, t in zip(tids, tgt_t[out])])
    return target


def compute_losses(
    model: BamsModel,
    batch: PreparedBatch,
    full_inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    anchors_per_sequence: int = 64,
) -> tuple[Tensor, LossBundle]:
    """Forward pass over a batch; returns the differentiable total and its parts."""
    cfg = model.config
    horizon = cfg.horizon
    rows, times = sample_anchors(batch, horizon, cfg.max_receptive_field - 1, anchors_per_sequence, rng)
    if rows.size == 0:
        raise ValueError("horizon exceeds window: no anchor has L future frames")

    branches = model.encode(batch.inputs)
    z = model.concat(branches)
    z_anchor = ad.gather_frames(z, rows, times)

    offsets = np.arange(1, horizon + 1)
    fut = batch.targets[rows[:, None], times[:, None] + offsets[None, :]]  # (M, L, n_targets)
    l_future = future_action_loss(model, z_anchor, fut)
    counts = {"future": int(rows.size)}

    l_hidden = None
    if cfg.hidden_task == "features" and batch.hidden is not None and batch.hidden.shape[-1] > 0:
        l_hidden = hidden_feature_loss(model, z_anchor, batch.hidden[rows, times])
        counts["hidden"] = int(rows.size)
    elif cfg.hidden_task == "pair_distance" and batch.agents >= 2 and batch.distances is not None:
        a = batch.agents
        per_agent = [ad.gather_frames(z, rows[rows % a == k], times[rows % a == k]) for k in range(a)]
        groups = rows[rows % a == 0] // a
        d = batch.distances[groups, times[rows % a == 0]]
        l_hidden = hidden_distance_loss(model, per_agent, d)
        counts["hidden"] = int(groups.size * len(agent_pairs(a)))
    else:
        counts["hidden"] = 0

    latent = {}
    abs_t = batch.starts[rows] + times
    for tag, branch in BOOTSTRAP_BRANCHES.items():
        rule = DeltaRule(tag, cfg.delta)
        tgt_t = sample_delta(rule, abs_t, batch.lengths[rows], rng)
        target = _bootstrap_targets(model, branch, branches[branch].value, batch, rows, tgt_t, full_inputs)
        z_b = ad.gather_frames(branches[branch], rows, times)
        latent[tag] = latent_predictive_loss(model, tag, z_b, target)
        counts[tag] = int(rows.size)

    pretext = l_future if l_hidden is None else ad.add(l_future, l_hidden)
    total = ad.add(pretext, ad.mul(ad.add(latent["short"], latent["long"]), cfg.alpha))
    bundle = LossBundle(
        float(l_future.value),
        0.0 if l_hidden is None else float(l_hidden.value),
        float(latent["short"].value),
        float(latent["long"].value),
        float(total.value),
        counts,
    )
    return total, bundle
