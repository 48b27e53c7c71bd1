"""Trajectories, datasets, pose feature extraction, splitting and window sampling.

All feature matrices are frame-major ``(time, channel)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


@dataclass
class Trajectory:
    features: np.ndarray
    frame_rate: float
    sequence_labels: dict = field(default_factory=dict)
    frame_labels: dict = field(default_factory=dict)
    agent_id: str = "0"
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError(f"features must be a non-empty (T, D) matrix, got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"trajectory {self.name!r} contains non-finite feature values")
        if not self.frame_rate > 0:
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")
        labels = {}
        for key, vec in self.frame_labels.items():
            vec = np.asarray(vec)
            if vec.shape != (self.num_frames,):
                raise ValueError(
                    f"frame label {key!r} has shape {vec.shape}, expected ({self.num_frames},)"
                )
            labels[key] = vec
        self.frame_labels = labels

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def num_channels(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Dataset:
    """A set of trajectories sharing one channel layout.

    ``groups`` lists trajectories recorded together (e.g. the three mice of
    one clip); single-agent data uses one group per trajectory. Members of a
    group carry pairwise distances as frame labels named ``dist:<agent_id>``.
    """

    trajectories: tuple[Trajectory, ...]
    feature_names: tuple[str, ...]
    target_indices: tuple[int, ...] = ()
    hidden_indices: tuple[int, ...] = ()
    groups: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "target_indices", tuple(int(i) for i in self.target_indices))
        object.__setattr__(self, "hidden_indices", tuple(int(i) for i in self.hidden_indices))
        d = len(self.feature_names)
        for traj in self.trajectories:
            if traj.num_channels != d:
                raise ValueError(
                    f"trajectory {traj.name!r} has {traj.num_channels} channels, dataset declares {d}"
                )
        overlap = set(self.target_indices) & set(self.hidden_indices)
        if overlap:
            raise ValueError(f"channels {sorted(overlap)} are both targets and hidden")
        for idx in (*self.target_indices, *self.hidden_indices):
            if not 0 <= idx < d:
                raise ValueError(f"channel index {idx} out of range for {d} channels")
        if not self.groups:
            groups = tuple((i,) for i in range(len(self.trajectories)))
        else:
            groups = tuple(tuple(int(i) for i in g) for g in self.groups)
            flat = sorted(i for g in groups for i in g)
            if flat != list(range(len(self.trajectories))):
                raise ValueError("groups must partition the trajectory indices")
            if len({len(g) for g in groups}) > 1:
                raise ValueError("all groups must have the same number of agents")
        object.__setattr__(self, "groups", groups)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def num_channels(self) -> int:
        return len(self.feature_names)

    @property
    def agents_per_group(self) -> int:
        return len(self.groups[0]) if self.groups else 1

    @property
    def input_indices(self) -> tuple[int, ...]:
        """Channels the encoder is allowed to see (everything not hidden)."""
        hidden = set(self.hidden_indices)
        return tuple(i for i in range(self.num_channels) if i not in hidden)

    def subset(self, group_indices: Sequence[int]) -> "Dataset":
        trajs: list[Trajectory] = []
        groups = []
        for gi in group_indices:
            members = []
            for ti in self.groups[gi]:
                members.append(len(trajs))
                trajs.append(self.trajectories[ti])
            groups.append(tuple(members))
        return Dataset(trajs, self.feature_names, self.target_indices, self.hidden_indices, groups)


# ---------------------------------------------------------------- pose features


@dataclass(frozen=True)
class PoseRoles:
    """Which keypoints play which role in the feature extractor.

    ``joints`` holds (a, b, c) triples; the angle is measured at ``b``
    between the segments to ``a`` and ``c``.
    """

    head: int
    body_center: int
    joints: tuple[tuple[int, int, int], ...] = ()

    @classmethod
    def from_dict(cls, d: Mapping) -> "PoseRoles":
        missing = [k for k in ("head", "body_center") if k not in d]
        if missing:
            raise KeyError(f"keypoint role(s) missing from config: {missing}")
        return cls(int(d["head"]), int(d["body_center"]), tuple(tuple(int(v) for v in j) for j in d.get("joints", ())))

    def to_dict(self) -> dict:
        return {"head": self.head, "body_center": self.body_center, "joints": [list(j) for j in self.joints]}

    def feature_names(self) -> list[str]:
        names = ["heading_sin", "heading_cos", "heading_rate", "speed"]
        for j in range(len(self.joints)):
            names += [f"joint{j}_angle", f"joint{j}_rate"]
        return names


def _rate(x: np.ndarray, frame_rate: float) -> np.ndarray:
    """Per-frame derivative; frame 0 reuses the first forward difference."""
    d = np.empty_like(x)
    d[1:] = x[1:] - x[:-1]
    d[0] = d[1]
    return d * frame_rate


def joint_angle(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Angle at ``b`` between b->a and b->c, in [0, pi]."""
    u = a - b
    v = c - b
    cross = u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]
    dot = (u * v).sum(axis=-1)
    return np.arctan2(np.abs(cross), dot)


def compute_pose_features(frames, frame_rate: float, roles: PoseRoles, **traj_kwargs) -> Trajectory:
    """Egocentric features from a (T, K, 2) keypoint array.

    Produces heading as (sin, cos), heading rate, centroid speed, and per-joint
    angle and angular rate. No channel depends on absolute position.
    """
    pts = np.asarray(frames, dtype=np.float64)
    if pts.ndim != 3 or pts.shape[-1] != 2:
        raise ValueError(f"keypoints must have shape (T, K, 2), got {pts.shape}")
    if pts.shape[0] < 2:
        raise ValueError("insufficient frames: pose features need at least 2 frames")
    if not np.all(np.isfinite(pts)):
        raise ValueError("keypoints contain non-finite values")
    k = pts.shape[1]
    used = [roles.head, roles.body_center, *(i for j in roles.joints for i in j)]
    bad = [i for i in used if not 0 <= i < k]
    if bad:
        raise KeyError(f"keypoint role refers to missing keypoint(s) {bad}; recording has {k} keypoints")

    center = pts[:, roles.body_center]
    head_vec = pts[:, roles.head] - center
    heading = np.arctan2(head_vec[:, 1], head_vec[:, 0])
    unwrapped = np.unwrap(heading)
    velocity = _rate(center, frame_rate)
    cols = [np.sin(heading), np.cos(heading), _rate(unwrapped, frame_rate), np.linalg.norm(velocity, axis=1)]
    for a, b, c in roles.joints:
        ang = joint_angle(pts[:, a], pts[:, b], pts[:, c])
        cols += [ang, _rate(ang, frame_rate)]
    return Trajectory(np.stack(cols, axis=1), frame_rate, **traj_kwargs)


def pairwise_center_distances(keypoints: Sequence[np.ndarray], body_center: int) -> dict[tuple[int, int], np.ndarray]:
    centers = [np.asarray(kp, dtype=np.float64)[:, body_center] for kp in keypoints]
    out = {}
    for i in range(len(centers)):
        for j in range(i + 1, len(centers)):
            out[(i, j)] = np.linalg.norm(centers[i] - centers[j], axis=1)
    return out


def group_from_keypoints(
    keypoints: Sequence[np.ndarray],
    frame_rate: float,
    roles: PoseRoles,
    agent_ids: Sequence[str],
    name: str = "group",
    sequence_labels: Mapping | None = None,
) -> list[Trajectory]:
    """Features for each co-recorded agent plus hidden pairwise distances."""
    dists = pairwise_center_distances(keypoints, roles.body_center)
    trajs = []
    for i, (kp, aid) in enumerate(zip(keypoints, agent_ids)):
        labels = {}
        for (a, b), d in dists.items():
            if i in (a, b):
                other = agent_ids[b if a == i else a]
                labels[f"dist:{other}"] = d
        trajs.append(
            compute_pose_features(
                kp, frame_rate, roles,
                sequence_labels=dict(sequence_labels or {}), frame_labels=labels,
                agent_id=str(aid), name=f"{name}_{aid}",
            )
        )
    return trajs


# ---------------------------------------------------------------- splitting & sampling


def split_indices(num_groups: int, train_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Sorted train / test group indices; train gets ceil(N * fraction) groups."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if num_groups < 2:
        raise ValueError(f"cannot split a dataset with {num_groups} sequence(s)")
    n_train = min(math.ceil(num_groups * train_fraction), num_groups - 1)
    perm = np.random.default_rng(seed).permutation(num_groups)
    return sorted(int(i) for i in perm[:n_train]), sorted(int(i) for i in perm[n_train:])


def split_dataset(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Sequence-level (group-level) split; see :func:`split_indices`."""
    train, test = split_indices(len(dataset.groups), train_fraction, seed)
    return dataset.subset(train), dataset.subset(test)


@dataclass
class Batch:
    """Aligned windows for a batch of groups.

    ``windows`` is (batch, agents, window, channels) with every channel of the
    dataset (hidden ones included); ``trajectory_ids`` is (batch, agents).
    """

    windows: np.ndarray
    trajectory_ids: np.ndarray
    group_ids: np.ndarray
    starts: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.windows.shape[0]

    @property
    def window_length(self) -> int:
        return self.windows.shape[2]


def check_window(dataset: Dataset, window_length: int) -> None:
    for traj in dataset.trajectories:
        if window_length > traj.num_frames:
            raise ValueError(
                f"window_length {window_length} exceeds sequence {traj.name or traj.agent_id!r} "
                f"with only {traj.num_frames} frames"
            )


def sample_batch(dataset: Dataset, batch_size: int, window_length: int, rng: np.random.Generator) -> Batch:
    """Uniformly pick groups, then a uniformly placed window inside each."""
    if window_length < 1 or batch_size < 1:
        raise ValueError("batch_size and window_length must be positive")
    check_window(dataset, window_length)
    a = dataset.agents_per_group
    windows = np.empty((batch_size, a, window_length, dataset.num_channels))
    tids = np.empty((batch_size, a), dtype=np.int64)
    gids = rng.integers(0, len(dataset.groups), size=batch_size)
    starts = np.empty(batch_size, dtype=np.int64)
    for b, g in enumerate(gids):
        members = dataset.groups[g]
        length = min(dataset.trajectories[t].num_frames for t in members)
        start = int(rng.integers(0, length - window_length + 1))
        starts[b] = start
        for j, t in enumerate(members):
            tids[b, j] = t
            windows[b, j] = dataset.trajectories[t].features[start : start + window_length]
    return Batch(windows, tids, gids, starts)


# ---------------------------------------------------------------- normalisation


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    distance_scale: float = 1.0

    @classmethod
    def fit(cls, dataset: Dataset) -> "Normalizer":
        stacked = np.concatenate([t.features for t in dataset.trajectories], axis=0)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        dists = [v for t in dataset.trajectories for k, v in t.frame_labels.items() if k.startswith("dist:")]
        scale = float(np.concatenate(dists).mean()) if dists else 1.0
        return cls(mean, std, scale if scale > 0 else 1.0)

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {"norm/mean": self.mean, "norm/std": self.std, "norm/distance_scale": np.array([self.distance_scale])}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "Normalizer":
        return cls(arrays["norm/mean"].copy(), arrays["norm/std"].copy(), float(arrays["norm/distance_scale"][0]))


# ---------------------------------------------------------------- file I/O


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def write_trajectory(directory: str | Path, traj: Trajectory, feature_names: Sequence[str]) -> None:
    directory = Path(directory)
    name = traj.name or traj.agent_id
    header = ",".join(feature_names)
    np.savetxt(directory / f"{name}.csv", traj.features, delimiter=",", header=header, comments="", fmt="%.17g")
    side = {
        "frame_rate": traj.frame_rate,
        "agent_id": traj.agent_id,
        "sequence_labels": {k: _jsonable(v) for k, v in traj.sequence_labels.items()},
        "frame_labels": {k: _jsonable(v) for k, v in traj.frame_labels.items()},
    }
    (directory / f"{name}.json").write_text(json.dumps(side))


def read_trajectory(csv_path: str | Path) -> tuple[Trajectory, list[str]]:
    csv_path = Path(csv_path)
    with open(csv_path) as fh:
        names = fh.readline().strip().split(",")
    features = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    side = json.loads(csv_path.with_suffix(".json").read_text())
    traj = Trajectory(
        features,
        float(side["frame_rate"]),
        sequence_labels=side.get("sequence_labels", {}),
        frame_labels={k: np.asarray(v) for k, v in side.get("frame_labels", {}).items()},
        agent_id=str(side.get("agent_id", csv_path.stem)),
        name=csv_path.stem,
    )
    return traj, names


def save_dataset(directory: str | Path, dataset: Dataset, extra: Mapping | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, traj in enumerate(dataset.trajectories):
        if not traj.name:
            traj.name = f"seq{i:04d}"
        write_trajectory(directory, traj, dataset.feature_names)
        names.append(traj.name)
    manifest = {
        "feature_names": list(dataset.feature_names),
        "target_indices": list(dataset.target_indices),
        "hidden_indices": list(dataset.hidden_indices),
        "sequences": names,
        "groups": [list(g) for g in dataset.groups],
    }
    manifest.update(extra or {})
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    trajs = []
    for name in manifest["sequences"]:
        traj, cols = read_trajectory(directory / f"{name}.csv")
        if cols != manifest["feature_names"]:
            raise ValueError(f"{name}.csv header does not match manifest feature_names")
        trajs.append(traj)
    return Dataset(
        trajs,
        manifest["feature_names"],
        manifest.get("target_indices", []),
        manifest.get("hidden_indices", []),
        [tuple(g) for g in manifest.get("groups", [])],
    )


def read_keypoints_csv(path: str | Path) -> np.ndarray:
    """Read ``kp0_x, kp0_y, kp1_x, ...`` columns into a (T, K, 2) array."""
    with open(path) as fh:
        cols = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    k = len(cols) // 2
    out = np.empty((data.shape[0], k, 2))
    for i in range(k):
        try:
            out[:, i, 0] = data[:, cols.index(f"kp{i}_x")]
            out[:, i, 1] = data[:, cols.index(f"kp{i}_y")]
        except ValueError:
            raise ValueError(f"{path}: expected columns kp{i}_x and kp{i}_y") from None
    return out
