"""Surrogate multi-timescale behavior data.

Every sequence belongs to one global class (a morphology-like factor that is
constant for the whole sequence) and walks through a schedule of regimes
(terrain-like segments). Channel ``c`` at frame ``t`` is::

    A[g, r, c] * sin(2*pi * f[g, r, c] * t / fps + phi[g, c]) + drift[g, c] + noise

The tables are drawn once from ``config.seed``. Within each channel the regime
frequencies sit on a geometric ladder with ratio >= 1.25, so any two regimes
differ by at least 20 % in frequency. The global class rescales all
frequencies and amplitudes of a channel by a small amount and adds a small
offset, so it is present in every frame but hard to read from a short window.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from mbl.data import Dataset, Trajectory

MIN_REGIME_RATIO = 1.25


@dataclass
class GeneratorConfig:
    num_sequences: int = 76
    frames_per_sequence: int = 1800
    frame_rate: float = 30.0
    num_global_classes: int = 2
    num_regime_classes: int = 5
    segment_length_range: tuple[int, int] = (150, 450)
    noise_std: float = 0.25
    num_channels: int = 12
    seed: int = 0
    # relative size of the per-class frequency / amplitude change, and the offset scale
    global_frequency_shift: float = 0.04
    global_amplitude_shift: float = 0.08
    global_drift_scale: float = 0.1
    target_indices: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    hidden_indices: tuple[int, ...] = ()

    def __post_init__(self):
        self.segment_length_range = tuple(int(v) for v in self.segment_length_range)
        self.target_indices = tuple(self.target_indices)
        self.hidden_indices = tuple(self.hidden_indices)
        lo, hi = self.segment_length_range
        if lo < 1 or hi < lo:
            raise ValueError(f"segment_length_range must satisfy 1 <= min <= max, got {self.segment_length_range}")
        if self.num_channels < 2:
            raise ValueError("num_channels must be >= 2")
        if self.num_global_classes < 2 or self.num_regime_classes < 2:
            raise ValueError("need at least 2 global classes and 2 regime classes")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["segment_length_range"] = list(self.segment_length_range)
        d["target_indices"] = list(self.target_indices)
        d["hidden_indices"] = list(self.hidden_indices)
        return d


@dataclass
class GeneratorTables:
    """Per-(global, regime, channel) amplitudes and frequencies (Hz)."""

    amplitude: np.ndarray  # (G, R, C)
    frequency: np.ndarray  # (G, R, C)
    phase: np.ndarray  # (G, C)
    drift: np.ndarray  # (G, C)


def make_tables(config: GeneratorConfig) -> GeneratorTables:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7AB1E5]))
    g_n, r_n, c_n = config.num_global_classes, config.num_regime_classes, config.num_channels

    base_f = rng.uniform(0.4, 0.6, size=c_n)
    ratio = rng.uniform(MIN_REGIME_RATIO + 0.02, 1.4, size=c_n)
    ladder = base_f[None, :] * ratio[None, :] ** np.arange(r_n)[:, None]  # (R, C)
    freq = np.empty((r_n, c_n))
    for c in range(c_n):
        freq[:, c] = ladder[rng.permutation(r_n), c]
    amp = rng.uniform(0.6, 1.4, size=(r_n, c_n))

    # Global classes are spread evenly in [-1, 1] so they never collide.
    levels = np.linspace(-1.0, 1.0, g_n)
    signs_f = rng.choice([-1.0, 1.0], size=c_n)
    signs_a = rng.choice([-1.0, 1.0], size=c_n)
    signs_d = rng.choice([-1.0, 1.0], size=c_n)
    f_scale = 1.0 + config.global_frequency_shift * levels[:, None] * signs_f[None, :]  # (G, C)
    a_scale = 1.0 + config.global_amplitude_shift * levels[:, None] * signs_a[None, :]
    frequency = freq[None] * f_scale[:, None, :]
    amplitude = amp[None] * a_scale[:, None, :]
    drift = config.global_drift_scale * levels[:, None] * signs_d[None, :]
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(g_n, c_n))
    return GeneratorTables(amplitude, frequency, phase, drift)


def validate_schedule(schedule, num_frames: int) -> list[tuple[int, int]]:
    schedule = sorted((int(s), int(r)) for s, r in schedule)
    if not schedule or schedule[0][0] != 0:
        raise ValueError("regime schedule must start at frame 0")
    starts = [s for s, _ in schedule]
    if len(set(starts)) != len(starts):
        raise ValueError("regime schedule has overlapping segments")
    if starts[-1] >= num_frames:
        raise ValueError(f"regime schedule segment starts at {starts[-1]} beyond sequence end {num_frames}")
    return schedule


def schedule_to_labels(schedule, num_frames: int) -> np.ndarray:
    schedule = validate_schedule(schedule, num_frames)
    labels = np.empty(num_frames, dtype=np.int64)
    bounds = [s for s, _ in schedule[1:]] + [num_frames]
    for (start, regime), stop in zip(schedule, bounds):
        labels[start:stop] = regime
    return labels


def generate_sequence(
    config: GeneratorConfig,
    global_class: int,
    schedule,
    seed,
    tables: GeneratorTables | None = None,
    name: str = "",
) -> Trajectory:
    """One trajectory; ``schedule`` is a list of (start_frame, regime) covering [0, T)."""
    tables = tables if tables is not None else make_tables(config)
    n = config.frames_per_sequence
    if not 0 <= global_class < config.num_global_classes:
        raise ValueError(f"global_class {global_class} out of range")
    regimes = schedule_to_labels(schedule, n)
    if regimes.min() < 0 or regimes.max() >= config.num_regime_classes:
        raise ValueError("schedule uses a regime class outside the configured range")
    t = np.arange(n, dtype=np.float64)[:, None]
    amp = tables.amplitude[global_class][regimes]  # (T, C)
    freq = tables.frequency[global_class][regimes]
    x = amp * np.sin(2.0 * np.pi * freq * t / config.frame_rate + tables.phase[global_class]) + tables.drift[global_class]
    if config.noise_std > 0:
        rng = np.random.default_rng(seed)
        x = x + rng.normal(0.0, config.noise_std, size=x.shape)
    return Trajectory(
        x,
        config.frame_rate,
        sequence_labels={"global_class": int(global_class)},
        frame_labels={"regime_class": regimes},
        agent_id=name or "0",
        name=name,
    )


def sample_schedule(config: GeneratorConfig, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Segments with uniform lengths; consecutive segments change regime."""
    lo, hi = config.segment_length_range
    schedule = []
    start = 0
    prev = -1
    while start < config.frames_per_sequence:
        choices = [r for r in range(config.num_regime_classes) if r != prev]
        regime = int(rng.choice(choices))
        schedule.append((start, regime))
        start += int(rng.integers(lo, hi + 1))
        prev = regime
    return schedule


def sequence_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def generate_dataset(config: GeneratorConfig | None = None) -> Dataset:
    config = config or GeneratorConfig()
    if config.frames_per_sequence < config.segment_length_range[0]:
        raise ValueError(
            f"frames_per_sequence {config.frames_per_sequence} is shorter than the minimum "
            f"segment length {config.segment_length_range[0]}"
        )
    tables = make_tables(config)
    g_n = config.num_global_classes
    # balanced classes, assigned in a seeded order
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC1A55]))
    classes = order_rng.permutation(np.arange(config.num_sequences) % g_n)
    seeds = [sequence_seed(config.seed, i).spawn(2) for i in range(config.num_sequences)]
    schedules = [sample_schedule(config, np.random.default_rng(sched_ss)) for sched_ss, _ in seeds]
    seen = set()
    for s in schedules:
        seen.update(r for _, r in s)
    missing = sorted(set(range(config.num_regime_classes)) - seen)
    # Rare with realistic sizes: relabel the tail segments so every regime occurs.
    for regime in missing:
        for s in schedules:
            if len(s) > 1 and sum(1 for _, r in s if r == s[-1][1]) > 1:
                s[-1] = (s[-1][0], regime)
                break
    trajs = [
        generate_sequence(config, int(g), sched, noise_ss, tables, name=f"seq{i:04d}")
        for i, (g, sched, (_, noise_ss)) in enumerate(zip(classes, schedules, seeds))
    ]
    names = [f"ch{c:02d}" for c in range(config.num_channels)]
    return Dataset(trajs, names, config.target_indices, config.hidden_indices)
