import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mbl.data import Normalizer
from mbl.evaluation import (
    SYNTHETIC_TASKS,
    EmbeddedSplit,
    ProbeReport,
    ProbeTask,
    ablation_report,
    f1_macro,
    linear_probe,
    mse,
    pool_group,
    probe_splits,
    subset_columns,
    timescale_orderings,
)
from mbl.model import BamsConfig, BamsModel
from mbl.synthgen import GeneratorConfig, generate_dataset
from mbl.data import split_dataset


def test_pool_group_examples():
    out = pool_group([np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 6.0])])
    np.testing.assert_array_equal(out, [3, 4, 4, 4])
    z = np.random.default_rng(0).normal(size=64)
    same = pool_group([z, z, z])
    assert same.shape == (128,)
    assert not same[64:].any()


@given(seed=st.integers(0, 2**16), perm=st.permutations([0, 1, 2]))
def test_pool_group_permutation_invariant(seed, perm):
    agents = np.random.default_rng(seed).normal(size=(3, 7, 64))
    np.testing.assert_array_equal(pool_group(agents), pool_group(agents[list(perm)]))


def test_pool_group_rejects_unequal_shapes():
    with pytest.raises(ValueError):
        pool_group([np.zeros(3), np.zeros(4)])


def test_f1_examples():
    assert f1_macro([0, 1, 1], [0, 1, 1]) == 1.0
    # per class: TP=1, FP=1, FN=1 -> F1 = 2/(2+1+1) = 0.5
    assert f1_macro([0, 1, 0, 1], [0, 0, 1, 1]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        f1_macro([0], [0, 1])


def test_mse_examples():
    y = np.array([1.0, 2.0, 6.0])
    assert mse(y, y) == 0.0
    assert mse(np.full(3, y.mean()), y) == pytest.approx(y.var())


def test_probe_separable_and_realizable(rng):
    x = rng.normal(size=(1000, 5))
    score = x[:, 0] + 0.5 * x[:, 1]
    x = x[np.abs(score) > 0.5][:400]  # separable with a margin
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    assert linear_probe(x[:300], y[:300], x[300:], y[300:]) == 1.0
    w = rng.normal(size=5)
    assert linear_probe(x[:300], x[:300] @ w + 2, x[300:], x[300:] @ w + 2, kind="real", l2=1e-10) < 1e-6


def test_probe_random_labels_near_chance(rng):
    x = rng.normal(size=(6000, 8))
    y = rng.integers(0, 2, size=6000)
    assert abs(linear_probe(x[:2000], y[:2000], x[2000:], y[2000:]) - 0.5) < 0.05


def test_probe_errors(rng):
    with pytest.raises(ValueError):
        linear_probe(np.zeros((4, 2)), np.zeros(4), np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        linear_probe(rng.normal(size=(4, 2)), [0, 1, 0, 1], rng.normal(size=(2, 2)), [0, 1], kind="ordinal")


def test_subset_columns():
    assert subset_columns("short_only") == list(range(16, 48))
    assert subset_columns("full") == list(range(64))
    with pytest.raises(ValueError):
        subset_columns("mid_only")


def test_task_validation():
    with pytest.raises(ValueError):
        ProbeTask("x", "frame", "categorical", readout="mean")
    assert ProbeTask("x", "sequence", "categorical").per_frame is False
    assert ProbeTask("x", "sequence", "categorical", readout="frame").per_frame is True


def _split(rng, n=6, t=30, agents=1):
    return EmbeddedSplit(
        [rng.normal(size=(agents, t, 64)) for _ in range(n)],
        [{"global_class": i % 2} for i in range(n)],
        [{"regime_class": np.arange(t) % 3} for _ in range(n)],
    )


def test_probe_splits_report_shape_and_skips(rng):
    tasks = [ProbeTask("global_class", "sequence", "categorical", readout="frame"), ProbeTask("missing", "frame", "real")]
    rep = probe_splits(_split(rng), _split(rng), tasks)
    assert rep.skipped == ["missing"]
    assert {r["subset"] for r in rep.rows} == {"full", "short_only", "long_only", "recent_only"}
    full = [r for r in rep.rows if r["subset"] == "full"][0]
    assert full["rel_change_pct"] == 0.0
    with pytest.raises(ValueError, match="no tasks"):
        probe_splits(_split(rng), _split(rng), [])


def test_multi_agent_split_pools_to_128(rng):
    split = _split(rng, agents=3)
    feats = split.features(list(range(64)))
    assert feats[0].shape == (30, 128)


def test_report_serialisation(tmp_path, rng):
    rep = probe_splits(_split(rng), _split(rng), SYNTHETIC_TASKS[:2])
    paths = rep.write(tmp_path)
    assert paths["csv"].read_text().splitlines()[0] == "task,level,subset,metric,score,rel_change_pct"
    back = ProbeReport.from_dict(json.loads(paths["json"].read_text()))
    assert back.rows == rep.rows
    assert "global_class" in paths["txt"].read_text()


def test_random_init_ablation_near_chance():
    ds = generate_dataset(GeneratorConfig(num_sequences=12, frames_per_sequence=600, seed=2))
    tr, te = split_dataset(ds, 0.75, 0)
    model = BamsModel(BamsConfig(input_dim=12), seed=0)
    rep = ablation_report(model, Normalizer.fit(tr), tr, te, frame_stride=5)
    assert len(rep.rows) == 12
    # chance for 5 balanced regimes is 0.2; an untrained encoder stays well below a trained one
    assert rep.score("regime_class", "long_only") < 0.45
    checks = timescale_orderings(rep)
    assert set(checks) == {"a_global_long_beats_short", "b_regime_full_vs_parts", "c_global_long_high", "d_regime_full_above_chance"}
