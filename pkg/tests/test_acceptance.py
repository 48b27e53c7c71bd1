"""Acceptance criteria 1-10.

Each test records one PASS/FAIL line; the lines are printed together at the
end of the pytest run (see conftest.py). Criteria 7 and 8 share the desk-scale
training runs (three seeds) through a module-scoped fixture.
"""

import itertools
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from mbl.cli import parse_run_config
from mbl.data import split_dataset
from mbl.evaluation import ablation_report, pool_group, timescale_orderings
from mbl.model import BRANCHES, DEFAULT_RF, BamsConfig, BamsModel
from mbl.nn import StopGradientFreeze, grad_check, numeric_gradient
from mbl.nn import autodiff as ad
from mbl.nn.autodiff import Tensor
from mbl.objectives import DeltaRule, PreparedBatch, compute_losses, latent_predictive_loss, sample_delta
from mbl.synthgen import GeneratorConfig, generate_dataset
from mbl.trainer import TrainConfig, model_config_for, train
from oracles import perturbation_rf

ROOT = Path(__file__).resolve().parents[1]
DESK_SEEDS = (0, 1, 2)


def check(log, number, ok, detail):
    log.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ---------------------------------------------------------------- 1


def test_c01_receptive_field_fidelity(acceptance_log):
    t0 = time.perf_counter()
    model = BamsModel(BamsConfig(input_dim=12), seed=0)
    rng = np.random.default_rng(0)
    measured = {}
    for branch in BRANCHES:
        rf = DEFAULT_RF[branch]
        x = rng.normal(size=(rf + 40, 12))
        forward = lambda a, b=branch: model.encode_branch(a[None], b).value[0]
        measured[branch] = perturbation_rf(forward, x, probes=range(0, 6))
    elapsed = time.perf_counter() - t0
    ok = tuple(measured.values()) == (3, 30, 253) and elapsed < 10
    check(acceptance_log, 1, ok, f"measured RFs {tuple(int(v) for v in measured.values())} (want (3, 30, 253)) in {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_c02_causality(acceptance_log):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(i)
        model = BamsModel(BamsConfig(input_dim=4), seed=i)
        t_len = int(rng.integers(20, 300))
        x = rng.normal(size=(t_len, 4))
        s = int(rng.integers(1, t_len))
        xp = x.copy()
        xp[s:] += rng.normal(size=xp[s:].shape) * 10
        worst = max(worst, float(np.max(np.abs(model.embed(xp).z[:s] - model.embed(x).z[:s]))))
    elapsed = time.perf_counter() - t0
    check(acceptance_log, 2, worst == 0.0 and elapsed < 30, f"max past deviation {worst} over 100 pairs in {elapsed:.1f}s")


# ---------------------------------------------------------------- 3


def _op_cases(rng):
    av = rng.normal(size=(5, 4))
    av = np.where(np.abs(av) < 0.05, 0.3, av)
    w3 = rng.normal(size=(3, 4, 2))
    cases = {
        "add": lambda a, b: ad.add(a, b),
        "sub": lambda a, b: ad.sub(a, b),
        "mul": lambda a, b: ad.mul(a, b),
        "square": lambda a, b: ad.square(a),
        "absolute": lambda a, b: ad.absolute(a),
        "relu": lambda a, b: ad.relu(a),
        "softplus": lambda a, b: ad.softplus(a),
        "sum": lambda a, b: ad.sum_(a, axis=0),
        "mean": lambda a, b: ad.mean(a, axis=-1),
        "concat": lambda a, b: ad.concat([a, b], axis=0),
        "slice_last": lambda a, b: ad.slice_last(a, 1, 3),
        "reshape": lambda a, b: ad.reshape(a, (2, 10)),
        "gather_frames": lambda a, b: ad.gather_frames(ad.reshape(a, (1, 5, 4)), np.array([0, 0]), np.array([4, 1])),
        "l2_normalize": lambda a, b: ad.l2_normalize(a, 1e-8),
        "linear": lambda a, b: ad.linear(a, ad.reshape(ad.slice_last(b, 0, 4), (5, 4)), None),
        "causal_conv1d": lambda a, b: ad.causal_conv1d(a, Tensor(w3), None, 2),
        "causal_conv1d_weight": lambda a, b: ad.causal_conv1d(Tensor(av), ad.reshape(ad.concat([b, b], 0), (5, 4, 2)), None, 3),
    }
    return av, cases


def test_c03_gradient_correctness(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    errors = {}
    av, cases = _op_cases(rng)
    for name, op in cases.items():
        a = Tensor(av.copy(), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        c = rng.normal(size=op(Tensor(av), Tensor(b.value)).shape)
        errors[name] = grad_check(lambda: ad.sum_(ad.mul(op(a, b), c)), [a, b])
    # full composite loss; bootstrap targets held at their stop-gradient values
    model = BamsModel(BamsConfig(input_dim=3, num_targets=2, horizon=4), seed=0)
    full = [rng.normal(size=(420, 3)) for _ in range(2)]
    starts = np.array([0, 80])
    inputs = np.stack([f[s : s + 300] for f, s in zip(full, starts)])
    batch = PreparedBatch(inputs, inputs[..., :2], None, None, 1, np.arange(2), starts, np.full(2, 420))
    freeze = StopGradientFreeze()
    f = lambda: freeze.run(lambda: compute_losses(model, batch, full, np.random.default_rng(11), 4)[0])
    names = ["enc.recent_past.0.weight", "enc.recent_past.1.bias", "enc.short_term.2.bias", "enc.long_term.0.bias",
             "enc.long_term.7.bias", "g.2.bias", "q_short.1.bias", "q_long.0.bias"]
    leaves = [model.params[n] for n in names]
    errors["composite"] = grad_check(f, leaves, h=(1e-5, 1e-6))
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] < 1e-4 and elapsed < 120
    check(acceptance_log, 3, ok, f"max relative error {errors[worst]:.2e} ({worst}) over {len(errors)} checks in {elapsed:.1f}s")


# ---------------------------------------------------------------- 4


def test_c04_stop_gradient(acceptance_log):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    online = BamsModel(BamsConfig(input_dim=3), seed=1)
    target = BamsModel(BamsConfig(input_dim=3), seed=2)  # reachable only through sg
    x = rng.normal(size=(1, 300, 3))
    rows, times, tgt_t = np.zeros(8, dtype=int), rng.integers(260, 300, size=8), rng.integers(252, 300, size=8)
    freeze = StopGradientFreeze()

    def loss():
        total = None
        for tag, branch in (("short", "short_term"), ("long", "long_term")):
            z_b = ad.gather_frames(online.encode_branch(x, branch), rows, times)
            z_tgt = ad.stop_gradient(ad.gather_frames(target.encode_branch(x, branch), rows, tgt_t))
            term = latent_predictive_loss(online, tag, z_b, z_tgt)
            total = term if total is None else ad.add(total, term)
        return total

    online.zero_grad()
    target.zero_grad()
    ad.backward(freeze.run(loss))
    analytic = max(0.0 if p.grad is None else float(np.max(np.abs(p.grad))) for p in target.params.values())
    online_moved = any(p.grad is not None and np.any(p.grad) for p in online.params.values())
    probe = influence = 0.0
    for name in ("enc.short_term.0.weight", "enc.long_term.3.bias", "enc.long_term.7.weight"):
        p = target.params[name]
        sl = (slice(0, 2),) * p.value.ndim
        sub = Tensor(p.value[sl].copy(), requires_grad=True)

        def f(frozen=True):
            p.value[sl] = sub.value
            return freeze.run(loss) if frozen else loss()

        probe = max(probe, float(np.max(np.abs(numeric_gradient(f, sub)))))
        # the same parameters do move the loss value when sg is not frozen
        influence = max(influence, float(np.max(np.abs(numeric_gradient(lambda: f(False), sub)))))
    elapsed = time.perf_counter() - t0
    ok = analytic == 0.0 and probe < 1e-10 and influence > 1e-6 and online_moved and elapsed < 30
    check(acceptance_log, 4, ok, f"sg-only params: max |grad| {analytic}, frozen-sg finite-difference probe {probe:.1e} (value sensitivity {influence:.1e}) in {elapsed:.1f}s")


# ---------------------------------------------------------------- 5


def test_c05_latent_loss_algebra(acceptance_log):
    t0 = time.perf_counter()
    model = BamsModel(BamsConfig(input_dim=2, bootstrap_hidden=()), seed=0)
    model.params["q_short.0.weight"].value = np.eye(32)
    model.params["q_short.0.bias"].value = np.zeros(32)
    rng = np.random.default_rng(5)
    a = rng.normal(size=(10_000, 32))
    b = rng.normal(size=(10_000, 32))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    b[:3] = [a[0], -a[1], a[2]]  # include the extremes 0 and 4
    measured = np.array([latent_predictive_loss(model, "short", Tensor(a[i : i + 1]), b[i : i + 1]).value for i in range(len(a))])
    expected = 2.0 - 2.0 * np.sum(a * b, axis=1)
    dev = float(np.max(np.abs(measured - expected)))
    in_range = bool(np.all((measured >= 0) & (measured <= 4)))
    elapsed = time.perf_counter() - t0
    check(acceptance_log, 5, dev < 1e-6 and in_range and elapsed < 10, f"max |loss - (2 - 2<a,b>)| = {dev:.1e}, range [{measured.min():.3g}, {measured.max():.3g}] in {elapsed:.1f}s")


# ---------------------------------------------------------------- 6


def test_c06_delta_sampling(acceptance_log):
    # one pooled chi-square per rule: per-anchor statistics and dofs are summed
    t0 = time.perf_counter()
    length = 1800
    anchors = (0, 1, 3, 900, length - 4, length - 2, length - 1)
    parts, outside = [], 0
    for seed, rule in enumerate((DeltaRule("short", 5), DeltaRule("long", 5))):
        rng = np.random.default_rng(seed)
        stat = dof = 0.0
        for t in anchors:
            draws = sample_delta(rule, np.full(100_000, t), length, rng)
            cand = rule.candidates(t, length)
            outside += np.setdiff1d(np.unique(draws), cand).size
            res = stats.chisquare(np.bincount(draws, minlength=length)[cand])
            stat += res.statistic
            dof += len(cand) - 1
        parts.append((rule.branch, float(stats.chi2.sf(stat, dof))))
    elapsed = time.perf_counter() - t0
    ok = all(p > 0.01 for _, p in parts) and outside == 0 and elapsed < 10
    detail = ", ".join(f"{b}: p = {p:.3f}" for b, p in parts)
    check(acceptance_log, 6, ok, f"{detail} (1e5 draws per anchor, t in {anchors}); {outside} out-of-set draws; {elapsed:.1f}s")


# ---------------------------------------------------------------- 7 / 8 (desk-scale runs)


@pytest.fixture(scope="module")
def desk_runs():
    run_cfg = parse_run_config((ROOT / "configs" / "desk.json").read_text(), "configs/desk.json")
    data = generate_dataset(run_cfg.generator_config())
    tr, te = split_dataset(data, run_cfg.data["train_fraction"], 0)
    out = []
    t0 = time.perf_counter()
    for seed in DESK_SEEDS:
        cfg = TrainConfig(**{**run_cfg.train, "seed": seed})
        res = train(tr, model_config_for(tr), cfg)
        rep = ablation_report(res.model, res.checkpoint.normalizer, tr, te, seed=seed, frame_stride=run_cfg.eval["frame_stride"])
        out.append((seed, res, rep))
    return out, time.perf_counter() - t0


@pytest.mark.slow
def test_c07_timescale_disentanglement(acceptance_log, desk_runs):
    runs, elapsed = desk_runs
    keys = [("global_class", s) for s in ("full", "short_only", "long_only", "recent_only")]
    keys += [("regime_class", s) for s in ("full", "short_only", "long_only", "recent_only")]
    median = {k: statistics.median(rep.score(*k) for _, _, rep in runs) for k in keys}

    class Median:
        def score(self, task, subset):
            return median[(task, subset)]

    for seed, _, rep in runs:
        per_seed = ", ".join(f"{k[0][:6]}/{k[1]}={rep.score(*k):.3f}" for k in keys)
        print(f"seed {seed}: {per_seed}")
    checks = timescale_orderings(Median())
    detail = "; ".join(f"{k[0]}: {msg}" for k, (_, msg) in checks.items())
    ok = all(v for v, _ in checks.values()) and elapsed < 30 * 60
    check(acceptance_log, 7, ok, f"3-seed median {detail}; {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_c08_training_sanity(acceptance_log, desk_runs):
    runs, _ = desk_runs
    parts = []
    ok = True
    for seed, res, _ in runs:
        recs = res.records
        finite = all(math.isfinite(r[k]) for r in recs for k in ("l_future", "l_hidden", "l_short", "l_long", "total"))
        first = np.mean([r["total"] for r in recs if r["epoch"] == 0])
        last_epoch = recs[-1]["epoch"]
        last = np.mean([r["total"] for r in recs if r["epoch"] == last_epoch])
        ok &= finite and last < 0.5 * first
        parts.append(f"seed {seed}: {first:.3f} -> {last:.3f} ({100 * last / first:.0f}%){'' if finite else ' NON-FINITE'}")
    check(acceptance_log, 8, ok, "epoch-0 vs final-epoch mean total: " + "; ".join(parts))


# ---------------------------------------------------------------- 9


def test_c09_reproducibility(acceptance_log, tmp_path):
    data = generate_dataset(GeneratorConfig())
    tr, _ = split_dataset(data, 0.8, 0)
    cfg = TrainConfig(epochs=200, seed=0, dtype="float64")
    logs = []
    for name in ("a", "b"):
        train(tr, model_config_for(tr), cfg, out_dir=tmp_path / name, max_steps=100)
        logs.append((tmp_path / name / "train_log.jsonl").read_bytes())
    lines = logs[0].splitlines()
    ok = logs[0] == logs[1] and len(lines) == 100
    check(acceptance_log, 9, ok, f"{len(lines)} JSONL lines, byte-identical: {logs[0] == logs[1]}")


# ---------------------------------------------------------------- 10


def test_c10_pooling_contract(acceptance_log):
    rng = np.random.default_rng(10)
    ok = True
    for _ in range(50):
        agents = rng.normal(size=(3, 64)) * rng.uniform(0.1, 100)
        ref = pool_group(agents)
        ok &= ref.shape == (128,)
        ok &= np.array_equal(ref[:64], np.sort(agents, axis=0).mean(axis=0))
        ok &= np.array_equal(ref[64:], agents.max(axis=0) - agents.min(axis=0))
        for perm in itertools.permutations(range(3)):
            ok &= np.array_equal(pool_group(agents[list(perm)]), ref)
            ok &= np.array_equal(pool_group([agents[i] for i in perm]), ref)
    check(acceptance_log, 10, bool(ok), "3 x 64-d -> 128-d, bit-identical under all 6 agent orders (50 random draws)")
