"""Acceptance suite: one printed pass/fail line per criterion, at the pinned tolerances.

The MNIST criteria (6, 8, 10) run the desk-scale default config for every strategy and take
several minutes on one core.
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from algrad import autograd as ag
from algrad import acquisition as acq
from algrad.acquisition import AcquisitionScore, Strategy, select_coreset, select_top_b
from algrad.cli import main as cli_main
from algrad.config import ExperimentConfig, load_config
from algrad.experiment import load_dataset, run_experiment, run_query_phase, run_training_phase, stream
from algrad.layers import Conv2d, Dense, Flatten, GlobalAvgPool, Net, ReLU
from algrad.losses import PairBatch, aux_margin_loss, cross_entropy, entropy, entropy_of_logits, softmax
from algrad.models import ModelSpec, build_default_desk_model, build_models
from algrad.pool import Dataset, init_pool, make_blobs, replay_history

from oracles import (brute_force_top_b, central_difference, exhaustive_kcenter_radius,
                     pairwise_rank_top_b)

ROOT = Path(__file__).resolve().parents[1]
DESK_CONFIG = ROOT / "configs" / "desk_mnist.json"
STRATEGIES = [s.value for s in Strategy]
FD_STEP = 1e-5


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def norm_relative_error(auto, numeric):
    worst = 0.0
    for a, n in zip(auto, numeric):
        scale = max(float(np.linalg.norm(n)), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - n)) / scale)
    return worst


# -- 1 -----------------------------------------------------------------------

def layer_instances(rng):
    """(name, Net, input batch) for every layer kind, with random shapes."""
    c, h = int(rng.integers(1, 3)), int(rng.integers(5, 8))
    return [
        ("dense", Net([Dense(4, 3)], (4,), rng), rng.normal(size=(3, 4))),
        ("conv2d-valid", Net([Conv2d(c, 2, 3, "valid")], (c, h, h), rng), rng.normal(size=(2, c, h, h))),
        ("conv2d-same", Net([Conv2d(c, 2, 3, "same")], (c, h, h), rng), rng.normal(size=(2, c, h, h))),
        ("relu", Net([Dense(4, 5), ReLU()], (4,), rng), rng.normal(size=(3, 4))),
        ("global-average-pool", Net([Conv2d(c, 2, 3), GlobalAvgPool()], (c, h, h), rng),
         rng.normal(size=(2, c, h, h))),
        ("flatten", Net([Conv2d(c, 2, 3), Flatten(), Dense(2 * (h - 2) ** 2, 2)], (c, h, h), rng),
         rng.normal(size=(2, c, h, h))),
    ]


def check_layer_instance(net, batch, rng):
    x = ag.Tensor(batch.copy(), requires_grad=True)
    probe = rng.normal(size=net.run(x)[0].shape)
    leaves = [x] + net.params.tensors()

    def loss():
        return float((net.run(x)[0].data * probe).sum())

    out = net.run(x)[0]
    auto = ag.grad(ag.tsum(ag.mul(out, probe)), leaves)
    return norm_relative_error(auto, central_difference(loss, leaves, FD_STEP))


def check_entropy_pipeline(seed):
    """softmax -> entropy -> parameter gradient -> Frobenius norm, against finite differences."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec.from_dict({"conv_channels": [2, 3], "kernel_size": 3,
                                "padding": "same" if seed % 2 else "valid", "aux_hidden": 4})
    model, _ = build_default_desk_model((1, 7, 7), 4, seed=seed, spec=spec)
    x = rng.normal(size=(1, 1, 7, 7))
    leaves = model.params.tensors()

    def h():
        return float(entropy_of_logits(model.forward(x).logits).data.sum())

    numeric = central_difference(h, leaves, FD_STEP)
    auto = ag.grad(ag.tsum(entropy_of_logits(model.forward(x).logits)), leaves)
    expected_norm = math.sqrt(sum(float((g ** 2).sum()) for g in numeric))
    score = acq.entropy_gradient_norms(model, x)[0]
    return max(norm_relative_error(auto, numeric), abs(score - expected_norm) / expected_norm)


def test_criterion_1_gradient_oracle(report):
    start = time.perf_counter()
    worst, instances = {}, 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for name, net, batch in layer_instances(rng):
            worst[name] = max(worst.get(name, 0.0), check_layer_instance(net, batch, rng))
            instances += 1
        worst["entropy-pipeline"] = max(worst.get("entropy-pipeline", 0.0), check_entropy_pipeline(seed))
        instances += 1
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"{instances} instances, worst relative error: {detail}; {elapsed:.1f}s")
    assert ok


# -- 2 -----------------------------------------------------------------------

def test_criterion_2_formula_fixtures(report):
    checks = {}
    p = softmax(ag.Tensor(np.array([[0.0, math.log(3.0)]]))).data[0]
    checks["softmax"] = np.allclose(p, [0.25, 0.75], rtol=0, atol=1e-15)
    checks["entropy"] = all(abs(entropy(np.full((1, c), 1.0 / c)).data[0] - math.log(c)) <= 1e-12
                            for c in (2, 10, 100))
    checks["cross-entropy"] = all(
        abs(cross_entropy(ag.Tensor(np.zeros((1, c))), np.array([0]))[0].item() - math.log(c)) <= 1e-12
        for c in (2, 10, 100))
    # One pair holding the same sample twice, so the mean equals that sample's term.
    term = aux_margin_loss(ag.Tensor(np.array([2.6, 2.6])), np.array([2.0, 2.0]), 1.0, "paper-literal",
                           PairBatch(2, ((0, 1),)))
    checks["aux-margin"] = abs(term.item()) <= 1e-12
    ok = all(checks.values())
    report(2, ok, ", ".join(f"{k} {'ok' if v else 'WRONG'}" for k, v in checks.items()))
    assert ok


# -- 3 -----------------------------------------------------------------------

def test_criterion_3_selection_oracle(report):
    rng = np.random.default_rng(2024)
    mismatches = enumerated = 0
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        b = int(rng.integers(1, n + 1))
        idx = rng.choice(500, size=n, replace=False).tolist()
        if rng.random() < 0.5:
            vals = rng.integers(0, 4, size=n).astype(float).tolist()  # heavy ties
        else:
            vals = rng.normal(size=n).tolist()
        pairs = list(zip(idx, vals))
        chosen = set(select_top_b([AcquisitionScore(i, s) for i, s in pairs], b))
        if math.comb(n, b) <= 5000:
            expected = brute_force_top_b(pairs, b)
            enumerated += 1
        else:
            expected = pairwise_rank_top_b(pairs, b)
        mismatches += chosen != expected
    ok = mismatches == 0
    report(3, ok, f"1000 lists ({enumerated} by subset enumeration, the rest by pairwise "
                  f"dominance), {mismatches} mismatches")
    assert ok


# -- 4 -----------------------------------------------------------------------

def test_criterion_4_coreset_oracle(report):
    rng = np.random.default_rng(7)
    violations, worst_ratio = 0, 0.0
    for _ in range(100):
        total = int(rng.integers(2, 9))
        n_lab = int(rng.integers(1, total))
        pts = rng.uniform(0, 10, size=(total, 2))
        labeled, cand = pts[:n_lab], pts[n_lab:]
        b = int(rng.integers(1, min(3, len(cand)) + 1))
        sel, _ = select_coreset(labeled, cand, b, list(range(len(cand))))
        greedy = acq.covering_radius(pts, np.concatenate([labeled, cand[sel]]))
        best = exhaustive_kcenter_radius(labeled, cand, b)
        if best > 0:
            worst_ratio = max(worst_ratio, greedy / best)
        violations += greedy > 2 * best + 1e-12
    ok = violations == 0
    report(4, ok, f"100 instances, {violations} violations, worst greedy/optimal ratio {worst_ratio:.3f}")
    assert ok


# -- 5 -----------------------------------------------------------------------

def test_criterion_5_query_equivalence(report):
    differing = hash_changes = 0
    spec = {"conv_channels": [3, 4], "kernel_size": 3, "padding": "same"}
    for seed in range(50):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(60, 1, 8, 8))
        ds = Dataset(x, rng.integers(0, 3, size=60), 3, np.ones(60, bool))
        cfg = ExperimentConfig(initial_labeled=10, candidate_size=25, query_budget=5, model=spec)
        main, aux = build_models(ds.input_shape, 3, cfg.model_spec, np.random.default_rng(seed))
        pool = init_pool(ds, 10, np.random.default_rng(seed))
        before = main.params.digest()
        picks = []
        for strategy in ("lplgrad", "ent-gradnorm"):
            cfg.strategy = strategy
            picks.append(run_query_phase(main, aux, pool, ds, cfg, np.random.default_rng(seed)).selected)
        differing += set(picks[0]) != set(picks[1])
        hash_changes += main.params.digest() != before
    ok = differing == 0 and hash_changes == 0
    report(5, ok, f"50 trials, {differing} differing selections, {hash_changes} parameter hash changes")
    assert ok


# -- 7 -----------------------------------------------------------------------

def test_criterion_7_selected_uncertainty(report):
    failures = []
    margins = {}
    for seed in range(10):
        ds = make_blobs(60, 4, 2, 4.0, np.random.default_rng(seed))
        for strategy in ("entropy", "lplgrad"):
            cfg = ExperimentConfig(strategy=strategy, initial_labeled=40, epochs_per_round=3,
                                   candidate_size=100, query_budget=10, minibatch=16, lr=0.02,
                                   pair_batch=8, lr_decay_epoch=100)
            main, aux = build_models(ds.input_shape, 4, cfg.model_spec, stream(seed, 0))
            pool = init_pool(ds, cfg.initial_labeled, stream(seed, 1))
            run_training_phase(main, aux, pool, ds, cfg, stream(seed, 2))
            q = run_query_phase(main, aux, pool, ds, cfg, stream(seed, 3))
            h = acq.predictive_entropy(main, ds.samples[np.array(q.candidates)])
            by_index = dict(zip(q.candidates, h))
            selected = float(np.mean([by_index[i] for i in q.selected]))
            gap = selected - float(h.mean())
            margins.setdefault(strategy, []).append(gap)
            if gap < 0:
                failures.append((strategy, seed))
    ok = not failures
    detail = ", ".join(f"{s} min gap {min(v):.4g}" for s, v in margins.items())
    report(7, ok, f"10 seeds x 2 strategies, {len(failures)} failures; {detail}")
    assert ok


# -- 9 -----------------------------------------------------------------------

def test_criterion_9_ablation_harness(report):
    blobs = {"kind": "blobs", "n_per_class": 60, "num_classes": 3, "dim": 4, "spread": 1.5, "seed": 3}
    outcomes = {}
    for with_aux in (True, False):
        cfg = ExperimentConfig(strategy="lplgrad", with_aux=with_aux, rounds=3, epochs_per_round=3,
                               initial_labeled=20, query_budget=10, candidate_size=60, minibatch=16,
                               pair_batch=8, trials=2, dataset=blobs, output_dir=None)
        ds = load_dataset(cfg)
        initial = {t: build_models(ds.input_shape, 3, cfg.model_spec, stream(t, 0))[1].params.digest()
                   for t in range(cfg.trials)}
        digests = []
        res = run_experiment(cfg, dataset=ds,
                             observer=lambda event, trial, aux, **kw: digests.append(
                                 aux.params.digest() == initial[trial]))
        losses_aux = [r.train_loss_aux for trial in res.records for r in trial]
        outcomes[with_aux] = (len(res.records[0]) == cfg.rounds + 1, digests, losses_aux)
    on_done, on_digests, on_losses = outcomes[True]
    off_done, off_digests, off_losses = outcomes[False]
    ok = (on_done and off_done and all(off_digests) and not all(on_digests)
          and all(v is None for v in off_losses) and all(v is not None for v in on_losses))
    report(9, ok, f"with_aux on: completed={on_done}, aux trained={not all(on_digests)}; "
                  f"off: completed={off_done}, aux bit-unchanged={all(off_digests)}, "
                  f"train_loss_aux absent={all(v is None for v in off_losses)}")
    assert ok


# -- 6, 8, 10: desk-scale MNIST ----------------------------------------------

class PoolAudit:
    """Observer checking the pool algebra after every round of a run."""

    def __init__(self, cfg, dataset):
        self.cfg, self.dataset = cfg, dataset
        self.violations = []
        self.rounds = 0

    def __call__(self, event, trial, round, pool, **kw):
        if event != "trained":
            return
        self.rounds += 1
        L, U = set(pool.labeled), set(pool.unlabeled)
        expected = self.cfg.initial_labeled + round * self.cfg.query_budget
        replayed = replay_history(pool.history)
        fresh = init_pool(self.dataset, self.cfg.initial_labeled, stream(self.cfg.base_seed + trial, 1))
        if L & U:
            self.violations.append((trial, round, "L and U overlap"))
        if len(L) != expected:
            self.violations.append((trial, round, f"|L|={len(L)} != {expected}"))
        if replayed != pool.labeled or list(pool.history[0][1]) != list(fresh.labeled):
            self.violations.append((trial, round, "history replay differs"))


@pytest.fixture(scope="module")
def desk_runs(mnist_dir, tmp_path_factory):
    base = load_config(DESK_CONFIG)
    dataset = load_dataset(base)
    out_root = tmp_path_factory.mktemp("desk")
    runs = {}
    start = time.perf_counter()
    for strategy in STRATEGIES:
        cfg = load_config(DESK_CONFIG)
        cfg.strategy = strategy
        audit = PoolAudit(cfg, dataset)
        t0 = time.perf_counter()
        res = run_experiment(cfg, out_dir=out_root / strategy, dataset=dataset, observer=audit)
        runs[strategy] = {"result": res, "audit": audit, "seconds": time.perf_counter() - t0,
                          "dir": out_root / strategy}
    return {"runs": runs, "seconds": time.perf_counter() - start, "dataset": dataset,
            "out_root": out_root, "config": base}


def test_criterion_8_desk_scale_learning(desk_runs, report):
    runs = desk_runs["runs"]
    finals = {s: r["result"].summary[-1]["mean_accuracy"] for s, r in runs.items()}
    ds = desk_runs["dataset"]
    minutes = desk_runs["seconds"] / 60
    accurate = all(v >= 0.85 for v in finals.values())
    fast = minutes < 15
    table = ", ".join(f"{s} {v:.3f}" for s, v in finals.items())
    ranking = "holds" if finals["lplgrad"] >= finals["random"] else "does not hold"
    report(8, accurate and fast,
           f"MNIST subset {len(ds.train_indices)} train / {len(ds.test_indices)} test, 3 seeds, "
           f"mean final accuracy: {table}; wall clock {minutes:.1f} min on {os.cpu_count()} core(s); "
           f"lplgrad >= random {ranking} (reported, not gated)")
    assert accurate, finals
    assert fast, f"{minutes:.1f} min"


def test_criterion_10_pool_algebra(desk_runs, report):
    audits = {s: r["audit"] for s, r in desk_runs["runs"].items()}
    violations = [v for a in audits.values() for v in a.violations]
    checked = sum(a.rounds for a in audits.values())
    ok = not violations and checked == len(STRATEGIES) * 3 * 6
    report(10, ok, f"{checked} round checks across criterion 8's runs, {len(violations)} violations")
    assert ok, violations[:5]


def test_criterion_6_determinism(desk_runs, report, capsys):
    first = desk_runs["runs"]["lplgrad"]["dir"]
    second = desk_runs["out_root"] / "lplgrad-again"
    cfg = load_config(DESK_CONFIG)
    assert cfg.strategy == "lplgrad"
    with capsys.disabled():
        code = cli_main(["run", str(DESK_CONFIG), "--output-dir", str(second)])
    same = {name: (first / name).read_bytes() == (second / name).read_bytes()
            for name in ("results_trial0.csv", "selections.jsonl")}
    ok = code == 0 and all(same.values())
    report(6, ok, "second `run` of the default config: " +
           ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
    assert ok
