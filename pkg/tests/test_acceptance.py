"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale reruns (5 to 9, 11) are slow; run them alone with
``pytest tests/test_acceptance.py -v``.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from scopealign.cli import main
from scopealign.data import make_blobs
from scopealign.engine import TrainConfig, forward, init_mlp, loss_and_grad, train
from scopealign.experiments import (
    DEFAULT_FL,
    DeskSetup,
    _fl_data,
    default_condition_specs,
    run_condition_matrix,
    run_fl_comparison,
    run_lambda_sweep,
    run_predefined_ablation,
    run_scaling_study,
    run_window_study,
    run_wsa_barrier_study,
)
from scopealign.federated import run_federation
from scopealign.merge import Permutation, apply_permutation, barrier, match_weights, scale_layer
from scopealign.regularizers import (
    RegularizerSpec,
    check_decay_identity,
    check_proximal_identity,
    penalty_and_grad,
)
from scopealign.scope import ScopeTarget, scope_estimate, scope_kl

from .conftest import central_diff, record_criterion, rel_err


def test_criterion_01_identities():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 513))
        w = rng.normal(rng.normal(), rng.uniform(1e-3, 5), size=n)
        lhs, _, gap = check_decay_identity(w, rng.uniform(0, 10))
        worst = max(worst, gap / max(1.0, abs(lhs)))
    for _ in range(1000):
        n = int(rng.integers(1, 513))
        w = rng.normal(rng.normal(), rng.uniform(1e-3, 5), size=n)
        wt = rng.normal(rng.normal(), rng.uniform(1e-3, 5), size=n)
        lhs, _, gap = check_proximal_identity(w, wt)
        worst = max(worst, gap / max(1.0, abs(lhs)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 1.0
    record_criterion(1, "identity suite", ok, f"worst scaled gap {worst:.2e}, {elapsed:.2f} s")
    assert ok


def test_criterion_02_kl():
    t0 = time.perf_counter()
    mus = np.linspace(-1.0, 1.0, 10)
    sigmas = np.geomspace(0.05, 3.0, 10)
    bad = 0
    for m in mus:
        for s in sigmas:
            for mt in mus:
                for st in sigmas:
                    kl = scope_kl((m, s), (mt, st))
                    equal = m == mt and s == st
                    if kl < 0 or (kl == 0) != equal:
                        bad += 1
    # Monte-Carlo oracle: E_p[log p(x) - log q(x)] with p = N(0,1), q = N(0,4)
    x = np.random.default_rng(0).standard_normal(1_000_000)
    mc = float(np.mean(np.log(2.0) - x**2 / 2 + x**2 / 8))
    value = scope_kl((0.0, 1.0), (0.0, 2.0))
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and abs(value - mc) < 1e-3 and elapsed < 10.0
    record_criterion(2, "KL suite", ok,
                     f"{bad} grid violations in 10^4, KL {value:.6f} vs MC {mc:.6f}, {elapsed:.2f} s")
    assert ok


def _random_target(model, rng):
    return ScopeTarget({n: (rng.normal(0, 0.1), rng.uniform(0.05, 0.5)) for n in scope_estimate(model).names()})


def test_criterion_03_gradients():
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        sizes = [int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(2, 4))]
        m = init_mlp(sizes, seed=i)
        x = rng.normal(size=(6, sizes[0]))
        y = rng.integers(0, sizes[-1], size=6)
        onehot = np.eye(sizes[-1])[y]
        checks = [("cross_entropy", lambda: loss_and_grad(m, x, y)), ("mse", lambda: loss_and_grad(m, x, onehot, "mse"))]
        specs = [
            RegularizerSpec("wsa", 1.3, target=_random_target(m, rng)),
            RegularizerSpec("weight_decay", 0.4),
            RegularizerSpec("proximal", 0.8, anchor=init_mlp(sizes, seed=1000 + i)),
            RegularizerSpec("predefined_gaussian", 0.9, mu=0.02, sigma=0.3),
        ]
        checks += [(s.kind, lambda s=s: penalty_and_grad(s, m)) for s in specs]
        for _, fn in checks:
            _, grads = fn()
            for name, p in m.params().items():
                fd = central_diff(lambda: fn()[0], p)
                worst = max(worst, rel_err(grads[name], fd))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    record_criterion(3, "gradient suite", ok, f"worst relative error {worst:.2e} over 100 models, {elapsed:.1f} s")
    assert ok


def test_criterion_04_symmetry():
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    out_gap = 0.0
    scope_exact = True
    for i in range(20):
        m = init_mlp([5, 12, 9, 4], seed=i)
        x = rng.normal(size=(64, 5))
        base = forward(m, x)
        out_gap = max(out_gap, float(np.max(np.abs(forward(apply_permutation(m, Permutation.random(m, rng)), x) - base))))
        for layer in (0, 1):
            alpha = float(rng.uniform(0.2, 6.0))
            scaled = scale_layer(m, layer, alpha)
            out_gap = max(out_gap, float(np.max(np.abs(forward(scaled, x) - base))))
            name = f"fc{layer + 1}.weight"
            s0, s1 = scope_estimate(m)[name], scope_estimate(scaled)[name]
            scope_exact &= math.isclose(s1.mu, alpha * s0.mu, rel_tol=1e-12, abs_tol=1e-15)
            scope_exact &= math.isclose(s1.sigma, alpha * s0.sigma, rel_tol=1e-12)
    tr, _ = make_blobs(4, 6, 50, 0.4, seed=4, modes_per_class=2)
    a, _ = train(init_mlp([6, 16, 16, 4], seed=1), tr, TrainConfig(epochs=10, batch_size=16, learning_rate=0.05),
                 rng_seed=1)
    b = apply_permutation(a, Permutation.random(a, rng))
    res = match_weights(a, b)
    matched = barrier(a, b, tr, permutation=res.permutation)[0].barrier_loss
    elapsed = time.perf_counter() - t0
    ok = out_gap < 1e-9 and scope_exact and matched < 1e-9 and elapsed < 30.0
    record_criterion(4, "symmetry suite", ok,
                     f"max output gap {out_gap:.1e}, scope scales by alpha: {scope_exact}, "
                     f"planted barrier after matching {matched:.1e}, {elapsed:.1f} s")
    assert ok


def test_criterion_05_manual_scaling():
    t0 = time.perf_counter()
    rep = run_scaling_study()
    elapsed = time.perf_counter() - t0
    by_pair = {}
    for a, b, alpha, loss, _ in rep.rows:
        by_pair.setdefault((a, b), {})[alpha] = loss
    wins = sum(v[5.0] >= v[1.0] for v in by_pair.values())
    ok = wins >= 2 and rep.summary["alpha1_exact"] and elapsed < 300
    detail = ", ".join(f"{k}: {v[1.0]:.3f} -> {v[5.0]:.3f}" for k, v in by_pair.items())
    record_criterion(5, "manual scaling", ok,
                     f"alpha=5 >= alpha=1 in {wins}/3 pairs ({detail}), alpha=1 exact: "
                     f"{rep.summary['alpha1_exact']}, {elapsed:.0f} s")
    assert ok


def test_criterion_06_condition_matrix():
    t0 = time.perf_counter()
    _, table = run_condition_matrix(default_condition_specs((0, 1, 2)))
    elapsed = time.perf_counter() - t0
    s = table.summary
    ok = s["same_le_diff"] >= 6 and s["spearman_kl_vs_diff"] > 0 and elapsed < 1200
    record_criterion(6, "condition matrix", ok,
                     f"Ba(=) <= Ba(!=) for {s['same_le_diff']}/{s['factors']} factors, "
                     f"Spearman {s['spearman_kl_vs_diff']:.3f}, {elapsed:.0f} s")
    assert ok


def test_criterion_07_wsa_connectivity():
    t0 = time.perf_counter()
    rep = run_wsa_barrier_study()
    elapsed = time.perf_counter() - t0
    s = rep.summary
    plain_ok = s["wsa"]["plain"] <= s["baseline"]["plain"]
    matched_ok = s["wsa"]["matched"] <= s["baseline"]["matched"]
    ok = plain_ok and matched_ok and len(rep.rows) >= 3 and elapsed < 600
    record_criterion(7, "WSA connectivity", ok,
                     f"plain {s['baseline']['plain']:.3f} -> {s['wsa']['plain']:.3f}, "
                     f"matched {s['baseline']['matched']:.3f} -> {s['wsa']['matched']:.3f}, {elapsed:.0f} s")
    assert ok


@pytest.fixture(scope="module")
def fl_runs():
    t0 = time.perf_counter()
    rep, kept = run_fl_comparison(keep_results=True)
    return rep, kept, time.perf_counter() - t0


def _params_identical(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.params().values(), b.params().values()))


def test_criterion_08_fl(fl_runs):
    rep, kept, elapsed = fl_runs
    t0 = time.perf_counter()
    acc = {(a, s, alg): v for a, s, alg, v, _ in rep.rows}
    parts, ok = [], True
    for alpha in (0.5, 1.0):
        for base in ("fedavg", "fedprox"):
            wins = sum(acc[(alpha, s, base + "_wsa")] >= acc[(alpha, s, base)] for s in (0, 1, 2))
            ok &= wins >= 2
            parts.append(f"a={alpha} {base}: {wins}/3")
    # zero-strength arms must reproduce their baselines bit for bit
    identical = True
    train_set, test_set, init = _fl_data(DeskSetup(), 0)
    for base in ("fedavg", "fedprox"):
        cfg = replace(DEFAULT_FL, algorithm=base + "_wsa", lam=0.0, seed=0)
        res = run_federation(cfg, train_set, init, test_set, dirichlet_alpha=0.5)
        ref = kept[(0.5, 0, base)]
        identical &= _params_identical(res.model, ref.model)
        identical &= np.array_equal(res.accuracies(), ref.accuracies())
    elapsed += time.perf_counter() - t0
    ok = ok and identical and elapsed < 1200
    record_criterion(8, "FL rerun", ok,
                     f"wsa >= baseline: {', '.join(parts)}; lambda=0 bit-identical: {identical}, {elapsed:.0f} s")
    assert ok


def test_criterion_09_lambda_sweep():
    t0 = time.perf_counter()
    rep = run_lambda_sweep()
    elapsed = time.perf_counter() - t0
    rows = {lam: (early, final) for lam, early, final, _ in rep.rows}
    best = max((1.0, 5.0, 10.0), key=lambda lam: rows[lam][0])
    early_up = rows[best][0] > rows[0.0][0]
    drop = rows[50.0][1] < rows[best][1]
    ok = early_up and drop and elapsed < 1800
    table = ", ".join(f"{lam:g}: {e:.4f}/{f:.4f}" for lam, (e, f) in rows.items())
    record_criterion(9, "lambda sweep", ok,
                     f"best lambda {best:g}; early/final {table}; {elapsed:.0f} s")
    assert ok


def test_criterion_10_determinism(tmp_path, capsys):
    tiny = DeskSetup(num_classes=3, dim=4, per_class=20, hidden=(6,))
    short = TrainConfig(epochs=2, batch_size=16, learning_rate=0.03, momentum=0.9)
    fl = replace(DEFAULT_FL, rounds=4, local_steps=2, num_clients=3)
    studies = {
        "conditions": lambda: run_condition_matrix(default_condition_specs((0,)), setup=tiny, base_config=short)[1],
        "scaling": lambda: run_scaling_study(setup=tiny, seed_pairs=((0, 1),), config=short),
        "wsa_barrier": lambda: run_wsa_barrier_study(setup=tiny, seed_pairs=((0, 1),), config=short),
        "fl_comparison": lambda: run_fl_comparison(setup=tiny, seeds=(0,), config=fl)[0],
        "lambda_sweep": lambda: run_lambda_sweep(setup=tiny, seeds=(0,), config=fl),
        "predefined": lambda: run_predefined_ablation(setup=tiny, seeds=(0,), config=fl),
        "window": lambda: run_window_study(windows=(None, (0, 2)), setup=tiny, config=fl),
    }
    mismatched = []
    for name, fn in studies.items():
        first, second = fn(), fn()
        if (first.to_csv(), first.to_json()) != (second.to_csv(), second.to_json()):
            mismatched.append(name)
    common = ["--set", "data.per_class=10", "--set", "data.num_classes=3", "--set", "model.hidden=[6]"]
    commands = [
        ["train", "--epochs", "2", "--regularizer", "wsa", *common],
        ["fl", "--rounds", "3", "--set", "fl.num_clients=3", "--set", "fl.local_steps=2", *common],
    ]
    for args in commands:
        outs = []
        for d in ("r1", "r2"):
            assert main([*args, "--seed", "5", "--output-dir", str(tmp_path / args[0] / d)]) == 0
            outs.append({
                p.name: b"".join(l for l in p.read_bytes().splitlines(True) if not l.startswith(b"output_dir"))
                for p in (tmp_path / args[0] / d).iterdir()
            })
        if outs[0] != outs[1]:
            mismatched.append("cli " + args[0])
    capsys.readouterr()
    ok = not mismatched
    record_criterion(10, "determinism", ok,
                     f"{len(studies)} studies and 2 CLI commands rerun; mismatches: {mismatched or 'none'}")
    assert ok


def test_criterion_11_scope_cohesion(fl_runs):
    _, kept, _ = fl_runs
    parts, ok = [], True
    for alpha in (0.5, 1.0):
        for seed in (0, 1, 2):
            wsa = kept[(alpha, seed, "fedavg_wsa")].records
            base = kept[(alpha, seed, "fedavg")].records
            later = [(a.sigma_dispersion(), b.sigma_dispersion()) for a, b in zip(wsa, base) if a.round >= 20]
            lower = sum(x < y for x, y in later)
            ok &= lower > len(later) / 2
            parts.append(f"{lower}/{len(later)}")
    record_criterion(11, "scope cohesion", ok, f"rounds with lower sigma dispersion per (alpha, seed): {', '.join(parts)}")
    assert ok
