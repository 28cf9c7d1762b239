"""Acceptance criteria. Each test reports one PASS/FAIL line (shown in the terminal summary)."""

import math
import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from fedvg.aggregation import ClientUpdate, aggregate
from fedvg.cli import main
from fedvg.data import Dataset, apportion, dirichlet_partition, imbalance_counts
from fedvg.diagnostics import (
    AblationConfig,
    balanced_client_ablation,
    fisher_audit,
    fit_to_interpolation,
    grad_audit,
    random_dataset,
)
from fedvg.errors import PartitionError
from fedvg.federated import ExperimentConfig, run_experiment
from fedvg.models import build_mlp, build_tiny_cnn
from fedvg.nn import LayeredParams
from fedvg.scoring import ScoreVector, scores_from_layer_norms, scores_from_norms


def test_c1_score_kernel(report):
    t0 = time.perf_counter()
    hand = scores_from_norms({0: 1.0, 1: 3.0}, 0.0).scores
    hand_ok = abs(hand[0] - 0.75) <= 1e-12 and abs(hand[1] - 0.25) <= 1e-12
    rng = np.random.default_rng(0)
    worst_sum, argmax_ok, checked = 0.0, True, 0
    for i in range(1000):
        k = int(rng.integers(1, 11))
        layers = [f"l{j}" for j in range(int(rng.integers(1, 6)))]
        per_layer = {c: {lid: float(rng.exponential()) * 10.0 ** rng.integers(-4, 4) for lid in layers}
                     for c in range(k)}
        blocks = {lid: f"B{j // 2}" for j, lid in enumerate(layers)}
        for gran in ("modelwise", "layerwise", "blockwise"):
            sv = scores_from_layer_norms(per_layer, gran, blocks, epsilon=1e-8 if i % 2 else 0.0)
            for group in sv.groups():
                worst_sum = max(worst_sum, abs(math.fsum(group.values()) - 1.0))
        means = {c: math.fsum(v.values()) / len(v) for c, v in per_layer.items()}
        s = scores_from_norms(means, 0.0).scores
        lo = min(means.values())
        if sum(v == lo for v in means.values()) == 1:
            checked += 1
            argmax_ok &= max(s, key=s.get) == min(means, key=means.get)
    elapsed = time.perf_counter() - t0
    ok = hand_ok and worst_sum <= 1e-9 and argmax_ok and elapsed < 1.0
    report("C1 score kernel", ok, f"hand={hand}, max|sum-1|={worst_sum:.1e}, argmax==argmin on "
                                  f"{checked} instances: {argmax_ok}, {elapsed:.2f}s")
    assert ok


def test_c2_imbalance_counts(report):
    t0 = time.perf_counter()
    mismatches = 0
    for c in range(1, 11):
        for rho in (0.25, 0.5, 0.75, 1.0):
            for n in (20, 100, 1000):
                # oracle: exact rational evaluation of the floor formula
                r = Fraction(rho)
                total = sum(r ** j for j in range(c))
                expected = [math.floor(r ** i / total * n) for i in range(c)]
                mismatches += imbalance_counts(c, rho, n) != expected
    explicit = imbalance_counts(4, 0.5, 100)
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and explicit == [53, 26, 13, 6] and elapsed < 1.0
    report("C2 imbalance sampler", ok, f"{mismatches} mismatches over 120 cases, (4,0.5,100)->{explicit}, "
                                       f"{elapsed:.2f}s")
    assert ok


def test_c3_gradient_audit(report):
    t0 = time.perf_counter()
    worst = {"mlp": 0.0, "cnn": 0.0}
    for seed in range(10):
        mlp = build_mlp(4, [8], 3, seed)[0]
        cnn = build_tiny_cnn((12, 12, 1), 3, seed)[0]
        worst["mlp"] = max(worst["mlp"], grad_audit(mlp, seed, abs_floor=1e-8).max_rel_error)
        worst["cnn"] = max(worst["cnn"], grad_audit(cnn, seed, batch=2, abs_floor=1e-8).max_rel_error)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 30.0
    report("C3 gradient audit", ok, f"max rel error mlp={worst['mlp']:.2e} cnn={worst['cnn']:.2e}, {elapsed:.1f}s")
    assert ok


def test_c4_fisher_identity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(50):
        if i % 10 == 9:
            topo = build_tiny_cnn((10, 10, 1), 3, i)[0]
            ds = random_dataset(4, (10, 10, 1), 3, i)
        else:
            d, c = int(rng.integers(2, 7)), int(rng.integers(2, 5))
            hidden = [int(h) for h in rng.integers(2, 9, size=int(rng.integers(0, 3)))]
            topo = build_mlp(d, hidden, c, i)[0]
            ds = random_dataset(int(rng.integers(3, 20)), (d,), c, i)
        worst = max(worst, fisher_audit(topo, ds, seed=i).max_rel_error)
    topo = build_mlp(4, [8], 3, 0)[0]
    small = random_dataset(4, (4,), 3, 0)
    interp = fisher_audit(topo, small, params=fit_to_interpolation(topo, small, 0))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and interp.max_fisher_entry < 1e-6 and elapsed < 60.0
    report("C4 Fisher identity", ok, f"max trace rel error={worst:.1e}, interpolating max entry="
                                     f"{interp.max_fisher_entry:.1e}, {elapsed:.1f}s")
    assert ok


def _bitwise_same(a, b) -> bool:
    return a.final_params.equals(b.final_params) and all(
        ra.sampled == rb.sampled and ra.scores == rb.scores and ra.test_acc == rb.test_acc
        and np.array_equal(ra.val_loss, rb.val_loss)
        for ra, rb in zip(a.records, b.records)
    )


def test_c5_degenerate_equivalences(report):
    t0 = time.perf_counter()
    base = ExperimentConfig(samples_per_class=100, num_clients=5, join_ratio=0.6, alpha=0.5, rounds=5,
                            local_epochs=2, strategy="fedavg", seed=11)
    ref = run_experiment(base)
    results = {
        "fedprox(mu=0)": run_experiment(replace(base, strategy="fedprox", mu=0.0)),
        "fedavgm(m=0)": run_experiment(replace(base, strategy="fedavgm", server_momentum=0.0)),
        "feddyn(alpha=0)": run_experiment(replace(base, strategy="feddyn", feddyn_alpha=0.0)),
    }
    same = {k: _bitwise_same(ref, v) for k, v in results.items()}
    one_layer = replace(base, strategy="fedvg", hidden=())
    same["layerwise==modelwise"] = _bitwise_same(run_experiment(replace(one_layer, granularity="modelwise")),
                                                 run_experiment(replace(one_layer, granularity="layerwise")))
    elapsed = time.perf_counter() - t0
    ok = all(same.values()) and elapsed < 120.0
    report("C5 degenerate equivalences", ok, f"{same}, {elapsed:.1f}s")
    assert ok


def test_c6_fixed_point_and_hull(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    fixed_ok, hull_excess = True, 0.0
    for i in range(1000):
        k = int(rng.integers(1, 8))
        shape = () if i % 2 else (int(rng.integers(1, 6)),)
        g = LayeredParams([("w", [rng.normal(size=shape)])])
        raw = rng.random(k) + 1e-6
        w = ScoreVector({c: float(v) for c, v in enumerate(raw / raw.sum())})
        still = [ClientUpdate(c, g - g.copy(), 1) for c in range(k)]
        fixed_ok &= aggregate(g, still, w).equals(g)
        clients = [rng.normal(size=shape) for _ in range(k)]
        ups = [ClientUpdate(c, g - LayeredParams([("w", [clients[c]])]), 1) for c in range(k)]
        new = aggregate(g, ups, w)["w"][0]
        lo, hi = np.min(clients, axis=0), np.max(clients, axis=0)
        hull_excess = max(hull_excess, float(np.max(np.maximum(lo - new, new - hi))))
    elapsed = time.perf_counter() - t0
    ok = fixed_ok and hull_excess <= 1e-12 and elapsed < 1.0
    report("C6 fixed point / convex hull", ok, f"fixed point exact: {fixed_ok}, max hull excess="
                                               f"{max(hull_excess, 0.0):.1e}, {elapsed:.2f}s")
    assert ok


def _mean_tv(alpha: float, seeds: int) -> float:
    labels = np.repeat(np.arange(10), 1000)
    ds = Dataset(np.zeros((labels.size, 1)), labels, 10)
    tvs = []
    for seed in range(seeds):
        part = dirichlet_partition(ds, 10, alpha, seed)
        for ix in part.client_indices:
            frac = np.bincount(labels[ix], minlength=10) / ix.size
            tvs.append(0.5 * np.abs(frac - 0.1).sum())
    return float(np.mean(tvs))


def test_c7_dirichlet_partitioner(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    valid, infeasible = 0, 0
    # an infeasible (alpha, K, N) draw ends in PartitionError by contract; draw until 200 partitions exist
    while valid < 200 and infeasible < 200:
        c, k = int(rng.integers(1, 11)), int(rng.integers(1, 11))
        n_per = int(rng.integers(max(1, k), 60))
        alpha = float(10 ** rng.uniform(-1.5, 2))
        ds = Dataset(np.zeros((c * n_per, 1)), np.repeat(np.arange(c), n_per), c)
        try:
            part = dirichlet_partition(ds, k, alpha, int(rng.integers(2**31)))
        except PartitionError:
            infeasible += 1
            continue
        allix = np.concatenate(part.client_indices)
        if not (np.array_equal(np.sort(allix), np.arange(len(ds))) and min(part.sizes()) > 0):
            break
        valid += 1
    injected = dirichlet_partition(Dataset(np.zeros((10, 1)), np.zeros(10, dtype=int), 1), 2, 1.0,
                                   proportions=[[0.3, 0.7]]).sizes()
    alphas = [0.05, 0.1, 1.0, 10.0, 100.0]
    tv = [_mean_tv(a, 20) for a in alphas]
    monotone = all(a > b for a, b in zip(tv, tv[1:]))
    elapsed = time.perf_counter() - t0
    ok = valid == 200 and injected == [3, 7] and \
        list(apportion(10, [0.3, 0.7])) == [3, 7] and monotone and elapsed < 30.0
    report("C7 Dirichlet partitioner", ok, f"{valid}/200 partitions valid ({infeasible} infeasible draws raised), injected={injected}, "
                                           f"mean TV={[round(v, 4) for v in tv]}, {elapsed:.1f}s")
    assert ok


C8_BASE = ExperimentConfig(num_classes=5, samples_per_class=1540, feature_dim=8, class_separation=3.0,
                           noise_std=1.5, hidden=(16,), num_clients=10, join_ratio=0.5, rounds=40,
                           local_epochs=5, batch_size=32, lr=0.01)


@pytest.mark.slow
def test_c8_directional_benefit(report):
    t0 = time.perf_counter()
    means = {}
    for alpha in (0.05, 100.0):
        for strategy in ("fedavg", "fedvg"):
            accs = [run_experiment(replace(C8_BASE, alpha=alpha, strategy=strategy, seed=s)).best_acc
                    for s in range(5)]
            means[(strategy, alpha)] = float(np.mean(accs))
    elapsed = time.perf_counter() - t0
    gap_hi = 100 * (means[("fedvg", 0.05)] - means[("fedavg", 0.05)])
    gap_lo = 100 * abs(means[("fedvg", 100.0)] - means[("fedavg", 100.0)])
    ok = gap_hi >= -1.0 and gap_lo < 5.0 and elapsed < 600.0
    report("C8 directional benefit", ok, f"alpha=0.05 FedVG-FedAvg={gap_hi:+.2f} pts, alpha=100 |diff|="
                                         f"{gap_lo:.2f} pts, means={ {f'{s}@{a}': round(v, 4) for (s, a), v in means.items()} }, "
                                         f"{elapsed:.0f}s")
    assert ok


@pytest.mark.slow
def test_c9_balanced_client_ablation(report):
    t0 = time.perf_counter()
    wins = {"l1": 0, "l2": 0}
    for seed in range(5):
        res = balanced_client_ablation(AblationConfig(seed=seed))
        for norm in wins:
            wins[norm] += res.argmax_client(norm) == res.balanced_client
    elapsed = time.perf_counter() - t0
    ok = all(v >= 4 for v in wins.values()) and elapsed < 600.0
    report("C9 balanced-client ablation", ok, f"balanced client has max final-quarter weight in {wins} of 5 seeds, "
                                              f"{elapsed:.0f}s")
    assert ok


def test_c10_cli_determinism(report, tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "exp.ini"
    cfg.write_text("[data]\nsamples_per_class = 100\n\n[federation]\nstrategy = fedvg\nnum_clients = 5\n"
                   "join_ratio = 0.6\nrounds = 5\n\n[training]\nlocal_epochs = 2\n")
    codes = [main(["run", str(cfg), "--out", str(tmp_path / d), "--seed", "5"]) for d in ("a", "b")]
    same = {name: (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
            for name in ("rounds.csv", "scores.csv", "summary.json")}
    elapsed = time.perf_counter() - t0
    ok = codes == [0, 0] and all(same.values()) and elapsed < 60.0
    report("C10 CLI determinism", ok, f"exit codes {codes}, byte-identical {same}, {elapsed:.1f}s")
    assert ok
