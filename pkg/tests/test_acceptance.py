"""Numbered acceptance checks for the whole engine.

Each test covers one acceptance criterion end to end and prints a single
"criterion N: PASS/FAIL" line with the measured quantities, so a plain
pytest run doubles as the acceptance report.  Tolerances are asserted
exactly as stated; timed checks measure wall clock on this machine.
"""

import itertools
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from tarot.attribution import AttributionScores, SubsetArchive, lds, spearman
from tarot.metric import WhitenedFeatures, apply_whitening, fit_whitening, normalize_rows
from tarot.ot import CostMatrix, MassVector, cost_matrix, exact_ot, ot_distance, solve
from tarot.selection import select_fixed, select_otm, selection_ratio
from tarot.synth import cluster_features, copies_plus_far, linear_datamodel
from tarot.weighting import assign_weights, default_repetition

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

THREADS = min(8, os.cpu_count() or 1)


def report(num: int, ok: bool, detail: str) -> None:
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


def unit_rows(rng, n, d, prefix):
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    return WhitenedFeatures(np.ascontiguousarray(x), tuple(f"{prefix}{i}" for i in range(n)))


def subset(feats: WhitenedFeatures, idx) -> WhitenedFeatures:
    idx = np.asarray(sorted(idx), dtype=np.int64)
    return WhitenedFeatures(feats.data[idx], tuple(feats.ids[int(i)] for i in idx))


def test_01_whitening_identity_and_method_agreement():
    rng = np.random.Generator(np.random.Philox(key=np.uint64(101)))
    t0 = time.perf_counter()
    worst_cov = 0.0
    worst_pair = 0.0
    for _ in range(50):
        n = int(rng.integers(50, 501))
        d = int(rng.integers(2, 33))
        mix = rng.standard_normal((d, d))
        raw = rng.standard_normal((n, d)) @ mix + 5.0 * rng.standard_normal(d)

        per_method = {}
        for method in ("cholesky", "zca"):
            t = fit_whitening(raw, method=method, eps=0.0)
            w = apply_whitening(t, raw)
            cov = (w - w.mean(axis=0)).T @ (w - w.mean(axis=0)) / n
            rel = np.linalg.norm(cov - np.eye(d)) / np.linalg.norm(np.eye(d))
            worst_cov = max(worst_cov, float(rel))
            per_method[method] = normalize_rows(w)

        pair_c = cost_matrix(per_method["cholesky"], per_method["cholesky"]).values
        pair_z = cost_matrix(per_method["zca"], per_method["zca"]).values
        # relative agreement over distinct pairs; a self-pair's distance is
        # identically zero, where a ratio is ill-posed.  The absolute floor
        # is the same 1e-8 anchored to the metric's diameter 2.
        off = ~np.eye(pair_c.shape[0], dtype=bool)
        gap = np.abs(pair_c - pair_z)[off] - 1e-8 * np.abs(pair_z)[off]
        worst_pair = max(worst_pair, float(gap.max()))
    dt = time.perf_counter() - t0
    ok = worst_cov <= 1e-6 and worst_pair <= 2e-8 and dt < 10.0
    report(
        1,
        ok,
        f"50 datasets: cov-vs-identity rel frobenius max {worst_cov:.3e} (<=1e-6), "
        f"cholesky-vs-zca pair gap max {worst_pair:.3e} (<=2e-8 = 1e-8 of diameter), "
        f"{dt:.2f}s (<10s)",
    )


def test_02_sinkhorn_matches_exact_within_entropic_bound():
    rng = np.random.Generator(np.random.Philox(key=np.uint64(202)))
    t0 = time.perf_counter()
    worst_margin = -np.inf
    worst_violation = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 21))
        m = int(rng.integers(1, 21))
        c = CostMatrix(
            2.0 * rng.random((n, m)),
            tuple(f"r{i}" for i in range(n)),
            tuple(f"c{j}" for j in range(m)),
        )
        a, b = MassVector.uniform(n), MassVector.uniform(m)
        ref = exact_ot(c, a, b).cost
        plan = solve(
            c, a, b, "sinkhorn", reg=0.004, anneal=True, tol=1e-10, round_plan=True, threads=1
        )
        bound = 0.004 * math.log(n * m) + 1e-6
        worst_margin = max(worst_margin, abs(plan.cost - ref) - bound)
        worst_violation = max(worst_violation, plan.marginal_violation)
    dt = time.perf_counter() - t0
    ok = worst_margin <= 0.0 and worst_violation < 1e-6 and dt < 30.0
    report(
        2,
        ok,
        f"100 instances: |sinkhorn-exact| over bound by {worst_margin:.3e} (<=0), "
        f"marginal violation max {worst_violation:.3e} (<1e-6), {dt:.2f}s (<30s)",
    )


def test_03_exact_solver_matches_permutation_enumeration():
    rng = np.random.Generator(np.random.Philox(key=np.uint64(303)))
    worst = 0.0
    for _ in range(50):
        vals = 2.0 * rng.random((4, 4))
        c = CostMatrix(vals, ("a", "b", "c", "d"), ("w", "x", "y", "z"))
        got = exact_ot(c, MassVector.uniform(4), MassVector.uniform(4)).cost
        best = min(
            sum(vals[i, p[i]] for i in range(4)) / 4.0
            for p in itertools.permutations(range(4))
        )
        worst = max(worst, abs(got - best))
    ok = worst <= 1e-10
    report(3, ok, f"50 4x4 instances: |LP - permutation minimum| max {worst:.3e} (<=1e-10)")


def test_04_greedy_matches_exhaustive_on_separated_clusters():
    matches = 0
    worst_excess = 0.0
    for inst in range(20):
        cands, targs, n_near = cluster_features(4, 4, 3, d=6, spread=0.012, seed=400 + inst)
        costs = cost_matrix(cands, targs).values
        assert costs[:n_near].max() < 0.1 and costs[n_near:].min() > 1.5

        got = select_fixed(cands, targs, 4, solver="exact")
        d_greedy = ot_distance(subset(cands, got.selected), targs, "exact")

        best_d, best_set = np.inf, None
        for combo in itertools.combinations(range(8), 4):
            d = ot_distance(subset(cands, combo), targs, "exact")
            if d < best_d:
                best_d, best_set = d, set(combo)
        if set(got.selected) == best_set:
            matches += 1
        else:
            worst_excess = max(worst_excess, d_greedy / best_d)
    ok = matches >= 19 and (matches == 20 or worst_excess <= 1.05)
    report(
        4,
        ok,
        f"exhaustive C(8,4) match on {matches}/20 instances (>=19), "
        f"worst miss ratio {worst_excess if matches < 20 else 1.0:.4f} (<=1.05)",
    )


def test_05_otm_keeps_in_distribution_points_at_the_planted_ratio():
    rng = np.random.Generator(np.random.Philox(key=np.uint64(505)))
    lines = []
    ok = True
    for p, copies in ((0.25, 1), (0.5, 2), (0.75, 3)):
        n_in = copies * 100
        cands, targs = copies_plus_far(100, 400 - n_in, d=8, spread=0.05, seed=50, copies=copies)
        res = select_otm(cands, targs, k_folds=10, seed=1, solver="exact")
        sel = np.asarray(res.selected)
        in_frac = float((sel < n_in).mean())
        ratio = selection_ratio(res, cands.n)

        pool_idx = rng.choice(cands.n, size=200, replace=False)
        d_sel = ot_distance(subset(cands, sel), targs, "exact")
        d_pool = ot_distance(subset(cands, pool_idx), targs, "exact")

        case_ok = in_frac >= 0.95 and abs(ratio - p) <= 0.07 and d_sel < d_pool
        ok = ok and case_ok
        lines.append(
            f"p={p}: in-dist {in_frac:.3f} (>=0.95), ratio {ratio:.3f} (+-0.07), "
            f"d(selected)={d_sel:.4f} < d(pool sample)={d_pool:.4f}"
        )
    report(5, ok, "; ".join(lines))


def test_06_integer_weights_hit_the_budget_and_follow_benefit():
    rng = np.random.Generator(np.random.Philox(key=np.uint64(606)))
    for case in range(1000):
        n = int(rng.integers(1, 65))
        pots = rng.standard_normal(n)
        if case % 3 == 0:
            pots = np.round(pots, 1)  # force ties
        r = n + int(rng.integers(0, 5 * n + 1))
        w = np.asarray(assign_weights(pots, r).weights)
        assert int(w.sum()) == r
        assert w.min() >= 1
        bad = (pots[:, None] < pots[None, :]) & (w[:, None] < w[None, :])
        assert not bad.any(), "weight order disagrees with benefit order"
    ok = default_repetition(100_000, 5_000) == 105_000 and default_repetition(7, 3) == 10
    report(
        6,
        ok,
        "1000 cases: sums exact, all weights >= 1, monotone in benefit; "
        "full-match default equals pool + target count",
    )


def test_07_lds_separates_true_scores_from_noise():
    true_scores, masks, outputs = linear_datamodel(500, 10, 100, mask_fraction=0.5, seed=7)
    archive = SubsetArchive(masks, outputs)
    mean_true = lds(AttributionScores(true_scores, "tracin"), archive).mean
    rng = np.random.Generator(np.random.Philox(key=np.uint64(707)))
    mean_rand = lds(AttributionScores(rng.standard_normal((500, 10)), "tracin"), archive).mean
    hand = spearman(np.array([1.0, 2.0, 3.0, 4.0]), np.array([2.0, 1.0, 4.0, 3.0]))
    ok = mean_true >= 0.95 and mean_rand <= 0.1 and abs(hand - 0.6) <= 1e-12
    report(
        7,
        ok,
        f"true-score LDS {mean_true:.4f} (>=0.95), random-score LDS {mean_rand:.4f} (<=0.1), "
        f"rank-correlation hand case {hand!r} (0.6 +- 1e-12)",
    )


def test_08_selection_output_is_byte_identical_across_thread_counts(tmp_path):
    outputs = {}
    for threads in (1, 4, 8):
        out = tmp_path / f"t{threads}"
        cfg = {
            "candidates": str(FIXTURES / "candidates.manifest.json"),
            "targets": str(FIXTURES / "targets.manifest.json"),
            "selection": {"mode": "otm", "k_folds": 2, "seed": 1},
            "solver": {"name": "sinkhorn", "reg": 0.01},
            "out": str(out),
        }
        cfg_path = tmp_path / f"cfg{threads}.json"
        cfg_path.write_text(json.dumps(cfg))
        proc = subprocess.run(
            [
                sys.executable, "-m", "tarot.cli", "select",
                "--config", str(cfg_path), "--threads", str(threads),
            ],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        outputs[threads] = (out / "selection.json").read_bytes()
    ok = outputs[1] == outputs[4] == outputs[8]
    report(8, ok, "selection JSON byte-identical across --threads 1/4/8")


@pytest.mark.slow
def test_09_selection_finishes_at_scale():
    rng = np.random.Generator(np.random.Philox(key=np.uint64(909)))
    cands = unit_rows(rng, 100_000, 256, "c")
    targs = unit_rows(rng, 5_000, 256, "t")

    t0 = time.perf_counter()
    fixed = select_fixed(cands, targs, 10_000, solver="sinkhorn", threads=THREADS)
    dt_fixed = time.perf_counter() - t0
    assert fixed.size == 10_000

    t0 = time.perf_counter()
    otm = select_otm(cands, targs, k_folds=10, seed=0, solver="sinkhorn", threads=THREADS)
    dt_otm = time.perf_counter() - t0
    assert otm.size > 0

    ok = dt_fixed < 120.0 and dt_otm < 300.0
    report(
        9,
        ok,
        f"N=100000 M=5000 d=256: fixed S=10000 in {dt_fixed:.1f}s (<120s), "
        f"OTM k=10 in {dt_otm:.1f}s (<300s), {THREADS} threads",
    )
