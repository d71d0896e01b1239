"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one `ACCEPTANCE <n> [PASS|FAIL] <name>` line (visible
with `pytest -s tests/test_acceptance.py`).
"""

import time

import numpy as np

from harecast.attention import LinearHead
from harecast.bounds import (
    DistributionSpec,
    check_lemma1,
    check_theorem1,
    draw_samples,
    linear_map,
    matched_variance_targets,
)
from harecast.cli import main
from harecast.gradcheck import objective_gradcheck
from harecast.hare import EnergyBatch, partition_heads
from harecast.metrics import (
    ContingencyCounts,
    SEVIR_THRESHOLDS,
    contingency,
    csi,
    csi_m,
    hss,
    paired_t_test,
    pooled_csi,
    ssim,
)
from harecast.nowcast.training import TrainConfig, train
from harecast.tensor_core import SeededRng
from harecast.trace import write_trace


def report(num: int, name: str, ok: bool) -> None:
    print(f"\nACCEPTANCE {num} [{'PASS' if ok else 'FAIL'}] {name}")
    assert ok, f"acceptance criterion {num} failed: {name}"


def test_criterion_1_gradient_correctness():
    t0 = time.time()
    ok = True
    worst = 0.0
    for seed in range(20):
        for hare_only in (True, False):
            rep = objective_gradcheck(seed, hare_only=hare_only)
            ok &= rep.ok
            worst = max(worst, rep.max_rel_err)
    elapsed = time.time() - t0
    ok &= worst < 1e-5
    ok &= elapsed < 60.0
    report(1, f"end-to-end gradients vs finite differences "
              f"(worst rel err {worst:.3g}, {elapsed:.1f}s)", ok)


def test_criterion_2_error_lower_bound_unconditional():
    violations = 0
    trials, per_draw = 10_000, 32
    for dim in (1, 4, 16):
        rng = SeededRng(202, stream=dim)
        y = rng.normal((trials, per_draw, dim)) * (0.5 + rng.uniform((trials, 1, 1)))
        yhat = (
            (rng.uniform((trials, 1, 1)) * 2 - 1) * y
            + rng.normal((trials, per_draw, dim)) * rng.uniform((trials, 1, 1))
            + rng.normal((trials, 1, dim))
        )
        mse = np.mean(np.sum((y - yhat) ** 2, axis=2), axis=1)
        bias_sq = np.sum((yhat.mean(axis=1) - y.mean(axis=1)) ** 2, axis=1)
        vy = np.mean(np.sum((y - y.mean(axis=1, keepdims=True)) ** 2, axis=2), axis=1)
        vyh = np.mean(np.sum((yhat - yhat.mean(axis=1, keepdims=True)) ** 2, axis=2), axis=1)
        rhs = bias_sq + (np.sqrt(vyh) - np.sqrt(vy)) ** 2
        violations += int(np.sum(mse - rhs < -1e-10 * np.maximum(1.0, np.abs(mse))))
    report(2, f"error lower bound, 3x10^4 joint draws ({violations} violations)", violations == 0)


def test_criterion_3_head_variance_propagation():
    kinds = ("gaussian", "mixture", "attention_pushforward")
    ok = True
    for i in range(200):
        rng = SeededRng(300 + i)
        dim = (2, 3, 4, 6)[i % 4]
        kind = kinds[i % 3] if dim >= 4 and dim % 2 == 0 else "gaussian"
        f = draw_samples(DistributionSpec(kind=kind, dim=dim, n=10_000, seed=300 + i))
        w = rng.normal((dim, dim))
        rep = check_lemma1(LinearHead(w=w, b=rng.normal((dim,))), f)
        ok &= rep.holds
    eq_f = draw_samples(DistributionSpec(kind="gaussian", dim=3, n=10_000, seed=999))
    eq = check_lemma1(LinearHead.from_matrix(2.0 * np.eye(3)), eq_f)
    eq_gap = abs(eq.lhs - eq.rhs) / eq.rhs
    ok &= eq_gap < 0.005
    report(3, f"variance propagation, 200 pairs (equality gap {eq_gap:.2e})", ok)


def test_criterion_4_chained_mse_bound():
    # Analytic equality configuration at 1e6 samples.
    x = SeededRng(404, stream=1).normal((1_000_000, 1))
    res = check_theorem1(x, linear_map(np.array([[2.0]])),
                         LinearHead.from_matrix(np.array([[1.0]])), x,
                         check_reduced_forms=True)
    ok = not res.refused
    by_name = {r.name: r for r in res.reports}
    reduced = by_name["reduced_input_variance"]
    eq_gap = abs(reduced.lhs - reduced.rhs) / reduced.lhs
    ok &= eq_gap < 0.005
    ok &= all(r.holds for r in res.reports)

    # 100 random admissible configurations: every bound form holds.
    for i in range(100):
        rng = SeededRng(450 + i)
        dim = (1, 2, 3, 4)[i % 4]
        xs = draw_samples(DistributionSpec(
            kind="gaussian" if i % 2 else "mixture", dim=dim, n=10_000, seed=460 + i))
        gain = 1.2 + rng.uniform((dim,)) * 1.5
        q1, r1 = np.linalg.qr(rng.normal((dim, dim)))
        q1 = q1 * np.sign(np.diag(r1))
        fmap = linear_map(q1 @ np.diag(gain))
        s = 0.95 + rng.uniform((dim,))
        head = LinearHead(w=q1.T @ np.diag(s), b=rng.normal((dim,)))
        ys = matched_variance_targets(xs, rng.spawn(3))
        r = check_theorem1(xs, fmap, head, ys)
        ok &= (not r.refused) and all(rep.holds for rep in r.reports)

    # Inadmissible configurations must be refused.
    xs = SeededRng(470).normal((4_000, 2))
    sub = check_theorem1(xs, linear_map(0.3 * np.eye(2)), LinearHead.from_matrix(np.eye(2)), xs)
    mismatch = check_theorem1(xs, linear_map(2.0 * np.eye(2)),
                              LinearHead.from_matrix(np.eye(2)), 3.0 * xs)
    ok &= sub.refused and mismatch.refused
    report(4, f"chained MSE bound (equality gap {eq_gap:.2e}, refusals honored)", ok)


def test_criterion_5_partition_invariants():
    rng = SeededRng(505)
    exceptions = 0
    for _ in range(100_000):
        m = int(rng.integers(1, 13))
        energies = np.abs(rng.normal((m,))) * float(10.0 ** rng.integers(-2, 3))
        eb = EnergyBatch(energies=np.stack([energies, energies]),
                         head_means=energies, mean_energy=float(energies.mean()))
        for alpha in (0.5, 0.75, 0.9):
            part = partition_heads(eb, alpha)
            members = part.strong + part.contextual + part.weak
            if sorted(members) != list(range(m)):
                exceptions += 1
            if len(part.strong) != 1 or set(part.strong) & set(part.weak):
                exceptions += 1
    report(5, f"partition invariants over 10^5 vectors x 3 alphas ({exceptions} exceptions)",
           exceptions == 0)


TOY = dict(
    steps=400, learning_rate=5e-4, n_train=48, n_val=128, n_test=8,
    batch_size=8, probe_batches=16, trace_every=50,
)


def test_criterion_6_variance_reduction():
    t0 = time.time()
    with_hare = train(TrainConfig(seed=7, lambda_hare=1.0, **TOY))
    without = train(TrainConfig(seed=7, lambda_hare=0.0, **TOY))
    v1 = with_hare.probe_summary["normalized_energy_variance"]
    v0 = without.probe_summary["normalized_energy_variance"]
    reduction = (v0 - v1) / v0
    elapsed = time.time() - t0
    ok = with_hare.probe_summary["batches"] >= 16
    ok &= reduction >= 0.20
    ok &= elapsed < 1800.0
    report(6, f"stabilization lowers normalized energy variance "
              f"({reduction:.1%} reduction, {elapsed:.0f}s)", ok)


def test_criterion_7_exact_ablation_switch():
    cfg = TrainConfig(
        seed=5, height=16, width=16, frames_in=2, frames_out=2, patch=8,
        dim=8, layers=1, heads=2, den_base=4, den_mid=6, den_bottleneck=8,
        den_heads=2, cond_dim=4, batch_size=2, steps=6,
        n_train=4, n_val=2, n_test=2, probe_batches=1, lambda_hare=0.0,
    )
    zero_weight = train(cfg)
    disabled = train(cfg, hare_enabled=False)
    identical = all(
        np.array_equal(zero_weight.model.params[k], disabled.model.params[k])
        for k in zero_weight.model.params
    )
    report(7, "zero-weight run bitwise equals module-disabled build", identical)


def test_criterion_8_batch_size_smoothness():
    tail_vars = []
    for bs in (2, 4, 8):
        cfg = TrainConfig(seed=11, steps=400, learning_rate=5e-4, n_train=32,
                          n_val=16, n_test=8, probe_batches=2, batch_size=bs,
                          trace_every=0)
        r = train(cfg)
        series = np.array([row["hare"] for row in r.losses])
        tail = series[int(0.75 * len(series)):]
        tail_vars.append(float(np.var(tail)))
    monotone = tail_vars[0] >= tail_vars[1] >= tail_vars[2]
    report(8, f"hare-loss tail variance non-increasing in batch size {tail_vars}", monotone)


def test_criterion_9_metrics_unit_suite():
    ok = True
    # Perfect forecast.
    field = SeededRng(901).uniform((3, 16, 16))
    ok &= csi_m(field, field.copy(), SEVIR_THRESHOLDS) == 1.0
    ok &= hss(contingency(field, field.copy(), 74)) == 1.0
    ok &= abs(ssim(field, field.copy()) - 1.0) < 1e-12
    # Constructed 4-pixel contingency.
    pred = np.array([[1.0, 1.0], [1.0, 0.4]])
    truth = np.array([[1.0, 1.0], [0.4, 1.0]])
    cc = contingency(pred, truth, 200)
    ok &= (cc.hits, cc.false_alarms, cc.misses) == (2, 1, 1) and csi(cc) == 0.5
    ok &= hss(ContingencyCounts(3, 1, 1, 3)) == 0.5
    ok &= hss(ContingencyCounts(1, 1, 1, 1)) == 0.0
    # Pooling widens tolerance on random pairs.
    rng = SeededRng(902)
    pooling_ok = True
    for trial in range(1000):
        p = rng.uniform((16, 16))
        t = rng.uniform((16, 16))
        thr = (74, 133, 160)[trial % 3]
        pooling_ok &= pooled_csi(p, t, thr, 4) >= csi(contingency(p, t, thr))
    ok &= pooling_ok
    # Null calibration of the paired t test.
    rng = SeededRng(903)
    rejections = 0
    trials = 10_000
    for _ in range(trials):
        a = rng.normal((16,))
        b = rng.normal((16,))
        if paired_t_test(a, b).p < 0.05:
            rejections += 1
    rate = rejections / trials
    ok &= abs(rate - 0.05) < 0.01
    report(9, f"metrics unit suite (null rejection rate {rate:.4f})", ok)


def test_criterion_10_cli_determinism(tmp_path):
    from test_trace_cli import small_trace

    trace_path = tmp_path / "trace.jsonl"
    write_trace(trace_path, small_trace())
    micro = ["--steps", "3", "--n-train", "4", "--n-val", "2", "--n-test", "2",
             "--batch-size", "2", "--probe-batches", "1", "--trace-every", "1",
             "--height", "16", "--width", "16", "--frames-in", "2", "--frames-out", "2",
             "--patch", "8", "--dim", "8", "--layers", "1", "--heads", "2",
             "--den-base", "4", "--den-mid", "6", "--den-bottleneck", "8"]
    runs = {
        "analyze": lambda d: main(["analyze", "--input", str(trace_path), "--split-by-csi",
                                   "--out-csv", str(d / "hm.csv"), "--out-svg", str(d / "hm.svg")]),
        "verify": lambda d: main(["verify-theory", "--trials", "50", "--seed", "4",
                                  "--report", str(d / "report.txt")]),
        "train": lambda d: main(["train-toy", "--out", str(d / "run")] + micro),
    }
    ok = True
    for name, fn in runs.items():
        artifacts = []
        for tag in ("a", "b"):
            d = tmp_path / f"{name}_{tag}"
            d.mkdir()
            (d / "run").mkdir(exist_ok=True)
            code = fn(d)
            ok &= code == 0
            blobs = sorted(p for p in d.rglob("*") if p.is_file())
            artifacts.append([p.read_bytes() for p in blobs])
        ok &= artifacts[0] == artifacts[1] and len(artifacts[0]) > 0
    report(10, "CLI artifacts byte-identical across reruns", ok)
