"""The eight acceptance criteria at their stated tolerances.

Each test records a single PASS/FAIL line, repeated in the session summary.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from loradet.config import ExperimentConfig
from loradet.data import mixture, stack_images
from loradet.delta_package import (
    UplinkBudget,
    apply_package,
    build_package,
    full_archive,
    uplink_time,
    verify_archive,
)
from loradet.detector import DetectorModel
from loradet.gradcheck import check_detector, check_lora_linear, check_swin_stage, tiny_detector_config
from loradet.linalg import Rng, approx_error, frobenius, svd, truncate_svd
from loradet.lora import LoraLinear, lora_forward, lora_init, lora_merge, param_budget
from loradet.policy import FinetunePolicy, apply_policy, trainable_names
from loradet.protocol import gap_recovery, run_protocol
from loradet.rank_analysis import analyze_matrix, select_rank, tail_errors
from loradet.storage import model_from_archive
from loradet.training import OptimizerConfig, train

from test_detector import _tiny_samples
from test_package import adapted_model


def test_criterion_1_table_ratios(criterion):
    table = [((96, 96, 48), "1"), ((192, 192, 48), "0.5"), ((384, 384, 48), "0.25"), ((768, 768, 48), "0.125"), ((1024, 12544, 64), "0.068"), ((1024, 1024, 16), "0.03125")]
    bad = []
    for (d, k, r), printed in table:
        p = param_budget(d, k, r)
        places = len(printed.split(".")[1]) if "." in printed else 0
        if round(p.compressed_ratio, places) != float(printed) or p.ratio_exact != Fraction(r * (d + k), d * k):
            bad.append((d, k, r, p.compressed_ratio))
    if abs(param_budget(1024, 12544, 64).compressed_ratio - 0.0676) > 5e-5:
        bad.append("0.0676")
    criterion(1, not bad, f"six compressed ratios to printed rounding {'ok' if not bad else bad}")
    assert not bad


def test_criterion_2_neutrality_and_merge(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    w = rng.normal(size=(16, 12))
    layer = lora_init(w, 4, rng=Rng(1))
    x = rng.normal(size=(12, 5))
    neutral = float(np.max(np.abs(lora_forward(layer, x) - w @ x)))
    worst = 0.0
    for seed in range(100):
        g = np.random.default_rng(100 + seed)
        layer = LoraLinear(g.normal(size=(10, 8)), g.normal(size=(3, 8)), g.normal(size=(10, 3)), g.normal(size=10))
        xs = g.normal(size=(8, 4))
        before = lora_forward(layer, xs)
        lora_merge(layer)
        worst = max(worst, frobenius(lora_forward(layer, xs) - before) / frobenius(before))
    elapsed = time.perf_counter() - start
    ok = neutral <= 1e-15 and worst <= 1e-12 and elapsed < 1
    criterion(2, ok, f"zero-init max-abs {neutral:.1e}, merge max rel {worst:.1e}, {elapsed:.2f} s")
    assert ok


def test_criterion_3_gradient_suite(criterion):
    start = time.perf_counter()
    reports = [check_lora_linear(seed=0, tol=1e-6), check_swin_stage(seed=0)] + check_detector(seed=0)
    elapsed = time.perf_counter() - start
    ok = all(r.ok for r in reports) and elapsed < 300
    worst = max(r.max_rel_error for r in reports)
    criterion(3, ok, f"{sum(r.checked for r in reports)} scalars in {len(reports)} checks, max rel {worst:.1e}, {elapsed:.0f} s")
    assert ok, [str(r) for r in reports if not r.ok]


def test_criterion_4_svd_and_eckart_young(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    recon = 0.0
    wins = 0
    tail = 0.0
    for trial in range(100):
        d, k = (int(v) for v in rng.integers(1, 65, 2))
        w = rng.normal(size=(d, k))
        s = svd(w)
        recon = max(recon, frobenius(s.reconstruct() - w) / frobenius(w))
        r = int(rng.integers(1, min(d, k) + 1))
        u, sig, vt = truncate_svd(s, r)
        best = approx_error(w, u @ sig @ vt)
        tail = max(tail, abs(best - tail_errors(s.sigma)[r]))
        alts = [approx_error(w, rng.normal(size=(d, r)) @ rng.normal(size=(r, k))) for _ in range(100)]
        wins += all(best <= a for a in alts)
    elapsed = time.perf_counter() - start
    ok = recon <= 1e-8 and wins == 100 and tail <= 1e-9 and elapsed < 60
    criterion(4, ok, f"reconstruction {recon:.1e}, truncation wins {wins}/100, tail identity {tail:.1e}, {elapsed:.1f} s")
    assert ok


def test_criterion_5_rank_analysis(criterion):
    start = time.perf_counter()
    problems = []
    for q, (d, k) in zip((1, 3, 6), ((20, 20), (32, 48), (40, 24))):
        rng = np.random.default_rng(q)
        curve = analyze_matrix(rng.normal(size=(d, q)) @ rng.normal(size=(q, k)), range(1, min(d, k) + 1))
        if any(pt.relative_error > 1e-9 for pt in curve.points if pt.r >= q):
            problems.append(f"planted q={q} error above 1e-9")
        if select_rank(curve, error_tolerance=1e-6).rank != q:
            problems.append(f"planted q={q} not selected")
    halves = []
    for seed, (d, k) in enumerate(((64, 64), (48, 64), (32, 32))):
        w = np.random.default_rng(50 + seed).normal(size=(d, k))
        n = min(d, k)
        curve = analyze_matrix(w, range(1, n + 1))
        errs = curve.relative_errors
        if not np.all(np.diff(errs[:-1]) < 0):
            problems.append(f"gaussian {d}x{k} not strictly decreasing")
        halves.append(errs[n // 2 - 1])
        if errs[n // 2 - 1] <= 0.1:
            problems.append(f"gaussian {d}x{k} error at r=n/2 only {errs[n // 2 - 1]:.3f}")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 60
    criterion(5, ok, f"planted ranks recovered, gaussian error at n/2 >= {min(halves):.3f}, {elapsed:.1f} s {problems or ''}".rstrip())
    assert ok, problems


def test_criterion_6_policy_and_packaging(criterion):
    start = time.perf_counter()
    problems = []
    samples = _tiny_samples(4)
    for policy in FinetunePolicy:
        m = DetectorModel.create(tiny_detector_config(), 0)
        m.attach_lora(Rng(1))
        before = {k: v.tobytes() for k, v in m.params.items()}
        train(m, policy, samples, 1, OptimizerConfig(lr=1e-3, batch_size=2))
        trainable = set(trainable_names(m, policy))
        if any(m.params[k].tobytes() != before[k] for k in m.params if k not in trainable):
            problems.append(f"{policy.value} touched a frozen tensor")
    model = adapted_model(1)
    full = len(full_archive(model).to_bytes())
    gaps = []
    for policy in FinetunePolicy:
        pkg = build_package(model, policy)
        if set(pkg.names()) != set(trainable_names(model, policy)):
            problems.append(f"{policy.value} package set differs from trainable set")
        gaps.append(abs(len(pkg.to_bytes()) / full - apply_policy(model, policy).ratio))
    if max(gaps) > 0.01:
        problems.append(f"byte ratio off by {max(gaps):.4f}")
    images = stack_images(mixture(3, 2))
    ref = model.predict(images)
    base = full_archive(DetectorModel(model.config, {k: model.params[k] for k in model.base_names()}))
    pkg = build_package(model, "LoraDetHybrid")
    deployed = model_from_archive(model.config, apply_package(base, pkg))
    out = deployed.predict(images)
    equiv = max(float(np.max(np.abs(out[k] - ref[k])) / np.max(np.abs(ref[k]))) for k in ("cls", "reg"))
    if equiv > 1e-6:
        problems.append(f"apply round trip off by {equiv:.1e}")
    blob = pkg.to_bytes()
    rng = np.random.default_rng(6)
    missed = 0
    for _ in range(500):
        bad = bytearray(blob)
        bad[int(rng.integers(len(bad)))] ^= 1 << int(rng.integers(8))
        missed += verify_archive(bytes(bad)).ok
    if missed:
        problems.append(f"{missed} bit flips undetected")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 120
    criterion(6, ok, f"freeze contract under {len(FinetunePolicy)} policies, byte ratio gap {max(gaps):.4f}, apply rel {equiv:.1e}, {500 - missed}/500 flips caught, {elapsed:.0f} s {problems or ''}".rstrip())
    assert ok, problems


SEEDS = (0, 1, 2)
POLICIES = ["Pretrained", "FullFinetune", "LoraDetHybrid", "BackboneOnly", "HeadOnly"]


@pytest.mark.slow
def test_criterion_7_finetuning_efficacy(criterion):
    start = time.perf_counter()
    ap = {p: [] for p in POLICIES}
    ratio = 0.0
    for seed in SEEDS:
        results = run_protocol(ExperimentConfig(seed=seed), POLICIES)
        for p in POLICIES:
            ap[p].append(results[p].metrics.ap50)
        ratio = results["LoraDetHybrid"].ratio
        print(f"seed {seed}: " + ", ".join(f"{p} {ap[p][-1]:.4f}" for p in POLICIES))
    mean = {p: float(np.mean(v)) for p, v in ap.items()}
    recovery = gap_recovery(mean["Pretrained"], mean["FullFinetune"], mean["LoraDetHybrid"])
    checks = {
        "ratio<=0.15": ratio <= 0.15,
        "recovery>=0.7": recovery >= 0.7,
        "BackboneOnly<hybrid": mean["BackboneOnly"] < mean["LoraDetHybrid"],
        "HeadOnly<hybrid": mean["HeadOnly"] < mean["LoraDetHybrid"],
    }
    elapsed = time.perf_counter() - start
    checks["runtime<30min"] = elapsed < 1800
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    criterion(
        7,
        ok,
        f"ratio {ratio:.4f}, recovery {recovery:.3f}, mean AP50 "
        + ", ".join(f"{p} {mean[p]:.4f}" for p in POLICIES)
        + f", {elapsed / 60:.1f} min" + (f"; failed {failed}" if failed else ""),
    )
    assert ok, failed


def test_criterion_8_uplink(criterion):
    budget = UplinkBudget(1e6)
    lora = uplink_time(5_520_000 * 4, budget)
    full = uplink_time(44_760_000 * 4, budget)
    ok = lora == 176.64 and full == 1432.32 and round(lora / full, 4) == 0.1233
    criterion(8, ok, f"{lora:.2f} s vs {full:.2f} s, ratio {lora / full:.4f}")
    assert ok
