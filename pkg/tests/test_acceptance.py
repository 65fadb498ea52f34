"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one PASS/FAIL line (bypassing capture, so the lines show
under plain ``pytest``). The expensive criteria share one dataset and one
SFT stage through module-scoped fixtures; sharing is sound because
training is deterministic and the cached model is copied before reuse.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from prefopt.beta import BetaConfig, DualMargins, dynamic_beta
from prefopt.core import LikelihoodRecord, LogRatioSet
from prefopt.harness import METRIC_CSVS, RunConfig, execute_run, load_dataset, run_timing, run_training
from prefopt.losses import (
    BetaVector,
    decompose_negative_gradient,
    dmpo_loss,
    dpo_loss,
    mppo_loss,
    sdpo_loss,
)
from prefopt.metrics import hit_ratio_at_1
from prefopt.policy import PolicyModel, ReferenceModel, Variant, po_forward, parse_variant
from prefopt.selection import kmeans_1d, select_boundary
from prefopt.data import build_eval_candidates, SplitEntry
from prefopt.core import Context, PreferenceInstance

from oracles import central_diff_grads, grads_match, kmeans_1d_oracle, segment_wcss, select_boundary_oracle

LN2 = math.log(2.0)


@pytest.fixture(autouse=True)
def announce(capsys):
    """Let each criterion print its PASS/FAIL line past pytest's capture."""
    global _CAPSYS
    _CAPSYS = capsys
    yield


def report(criterion: str, ok: bool, detail: str = ""):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    with _CAPSYS.disabled():
        print(line, flush=True)
    assert ok, line


@pytest.fixture(scope="module")
def benchmark():
    """The shipped default benchmark dataset plus a shared SFT cache."""
    cfg = RunConfig()
    return cfg, load_dataset(cfg), {}


def test_criterion_1_losses_at_zero_ratios():
    """All objectives equal ln 2 at all-zero log-ratios, within 1e-12."""
    started = time.perf_counter()
    one = LogRatioSet(0.0, (0.0,))
    many = LogRatioSet(0.0, (0.0,) * 15)
    values = [
        dpo_loss(one, 1.0).value,
        dmpo_loss(many, BetaVector.uniform(1.0, 15)).value,
        sdpo_loss(one, BetaVector.uniform(1.0, 1)).value,
        mppo_loss(many, BetaVector.uniform(1.0, 15)).value,
    ]
    ok = all(abs(v - LN2) < 1e-12 for v in values) and time.perf_counter() - started < 1.0
    report("1 loss values at zero ratios", ok, f"max dev {max(abs(v - LN2) for v in values):.2e}")


def test_criterion_2_gradient_fidelity():
    """Analytic gradients vs central differences: losses at 1e-5, end-to-end at 1e-4."""
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    ok = True
    for case in range(1000):
        kind = case % 4
        if kind == 0:
            ratios = LogRatioSet(float(rng.uniform(-10, 10)), (float(rng.uniform(-10, 10)),))
            beta = float(rng.uniform(0.1, 1.5))
            fn = lambda r, b=beta: dpo_loss(r, b)
        else:
            k = int(rng.integers(1, 16))
            ratios = LogRatioSet(float(rng.uniform(-10, 10)), tuple(rng.uniform(-10, 10, size=k)))
            size = int(rng.integers(1, k + 1))
            active = tuple(sorted(rng.choice(k, size=size, replace=False).tolist()))
            betas = BetaVector(tuple(rng.uniform(0.1, 1.5, size=size)))
            base = (dmpo_loss, sdpo_loss, mppo_loss)[kind - 1]
            fn = lambda r, f=base, b=betas, a=active: f(r, b, a)
        out = fn(ratios)
        num_pos, num_neg = central_diff_grads(fn, ratios)
        ok &= grads_match(out.grad_pos, num_pos, rtol=1e-5)
        for a, nmr in zip(out.grad_neg, num_neg):
            ok &= grads_match(a, nmr, rtol=1e-5)

    # end-to-end through the policy: 5-item vocab, dim 2, one instance
    ref = ReferenceModel(PolicyModel.initialize(5, 2, seed=91))
    cfg = BetaConfig()
    h = 1e-6
    cases = [("dmpo", [3, 4]), ("sdpo", [3, 4]), ("mppo", [3, 4]), ("dpo", [3])]
    for objective, negatives in cases:
        batch = [PreferenceInstance(Context(user=0, history=(0, 2)), 1, tuple(negatives))]
        model = PolicyModel.initialize(5, 2, seed=90)
        _, grads, _, _ = po_forward(model, ref, batch, objective, Variant.naive(), cfg)
        for name, table in model.params().items():
            for idx in np.ndindex(table.shape):
                table[idx] += h
                hi = po_forward(model, ref, batch, objective, Variant.naive(), cfg)[0]
                table[idx] -= 2 * h
                lo = po_forward(model, ref, batch, objective, Variant.naive(), cfg)[0]
                table[idx] += h
                ok &= grads_match(grads[name][idx], (hi - lo) / (2 * h), rtol=1e-4)
    elapsed = time.perf_counter() - started
    report("2 gradient fidelity", ok and elapsed < 30.0, f"{elapsed:.1f}s")


def test_criterion_3_decomposition_identity():
    """Weighted S/B means reconstruct the full mean gradient within 1e-12."""
    rng = np.random.default_rng(3)
    ok = True
    for _ in range(1000):
        k = int(rng.integers(1, 16))
        grads = rng.uniform(-5, 5, size=k).tolist()
        keep = rng.random(k) < rng.random()
        s_set = tuple(i for i in range(k) if keep[i])
        b_set = tuple(i for i in range(k) if not keep[i])
        _, _, total = decompose_negative_gradient(grads, s_set, b_set)
        ok &= abs(total - math.fsum(grads) / k) < 1e-12
    report("3 gradient decomposition identity", ok)


def test_criterion_4_kmeans_exactness():
    """Dynamic program matches exhaustive enumeration for n <= 10, k <= 3."""
    started = time.perf_counter()
    rng = np.random.default_rng(4)
    ok = True
    for _ in range(1000):
        k = int(rng.integers(1, 4))
        n = int(rng.integers(k, 11))
        values = rng.uniform(-10, 0, size=n).tolist()
        assignments, _ = kmeans_1d(values, k)
        clusters = {}
        for v, label in zip(values, assignments):
            clusters.setdefault(label, []).append(v)
        got = sum(segment_wcss(c) for c in clusters.values())
        _, _, best = kmeans_1d_oracle(values, k)
        ok &= got <= best + 1e-9 * max(1.0, best)
    elapsed = time.perf_counter() - started
    report("4 exact 1-d k-means", ok and elapsed < 10.0, f"{elapsed:.1f}s")


def test_criterion_5_dynamic_beta_contract():
    """Bounds, exact base-weight cases, and strict monotonicity of the beta formula."""
    cfg = BetaConfig(beta0=1.0, alpha=0.5, gamma=6.0)
    lo, hi = cfg.beta0 * (1 - cfg.alpha), cfg.beta0 * (1 + cfg.alpha)
    rng = np.random.default_rng(5)
    ok = True

    def margins(a, c):
        return DualMargins(pos_loglik=float(a), boundary_loglik=0.0, easy_loglik=-float(c))

    # closed bounds hold unconditionally; the open interval is representable
    # whenever the tanh argument is not saturated in float64
    checked = 0
    while checked < 100_000:
        a, c = rng.uniform(-20, 20, size=2)
        m = margins(a, c)
        b = dynamic_beta(m, cfg)
        ok &= lo <= b <= hi
        denom = abs(m.ambiguity) + abs(m.contrast)
        if denom >= 1.0:
            ok &= (lo < b < hi) or b == cfg.beta0
            checked += 1
    # exact base weight when the margin difference hits gamma or both margins vanish
    ok &= dynamic_beta(margins(7.0, 1.0), cfg) == pytest.approx(cfg.beta0, abs=1e-15)
    ok &= dynamic_beta(margins(0.0, 0.0), cfg) == cfg.beta0
    # strict monotonicity in the margin difference at fixed denominator
    for _ in range(1000):
        denom = float(rng.uniform(1.0, 10.0))
        grid_cfg = BetaConfig(beta0=float(rng.uniform(0.2, 2.0)),
                              alpha=float(rng.uniform(0.05, 0.95)),
                              gamma=float(rng.uniform(-denom / 2, denom / 2)))
        xs = np.linspace(-0.9 * denom, 0.9 * denom, 16)
        betas = [dynamic_beta(margins((denom + x) / 2, (denom - x) / 2), grid_cfg) for x in xs]
        ok &= all(p < q for p, q in zip(betas, betas[1:]))
    report("5 dynamic beta contract", ok)


def test_criterion_6_selection_oracle():
    """Staged selection equals brute-force recomputation on 1000 records, k=15."""
    rng = np.random.default_rng(6)
    ok = True
    for case in range(1000):
        pos = float(rng.uniform(-8, -4)) if case % 2 else float(rng.uniform(-1, 0))
        rec = LikelihoodRecord(pos, 0.0, tuple(rng.uniform(-9, -1, size=15)), (0.0,) * 15)
        sel = select_boundary(rec)
        expected, stage = select_boundary_oracle(rec)
        ok &= set(sel.boundary) == expected and sel.stage == stage
    report("6 selection matches brute force", ok)


def test_criterion_7_ablation_reduces_to_naive(benchmark):
    """Both stages ablated with uniform beta walks the exact naive trajectory."""
    cfg, log, sft_cache = benchmark
    ablated = "dynamic:no-stage1,no-stage2,fixed-beta"
    assert parse_variant(ablated)  # sanity: the composition is expressible
    results = {}
    for variant in ("naive", ablated):
        one_epoch = dataclasses.replace(cfg, po_epochs=1, variant=variant)
        results[variant] = run_training(one_epoch, log=log, sft_cache=sft_cache)
    a, b = results["naive"].model, results[ablated].model
    ok = (a.item_embeddings.tobytes() == b.item_embeddings.tobytes()
          and a.output_embeddings.tobytes() == b.output_embeddings.tobytes())
    report("7 ablation identity (bitwise)", ok)


def test_criterion_8_phenomenon_reproduction(benchmark):
    """On the shipped benchmark: dynamic >= naive on win rate and hit ratio,
    and dynamic's hit ratio does not degrade from k=3 to k=15."""
    cfg, log, sft_cache = benchmark
    started = time.perf_counter()
    naive = run_training(dataclasses.replace(cfg, variant="naive"), log=log, sft_cache=sft_cache)
    dynamic = run_training(dataclasses.replace(cfg, variant="dynamic"), log=log, sft_cache=sft_cache)
    dynamic_k3 = run_training(dataclasses.replace(cfg, variant="dynamic", k=3), log=log, sft_cache=sft_cache)
    elapsed = time.perf_counter() - started
    a = dynamic.report.reward_win_rate >= naive.report.reward_win_rate
    b = dynamic.report.hit_ratio_at_1 >= naive.report.hit_ratio_at_1
    c = dynamic.report.hit_ratio_at_1 >= dynamic_k3.report.hit_ratio_at_1
    detail = (f"win {naive.report.reward_win_rate:.4f}->{dynamic.report.reward_win_rate:.4f}, "
              f"hit {naive.report.hit_ratio_at_1:.4f}->{dynamic.report.hit_ratio_at_1:.4f}, "
              f"k3 {dynamic_k3.report.hit_ratio_at_1:.4f} vs k15 {dynamic.report.hit_ratio_at_1:.4f}, "
              f"{elapsed:.0f}s")
    report("8 phenomenon reproduction", a and b and c and elapsed < 300.0, detail)


def test_criterion_9_random_baseline():
    """An untrained random model ranks the positive first with chance 1/21 +- 0.01."""
    rng = np.random.default_rng(9)
    model = PolicyModel(rng.normal(size=(200, 8)), rng.normal(size=(200, 8)))
    entries = []
    for i in range(10_000):
        hist = tuple(rng.integers(0, 200, size=5).tolist())
        ctx = Context(user=0, history=hist)
        positive = int(rng.integers(0, 200))
        entries.append((ctx, build_eval_candidates(SplitEntry(ctx, positive, i), 200, seed=9)))
    hit = hit_ratio_at_1(model, entries)
    ok = abs(hit - 1 / 21) <= 0.01
    report("9 random baseline sanity", ok, f"hit@1 {hit:.4f} vs {1/21:.4f}")


def test_criterion_10_overhead(tmp_path):
    """Dynamic selection costs at most 10% extra training time per step."""
    cfg = RunConfig(out_dir=str(tmp_path / "timing"))
    result = run_timing(cfg)
    ratio = 1.0 + result["overhead_ratio"]
    report("10 overhead within 1.10x", ratio <= 1.10, f"ratio {ratio:.4f}")


def test_criterion_11_determinism(tmp_path, benchmark):
    """Re-running train and sweep with the same seed reproduces metric CSVs byte-for-byte."""
    cfg, log, sft_cache = benchmark
    ok = True
    paths = []
    for name in ("a", "b"):
        run_cfg = dataclasses.replace(cfg, out_dir=str(tmp_path / name))
        execute_run(run_cfg, log=log, sft_cache=sft_cache)
        paths.append(tmp_path / name)
    for csv in METRIC_CSVS:
        first, second = paths[0] / csv, paths[1] / csv
        ok &= first.exists() == second.exists()
        if first.exists():
            ok &= first.read_bytes() == second.read_bytes()
    report("11 deterministic metric CSVs", ok)
