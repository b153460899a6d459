"""Acceptance criteria, one test each, at the pinned tolerances.

Every test records a one-line PASS/FAIL verdict that is printed at the end of
the pytest run. Run alone with ``pytest tests/test_acceptance.py -v``.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import (_ks_decision, brute_argmax_similarity, brute_concepts, kolmogorov_series_oracle,
                     ks_d_oracle, ks_sup_gap, poisson_oracle)
from toys import random_model, random_set, separable_set

from geoproto.aggregation import Aggregator, FusionWeights, PoolingPlan, build_plan, pool
from geoproto.config import RunConfig, SynthConfig
from geoproto.encoder import ConceptSpec, concept_conv, fit_globals
from geoproto.explain import explain_case, project
from geoproto.model import (ModelConfig, full_loss_and_grads, min_prototype_distance, predict_batch,
                            similarities, train)
from geoproto.pipeline import ablation, run_pipeline
from geoproto.stats import BaselineDist, fit_baseline, feature_refs, ks_test, poisson_lrt

# pinned tolerances
STAT_TOL = 1e-9
P_TOL = 1e-8
ORACLE_CASES = 1000
C1_SECONDS = 10.0
C2_SECONDS = 60.0
SIMPLEX_TOL = 1e-6
GRAD_REL_TOL = 1e-4
GRAD_INSTANCES = 20
C5_SECONDS = 30.0
# float64 roundoff in a central difference is ~eps * |loss| / h; h = 1e-4 keeps it
# near 1e-12 while truncation stays O(h^2). Entries below GRAD_FLOOR compare absolutely.
FD_STEP = 1e-4
GRAD_FLOOR = 1e-6
MIN_VAL_ACC = 0.85
MIN_VAL_F1 = 0.80
MAX_EPOCHS = 50
C6_SECONDS = 300.0
LOGIT_TOL = 1e-6
SAME_CLASS_NEAREST = 0.90


def verdict(n: int, ok: bool, summary: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {summary}")
    assert ok, summary


# ------------------------------------------------------------------ 1


def test_c01_statistical_test_oracles():
    rng = np.random.default_rng(2024)
    t_impl = 0.0
    worst = {"pois_stat": 0.0, "pois_p": 0.0, "ks_stat": 0.0, "ks_p": 0.0}
    sup_mismatch = 0

    start = time.perf_counter()
    for case in range(ORACLE_CASES):
        k = int(rng.integers(1, 50))
        rate = float(rng.uniform(0.05, 8.0))
        b = rate * k
        c = 0 if case % 10 == 0 else int(rng.poisson(b * rng.uniform(0.3, 2.5)))
        base = BaselineDist("f", "global", "poisson", rate)
        t0 = time.perf_counter()
        res = poisson_lrt(c, k, base, alpha=0.05)
        t_impl += time.perf_counter() - t0
        if c == b:
            continue
        stat, p = poisson_oracle(c, b)
        worst["pois_stat"] = max(worst["pois_stat"], abs(res.statistic - stat))
        worst["pois_p"] = max(worst["pois_p"], abs(res.p_value - p))

    for case in range(ORACLE_CASES):
        n = int(rng.integers(1, 40))
        m = int(rng.integers(2, 120))
        if case % 2:
            window = rng.integers(0, 6, n).astype(float)
            baseline = rng.integers(0, 6, m).astype(float)
        else:
            window = rng.normal(rng.uniform(-1, 1), 1.0, n)
            baseline = rng.normal(0.0, 1.0, m)
        base = fit_baseline(baseline, "f", "empirical", "global")
        t0 = time.perf_counter()
        res = ks_test(window, base, alpha=0.05)
        t_impl += time.perf_counter() - t0
        d = ks_d_oracle(window.tolist(), baseline.tolist())
        if case % 2 == 0 and abs(d - ks_sup_gap(window.tolist(), baseline.tolist())) > 1e-12:
            sup_mismatch += 1
        p = kolmogorov_series_oracle(n, d)
        worst["ks_stat"] = max(worst["ks_stat"], abs(res.statistic - d))
        worst["ks_p"] = max(worst["ks_p"], abs(res.p_value - p))
    total = time.perf_counter() - start

    ok = (worst["pois_stat"] <= STAT_TOL and worst["ks_stat"] <= STAT_TOL
          and worst["pois_p"] <= P_TOL and worst["ks_p"] <= P_TOL
          and sup_mismatch == 0 and total < C1_SECONDS)
    verdict(1, ok, f"oracle equivalence on {ORACLE_CASES}+{ORACLE_CASES} cases; max |dstat| "
                   f"poisson {worst['pois_stat']:.2e} ks {worst['ks_stat']:.2e}, max |dp| poisson "
                   f"{worst['pois_p']:.2e} ks {worst['ks_p']:.2e}; sup-gap mismatches {sup_mismatch}; "
                   f"{total:.2f}s total ({t_impl:.2f}s in package)")


# ------------------------------------------------------------------ 2


def _feature_field(sample, ref):
    if ref.kind == "spatial":
        return sample.x_spatial[:, :, ref.index].astype(np.float64)
    return sample.x_st[:, :, :, ref.index].astype(np.float64).mean(axis=0)


def _brute_temporal(values, L, base_sorted, base_mean, alpha, local):
    bits = [0, 0, 0, 0]
    for p in range(len(values) - L + 1):
        win = values[p:p + L]
        g = _ks_decision(win, base_sorted, base_mean, alpha)
        loc = _ks_decision(win, sorted(local), math.fsum(local) / len(local), alpha) if len(local) >= 2 else (0, 0)
        for ch, v in enumerate((*g, *loc)):
            bits[ch] |= v
    return bits


def test_c02_encoder_bit_equivalence(corpus162, tiny_ds):
    spec = ConceptSpec(window_sizes=(3, 5))
    refs = feature_refs(tiny_ds.features)
    globals_ = fit_globals(corpus162, refs, spec)
    spatial_refs = [r for r in refs if r.kind == "spatial"] + [r for r in refs if r.kind == "spatiotemporal"]
    temporal_refs = [r for r in refs if r.kind == "temporal"]
    start = time.perf_counter()
    mismatched, bits = 0, 0
    for sample in corpus162:
        ct = concept_conv(sample, spec, globals_, refs)
        expect = np.zeros_like(ct.spatial)
        for f, ref in enumerate(spatial_refs):
            g = globals_[ref.name]
            expect[:, :, f] = brute_concepts(
                _feature_field(sample, ref), sample.mask, g.kind, spec.window_sizes, spec.alpha,
                global_rate=g.mean, global_sorted=None if g.values is None else g.values.tolist(),
                global_mean=g.mean)
        texpect = np.zeros_like(ct.temporal)
        for f, ref in enumerate(temporal_refs):
            g = globals_[ref.name]
            vals = sample.x_temporal[:, ref.index].astype(np.float64).tolist()
            for wi, w in enumerate(spec.window_sizes):
                texpect[f, wi] = _brute_temporal(vals, min(w, len(vals)), g.values.tolist(), g.mean,
                                                 spec.alpha, vals)
        mismatched += int((ct.spatial != expect).sum() + (ct.temporal != texpect).sum())
        bits += ct.spatial.size + ct.temporal.size
    elapsed = time.perf_counter() - start
    ok = len(corpus162) == 162 and mismatched == 0 and elapsed < C2_SECONDS
    verdict(2, ok, f"{len(corpus162)} samples, omega={{3,5}}, {bits} bits compared, "
                   f"{mismatched} mismatches, {elapsed:.1f}s")


# ------------------------------------------------------------------ 3


def test_c03_pooling_worked_value():
    d = 9
    region = tuple(range(10))
    rest = tuple(range(10, d * d))
    plan = PoolingPlan(d, "mean", (("ten", region), ("rest", rest)))
    fused = np.zeros((d, d, 1, 4))
    fused.reshape(-1, 1, 4)[[3, 7], 0, 0] = 1.0
    vec = pool(fused, np.zeros((0, 4)), plan).values
    # same through the batched training path with weights that reproduce the binary map
    S = np.zeros((1, d, d, 1, 1, 4))
    S[0, :, :, :, 0] = fused
    agg = Aggregator(plan, 1, 0, 1)
    batched = agg.forward(S, np.zeros((1, 0, 1, 4)), FusionWeights.zeros(d, 1))
    ok = vec[0] == 0.2 and batched[0, 0] == 0.2
    verdict(3, ok, f"10-cell region with 2 active cells pools to {float(vec[0])!r} (batched {float(batched[0, 0])!r}), expected 0.2")


# ------------------------------------------------------------------ 4


def test_c04_simplex_invariant(default_run):
    run, _ = default_run
    worst, steps = [0.0], [0]

    def check(model, step):
        ws, wt = model.fusion.realized()
        worst[0] = max(worst[0], float(np.abs(ws.sum(axis=-1) - 1).max()),
                       float(np.abs(wt.sum(axis=-1) - 1).max()))
        steps[0] = step

    enc = run.encoder
    train(run.encoded("train"), run.encoded("val"), build_plan(run.cfg.samples.d, run.cfg.pooling.mode),
          run.cfg.model, [r.name for r in enc.spatial_refs], [r.name for r in enc.temporal_refs],
          on_step=check)
    ok = steps[0] > 0 and worst[0] <= SIMPLEX_TOL
    verdict(4, ok, f"{steps[0]} optimizer steps, max |sum(w) - 1| = {worst[0]:.2e} (tol {SIMPLEX_TOL:g})")


# ------------------------------------------------------------------ 5


def _fd_check(model, data, rng):
    """Max entrywise relative error between analytic and central-difference gradients."""
    agg = model.aggregator()
    _, grads = full_loss_and_grads(data.S, data.Tt, data.y, model, agg)
    worst = 0.0
    for name, param in model.params().items():
        g = grads[name]
        flat = param.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + FD_STEP
            up = full_loss_and_grads(data.S, data.Tt, data.y, model, agg)[0].total
            flat[i] = old - FD_STEP
            down = full_loss_and_grads(data.S, data.Tt, data.y, model, agg)[0].total
            flat[i] = old
            num = (up - down) / (2 * FD_STEP)
            ana = g.reshape(-1)[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), GRAD_FLOOR)
            worst = max(worst, rel)
    return worst


def test_c05_gradient_correctness():
    start = time.perf_counter()
    worst = 0.0
    modes = ("mean", "max", "none")
    for inst in range(GRAD_INSTANCES):
        rng = np.random.default_rng(1000 + inst)
        d = 3 if modes[inst % 3] == "none" else 5
        model = random_model(rng, d=d, mode=modes[inst % 3], K=4, per_feature=bool(inst % 2))
        data = random_set(rng, 6, d=d)
        worst = max(worst, _fd_check(model, data, rng))
    elapsed = time.perf_counter() - start
    ok = worst <= GRAD_REL_TOL and elapsed < C5_SECONDS
    verdict(5, ok, f"{GRAD_INSTANCES} instances over mean/max/none pooling and shared/per-feature fusion, "
                   f"max relative error {worst:.2e} (tol {GRAD_REL_TOL:g}), {elapsed:.1f}s")


# ------------------------------------------------------------------ 6


def test_c06_learnability(default_run):
    run, manifest = default_run
    val = manifest["metrics"]["val"]
    epochs = run.model.meta["epoch"]
    ok = (val["accuracy"] >= MIN_VAL_ACC and val["f1"] >= MIN_VAL_F1 and epochs <= MAX_EPOCHS
          and manifest["elapsed_s"] < C6_SECONDS)
    verdict(6, ok, f"planted-hotspot corpus: val accuracy {val['accuracy']:.4f} (>= {MIN_VAL_ACC}), "
                   f"F1 {val['f1']:.4f} (>= {MIN_VAL_F1}), best epoch {epochs}, "
                   f"end-to-end {manifest['elapsed_s']:.1f}s")


# ------------------------------------------------------------------ 7


def test_c07_ablation_direction(tmp_path):
    cfg = RunConfig(synth=SynthConfig(pattern="heterogeneous", hotspot_prob=0.02)).validate()
    rows = {r["mode"]: r for r in ablation(cfg, tmp_path, modes=("spatial", "max", "none"))}
    f1 = {k: rows[k]["f1"] for k in rows}
    ok = f1["spatial"] >= f1["max"] >= f1["none"]
    verdict(7, ok, f"heterogeneous corpus test F1: spatial {f1['spatial']:.4f} >= max {f1['max']:.4f} "
                   f">= none {f1['none']:.4f}")


# ------------------------------------------------------------------ 8


def test_c08_projection_argmax(default_run):
    run, _ = default_run
    model = run.model
    tr = run.encoded("train")
    X = model.pool(tr.S, tr.Tt)
    projected = project(model, X, tr.ids)
    bad = 0
    for p in projected:
        best, winners = brute_argmax_similarity(X, model.prototypes[p.k], model.config.eps_sim)
        chosen = min(winners, key=lambda i: tr.ids[i])
        if p.source_index != chosen:
            bad += 1
    ok = bad == 0
    verdict(8, ok, f"{model.K} prototypes scanned against {len(X)} training encodings, {bad} selections differ")


# ------------------------------------------------------------------ 9


def test_c09_explanation_decomposition(default_run):
    run, _ = default_run
    model = run.model
    te = run.encoded("test")
    X = model.pool(te.S, te.Tt)
    _, logits, _ = predict_batch(X, model)
    worst = 0.0
    for k in range(len(X)):
        rep = explain_case(model, X[k], sample_id=te.ids[k], label=te.y[k])
        worst = max(worst, float(np.abs(rep.reconstructed_logits() - logits[k]).max()))
    ok = worst <= LOGIT_TOL
    verdict(9, ok, f"{len(X)} test cases, max |bias + sum contributions - logits| = {worst:.2e}")


# ------------------------------------------------------------------ 10


def test_c10_determinism(default_run, tmp_path, monkeypatch):
    monkeypatch.delenv("GEOPROTO_CACHE_ROOT", raising=False)
    run, _ = default_run
    run_pipeline(RunConfig().validate(), tmp_path)
    same = {name: (run.workdir / name).read_bytes() == (tmp_path / name).read_bytes()
            for name in ("model.gpn", "metrics.json")}
    ok = all(same.values())
    verdict(10, ok, "two independent runs: " + ", ".join(
        f"{k} {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))


# ------------------------------------------------------------------ 11


def test_c11_regularizer_direction():
    tr, va = separable_set(160, seed=0), separable_set(60, seed=1)
    plan = build_plan(5, "mean")
    rows = []
    for seed in range(5):
        res = {}
        for lam in (ModelConfig.lambda_div, 0.0):
            cfg = ModelConfig(lambda_div=lam, seed=seed)
            res[lam] = train(tr, va, plan, cfg, ["a", "b"], ["t"]).model
        m = res[ModelConfig.lambda_div]
        X = m.pool(tr.S, tr.Tt)
        _, d2 = similarities(X, m.prototypes, m.config.eps_sim)
        same = float((m.class_of[d2.argmin(axis=1)] == tr.y).mean())
        rows.append((min_prototype_distance(m), min_prototype_distance(res[0.0]), same))
    ok = all(a >= b for a, b, _ in rows) and all(s >= SAME_CLASS_NEAREST for *_, s in rows)
    detail = "; ".join(f"seed {k}: {a:.4f} vs {b:.4f}, same-class {s:.0%}" for k, (a, b, s) in enumerate(rows))
    verdict(11, ok, f"min prototype distance lambda1>0 vs 0 and same-class nearest share: {detail}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
