"""Acceptance criteria 1-9. Each test records one PASS/FAIL line, printed in
the terminal summary (see conftest.py) and to stdout."""

import math
import time

import numpy as np
import pytest

from mof import config as cfgmod
from mof.bop import run_training
from mof.cli import main
from mof.data import generate_dataset
from mof.encoders import EncoderDims, init_params
from mof.evaluation import EvalError, RetrievalReport, chance_r1_band, evaluate, rank_of_positives
from mof.gradcheck import autodiff_battery, descent_trial, meta_battery
from mof.loss import contrastive_loss
from mof import autodiff as ad

from conftest import ACCEPTANCE_LINES

SEEDS = (0, 1, 2)
PHASES = 600


def record(n, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    return passed


def test_c1_autodiff_battery():
    t0 = time.perf_counter()
    results = autodiff_battery(0)
    secs = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_err / r.tol)
    ok = all(r.passed for r in results) and secs < 10
    names = {r.name for r in results}
    assert "d2(x^3)/dx2 at 2 == 12" in names and "hvp 5x5 quadratic" in names
    assert record(1, ok, f"{len(results)} autodiff checks, worst {worst.name} rel err "
                         f"{worst.max_rel_err:.2e} (tol {worst.tol:.0e}), {secs:.2f}s < 10s")


def test_c2_meta_gradient():
    t0 = time.perf_counter()
    results = meta_battery(range(5))
    secs = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in results)
    ok = all(r.passed for r in results) and secs < 60
    assert record(2, ok, f"meta-gradient vs FD on 10 pixels x 5 seeds, max rel err {worst:.2e} "
                         f"(tol 1e-3), {secs:.2f}s < 60s")


def _unit(rng, b, d):
    x = rng.standard_normal((b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_c3_contrastive_analytics():
    rng = np.random.default_rng(0)
    T = lambda x: ad.tensor(x, "f64")  # noqa: E731
    e = _unit(rng, 1, 8)
    b1 = contrastive_loss(T(e), T(_unit(rng, 1, 8)), 0.05).l_c.item()
    x = np.repeat(_unit(rng, 1, 8), 2, axis=0)
    b2 = contrastive_loss(T(x), T(x), 0.05).l_c.item()
    perm_err, sym_ok = 0.0, True
    for _ in range(100):
        b = int(rng.integers(2, 9))
        ev, et = _unit(rng, b, 8), _unit(rng, b, 8)
        base = contrastive_loss(T(ev), T(et), 0.05)
        p = rng.permutation(b)
        perm_err = max(perm_err, abs(base.l_c.item() - contrastive_loss(T(ev[p]), T(et[p]), 0.05).l_c.item()))
        sw = contrastive_loss(T(et), T(ev), 0.05)
        sym_ok &= base.l_v2t.item() == sw.l_t2v.item() and base.l_t2v.item() == sw.l_v2t.item()
    ok = b1 == 0.0 and abs(b2 - 2 * math.log(2)) <= 1e-6 and perm_err <= 1e-10 and sym_ok
    assert record(3, ok, f"B=1 loss {b1!r}; B=2 identical rows {b2:.9f} vs 2ln2; permutation max diff "
                         f"{perm_err:.1e}; symmetry exact on 100 instances: {sym_ok}")


def test_c4_descent_property():
    t0 = time.perf_counter()
    trials = [descent_trial(seed, beta=1e-6) for seed in range(100)]
    secs = time.perf_counter() - t0
    wins = sum(after <= before for before, after in trials)
    ok = wins >= 95 and secs < 120
    assert record(4, ok, f"meta loss decreased in {wins}/100 trials at beta=1e-6 (need >= 95), {secs:.1f}s < 120s")


# ---------------------------------------------------------------------------
# criteria 5 and 6 share one set of training runs


@pytest.fixture(scope="module")
def trend_runs():
    ds = generate_dataset(0)
    runs = {}
    for arm, overrides in (
        ("baseline", {"mof": False, "U": 2, "R": 16}),
        ("mof16", {"U": 2, "R": 16}),
        ("mof4", {"U": 2, "R": 4}),
    ):
        t0 = time.perf_counter()
        runs[arm] = []
        for seed in SEEDS:
            cfg = cfgmod.resolve(overrides={"preset": "toy-lr", "t": PHASES, "seed": seed, "k_test": 2, **overrides},
                                 env={})
            _, _, tlog = run_training(ds, cfg.phase_config())
            runs[arm].append(tlog)
        runs[arm + "_secs"] = time.perf_counter() - t0
    return runs


def _summary(tlogs):
    best = [t.best()[1] for t in tlogs]
    final = [t.final()[1] for t in tlogs]
    return (float(np.mean([r.r_at[1] for r in best])), float(np.mean([r.med_r for r in best])),
            float(np.mean([r.r_at[1] for r in final])), float(np.mean([r.med_r for r in final])))


def test_c5_mof_beats_uniform_baseline(trend_runs):
    b_r1, b_med, bf_r1, bf_med = _summary(trend_runs["baseline"])
    m_r1, m_med, mf_r1, mf_med = _summary(trend_runs["mof16"])
    secs = trend_runs["baseline_secs"] + trend_runs["mof16_secs"]
    ok = m_r1 >= b_r1 + 0.05 and m_med <= b_med and secs < 900
    assert record(5, ok, f"best-phase mean R@1 MOF16=>2 {m_r1:.3f} vs baseline {b_r1:.3f} (need +0.05), "
                         f"MedR {m_med:.2f} vs {b_med:.2f}; final-phase R@1 {mf_r1:.3f} vs {bf_r1:.3f}; "
                         f"{PHASES} phases x {len(SEEDS)} seeds, {secs:.0f}s")


def test_c6_more_compression_trend(trend_runs):
    r16 = _summary(trend_runs["mof16"])[0]
    r4 = _summary(trend_runs["mof4"])[0]
    secs = trend_runs["mof16_secs"] + trend_runs["mof4_secs"]
    ok = r16 >= r4 - 0.02 and secs < 900
    assert record(6, ok, f"mean best R@1 16=>2 {r16:.3f} vs 4=>2 {r4:.3f} (ties within 0.02), {secs:.0f}s")


# ---------------------------------------------------------------------------


def _sort_oracle(sim):
    ranks = []
    for i, row in enumerate(sim):
        order = sorted(range(len(row)), key=lambda j: -row[j])
        pos = [k + 1 for k, j in enumerate(order) if row[j] == row[i]]
        ranks.append(int(math.floor((pos[0] + pos[-1]) / 2 + 0.5)))
    return ranks


def test_c7_evaluation_oracle():
    rng = np.random.default_rng(7)
    mismatches = 0
    for trial in range(1000):
        q = int(rng.integers(1, 16))
        sim = rng.integers(0, 5, (q, q)).astype(float) if trial % 2 else rng.standard_normal((q, q))
        mismatches += rank_of_positives(sim) != _sort_oracle(sim)
    # monotonicity is asserted when every report is constructed
    try:
        RetrievalReport(r_at={1: 0.5, 5: 0.25, 10: 1.0}, med_r=2.0, n_queries=4, frames_used=2)
        guarded = False
    except EvalError:
        guarded = True
    ok = mismatches == 0 and guarded
    assert record(7, ok, f"rank_of_positives vs sort oracle: {mismatches}/1000 mismatches (ties in half); "
                         f"non-monotone report rejected at construction: {guarded}")


def test_c8_determinism(tmp_path):
    data = tmp_path / "d.bin"
    assert main(["gen-data", "--seed", "0", "--out", str(data)]) == 0
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["train", "--data", str(data), "--out", str(out), "--compress", "2-from-16", "--phases", "30",
                     "--seed", "5", "--eval-every", "10"])
        assert code == 0
        outs.append(out)
    same = {f: (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
            for f in ("log.jsonl", "checkpoint.bin", "frames.bin")}
    assert record(8, all(same.values()), "two identical train runs, bitwise equal: "
                  + ", ".join(f"{k}={v}" for k, v in same.items()))


def test_c9_chance_level():
    ds = generate_dataset(0)
    lo, hi = chance_r1_band(32)
    r1 = [evaluate(init_params(EncoderDims(), seed), ds.test, 2).r_at[1] for seed in range(10)]
    ok = len(ds.test) == 32 and all(lo <= r <= hi for r in r1)
    assert record(9, ok, f"untrained R@1 over Q=32 for 10 seeds in [{min(r1):.3f}, {max(r1):.3f}], "
                         f"3-sigma band [{lo:.3f}, {hi:.3f}]")
