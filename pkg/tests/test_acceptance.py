"""The ten acceptance criteria, each at its stated tolerance and time limit.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary prints
one PASS/FAIL line per criterion with the measured values.
"""

from fractions import Fraction

import numpy as np
import pytest

from crosscloud import codec
from crosscloud.bench import run_convergence, run_schedule, SweepPlan, run_sweep
from crosscloud.codec import FP16, INT8, CodecSchedule, Nested, Svd
from crosscloud.config import ExperimentConfig
from crosscloud.matrix import compression_ratio, reconstruct, svd, truncate
from crosscloud.netsim import FrameKind, PRESETS
from crosscloud.orchestrator import (
    Scenario2Work,
    TimingOnlyWork,
    monolithic_scenario2,
    pacing_invariant_check,
    run_scenario1,
    run_scenario2,
)
from crosscloud.toygrad.gradcheck import CASES

pytestmark = pytest.mark.acceptance

# forward byte-ratio column for rho = 0.9, 0.8, ..., 0.2
PUBLISHED_FORWARD = [0.45, 0.40, 0.34, 0.30, 0.25, 0.20, 0.15, 0.09]


def finish(crit):
    took = crit.stop()
    assert took < crit.limit_s, f"took {took:.1f}s, limit {crit.limit_s}s"


def test_criterion_01_ratio_formula_exact(criterion):
    crit = criterion(1, "compression ratio formula exact", 1.0)
    assert compression_ratio(100, 50, 10) == 0.302
    rng = np.random.default_rng(1)
    mismatches = 0
    for _ in range(1000):
        m, n = (int(v) for v in rng.integers(1, 5000, 2))
        r = int(rng.integers(1, min(m, n) + 1))
        # exact rational value, rounded once to the nearest double
        oracle = float(Fraction(m * r + r + r * n, m * n))
        mismatches += compression_ratio(m, n, r) != oracle
    crit.note(f"ratio(100,50,10) = {compression_ratio(100, 50, 10)!r}; mismatches over 1000 triples: {mismatches}")
    assert mismatches == 0
    finish(crit)


def test_criterion_02_forward_ratio_column(criterion):
    crit = criterion(2, "measured byte ratios vs the published column", 10.0)
    rng = np.random.default_rng(2)
    worst = 0.0
    outside = []
    for n in (16, 32, 48):
        for mult in (10, 20, 40):
            X = rng.normal(size=(mult * n, n))
            for tenth, expected in zip(range(9, 1, -1), PUBLISHED_FORWARD):
                p = codec.encode(X, Nested(FP16, Svd(tenth / 10)))
                # measured: half-precision factor bytes actually on the wire
                measured = len(p.body) / (4 * X.size)
                assert p.ratio == measured
                worst = max(worst, abs(measured - expected))
                if abs(measured - expected) > 0.05:
                    outside.append(f"{X.shape[0]}x{n} rho 0.{tenth} r={p.rank}: {measured:.4f} vs {expected}")
    X = rng.normal(size=(256, 32))
    fwd, bwd = codec.encode(X, FP16), codec.encode(X, INT8)
    fwd_measured = len(fwd.body) / (4 * X.size)
    bwd_measured = (len(bwd.body) - 8) / (4 * X.size)  # less the per-tensor scale
    crit.note(f"worst |measured - published| = {worst:.4f} over m in {{10n, 20n, 40n}}, n in {{16, 32, 48}}")
    for line in outside:
        crit.note(f"outside 0.05: {line}")
    crit.note(f"FP16+INT8 forward/backward = {fwd_measured}/{bwd_measured}")
    assert not outside, outside
    assert fwd.ratio == fwd_measured == 0.5
    assert bwd.ratio == bwd_measured == 0.25
    finish(crit)


def test_criterion_03_eckart_young(criterion):
    crit = criterion(3, "Eckart-Young over 500 matrices, all ranks", 30.0)
    rng = np.random.default_rng(3)
    worst = 0.0
    checks = 0
    for _ in range(500):
        m, n = int(rng.integers(1, 65)), int(rng.integers(1, 49))
        A = rng.normal(size=(m, n)) * rng.choice([1e-3, 1.0, 1e2])
        f = svd(A)
        # tail energy from an independent LAPACK decomposition
        ref = np.linalg.svd(A, compute_uv=False)
        scale = float(np.sum(A * A))
        for r in range(1, f.k + 1):
            err2 = float(np.sum((A - reconstruct(truncate(f, r))) ** 2))
            tail = float(np.sum(ref[r:] ** 2))
            rel = abs(err2 - tail) / scale
            worst = max(worst, rel)
            checks += 1
    crit.note(f"{checks} (matrix, rank) pairs; worst |err^2 - tail| / ||A||_F^2 = {worst:.2e}")
    assert worst <= 1e-10
    finish(crit)


def _fd(case, rng, eps=1e-5, samples=6):
    """Independent central-difference comparison for one gradcheck case."""
    analytic = {k: np.array(v) for k, v in case.grads().items()}
    worst = 0.0
    for key, x in case.tensors.items():
        flat = x.reshape(-1)
        for i in rng.choice(flat.size, min(samples, flat.size), replace=False):
            keep = flat[i]
            flat[i] = keep + eps
            hi = case.loss()
            flat[i] = keep - eps
            lo = case.loss()
            flat[i] = keep
            num = (hi - lo) / (2 * eps)
            a = analytic[key].reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-5))
    return worst


def test_criterion_04_gradient_oracle(criterion):
    crit = criterion(4, "finite-difference gradient oracle, 50 instances per component", 60.0)
    worst = {}
    for i, (name, build) in enumerate(CASES.items()):
        rng = np.random.default_rng([4, i])
        worst[name] = max(_fd(build(rng), rng) for _ in range(50))
    top = max(worst, key=worst.get)
    crit.note(f"{len(worst)} components; worst relative error {worst[top]:.2e} ({top})")
    assert all(v <= 1e-4 for v in worst.values()), worst
    finish(crit)


def _param_bytes(work):
    return {k: v.tobytes() for m in (work.enc, work.dec) for k, v in m.parameters().items()}, \
        {k: v.tobytes() for o in (work.opt_s, work.opt_t) for k, v in o.tensors().items()}


def test_criterion_05_split_transparency(criterion):
    crit = criterion(5, "split run equals the unsplit run bit for bit", 60.0)
    cfg = ExperimentConfig(steps=200)
    split = Scenario2Work(cfg.scenario2())
    res = run_scenario2(split, CodecSchedule(), 200, cfg.t_enc, cfg.t_dec, PRESETS["wan60"], cfg.seed)
    whole = Scenario2Work(cfg.scenario2())
    losses = monolithic_scenario2(whole, 200)
    params_a, opt_a = _param_bytes(split)
    params_b, opt_b = _param_bytes(whole)
    same = sum(params_a[k] == params_b[k] for k in params_a)
    crit.note(f"{same}/{len(params_a)} parameter tensors byte-identical; loss curves equal: {res.losses == losses}")
    assert params_a == params_b
    assert opt_a == opt_b
    assert res.losses == losses
    finish(crit)


def test_criterion_06_compression_convergence(criterion):
    crit = criterion(6, "every sweep row converges; SVD(0.6) accuracy; SVD(0.2) time share", 600.0)
    cfg = ExperimentConfig(steps=2000, link="wan60")
    assert not cfg.codec_cost
    reports = {r.label: r for r in run_sweep(SweepPlan.default(cfg))}
    for r in reports.values():
        crit.note(f"{r.label:22s} loss {r.initial_loss:.3f} -> {r.final_loss:.4f}  exact {r.exact_accuracy:.3f}  "
                  f"token {r.token_accuracy:.3f}  fwd {r.forward_ratio:.3f}  sim {r.sim_time:.3f}s")
    base, mid, low = reports["baseline"], reports["FP16(SVD(0.6))+INT8"], reports["FP16(SVD(0.2))+INT8"]
    share = low.sim_time / base.sim_time
    crit.note(f"SVD(0.2) simulated time = {share:.3f} of baseline")
    assert len(reports) == 10 and all(r.ok for r in reports.values())
    assert all(r.final_loss < 0.5 * r.initial_loss for r in reports.values())
    assert mid.exact_accuracy >= base.exact_accuracy - 0.05
    assert mid.token_accuracy >= base.token_accuracy - 0.05
    assert share <= 0.30
    finish(crit)


def test_criterion_07_delayed_start(criterion):
    crit = criterion(7, "activation at step 200 matches or beats step 0 on 3 seeds", 600.0)
    sched = Nested(FP16, Svd(0.6)), INT8
    wins = 0
    for seed in (0, 1, 2):
        cfg = ExperimentConfig(steps=1000, seed=seed)
        early = run_schedule(cfg, CodecSchedule(*sched, 0))
        late = run_schedule(cfg, CodecSchedule(*sched, 200))
        assert early.ok and late.ok
        ok = late.exact_accuracy >= early.exact_accuracy and late.token_accuracy >= early.token_accuracy
        wins += ok
        crit.note(f"seed {seed}: exact {early.exact_accuracy:.4f} (at 0) vs {late.exact_accuracy:.4f} (at 200); "
                  f"token {early.token_accuracy:.4f} vs {late.token_accuracy:.4f}")
    assert wins == 3
    finish(crit)


def test_criterion_08_pacing(criterion):
    crit = criterion(8, "pacing invariants under jitter; n = 8 load balancing", 30.0)
    cfg = ExperimentConfig(scenario=1)
    assert cfg.t_d == 8 * cfg.t_g
    link = PRESETS["wan60"].with_(jitter_fraction=0.2)
    idle = {}
    for n in (8, 1):
        res = run_scenario1(TimingOnlyWork(seed=8), n, 1000, cfg.t_g, cfg.t_d, link, seed=8)
        verdict = pacing_invariant_check(res.trace)
        d_to_g = [e for e in res.trace.events if e.role == "D0" and e.event.startswith("send:")]
        assert verdict, verdict.detail
        assert res.d_to_g_payload_bytes == 0
        assert all(e.event == "send:PACING@G" for e in d_to_g) and len(d_to_g) == 1000
        assert not res.trace.unmatched()
        idle[n] = res.idle_fraction
    crit.note(f"divergence <= 1 and zero D->G gradient bytes over 1000 rounds; idle n=8 {idle[8]:.3f}, n=1 {idle[1]:.3f}")
    assert idle[8] < 0.10
    assert idle[1] > 0.80
    finish(crit)


def test_criterion_09_transport_equivalence(criterion):
    crit = criterion(9, "socket and simulated links carry identical frames", 60.0)
    cfg = ExperimentConfig(steps=100)
    sched = CodecSchedule(Nested(FP16, Svd(0.6)), INT8, 20)
    sim = run_scenario2(Scenario2Work(cfg.scenario2()), sched, 100, cfg.t_enc, cfg.t_dec, cfg.link_spec(), 0)
    sock = run_scenario2(Scenario2Work(cfg.scenario2()), sched, 100, cfg.t_enc, cfg.t_dec, cfg.link_spec(), 0,
                         transport="socket")
    crit.note(f"S->T frames {len(sim.frames_s)}, T->S frames {len(sim.frames_t)}; "
              f"identical: {sim.frames_s == sock.frames_s and sim.frames_t == sock.frames_t}")
    assert len(sim.frames_s) == len(sim.frames_t) == 100
    assert all(kind == FrameKind.PAYLOAD.name for _, kind, _ in sim.frames_s)
    assert sim.frames_s == sock.frames_s
    assert sim.frames_t == sock.frames_t
    finish(crit)


def test_criterion_10_hot_start_seam(criterion, tmp_path):
    crit = criterion(10, "hot start at 1000, resume 200 steps over the WAN", 300.0)
    cfg = ExperimentConfig(scenario=1, steps=200, hot_start_steps=1000, link="wan60")
    rep = run_convergence(cfg, checkpoint=str(tmp_path / "hot.nblc"), compare_unsplit=True)
    crit.note(f"seam gap (10-step means) {rep.seam_gap:.4f}; single-step gap {rep.seam_step_gap:.4f}; "
              f"max gap to the run continued without the WAN {rep.reference_gap:.3g}")
    assert rep.invariants_ok
    assert len(rep.losses) == 1200
    assert rep.seam_gap <= 0.05
    assert rep.reference_gap == 0.0
    finish(crit)
