import csv

import numpy as np
import pytest

from crosscloud.bench import (
    HOT_START_SCALE,
    SweepPlan,
    default_start_steps,
    identity_bytes_per_step,
    load_work,
    run_convergence,
    run_schedule,
    run_start_step_sweep,
    run_sweep,
    run_throughput,
    save_work,
    sweep_passes,
)
from crosscloud.codec import FP16, INT8, CodecSchedule, Nested, Svd, sweep_schedules
from crosscloud.config import ExperimentConfig
from crosscloud.orchestrator import Scenario2Work, monolithic_scenario2
from crosscloud.toygrad import CheckpointError

QUICK = ExperimentConfig(steps=4, dim=16, hidden=16, batch=8)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_default_plan_rows():
    plan = SweepPlan.default(QUICK)
    assert [label for label, _ in plan.rows] == [s.label for s in sweep_schedules(0)]
    assert len(plan.rows) == 10
    with pytest.raises(ValueError, match="unique"):
        SweepPlan([("a", CodecSchedule()), ("a", CodecSchedule())], QUICK)


def test_sweep_csv_and_monotone_step_time(tmp_path):
    out = tmp_path / "sweep.csv"
    reports = run_sweep(SweepPlan.default(QUICK, str(out)))
    assert sweep_passes(reports)
    base = reports[0]
    assert (base.forward_ratio, base.backward_ratio) == (1.0, 1.0)
    by_bytes = sorted(reports, key=lambda r: r.total_bytes, reverse=True)
    assert all(a.total_bytes > b.total_bytes for a, b in zip(by_bytes, by_bytes[1:]))
    assert all(a.step_time > b.step_time for a, b in zip(by_bytes, by_bytes[1:]))
    rows = read_csv(out)
    assert [r["label"] for r in rows] == [r.label for r in reports]
    assert rows[0]["config_hash"] == QUICK.hash and rows[0]["seed"] == "0"
    # rerunning writes the same bytes
    again = tmp_path / "again.csv"
    run_sweep(SweepPlan.default(QUICK, str(again)))
    assert again.read_bytes() == out.read_bytes()


def test_failed_row_does_not_abort_sweep():
    # FP16 of a huge activation overflows; the row records it and the sweep carries on
    cfg = QUICK.with_(lr=1e9, warmup=0)
    plan = SweepPlan([("bad", CodecSchedule(FP16, INT8, 2)), ("ok", CodecSchedule())], cfg)
    reports = run_sweep(plan)
    assert len(reports) == 2 and reports[1].ok
    assert not reports[0].ok and reports[0].status.startswith("error:")


def test_start_step_sweep(tmp_path):
    base = CodecSchedule(Nested(FP16, Svd(0.6)), INT8)
    out = tmp_path / "starts.csv"
    reports = run_start_step_sweep(QUICK, base, [0, 2, QUICK.steps], str(out))
    rows = read_csv(out)
    swept = run_schedule(QUICK, CodecSchedule(base.forward, base.backward, 0))
    assert reports[0].losses == swept.losses and reports[0].total_bytes == swept.total_bytes
    baseline = identity_bytes_per_step(QUICK) * QUICK.steps
    assert reports[-1].total_bytes == baseline and rows[-1]["bytes_saved"] == "0"
    assert int(rows[0]["bytes_saved"]) > int(rows[1]["bytes_saved"]) > 0
    with pytest.raises(ValueError):
        run_start_step_sweep(QUICK, base, [2, 0])


def test_default_start_steps():
    assert default_start_steps(2000) == [0, 100, 200, 1000]
    assert default_start_steps(150) == [0, 100, 150]


def test_throughput_bands(tmp_path):
    out = tmp_path / "tp.csv"
    rows = run_throughput(ExperimentConfig(scenario=1, link="wan170"), rounds=60, out=str(out))
    intra, inter, eight, many = rows
    assert intra["ratio"] == 1.0
    assert 0.8 < inter["ratio"] < 1.0
    assert 4.0 < many["ratio"] < 8.0 and many["setting"] == "64 subs"
    assert all(r["invariants_ok"] for r in rows)
    assert len(read_csv(out)) == 4


def test_fresh_scenario1_run_converges():
    cfg = ExperimentConfig(scenario=1, steps=2000, n=1, dim=16, hidden=16, batch=8)
    rep = run_convergence(cfg)
    assert rep.invariants_ok and len(rep.losses) == 2000
    assert np.mean(rep.losses[-20:]) < rep.losses[0]


def test_scenario2_hot_start_matches_unsplit(tmp_path):
    cfg = ExperimentConfig(steps=20, hot_start_steps=20, dim=16, hidden=16, batch=8)
    out = tmp_path / "curve.csv"
    rep = run_convergence(cfg, checkpoint=str(tmp_path / "hot.nblc"), out=str(out), compare_unsplit=True)
    assert rep.reference_gap <= 1e-9
    assert rep.steps == list(range(40)) and rep.phases.count("intra") == 20
    rows = read_csv(out)
    assert rows[0]["hot_start_scale"] == HOT_START_SCALE and len(rows) == 40


def test_checkpoint_roundtrip_and_topology_mismatch(tmp_path):
    path = tmp_path / "w.nblc"
    work = Scenario2Work(QUICK.scenario2())
    monolithic_scenario2(work, 3)
    save_work(path, work, 7)
    twin = Scenario2Work(QUICK.scenario2())
    assert load_work(path, twin) == 7
    assert all(twin.enc.parameters()[k].tobytes() == v.tobytes() for k, v in work.enc.parameters().items())
    assert twin.opt_s.step == work.opt_s.step == 3
    other = Scenario2Work(QUICK.with_(dim=8).scenario2())
    with pytest.raises(CheckpointError):
        load_work(path, other)


def test_report_row_fields():
    r = run_schedule(QUICK, CodecSchedule(FP16, INT8, 0))
    row = r.row(QUICK)
    assert row["forward_ratio"] == 0.5 and row["backward_ratio"] == 0.25
    assert row["steps"] == QUICK.steps and row["invariants_ok"] is True
    assert row["label"] == "FP16+INT8"
