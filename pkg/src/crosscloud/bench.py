"""Experiment runners that write deterministic CSV reports."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import codec
from .codec import CodecSchedule, HEADER_SIZE, sweep_schedules
from .config import ExperimentConfig, provenance
from .netsim import INTRA, PRESETS, LinkSpec
from .orchestrator import (
    Scenario1Work,
    Scenario2Work,
    TimingOnlyWork,
    calibrate_n,
    monolithic_scenario2,
    pacing_invariant_check,
    run_scenario1,
    run_scenario2,
)
from .toygrad import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

# the hot-start point of 88,000 steps maps to 1,000 desk steps
HOT_START_SCALE = "1:88"
# steps averaged on each side of the seam; single-step loss noise is several percent
SEAM_WINDOW = 10


def _write_csv(rows: Sequence[dict], path=None) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\r\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------- scenario II runs


@dataclass
class RunReport:
    label: str
    status: str = "ok"
    losses: list = field(default_factory=list)
    token_accuracy: float = float("nan")
    exact_accuracy: float = float("nan")
    step_time: float = float("nan")
    sim_time: float = float("nan")
    forward_ratio: float = float("nan")
    backward_ratio: float = float("nan")
    forward_nominal: float = float("nan")
    total_bytes: int = 0
    invariants_ok: bool = False
    start_step: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok" and self.invariants_ok

    @property
    def initial_loss(self) -> float:
        return self.losses[0] if self.losses else float("nan")

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def row(self, cfg: ExperimentConfig) -> dict:
        return {
            "label": self.label,
            "status": self.status,
            "start_step": self.start_step,
            "steps": len(self.losses),
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "token_accuracy": self.token_accuracy,
            "exact_accuracy": self.exact_accuracy,
            "forward_ratio": self.forward_ratio,
            "forward_nominal_ratio": self.forward_nominal,
            "backward_ratio": self.backward_ratio,
            "step_time_s": self.step_time,
            "sim_time_s": self.sim_time,
            "total_bytes": self.total_bytes,
            "invariants_ok": self.invariants_ok,
            **provenance(cfg),
        }


def run_schedule(cfg: ExperimentConfig, schedule: CodecSchedule, label: Optional[str] = None,
                 transport: str = "sim") -> RunReport:
    """Train the translation toy from scratch under one codec schedule."""
    report = RunReport(label or schedule.label, start_step=schedule.start_step)
    try:
        work = Scenario2Work(cfg.scenario2())
        res = run_scenario2(work, schedule, cfg.steps, cfg.t_enc, cfg.t_dec, cfg.link_spec(), cfg.seed,
                            transport=transport)
        report.losses = list(res.losses)
        report.token_accuracy, report.exact_accuracy = work.evaluate()
        report.step_time = res.step_time
        report.sim_time = res.sim_time
        report.forward_ratio = res.forward_ratio
        report.backward_ratio = res.backward_ratio
        report.forward_nominal = res.forward_nominal
        report.total_bytes = res.total_bytes
        report.invariants_ok = bool(pacing_invariant_check(res.trace)) and not res.trace.unmatched()
        report.work = work
    except Exception as exc:  # recorded per row, the sweep goes on
        log.exception("run %s failed", report.label)
        report.status = f"error: {type(exc).__name__}: {exc}"
    return report


@dataclass
class SweepPlan:
    rows: list  # (label, CodecSchedule)
    config: ExperimentConfig
    out: Optional[str] = None

    def __post_init__(self):
        labels = [label for label, _ in self.rows]
        if len(set(labels)) != len(labels):
            raise ValueError(f"sweep labels must be unique: {labels}")

    @classmethod
    def default(cls, cfg: ExperimentConfig, out: Optional[str] = None) -> "SweepPlan":
        """Baseline, FP16+INT8 and FP16(SVD(rho))+INT8 for rho = 0.9 ... 0.2."""
        return cls([(s.label, s) for s in sweep_schedules(0)], cfg, out)


def run_sweep(plan: SweepPlan, transport: str = "sim") -> list[RunReport]:
    reports = [run_schedule(plan.config, sched, label, transport) for label, sched in plan.rows]
    _write_csv([r.row(plan.config) for r in reports], plan.out)
    return reports


def identity_bytes_per_step(cfg: ExperimentConfig) -> int:
    """Bytes one uncompressed step moves (H^E forward plus its gradient back)."""
    m, n = cfg.batch * cfg.length, cfg.dim
    return 2 * (codec.BASELINE_BYTES_PER_ELEMENT * m * n + HEADER_SIZE)


def run_start_step_sweep(cfg: ExperimentConfig, base: CodecSchedule, start_steps: Sequence[int],
                         out: Optional[str] = None) -> list[RunReport]:
    if list(start_steps) != sorted(start_steps):
        raise ValueError("start steps must be sorted ascending")
    baseline_total = identity_bytes_per_step(cfg) * cfg.steps
    reports, rows = [], []
    for s in start_steps:
        sched = CodecSchedule(base.forward, base.backward, s)
        r = run_schedule(cfg, sched, f"{sched.label}@{s}")
        reports.append(r)
        row = r.row(cfg)
        row["bytes_saved"] = baseline_total - r.total_bytes if r.status == "ok" else 0
        rows.append(row)
    _write_csv(rows, out)
    return reports


def default_start_steps(steps: int) -> list[int]:
    """{0, 1000, 2000, 10000} scaled by 1/10 and clipped to the budget."""
    return sorted({min(s, steps) for s in (0, 100, 200, 1000)})


# ---------------------------------------------------------------- throughput

# homogeneous: same accelerators, the discriminator has 2.5x the generator's parameters
HOMOGENEOUS = {"t_g": 4e-3, "t_d": 10e-3}
# heterogeneous: one discriminator micro-batch costs 8 generator micro-batches
HETEROGENEOUS = {"t_g": 2e-3, "t_d": 16e-3}


def _throughput(n: int, t_g: float, t_d: float, link: LinkSpec, rounds: int, seed: int):
    work = TimingOnlyWork(seed=seed)
    res = run_scenario1(work, n, rounds, t_g, t_d, link, seed)
    elapsed = max(e.timestamp for e in res.trace.events)
    ok = bool(pacing_invariant_check(res.trace)) and res.d_to_g_payload_bytes == 0 and not res.trace.unmatched()
    return rounds * n / elapsed, res, ok


def run_throughput(cfg: ExperimentConfig, rounds: int = 200, out: Optional[str] = None) -> list[dict]:
    """Inter- vs intra-cluster throughput and the 8-sub vs 64-sub speedup (timing-only Scenario I)."""
    rows = []
    prov = provenance(cfg)
    wan = cfg.link_spec() if cfg.link != "intra" else PRESETS["wan170"]
    h = HOMOGENEOUS
    n = cfg.n or calibrate_n(h["t_g"], h["t_d"])
    intra, _, ok_a = _throughput(n, h["t_g"], h["t_d"], INTRA, rounds, cfg.seed)
    inter, res, ok_b = _throughput(n, h["t_g"], h["t_d"], wan, rounds, cfg.seed)
    rows.append({"preset": "homogeneous", "setting": "intra", "subs_per_generator": n,
                 "throughput_mb_per_s": intra, "ratio": 1.0, "per_npu_ratio": 1.0,
                 "generator_idle_fraction": 0.0, "invariants_ok": ok_a, **prov})
    rows.append({"preset": "homogeneous", "setting": "inter", "subs_per_generator": n,
                 "throughput_mb_per_s": inter, "ratio": inter / intra, "per_npu_ratio": inter / intra,
                 "generator_idle_fraction": res.idle_fraction, "invariants_ok": ok_b, **prov})
    x = HETEROGENEOUS
    n8 = calibrate_n(x["t_g"], x["t_d"])
    one, r1, ok_c = _throughput(1, x["t_g"], x["t_d"], wan, rounds, cfg.seed)
    many, r8, ok_d = _throughput(n8, x["t_g"], x["t_d"], wan, rounds, cfg.seed)
    # eight generator workers: 8 x 1 subs against 8 x n8 subs
    rows.append({"preset": "heterogeneous", "setting": "8 subs", "subs_per_generator": 1,
                 "throughput_mb_per_s": one, "ratio": 1.0, "per_npu_ratio": 1.0,
                 "generator_idle_fraction": r1.idle_fraction, "invariants_ok": ok_c, **prov})
    rows.append({"preset": "heterogeneous", "setting": f"{8 * n8} subs", "subs_per_generator": n8,
                 "throughput_mb_per_s": many, "ratio": many / one, "per_npu_ratio": many / one / n8,
                 "generator_idle_fraction": r8.idle_fraction, "invariants_ok": ok_d, **prov})
    _write_csv(rows, out)
    return rows


# ---------------------------------------------------------------- convergence


def _opt_tensors(prefix: str, opt) -> dict:
    return {f"{prefix}.{k}": v for k, v in opt.tensors().items()}


def _load_opt(prefix: str, opt, tensors: dict) -> None:
    opt.load_tensors({k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + ".")})


def work_tensors(work) -> dict:
    if isinstance(work, Scenario1Work):
        parts = {"G": work.G, "D": work.D}
        opts = {"adam_g": work.opt_g, "adam_d": work.opt_d}
    else:
        parts = {"S": work.enc, "T": work.dec}
        opts = {"adam_s": work.opt_s, "adam_t": work.opt_t}
    out = {}
    for name, model in parts.items():
        out.update({f"{name}.{k}": v for k, v in model.state_dict().items()})
    for name, opt in opts.items():
        out.update(_opt_tensors(name, opt))
    return out


def work_topology(work) -> dict:
    if isinstance(work, Scenario1Work):
        return {"scenario": 1, "G": work.G.topology(), "D": work.D.topology()}
    return {"scenario": 2, "S": work.enc.topology(), "T": work.dec.topology()}


def save_work(path, work, step: int) -> None:
    tensors = work_tensors(work)
    tensors["meta.step"] = np.array(float(step))
    save_checkpoint(path, tensors, work_topology(work))


def load_work(path, work) -> int:
    """Restore parameters and optimizer state; returns the step to resume from."""
    tensors, _ = load_checkpoint(path, expect_topology=work_topology(work))
    if isinstance(work, Scenario1Work):
        parts, opts = {"G": work.G, "D": work.D}, {"adam_g": work.opt_g, "adam_d": work.opt_d}
    else:
        parts, opts = {"S": work.enc, "T": work.dec}, {"adam_s": work.opt_s, "adam_t": work.opt_t}
    for name, model in parts.items():
        model.load_state_dict({k[len(name) + 1 :]: v for k, v in tensors.items() if k.startswith(name + ".")})
    for name, opt in opts.items():
        _load_opt(name, opt, tensors)
    return int(tensors["meta.step"])


@dataclass
class ConvergenceReport:
    steps: list
    phases: list
    losses: list
    seam_gap: float = float("nan")  # relative jump of the windowed mean loss at the hot-start seam
    seam_step_gap: float = float("nan")  # same, first resumed step against the last checkpointed one
    reference_gap: float = float("nan")  # max |split - unsplit| over the resumed steps
    invariants_ok: bool = True
    idle_fraction: float = float("nan")

    def rows(self, cfg: ExperimentConfig) -> list[dict]:
        prov = provenance(cfg)
        return [
            {"step": s, "phase": p, "loss": l, "hot_start_scale": HOT_START_SCALE, **prov}
            for s, p, l in zip(self.steps, self.phases, self.losses)
        ]


def _scenario1_phase(work, cfg: ExperimentConfig, link: LinkSpec, rounds: int, start: int):
    n = cfg.n or calibrate_n(cfg.t_g, cfg.t_d)
    res = run_scenario1(work, n, rounds, cfg.t_g, cfg.t_d, link, cfg.seed, start)
    ok = bool(pacing_invariant_check(res.trace)) and res.d_to_g_payload_bytes == 0 and not res.trace.unmatched()
    return res.total_loss, ok, res


def run_convergence(cfg: ExperimentConfig, checkpoint: Optional[str] = None, out: Optional[str] = None,
                    hot_start_steps: Optional[int] = None, compare_unsplit: bool = False) -> ConvergenceReport:
    """Loss curve of a run, optionally hot-started from an intra-cluster phase.

    With ``hot_start_steps`` > 0 the first phase trains on the intra-cluster
    link (Scenario I) or unsplit (Scenario II), is written to ``checkpoint``,
    and a fresh process state is restored from it before resuming over the
    configured WAN link for ``cfg.steps`` more steps.
    """
    hot = cfg.hot_start_steps if hot_start_steps is None else hot_start_steps
    link = cfg.link_spec()
    steps, phases, losses = [], [], []
    ok = True
    idle = float("nan")

    def fresh():
        return Scenario1Work(cfg.scenario1()) if cfg.scenario == 1 else Scenario2Work(
            cfg.scenario2(decay=hot + cfg.steps))

    work = fresh()
    start = 0
    if hot:
        if cfg.scenario == 1:
            first, ok1, _ = _scenario1_phase(work, cfg, INTRA, hot, 0)
            ok &= ok1
        else:
            first = monolithic_scenario2(work, hot)
        steps += list(range(hot))
        phases += ["intra"] * hot
        losses += list(first)
        if checkpoint is None:
            import tempfile

            fd, checkpoint = tempfile.mkstemp(suffix=".nblc")
            os.close(fd)
        save_work(checkpoint, work, hot)
    if checkpoint is not None and (hot or cfg.hot_start_steps == 0):
        work = fresh()
        start = load_work(checkpoint, work)
    reference = None
    if compare_unsplit:
        # counterfactual: the same state continued without the WAN in between
        ref = fresh()
        if checkpoint is not None:
            load_work(checkpoint, ref)
        if cfg.scenario == 1:
            reference = _scenario1_phase(ref, cfg, INTRA, cfg.steps, start)[0]
        else:
            reference = monolithic_scenario2(ref, cfg.steps, start)
    if cfg.scenario == 1:
        second, ok2, res = _scenario1_phase(work, cfg, link, cfg.steps, start)
        ok &= ok2
        idle = res.idle_fraction
    else:
        res = run_scenario2(work, cfg.schedule(), cfg.steps, cfg.t_enc, cfg.t_dec, link, cfg.seed, start)
        second = res.losses
        ok &= bool(pacing_invariant_check(res.trace)) and not res.trace.unmatched()
    steps += list(range(start, start + cfg.steps))
    phases += ["wan"] * cfg.steps
    losses += list(second)
    report = ConvergenceReport(steps, phases, losses, invariants_ok=ok, idle_fraction=idle)
    if hot and cfg.steps:
        w = min(SEAM_WINDOW, hot, cfg.steps)
        before = float(np.mean(first[-w:]))
        report.seam_gap = abs(float(np.mean(second[:w])) - before) / abs(before)
        report.seam_step_gap = abs(second[0] - first[-1]) / abs(first[-1])
    if reference is not None:
        report.reference_gap = float(np.max(np.abs(np.array(reference) - np.array(second)))) if cfg.steps else 0.0
    _write_csv(report.rows(cfg), out)
    return report


def sweep_passes(reports: Sequence[RunReport]) -> bool:
    return all(r.ok for r in reports) and all(math.isfinite(r.final_loss) for r in reports)
