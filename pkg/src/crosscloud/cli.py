"""``crosscloud`` command line: sweeps, throughput, convergence and gradient checks.

Exit status is 0 only when every invariant check of the run passed.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from typing import Optional

from . import bench
from .codec import CodecError, CodecSchedule, parse_method
from .config import ExperimentConfig, load_config
from .netsim import AuthError, NetError, SessionCredential, connect, initiate_over, listen, respond_over
from .orchestrator import (
    ProtocolTrace,
    Scenario1Log,
    Scenario1Work,
    Scenario2Log,
    Scenario2Work,
    calibrate_n,
    decoder_role,
    discriminator_role,
    encoder_role,
    generator_role,
    run_socket,
)

log = logging.getLogger("crosscloud")

OK, FAILED, USAGE = 0, 1, 2


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    return cfg.with_(**changes) if changes else cfg


def _report(ok: bool, what: str) -> int:
    print(f"{what}: {'all invariant checks passed' if ok else 'INVARIANT CHECK FAILED'}")
    return OK if ok else FAILED


# ---------------------------------------------------------------- subcommands


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if args.schedule:
        rows = []
        for text in args.schedule:
            fwd, _, bwd = text.partition("/")
            sched = CodecSchedule(parse_method(fwd), parse_method(bwd or fwd), cfg.start_step)
            rows.append((sched.label, sched))
        plan = bench.SweepPlan(rows, cfg, args.out)
    else:
        plan = bench.SweepPlan.default(cfg, args.out)
    reports = bench.run_sweep(plan, args.transport)
    for r in reports:
        print(f"{r.label:24s} {r.status:4s} fwd={r.forward_ratio:.3f} bwd={r.backward_ratio:.3f} "
              f"acc={r.token_accuracy:.3f} step={r.step_time * 1e3:.3f}ms loss {r.initial_loss:.3f}->{r.final_loss:.3f}")
    return _report(bench.sweep_passes(reports), "sweep")


def cmd_start_step(args) -> int:
    cfg = _config(args)
    fwd, _, bwd = args.base.partition("/")
    base = CodecSchedule(parse_method(fwd), parse_method(bwd or fwd))
    starts = sorted(args.starts) if args.starts else bench.default_start_steps(cfg.steps)
    reports = bench.run_start_step_sweep(cfg, base, starts, args.out)
    for r in reports:
        print(f"{r.label:28s} {r.status:4s} acc={r.token_accuracy:.3f} bytes={r.total_bytes}")
    return _report(bench.sweep_passes(reports), "start-step")


def cmd_throughput(args) -> int:
    cfg = _config(args)
    rows = bench.run_throughput(cfg, args.rounds, args.out)
    for r in rows:
        print(f"{r['preset']:13s} {r['setting']:8s} ratio={r['ratio']:.3f} per_npu={r['per_npu_ratio']:.3f} "
              f"idle={r['generator_idle_fraction']:.3f}")
    return _report(all(r["invariants_ok"] for r in rows), "throughput")


def cmd_converge(args) -> int:
    cfg = _config(args)
    if args.hot_start is not None:
        cfg = cfg.with_(hot_start_steps=args.hot_start)
    if args.listen or args.connect:
        return _two_process(cfg, args)
    rep = bench.run_convergence(cfg, args.checkpoint, args.out, compare_unsplit=args.compare)
    print(f"steps={len(rep.losses)} loss {rep.losses[0]:.4f}->{rep.losses[-1]:.4f}")
    ok = rep.invariants_ok
    if cfg.hot_start_steps:
        print(f"seam gap {rep.seam_gap:.4f} (single step {rep.seam_step_gap:.4f})")
        ok &= rep.seam_gap <= 0.05
    if args.compare:
        print(f"max gap to the unsplit continuation {rep.reference_gap:.3g}")
    return _report(ok, "converge")


def cmd_grad_check(args) -> int:
    from .toygrad.gradcheck import TOLERANCE, run_gradcheck

    worst = run_gradcheck(args.instances, args.seed or 0)
    for name, err in worst.items():
        print(f"{name:28s} {err:.2e} {'ok' if err <= TOLERANCE else 'FAIL'}")
    return _report(max(worst.values()) <= TOLERANCE, "grad-check")


# ---------------------------------------------------------------- two-process mode


def _connect_retry(addr: str, role: str, timeout: float):
    deadline = time.monotonic() + timeout
    while True:
        try:
            return connect(addr, role, timeout)
        except ConnectionRefusedError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)


def _two_process(cfg: ExperimentConfig, args) -> int:
    """One cluster per process: the listener hosts D (or T), the connector G (or S)."""
    if cfg.hot_start_steps:
        log.error("hot start is only supported in single-process mode")
        return USAGE
    listening = bool(args.listen)
    names = ("G", "D0") if cfg.scenario == 1 else ("S", "T")
    me, peer = (names[1], names[0]) if listening else names
    try:
        if listening:
            ep = listen(args.listen, me, args.timeout)
            respond_over(ep, SessionCredential.from_env(me), timeout=args.timeout)
        else:
            ep = _connect_retry(args.connect, me, args.timeout)
            initiate_over(ep, SessionCredential.from_env(me), timeout=args.timeout)
    except AuthError as exc:
        log.error("handshake failed: %s", exc)
        return FAILED
    trace = ProtocolTrace()
    if cfg.scenario == 1:
        work = Scenario1Work(cfg.scenario1())
        n = cfg.n or calibrate_n(cfg.t_g, cfg.t_d)
        s1 = Scenario1Log()
        role = (discriminator_role(work, n, cfg.steps, cfg.t_d, 0, s1) if listening
                else generator_role(work, n, cfg.steps, cfg.t_g, 0, s1))
    else:
        work = Scenario2Work(cfg.scenario2())
        s2 = Scenario2Log()
        role = (decoder_role(work, cfg.schedule(), cfg.steps, cfg.t_dec, 0, s2) if listening
                else encoder_role(work, cfg.schedule(), cfg.steps, cfg.t_enc, 0, s2))
    try:
        result, trace = run_socket(ep, role, peer, trace, args.timeout)
    except (CodecError, NetError, TimeoutError, ConnectionError) as exc:
        log.error("%s stopped: %s", me, exc)
        return _report(False, me)
    finally:
        ep.close()
    opt_steps = sum(1 for e in trace.events if e.event == "opt_step" and e.role == me)
    if args.out:
        trace.to_csv(args.out)
    print(f"{me}: {opt_steps} optimizer steps, clock {ep.clock:.6f}s")
    return _report(opt_steps == cfg.steps, me)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (INI)")
    common.add_argument("--out", help="CSV output path")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--steps", type=int, help="override the step budget")
    common.add_argument("--transport", choices=("sim", "socket"), default="sim")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="crosscloud", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sweep", parents=[common], help="compression sweep on the translation toy")
    s.add_argument("--schedule", action="append", help="FORWARD/BACKWARD, e.g. 'FP16(SVD(0.6))/INT8'; repeatable")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("start-step", parents=[common], help="delay compression until a given step")
    s.add_argument("--base", default="FP16(SVD(0.6))/INT8")
    s.add_argument("--starts", type=int, nargs="+")
    s.set_defaults(func=cmd_start_step)

    s = sub.add_parser("throughput", parents=[common], help="inter vs intra cluster throughput")
    s.add_argument("--rounds", type=int, default=200)
    s.set_defaults(func=cmd_throughput)

    s = sub.add_parser("converge", parents=[common], help="loss curve, optionally hot-started")
    s.add_argument("--checkpoint", help="checkpoint file written after the hot start")
    s.add_argument("--hot-start", type=int, help="intra-cluster steps before switching to the WAN")
    s.add_argument("--compare", action="store_true", help="also run the counterfactual without the WAN")
    group = s.add_mutually_exclusive_group()
    group.add_argument("--listen", metavar="ADDR", help="host the D (or T) cluster at host:port")
    group.add_argument("--connect", metavar="ADDR", help="run the G (or S) cluster against host:port")
    s.add_argument("--timeout", type=float, default=60.0)
    s.set_defaults(func=cmd_converge)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every layer and loss")
    s.add_argument("--instances", type=int, default=50)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        log.error("%s", exc)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
