"""Cross-cluster training protocols.

Each cluster is written as a Python generator that yields actions
(:class:`Compute`, :class:`Send`, :class:`Recv`, :class:`Note`).  The same role
code runs under two drivers: :func:`run_sim` interleaves both clusters on the
logical clock of a :class:`~crosscloud.netsim.SimulatedLink`, and
:func:`run_socket` drives one cluster against a real socket endpoint.

Scenario I: a generator cluster (G) samples replacement tokens and ships only
their ids to a discriminator cluster made of a root and ``n`` subs.  The root
scatters micro-batch ``j`` of a round to sub ``j``; subs sync with the root and
the root answers G with a pacing token.  Nothing else travels D -> G.

Scenario II: an encoder cluster (S) ships its last hidden states to a decoder
cluster (T), which returns the gradient with respect to them.  Both tensors go
through the step-gated codec schedule.
"""

from __future__ import annotations

import csv
import enum
import io
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Generator, Iterable, Optional

import numpy as np

from . import codec
from .codec import CodecSchedule, CompressedPayload, ProtocolError, select_method
from .netsim import (
    Endpoint,
    FrameKind,
    LinkSpec,
    SessionCredential,
    SimulatedLink,
    StallError,
    establish_sim_session,
    initiate_over,
    respond_over,
)
from .toygrad import (
    AdapterDecoder,
    AdapterEncoder,
    Discriminator,
    Generator,
    MarkovCorpus,
    ModelConfig,
    OptimizerState,
    ReversalTranslation,
    adam_step,
    build_corrupt,
    discriminator_objective,
    generator_loss,
    mask_batch,
    translation_loss,
)


class PacingViolation(ProtocolError):
    pass


# ---------------------------------------------------------------- roles


class RoleTag(enum.IntEnum):
    GENERATOR = 1
    DISCRIMINATOR_ROOT = 2
    DISCRIMINATOR_SUB = 3
    ENCODER = 4
    DECODER = 5


_ROLE_PREFIX = {
    RoleTag.GENERATOR: "G",
    RoleTag.DISCRIMINATOR_ROOT: "D0",
    RoleTag.DISCRIMINATOR_SUB: "D",
    RoleTag.ENCODER: "S",
    RoleTag.DECODER: "T",
}


@dataclass(frozen=True)
class ClusterRole:
    tag: RoleTag
    index: int = 0
    compute_s: float = 0.0  # simulated seconds per micro-batch

    def __post_init__(self):
        if self.compute_s < 0:
            raise ValueError("compute time must be >= 0")
        if (self.tag == RoleTag.DISCRIMINATOR_SUB) != (self.index >= 1):
            raise ValueError(f"only discriminator subs carry an index >= 1, got {self.tag.name}/{self.index}")

    @property
    def name(self) -> str:
        if self.tag == RoleTag.DISCRIMINATOR_SUB:
            return f"D{self.index}"
        return _ROLE_PREFIX[self.tag]


def discriminator_cluster(n: int, t_d: float) -> list[ClusterRole]:
    """One root plus subs 1..n."""
    if n < 1:
        raise ValueError("a discriminator cluster needs at least one sub")
    return [ClusterRole(RoleTag.DISCRIMINATOR_ROOT)] + [
        ClusterRole(RoleTag.DISCRIMINATOR_SUB, k, t_d) for k in range(1, n + 1)
    ]


def calibrate_n(t_g: float, t_d: float) -> int:
    """Subs per generator so both clusters finish a round together: max(1, round(t_D / t_G))."""
    if t_g <= 0 or t_d <= 0:
        raise ValueError("compute times must be positive")
    return max(1, round(t_d / t_g))


_TOKEN = struct.Struct("<QB")


@dataclass(frozen=True)
class PacingToken:
    step: int
    role: RoleTag = RoleTag.DISCRIMINATOR_ROOT

    def to_bytes(self) -> bytes:
        return _TOKEN.pack(self.step, int(self.role))

    @classmethod
    def from_bytes(cls, data: bytes) -> "PacingToken":
        if len(data) != _TOKEN.size:
            raise ProtocolError(f"pacing token must be {_TOKEN.size} bytes, got {len(data)}")
        step, role = _TOKEN.unpack(data)
        return cls(step, RoleTag(role))


# ---------------------------------------------------------------- trace


@dataclass(frozen=True)
class TraceEvent:
    timestamp: float
    role: str
    event: str
    step: int = -1
    nbytes: int = 0
    seq: int = -1


@dataclass
class ProtocolTrace:
    events: list[TraceEvent] = field(default_factory=list)

    def add(self, timestamp, role, event, step=-1, nbytes=0, seq=-1) -> None:
        self.events.append(TraceEvent(float(timestamp), role, event, int(step), int(nbytes), int(seq)))

    def ordered(self) -> list[TraceEvent]:
        # stable: events at equal times keep the order they were produced in
        return sorted(self.events, key=lambda e: e.timestamp)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["timestamp", "role", "event", "step", "bytes", "seq"])
        for e in self.ordered():
            w.writerow([repr(e.timestamp), e.role, e.event, e.step, e.nbytes, e.seq])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def unmatched(self) -> list[TraceEvent]:
        """SEND events whose frame was never received (and stray RECVs)."""
        sends = {}
        for e in self.events:
            if e.event.startswith("send:"):
                sends[(e.role, e.seq)] = e
        out = []
        for e in self.events:
            if e.event.startswith("recv:"):
                peer = e.event.split("@", 1)[1]
                if sends.pop((peer, e.seq), None) is None:
                    out.append(e)
        return out + list(sends.values())

    def bytes_sent(self, role: str, kind: Optional[str] = None) -> int:
        return sum(
            e.nbytes
            for e in self.events
            if e.role == role and e.event.startswith("send:") and (kind is None or e.event.split(":")[1].split("@")[0] == kind)
        )


@dataclass(frozen=True)
class Verdict:
    ok: bool
    timestamp: Optional[float] = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.ok


def pacing_invariant_check(trace: ProtocolTrace) -> Verdict:
    """Step counters of the two clusters never drift apart by more than one.

    Scenario I additionally requires that G's optimizer step k >= 1 follows
    receipt of the pacing token for step k - 1.  Scenario II requires the two
    sides to agree after every encoder step.
    """
    events = trace.ordered()
    roles = {e.role for e in events}
    pair = ("G", "D0") if "G" in roles else ("S", "T")
    counts = {pair[0]: 0, pair[1]: 0}
    tokens: set[int] = set()
    # a resumed trace has no token for its first generator step
    first_g = min((e.step for e in events if e.role == "G" and e.event == "opt_step"), default=0)
    i = 0
    while i < len(events):
        t = events[i].timestamp
        j = i
        while j < len(events) and events[j].timestamp == t:
            e = events[j]
            if e.event == "recv:PACING@D0" and e.role == "G":
                tokens.add(e.step)
            if e.event == "opt_step" and e.role in counts:
                if e.role == "G" and e.step > first_g and (e.step - 1) not in tokens:
                    return Verdict(False, t, f"G applied step {e.step} without the pacing token for step {e.step - 1}")
                counts[e.role] += 1
                if pair == ("S", "T") and e.role == "S" and counts["S"] != counts["T"]:
                    return Verdict(False, t, f"after step {e.step}: S at {counts['S']}, T at {counts['T']}")
            j += 1
        gap = abs(counts[pair[0]] - counts[pair[1]])
        if gap > 1:
            return Verdict(False, t, f"step counters diverged: {counts}")
        i = j
    return Verdict(True)


# ---------------------------------------------------------------- actions


@dataclass
class Compute:
    seconds: float
    step: int = -1
    label: str = "compute"


@dataclass
class Send:
    kind: FrameKind
    body: bytes
    step: int = -1
    nbytes: Optional[int] = None  # bytes charged to the link; defaults to frame size
    method: Optional[codec.CodecMethod] = None
    elements: int = 0


@dataclass
class Recv:
    kind: FrameKind
    step: int = -1


@dataclass
class Note:
    event: str
    step: int = -1
    role: Optional[str] = None
    nbytes: int = 0


Role = Generator  # generator yielding actions; Recv gets the Frame sent back


class _Actor:
    def __init__(self, ep: Endpoint, gen: Role, peer: str, trace: ProtocolTrace):
        self.ep = ep
        self.gen = gen
        self.peer = peer
        self.trace = trace
        self.pending = None  # action waiting for a frame
        self.value = None
        self.done = False
        self.result = None

    @property
    def role(self) -> str:
        return self.ep.role

    def _do(self, action) -> bool:
        """Execute one action; False if it must wait for a frame."""
        ep, tr = self.ep, self.trace
        if isinstance(action, Compute):
            ep.clock += action.seconds
            tr.add(ep.clock, self.role, action.label, action.step)
        elif isinstance(action, Send):
            f = ep.send(action.kind, action.body, nbytes=action.nbytes, method=action.method, elements=action.elements)
            charged = action.nbytes if action.nbytes is not None else len(f.to_bytes())
            tr.add(ep.clock, self.role, f"send:{action.kind.name}@{self.peer}", action.step, charged, f.seq)
        elif isinstance(action, Recv):
            if not self.ready():
                return False
            f = ep.recv(action.kind)
            tr.add(ep.clock, self.role, f"recv:{action.kind.name}@{self.peer}", action.step, len(f.body), f.seq)
            self.value = f
        elif isinstance(action, Note):
            tr.add(ep.clock, action.role or self.role, action.event, action.step, action.nbytes)
        else:
            raise TypeError(f"unknown action {action!r}")
        return True

    def ready(self) -> bool:
        return getattr(self.ep, "pending", lambda: True)()

    def advance(self) -> bool:
        """Run until blocked or finished; returns True if any progress was made."""
        progressed = False
        while not self.done:
            if self.pending is not None:
                if not self._do(self.pending):
                    return progressed
                self.pending = None
            try:
                action = self.gen.send(self.value)
            except StopIteration as stop:
                self.done = True
                self.result = stop.value
                return True
            self.value = None
            progressed = True
            if isinstance(action, Recv):
                self.pending = action
            elif not self._do(action):
                self.pending = action
        return progressed


def run_sim(link: SimulatedLink, role_a: Role, role_b: Role, trace: Optional[ProtocolTrace] = None):
    """Interleave two roles on a simulated link until both finish.

    Returns (result_a, result_b, trace).  A deadlock (both sides blocked on a
    receive with nothing in flight) raises :class:`StallError` naming the
    role and frame kind awaited.
    """
    trace = trace if trace is not None else ProtocolTrace()
    a = _Actor(link.a, role_a, link.b.role, trace)
    b = _Actor(link.b, role_b, link.a.role, trace)
    while not (a.done and b.done):
        moved = a.advance()
        moved = b.advance() or moved
        if not moved and not (a.done and b.done):
            stuck = a if not a.done else b
            awaited = stuck.pending.kind.name if stuck.pending is not None else "frame"
            raise StallError(stuck.role, awaited, f"no frame in flight at t={stuck.ep.clock:.6g}s")
    return a.result, b.result, trace


def run_socket(ep: Endpoint, role: Role, peer: str, trace: Optional[ProtocolTrace] = None,
               timeout: Optional[float] = 60.0):
    """Drive one role against a blocking endpoint; compute time is logged on a logical clock."""
    trace = trace if trace is not None else ProtocolTrace()
    value = None
    while True:
        try:
            action = role.send(value)
        except StopIteration as stop:
            return stop.value, trace
        value = None
        if isinstance(action, Compute):
            ep.clock += action.seconds
            trace.add(ep.clock, ep.role, action.label, action.step)
        elif isinstance(action, Send):
            f = ep.send(action.kind, action.body)
            charged = action.nbytes if action.nbytes is not None else len(f.to_bytes())
            trace.add(ep.clock, ep.role, f"send:{action.kind.name}@{peer}", action.step, charged, f.seq)
        elif isinstance(action, Recv):
            value = ep.recv(action.kind, timeout=timeout)
            trace.add(ep.clock, ep.role, f"recv:{action.kind.name}@{peer}", action.step, len(value.body), value.seq)
        elif isinstance(action, Note):
            trace.add(ep.clock, action.role or ep.role, action.event, action.step, action.nbytes)


def run_loopback(role_a: Role, role_b: Role, names=("A", "B"), cred: Optional[SessionCredential] = None,
                 timeout: float = 60.0):
    """Run two roles in threads over a loopback TCP connection after a handshake.

    Side ``b`` listens, side ``a`` connects and initiates.  Returns
    ((result_a, endpoint_a), (result_b, endpoint_b), trace).
    """
    import socket

    from .netsim import SocketEndpoint

    cred = cred or SessionCredential(names[0], b"loopback-dev-secret")
    srv = socket.create_server(("127.0.0.1", 0))
    port = srv.getsockname()[1]
    out: dict = {}
    trace_b = ProtocolTrace()

    def serve():
        try:
            srv.settimeout(timeout)
            conn, _ = srv.accept()
            ep = SocketEndpoint(conn, names[1])
            respond_over(ep, SessionCredential(names[1], cred.secret), timeout=timeout)
            out["b"] = (run_socket(ep, role_b, names[0], trace_b, timeout)[0], ep)
        except BaseException as exc:  # surfaced in the caller
            out["b_error"] = exc
        finally:
            srv.close()

    th = threading.Thread(target=serve, daemon=True)
    th.start()
    ep_a = SocketEndpoint(socket.create_connection(("127.0.0.1", port), timeout=timeout), names[0])
    try:
        initiate_over(ep_a, SessionCredential(names[0], cred.secret), timeout=timeout)
        res_a, trace = run_socket(ep_a, role_a, names[1], timeout=timeout)
    finally:
        th.join(timeout)
        ep_a.close()
    if "b_error" in out:
        raise out["b_error"]
    res_b, ep_b = out["b"]
    ep_b.close()
    trace.events.extend(trace_b.events)
    return (res_a, ep_a), (res_b, ep_b), trace


def _credentials(names) -> tuple[SessionCredential, SessionCredential]:
    secret = b"desk-simulation-secret"
    return SessionCredential(names[0], secret), SessionCredential(names[1], secret)


def sim_link(spec: LinkSpec, seed: int, names) -> SimulatedLink:
    link = SimulatedLink(spec, seed, names)
    establish_sim_session(link, *_credentials(names))
    return link


# ---------------------------------------------------------------- scenario I


@dataclass(frozen=True)
class Scenario1Setup:
    vocab: int = 16
    dim: int = 32
    hidden: int = 64
    layers: int = 1
    length: int = 16
    batch: int = 16
    mask_fraction: float = 0.15
    lam: float = 50.0
    gamma: float = 1.0
    lr: float = 2e-3
    warmup: int = 100
    decay: Optional[int] = None
    seed: int = 0


class Scenario1Work:
    """Toy ELECTRA training split across the two clusters.

    Both clusters hold a copy of the seeded corpus (and derive the same
    masks); only sampled token ids cross the link.
    """

    def __init__(self, setup: Scenario1Setup):
        self.setup = setup
        self.corpus = MarkovCorpus(setup.vocab, setup.seed)
        cfg = ModelConfig(self.corpus.model_vocab, setup.dim, setup.hidden, setup.layers, setup.length)
        self.G = Generator(cfg, setup.seed)
        self.D = Discriminator(cfg, setup.seed)
        self.opt_g = OptimizerState(setup.lr, setup.warmup, setup.decay)
        self.opt_d = OptimizerState(setup.lr, setup.warmup, setup.decay)
        self.last_l_g = {}

    def original(self, mb: int):
        s = self.setup
        return mask_batch(self.corpus.batch(mb, s.batch, s.length), s.mask_fraction, [s.seed, 0x3A, mb])

    # generator cluster
    def generator_microbatch(self, mb: int):
        batch = self.original(mb)
        l_g, grads = generator_loss(self.G, batch, self.corpus.mask_id)
        corrupt, _ = build_corrupt(self.G, batch, [self.setup.seed, 0x5A, mb], self.corpus.mask_id,
                                   probs=self.G.last_probs)
        return corrupt.ids, l_g, {k: g.copy() for k, g in grads.items()}

    def generator_update(self, grads: list, losses: list) -> float:
        mean = {k: sum(g[k] for g in grads) / len(grads) for k in grads[0]}
        adam_step(self.opt_g, self.G.parameters(), mean, self.G.frozen_names())
        return float(np.mean(losses))

    # discriminator cluster
    def discriminator_microbatch(self, mb: int, ids: np.ndarray):
        original = self.original(mb)
        if ids.shape != original.shape:
            raise ProtocolError(f"sampled ids {ids.shape} do not match batch {original.shape}")
        corrupt = original.with_ids(ids)
        labels = (ids == original.ids).astype(np.float64)
        s = self.setup
        l_d, l_clm, grads = discriminator_objective(self.D, corrupt, labels, original, s.lam, s.gamma)
        return l_d, l_clm, {k: g.copy() for k, g in grads.items()}

    def discriminator_update(self, grads: list) -> None:
        mean = {k: sum(g[k] for g in grads) / len(grads) for k in grads[0]}
        adam_step(self.opt_d, self.D.parameters(), mean, self.D.frozen_names())


class TimingOnlyWork:
    """Protocol-only stand-in: random token ids of a fixed shape, no models."""

    def __init__(self, batch: int = 32, length: int = 128, vocab: int = 64, seed: int = 0):
        self.shape = (batch, length)
        self.vocab = vocab
        self.seed = seed

    def generator_microbatch(self, mb: int):
        ids = np.random.default_rng([self.seed, mb]).integers(0, self.vocab, self.shape)
        return ids, 0.0, None

    def generator_update(self, grads, losses) -> float:
        return 0.0

    def discriminator_microbatch(self, mb: int, ids):
        if ids.shape != self.shape:
            raise ProtocolError(f"sampled ids {ids.shape} do not match {self.shape}")
        return 0.0, 0.0, None

    def discriminator_update(self, grads) -> None:
        pass


@dataclass
class Scenario1Log:
    l_g: list = field(default_factory=list)
    l_d: list = field(default_factory=list)
    l_clm: list = field(default_factory=list)


def generator_role(work, n: int, rounds: int, t_g: float, start: int = 0, log: Optional[Scenario1Log] = None):
    """G cluster: n micro-batches per round, ids out, pacing token in, then its optimizer step."""
    log = log if log is not None else Scenario1Log()
    for k in range(start, start + rounds):
        grads, losses = [], []
        for j in range(n):
            mb = k * n + j
            ids, l_g, g = work.generator_microbatch(mb)
            grads.append(g)
            losses.append(l_g)
            yield Compute(t_g, k, "forward")
            p = codec.encode_token_ids(ids, step=k)
            yield Send(FrameKind.PAYLOAD, p.to_bytes(), k, p.accounted_bytes, codec.TokenIds(), ids.size)
        if k > start:
            yield from _await_token(k - 1)
        log.l_g.append(work.generator_update(grads, losses))
        yield Note("opt_step", k)
    if rounds:
        yield from _await_token(start + rounds - 1)
    return log


def _await_token(expected: int):
    frame = yield Recv(FrameKind.PACING, expected)
    token = PacingToken.from_bytes(frame.body)
    if token.step != expected:
        raise PacingViolation(f"G expected the pacing token for step {expected}, got step {token.step}")


def discriminator_role(work, n: int, rounds: int, t_d: float, start: int = 0, log: Optional[Scenario1Log] = None):
    """D cluster: the root scatters micro-batch j to sub j, subs sync, root emits the token."""
    log = log if log is not None else Scenario1Log()
    for k in range(start, start + rounds):
        grads, l_d, l_clm = [], [], []
        for j in range(n):
            frame = yield Recv(FrameKind.PAYLOAD, k)
            p = CompressedPayload.from_bytes(frame.body)
            if p.step != k:
                raise PacingViolation(f"D0 expected payloads for step {k}, got step {p.step}")
            ids = codec.decode(p)
            yield Note("scatter", k, role=f"D{j + 1}")
            d, c, g = work.discriminator_microbatch(k * n + j, ids)
            l_d.append(d)
            l_clm.append(c)
            grads.append(g)
        # subs run in parallel: one sub's compute time covers the round
        yield Compute(t_d, k, "discriminate")
        for j in range(n):
            yield Note("sync", k, role=f"D{j + 1}")
        work.discriminator_update(grads)
        log.l_d.append(float(np.mean(l_d)))
        log.l_clm.append(float(np.mean(l_clm)))
        yield Note("opt_step", k)
        yield Send(FrameKind.PACING, PacingToken(k).to_bytes(), k)
    return log


@dataclass
class Scenario1Result:
    trace: ProtocolTrace
    g_log: Scenario1Log
    d_log: Scenario1Log
    n: int
    rounds: int
    g_clock: float
    g_idle: float
    d_to_g_payload_bytes: int
    g_to_d_bytes: int
    lam: float = 50.0
    gamma: float = 1.0

    @property
    def idle_fraction(self) -> float:
        return self.g_idle / self.g_clock if self.g_clock else 0.0

    @property
    def total_loss(self) -> list[float]:
        return [g + self.lam * d + self.gamma * c for g, d, c in zip(self.g_log.l_g, self.d_log.l_d, self.d_log.l_clm)]


def run_scenario1(work, n: int, rounds: int, t_g: float, t_d: float, link: LinkSpec, seed: int = 0,
                  start: int = 0) -> Scenario1Result:
    sl = sim_link(link, seed, ("G", "D0"))
    g_log, d_log = Scenario1Log(), Scenario1Log()
    _, _, trace = run_sim(
        sl,
        generator_role(work, n, rounds, t_g, start, g_log),
        discriminator_role(work, n, rounds, t_d, start, d_log),
    )
    d_payload = sum(len(f.body) for f in sl.b.sent if f.kind != FrameKind.PACING)
    setup = getattr(work, "setup", None)
    return Scenario1Result(
        trace, g_log, d_log, n, rounds, sl.a.clock, sl.a.idle, d_payload,
        trace.bytes_sent("G"),
        lam=setup.lam if setup else 50.0, gamma=setup.gamma if setup else 1.0,
    )


def scenario1_round(work, n: int, t_g: float, t_d: float, link: LinkSpec, step: int = 0, seed: int = 0) -> ProtocolTrace:
    return run_scenario1(work, n, 1, t_g, t_d, link, seed, start=step).trace


# ---------------------------------------------------------------- scenario II


@dataclass(frozen=True)
class Scenario2Setup:
    vocab: int = 16
    dim: int = 32
    hidden: int = 64
    layers: int = 1
    length: int = 8
    batch: int = 32
    lr: float = 3e-3
    warmup: int = 100
    decay: Optional[int] = None
    smoothing: float = 0.0
    seed: int = 0


class Scenario2Work:
    """Adapter encoder (source side) and adapter decoder (target side) on the reversal task."""

    def __init__(self, setup: Scenario2Setup):
        self.setup = setup
        self.task = ReversalTranslation(setup.vocab, setup.length, setup.seed)
        cfg = ModelConfig(self.task.model_vocab, setup.dim, setup.hidden, setup.layers, setup.length)
        self.enc = AdapterEncoder(cfg, setup.seed)
        self.dec = AdapterDecoder(cfg, setup.seed)
        self.opt_s = OptimizerState(setup.lr, setup.warmup, setup.decay)
        self.opt_t = OptimizerState(setup.lr, setup.warmup, setup.decay)

    @property
    def hidden_shape(self) -> tuple[int, int, int]:
        s = self.setup
        return s.batch, s.length, s.dim

    def evaluate(self, batch_size: int = 256):
        src, tgt = self.task.eval_set(batch_size)
        from .toygrad import accuracy

        H = self.enc.forward(src)
        logits = self.dec.forward(np.full_like(tgt, self.task.mask_id), H)
        return accuracy(logits, tgt)


@dataclass
class Scenario2Log:
    losses: list = field(default_factory=list)
    forward: list = field(default_factory=list)  # (value_bytes, baseline_bytes, nominal, accounted)
    backward: list = field(default_factory=list)


def _payload_stats(p: CompressedPayload):
    return p.value_bytes, p.baseline_bytes, p.nominal_ratio, p.accounted_bytes


def encoder_role(work: Scenario2Work, schedule: CodecSchedule, steps: int, t_enc: float, start: int = 0,
                 log: Optional[Scenario2Log] = None):
    """S cluster: encode, ship H^E, wait for its gradient, update the adapters."""
    log = log if log is not None else Scenario2Log()
    s = work.setup
    enc = work.enc
    for step in range(start, start + steps):
        src = work.task.source_batch(step, s.batch)
        H = enc.forward(src)
        yield Compute(t_enc / 2, step, "forward")
        flat = H.reshape(-1, H.shape[-1])
        method = select_method(schedule, step, "forward")
        p = codec.encode(flat, method, step)
        log.forward.append(_payload_stats(p))
        yield Send(FrameKind.PAYLOAD, p.to_bytes(), step, p.accounted_bytes, method, flat.size)
        frame = yield Recv(FrameKind.PAYLOAD, step)
        g = CompressedPayload.from_bytes(frame.body)
        if g.step != step or g.shape != flat.shape:
            raise ProtocolError(
                f"gradient for step {g.step} with shape {g.shape} does not match H^E of step {step} {flat.shape}"
            )
        dH = codec.decode(g).reshape(H.shape)
        enc.zero_grad()
        enc.backward(dH)
        adam_step(work.opt_s, enc.parameters(), enc.gradients(), enc.frozen_names())
        yield Compute(t_enc / 2, step, "backward")
        yield Note("opt_step", step)
    return log


def decoder_role(work: Scenario2Work, schedule: CodecSchedule, steps: int, t_dec: float, start: int = 0,
                 log: Optional[Scenario2Log] = None):
    """T cluster: decode H^E, compute the loss, return d loss / d H^E, update the adapters."""
    log = log if log is not None else Scenario2Log()
    s = work.setup
    shape = work.hidden_shape
    for step in range(start, start + steps):
        frame = yield Recv(FrameKind.PAYLOAD, step)
        p = CompressedPayload.from_bytes(frame.body)
        if p.step != step or p.shape != (shape[0] * shape[1], shape[2]):
            raise ProtocolError(f"H^E for step {p.step} with shape {p.shape} does not match step {step} {shape}")
        H = codec.decode(p).reshape(shape)
        tgt = work.task.target_batch(step, s.batch)
        loss, _, dH = translation_loss(work.dec, H, tgt, work.task.mask_id, s.smoothing)
        adam_step(work.opt_t, work.dec.parameters(), work.dec.gradients(), work.dec.frozen_names())
        log.losses.append(loss)
        yield Compute(t_dec, step, "decode")
        flat = dH.reshape(-1, shape[2])
        method = select_method(schedule, step, "backward")
        g = codec.encode(flat, method, step)
        log.backward.append(_payload_stats(g))
        yield Note("opt_step", step)
        yield Send(FrameKind.PAYLOAD, g.to_bytes(), step, g.accounted_bytes, method, flat.size)
    return log


@dataclass
class Scenario2Result:
    trace: ProtocolTrace
    s_log: Scenario2Log
    t_log: Scenario2Log
    steps: int
    sim_time: float
    frames_s: list = field(default_factory=list)
    frames_t: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return self.t_log.losses

    @staticmethod
    def _ratio(rows) -> float:
        return sum(r[0] for r in rows) / sum(r[1] for r in rows) if rows else float("nan")

    @property
    def forward_ratio(self) -> float:
        return self._ratio(self.s_log.forward)

    @property
    def backward_ratio(self) -> float:
        return self._ratio(self.t_log.backward)

    @property
    def forward_nominal(self) -> float:
        return float(np.mean([r[2] for r in self.s_log.forward])) if self.s_log.forward else float("nan")

    @property
    def total_bytes(self) -> int:
        return sum(r[3] for r in self.s_log.forward) + sum(r[3] for r in self.t_log.backward)

    @property
    def step_time(self) -> float:
        return self.sim_time / self.steps if self.steps else 0.0


def run_scenario2(work: Scenario2Work, schedule: CodecSchedule, steps: int, t_enc: float, t_dec: float,
                  link: LinkSpec, seed: int = 0, start: int = 0, transport: str = "sim") -> Scenario2Result:
    s_log, t_log = Scenario2Log(), Scenario2Log()
    s_role = encoder_role(work, schedule, steps, t_enc, start, s_log)
    t_role = decoder_role(work, schedule, steps, t_dec, start, t_log)
    if transport == "sim":
        sl = sim_link(link, seed, ("S", "T"))
        _, _, trace = run_sim(sl, s_role, t_role)
        ep_s, ep_t, clock = sl.a, sl.b, sl.a.clock
    elif transport == "socket":
        (_, ep_s), (_, ep_t), trace = run_loopback(s_role, t_role, ("S", "T"))
        clock = ep_s.clock
    else:
        raise ValueError(f"unknown transport {transport!r}")
    return Scenario2Result(
        trace, s_log, t_log, steps, clock,
        [f.app_view() for f in ep_s.sent], [f.app_view() for f in ep_t.sent],
    )


def scenario2_step(work: Scenario2Work, schedule: CodecSchedule, step: int, t_enc: float, t_dec: float,
                   link: LinkSpec, seed: int = 0) -> ProtocolTrace:
    return run_scenario2(work, schedule, 1, t_enc, t_dec, link, seed, start=step).trace


def monolithic_scenario2(work: Scenario2Work, steps: int, start: int = 0) -> list[float]:
    """Reference: the same model trained in one process with no link in between."""
    s = work.setup
    losses = []
    for step in range(start, start + steps):
        H = work.enc.forward(work.task.source_batch(step, s.batch))
        loss, _, dH = translation_loss(work.dec, H, work.task.target_batch(step, s.batch), work.task.mask_id,
                                       s.smoothing)
        adam_step(work.opt_t, work.dec.parameters(), work.dec.gradients(), work.dec.frozen_names())
        work.enc.zero_grad()
        work.enc.backward(dH)
        adam_step(work.opt_s, work.enc.parameters(), work.enc.gradients(), work.enc.frozen_names())
        losses.append(loss)
    return losses
