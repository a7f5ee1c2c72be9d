"""WAN link model, frame format, in-process and socket endpoints, session handshake."""

from __future__ import annotations

import enum
import hashlib
import hmac
import logging
import os
import secrets
import socket
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .codec import CodecMethod, Nested, ProtocolError

log = logging.getLogger(__name__)

SECRET_ENV = "NEBULA_SECRET"


class NetError(Exception):
    pass


class StallError(NetError, TimeoutError):
    """A blocking receive could not be satisfied (pacing stall)."""

    def __init__(self, role: str, awaited: str, detail: str = ""):
        self.role = role
        self.awaited = awaited
        msg = f"{role} stalled waiting for {awaited}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class CorruptFrameError(NetError):
    pass


class AuthError(NetError):
    pass


# ---------------------------------------------------------------- link model


@dataclass(frozen=True)
class LinkSpec:
    bandwidth_bits_per_s: float
    one_way_latency_s: float = 0.0
    jitter_fraction: float = 0.0
    # seconds per encoded element, keyed by "FP16", "INT8", "SVD", "IDENTITY", "IDS16"
    codec_cost_s_per_element: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.bandwidth_bits_per_s > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth_bits_per_s}")
        if self.one_way_latency_s < 0:
            raise ValueError(f"latency must be >= 0, got {self.one_way_latency_s}")
        if not 0 <= self.jitter_fraction < 1:
            raise ValueError(f"jitter fraction must lie in [0, 1), got {self.jitter_fraction}")

    def codec_cost(self, method: Optional[CodecMethod], elements: int) -> float:
        if method is None or not self.codec_cost_s_per_element:
            return 0.0
        costs = self.codec_cost_s_per_element
        if isinstance(method, Nested):
            per = costs.get("SVD", 0.0) + costs.get(method.outer.name, 0.0)
        else:
            per = costs.get(method.name.split("(")[0], 0.0)
        return per * elements

    def with_(self, **changes) -> "LinkSpec":
        from dataclasses import replace

        return replace(self, **changes)


# One-way latency of the WAN links is not reported.  Toy tensors are a few
# kilobytes, so the desk default is scaled down to 0.1 ms to keep the
# bandwidth term, not the latency, as the dominant link cost.
DESK_LATENCY_S = 1e-4
WAN_170 = LinkSpec(170e6, DESK_LATENCY_S)
WAN_60 = LinkSpec(60e6, DESK_LATENCY_S)
INTRA = LinkSpec(float("inf"), 0.0)

PRESETS = {"wan170": WAN_170, "wan60": WAN_60, "intra": INTRA}


def transfer_time(
    nbytes: int,
    link: LinkSpec,
    method: Optional[CodecMethod] = None,
    elements: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """latency + 8 * bytes / bandwidth + codec cost, times a jitter factor if enabled."""
    if nbytes < 0:
        raise ValueError("byte count must be >= 0")
    t = link.one_way_latency_s + 8.0 * nbytes / link.bandwidth_bits_per_s
    t += link.codec_cost(method, elements)
    if link.jitter_fraction and rng is not None:
        j = link.jitter_fraction
        t *= rng.uniform(1.0 - j, 1.0 + j)
    return t


# ---------------------------------------------------------------- frames


class FrameKind(enum.IntEnum):
    PAYLOAD = 1
    PACING = 2
    HANDSHAKE = 3
    ACK = 4


_FRAME_HEAD = struct.Struct("<16sQB")
_CRC = struct.Struct("<I")
NO_SESSION = bytes(16)


@dataclass(frozen=True)
class Frame:
    session_id: bytes
    seq: int
    kind: FrameKind
    body: bytes

    def to_bytes(self) -> bytes:
        raw = _FRAME_HEAD.pack(self.session_id, self.seq, int(self.kind)) + self.body
        return raw + _CRC.pack(zlib.crc32(raw))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Frame":
        if len(data) < _FRAME_HEAD.size + _CRC.size:
            raise ProtocolError(f"frame truncated ({len(data)} bytes)")
        raw, (crc,) = data[: -_CRC.size], _CRC.unpack(data[-_CRC.size :])
        if zlib.crc32(raw) != crc:
            raise CorruptFrameError(f"frame CRC-32 mismatch ({len(data)} bytes)")
        sid, seq, kind = _FRAME_HEAD.unpack_from(raw)
        try:
            kind = FrameKind(kind)
        except ValueError:
            raise ProtocolError(f"unknown frame kind {kind}") from None
        return cls(sid, seq, kind, bytes(raw[_FRAME_HEAD.size :]))

    def app_view(self) -> tuple[int, str, bytes]:
        """Session-independent content used to compare transports."""
        return self.seq, self.kind.name, self.body


class Endpoint:
    """One side of a duplex session; sequence numbers are per direction."""

    role = "endpoint"

    def __init__(self):
        self.session_id = NO_SESSION
        self._send_seq = 0
        self._recv_seq = 0
        self.sent: list[Frame] = []
        self.received: list[Frame] = []

    def _next_frame(self, kind: FrameKind, body: bytes) -> Frame:
        f = Frame(self.session_id, self._send_seq, kind, bytes(body))
        self._send_seq += 1
        self.sent.append(f)
        return f

    def _accept(self, data: bytes, kind: Optional[FrameKind]) -> Frame:
        f = Frame.from_bytes(data)
        if f.session_id != self.session_id:
            raise AuthError(f"{self.role}: frame for unknown session {f.session_id.hex()}")
        if f.seq != self._recv_seq:
            raise ProtocolError(f"{self.role}: expected sequence {self._recv_seq}, got {f.seq}")
        if kind is not None and f.kind != kind:
            raise ProtocolError(f"{self.role}: expected {kind.name} frame, got {f.kind.name}")
        self._recv_seq += 1
        self.received.append(f)
        return f

    def start_session(self, session_id: bytes) -> None:
        self.session_id = session_id
        self._send_seq = 0
        self._recv_seq = 0
        self.sent.clear()
        self.received.clear()


class _Direction:
    """FIFO one-way channel: serialization occupies the link, latency overlaps."""

    def __init__(self, spec: LinkSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.busy_until = 0.0
        self.last_arrival = 0.0
        self.queue: deque[tuple[float, bytes]] = deque()

    def transmit(self, data: bytes, now: float, nbytes: int, method, elements: int) -> float:
        spec = self.spec
        serial = 8.0 * nbytes / spec.bandwidth_bits_per_s + spec.codec_cost(method, elements)
        latency = spec.one_way_latency_s
        if spec.jitter_fraction:
            f = self.rng.uniform(1.0 - spec.jitter_fraction, 1.0 + spec.jitter_fraction)
            serial *= f
            latency *= f
        start = max(now, self.busy_until)
        self.busy_until = start + serial
        arrival = max(self.busy_until + latency, self.last_arrival)
        self.last_arrival = arrival
        self.queue.append((arrival, data))
        return arrival


class SimEndpoint(Endpoint):
    """Endpoint on a :class:`SimulatedLink`, carrying its owner's logical clock."""

    def __init__(self, role: str, outbound: _Direction, inbound: _Direction):
        super().__init__()
        self.role = role
        self._out = outbound
        self._in = inbound
        self.clock = 0.0
        self.idle = 0.0
        self.last_arrival = 0.0
        self.last_send_arrival = 0.0

    def send(self, kind: FrameKind, body: bytes, *, nbytes: Optional[int] = None,
             method: Optional[CodecMethod] = None, elements: int = 0) -> Frame:
        """Queue a frame; ``nbytes`` overrides the bytes charged to the link."""
        f = self._next_frame(kind, body)
        data = f.to_bytes()
        charged = len(data) if nbytes is None else nbytes
        self.last_send_arrival = self._out.transmit(data, self.clock, charged, method, elements)
        return f

    def pending(self) -> bool:
        return bool(self._in.queue)

    def recv(self, kind: Optional[FrameKind] = None, timeout: Optional[float] = None) -> Frame:
        awaited = kind.name if kind is not None else "any frame"
        if not self._in.queue:
            raise StallError(self.role, awaited, "nothing in flight on the link")
        arrival, data = self._in.queue[0]
        wait = arrival - self.clock
        if timeout is not None and wait > timeout:
            raise StallError(self.role, awaited, f"next frame arrives after {wait:.6g}s > timeout {timeout:g}s")
        self._in.queue.popleft()
        f = self._accept(data, kind)
        if wait > 0:
            self.idle += wait
            self.clock = arrival
        self.last_arrival = arrival
        return f


class SimulatedLink:
    """Deterministic duplex link with one endpoint per side."""

    def __init__(self, spec: LinkSpec, seed: int = 0, roles=("A", "B")):
        rng = np.random.default_rng(seed)
        ab = _Direction(spec, np.random.default_rng(rng.integers(2**63)))
        ba = _Direction(spec, np.random.default_rng(rng.integers(2**63)))
        self.spec = spec
        self.a = SimEndpoint(roles[0], ab, ba)
        self.b = SimEndpoint(roles[1], ba, ab)

    def corrupt_next(self, side: str = "a", bit: int = 0) -> None:
        """Flip one bit of the next frame travelling from ``side`` (fault injection)."""
        direction = self.a._out if side == "a" else self.b._out
        arrival, data = direction.queue[0]
        buf = bytearray(data)
        # skip the frame header so the flip lands in the body
        pos = _FRAME_HEAD.size + bit // 8
        buf[pos] ^= 1 << (bit % 8)
        direction.queue[0] = (arrival, bytes(buf))


# ---------------------------------------------------------------- sockets

_LEN = struct.Struct("<I")


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


class SocketEndpoint(Endpoint):
    """Blocking TCP endpoint with u32 length-prefixed frames."""

    def __init__(self, sock: socket.socket, role: str = "endpoint"):
        super().__init__()
        self.sock = sock
        self.role = role
        self.clock = 0.0
        self.idle = 0.0
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, kind: FrameKind, body: bytes, **_ignored) -> Frame:
        f = self._next_frame(kind, body)
        data = f.to_bytes()
        self.sock.sendall(_LEN.pack(len(data)) + data)
        return f

    def recv(self, kind: Optional[FrameKind] = None, timeout: Optional[float] = 30.0) -> Frame:
        self.sock.settimeout(timeout)
        try:
            (n,) = _LEN.unpack(_recv_exact(self.sock, _LEN.size))
            data = _recv_exact(self.sock, n)
        except socket.timeout:
            raise StallError(self.role, kind.name if kind else "any frame", f"no data within {timeout}s") from None
        return self._accept(data, kind)

    def close(self) -> None:
        self.sock.close()


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def listen(addr: str, role: str = "listener", timeout: float = 30.0) -> SocketEndpoint:
    srv = socket.create_server(parse_addr(addr))
    srv.settimeout(timeout)
    try:
        conn, _ = srv.accept()
    finally:
        srv.close()
    return SocketEndpoint(conn, role)


def connect(addr: str, role: str = "connector", timeout: float = 30.0) -> SocketEndpoint:
    return SocketEndpoint(socket.create_connection(parse_addr(addr), timeout=timeout), role)


# ---------------------------------------------------------------- handshake


@dataclass
class SessionCredential:
    peer_identity: str
    secret: bytes
    nonce: Optional[bytes] = None

    @classmethod
    def from_env(cls, identity: str, default: Optional[bytes] = None) -> "SessionCredential":
        value = os.environ.get(SECRET_ENV)
        if value is None:
            if default is None:
                raise AuthError(f"{SECRET_ENV} is not set")
            log.warning("%s not set; using the built-in development secret", SECRET_ENV)
            return cls(identity, default)
        return cls(identity, value.encode())


_HELLO = struct.Struct("<16sH")


def _mac(secret: bytes, tag: bytes, nonce_i: bytes, nonce_r: bytes, ids: bytes) -> bytes:
    return hmac.new(secret, tag + nonce_i + nonce_r + ids, hashlib.sha256).digest()


def session_id_for(nonce_i: bytes, nonce_r: bytes, secret: bytes) -> bytes:
    return hashlib.sha256(nonce_i + nonce_r + secret).digest()[:16]


def _pack_hello(nonce: bytes, identity: str) -> bytes:
    ident = identity.encode()
    return _HELLO.pack(nonce, len(ident)) + ident


def _unpack_hello(data: bytes) -> tuple[bytes, str, bytes]:
    nonce, n = _HELLO.unpack_from(data)
    ident = data[_HELLO.size : _HELLO.size + n]
    return nonce, ident.decode(), data[_HELLO.size + n :]


class HandshakeInitiator:
    def __init__(self, cred: SessionCredential):
        self.cred = cred
        self.nonce = cred.nonce or secrets.token_bytes(16)
        self.session_id: Optional[bytes] = None

    def hello(self) -> bytes:
        return _pack_hello(self.nonce, self.cred.peer_identity)

    def finish(self, reply: bytes) -> bytes:
        """Check the responder's proof; return our confirmation message."""
        nonce_r, peer, mac_r = _unpack_hello(reply)
        ids = self.cred.peer_identity.encode() + b"|" + peer.encode()
        expected = _mac(self.cred.secret, b"R", self.nonce, nonce_r, ids)
        if not hmac.compare_digest(mac_r, expected):
            raise AuthError(f"responder {peer!r} failed to prove the shared secret")
        self.session_id = session_id_for(self.nonce, nonce_r, self.cred.secret)
        return _mac(self.cred.secret, b"I", self.nonce, nonce_r, ids)


class HandshakeResponder:
    """Keeps every initiator nonce it has seen, so replayed hellos are refused."""

    def __init__(self, cred: SessionCredential):
        self.cred = cred
        self.seen: set[bytes] = set()
        self._pending: Optional[tuple[bytes, bytes, bytes]] = None
        self.session_id: Optional[bytes] = None

    def respond(self, hello: bytes) -> bytes:
        nonce_i, peer, _ = _unpack_hello(hello)
        if nonce_i in self.seen:
            raise AuthError(f"replayed handshake nonce from {peer!r}")
        self.seen.add(nonce_i)
        nonce_r = self.cred.nonce or secrets.token_bytes(16)
        ids = peer.encode() + b"|" + self.cred.peer_identity.encode()
        self._pending = (nonce_i, nonce_r, ids)
        mac_r = _mac(self.cred.secret, b"R", nonce_i, nonce_r, ids)
        return _pack_hello(nonce_r, self.cred.peer_identity) + mac_r

    def confirm(self, message: bytes) -> bytes:
        if self._pending is None:
            raise AuthError("confirmation without a pending handshake")
        nonce_i, nonce_r, ids = self._pending
        self._pending = None
        expected = _mac(self.cred.secret, b"I", nonce_i, nonce_r, ids)
        if not hmac.compare_digest(message, expected):
            raise AuthError("initiator failed to prove the shared secret")
        self.session_id = session_id_for(nonce_i, nonce_r, self.cred.secret)
        return self.session_id


def handshake(initiator_cred: SessionCredential, responder_cred: SessionCredential,
              responder: Optional[HandshakeResponder] = None) -> bytes:
    """Run the three-message exchange in process and return the agreed session id."""
    ini = HandshakeInitiator(initiator_cred)
    res = responder or HandshakeResponder(responder_cred)
    reply = res.respond(ini.hello())
    confirm = ini.finish(reply)
    sid = res.confirm(confirm)
    assert sid == ini.session_id
    return sid


_REJECT = b"REJECT"


def initiate_over(ep: Endpoint, cred: SessionCredential, timeout: Optional[float] = 30.0) -> bytes:
    """Initiator side of the handshake over an endpoint; establishes its session."""
    ini = HandshakeInitiator(cred)
    ep.send(FrameKind.HANDSHAKE, ini.hello())
    reply = ep.recv(FrameKind.HANDSHAKE, timeout=timeout).body
    try:
        confirm = ini.finish(reply)
    except AuthError:
        ep.send(FrameKind.HANDSHAKE, _REJECT)
        raise
    ep.send(FrameKind.HANDSHAKE, confirm)
    ep.start_session(ini.session_id)
    return ini.session_id


def respond_over(ep: Endpoint, cred: SessionCredential, responder: Optional[HandshakeResponder] = None,
                 timeout: Optional[float] = 30.0) -> bytes:
    res = responder or HandshakeResponder(cred)
    hello = ep.recv(FrameKind.HANDSHAKE, timeout=timeout).body
    ep.send(FrameKind.HANDSHAKE, res.respond(hello))
    confirm = ep.recv(FrameKind.HANDSHAKE, timeout=timeout).body
    if confirm == _REJECT:
        raise AuthError("initiator rejected our proof: shared secrets differ")
    sid = res.confirm(confirm)
    ep.start_session(sid)
    return sid


def establish_sim_session(link: SimulatedLink, cred_a: SessionCredential, cred_b: SessionCredential) -> bytes:
    """Handshake across a simulated link (side a initiates); handshake time is not charged."""
    a, b = link.a, link.b
    ini = HandshakeInitiator(cred_a)
    res = HandshakeResponder(cred_b)
    a.send(FrameKind.HANDSHAKE, ini.hello())
    reply = res.respond(b.recv(FrameKind.HANDSHAKE).body)
    b.send(FrameKind.HANDSHAKE, reply)
    try:
        confirm = ini.finish(a.recv(FrameKind.HANDSHAKE).body)
    except AuthError as exc:
        a.send(FrameKind.HANDSHAKE, _REJECT)
        b.recv(FrameKind.HANDSHAKE)
        raise AuthError(f"{exc}; session refused on both sides") from None
    a.send(FrameKind.HANDSHAKE, confirm)
    sid = res.confirm(b.recv(FrameKind.HANDSHAKE).body)
    for ep in (a, b):
        ep.start_session(sid)
        ep.clock = 0.0
        ep.idle = 0.0
    for d in (a._out, b._out):
        d.busy_until = d.last_arrival = 0.0
    return sid
