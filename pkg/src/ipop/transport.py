"""Overlay envelope wire format and point-to-point channels.

Every message on the overlay travels inside a fixed 48-byte envelope:

    offset  size  field
    0       4     magic "IPOP"
    4       1     format version (1)
    5       1     payload type (0x01 tunneled IP, 0x04 overlay control,
                  0x05 address resolution)
    6       1     ttl
    7       1     hops taken so far
    8       20    source overlay address
    28      20    destination overlay address
    48      ...   payload

All fields are big-endian.  The envelope is carried by whichever channel
connects two nodes: the deterministic in-memory channel used by the
simulator, a real UDP socket, or a length-framed byte stream.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass, replace

from .address import NodeAddress
from .errors import BadMagic, BadVersion, ChannelClosed, Oversize, Truncated, UnknownType

MAGIC = b"IPOP"
WIRE_VERSION = 1
HEADER_LEN = 48

PAYLOAD_IP = 0x01
PAYLOAD_CONTROL = 0x04
PAYLOAD_DHT = 0x05
PAYLOAD_TYPES = (PAYLOAD_IP, PAYLOAD_CONTROL, PAYLOAD_DHT)

DEFAULT_TTL = 64
SIM_MTU = 1500
STREAM_MAX_FRAME = 1 << 20

_HEADER = struct.Struct("!4sBBBB20s20s")


@dataclass(frozen=True)
class BrunetPacket:
    """One overlay envelope plus its payload bytes."""

    payload_type: int
    ttl: int
    hops: int
    src: NodeAddress
    dst: NodeAddress
    payload: bytes


def encode(pkt: BrunetPacket) -> bytes:
    return (
        _HEADER.pack(
            MAGIC,
            WIRE_VERSION,
            pkt.payload_type,
            pkt.ttl,
            pkt.hops,
            pkt.src.to_bytes(),
            pkt.dst.to_bytes(),
        )
        + pkt.payload
    )


def decode(data: bytes) -> BrunetPacket:
    if len(data) < HEADER_LEN:
        raise Truncated(f"envelope needs {HEADER_LEN} bytes, got {len(data)}")
    magic, version, ptype, ttl, hops, src, dst = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise BadVersion(f"unsupported envelope version {version}")
    if ptype not in PAYLOAD_TYPES:
        raise UnknownType(f"unknown payload type {ptype:#04x}")
    return BrunetPacket(
        payload_type=ptype,
        ttl=ttl,
        hops=hops,
        src=NodeAddress.from_bytes(src),
        dst=NodeAddress.from_bytes(dst),
        payload=data[HEADER_LEN:],
    )


def forward_hook(pkt: BrunetPacket) -> BrunetPacket:
    """Header arithmetic applied once per forwarding node: ttl down, hops up.

    The caller is responsible for refusing to forward when ttl is already 0;
    nothing else in the envelope may change while in transit.
    """
    if pkt.ttl == 0:
        raise ValueError("cannot forward a packet with ttl 0")
    return replace(pkt, ttl=pkt.ttl - 1, hops=pkt.hops + 1)


@dataclass(frozen=True, order=True)
class Endpoint:
    """An IPv4 transport endpoint; wire form is 4 address bytes + 2 port bytes."""

    ip: str
    port: int

    def __post_init__(self):
        socket.inet_aton(self.ip)
        if not 0 < self.port <= 0xFFFF:
            raise ValueError(f"port out of range: {self.port}")

    def pack(self) -> bytes:
        return socket.inet_aton(self.ip) + self.port.to_bytes(2, "big")

    @classmethod
    def unpack(cls, raw: bytes) -> "Endpoint":
        if len(raw) != 6:
            raise Truncated(f"endpoint needs 6 bytes, got {len(raw)}")
        return cls(socket.inet_ntoa(raw[:4]), int.from_bytes(raw[4:6], "big"))

    @classmethod
    def parse(cls, text: str) -> "Endpoint":
        host, _, port = text.rpartition(":")
        return cls(host, int(port))

    def __str__(self):
        return f"{self.ip}:{self.port}"


@dataclass(frozen=True)
class ChannelProfile:
    """Behaviour of one simulated link.

    latency_us is the one-way propagation delay; with jitter_us > 0 the
    sampled delay is uniform in [latency-jitter, latency+jitter].  drop and
    reorder are per-datagram probabilities.  bandwidth_bps, when set, models
    store-and-forward serialization at bytes per simulated second.
    """

    latency_us: int = 20_000
    jitter_us: int = 0
    drop: float = 0.0
    reorder: float = 0.0
    bandwidth_bps: int | None = None

    def validate(self):
        if self.latency_us < 0 or self.jitter_us < 0:
            raise ValueError("latency/jitter must be non-negative")
        if not 0.0 <= self.drop <= 1.0:
            raise ValueError(f"drop probability out of range: {self.drop}")
        if not 0.0 <= self.reorder <= 1.0:
            raise ValueError(f"reorder probability out of range: {self.reorder}")
        if self.bandwidth_bps is not None and self.bandwidth_bps <= 0:
            raise ValueError("bandwidth_bps must be positive when set")

    def sample_latency(self, rng) -> int:
        if self.jitter_us == 0:
            return self.latency_us
        return self.latency_us + rng.randint(-self.jitter_us, self.jitter_us)


class SimulatedLink:
    """One direction of a point-to-point datagram channel inside the simulator.

    The link owns no clock or queue of its own: the constructor receives a
    ``schedule(delay_us, fn)`` hook from the event loop and calls ``deliver``
    when a datagram survives.  A datagram selected for reordering is penalized
    with an extra delay so that a later send overtakes it.
    """

    REORDER_EXTRA_US = 1_000

    def __init__(self, profile: ChannelProfile, rng, schedule, deliver, mtu: int = SIM_MTU):
        profile.validate()
        self.profile = profile
        self.rng = rng
        self.schedule = schedule
        self.deliver = deliver
        self.mtu = mtu
        self.closed = False
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self._busy_until = 0  # serialization horizon when bandwidth-capped
        self._last_delivery = 0

    def send(self, data: bytes, now_us: int) -> None:
        if self.closed:
            raise ChannelClosed("link is closed")
        if len(data) > self.mtu:
            raise Oversize(f"datagram of {len(data)} bytes exceeds mtu {self.mtu}")
        self.sent += 1
        if self.profile.drop > 0 and self.rng.random() < self.profile.drop:
            self.dropped += 1
            return
        start = now_us
        if self.profile.bandwidth_bps:
            start = max(now_us, self._busy_until)
            start += (len(data) * 1_000_000) // self.profile.bandwidth_bps
            self._busy_until = start
        delay = start - now_us + self.profile.sample_latency(self.rng)
        if self.profile.reorder > 0 and self.rng.random() < self.profile.reorder:
            delay += self.profile.sample_latency(self.rng) + self.REORDER_EXTRA_US
        # Guarantee FIFO never runs backwards past an intentional reorder.
        arrival = now_us + delay

        def _arrive(payload=data):
            self.delivered += 1
            self.deliver(payload)

        self.schedule(max(delay, 0), _arrive)
        self._last_delivery = arrival

    def close(self):
        self.closed = True

    def conservation_ok(self) -> bool:
        in_flight = self.sent - self.delivered - self.dropped
        return in_flight >= 0


class UdpChannel:
    """Real datagram transport bound to a local endpoint."""

    MAX_DATAGRAM = 65_507

    def __init__(self, bind: Endpoint):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((bind.ip, bind.port))
        self.sock.setblocking(False)
        ip, port = self.sock.getsockname()
        self.local = Endpoint(ip, port)
        self.closed = False

    def fileno(self) -> int:
        return self.sock.fileno()

    def send(self, to: Endpoint, data: bytes) -> None:
        if self.closed:
            raise ChannelClosed("socket is closed")
        if len(data) > self.MAX_DATAGRAM:
            raise Oversize(f"datagram of {len(data)} bytes exceeds UDP limit")
        self.sock.sendto(data, (to.ip, to.port))

    def receive(self) -> tuple[Endpoint, bytes] | None:
        try:
            data, (ip, port) = self.sock.recvfrom(self.MAX_DATAGRAM)
        except BlockingIOError:
            return None
        return Endpoint(ip, port), data

    def close(self):
        if not self.closed:
            self.closed = True
            self.sock.close()


class StreamChannel:
    """Length-framed packet transport over a reliable byte stream.

    Each packet is written as a 4-byte big-endian length prefix followed by
    the packet bytes; a frame is written atomically with respect to other
    frames on the same channel.
    """

    def __init__(self, sock):
        self.sock = sock
        self._buf = b""
        self.closed = False

    def send(self, data: bytes) -> None:
        if self.closed:
            raise ChannelClosed("stream is closed")
        if len(data) > STREAM_MAX_FRAME:
            raise Oversize(f"frame of {len(data)} bytes exceeds stream limit")
        self.sock.sendall(len(data).to_bytes(4, "big") + data)

    def receive(self) -> bytes | None:
        """Return the next complete frame, reading from the socket as needed."""
        while True:
            frame = self._take_frame()
            if frame is not None:
                return frame
            try:
                chunk = self.sock.recv(65536)
            except BlockingIOError:
                return None
            if not chunk:
                self.closed = True
                return None
            self._buf += chunk

    def feed(self, data: bytes) -> list[bytes]:
        """Push raw bytes in (for callers doing their own socket reads)."""
        self._buf += data
        frames = []
        while True:
            frame = self._take_frame()
            if frame is None:
                return frames
            frames.append(frame)

    def _take_frame(self) -> bytes | None:
        if len(self._buf) < 4:
            return None
        length = int.from_bytes(self._buf[:4], "big")
        if length > STREAM_MAX_FRAME:
            raise Oversize(f"framed length {length} exceeds stream limit")
        if len(self._buf) < 4 + length:
            return None
        frame = self._buf[4 : 4 + length]
        self._buf = self._buf[4 + length :]
        return frame

    def close(self):
        if not self.closed:
            self.closed = True
            self.sock.close()
