"""Models of the four common NAT types and decentralized traversal.

All four types share the response property: once an internal socket has
sent to a remote endpoint, packets from that exact remote endpoint flow
back through the binding while it lives.  The three cone types reuse one
external mapping per internal socket regardless of destination; a symmetric
NAT allocates a fresh external port per destination, which is what defeats
hole punching against port-sensitive peers.

Translated-address discovery is piggybacked on ordinary overlay keepalives:
every peer echoes the source endpoint it observed, so each connection is an
opportunity to learn the mapping without any dedicated server.
"""

from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field

from .address import NodeAddress
from .transport import Endpoint

BINDING_LIFETIME_US = 120_000_000
EXTERNAL_PORT_BASE = 40_000

# Shared schedule for simultaneous open: both sides fire this many attempts
# at this spacing, jittered by up to +/- jitter from the seeded generator.
OPEN_ATTEMPTS = 5
OPEN_SPACING_US = 1_000_000
OPEN_JITTER_US = 100_000


class NatType(enum.Enum):
    FULL_CONE = "full_cone"
    RESTRICTED_CONE = "restricted_cone"
    PORT_RESTRICTED = "port_restricted"
    SYMMETRIC = "symmetric"

    @property
    def is_cone(self) -> bool:
        return self is not NatType.SYMMETRIC


@dataclass
class NatBinding:
    """One translation entry plus the filtering state its type accumulates."""

    internal: Endpoint
    external: Endpoint
    nat_type: NatType
    last_used: int
    lifetime_us: int = BINDING_LIFETIME_US
    remote: Endpoint | None = None  # symmetric: the single bound destination
    allowed_ips: set = field(default_factory=set)
    allowed_endpoints: set = field(default_factory=set)

    def expired(self, now_us: int) -> bool:
        return now_us - self.last_used > self.lifetime_us

    def permits(self, sender: Endpoint) -> bool:
        if self.nat_type is NatType.FULL_CONE:
            return True
        if self.nat_type is NatType.RESTRICTED_CONE:
            return sender.ip in self.allowed_ips
        if self.nat_type is NatType.PORT_RESTRICTED:
            return sender in self.allowed_endpoints
        return sender == self.remote


class NatDevice:
    """One NAT box: translates outbound sources, filters inbound traffic.

    External ports are allocated sequentially from 40000 so behaviour is
    reproducible under a fixed scenario.
    """

    def __init__(self, nat_type: NatType, external_ip: str, lifetime_us: int = BINDING_LIFETIME_US):
        self.nat_type = nat_type
        self.external_ip = external_ip
        self.lifetime_us = lifetime_us
        self._next_port = EXTERNAL_PORT_BASE
        self._bindings: dict = {}  # cone: internal -> binding; symmetric: (internal, remote) -> binding
        self._by_external_port: dict[int, NatBinding] = {}
        self.inbound_dropped = 0
        self.inbound_forwarded = 0

    def _allocate(self, internal: Endpoint, remote: Endpoint | None, now_us: int) -> NatBinding:
        external = Endpoint(self.external_ip, self._next_port)
        self._next_port += 1
        binding = NatBinding(
            internal=internal,
            external=external,
            nat_type=self.nat_type,
            last_used=now_us,
            lifetime_us=self.lifetime_us,
            remote=remote,
        )
        self._by_external_port[external.port] = binding
        return binding

    def outbound(self, src: Endpoint, dst: Endpoint, now_us: int) -> Endpoint:
        """Translate an outbound packet's source; creates or refreshes the binding."""
        if self.nat_type.is_cone:
            binding = self._bindings.get(src)
            if binding is None or binding.expired(now_us):
                binding = self._allocate(src, None, now_us)
                self._bindings[src] = binding
            if self.nat_type is NatType.RESTRICTED_CONE:
                binding.allowed_ips.add(dst.ip)
            elif self.nat_type is NatType.PORT_RESTRICTED:
                binding.allowed_endpoints.add(dst)
        else:
            key = (src, dst)
            binding = self._bindings.get(key)
            if binding is None or binding.expired(now_us):
                binding = self._allocate(src, dst, now_us)
                self._bindings[key] = binding
        binding.last_used = now_us
        return binding.external

    def inbound(self, src: Endpoint, dst_external: Endpoint, now_us: int) -> Endpoint | None:
        """Translate an inbound packet toward its internal endpoint, or drop it."""
        binding = self._by_external_port.get(dst_external.port)
        if (
            binding is None
            or dst_external.ip != self.external_ip
            or binding.expired(now_us)
            or not binding.permits(src)
        ):
            self.inbound_dropped += 1
            return None
        binding.last_used = now_us
        self.inbound_forwarded += 1
        return binding.internal

    def binding_for(self, internal: Endpoint, remote: Endpoint | None = None) -> NatBinding | None:
        if self.nat_type.is_cone:
            return self._bindings.get(internal)
        return self._bindings.get((internal, remote))


@dataclass(frozen=True)
class ObservedAddress:
    """A translated endpoint as echoed back by one peer."""

    as_seen_by: NodeAddress
    external: Endpoint
    observed_at: int


def discover_translation(
    local: Endpoint, echoed: Endpoint, peer: NodeAddress, now_us: int
) -> ObservedAddress | None:
    """Compare a peer's echo with the local endpoint; record any translation."""
    if echoed == local:
        return None
    return ObservedAddress(as_seen_by=peer, external=echoed, observed_at=now_us)


# ---------------------------------------------------------------------------
# Standalone simultaneous open between two (possibly NATed) sockets.
#
# This is the pairwise primitive: both sides blast requests at the other's
# advertised endpoint on a shared retry schedule, each NAT sees its own
# host's outbound first and then admits the peer's packet as a response.
# The full overlay drives the same exchange through its connect machinery.

CONNECTED = "connected"
RELAYED = "relayed"


class _OpenSide:
    def __init__(self, name, device, local, advertised):
        self.name = name
        self.device = device
        self.local = local
        self.advertised = advertised
        self.got_contact = False
        self.acked = False


def simultaneous_open(
    device_a: NatDevice | None,
    device_b: NatDevice | None,
    local_a: Endpoint,
    local_b: Endpoint,
    advertised_a: Endpoint,
    advertised_b: Endpoint,
    rng,
    attempts: int = OPEN_ATTEMPTS,
    spacing_us: int = OPEN_SPACING_US,
    jitter_us: int = OPEN_JITTER_US,
    latency_us: int = 10_000,
) -> str:
    """Run the hole-punching exchange; returns "connected" or "relayed".

    Connected means both sides ended up receiving traffic from the other,
    i.e. a direct path exists in both directions (one direction lands first
    and the reply rides the response property back).
    """
    a = _OpenSide("a", device_a, local_a, advertised_a)
    b = _OpenSide("b", device_b, local_b, advertised_b)
    events: list = []
    seq = 0

    def push(t, fn):
        nonlocal seq
        heapq.heappush(events, (t, seq, fn))
        seq += 1

    def send(t, side, other, target):
        src = side.local
        if side.device is not None:
            src = side.device.outbound(side.local, target, t)

        def arrive(arrival=t + latency_us, src=src, target=target):
            dst_internal = target
            if other.device is not None:
                dst_internal = other.device.inbound(src, target, arrival)
                if dst_internal is None:
                    return
            if dst_internal != other.local:
                return
            other.got_contact = True
            # Reply once to the endpoint we actually saw (the reversed tuple).
            if not other.acked:
                other.acked = True
                push(arrival, lambda: send(arrival, other, side, src))

        push(t + latency_us, arrive)

    for side, other, target in ((a, b, advertised_b), (b, a, advertised_a)):
        t = 0
        for _ in range(attempts):
            jitter = rng.randint(-jitter_us, jitter_us)
            at = max(0, t + jitter)
            push(at, lambda at=at, s=side, o=other, tg=target: send(at, s, o, tg))
            t += spacing_us

    while events:
        _, _, fn = heapq.heappop(events)
        fn()

    return CONNECTED if a.got_contact and b.got_contact else RELAYED
