"""Structured ring overlay: connection tables, greedy routing, and the
control-message wire format.

Each node keeps the k nearest live addresses on each side of the ring plus
long-range shortcut edges.  Greedy routing forwards to the table entry with
minimal ring distance to the destination and delivers locally when no entry
is strictly closer (the node is then the address-root of the destination).
Every forward strictly decreases distance, so packets never loop.
"""

from __future__ import annotations

import enum
import math
import struct
from collections import deque
from dataclasses import dataclass, field

from .address import (
    RING_SIZE,
    NodeAddress,
    left_distance,
    right_distance,
    ring_distance,
)
from .errors import Truncated, UnknownType
from .transport import Endpoint

K_NEAR_DEFAULT = 2

# Traffic-triggered shortcuts: connect when more than this many packets were
# routed toward one destination inside the sliding window.
SHORTCUT_TRAFFIC_THRESHOLD = 100
SHORTCUT_TRAFFIC_WINDOW_US = 10_000_000


class DropReason(enum.Enum):
    TTL_EXPIRED = "ttl_expired"
    NO_ROUTE = "no_route"


@dataclass(frozen=True)
class ConnectionEntry:
    """One routable edge: a peer address plus the endpoint traffic uses.

    ``relayed`` marks edges whose direct path could not be opened; packets
    for them ride the overlay through a carrier instead of a socket.
    """

    address: NodeAddress
    endpoint: Endpoint
    relayed: bool = False


@dataclass(frozen=True)
class RoutingDecision:
    kind: str  # "deliver" | "forward" | "drop"
    next_hop: ConnectionEntry | None = None
    reason: DropReason | None = None


DELIVER_LOCAL = RoutingDecision(kind="deliver")


def forward_to(entry: ConnectionEntry) -> RoutingDecision:
    return RoutingDecision(kind="forward", next_hop=entry)


def drop(reason: DropReason) -> RoutingDecision:
    return RoutingDecision(kind="drop", reason=reason)


@dataclass
class _Slot:
    address: NodeAddress
    endpoint: Endpoint
    relayed: bool = False
    shortcut: bool = False
    client: bool = False
    pinned: bool = False

    def entry(self) -> ConnectionEntry:
        return ConnectionEntry(self.address, self.endpoint, self.relayed)


@dataclass
class RepairPlan:
    """What to do after a peer was removed: routed probes toward the gap."""

    removed: NodeAddress
    probe_keys: list[NodeAddress]
    deficient_left: bool
    deficient_right: bool


class ConnectionTable:
    """A node's live edges and the near/shortcut views derived from them.

    The table never contains the owner.  The near views are recomputed from
    the full slot set, so an edge appears on both sides of a tiny ring and
    a shortcut is automatically promoted when the ring shrinks around it.
    Slots that are neither near nor flagged (shortcut, client, pinned) are
    eligible for pruning.
    """

    def __init__(self, owner: NodeAddress, k: int = K_NEAR_DEFAULT):
        self.owner = owner
        self.k = k
        self._slots: dict[NodeAddress, _Slot] = {}
        self._traffic: dict[NodeAddress, deque] = {}
        self._version = 0
        self._view_version = -1
        self._near_left: list[ConnectionEntry] = []
        self._near_right: list[ConnectionEntry] = []

    # -- membership -------------------------------------------------------

    def add(
        self,
        address: NodeAddress,
        endpoint: Endpoint,
        *,
        relayed: bool = False,
        shortcut: bool = False,
        client: bool = False,
        pinned: bool = False,
    ) -> bool:
        """Insert or refresh an edge; returns True if it is new."""
        if address == self.owner:
            return False
        slot = self._slots.get(address)
        if slot is not None:
            slot.endpoint = endpoint
            slot.relayed = relayed
            slot.shortcut = slot.shortcut or shortcut
            slot.client = slot.client or client
            slot.pinned = slot.pinned or pinned
            self._version += 1
            return False
        self._slots[address] = _Slot(
            address, endpoint, relayed=relayed, shortcut=shortcut, client=client, pinned=pinned
        )
        self._version += 1
        return True

    def remove(self, address: NodeAddress) -> RepairPlan | None:
        """Drop an edge; returns the probe plan when it was present."""
        if address not in self._slots:
            return None
        del self._slots[address]
        self._traffic.pop(address, None)
        self._version += 1
        return RepairPlan(
            removed=address,
            probe_keys=[address],
            deficient_left=len(self.near_left) < self.k,
            deficient_right=len(self.near_right) < self.k,
        )

    def get(self, address: NodeAddress) -> _Slot | None:
        return self._slots.get(address)

    def __contains__(self, address: NodeAddress) -> bool:
        return address in self._slots

    def __len__(self) -> int:
        return len(self._slots)

    def addresses(self) -> list[NodeAddress]:
        return list(self._slots)

    # -- derived views ----------------------------------------------------

    def _refresh_views(self):
        if self._view_version == self._version:
            return
        by_left = sorted(
            self._slots.values(), key=lambda s: (left_distance(self.owner, s.address), s.address.value)
        )
        by_right = sorted(
            self._slots.values(), key=lambda s: (right_distance(self.owner, s.address), s.address.value)
        )
        self._near_left = [s.entry() for s in by_left[: self.k]]
        self._near_right = [s.entry() for s in by_right[: self.k]]
        self._view_version = self._version

    @property
    def near_left(self) -> list[ConnectionEntry]:
        self._refresh_views()
        return self._near_left

    @property
    def near_right(self) -> list[ConnectionEntry]:
        self._refresh_views()
        return self._near_right

    @property
    def shortcuts(self) -> list[ConnectionEntry]:
        self._refresh_views()
        near = {e.address for e in self._near_left} | {e.address for e in self._near_right}
        return [
            s.entry()
            for s in self._slots.values()
            if s.address not in near and (s.shortcut or s.client or s.pinned)
        ]

    def entries(self) -> list[ConnectionEntry]:
        """All routable edges, deduplicated by address."""
        self._refresh_views()
        seen = {}
        for e in self._near_left + self._near_right + self.shortcuts:
            seen.setdefault(e.address, e)
        return list(seen.values())

    def prunable(self) -> list[NodeAddress]:
        """Edges that are neither near nor flagged for retention."""
        self._refresh_views()
        near = {e.address for e in self._near_left} | {e.address for e in self._near_right}
        return [
            s.address
            for s in self._slots.values()
            if s.address not in near and not (s.shortcut or s.client or s.pinned)
        ]

    def wanted_near(self, address: NodeAddress) -> bool:
        """Would this address enter a near view if connected?"""
        if address == self.owner or address in self._slots:
            return address in {
                e.address for e in self.near_left + self.near_right
            }
        for side, dist in ((self.near_left, left_distance), (self.near_right, right_distance)):
            if len(side) < self.k:
                return True
            worst = dist(self.owner, side[-1].address)
            if dist(self.owner, address) < worst:
                return True
        return False

    # -- traffic counters for shortcut creation ---------------------------

    def note_forward(self, dst: NodeAddress, now_us: int) -> None:
        self._traffic.setdefault(dst, deque()).append(now_us)

    def traffic_count(self, dst: NodeAddress, now_us: int, window_us: int = SHORTCUT_TRAFFIC_WINDOW_US) -> int:
        times = self._traffic.get(dst)
        if not times:
            return 0
        horizon = now_us - window_us
        while times and times[0] < horizon:
            times.popleft()
        if not times:
            del self._traffic[dst]
            return 0
        return len(times)


def maybe_create_shortcut(
    table: ConnectionTable,
    dst: NodeAddress,
    now_us: int,
    threshold: int = SHORTCUT_TRAFFIC_THRESHOLD,
    window_us: int = SHORTCUT_TRAFFIC_WINDOW_US,
) -> bool:
    """Decide whether traffic toward ``dst`` has earned a direct edge."""
    if dst == table.owner or dst in table:
        return False
    return table.traffic_count(dst, now_us, window_us) > threshold


# ---------------------------------------------------------------------------
# Greedy routing


def next_hop(
    self_addr: NodeAddress,
    dest: NodeAddress,
    table: ConnectionTable,
    ttl: int,
) -> RoutingDecision:
    """Pick the next action for a packet addressed to ``dest``.

    Delivers locally when the destination is this node or when no table
    entry is strictly closer (this node is the address-root).  Otherwise
    forwards to the entry with minimal ring distance to the destination,
    breaking ties by the smaller address, so routing is deterministic.
    """
    if dest == self_addr:
        return DELIVER_LOCAL
    if ttl == 0:
        return drop(DropReason.TTL_EXPIRED)
    own_dist = ring_distance(self_addr, dest)
    best = None
    best_key = None
    for entry in table.entries():
        key = (ring_distance(entry.address, dest), entry.address.value)
        if best_key is None or key < best_key:
            best, best_key = entry, key
    if best is None or best_key[0] >= own_dist:
        return DELIVER_LOCAL
    return forward_to(best)


# ---------------------------------------------------------------------------
# Small-world shortcut selection at join time


def estimate_population(table: ConnectionTable) -> int:
    """Estimate ring size from the density of the near neighborhood."""
    owner = table.owner
    estimates = []
    for i, entry in enumerate(table.near_left):
        gap = left_distance(owner, entry.address)
        if gap:
            estimates.append((i + 1) * RING_SIZE / gap)
    for i, entry in enumerate(table.near_right):
        gap = right_distance(owner, entry.address)
        if gap:
            estimates.append((i + 1) * RING_SIZE / gap)
    if not estimates:
        return 1
    return max(1, int(sum(estimates) / len(estimates)))


def sample_shortcut_keys(self_addr: NodeAddress, n_estimate: int, rng) -> list[NodeAddress]:
    """Draw ceil(log2(n)) ring keys at distance d with density proportional to 1/d."""
    if n_estimate < 2:
        return []
    count = math.ceil(math.log2(n_estimate))
    keys = []
    span = math.log(RING_SIZE / 2)
    for _ in range(count):
        d = max(1, int(math.exp(rng.random() * span)))
        sign = 1 if rng.random() < 0.5 else -1
        keys.append(NodeAddress((self_addr.value + sign * d) % RING_SIZE))
    return keys


# ---------------------------------------------------------------------------
# Control message wire format (envelope payload type 0x04)
#
# Each message starts with a subtype byte.  Address lists are encoded as a
# count byte followed by entries of 20 address bytes + 4 IPv4 bytes + 2 port
# bytes.  All integers are big-endian.

CT_CONNECT_REQ = 1
CT_CONNECT_ACK = 2
CT_PING = 3
CT_PONG = 4
CT_NEIGHBOR_LIST = 5

CONNECT_KIND_NEAR = 1
CONNECT_KIND_SHORTCUT = 2


@dataclass(frozen=True)
class ConnectReq:
    """Connection request.

    ``endpoint`` is the requester's advertised (possibly translated)
    endpoint.  ``via`` names a node the requester is already connected to;
    a routed reply is handed to that anchor, which holds a working edge back
    to the requester.  Public requesters set via to their own endpoint.
    """

    kind: int  # CONNECT_KIND_*
    endpoint: Endpoint
    via: Endpoint


@dataclass(frozen=True)
class ConnectAck:
    kind: int
    endpoint: Endpoint  # responder's advertised endpoint
    neighbors: tuple = ()


@dataclass(frozen=True)
class Ping:
    token: int


@dataclass(frozen=True)
class Pong:
    token: int
    observed: Endpoint  # source endpoint as seen by the responder


@dataclass(frozen=True)
class NeighborList:
    neighbors: tuple = ()  # of (NodeAddress, Endpoint)


def _pack_neighbors(neighbors) -> bytes:
    if len(neighbors) > 255:
        neighbors = neighbors[:255]
    out = [len(neighbors).to_bytes(1, "big")]
    for addr, endpoint in neighbors:
        out.append(addr.to_bytes())
        out.append(endpoint.pack())
    return b"".join(out)


def _unpack_neighbors(data: bytes, offset: int) -> tuple[tuple, int]:
    if len(data) < offset + 1:
        raise Truncated("neighbor list count missing")
    count = data[offset]
    offset += 1
    neighbors = []
    for _ in range(count):
        if len(data) < offset + 26:
            raise Truncated("neighbor list entry truncated")
        addr = NodeAddress.from_bytes(data[offset : offset + 20])
        endpoint = Endpoint.unpack(data[offset + 20 : offset + 26])
        neighbors.append((addr, endpoint))
        offset += 26
    return tuple(neighbors), offset


def encode_control(msg) -> bytes:
    if isinstance(msg, ConnectReq):
        return bytes([CT_CONNECT_REQ, msg.kind]) + msg.endpoint.pack() + msg.via.pack()
    if isinstance(msg, ConnectAck):
        return bytes([CT_CONNECT_ACK, msg.kind]) + msg.endpoint.pack() + _pack_neighbors(msg.neighbors)
    if isinstance(msg, Ping):
        return bytes([CT_PING]) + struct.pack("!Q", msg.token)
    if isinstance(msg, Pong):
        return bytes([CT_PONG]) + struct.pack("!Q", msg.token) + msg.observed.pack()
    if isinstance(msg, NeighborList):
        return bytes([CT_NEIGHBOR_LIST]) + _pack_neighbors(msg.neighbors)
    raise TypeError(f"not a control message: {msg!r}")


def decode_control(data: bytes):
    if not data:
        raise Truncated("empty control payload")
    subtype = data[0]
    if subtype == CT_CONNECT_REQ:
        if len(data) < 14:
            raise Truncated("connect request truncated")
        return ConnectReq(
            kind=data[1],
            endpoint=Endpoint.unpack(data[2:8]),
            via=Endpoint.unpack(data[8:14]),
        )
    if subtype == CT_CONNECT_ACK:
        if len(data) < 8:
            raise Truncated("connect ack truncated")
        neighbors, _ = _unpack_neighbors(data, 8)
        return ConnectAck(kind=data[1], endpoint=Endpoint.unpack(data[2:8]), neighbors=neighbors)
    if subtype == CT_PING:
        if len(data) < 9:
            raise Truncated("ping truncated")
        return Ping(token=struct.unpack_from("!Q", data, 1)[0])
    if subtype == CT_PONG:
        if len(data) < 15:
            raise Truncated("pong truncated")
        token = struct.unpack_from("!Q", data, 1)[0]
        return Pong(token=token, observed=Endpoint.unpack(data[9:15]))
    if subtype == CT_NEIGHBOR_LIST:
        neighbors, _ = _unpack_neighbors(data, 1)
        return NeighborList(neighbors=neighbors)
    raise UnknownType(f"unknown control subtype {subtype}")
