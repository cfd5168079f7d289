"""Mapping virtual IPs to overlay addresses.

Two schemes coexist.  Direct mode hashes the destination IP straight to an
overlay address, which is also how every node derives its own identity, so
one node can route for exactly one IP.  The DHT mode stores (ip -> owner)
records at the address-root of the hashed IP (that node is the mapper for
the IP), supports several IPs per node and updates the record when an IP
migrates; resolvers cache answers for a bounded time.
"""

from __future__ import annotations

import hashlib
import socket
import struct
from dataclasses import dataclass
import enum

from .address import ZERO_ADDRESS, NodeAddress
from .errors import Truncated, UnknownType

CACHE_TTL_US = 30_000_000
REREGISTER_INTERVAL_US = 60_000_000
STORE_TIMEOUT_US = 2_000_000
STORE_RETRIES = 3
STORE_RETRY_BACKOFF_US = 10_000_000
LOOKUP_TIMEOUT_US = 2_000_000
LOOKUP_RETRIES = 3


class ResolutionMode(enum.Enum):
    DIRECT = "direct"
    BRUNET_ARP = "brunet-arp"


def direct_map(ip: str) -> NodeAddress:
    """Hash the 4 raw big-endian address bytes onto the identifier ring."""
    digest = hashlib.sha1(socket.inet_aton(ip)).digest()
    return NodeAddress.from_bytes(digest)


# ---------------------------------------------------------------------------
# Wire format (envelope payload type 0x05)
#
# Every message is subtype(1) + ip(4) + owner(20) + version(8), big-endian.

ST_STORE = 1
ST_STORE_ACK = 2
ST_LOOKUP = 3
ST_LOOKUP_REPLY = 4
ST_HANDOFF = 5

_SUBTYPES = (ST_STORE, ST_STORE_ACK, ST_LOOKUP, ST_LOOKUP_REPLY, ST_HANDOFF)
_MSG_LEN = 1 + 4 + 20 + 8


@dataclass(frozen=True)
class DhtMessage:
    subtype: int
    ip: str
    owner: NodeAddress
    version: int


def encode_dht(msg: DhtMessage) -> bytes:
    return (
        msg.subtype.to_bytes(1, "big")
        + socket.inet_aton(msg.ip)
        + msg.owner.to_bytes()
        + struct.pack("!Q", msg.version)
    )


def decode_dht(data: bytes) -> DhtMessage:
    if len(data) < _MSG_LEN:
        raise Truncated(f"resolution message needs {_MSG_LEN} bytes, got {len(data)}")
    subtype = data[0]
    if subtype not in _SUBTYPES:
        raise UnknownType(f"unknown resolution subtype {subtype}")
    return DhtMessage(
        subtype=subtype,
        ip=socket.inet_ntoa(data[1:5]),
        owner=NodeAddress.from_bytes(data[5:25]),
        version=struct.unpack_from("!Q", data, 25)[0],
    )


# ---------------------------------------------------------------------------
# Mapper-side storage


@dataclass
class DhtEntry:
    ip: str
    owner: NodeAddress
    version: int


class MapperStore:
    """Records held by the node that is the address-root of each stored IP.

    The mapper owns the version counter: every accepted store bumps it, so
    versions observed for one IP never decrease and the latest writer wins.
    """

    def __init__(self):
        self.entries: dict[str, DhtEntry] = {}

    def store(self, ip: str, owner: NodeAddress) -> int:
        entry = self.entries.get(ip)
        if entry is None:
            entry = DhtEntry(ip=ip, owner=owner, version=1)
            self.entries[ip] = entry
        else:
            entry.version += 1
            entry.owner = owner
        return entry.version

    def absorb(self, ip: str, owner: NodeAddress, version: int) -> bool:
        """Accept a handed-off record unless a newer one is already held."""
        entry = self.entries.get(ip)
        if entry is not None and entry.version > version:
            return False
        self.entries[ip] = DhtEntry(ip=ip, owner=owner, version=version)
        return True

    def lookup(self, ip: str) -> DhtEntry | None:
        return self.entries.get(ip)

    def pop(self, ip: str) -> DhtEntry | None:
        return self.entries.pop(ip, None)

    def ips(self) -> list[str]:
        return list(self.entries)


def miss_reply(ip: str) -> DhtMessage:
    """Lookup reply meaning the mapper holds no record for this IP."""
    return DhtMessage(subtype=ST_LOOKUP_REPLY, ip=ip, owner=ZERO_ADDRESS, version=0)


def is_miss(msg: DhtMessage) -> bool:
    return msg.owner == ZERO_ADDRESS and msg.version == 0


# ---------------------------------------------------------------------------
# Resolver-side cache


class ResolutionCache:
    """Per-node answer cache; entries past their expiry are never returned."""

    def __init__(self, ttl_us: int = CACHE_TTL_US):
        self.ttl_us = ttl_us
        self._entries: dict[str, tuple[NodeAddress, int, int]] = {}

    def get(self, ip: str, now_us: int) -> tuple[NodeAddress, int] | None:
        hit = self._entries.get(ip)
        if hit is None:
            return None
        owner, version, expires_at = hit
        if now_us >= expires_at:
            del self._entries[ip]
            return None
        return owner, version

    def put(self, ip: str, owner: NodeAddress, version: int, now_us: int) -> None:
        self._entries[ip] = (owner, version, now_us + self.ttl_us)

    def invalidate(self, ip: str) -> None:
        self._entries.pop(ip, None)

    def __len__(self):
        return len(self._entries)
