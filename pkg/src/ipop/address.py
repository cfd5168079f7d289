"""Identifier-ring arithmetic for 160-bit overlay addresses.

Addresses live on a circle modulo 2**160.  The canonical wire encoding is
exactly 20 big-endian bytes.  Routing uses the minimal-arc distance, which
is symmetric and zero only for equal addresses.
"""

from __future__ import annotations

from dataclasses import dataclass

ADDRESS_BITS = 160
ADDRESS_BYTES = 20
RING_SIZE = 1 << ADDRESS_BITS


@dataclass(frozen=True, order=True)
class NodeAddress:
    """A position on the identifier ring."""

    value: int

    def __post_init__(self):
        if not 0 <= self.value < RING_SIZE:
            raise ValueError(f"address out of range: {self.value:#x}")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "NodeAddress":
        if len(raw) != ADDRESS_BYTES:
            raise ValueError(f"address must be {ADDRESS_BYTES} bytes, got {len(raw)}")
        return cls(int.from_bytes(raw, "big"))

    @classmethod
    def from_hex(cls, text: str) -> "NodeAddress":
        return cls.from_bytes(bytes.fromhex(text))

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(ADDRESS_BYTES, "big")

    def hex(self) -> str:
        return self.to_bytes().hex()

    def __repr__(self):
        return f"NodeAddress({self.hex()[:10]}..)"


# Wildcard destination used by first-contact hello messages, before the
# sender has learned the peer's real address.
ZERO_ADDRESS = NodeAddress(0)


def ring_distance(a: NodeAddress, b: NodeAddress) -> int:
    """Minimal-arc distance between two ring positions."""
    d = (b.value - a.value) % RING_SIZE
    return min(d, RING_SIZE - d)


def left_distance(frm: NodeAddress, to: NodeAddress) -> int:
    """Arc length walking toward decreasing addresses from ``frm`` to ``to``."""
    return (frm.value - to.value) % RING_SIZE


def right_distance(frm: NodeAddress, to: NodeAddress) -> int:
    """Arc length walking toward increasing addresses from ``frm`` to ``to``."""
    return (to.value - frm.value) % RING_SIZE
