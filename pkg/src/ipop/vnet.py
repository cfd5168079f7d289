"""The virtual IP layer: frame and packet codecs, local ARP containment,
and encapsulation between IP packets and overlay envelopes.

Hosts on the virtual network believe a phantom gateway forwards all subnet
traffic.  Queries for *any* virtual IP are answered locally with the gateway
MAC, so ARP never leaves the host; only IPv4 traffic enters the overlay.
Received tunnel packets are injected back as frames sourced from the gateway
MAC and addressed to the host interface MAC.
"""

from __future__ import annotations

import ipaddress
import socket
import struct
from collections import deque
from dataclasses import dataclass, field

from .address import NodeAddress
from .errors import (
    BadChecksum,
    BadLength,
    BadVersion,
    OddLength,
    Oversize,
    Truncated,
    WrongType,
)
from .transport import DEFAULT_TTL, PAYLOAD_IP, BrunetPacket

ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_ARP = 0x0806
ETHERTYPE_RARP = 0x8035
ETHER_HEADER_LEN = 14
BROADCAST_MAC = b"\xff" * 6

# The phantom gateway: a router identity that exists only inside each host.
GATEWAY_MAC = b"\xca\xfe\x00\x00\x00\x01"

DEFAULT_SUBNET = "10.128.0.0/16"
DEFAULT_PAYLOAD_MTU = 1400
IPV4_MIN_HEADER = 20
IP_DEFAULT_TTL = 64

IPPROTO_ICMP = 1
IPPROTO_BULK = 0xFD  # raw stream chunks used by the bulk-transfer workload

ICMP_ECHO_REPLY = 0
ICMP_ECHO_REQUEST = 8


def mac_str(mac: bytes) -> str:
    return ":".join(f"{b:02x}" for b in mac)


def interface_mac(vip: str) -> bytes:
    """Deterministic locally-administered MAC for a host interface.

    MACs only need to be unique within one host (they must differ from the
    gateway MAC); embedding the virtual IP keeps them readable in traces.
    """
    return b"\x02\x50" + socket.inet_aton(vip)


def gateway_ip(subnet: str = DEFAULT_SUBNET) -> str:
    net = ipaddress.ip_network(subnet)
    return str(net.network_address + 1)


# ---------------------------------------------------------------------------
# Ethernet


@dataclass(frozen=True)
class EthernetFrame:
    dst_mac: bytes
    src_mac: bytes
    ethertype: int
    payload: bytes


def parse_ethernet(data: bytes) -> EthernetFrame:
    if len(data) < ETHER_HEADER_LEN:
        raise Truncated(f"frame needs {ETHER_HEADER_LEN} bytes, got {len(data)}")
    return EthernetFrame(
        dst_mac=data[0:6],
        src_mac=data[6:12],
        ethertype=int.from_bytes(data[12:14], "big"),
        payload=data[14:],
    )


def serialize_ethernet(frame: EthernetFrame) -> bytes:
    if len(frame.dst_mac) != 6 or len(frame.src_mac) != 6:
        raise ValueError("MAC addresses must be 6 bytes")
    return frame.dst_mac + frame.src_mac + frame.ethertype.to_bytes(2, "big") + frame.payload


# ---------------------------------------------------------------------------
# IPv4


def _ones_complement_sum(data: bytes) -> int:
    """RFC-style one's-complement sum over 16-bit words, zero-padding odd input."""
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for i in range(0, len(data), 2):
        total += (data[i] << 8) | data[i + 1]
        total = (total & 0xFFFF) + (total >> 16)
    return total


def ipv4_checksum(header: bytes) -> int:
    """Header checksum: complement of the one's-complement word sum.

    The checksum field must already be zeroed in the input.  Raises
    OddLength for inputs that are not an even number of bytes.
    """
    if len(header) % 2:
        raise OddLength(f"checksum input must be even, got {len(header)} bytes")
    return (~_ones_complement_sum(header)) & 0xFFFF


@dataclass(frozen=True)
class Ipv4Packet:
    src: str
    dst: str
    payload: bytes
    protocol: int
    identification: int = 0
    ttl: int = IP_DEFAULT_TTL
    tos: int = 0
    flags: int = 0
    frag_offset: int = 0
    options: bytes = b""
    version: int = 4

    @property
    def ihl(self) -> int:
        return 5 + len(self.options) // 4

    @property
    def total_length(self) -> int:
        return self.ihl * 4 + len(self.payload)


_IP_FIXED = struct.Struct("!BBHHHBBH4s4s")


def serialize_ipv4(pkt: Ipv4Packet) -> bytes:
    """Emit the packet with a freshly computed header checksum."""
    if pkt.version != 4:
        raise BadVersion(f"cannot serialize IP version {pkt.version}")
    if len(pkt.options) % 4:
        raise BadLength("options must pad to a multiple of 4 bytes")
    if pkt.total_length > 0xFFFF:
        raise BadLength(f"total length {pkt.total_length} exceeds 65535")
    header = _IP_FIXED.pack(
        (4 << 4) | pkt.ihl,
        pkt.tos,
        pkt.total_length,
        pkt.identification,
        (pkt.flags << 13) | pkt.frag_offset,
        pkt.ttl,
        pkt.protocol,
        0,
        socket.inet_aton(pkt.src),
        socket.inet_aton(pkt.dst),
    ) + pkt.options
    checksum = ipv4_checksum(header)
    return header[:10] + checksum.to_bytes(2, "big") + header[12:] + pkt.payload


def parse_ipv4(data: bytes) -> Ipv4Packet:
    if len(data) < IPV4_MIN_HEADER:
        raise BadLength(f"packet needs {IPV4_MIN_HEADER} bytes, got {len(data)}")
    version = data[0] >> 4
    if version != 4:
        raise BadVersion(f"IP version {version}")
    ihl = data[0] & 0x0F
    if ihl < 5:
        raise BadLength(f"ihl {ihl} below minimum 5")
    header_len = ihl * 4
    if len(data) < header_len:
        raise BadLength(f"header claims {header_len} bytes, packet has {len(data)}")
    (
        _vihl,
        tos,
        total_length,
        identification,
        flags_frag,
        ttl,
        protocol,
        stored_checksum,
        src,
        dst,
    ) = _IP_FIXED.unpack_from(data)
    if total_length != len(data):
        raise BadLength(f"total length field {total_length} != packet size {len(data)}")
    header = data[:10] + b"\x00\x00" + data[12:header_len]
    if ipv4_checksum(header) != stored_checksum:
        raise BadChecksum(
            f"stored {stored_checksum:#06x} != computed {ipv4_checksum(header):#06x}"
        )
    return Ipv4Packet(
        src=socket.inet_ntoa(src),
        dst=socket.inet_ntoa(dst),
        payload=data[header_len:],
        protocol=protocol,
        identification=identification,
        ttl=ttl,
        tos=tos,
        flags=flags_frag >> 13,
        frag_offset=flags_frag & 0x1FFF,
        options=data[IPV4_MIN_HEADER:header_len],
    )


# ---------------------------------------------------------------------------
# ARP (IPv4 over Ethernet only)


@dataclass(frozen=True)
class ArpMessage:
    oper: int  # 1 request, 2 reply
    sender_mac: bytes
    sender_ip: str
    target_mac: bytes
    target_ip: str


_ARP = struct.Struct("!HHBBH6s4s6s4s")
ARP_REQUEST = 1
ARP_REPLY = 2


def serialize_arp(msg: ArpMessage) -> bytes:
    return _ARP.pack(
        1,
        ETHERTYPE_IPV4,
        6,
        4,
        msg.oper,
        msg.sender_mac,
        socket.inet_aton(msg.sender_ip),
        msg.target_mac,
        socket.inet_aton(msg.target_ip),
    )


def parse_arp(data: bytes) -> ArpMessage | None:
    """Parse an Ethernet/IPv4 ARP body; anything else returns None."""
    if len(data) < _ARP.size:
        return None
    htype, ptype, hlen, plen, oper, sha, spa, tha, tpa = _ARP.unpack_from(data)
    if htype != 1 or ptype != ETHERTYPE_IPV4 or hlen != 6 or plen != 4:
        return None
    return ArpMessage(
        oper=oper,
        sender_mac=sha,
        sender_ip=socket.inet_ntoa(spa),
        target_mac=tha,
        target_ip=socket.inet_ntoa(tpa),
    )


# ---------------------------------------------------------------------------
# ICMP echo (just enough for round-trip bookkeeping)


@dataclass(frozen=True)
class IcmpEcho:
    kind: int  # ICMP_ECHO_REQUEST or ICMP_ECHO_REPLY
    ident: int
    seq: int
    payload: bytes


def serialize_icmp(echo: IcmpEcho) -> bytes:
    body = struct.pack("!BBHHH", echo.kind, 0, 0, echo.ident, echo.seq) + echo.payload
    checksum = (~_ones_complement_sum(body)) & 0xFFFF
    return body[:2] + checksum.to_bytes(2, "big") + body[4:]


def parse_icmp(data: bytes) -> IcmpEcho | None:
    if len(data) < 8:
        return None
    kind, _code, stored, ident, seq = struct.unpack_from("!BBHHH", data)
    if kind not in (ICMP_ECHO_REQUEST, ICMP_ECHO_REPLY):
        return None
    zeroed = data[:2] + b"\x00\x00" + data[4:]
    if ((~_ones_complement_sum(zeroed)) & 0xFFFF) != stored:
        return None
    return IcmpEcho(kind=kind, ident=ident, seq=seq, payload=data[8:])


def echo_ident(src_vip: str, dst_vip: str) -> int:
    """Stable echo identifier for a (source, destination) pair."""
    import hashlib

    digest = hashlib.sha1(f"{src_vip}>{dst_vip}".encode()).digest()
    return int.from_bytes(digest[:2], "big")


# ---------------------------------------------------------------------------
# Encapsulation between IP packets and overlay envelopes


def encapsulate(
    pkt: Ipv4Packet,
    src: NodeAddress,
    dst: NodeAddress,
    mtu: int = DEFAULT_PAYLOAD_MTU,
) -> BrunetPacket:
    raw = serialize_ipv4(pkt)
    if len(raw) > mtu:
        raise Oversize(f"IP packet of {len(raw)} bytes exceeds payload mtu {mtu}")
    return BrunetPacket(
        payload_type=PAYLOAD_IP,
        ttl=DEFAULT_TTL,
        hops=0,
        src=src,
        dst=dst,
        payload=raw,
    )


def decapsulate(pkt: BrunetPacket) -> Ipv4Packet:
    if pkt.payload_type != PAYLOAD_IP:
        raise WrongType(f"expected tunnel payload, got type {pkt.payload_type:#04x}")
    return parse_ipv4(pkt.payload)


# ---------------------------------------------------------------------------
# Host interface (the simulated stand-in for a kernel tap device)


@dataclass
class HostInterface:
    """Frame queues between one host's stack and its overlay node.

    ``inbound`` holds frames injected toward the host; ``outbound`` holds
    frames the host has written for the node to capture.  Each direction is
    single-producer/single-consumer.
    """

    mac: bytes
    ip: str
    prefix_len: int = 16
    gateway_mac: bytes = GATEWAY_MAC
    inbound: deque = field(default_factory=deque)
    outbound: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.mac == self.gateway_mac:
            raise ValueError("interface MAC must differ from the gateway MAC")

    @property
    def subnet(self):
        return ipaddress.ip_network(f"{self.ip}/{self.prefix_len}", strict=False)

    @property
    def gateway_ip(self) -> str:
        return str(self.subnet.network_address + 1)

    def contains(self, ip: str) -> bool:
        return ipaddress.ip_address(ip) in self.subnet

    def inject(self, frame: EthernetFrame) -> None:
        """Deliver a frame toward the host; callers enforce gateway framing."""
        self.inbound.append(frame)

    def write(self, frame: EthernetFrame) -> None:
        """Host side: emit a frame for the node to capture."""
        self.outbound.append(frame)


def handle_arp(frame: EthernetFrame, host: HostInterface) -> EthernetFrame | None:
    """Answer a host's ARP query locally; never returns overlay traffic.

    Every request for an address inside the virtual subnet, including the
    phantom gateway itself, resolves to the gateway MAC.  Announcements
    (gratuitous ARP), replies, queries for the host's own address and
    queries outside the subnet are ignored.
    """
    if frame.ethertype != ETHERTYPE_ARP:
        return None
    msg = parse_arp(frame.payload)
    if msg is None or msg.oper != ARP_REQUEST:
        return None
    if msg.sender_ip == msg.target_ip:
        return None  # gratuitous announcement
    if msg.target_ip == host.ip or not host.contains(msg.target_ip):
        return None
    reply = ArpMessage(
        oper=ARP_REPLY,
        sender_mac=host.gateway_mac,
        sender_ip=msg.target_ip,
        target_mac=host.mac,
        target_ip=host.ip,
    )
    return EthernetFrame(
        dst_mac=host.mac,
        src_mac=host.gateway_mac,
        ethertype=ETHERTYPE_ARP,
        payload=serialize_arp(reply),
    )


def frame_for_delivery(pkt: Ipv4Packet, host: HostInterface) -> EthernetFrame:
    """Build the injection frame for a tunnel packet arriving at this host."""
    return EthernetFrame(
        dst_mac=host.mac,
        src_mac=host.gateway_mac,
        ethertype=ETHERTYPE_IPV4,
        payload=serialize_ipv4(pkt),
    )


# ---------------------------------------------------------------------------
# Minimal host stack: ARP cache, echo responder, ping bookkeeping


DEFAULT_PING_PAYLOAD_LEN = 56
PING_TIMEOUT_US = 5_000_000


class VirtualHost:
    """The application side of a host interface.

    Speaks just enough of the stack for the workloads: resolves the gateway
    via ARP before sending, answers echo requests addressed to any of its
    virtual IPs, and records round-trip samples for requests it originated.
    """

    def __init__(self, iface: HostInterface, vips: set[str] | None = None):
        self.iface = iface
        self.vips = vips if vips is not None else {iface.ip}
        self.gateway_mac: bytes | None = None
        self._awaiting_arp: list[Ipv4Packet] = []
        self._ip_ident = 0
        self.pending_echo: dict[tuple[int, int], int] = {}
        self.rtt_samples: list[dict] = []
        self.timeouts = 0
        self.on_rtt = None  # optional callback(ident, seq, rtt_us)

    def _next_ident(self) -> int:
        ident = self._ip_ident
        self._ip_ident = (self._ip_ident + 1) & 0xFFFF
        return ident

    def build_ip(self, dst_vip: str, protocol: int, payload: bytes, src_vip: str | None = None) -> Ipv4Packet:
        return Ipv4Packet(
            src=src_vip or self.iface.ip,
            dst=dst_vip,
            payload=payload,
            protocol=protocol,
            identification=self._next_ident(),
        )

    def send_ip(self, pkt: Ipv4Packet, now_us: int) -> None:
        """Queue an IP packet for the virtual interface, ARPing first if needed."""
        if self.gateway_mac is None:
            self._awaiting_arp.append(pkt)
            request = ArpMessage(
                oper=ARP_REQUEST,
                sender_mac=self.iface.mac,
                sender_ip=self.iface.ip,
                target_mac=b"\x00" * 6,
                target_ip=self.iface.gateway_ip,
            )
            self.iface.write(
                EthernetFrame(
                    dst_mac=BROADCAST_MAC,
                    src_mac=self.iface.mac,
                    ethertype=ETHERTYPE_ARP,
                    payload=serialize_arp(request),
                )
            )
            return
        self.iface.write(
            EthernetFrame(
                dst_mac=self.gateway_mac,
                src_mac=self.iface.mac,
                ethertype=ETHERTYPE_IPV4,
                payload=serialize_ipv4(pkt),
            )
        )

    def start_echo(
        self,
        dst_vip: str,
        ident: int,
        seq: int,
        now_us: int,
        payload_len: int = DEFAULT_PING_PAYLOAD_LEN,
        src_vip: str | None = None,
    ) -> None:
        """Originate one echo request; loops back instantly for local addresses."""
        if dst_vip in self.vips:
            self.rtt_samples.append({"ident": ident, "seq": seq, "rtt_us": 0, "t": now_us})
            if self.on_rtt:
                self.on_rtt(ident, seq, 0)
            return
        payload = bytes((i + seq) & 0xFF for i in range(payload_len))
        echo = IcmpEcho(kind=ICMP_ECHO_REQUEST, ident=ident, seq=seq, payload=payload)
        pkt = self.build_ip(dst_vip, IPPROTO_ICMP, serialize_icmp(echo), src_vip=src_vip)
        self.pending_echo[(ident, seq)] = now_us
        self.send_ip(pkt, now_us)

    def handle_frame(self, frame: EthernetFrame, now_us: int) -> None:
        """Process one frame delivered to the host; replies go out via the iface."""
        if frame.ethertype == ETHERTYPE_ARP:
            msg = parse_arp(frame.payload)
            if msg and msg.oper == ARP_REPLY:
                self.gateway_mac = msg.sender_mac
                backlog, self._awaiting_arp = self._awaiting_arp, []
                for pkt in backlog:
                    self.send_ip(pkt, now_us)
            return
        if frame.ethertype != ETHERTYPE_IPV4:
            return
        pkt = parse_ipv4(frame.payload)
        if pkt.dst not in self.vips or pkt.protocol != IPPROTO_ICMP:
            return
        echo = parse_icmp(pkt.payload)
        if echo is None:
            return
        if echo.kind == ICMP_ECHO_REQUEST:
            reply = IcmpEcho(ICMP_ECHO_REPLY, echo.ident, echo.seq, echo.payload)
            self.send_ip(
                self.build_ip(pkt.src, IPPROTO_ICMP, serialize_icmp(reply), src_vip=pkt.dst),
                now_us,
            )
        elif echo.kind == ICMP_ECHO_REPLY:
            sent_at = self.pending_echo.pop((echo.ident, echo.seq), None)
            if sent_at is not None:
                rtt = now_us - sent_at
                self.rtt_samples.append(
                    {"ident": echo.ident, "seq": echo.seq, "rtt_us": rtt, "t": now_us}
                )
                if self.on_rtt:
                    self.on_rtt(echo.ident, echo.seq, rtt)

    def expire_pending(self, now_us: int, timeout_us: int = PING_TIMEOUT_US) -> int:
        """Drop echo requests older than the timeout; returns how many expired."""
        expired = [k for k, t in self.pending_echo.items() if now_us - t > timeout_us]
        for key in expired:
            del self.pending_echo[key]
        self.timeouts += len(expired)
        return len(expired)
