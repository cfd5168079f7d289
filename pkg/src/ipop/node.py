"""The overlay node state machine.

A node owns one host interface, a connection table, the mapper records it
is responsible for, and a resolution cache.  It is driven entirely from the
outside through a small driver interface:

    driver.now_us() -> int
    driver.call_later(delay_us, fn) -> handle with .cancel()
    driver.send_datagram(dest: Endpoint, data: bytes, trace: dict | None)
    driver.log(record: dict)

so the same logic runs under the deterministic simulator and the real UDP
runtime.  All state mutates inside this single serialized event stream.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field

from . import nat, overlay, resolver, transport, vnet
from .address import ZERO_ADDRESS, NodeAddress, ring_distance
from .errors import DecodeError, Oversize
from .overlay import (
    CONNECT_KIND_NEAR,
    CONNECT_KIND_SHORTCUT,
    ConnectAck,
    ConnectReq,
    ConnectionTable,
    NeighborList,
    Ping,
    Pong,
)
from .transport import (
    DEFAULT_TTL,
    PAYLOAD_CONTROL,
    PAYLOAD_DHT,
    PAYLOAD_IP,
    BrunetPacket,
    Endpoint,
)

CONNECT_ATTEMPTS = 5
CONNECT_SPACING_US = 1_000_000
CONNECT_JITTER_US = 100_000
CONNECT_ROUTED_AT = 1  # attempt index from which a routed request also goes out
CONNECT_GRACE_US = 2_000_000
PROBE_REPEATS = 3

KEEPALIVE_INTERVAL_US = 30_000_000
PONG_TIMEOUT_US = 2_000_000
PING_RETRIES = 2
STABILIZE_INTERVAL_US = 10_000_000
CLIENT_STALE_US = 90_000_000

JOIN_PROBE_DELAY_US = 300_000
POST_JOIN_SETTLE_US = 3_000_000
JOIN_RETRY_BACKOFF_US = 5_000_000
HANDOFF_DELAY_US = 500_000


@dataclass
class NodeConfig:
    k: int = overlay.K_NEAR_DEFAULT
    mode: resolver.ResolutionMode = resolver.ResolutionMode.DIRECT
    join_shortcuts: bool = True
    shortcut_threshold: int = overlay.SHORTCUT_TRAFFIC_THRESHOLD
    shortcut_window_us: int = overlay.SHORTCUT_TRAFFIC_WINDOW_US
    processing_us: int = 500
    payload_mtu: int = vnet.DEFAULT_PAYLOAD_MTU
    prefix_len: int = 16
    strict: bool = False  # raise on invariant violations instead of counting


@dataclass
class _Attempt:
    address: NodeAddress | None
    endpoint: Endpoint | None
    kind: int
    bootstrap: bool = False
    pinned: bool = False
    attempt_no: int = 0
    timer: object = None
    done: bool = False


@dataclass
class _Liveness:
    address: NodeAddress
    last_heard: int
    token: int | None = None
    sent_at: int = 0
    misses: int = 0
    timer: object = None


class Node:
    def __init__(
        self,
        vip: str,
        local_endpoint: Endpoint,
        driver,
        config: NodeConfig | None = None,
        seed: int = 0,
        extra_vips: tuple[str, ...] = (),
    ):
        self.config = config or NodeConfig()
        self.vip = vip
        self.vips = {vip, *extra_vips}
        self.address = resolver.direct_map(vip)
        self.local_endpoint = local_endpoint
        self.driver = driver
        self.rng = random.Random(seed)

        self.table = ConnectionTable(self.address, self.config.k)
        self.iface = vnet.HostInterface(
            mac=vnet.interface_mac(vip), ip=vip, prefix_len=self.config.prefix_len
        )
        self.host = vnet.VirtualHost(self.iface, vips=self.vips)
        self.mapper = resolver.MapperStore()
        self.cache = resolver.ResolutionCache()
        self.observations: list[nat.ObservedAddress] = []
        self.counters: Counter = Counter()

        self.joined = False
        self.bootstrap_endpoint: Endpoint | None = None
        self.bootstrap_address: NodeAddress | None = None
        self._attempts: dict = {}
        self._liveness: dict[NodeAddress, _Liveness] = {}
        self._pending_lookups: dict[str, dict] = {}
        self._pending_stores: dict[str, dict] = {}
        self._next_token = 1
        self._post_join_done = False
        self._stabilize_timer = None
        self._handoff_timer = None
        self._dead = False

    # -- helpers -----------------------------------------------------------

    def _now(self) -> int:
        return self.driver.now_us()

    def _log(self, ev: str, **fields):
        fields["ev"] = ev
        fields["t"] = self._now()
        fields["node"] = self.vip
        self.driver.log(fields)

    def _violation(self, name: str, detail: str = ""):
        self.counters[name] += 1
        if self.config.strict:
            raise AssertionError(f"{name}: {detail}")

    def advertised_endpoint(self) -> Endpoint:
        """The endpoint this node publishes: translated when behind a NAT."""
        if self.observations:
            latest = self.observations[-1]
            if self._now() - latest.observed_at > nat.BINDING_LIFETIME_US:
                self._rediscover()
            return latest.external
        return self.local_endpoint

    @property
    def natted(self) -> bool:
        return bool(self.observations)

    def _via_endpoint(self) -> Endpoint:
        """Reply anchor for routed connect requests: any direct edge, else self."""
        if self.bootstrap_address is not None:
            slot = self.table.get(self.bootstrap_address)
            if slot is not None and not slot.relayed:
                return slot.endpoint
        for entry in self.table.entries():
            if not entry.relayed:
                return entry.endpoint
        return self.advertised_endpoint()

    def _rediscover(self):
        for entry in self.table.entries():
            if not entry.relayed:
                self._send_ping_to(entry.address)
                return

    # -- lifecycle ---------------------------------------------------------

    def start(self, bootstrap: Endpoint | None = None):
        if bootstrap is None:
            self.joined = True
            self._log("join", ring="new")
            self._post_join()
        else:
            self.bootstrap_endpoint = bootstrap
            self._start_attempt(None, bootstrap, CONNECT_KIND_NEAR, bootstrap_peer=True)

    def stop(self):
        self._dead = True

    # -- datagram entry point ----------------------------------------------

    def handle_datagram(self, src_ep: Endpoint, data: bytes, trace: dict | None = None):
        if self._dead:
            return
        try:
            pkt = transport.decode(data)
        except DecodeError:
            self.counters["decode_errors"] += 1
            return
        live = self._liveness.get(pkt.src)
        if live is not None:
            live.last_heard = self._now()
        self.driver.call_later(
            self.config.processing_us, lambda: self._process(pkt, src_ep, trace)
        )

    def _process(self, pkt: BrunetPacket, src_ep: Endpoint, trace: dict | None):
        if self._dead:
            return
        if trace is not None:
            trace["trav"] += 1
        if pkt.payload_type == PAYLOAD_CONTROL and pkt.dst == ZERO_ADDRESS:
            self._handle_local(pkt, src_ep, trace)
            return
        decision = overlay.next_hop(self.address, pkt.dst, self.table, pkt.ttl)
        if decision.kind == "deliver":
            if trace is not None:
                trace["path"].append(self.vip)
            self._handle_local(pkt, src_ep, trace)
        elif decision.kind == "forward":
            self._forward(pkt, decision.next_hop, trace)
        else:
            self.counters["dropped_ttl"] += 1
            self._log("drop", reason=decision.reason.value, dst=pkt.dst.hex())

    def _forward(self, pkt: BrunetPacket, entry, trace: dict | None):
        if ring_distance(entry.address, pkt.dst) >= ring_distance(self.address, pkt.dst):
            self._violation("monotone_violations", f"forward to {entry.address}")
            return
        self.counters["forwarded"] += 1
        self.table.note_forward(pkt.dst, self._now())
        self._consider_traffic_shortcut(pkt.dst)
        if trace is not None:
            trace["path"].append(self.vip)
        out = transport.forward_hook(pkt)
        self._transmit(entry, transport.encode(out), trace)

    def _consider_traffic_shortcut(self, dst: NodeAddress):
        if not overlay.maybe_create_shortcut(
            self.table,
            dst,
            self._now(),
            self.config.shortcut_threshold,
            self.config.shortcut_window_us,
        ):
            return
        if dst in self._attempts:
            return
        self.counters["shortcut_requests"] += 1
        self._start_attempt(dst, None, CONNECT_KIND_SHORTCUT)

    # -- transmission ------------------------------------------------------

    def _transmit(self, entry, data: bytes, trace: dict | None):
        """Send on an edge: straight to its endpoint, or via a relay carrier."""
        if not entry.relayed:
            self.driver.send_datagram(entry.endpoint, data, trace)
            return
        carrier = self._relay_carrier(entry.address)
        if carrier is None:
            self.counters["dropped_no_route"] += 1
            self._log("drop", reason=overlay.DropReason.NO_ROUTE.value, dst=entry.address.hex())
            return
        self.driver.send_datagram(carrier.endpoint, data, trace)

    def _relay_carrier(self, target: NodeAddress):
        if self.bootstrap_address is not None and self.bootstrap_address != target:
            slot = self.table.get(self.bootstrap_address)
            if slot is not None and not slot.relayed:
                return slot
        best = None
        best_key = None
        for entry in self.table.entries():
            if entry.relayed or entry.address == target:
                continue
            key = (ring_distance(entry.address, target), entry.address.value)
            if best_key is None or key < best_key:
                best, best_key = entry, key
        return best

    def _emit_origin(self, endpoint: Endpoint, data: bytes, trace: dict | None):
        """Processing delay for a locally originated send, then hand off."""
        if trace is not None:
            trace["trav"] += 1
            trace["path"].append(self.vip)
        self.driver.call_later(
            self.config.processing_us, lambda: self.driver.send_datagram(endpoint, data, trace)
        )

    def _route_send(self, pkt: BrunetPacket, trace: dict | None = None, exact: bool = False) -> bool:
        """Greedy-route a packet we originate; returns False on local dead end.

        ``exact`` marks messages addressed to one specific node rather than a
        ring key.  When greedy routing dead-ends here (we are nearer the
        target than any edge, but hold no edge to it), such a message is
        handed to the pinned anchor instead: the anchor keeps working edges
        to the NATed nodes that hang off it, so its routing can finish the
        job.  Key-addressed traffic must not do this; root delivery is its
        contract.
        """
        decision = overlay.next_hop(self.address, pkt.dst, self.table, pkt.ttl)
        if decision.kind == "forward":
            entry = decision.next_hop
            self.table.note_forward(pkt.dst, self._now())
            self._consider_traffic_shortcut(pkt.dst)
            if entry.relayed:
                carrier = self._relay_carrier(entry.address)
                if carrier is None:
                    self.counters["dropped_no_route"] += 1
                    return False
                self._emit_origin(carrier.endpoint, transport.encode(pkt), trace)
            else:
                self._emit_origin(entry.endpoint, transport.encode(pkt), trace)
            return True
        if decision.kind == "deliver":
            if exact and pkt.dst != self.address:
                carrier = self._anchor_carrier(pkt.dst)
                if carrier is not None:
                    self._emit_origin(carrier.endpoint, transport.encode(pkt), trace)
                    return True
                self.counters["dropped_no_route"] += 1
                return False
            # We are the address-root of the destination key.
            self.driver.call_later(
                self.config.processing_us, lambda: self._handle_local(pkt, None, trace)
            )
            return True
        self.counters["dropped_ttl"] += 1
        return False

    def _anchor_carrier(self, target: NodeAddress):
        """A pinned direct edge able to carry node-addressed traffic onward."""
        for entry in self.table.entries():
            if entry.relayed or entry.address == target:
                continue
            slot = self.table.get(entry.address)
            if slot is not None and slot.pinned:
                return entry
        return None

    def _send_control(self, dst: NodeAddress, msg, endpoint: Endpoint | None = None, exact: bool = False):
        """Control send: direct to an endpoint when given, else greedy-routed."""
        pkt = BrunetPacket(
            payload_type=PAYLOAD_CONTROL,
            ttl=DEFAULT_TTL,
            hops=0,
            src=self.address,
            dst=dst,
            payload=overlay.encode_control(msg),
        )
        if endpoint is not None:
            self._emit_origin(endpoint, transport.encode(pkt), None)
        else:
            self._route_send(pkt, exact=exact)

    def _send_dht(self, dst_key: NodeAddress, msg: resolver.DhtMessage, exact: bool = False):
        pkt = BrunetPacket(
            payload_type=PAYLOAD_DHT,
            ttl=DEFAULT_TTL,
            hops=0,
            src=self.address,
            dst=dst_key,
            payload=resolver.encode_dht(msg),
        )
        self._route_send(pkt, exact=exact)

    # -- local delivery ----------------------------------------------------

    def _handle_local(self, pkt: BrunetPacket, src_ep: Endpoint | None, trace: dict | None):
        if self._dead:
            return
        if pkt.payload_type == PAYLOAD_IP:
            self._deliver_tunnel(pkt, trace)
        elif pkt.payload_type == PAYLOAD_CONTROL:
            self._handle_control(pkt, src_ep)
        elif pkt.payload_type == PAYLOAD_DHT:
            self._handle_dht(pkt)

    def _deliver_tunnel(self, pkt: BrunetPacket, trace: dict | None):
        try:
            ip_pkt = vnet.decapsulate(pkt)
        except DecodeError:
            self.counters["tunnel_decode_errors"] += 1
            return
        if ip_pkt.dst not in self.vips:
            self.counters["tunnel_foreign"] += 1
            self._log("drop", reason="foreign_ip", ip_dst=ip_pkt.dst)
            return
        record = {
            "ip_src": ip_pkt.src,
            "ip_dst": ip_pkt.dst,
            "proto": ip_pkt.protocol,
            "hops": pkt.hops,
            "len": len(ip_pkt.payload),
        }
        if ip_pkt.protocol == vnet.IPPROTO_ICMP:
            echo = vnet.parse_icmp(ip_pkt.payload)
            if echo is not None:
                record.update(icmp_kind=echo.kind, ident=echo.ident, seq=echo.seq)
        if trace is not None:
            record.update(lat_us=trace["lat"], trav=trace["trav"], path=list(trace["path"]))
        self._log("tunnel_deliver", **record)
        self.counters["tunnel_delivered"] += 1
        self._inject(ip_pkt)

    def _inject(self, ip_pkt: vnet.Ipv4Packet):
        frame = vnet.frame_for_delivery(ip_pkt, self.iface)
        if frame.src_mac != self.iface.gateway_mac or frame.dst_mac != self.iface.mac:
            self._violation("inject_frame_violations", "bad injection framing")
            return
        try:
            vnet.parse_ipv4(frame.payload)
        except DecodeError:
            self._violation("inject_checksum_violations", "inner checksum invalid")
            return
        self.iface.inject(frame)
        self.host.handle_frame(frame, self._now())
        self.iface.inbound.clear()
        self._pump_host()

    # -- host side ---------------------------------------------------------

    def ping(self, dst_vip: str, ident: int, seq: int, payload_len: int = vnet.DEFAULT_PING_PAYLOAD_LEN):
        self.host.start_echo(dst_vip, ident, seq, self._now(), payload_len)
        self._pump_host()

    def send_bulk_chunk(self, dst_vip: str, seq: int, chunk: bytes):
        payload = seq.to_bytes(8, "big") + chunk
        pkt = self.host.build_ip(dst_vip, vnet.IPPROTO_BULK, payload)
        self.host.send_ip(pkt, self._now())
        self._pump_host()

    def _pump_host(self):
        while self.iface.outbound:
            frame = self.iface.outbound.popleft()
            if frame.ethertype == vnet.ETHERTYPE_ARP:
                reply = vnet.handle_arp(frame, self.iface)
                if reply is None:
                    self.counters["arp_ignored"] += 1
                    continue
                self.counters["arp_contained"] += 1
                self.iface.inject(reply)
                self.host.handle_frame(reply, self._now())
                self.iface.inbound.clear()
            elif frame.ethertype == vnet.ETHERTYPE_IPV4:
                try:
                    ip_pkt = vnet.parse_ipv4(frame.payload)
                except DecodeError:
                    self.counters["host_bad_ip"] += 1
                    continue
                self._tunnel_ip(ip_pkt)
            elif frame.ethertype == vnet.ETHERTYPE_RARP:
                self.counters["rarp_dropped"] += 1
            else:
                self.counters["non_ip_dropped"] += 1

    def _tunnel_ip(self, ip_pkt: vnet.Ipv4Packet):
        if ip_pkt.dst in self.vips:
            self._log("tunnel_deliver", ip_src=ip_pkt.src, ip_dst=ip_pkt.dst,
                      proto=ip_pkt.protocol, hops=0, len=len(ip_pkt.payload), local=True)
            self._inject(ip_pkt)
            return
        if self.config.mode is resolver.ResolutionMode.DIRECT:
            self._encap_and_route(ip_pkt, resolver.direct_map(ip_pkt.dst))
            return
        self.resolve(
            ip_pkt.dst,
            lambda owner, err, p=ip_pkt: self._encap_and_route(p, owner) if owner else None,
        )

    def _encap_and_route(self, ip_pkt: vnet.Ipv4Packet, dst_addr: NodeAddress):
        if self._dead:
            return
        if ip_pkt.version != 4:
            # Only IP traffic may enter the overlay; ARP and friends stay local.
            self._violation("arp_overlay_violations", "non-IPv4 payload at encapsulation")
            return
        try:
            pkt = vnet.encapsulate(ip_pkt, self.address, dst_addr, self.config.payload_mtu)
        except Oversize:
            self.counters["oversize_dropped"] += 1
            self._log("drop", reason="oversize", ip_dst=ip_pkt.dst)
            return
        trace = {"lat": 0, "trav": 0, "path": []}
        self.counters["tunnel_sent"] += 1
        self._log_tunnel_send(pkt, ip_pkt)
        self._route_send(pkt, trace)

    def _log_tunnel_send(self, pkt: BrunetPacket, ip_pkt: vnet.Ipv4Packet):
        record = {"ip_src": ip_pkt.src, "ip_dst": ip_pkt.dst, "proto": ip_pkt.protocol}
        if ip_pkt.protocol == vnet.IPPROTO_ICMP:
            echo = vnet.parse_icmp(ip_pkt.payload)
            if echo is not None:
                record.update(icmp_kind=echo.kind, ident=echo.ident, seq=echo.seq)
        record["hex"] = transport.encode(pkt).hex()
        self._log("tunnel_send", **record)

    # -- resolution --------------------------------------------------------

    def resolve(self, ip: str, callback, mode: resolver.ResolutionMode | None = None):
        """Resolve a virtual IP to an overlay address; callback(owner, error)."""
        mode = mode or self.config.mode
        if mode is resolver.ResolutionMode.DIRECT:
            callback(resolver.direct_map(ip), None)
            return
        if ip in self.vips:
            callback(self.address, None)
            return
        hit = self.cache.get(ip, self._now())
        if hit is not None:
            self.counters["cache_hits"] += 1
            callback(hit[0], None)
            return
        key = resolver.direct_map(ip)
        if overlay.next_hop(self.address, key, self.table, DEFAULT_TTL).kind == "deliver":
            entry = self.mapper.lookup(ip)
            if entry is None:
                callback(None, "not_found")
            else:
                callback(entry.owner, None)
            return
        pending = self._pending_lookups.get(ip)
        if pending is not None:
            pending["callbacks"].append(callback)
            return
        pending = {"callbacks": [callback], "tries": 0, "timer": None}
        self._pending_lookups[ip] = pending
        self._send_lookup(ip, pending)

    def _send_lookup(self, ip: str, pending: dict):
        pending["tries"] += 1
        self._send_dht(
            resolver.direct_map(ip),
            resolver.DhtMessage(resolver.ST_LOOKUP, ip, self.address, 0),
        )
        pending["timer"] = self.driver.call_later(
            resolver.LOOKUP_TIMEOUT_US, lambda: self._lookup_timeout(ip)
        )

    def _lookup_timeout(self, ip: str):
        pending = self._pending_lookups.get(ip)
        if pending is None:
            return
        if pending["tries"] < resolver.LOOKUP_RETRIES:
            self._send_lookup(ip, pending)
            return
        del self._pending_lookups[ip]
        self.counters["lookup_timeouts"] += 1
        self._log("lookup_timeout", ip=ip)
        for cb in pending["callbacks"]:
            cb(None, "timeout")

    def register_vip(self, ip: str):
        """Publish (ip -> this node) at the mapper for the hashed IP."""
        key = resolver.direct_map(ip)
        if overlay.next_hop(self.address, key, self.table, DEFAULT_TTL).kind == "deliver":
            version = self.mapper.store(ip, self.address)
            self._log("registered", ip=ip, version=version, local=True)
            self._schedule_refresh(ip)
            return
        pending = self._pending_stores.get(ip)
        if pending is None:
            pending = {"tries": 0, "timer": None}
            self._pending_stores[ip] = pending
        pending["tries"] = 0
        self._send_store(ip, pending)

    def _send_store(self, ip: str, pending: dict):
        pending["tries"] += 1
        self._send_dht(
            resolver.direct_map(ip),
            resolver.DhtMessage(resolver.ST_STORE, ip, self.address, 0),
        )
        pending["timer"] = self.driver.call_later(
            resolver.STORE_TIMEOUT_US, lambda: self._store_timeout(ip)
        )

    def _store_timeout(self, ip: str):
        pending = self._pending_stores.get(ip)
        if pending is None or ip not in self.vips:
            return
        if pending["tries"] < resolver.STORE_RETRIES:
            self._send_store(ip, pending)
            return
        self.counters["store_timeouts"] += 1
        self._log("store_timeout", ip=ip)
        pending["tries"] = 0
        pending["timer"] = self.driver.call_later(
            resolver.STORE_RETRY_BACKOFF_US, lambda: self._send_store(ip, pending)
        )

    def _schedule_refresh(self, ip: str):
        def refresh():
            if ip in self.vips and not self._dead:
                self.register_vip(ip)

        self.driver.call_later(resolver.REREGISTER_INTERVAL_US, refresh)

    def add_vip(self, ip: str):
        self.vips.add(ip)
        self.host.vips.add(ip)
        if self.config.mode is resolver.ResolutionMode.BRUNET_ARP and self.joined:
            self.register_vip(ip)

    def remove_vip(self, ip: str):
        self.vips.discard(ip)
        self.host.vips.discard(ip)
        pending = self._pending_stores.pop(ip, None)
        if pending and pending["timer"]:
            pending["timer"].cancel()

    # -- DHT message handling ------------------------------------------------

    def _handle_dht(self, pkt: BrunetPacket):
        try:
            msg = resolver.decode_dht(pkt.payload)
        except DecodeError:
            self.counters["decode_errors"] += 1
            return
        if msg.subtype == resolver.ST_STORE:
            version = self.mapper.store(msg.ip, msg.owner)
            self._log("mapper_store", ip=msg.ip, owner=msg.owner.hex(), version=version)
            self._send_dht(pkt.src, resolver.DhtMessage(resolver.ST_STORE_ACK, msg.ip, msg.owner, version))
        elif msg.subtype == resolver.ST_STORE_ACK:
            pending = self._pending_stores.pop(msg.ip, None)
            if pending and pending["timer"]:
                pending["timer"].cancel()
            if msg.ip in self.vips:
                self._log("registered", ip=msg.ip, version=msg.version)
                self._schedule_refresh(msg.ip)
        elif msg.subtype == resolver.ST_LOOKUP:
            entry = self.mapper.lookup(msg.ip)
            if entry is None:
                reply = resolver.miss_reply(msg.ip)
            else:
                reply = resolver.DhtMessage(resolver.ST_LOOKUP_REPLY, msg.ip, entry.owner, entry.version)
            self._send_dht(pkt.src, reply)
        elif msg.subtype == resolver.ST_LOOKUP_REPLY:
            pending = self._pending_lookups.pop(msg.ip, None)
            if pending is None:
                return
            if pending["timer"]:
                pending["timer"].cancel()
            if resolver.is_miss(msg):
                self.counters["lookup_misses"] += 1
                for cb in pending["callbacks"]:
                    cb(None, "not_found")
            else:
                self.cache.put(msg.ip, msg.owner, msg.version, self._now())
                for cb in pending["callbacks"]:
                    cb(msg.owner, None)
        elif msg.subtype == resolver.ST_HANDOFF:
            self.mapper.absorb(msg.ip, msg.owner, msg.version)
            self._log("mapper_handoff_in", ip=msg.ip, version=msg.version)

    def _schedule_handoff_scan(self):
        if self._handoff_timer is not None or not self.joined:
            return

        def scan():
            self._handoff_timer = None
            if self._dead:
                return
            for ip in self.mapper.ips():
                key = resolver.direct_map(ip)
                if overlay.next_hop(self.address, key, self.table, DEFAULT_TTL).kind == "forward":
                    entry = self.mapper.pop(ip)
                    self._log("mapper_handoff_out", ip=ip, version=entry.version)
                    self._send_dht(
                        key,
                        resolver.DhtMessage(resolver.ST_HANDOFF, ip, entry.owner, entry.version),
                    )

        self._handoff_timer = self.driver.call_later(HANDOFF_DELAY_US, scan)

    # -- connect machinery ---------------------------------------------------

    def _attempt_key(self, address, endpoint):
        return address if address is not None else ("ep", endpoint)

    def _start_attempt(
        self,
        address: NodeAddress | None,
        endpoint: Endpoint | None,
        kind: int,
        bootstrap_peer: bool = False,
        pinned: bool = False,
    ):
        if address is not None:
            if address == self.address or address in self.table:
                return
        key = self._attempt_key(address, endpoint)
        if key in self._attempts:
            return
        attempt = _Attempt(
            address=address,
            endpoint=endpoint,
            kind=kind,
            bootstrap=bootstrap_peer,
            pinned=pinned or bootstrap_peer,
        )
        self._attempts[key] = attempt
        self._attempt_fire(key, attempt)

    def _attempt_fire(self, key, attempt: _Attempt):
        if attempt.done or self._dead:
            return
        if attempt.attempt_no >= CONNECT_ATTEMPTS:
            attempt.timer = self.driver.call_later(
                CONNECT_GRACE_US, lambda: self._attempt_conclude(key, attempt)
            )
            return
        req = ConnectReq(
            kind=attempt.kind, endpoint=self.advertised_endpoint(), via=self._via_endpoint()
        )
        if attempt.endpoint is not None:
            dst = attempt.address if attempt.address is not None else ZERO_ADDRESS
            self._send_control(dst, req, endpoint=attempt.endpoint)
        if (
            attempt.address is not None
            and attempt.attempt_no >= CONNECT_ROUTED_AT
            and len(self.table) > 0
        ) or (attempt.endpoint is None and attempt.address is not None):
            self._send_control(attempt.address, req)
        attempt.attempt_no += 1
        delay = CONNECT_SPACING_US + self.rng.randint(-CONNECT_JITTER_US, CONNECT_JITTER_US)
        attempt.timer = self.driver.call_later(delay, lambda: self._attempt_fire(key, attempt))

    def _attempt_conclude(self, key, attempt: _Attempt):
        if attempt.done or self._dead:
            return
        attempt.done = True
        self._attempts.pop(key, None)
        if attempt.bootstrap:
            self.counters["join_timeouts"] += 1
            self._log("join_timeout")
            self.driver.call_later(
                JOIN_RETRY_BACKOFF_US,
                lambda: self._start_attempt(None, attempt.endpoint, CONNECT_KIND_NEAR, bootstrap_peer=True),
            )
            return
        if attempt.kind == CONNECT_KIND_SHORTCUT or attempt.address is None or attempt.endpoint is None:
            self.counters["connects_abandoned"] += 1
            return
        # Direct path never opened: keep the ring edge, relay its traffic.
        self.table.add(attempt.address, attempt.endpoint, relayed=True, pinned=attempt.pinned)
        self.counters["links_relayed"] += 1
        self._log("link", peer=attempt.address.hex(), state="relayed")
        self._start_keepalive(attempt.address)
        self._after_table_change()

    def _attempt_succeeded(self, address: NodeAddress, endpoint: Endpoint, kind: int, bootstrap_peer: bool):
        for key in (address, self._attempt_key(None, endpoint)):
            attempt = self._attempts.pop(key, None)
            if attempt is not None:
                attempt.done = True
                if attempt.timer:
                    attempt.timer.cancel()
                bootstrap_peer = bootstrap_peer or attempt.bootstrap
                if attempt.kind == CONNECT_KIND_SHORTCUT:
                    kind = CONNECT_KIND_SHORTCUT
        self.table.add(
            address,
            endpoint,
            relayed=False,
            shortcut=(kind == CONNECT_KIND_SHORTCUT),
            pinned=bootstrap_peer,
        )
        self.counters["links_connected"] += 1
        self._log("link", peer=address.hex(), state="connected")
        self._start_keepalive(address)
        if bootstrap_peer and not self.joined:
            self.bootstrap_address = address
            self.joined = True
            self._log("join", ring="via_bootstrap", bootstrap=address.hex())
            self._send_ping_to(address)
            self.driver.call_later(JOIN_PROBE_DELAY_US, self._join_probe)
            self.driver.call_later(POST_JOIN_SETTLE_US, self._post_join)
        self._after_table_change()

    def _join_probe(self):
        if self._dead:
            return
        self._send_probe(self.address, CONNECT_KIND_NEAR)

    def _send_probe(self, key: NodeAddress, kind: int, repeats: int = PROBE_REPEATS):
        """Fire-and-forget routed connect requests toward a ring key."""
        req = ConnectReq(kind=kind, endpoint=self.advertised_endpoint(), via=self._via_endpoint())

        def fire(remaining):
            if self._dead or key in self.table:
                return
            self._send_control(key, req)
            if remaining > 1:
                self.driver.call_later(CONNECT_SPACING_US, lambda: fire(remaining - 1))

        fire(repeats)

    def _post_join(self):
        if self._post_join_done or self._dead:
            return
        self._post_join_done = True
        if self.config.mode is resolver.ResolutionMode.BRUNET_ARP:
            for ip in sorted(self.vips):
                self.register_vip(ip)
        if self.config.join_shortcuts and len(self.table) > 0:
            n_est = overlay.estimate_population(self.table)
            for key in overlay.sample_shortcut_keys(self.address, n_est, self.rng):
                self._send_probe(key, CONNECT_KIND_SHORTCUT, repeats=2)
        if self._stabilize_timer is None:
            self._stabilize_timer = self.driver.call_later(
                STABILIZE_INTERVAL_US, self._stabilize
            )

    # -- control message handling ---------------------------------------------

    def _neighbor_snapshot(self) -> tuple:
        seen = {}
        for entry in self.table.near_left + self.table.near_right:
            seen.setdefault(entry.address, entry.endpoint)
        return tuple(seen.items())

    def _handle_control(self, pkt: BrunetPacket, src_ep: Endpoint | None):
        if pkt.src == self.address:
            self.counters["self_control_ignored"] += 1
            return
        try:
            msg = overlay.decode_control(pkt.payload)
        except DecodeError:
            self.counters["decode_errors"] += 1
            return
        direct = pkt.hops == 0 and src_ep is not None
        if isinstance(msg, ConnectReq):
            self._on_connect_req(pkt.src, msg, src_ep, direct)
        elif isinstance(msg, ConnectAck):
            self._on_connect_ack(pkt.src, msg, src_ep, direct)
        elif isinstance(msg, Ping):
            self._on_ping(pkt.src, msg, src_ep, direct)
        elif isinstance(msg, Pong):
            self._on_pong(pkt.src, msg, direct)
        elif isinstance(msg, NeighborList):
            self._merge_candidates(msg.neighbors)

    def _on_connect_req(self, peer: NodeAddress, req: ConnectReq, src_ep, direct: bool):
        wants = req.kind == CONNECT_KIND_SHORTCUT or self.table.wanted_near(peer)
        ack = ConnectAck(
            kind=req.kind,
            endpoint=self.advertised_endpoint(),
            neighbors=self._neighbor_snapshot(),
        )
        if direct:
            if wants or peer in self.table:
                slot = self.table.get(peer)
                pinned = slot.pinned if slot else False
                shortcut = (slot.shortcut if slot else False) or req.kind == CONNECT_KIND_SHORTCUT
                self.table.add(peer, src_ep, relayed=False, shortcut=shortcut, pinned=pinned)
                self._start_keepalive(peer)
                if peer in self._attempts or self._attempt_key(None, src_ep) in self._attempts:
                    self._attempt_succeeded(peer, src_ep, req.kind, bootstrap_peer=False)
                else:
                    self._after_table_change()
            self._send_control(peer, ack, endpoint=src_ep)
        else:
            # Routed request: answer through the requester's anchor and start
            # punching toward its advertised endpoint so both NATs open.
            pkt = BrunetPacket(
                payload_type=PAYLOAD_CONTROL,
                ttl=DEFAULT_TTL,
                hops=0,
                src=self.address,
                dst=peer,
                payload=overlay.encode_control(ack),
            )
            self._emit_origin(req.via, transport.encode(pkt), None)
            if wants and peer not in self.table:
                self._start_attempt(peer, req.endpoint, req.kind)

    def _on_connect_ack(self, peer: NodeAddress, ack: ConnectAck, src_ep, direct: bool):
        if direct:
            if peer in self._attempts or self._attempt_key(None, src_ep) in self._attempts:
                self._attempt_succeeded(
                    peer, src_ep, ack.kind, bootstrap_peer=self._is_bootstrap_ep(src_ep)
                )
            elif peer in self.table:
                self.table.add(peer, src_ep, relayed=False)
        else:
            attempt = self._attempts.get(peer)
            if attempt is not None and attempt.endpoint is None:
                attempt.endpoint = ack.endpoint
            elif attempt is None and peer not in self.table:
                if ack.kind == CONNECT_KIND_SHORTCUT or self.table.wanted_near(peer):
                    self._start_attempt(peer, ack.endpoint, ack.kind)
        self._merge_candidates(ack.neighbors)

    def _is_bootstrap_ep(self, ep: Endpoint) -> bool:
        return self.bootstrap_endpoint is not None and ep == self.bootstrap_endpoint

    def _on_ping(self, peer: NodeAddress, ping: Ping, src_ep, direct: bool):
        if direct:
            if peer not in self.table:
                self.table.add(peer, src_ep, client=True)
                self._after_table_change()
            pong = Pong(token=ping.token, observed=src_ep)
            self._send_control(peer, pong, endpoint=src_ep)
        else:
            pong = Pong(token=ping.token, observed=self.advertised_endpoint())
            self._send_control(peer, pong)

    def _on_pong(self, peer: NodeAddress, pong: Pong, direct: bool):
        live = self._liveness.get(peer)
        if live is not None and live.token == pong.token:
            live.token = None
            live.misses = 0
            live.last_heard = self._now()
        if direct:
            obs = nat.discover_translation(self.local_endpoint, pong.observed, peer, self._now())
            if obs is not None:
                if not self.observations or self.observations[-1].external != obs.external:
                    self._log("nat_observed", external=str(obs.external), by=peer.hex())
                self.observations.append(obs)
                if len(self.observations) > 16:
                    del self.observations[:-16]
            elif self.bootstrap_address == peer:
                slot = self.table.get(peer)
                if slot is not None and not self.observations:
                    slot.pinned = False  # public node: no need to anchor on bootstrap

    def _merge_candidates(self, neighbors):
        for addr, endpoint in neighbors:
            if addr == self.address or addr in self.table or addr in self._attempts:
                continue
            if self.table.wanted_near(addr):
                self._start_attempt(addr, endpoint, CONNECT_KIND_NEAR)

    # -- liveness / keepalive ---------------------------------------------------

    def _start_keepalive(self, address: NodeAddress):
        if address in self._liveness:
            return
        live = _Liveness(address=address, last_heard=self._now())
        self._liveness[address] = live
        first = self.rng.randint(0, KEEPALIVE_INTERVAL_US)
        live.timer = self.driver.call_later(first, lambda: self._keepalive_fire(address))

    def _keepalive_fire(self, address: NodeAddress):
        live = self._liveness.get(address)
        if live is None or self._dead or address not in self.table:
            return
        self._send_ping_to(address)

    def _send_ping_to(self, address: NodeAddress):
        live = self._liveness.get(address)
        if live is None:
            return
        token = self._next_token
        self._next_token += 1
        live.token = token
        live.sent_at = self._now()
        slot = self.table.get(address)
        if slot is None:
            return
        if slot.relayed:
            self._send_control(address, Ping(token=token))
        else:
            self._send_control(address, Ping(token=token), endpoint=slot.endpoint)
        live.timer = self.driver.call_later(PONG_TIMEOUT_US, lambda: self._pong_check(address, token))

    def _pong_check(self, address: NodeAddress, token: int):
        live = self._liveness.get(address)
        if live is None or self._dead or address not in self.table:
            return
        if live.token != token or live.last_heard >= live.sent_at:
            live.timer = self.driver.call_later(
                KEEPALIVE_INTERVAL_US, lambda: self._keepalive_fire(address)
            )
            return
        live.misses += 1
        if live.misses > PING_RETRIES:
            self._peer_failed(address)
        else:
            self._send_ping_to(address)

    def _peer_failed(self, address: NodeAddress):
        live = self._liveness.pop(address, None)
        if live is not None and live.timer:
            live.timer.cancel()
        plan = self.table.remove(address)
        if plan is None:
            return
        self.counters["peers_failed"] += 1
        self._log("peer_failed", peer=address.hex())
        if plan.deficient_left or plan.deficient_right:
            for key in plan.probe_keys:
                self._send_probe(key, CONNECT_KIND_NEAR)
        self._after_table_change()

    def repair(self, failed: NodeAddress):
        """Explicit repair entry point (same path as keepalive detection)."""
        if failed in self.table:
            self._peer_failed(failed)

    # -- periodic stabilization ---------------------------------------------------

    def _stabilize(self):
        if self._dead:
            return
        snapshot = self._neighbor_snapshot()
        msg = NeighborList(neighbors=snapshot)
        for entry in self.table.near_left + self.table.near_right:
            if not entry.relayed:
                self._send_control(entry.address, msg, endpoint=entry.endpoint)
            else:
                self._send_control(entry.address, msg)
        now = self._now()
        for address in self.table.prunable():
            self._drop_peer(address)
        for address in list(self._liveness):
            slot = self.table.get(address)
            if slot is not None and slot.client and now - self._liveness[address].last_heard > CLIENT_STALE_US:
                self._drop_peer(address)
        self._stabilize_timer = self.driver.call_later(STABILIZE_INTERVAL_US, self._stabilize)

    def _drop_peer(self, address: NodeAddress):
        live = self._liveness.pop(address, None)
        if live is not None and live.timer:
            live.timer.cancel()
        self.table.remove(address)

    def _after_table_change(self):
        self._schedule_handoff_scan()
