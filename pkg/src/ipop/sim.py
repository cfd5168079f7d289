"""Deterministic discrete-event harness.

Builds a scenario topology (nodes, NAT boxes, links), drives joins and
workloads (pings, bulk transfer, churn, migration, resolution probes), and
collects a metrics log.  Simulated time is integer microseconds; ties in
the event queue break by insertion order, and every random draw comes from
generators derived from the scenario seed, so a scenario run twice yields a
byte-identical log.
"""

from __future__ import annotations

import hashlib
import heapq
import ipaddress
import json
import math
import random
import statistics
from dataclasses import dataclass, field, replace

from . import overlay, vnet
from .address import NodeAddress
from .errors import ConfigError
from .nat import NatDevice, NatType
from .node import Node, NodeConfig
from .resolver import ResolutionMode, direct_map
from .transport import ChannelProfile, Endpoint

NAT_NAMES = {
    "none": None,
    "full_cone": NatType.FULL_CONE,
    "restricted_cone": NatType.RESTRICTED_CONE,
    "port_restricted": NatType.PORT_RESTRICTED,
    "symmetric": NatType.SYMMETRIC,
}

NODE_PORT = 20_000
JOIN_SPACING_US = 200_000
WORKLOAD_SETTLE_US = 15_000_000
PING_TIMEOUT_US = vnet.PING_TIMEOUT_US
REPORT_WAIT_US = 8_000_000

SUMMARY_EVENTS = {
    "join",
    "join_timeout",
    "link",
    "rtt",
    "ping_timeout",
    "registered",
    "nat_observed",
    "peer_failed",
    "churn",
    "churn_report",
    "migrate",
    "probe_report",
    "bulk_report",
    "topology",
    "node_counters",
    "summary",
}


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# Scenario


@dataclass
class NodeSpec:
    vip: str
    nat: str = "none"
    bootstrap: bool = False
    extra_vips: tuple = ()
    join_at_us: int | None = None


@dataclass
class Scenario:
    nodes: list
    seed: int = 1
    mode: ResolutionMode = ResolutionMode.DIRECT
    subnet: str = vnet.DEFAULT_SUBNET
    duration_us: int | None = None
    k: int = overlay.K_NEAR_DEFAULT
    join_shortcuts: bool = True
    processing_us: int = 500
    join_spacing_us: int = JOIN_SPACING_US
    log_level: str = "summary"
    trace_packets: bool = False
    default_link: ChannelProfile = field(default_factory=ChannelProfile)
    link_overrides: dict = field(default_factory=dict)  # frozenset({vip,vip}) -> profile
    workloads: list = field(default_factory=list)

    def validate(self):
        if not self.nodes:
            raise ConfigError("nodes", "at least one node is required")
        try:
            net = ipaddress.ip_network(self.subnet)
        except ValueError as exc:
            raise ConfigError("subnet", str(exc)) from None
        gateway = str(net.network_address + 1)
        seen = set()
        bootstrap_ok = False
        for i, spec in enumerate(self.nodes):
            fieldname = f"nodes[{i}].vip"
            for vip in (spec.vip, *spec.extra_vips):
                try:
                    addr = ipaddress.ip_address(vip)
                except ValueError as exc:
                    raise ConfigError(fieldname, str(exc)) from None
                if addr not in net:
                    raise ConfigError(fieldname, f"{vip} outside subnet {self.subnet}")
                if vip == gateway:
                    raise ConfigError(fieldname, f"{vip} collides with the gateway address")
                if vip in seen:
                    raise ConfigError(fieldname, f"duplicate virtual IP {vip}")
                seen.add(vip)
            if spec.nat not in NAT_NAMES:
                raise ConfigError(f"nodes[{i}].nat", f"unknown nat type {spec.nat!r}")
            if spec.bootstrap and spec.nat == "none":
                bootstrap_ok = True
            if spec.extra_vips and self.mode is not ResolutionMode.BRUNET_ARP:
                raise ConfigError(
                    f"nodes[{i}].extra_vips", "extra virtual IPs require brunet-arp mode"
                )
        if not bootstrap_ok:
            raise ConfigError("nodes", "need at least one bootstrap node with nat none")
        try:
            self.default_link.validate()
        except ValueError as exc:
            raise ConfigError("default_link", str(exc)) from None
        for pair, profile in self.link_overrides.items():
            try:
                profile.validate()
            except ValueError as exc:
                raise ConfigError("links", f"{sorted(pair)}: {exc}") from None
        if self.log_level not in ("summary", "full"):
            raise ConfigError("log", f"unknown log level {self.log_level!r}")
        vips = {s.vip for s in self.nodes}
        for j, w in enumerate(self.workloads):
            kind = w.get("kind")
            fieldname = f"workloads[{j}]"
            if kind in ("ping", "bulk"):
                if w["src"] not in vips:
                    raise ConfigError(f"{fieldname}.src", f"unknown node {w['src']}")
                if w["dst"] not in seen:
                    raise ConfigError(f"{fieldname}.dst", f"unknown virtual IP {w['dst']}")
                if kind == "ping" and w.get("count", 0) < 1:
                    raise ConfigError(f"{fieldname}.count", "count must be >= 1")
                if kind == "bulk" and w.get("chunk", 1) < 1:
                    raise ConfigError(f"{fieldname}.chunk", "chunk must be >= 1")
            elif kind == "ping_random":
                if len(self.nodes) < 2:
                    raise ConfigError(fieldname, "ping_random needs at least 2 nodes")
            elif kind == "churn":
                if not 0 <= w.get("fraction", 0) < 1:
                    raise ConfigError(f"{fieldname}.fraction", "fraction must be in [0, 1)")
            elif kind in ("migrate", "probe_lookups"):
                pass
            else:
                raise ConfigError(f"{fieldname}.kind", f"unknown workload kind {kind!r}")

    # -- serialization ------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        def us(ms=None, s=None, default=None):
            if ms is not None:
                return int(round(ms * 1000))
            if s is not None:
                return int(round(s * 1_000_000))
            return default

        def profile(d: dict) -> ChannelProfile:
            return ChannelProfile(
                latency_us=int(d.get("latency_us", 20_000)),
                jitter_us=int(d.get("jitter_us", 0)),
                drop=float(d.get("drop", 0.0)),
                reorder=float(d.get("reorder", 0.0)),
                bandwidth_bps=d.get("bandwidth_bps"),
            )

        try:
            mode = ResolutionMode(data.get("mode", "direct"))
        except ValueError:
            raise ConfigError("mode", f"unknown mode {data.get('mode')!r}") from None
        nodes = []
        for nd in data.get("nodes", []):
            if "vip" not in nd:
                raise ConfigError("nodes", "every node needs a vip")
            nodes.append(
                NodeSpec(
                    vip=nd["vip"],
                    nat=nd.get("nat", "none"),
                    bootstrap=bool(nd.get("bootstrap", False)),
                    extra_vips=tuple(nd.get("extra_vips", ())),
                    join_at_us=us(s=nd["join_at_s"]) if "join_at_s" in nd else None,
                )
            )
        overrides = {}
        for ld in data.get("links", []):
            if "a" not in ld or "b" not in ld:
                raise ConfigError("links", "link override needs both 'a' and 'b'")
            overrides[frozenset((ld["a"], ld["b"]))] = profile(ld)
        workloads = []
        for wd in data.get("workloads", []):
            w = dict(wd)
            if "interval_ms" in w:
                w["interval_us"] = us(ms=w.pop("interval_ms"))
            if "start_s" in w:
                w["start_us"] = us(s=w.pop("start_s"))
            if "at_s" in w:
                w["at_us"] = us(s=w.pop("at_s"))
            if "verify_after_s" in w:
                w["verify_after_us"] = us(s=w.pop("verify_after_s"))
            workloads.append(w)
        scenario = cls(
            nodes=nodes,
            seed=int(data.get("seed", 1)),
            mode=mode,
            subnet=data.get("subnet", vnet.DEFAULT_SUBNET),
            duration_us=us(s=data["duration_s"]) if "duration_s" in data else None,
            k=int(data.get("k", overlay.K_NEAR_DEFAULT)),
            join_shortcuts=bool(data.get("join_shortcuts", True)),
            processing_us=int(data.get("processing_us", 500)),
            join_spacing_us=us(ms=data["join_spacing_ms"]) if "join_spacing_ms" in data else JOIN_SPACING_US,
            log_level=data.get("log", "summary"),
            trace_packets=bool(data.get("trace_packets", False)),
            default_link=profile(data.get("default_link", {})),
            link_overrides=overrides,
            workloads=workloads,
        )
        scenario.validate()
        return scenario

    @classmethod
    def from_file(cls, path) -> "Scenario":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"invalid JSON: {exc}") from None
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# Metrics


class MetricsLog:
    """Append-only event log with a derived summary record."""

    def __init__(self, level: str = "summary", trace_packets: bool = False):
        self.level = level
        self.trace_packets = trace_packets
        self.records: list[dict] = []

    def add(self, record: dict):
        ev = record.get("ev")
        if self.level == "full" or ev in SUMMARY_EVENTS:
            self.records.append(record)
        elif self.trace_packets and ev in ("tunnel_send", "tunnel_deliver"):
            self.records.append(record)

    def events(self, ev: str) -> list[dict]:
        return [r for r in self.records if r.get("ev") == ev]

    @property
    def summary(self) -> dict | None:
        for record in reversed(self.records):
            if record.get("ev") == "summary":
                return record
        return None

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records
        )

    def to_csv_summary(self) -> str:
        summary = self.summary or {}
        lines = ["metric,value"]
        for key in sorted(summary):
            if key in ("ev", "hops_hist", "counters"):
                continue
            lines.append(f"{key},{summary[key]}")
        for hops, count in sorted((summary.get("hops_hist") or {}).items(), key=lambda kv: int(kv[0])):
            lines.append(f"hops_{hops},{count}")
        return "\n".join(lines) + "\n"

    def write(self, path, fmt: str = "jsonl"):
        text = self.to_jsonl() if fmt == "jsonl" else self.to_csv_summary()
        with open(path, "w") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# Simulation


class _Timer:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self):
        self.cancelled = True


class _Driver:
    """Adapter binding one node into the simulation."""

    def __init__(self, sim: "Simulation", rec: "_NodeRec"):
        self.sim = sim
        self.rec = rec

    def now_us(self) -> int:
        return self.sim.t

    def call_later(self, delay_us: int, fn) -> _Timer:
        return self.sim.call_later(delay_us, fn, rec=self.rec)

    def send_datagram(self, dest: Endpoint, data: bytes, trace: dict | None = None):
        self.sim._emit(self.rec, dest, data, trace)

    def log(self, record: dict):
        self.sim._node_log(self.rec, record)


@dataclass
class _NodeRec:
    index: int
    spec: NodeSpec
    node: Node
    public_ip: str
    endpoint: Endpoint  # the node's own (internal when NATed) endpoint
    nat_device: NatDevice | None = None
    dead: bool = False


class Simulation:
    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.scenario = scenario
        self.t = 0
        self._heap: list = []
        self._seq = 0
        self.metrics = MetricsLog(scenario.log_level, scenario.trace_packets)
        self.rng_net = random.Random(derive_seed(scenario.seed, "net"))
        self.rng_workload = random.Random(derive_seed(scenario.seed, "workload"))
        self.rng_churn = random.Random(derive_seed(scenario.seed, "churn"))
        self.counters = {
            "sent": 0,
            "delivered": 0,
            "link_dropped": 0,
            "nat_dropped": 0,
            "dead_dropped": 0,
            "unknown_dropped": 0,
        }
        self._busy: dict = {}  # (i, j) -> serialization horizon
        self._ping_tracker: dict = {}
        self._ping_stats = {"sent": 0, "received": 0, "timeouts": 0}
        self._bulk: dict = {}
        self.ownership: dict[str, str] = {}  # virtual IP -> owner's primary vip
        self.recs: list[_NodeRec] = []
        self.by_vip: dict[str, _NodeRec] = {}
        self._by_ip: dict[str, _NodeRec] = {}
        self._build()

    # -- construction -------------------------------------------------------

    def _build(self):
        s = self.scenario
        for i, spec in enumerate(s.nodes):
            n = i + 1
            public_ip = f"100.64.{n >> 8}.{n & 255}"
            nat_type = NAT_NAMES[spec.nat]
            if nat_type is None:
                endpoint = Endpoint(public_ip, NODE_PORT)
                device = None
            else:
                endpoint = Endpoint(f"172.16.{n >> 8}.{n & 255}", NODE_PORT)
                device = NatDevice(nat_type, public_ip)
            cfg = NodeConfig(
                k=s.k,
                mode=s.mode,
                join_shortcuts=s.join_shortcuts,
                processing_us=s.processing_us,
                strict=True,
            )
            rec = _NodeRec(index=i, spec=spec, node=None, public_ip=public_ip,
                           endpoint=endpoint, nat_device=device)
            driver = _Driver(self, rec)
            rec.node = Node(
                spec.vip,
                endpoint,
                driver,
                cfg,
                seed=derive_seed(s.seed, f"node/{spec.vip}"),
                extra_vips=spec.extra_vips,
            )
            rec.node.host.on_rtt = self._make_rtt_hook(rec)
            self.recs.append(rec)
            self.by_vip[spec.vip] = rec
            self._by_ip[public_ip] = rec
            if device is not None:
                self._by_ip[endpoint.ip] = rec
            for vip in (spec.vip, *spec.extra_vips):
                self.ownership[vip] = spec.vip

    # -- event loop ---------------------------------------------------------

    def call_later(self, delay_us: int, fn, rec: _NodeRec | None = None) -> _Timer:
        timer = _Timer()

        def wrapped():
            if timer.cancelled or (rec is not None and rec.dead):
                return
            fn()

        heapq.heappush(self._heap, (self.t + max(0, int(delay_us)), self._seq, wrapped))
        self._seq += 1
        return timer

    def _run_until(self, end_us: int):
        while self._heap and self._heap[0][0] <= end_us:
            self.t, _, fn = heapq.heappop(self._heap)
            fn()
        self.t = max(self.t, end_us)

    # -- datagram plumbing ----------------------------------------------------

    def _emit(self, rec: _NodeRec, dst_ep: Endpoint, data: bytes, trace: dict | None):
        if rec.dead:
            return
        self.counters["sent"] += 1
        src_ep = rec.node.local_endpoint
        if rec.nat_device is not None:
            src_ep = rec.nat_device.outbound(src_ep, dst_ep, self.t)
        dest = self._by_ip.get(dst_ep.ip)
        profile = self._profile(rec, dest)
        if profile.drop > 0 and self.rng_net.random() < profile.drop:
            self.counters["link_dropped"] += 1
            self.metrics.add({"ev": "link_drop", "t": self.t, "from": rec.spec.vip})
            return
        start = self.t
        if profile.bandwidth_bps:
            key = (rec.index, dest.index if dest else -1)
            start = max(self.t, self._busy.get(key, 0))
            start += (len(data) * 1_000_000) // profile.bandwidth_bps
            self._busy[key] = start
        delay = (start - self.t) + profile.sample_latency(self.rng_net)
        if profile.reorder > 0 and self.rng_net.random() < profile.reorder:
            delay += profile.sample_latency(self.rng_net) + 1_000
        sent_at = self.t
        self.call_later(
            delay, lambda: self._arrive(dest, src_ep, dst_ep, data, trace, sent_at)
        )

    def _profile(self, rec: _NodeRec, dest: _NodeRec | None) -> ChannelProfile:
        if dest is None:
            return self.scenario.default_link
        key = frozenset((rec.spec.vip, dest.spec.vip))
        return self.scenario.link_overrides.get(key, self.scenario.default_link)

    def _arrive(self, dest, src_ep, dst_ep, data, trace, sent_at):
        if dest is None:
            self.counters["unknown_dropped"] += 1
            return
        if dest.nat_device is not None and dst_ep.ip == dest.nat_device.external_ip:
            internal = dest.nat_device.inbound(src_ep, dst_ep, self.t)
            if internal is None:
                self.counters["nat_dropped"] += 1
                self.metrics.add({"ev": "nat_drop", "t": self.t, "at": dest.spec.vip})
                return
            dst_ep = internal
        if dest.dead:
            self.counters["dead_dropped"] += 1
            return
        if dst_ep != dest.node.local_endpoint:
            self.counters["unknown_dropped"] += 1
            return
        self.counters["delivered"] += 1
        if trace is not None:
            trace["lat"] += self.t - sent_at
        dest.node.handle_datagram(src_ep, data, trace)

    # -- node log intercept -----------------------------------------------------

    def _node_log(self, rec: _NodeRec, record: dict):
        ev = record.get("ev")
        if ev == "tunnel_deliver" and record.get("proto") == vnet.IPPROTO_ICMP:
            key = (record.get("ident"), record.get("seq"))
            side = "req" if record.get("icmp_kind") == vnet.ICMP_ECHO_REQUEST else "rep"
            self._ping_tracker.setdefault(key, {})[side] = record
        elif ev == "tunnel_deliver" and record.get("proto") == vnet.IPPROTO_BULK:
            tracker = self._bulk.get((record["ip_src"], record["ip_dst"]))
            if tracker is not None:
                tracker["bytes"] += record["len"] - 8  # chunk header
                tracker["last_deliver"] = record["t"]
                tracker["chunks"] += 1
        self.metrics.add(record)

    def _make_rtt_hook(self, rec: _NodeRec):
        def on_rtt(ident: int, seq: int, rtt_us: int):
            stats = self._ping_tracker.pop((ident, seq), {})
            req = stats.get("req", {})
            rep = stats.get("rep", {})
            self._ping_stats["received"] += 1
            self.metrics.add(
                {
                    "ev": "rtt",
                    "t": self.t,
                    "src": rec.spec.vip,
                    "ident": ident,
                    "seq": seq,
                    "rtt_us": rtt_us,
                    "req_hops": req.get("hops", 0),
                    "rep_hops": rep.get("hops", 0),
                    "lat_us": req.get("lat_us", 0) + rep.get("lat_us", 0),
                    "trav": req.get("trav", 0) + rep.get("trav", 0),
                    "req_path": req.get("path", []),
                    "rep_path": rep.get("path", []),
                }
            )

        return on_rtt

    # -- run -----------------------------------------------------------------

    def run(self) -> MetricsLog:
        join_end = self._schedule_joins()
        horizon = self._schedule_workloads(join_end)
        duration = self.scenario.duration_us
        if duration is None:
            duration = horizon
        self._run_until(duration)
        self._finalize()
        return self.metrics

    def _schedule_joins(self) -> int:
        first_bootstrap = next(r for r in self.recs if r.spec.bootstrap and r.spec.nat == "none")
        bootstrap_ep = Endpoint(first_bootstrap.public_ip, NODE_PORT)
        self.bootstrap_endpoint = bootstrap_ep
        join_end = 0
        stagger = 0
        for rec in self.recs:
            if rec is first_bootstrap:
                at = rec.spec.join_at_us or 0
                self.call_later(at, lambda r=rec: r.node.start(None))
            else:
                stagger += self.scenario.join_spacing_us
                at = rec.spec.join_at_us if rec.spec.join_at_us is not None else stagger
                self.call_later(at, lambda r=rec: r.node.start(bootstrap_ep))
            join_end = max(join_end, at)
        return join_end

    def _schedule_workloads(self, join_end: int) -> int:
        default_start = join_end + WORKLOAD_SETTLE_US
        horizon = default_start + 5_000_000
        for w in self.scenario.workloads:
            kind = w["kind"]
            if kind == "ping":
                start = w.get("start_us", default_start)
                interval = w.get("interval_us", 100_000)
                count = w["count"]
                self._schedule_ping_series(
                    w["src"], w["dst"], count, interval, start, w.get("payload_len", 56)
                )
                horizon = max(horizon, start + count * interval + PING_TIMEOUT_US + 2_000_000)
            elif kind == "ping_random":
                start = w.get("start_us", default_start)
                pairs = w["pairs"]
                rate = w.get("rate_per_s", 500)
                step = max(1, 1_000_000 // rate)
                self._schedule_random_pings(pairs, step, start, w.get("payload_len", 56))
                horizon = max(horizon, start + pairs * step + PING_TIMEOUT_US + 2_000_000)
            elif kind == "bulk":
                start = w.get("start_us", default_start)
                self._schedule_bulk(w, start)
                horizon = max(horizon, start + 120_000_000)
            elif kind == "churn":
                at = w.get("at_us", default_start)
                verify_after = w.get("verify_after_us", 75_000_000)
                self._schedule_churn(w["fraction"], at, at + verify_after)
                horizon = max(horizon, at + verify_after + REPORT_WAIT_US + 2_000_000)
            elif kind == "migrate":
                at = w.get("at_us", default_start)
                self.call_later(at, lambda w=w: self._do_migrate(w.get("count", 1)))
                horizon = max(horizon, at + 10_000_000)
            elif kind == "probe_lookups":
                at = w.get("at_us", default_start)
                self._schedule_probe(w, at)
                horizon = max(horizon, at + REPORT_WAIT_US + 2_000_000)
        return horizon

    # -- ping workloads --------------------------------------------------------

    def _launch_ping(self, src_vip: str, dst_vip: str, ident: int, seq: int, payload_len: int):
        rec = self.by_vip[src_vip]
        if rec.dead:
            return
        self._ping_stats["sent"] += 1
        rec.node.ping(dst_vip, ident, seq, payload_len)
        key = (ident, seq)

        def sweep():
            host = rec.node.host
            if key in host.pending_echo and self.t - host.pending_echo[key] > PING_TIMEOUT_US:
                del host.pending_echo[key]
                host.timeouts += 1
                self._ping_stats["timeouts"] += 1
                self.metrics.add(
                    {"ev": "ping_timeout", "t": self.t, "src": src_vip, "dst": dst_vip, "seq": seq}
                )

        self.call_later(PING_TIMEOUT_US + 1_000, sweep)

    def _schedule_ping_series(self, src, dst, count, interval, start, payload_len):
        ident = vnet.echo_ident(src, dst)
        for seq in range(count):
            self.call_later(
                start + seq * interval - self.t,
                lambda s=seq: self._launch_ping(src, dst, ident, s, payload_len),
            )

    def _schedule_random_pings(self, pairs, step, start, payload_len):
        vips = [r.spec.vip for r in self.recs]

        def launch(j):
            alive = [v for v in vips if not self.by_vip[v].dead]
            if len(alive) < 2:
                return
            src = self.rng_workload.choice(alive)
            dst = self.rng_workload.choice([v for v in alive if v != src])
            self._launch_ping(src, dst, vnet.echo_ident(src, dst), j, payload_len)

        for j in range(pairs):
            self.call_later(start + j * step - self.t, lambda j=j: launch(j))

    # -- bulk -------------------------------------------------------------------

    def _schedule_bulk(self, w, start):
        src, dst = w["src"], w["dst"]
        total, chunk = w["total_bytes"], w["chunk"]
        tracker = {"bytes": 0, "chunks": 0, "first_send": start, "last_deliver": start,
                   "total": total}
        self._bulk[(src, dst)] = tracker

        def blast():
            rec = self.by_vip[src]
            sent = 0
            seq = 0
            while sent < total:
                size = min(chunk, total - sent)
                rec.node.send_bulk_chunk(dst, seq, b"\x00" * size)
                sent += size
                seq += 1

        self.call_later(start - self.t, blast)

    # -- churn / migration / probes ----------------------------------------------

    def _schedule_churn(self, fraction, at_us, verify_at_us):
        def fail_nodes():
            candidates = [r for r in self.recs if not r.spec.bootstrap and not r.dead]
            count = int(fraction * len(self.recs))
            victims = self.rng_churn.sample(candidates, min(count, len(candidates)))
            for rec in victims:
                rec.dead = True
                rec.node.stop()
                self.metrics.add({"ev": "churn", "t": self.t, "failed": rec.spec.vip})

        self.call_later(at_us - self.t, fail_nodes)
        self.call_later(verify_at_us - self.t, lambda: self._verify_churn())

    def _verify_churn(self):
        ok_nodes, total = self.ring_consistency()
        results = {"total": 0, "correct": 0, "wrong": 0, "failed": 0}
        survivors = [r for r in self.recs if not r.dead]
        expected = {
            ip: owner
            for ip, owner in sorted(self.ownership.items())
            if not self.by_vip[owner].dead
        }
        queriers = survivors[: min(5, len(survivors))]
        if self.scenario.mode is ResolutionMode.BRUNET_ARP:
            for ip, owner_vip in expected.items():
                owner_addr = direct_map(owner_vip)
                for rec in queriers:
                    results["total"] += 1

                    def cb(addr, err, want=owner_addr):
                        if err is not None or addr is None:
                            results["failed"] += 1
                        elif addr == want:
                            results["correct"] += 1
                        else:
                            results["wrong"] += 1

                    rec.node.resolve(ip, cb)

        def report():
            self.metrics.add(
                {
                    "ev": "churn_report",
                    "t": self.t,
                    "ring_ok_nodes": ok_nodes,
                    "ring_total_nodes": total,
                    "ring_consistency": ok_nodes / total if total else 1.0,
                    "dht_total": results["total"],
                    "dht_correct": results["correct"],
                    "dht_wrong": results["wrong"],
                    "dht_failed": results["failed"],
                }
            )

        self.call_later(REPORT_WAIT_US, report)

    def _do_migrate(self, count):
        extras = sorted(ip for ip, owner in self.ownership.items() if ip != owner)
        movable = [ip for ip in extras if not self.by_vip[self.ownership[ip]].dead]
        chosen = movable[:count]
        targets = [r for r in self.recs if not r.dead]
        for ip in chosen:
            old = self.by_vip[self.ownership[ip]]
            new = self.rng_workload.choice([r for r in targets if r.spec.vip != old.spec.vip])
            old.node.remove_vip(ip)
            new.node.add_vip(ip)
            self.ownership[ip] = new.spec.vip
            self.metrics.add(
                {"ev": "migrate", "t": self.t, "ip": ip, "from": old.spec.vip, "to": new.spec.vip}
            )

    def _schedule_probe(self, w, at_us):
        def probe():
            queriers = [r for r in self.recs if not r.dead]
            limit = w.get("queriers")
            if isinstance(limit, int):
                queriers = queriers[:limit]
            results = {"total": 0, "correct": 0, "wrong": 0, "failed": 0}
            for ip, owner_vip in sorted(self.ownership.items()):
                if self.by_vip[owner_vip].dead:
                    continue
                want = direct_map(owner_vip)
                for rec in queriers:
                    results["total"] += 1

                    def cb(addr, err, want=want):
                        if err is not None or addr is None:
                            results["failed"] += 1
                        elif addr == want:
                            results["correct"] += 1
                        else:
                            results["wrong"] += 1

                    rec.node.resolve(ip, cb)

            def report():
                self.metrics.add({"ev": "probe_report", "t": self.t, **results})

            self.call_later(REPORT_WAIT_US, report)

        self.call_later(at_us - self.t, probe)

    # -- checks and summary --------------------------------------------------------

    def ring_consistency(self) -> tuple[int, int]:
        """Count survivors whose near sets match the sorted-address oracle."""
        alive = [r for r in self.recs if not r.dead]
        ordered = sorted(alive, key=lambda r: r.node.address.value)
        n = len(ordered)
        ok = 0
        for idx, rec in enumerate(ordered):
            k = min(rec.node.config.k, n - 1)
            want_right = {ordered[(idx + j) % n].node.address for j in range(1, k + 1)}
            want_left = {ordered[(idx - j) % n].node.address for j in range(1, k + 1)}
            have_right = {e.address for e in rec.node.table.near_right}
            have_left = {e.address for e in rec.node.table.near_left}
            if want_right == have_right and want_left == have_left:
                ok += 1
        return ok, n

    def topology_edges(self) -> list[dict]:
        edges = []
        for rec in self.recs:
            if rec.dead:
                continue
            near = {e.address for e in rec.node.table.near_left + rec.node.table.near_right}
            for entry in rec.node.table.entries():
                kind = "near" if entry.address in near else "shortcut"
                edges.append(
                    {
                        "node": rec.node.address.hex(),
                        "vip": rec.spec.vip,
                        "peer": entry.address.hex(),
                        "kind": kind,
                        "relayed": entry.relayed,
                    }
                )
        return edges

    def _finalize(self):
        for rec in self.recs:
            if rec.dead:
                continue
            remaining = len(rec.node.host.pending_echo)
            if remaining:
                rec.node.host.pending_echo.clear()
                rec.node.host.timeouts += remaining
                self._ping_stats["timeouts"] += remaining
        for (src, dst), tracker in sorted(self._bulk.items()):
            duration = tracker["last_deliver"] - tracker["first_send"]
            record = {
                "ev": "bulk_report",
                "t": self.t,
                "src": src,
                "dst": dst,
                "bytes_delivered": tracker["bytes"],
                "chunks": tracker["chunks"],
                "duration_us": duration,
            }
            if tracker["bytes"] and duration > 0:
                record["throughput_bps"] = round(tracker["bytes"] * 1_000_000 / duration, 3)
            self.metrics.add(record)
        self.metrics.add({"ev": "topology", "t": self.t, "edges": self.topology_edges()})
        agg = {}
        for rec in self.recs:
            self.metrics.add(
                {
                    "ev": "node_counters",
                    "t": self.t,
                    "node": rec.spec.vip,
                    "dead": rec.dead,
                    "counters": {k: rec.node.counters[k] for k in sorted(rec.node.counters)},
                }
            )
            for key, val in rec.node.counters.items():
                agg[key] = agg.get(key, 0) + val
        rtts = [r["rtt_us"] for r in self.metrics.events("rtt")]
        hops_hist = {}
        for r in self.metrics.events("rtt"):
            hops_hist[str(r["req_hops"])] = hops_hist.get(str(r["req_hops"]), 0) + 1
        ok, total = self.ring_consistency()
        in_flight = (
            self.counters["sent"]
            - self.counters["delivered"]
            - self.counters["link_dropped"]
            - self.counters["nat_dropped"]
            - self.counters["dead_dropped"]
            - self.counters["unknown_dropped"]
        )
        summary = {
            "ev": "summary",
            "t": self.t,
            "datagrams_sent": self.counters["sent"],
            "datagrams_delivered": self.counters["delivered"],
            "datagrams_link_dropped": self.counters["link_dropped"],
            "datagrams_nat_dropped": self.counters["nat_dropped"],
            "datagrams_dead_dropped": self.counters["dead_dropped"],
            "datagrams_unknown_dropped": self.counters["unknown_dropped"],
            "datagrams_in_flight": in_flight,
            "pings_sent": self._ping_stats["sent"],
            "pings_received": self._ping_stats["received"],
            "ping_timeouts": self._ping_stats["timeouts"],
            "delivery_ratio": (
                round(self._ping_stats["received"] / self._ping_stats["sent"], 6)
                if self._ping_stats["sent"]
                else 1.0
            ),
            "rtt_count": len(rtts),
            "rtt_mean_us": round(statistics.fmean(rtts), 3) if rtts else 0,
            "rtt_stddev_us": round(statistics.stdev(rtts), 3) if len(rtts) > 1 else 0,
            "mean_hops": (
                round(statistics.fmean(r["req_hops"] for r in self.metrics.events("rtt")), 4)
                if rtts
                else 0
            ),
            "hops_hist": hops_hist,
            "ring_ok_nodes": ok,
            "ring_total_nodes": total,
            "arp_overlay_violations": agg.get("arp_overlay_violations", 0),
            "inject_frame_violations": agg.get("inject_frame_violations", 0),
            "inject_checksum_violations": agg.get("inject_checksum_violations", 0),
            "monotone_violations": agg.get("monotone_violations", 0),
            "counters": {k: agg[k] for k in sorted(agg)},
        }
        self.metrics.add(summary)


def run(scenario: Scenario) -> MetricsLog:
    """Build and run a scenario to completion, returning its metrics log."""
    return Simulation(scenario).run()
