"""Virtual IPv4 networking tunneled over a self-configuring P2P overlay.

The package is organized around the layers a packet crosses:

- ``address`` / ``overlay``: the 160-bit identifier ring, connection tables,
  greedy routing and the overlay control protocol.
- ``vnet``: Ethernet/IPv4 codecs, local ARP containment behind a phantom
  gateway, and encapsulation into overlay envelopes.
- ``resolver``: virtual IP to overlay address mapping, either by hashing
  directly or through the distributed registry with caching and migration.
- ``nat``: the four common NAT models and decentralized traversal.
- ``transport``: the 48-byte envelope codec plus simulated, UDP and framed
  stream channels.
- ``node``: the per-node state machine tying the layers together.
- ``sim``: the deterministic discrete-event harness and metrics log.
- ``cli``: scenario runner, benchmarks, diagnostics, and a real-UDP node.
"""

from .address import NodeAddress, ring_distance
from .errors import ConfigError, IpopError
from .nat import NatDevice, NatType, simultaneous_open
from .node import Node, NodeConfig
from .overlay import ConnectionTable, next_hop
from .resolver import ResolutionMode, direct_map
from .sim import MetricsLog, Scenario, Simulation, run
from .transport import BrunetPacket, ChannelProfile, Endpoint, decode, encode
from .vnet import (
    EthernetFrame,
    HostInterface,
    Ipv4Packet,
    decapsulate,
    encapsulate,
    ipv4_checksum,
    parse_ethernet,
    parse_ipv4,
    serialize_ipv4,
)

__version__ = "0.1.0"

__all__ = [
    "BrunetPacket",
    "ChannelProfile",
    "ConfigError",
    "ConnectionTable",
    "Endpoint",
    "EthernetFrame",
    "HostInterface",
    "Ipv4Packet",
    "IpopError",
    "MetricsLog",
    "NatDevice",
    "NatType",
    "Node",
    "NodeAddress",
    "NodeConfig",
    "ResolutionMode",
    "Scenario",
    "Simulation",
    "decapsulate",
    "decode",
    "direct_map",
    "encapsulate",
    "encode",
    "ipv4_checksum",
    "next_hop",
    "parse_ethernet",
    "parse_ipv4",
    "ring_distance",
    "run",
    "serialize_ipv4",
    "simultaneous_open",
]
