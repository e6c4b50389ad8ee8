"""
Scenario topology: parsing, validation and adjacency.

The scenario JSON names the mesh routers, the compute hosts hanging off them
(workers and the aggregator), every radio interface and the links between
interfaces, plus the channel and interference models. ``parse_config``
turns that text into an immutable ``Topology``; every later stage only reads
it.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, List, NamedTuple, Optional, Tuple

import networkx as nx

from .channel import ChannelModelConfig, ChannelModelName, InterferenceModelConfig
from .exceptions import ConfigError
from .schema import expect_mapping, get_enum, get_int, get_number, get_str, reject_unknown

logger = logging.getLogger(__name__)

CHANNELS_2_4GHZ: FrozenSet[int] = frozenset(range(1, 14))
CHANNELS_5GHZ: FrozenSet[int] = frozenset({
    36, 40, 44, 48, 52, 56, 60, 64, 100, 104, 108, 112, 116, 120, 124, 128,
    132, 136, 140, 144, 149, 153, 157, 161, 165,
})
CHANNEL_WIDTHS_MHZ: FrozenSet[int] = frozenset({20, 40, 80, 160})

TOPOLOGY_KEYS = ("nodes", "links", "channel_model", "interference_model", "seed")
# Sections owned by other modules that may share the scenario document.
SCENARIO_KEYS = ("name", "description", "scheduler", "netsim", "fl", "routing")


class TopologyError(ConfigError):
    """
    Raised when a parsed topology violates a structural invariant.

    Attributes:
        entities: Names of the nodes, interfaces or links involved
    """

    def __init__(self, message: str, entities: Tuple[str, ...] = (), path: str = "$"):
        super().__init__(message, path)
        self.entities = tuple(entities)


class Role(str, Enum):
    """Role of a node in the FL deployment."""
    ROUTER = "router"
    WORKER = "worker"
    AGGREGATOR = "aggregator"


class Band(str, Enum):
    """Radio band."""
    GHZ_2_4 = "2.4GHz"
    GHZ_5 = "5GHz"


@dataclass(frozen=True)
class RadioSpec:
    """A radio interface of a node."""
    iface_id: str
    band: Band = Band.GHZ_5
    channel: int = 36
    channel_width_mhz: int = 20
    tx_power_dbm: float = 15.0
    trace_file: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "iface_id": self.iface_id,
            "band": self.band.value,
            "channel": self.channel,
            "width_mhz": self.channel_width_mhz,
            "tx_power_dbm": self.tx_power_dbm,
        }
        if self.trace_file is not None:
            data["trace_file"] = self.trace_file
        return data


@dataclass(frozen=True)
class NodeSpec:
    """A router or compute host."""
    id: str
    role: Role
    position: Optional[Tuple[float, float]] = None
    interfaces: Tuple[RadioSpec, ...] = ()
    attached_router: Optional[str] = None

    @property
    def is_router(self) -> bool:
        return self.role is Role.ROUTER

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"id": self.id, "role": self.role.value}
        if self.position is not None:
            data["position"] = [self.position[0], self.position[1]]
        data["interfaces"] = [radio.to_dict() for radio in self.interfaces]
        if self.attached_router is not None:
            data["attached_router"] = self.attached_router
        return data


@dataclass(frozen=True)
class LinkSpec:
    """A radio link between two interfaces."""
    node_a: str
    iface_a: str
    node_b: str
    iface_b: str

    @property
    def link_id(self) -> str:
        return f"{self.node_a}.{self.iface_a}-{self.node_b}.{self.iface_b}"

    @property
    def nodes(self) -> Tuple[str, str]:
        return self.node_a, self.node_b

    def interfaces(self) -> Tuple[Tuple[str, str], Tuple[str, str]]:
        return (self.node_a, self.iface_a), (self.node_b, self.iface_b)

    def to_list(self) -> List[str]:
        return [self.node_a, self.iface_a, self.node_b, self.iface_b]


class Adjacency(NamedTuple):
    """One neighbor entry; ifaces are None for an ideal host attachment."""
    neighbor: str
    local_iface: Optional[str]
    remote_iface: Optional[str]


@dataclass(frozen=True)
class Topology:
    """Validated, immutable world model shared by every simulation stage."""
    nodes: Tuple[NodeSpec, ...]
    links: Tuple[LinkSpec, ...] = ()
    channel_model: ChannelModelConfig = field(default_factory=ChannelModelConfig)
    interference_model: InterferenceModelConfig = field(default_factory=InterferenceModelConfig)
    seed: int = 0
    _index: Dict[str, NodeSpec] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {node.id: node for node in self.nodes})

    def has_node(self, node_id: str) -> bool:
        return node_id in self._index

    def node(self, node_id: str) -> NodeSpec:
        try:
            return self._index[node_id]
        except KeyError:
            raise TopologyError(f"unknown node '{node_id}'", (node_id,)) from None

    def interface(self, node_id: str, iface_id: str) -> RadioSpec:
        for radio in self.node(node_id).interfaces:
            if radio.iface_id == iface_id:
                return radio
        raise TopologyError(f"node '{node_id}' has no interface '{iface_id}'", (f"{node_id}.{iface_id}",))

    def node_ids(self) -> List[str]:
        return [node.id for node in self.nodes]

    def ids_with_role(self, role: Role) -> List[str]:
        return [node.id for node in self.nodes if node.role is role]

    @property
    def routers(self) -> List[str]:
        return self.ids_with_role(Role.ROUTER)

    @property
    def workers(self) -> List[str]:
        return self.ids_with_role(Role.WORKER)

    @property
    def aggregators(self) -> List[str]:
        return self.ids_with_role(Role.AGGREGATOR)

    def is_router(self, node_id: str) -> bool:
        return self.node(node_id).is_router

    def attachments(self) -> List[Tuple[str, str]]:
        """``(host, router)`` pairs joined by an ideal local link."""
        return [(node.id, node.attached_router) for node in self.nodes if node.attached_router is not None]

    def link_between(self, first: str, second: str) -> Optional[LinkSpec]:
        for link in self.links:
            if {link.node_a, link.node_b} == {first, second}:
                return link
        return None

    def links_of_interface(self, node_id: str, iface_id: str) -> List[LinkSpec]:
        return [link for link in self.links if (node_id, iface_id) in link.interfaces()]

    def router_graph(self) -> nx.Graph:
        """Mesh backbone graph over router nodes."""
        graph = nx.Graph()
        graph.add_nodes_from(self.routers)
        for link in self.links:
            if self.is_router(link.node_a) and self.is_router(link.node_b):
                graph.add_edge(link.node_a, link.node_b, link_id=link.link_id)
        return graph

    def to_dict(self) -> Dict[str, Any]:
        return {
            "nodes": [node.to_dict() for node in self.nodes],
            "links": [link.to_list() for link in self.links],
            "channel_model": self.channel_model.to_dict(),
            "interference_model": self.interference_model.to_dict(),
            "seed": self.seed,
        }


def topology_to_json(topo: Topology, indent: Optional[int] = 2) -> str:
    """Serialize a topology in the scenario schema."""
    return json.dumps(topo.to_dict(), indent=indent)


def parse_config(raw: str) -> Topology:
    """
    Parse and validate the topology part of a scenario document.

    Args:
        raw: JSON text of the scenario

    Returns:
        Validated Topology

    Raises:
        ConfigError: Schema violation, naming the JSON path
        TopologyError: Invariant violation, naming the entities involved
    """
    try:
        document = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg} (line {e.lineno}, column {e.colno})", "$") from e
    return topology_from_dict(document)


def topology_from_dict(document: Any) -> Topology:
    """Build a Topology from an already decoded scenario document."""
    document = expect_mapping(document, "$")
    reject_unknown(document, TOPOLOGY_KEYS + SCENARIO_KEYS, "$")

    raw_nodes = document.get("nodes")
    if not isinstance(raw_nodes, list):
        raise ConfigError("missing required list 'nodes'", "$.nodes")
    nodes = tuple(_parse_node(item, f"$.nodes[{i}]") for i, item in enumerate(raw_nodes))

    raw_links = document.get("links", [])
    if not isinstance(raw_links, list):
        raise ConfigError("expected a list", "$.links")
    links = tuple(_parse_link(item, f"$.links[{i}]") for i, item in enumerate(raw_links))

    if "channel_model" in document:
        channel_model = ChannelModelConfig.from_dict(document["channel_model"])
    else:
        channel_model = ChannelModelConfig()
    if "interference_model" in document:
        interference_model = InterferenceModelConfig.from_dict(document["interference_model"])
    else:
        interference_model = InterferenceModelConfig()
    seed = get_int(document, "seed", "$", 0, minimum=0)

    topo = Topology(nodes=nodes, links=links, channel_model=channel_model,
                    interference_model=interference_model, seed=seed)
    validate_topology(topo)
    logger.debug("parsed topology: %d nodes, %d links", len(nodes), len(links))
    return topo


def _parse_radio(data: Any, path: str) -> RadioSpec:
    data = expect_mapping(data, path)
    reject_unknown(data, ("iface_id", "band", "channel", "width_mhz", "tx_power_dbm", "trace_file"), path)
    band = get_enum(data, "band", path, Band, Band.GHZ_5)
    channel = get_int(data, "channel", path, 36)
    valid = CHANNELS_2_4GHZ if band is Band.GHZ_2_4 else CHANNELS_5GHZ
    if channel not in valid:
        raise ConfigError(f"channel {channel} is not valid for band {band.value}", f"{path}.channel")
    width = get_int(data, "width_mhz", path, 20)
    if width not in CHANNEL_WIDTHS_MHZ:
        raise ConfigError(f"unsupported channel width {width} MHz", f"{path}.width_mhz")
    return RadioSpec(
        iface_id=get_str(data, "iface_id", path),
        band=band,
        channel=channel,
        channel_width_mhz=width,
        tx_power_dbm=get_number(data, "tx_power_dbm", path, 15.0, minimum=0.0, maximum=30.0),
        trace_file=get_str(data, "trace_file", path, None),
    )


def _parse_node(data: Any, path: str) -> NodeSpec:
    data = expect_mapping(data, path)
    reject_unknown(data, ("id", "role", "position", "interfaces", "attached_router"), path)

    position = None
    if data.get("position") is not None:
        raw = data["position"]
        if (not isinstance(raw, list) or len(raw) != 2
                or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in raw)):
            raise ConfigError("position must be [x, y] in meters", f"{path}.position")
        if not all(math.isfinite(v) for v in raw):
            raise ConfigError("position coordinates must be finite", f"{path}.position")
        position = (float(raw[0]), float(raw[1]))

    raw_ifaces = data.get("interfaces", [])
    if not isinstance(raw_ifaces, list):
        raise ConfigError("expected a list", f"{path}.interfaces")

    return NodeSpec(
        id=get_str(data, "id", path),
        role=get_enum(data, "role", path, Role),
        position=position,
        interfaces=tuple(_parse_radio(item, f"{path}.interfaces[{i}]") for i, item in enumerate(raw_ifaces)),
        attached_router=get_str(data, "attached_router", path, None),
    )


def _parse_link(data: Any, path: str) -> LinkSpec:
    if not isinstance(data, list) or len(data) != 4 or not all(isinstance(v, str) and v for v in data):
        raise ConfigError("link must be [nodeA, ifaceA, nodeB, ifaceB]", path)
    return LinkSpec(*data)


def validate_topology(topo: Topology) -> None:
    """
    Check every structural invariant of a topology.

    Raises:
        TopologyError: On the first violation found
    """
    seen = set()
    for i, node in enumerate(topo.nodes):
        if node.id in seen:
            raise TopologyError(f"duplicate node id '{node.id}'", (node.id,), f"$.nodes[{i}].id")
        seen.add(node.id)
        ifaces = [radio.iface_id for radio in node.interfaces]
        duplicates = sorted({name for name in ifaces if ifaces.count(name) > 1})
        if duplicates:
            raise TopologyError(f"node '{node.id}' repeats interface ids {duplicates}",
                                tuple(f"{node.id}.{name}" for name in duplicates), f"$.nodes[{i}].interfaces")

    links_per_node: Dict[str, int] = {node.id: 0 for node in topo.nodes}
    pairs = set()
    for i, link in enumerate(topo.links):
        path = f"$.links[{i}]"
        for node_id, iface_id in link.interfaces():
            if not topo.has_node(node_id):
                raise TopologyError(f"link endpoint references unknown node '{node_id}'", (node_id,), path)
            if iface_id not in {radio.iface_id for radio in topo.node(node_id).interfaces}:
                raise TopologyError(f"link endpoint references unknown interface '{node_id}.{iface_id}'",
                                    (f"{node_id}.{iface_id}",), path)
        if link.node_a == link.node_b:
            raise TopologyError(f"link connects node '{link.node_a}' to itself", (link.node_a,), path)
        pair = frozenset(link.nodes)
        if pair in pairs:
            raise TopologyError(f"more than one link between '{link.node_a}' and '{link.node_b}'",
                                link.nodes, path)
        pairs.add(pair)

        radio_a = topo.interface(link.node_a, link.iface_a)
        radio_b = topo.interface(link.node_b, link.iface_b)
        if radio_a.band != radio_b.band or radio_a.channel != radio_b.channel:
            raise TopologyError(
                f"linked interfaces {link.node_a}.{link.iface_a} ({radio_a.band.value} ch {radio_a.channel}) and "
                f"{link.node_b}.{link.iface_b} ({radio_b.band.value} ch {radio_b.channel}) are on different channels",
                (f"{link.node_a}.{link.iface_a}", f"{link.node_b}.{link.iface_b}"), path)
        if not topo.is_router(link.node_a) and not topo.is_router(link.node_b):
            raise TopologyError("a link must have a router on at least one end", link.nodes, path)
        for node_id in link.nodes:
            links_per_node[node_id] += 1

    for i, node in enumerate(topo.nodes):
        path = f"$.nodes[{i}]"
        if node.is_router:
            if node.attached_router is not None:
                raise TopologyError(f"router '{node.id}' cannot be attached to another router", (node.id,),
                                    f"{path}.attached_router")
            continue
        if node.attached_router is not None:
            if not topo.has_node(node.attached_router) or not topo.is_router(node.attached_router):
                raise TopologyError(f"'{node.id}' is attached to '{node.attached_router}', which is not a router",
                                    (node.id, node.attached_router), f"{path}.attached_router")
            if links_per_node[node.id]:
                raise TopologyError(f"'{node.id}' has both an attached_router and radio links", (node.id,), path)
        elif links_per_node[node.id] != 1:
            raise TopologyError(
                f"{node.role.value} '{node.id}' needs exactly one attachment point "
                f"(attached_router or one radio link), found {links_per_node[node.id]} links", (node.id,), path)

    graph = topo.router_graph()
    if graph.number_of_nodes() > 1 and not nx.is_connected(graph):
        components = sorted((sorted(c) for c in nx.connected_components(graph)), key=lambda c: c[0])
        raise TopologyError(
            "router mesh is disconnected: " + " | ".join(",".join(c) for c in components),
            tuple(component[0] for component in components), "$.links")

    _validate_channel_inputs(topo)


def _validate_channel_inputs(topo: Topology) -> None:
    model = topo.channel_model
    for i, link in enumerate(topo.links):
        replayed = any(topo.interface(n, f).trace_file for n, f in link.interfaces())
        if replayed:
            continue
        if model.name is ChannelModelName.TRACE_REPLAY:
            raise TopologyError(
                f"link {link.link_id} has no trace_file on either interface but the channel model is trace_replay",
                (link.link_id,), f"$.links[{i}]")
        for node_id in link.nodes:
            if topo.node(node_id).position is None:
                raise TopologyError(
                    f"node '{node_id}' needs a position for the {model.name.value} channel model",
                    (node_id,), f"$.nodes[{topo.node_ids().index(node_id)}].position")


def build_adjacency(topo: Topology, include_attachments: bool = False) -> Dict[str, List[Adjacency]]:
    """
    Symmetric neighbor lists.

    Args:
        topo: Validated topology
        include_attachments: Also list ideal host-to-router attachments

    Returns:
        Mapping node id -> neighbors in link order; every link appears once
        per direction
    """
    adjacency: Dict[str, List[Adjacency]] = {node.id: [] for node in topo.nodes}
    for link in topo.links:
        adjacency[link.node_a].append(Adjacency(link.node_b, link.iface_a, link.iface_b))
        adjacency[link.node_b].append(Adjacency(link.node_a, link.iface_b, link.iface_a))
    if include_attachments:
        for host, router in topo.attachments():
            adjacency[host].append(Adjacency(router, None, None))
            adjacency[router].append(Adjacency(host, None, None))
    return adjacency
