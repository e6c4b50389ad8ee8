"""
Unit tests for scenario topology parsing, validation and adjacency.
"""

import copy
import json

import pytest

from meshfl.channel import ChannelModelName
from meshfl.exceptions import ConfigError
from meshfl.topology import (Band, Role, Topology, TopologyError, build_adjacency, parse_config,
                             topology_from_dict, topology_to_json)


@pytest.fixture
def two_routers(make_document):
    return make_document([("R1", "R2")], hosts={"S": ("aggregator", "R1"), "W1": ("worker", "R2")})


class TestParseConfig:
    """Test cases for parse_config."""

    def test_testbed_has_twenty_nodes(self, testbed_path):
        """The shipped testbed parses to 10 routers, 9 workers and a server."""
        topo = parse_config(testbed_path.read_text())

        assert len(topo.nodes) == 20
        assert len(topo.routers) == 10
        assert len(topo.workers) == 9
        assert topo.aggregators == ["S"]

    def test_single_node_without_links(self):
        """A lone router with no links is a valid topology."""
        topo = parse_config(json.dumps({"nodes": [{"id": "R1", "role": "router"}]}))

        assert topo.node_ids() == ["R1"]
        assert topo.links == ()

    def test_radio_defaults(self, two_routers):
        """Unspecified radio fields take the documented defaults."""
        topo = topology_from_dict(two_routers)
        radio = topo.interface("R1", "w0")

        assert radio.band is Band.GHZ_5
        assert radio.channel_width_mhz == 20
        assert radio.tx_power_dbm == 15.0
        assert radio.trace_file is None
        assert topo.seed == 0
        assert topo.channel_model.name is ChannelModelName.LOG_DISTANCE

    def test_pure_function_of_text(self, testbed_path):
        """Identical text gives equal topologies."""
        raw = testbed_path.read_text()

        assert parse_config(raw) == parse_config(raw)

    def test_round_trip(self, testbed_path):
        """Serializing and re-parsing yields an equal topology."""
        topo = parse_config(testbed_path.read_text())

        assert parse_config(topology_to_json(topo)) == topo

    def test_invalid_json(self):
        """Syntax errors are reported as configuration errors."""
        with pytest.raises(ConfigError, match="invalid JSON"):
            parse_config("{nodes: ")

    def test_attachments_and_roles(self, two_routers):
        """Hosts hang off routers through ideal attachments."""
        topo = topology_from_dict(two_routers)

        assert topo.attachments() == [("S", "R1"), ("W1", "R2")]
        assert topo.node("W1").role is Role.WORKER
        assert not topo.is_router("S")
        assert topo.link_between("R2", "R1").link_id == "R1.w0-R2.w0"


class TestRejections:
    """Every invariant has a mutation that triggers a rejection naming it."""

    def test_role_typo_names_json_path(self, two_routers):
        """A bad enum value is rejected with its JSON path."""
        document = copy.deepcopy(two_routers)
        document["nodes"][0]["role"] = "rooter"

        with pytest.raises(ConfigError) as excinfo:
            topology_from_dict(document)

        assert excinfo.value.path == "$.nodes[0].role"

    def test_missing_field(self, two_routers):
        """A node without an id is rejected."""
        document = copy.deepcopy(two_routers)
        del document["nodes"][1]["id"]

        with pytest.raises(ConfigError, match="missing required field 'id'"):
            topology_from_dict(document)

    def test_unknown_top_level_key(self, two_routers):
        """Unknown keys are schema violations."""
        document = dict(two_routers, colour="blue")

        with pytest.raises(ConfigError) as excinfo:
            topology_from_dict(document)

        assert excinfo.value.path == "$.colour"

    def test_channel_mismatch_names_both_interfaces(self, two_routers):
        """Linked radios on channels 36 and 40 are rejected."""
        document = copy.deepcopy(two_routers)
        document["nodes"][1]["interfaces"][0]["channel"] = 40

        with pytest.raises(TopologyError) as excinfo:
            topology_from_dict(document)

        assert excinfo.value.entities == ("R1.w0", "R2.w0")

    def test_channel_not_in_band(self, two_routers):
        """Channel 14 is not a 2.4 GHz channel."""
        document = copy.deepcopy(two_routers)
        document["nodes"][0]["interfaces"][0].update(band="2.4GHz", channel=14)

        with pytest.raises(ConfigError, match="not valid for band"):
            topology_from_dict(document)

    def test_tx_power_range(self, two_routers):
        """Transmit power above 30 dBm is rejected."""
        document = copy.deepcopy(two_routers)
        document["nodes"][0]["interfaces"][0]["tx_power_dbm"] = 31

        with pytest.raises(ConfigError) as excinfo:
            topology_from_dict(document)

        assert excinfo.value.path == "$.nodes[0].interfaces[0].tx_power_dbm"

    def test_duplicate_node_id(self, two_routers):
        """Node ids are unique."""
        document = copy.deepcopy(two_routers)
        document["nodes"][3]["id"] = "S"

        with pytest.raises(TopologyError, match="duplicate node id 'S'"):
            topology_from_dict(document)

    def test_unknown_link_endpoint(self, two_routers):
        """Links must reference existing interfaces."""
        document = copy.deepcopy(two_routers)
        document["links"][0][3] = "w9"

        with pytest.raises(TopologyError) as excinfo:
            topology_from_dict(document)

        assert excinfo.value.entities == ("R2.w9",)

    def test_disconnected_mesh(self, make_document):
        """Two router islands are rejected, naming one router of each."""
        document = make_document([("A", "B"), ("C", "D")])

        with pytest.raises(TopologyError, match="disconnected") as excinfo:
            topology_from_dict(document)

        assert excinfo.value.entities == ("A", "C")

    def test_host_without_attachment(self, two_routers):
        """A worker needs an attached router or one radio link."""
        document = copy.deepcopy(two_routers)
        del document["nodes"][3]["attached_router"]

        with pytest.raises(TopologyError, match="exactly one attachment point"):
            topology_from_dict(document)

    def test_host_attached_to_host(self, two_routers):
        """Hosts may only attach to routers."""
        document = copy.deepcopy(two_routers)
        document["nodes"][3]["attached_router"] = "S"

        with pytest.raises(TopologyError, match="not a router"):
            topology_from_dict(document)

    def test_parallel_links(self, make_document):
        """At most one link joins a node pair."""
        document = make_document([("A", "B"), ("B", "A")])

        with pytest.raises(TopologyError, match="more than one link"):
            topology_from_dict(document)

    def test_analytic_model_needs_positions(self, two_routers):
        """Positions are required for analytic channel models."""
        document = copy.deepcopy(two_routers)
        del document["nodes"][1]["position"]

        with pytest.raises(TopologyError) as excinfo:
            topology_from_dict(document)

        assert excinfo.value.path == "$.nodes[1].position"

    def test_replay_model_without_positions(self, two_routers):
        """Pure trace replay does not need geometry."""
        document = copy.deepcopy(two_routers)
        document["channel_model"] = {"name": "trace_replay"}
        for node in document["nodes"]:
            node.pop("position", None)
        document["nodes"][0]["interfaces"][0]["trace_file"] = "R1_w0.csv"

        topo = topology_from_dict(document)

        assert topo.node("R1").position is None

    def test_replay_model_needs_a_trace(self, two_routers):
        """Under trace_replay every link needs a trace on one endpoint."""
        document = copy.deepcopy(two_routers)
        document["channel_model"] = {"name": "trace_replay"}

        with pytest.raises(TopologyError, match="trace_replay"):
            topology_from_dict(document)


class TestBuildAdjacency:
    """Test cases for build_adjacency."""

    def test_chain(self, chain_topology):
        """Each link shows up once per direction."""
        adjacency = build_adjacency(chain_topology)

        assert [a.neighbor for a in adjacency["A"]] == ["B"]
        assert [a.neighbor for a in adjacency["B"]] == ["A", "C"]
        assert adjacency["B"][0].local_iface == "w0"
        assert adjacency["B"][0].remote_iface == "w0"

    def test_complete_mesh(self, make_topology):
        """In a complete 4-node mesh every node lists three neighbors."""
        names = ["A", "B", "C", "D"]
        topo = make_topology([(a, b) for i, a in enumerate(names) for b in names[i + 1:]])

        adjacency = build_adjacency(topo)

        assert all(len(adjacency[n]) == 3 for n in names)

    def test_testbed_edge_count(self, testbed_path):
        """Adjacency holds twice as many entries as the config has links."""
        topo = parse_config(testbed_path.read_text())

        adjacency = build_adjacency(topo)

        assert sum(len(v) for v in adjacency.values()) == 2 * len(topo.links) == 26

    def test_attachments_optional(self, make_topology):
        """Ideal attachments appear only when asked for."""
        topo = make_topology([("A", "B")], hosts={"W1": ("worker", "B")})

        assert build_adjacency(topo)["W1"] == []
        entry = build_adjacency(topo, include_attachments=True)["W1"][0]
        assert (entry.neighbor, entry.local_iface, entry.remote_iface) == ("B", None, None)

    def test_router_graph(self, chain_topology):
        """The backbone graph carries only router links."""
        assert isinstance(chain_topology, Topology)
        assert sorted(chain_topology.router_graph().edges) == [("A", "B"), ("B", "C"), ("C", "D")]
