"""
Pytest configuration and fixtures for the meshfl tests.

This module provides topology builders, the default MCS table, seeded random
streams and the paths of the shipped scenarios.
"""

import json
import logging
from pathlib import Path

import pytest

from meshfl.link_scheduler import McsTable
from meshfl.rng import StreamFactory
from meshfl.topology import topology_from_dict

SCENARIOS_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def build_document(links, hosts=None, channel=36, spacing_m=10.0, positions=None, **sections):
    """
    Scenario document for a router mesh.

    Every link gets its own radio on both endpoints (``w0``, ``w1``, ... per
    node, in link order). Routers are laid out on a line ``spacing_m`` apart
    in order of first appearance unless ``positions`` says otherwise.

    Args:
        links: ``(node_a, node_b)`` pairs between routers
        hosts: ``{host_id: (role, attached_router)}``
        channel: 5 GHz channel shared by every radio
        spacing_m: Distance between consecutive routers
        positions: ``{router: (x, y)}`` overrides
        **sections: Extra top-level keys (``fl``, ``netsim``, ``seed``, ...)
    """
    order = []
    for a, b in links:
        for node in (a, b):
            if node not in order:
                order.append(node)
    positions = dict(positions or {})
    radios = {node: [] for node in order}
    doc_links = []
    for a, b in links:
        ia = f"w{len(radios[a])}"
        radios[a].append({"iface_id": ia, "channel": channel})
        ib = f"w{len(radios[b])}"
        radios[b].append({"iface_id": ib, "channel": channel})
        doc_links.append([a, ia, b, ib])

    nodes = []
    for i, node in enumerate(order):
        x, y = positions.get(node, (i * spacing_m, 0.0))
        nodes.append({"id": node, "role": "router", "position": [x, y], "interfaces": radios[node]})
    for host, (role, router) in (hosts or {}).items():
        nodes.append({"id": host, "role": role, "attached_router": router})

    document = {"nodes": nodes, "links": doc_links, "channel_model": {"name": "log_distance"}}
    document.update(sections)
    return document


@pytest.fixture(autouse=True)
def reset_logging():
    """Drop the handlers a CLI command installs so later tests log normally."""
    yield
    logger = logging.getLogger("meshfl")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    logger.propagate = True
    logger.setLevel(logging.NOTSET)


@pytest.fixture
def make_document():
    """Factory for scenario documents (see ``build_document``)."""
    return build_document


@pytest.fixture
def make_topology():
    """Factory for validated topologies built from link pairs."""

    def factory(links, hosts=None, **kwargs):
        return topology_from_dict(build_document(links, hosts, **kwargs))

    return factory


@pytest.fixture
def chain_topology(make_topology):
    """Routers A-B-C-D in a line, 10 m apart."""
    return make_topology([("A", "B"), ("B", "C"), ("C", "D")])


@pytest.fixture
def mcs_table():
    """Built-in 802.11ac 20 MHz / 1SS / long GI table."""
    return McsTable.default()


@pytest.fixture
def streams():
    """Stream factory with a fixed master seed."""
    return StreamFactory(42)


@pytest.fixture
def scenarios_dir():
    return SCENARIOS_DIR


@pytest.fixture
def testbed_path():
    """Ten-router testbed scenario."""
    return SCENARIOS_DIR / "testbed10.json"


@pytest.fixture
def congested_path():
    """Single-channel scenario with a trace-driven bottleneck."""
    return SCENARIOS_DIR / "congested4.json"


@pytest.fixture
def oracle_path():
    """Two-worker scenario with a closed-form training trajectory."""
    return SCENARIOS_DIR / "oracle2.json"


@pytest.fixture
def write_scenario(tmp_path):
    """Write a scenario document to a temporary file and return its path."""

    def writer(document, name="scenario.json"):
        path = tmp_path / name
        path.write_text(json.dumps(document, indent=2), encoding="utf-8")
        return path

    return writer


@pytest.fixture
def write_trace(tmp_path):
    """Write trace rows (with the standard header) to a temporary CSV."""

    def writer(rows, name="trace.csv", header="time_s,mcs_index,rssi_dbm,loss,traffic_rate_mbps"):
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [header] + [",".join(str(v) for v in row) for row in rows]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return writer


# Pytest markers for different test categories
def pytest_configure(config):
    """Configure pytest markers."""
    config.addinivalue_line(
        "markers", "slow: marks multi-seed experiment tests (need --run-slow)"
    )
    config.addinivalue_line(
        "markers", "acceptance: marks end-to-end acceptance checks on the shipped scenarios"
    )


def pytest_runtest_setup(item):
    """Skip slow tests unless explicitly requested."""
    if "slow" in item.keywords:
        if not item.config.getoption("--run-slow", default=False):
            pytest.skip("Slow tests skipped (use --run-slow to run)")


def pytest_addoption(parser):
    """Add custom command line options."""
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run slow multi-seed experiment tests"
    )
