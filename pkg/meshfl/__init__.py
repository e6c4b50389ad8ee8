"""
meshfl - federated learning over a simulated multi-hop wireless mesh.

Modules:
    topology: scenario topology parsing and validation
    channel: path loss, trace replay and trace writing
    link_scheduler: periodic MCS/rate selection per link
    netsim: discrete-event network engine
    routing: shortest-path and multi-agent Q-routing
    flworkload: local SGD, FedAvg and FL rounds
    cli: command-line harness
"""

from .exceptions import ConfigError, MeshFLError, ValidationError
from .flworkload import FLConfig, Policy, run_experiment
from .netsim import NetConfig, NetworkEngine
from .routing import MultiAgentQRouting, PolicyConfig, ShortestPathRouting
from .scenario import Scenario, load_scenario
from .topology import Topology, parse_config

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FLConfig",
    "MeshFLError",
    "MultiAgentQRouting",
    "NetConfig",
    "NetworkEngine",
    "Policy",
    "PolicyConfig",
    "Scenario",
    "ShortestPathRouting",
    "Topology",
    "ValidationError",
    "load_scenario",
    "parse_config",
    "run_experiment",
]
