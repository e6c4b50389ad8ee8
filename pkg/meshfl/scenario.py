"""
Scenario documents.

A scenario is one JSON file: the topology keys plus optional ``scheduler``,
``netsim``, ``fl`` and ``routing`` sections. Each section is parsed by the
dataclass of the module that owns it.
"""

import copy
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from .exceptions import ConfigError
from .flworkload import FLConfig
from .link_scheduler import SchedulerConfig
from .netsim import NetConfig
from .routing import PolicyConfig
from .schema import expect_mapping, get_str
from .topology import Topology, topology_from_dict

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scenario:
    """A parsed scenario with every section resolved to its config object."""
    topology: Topology
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    netsim: NetConfig = field(default_factory=NetConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    routing: PolicyConfig = field(default_factory=PolicyConfig)
    name: str = "scenario"
    description: str = ""
    base_dir: Path = field(default_factory=Path.cwd)
    path: Optional[Path] = None
    document: Mapping[str, Any] = field(default_factory=dict, repr=False, compare=False)

    @property
    def seed(self) -> int:
        return self.topology.seed

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, topology=replace(self.topology, seed=seed))


def scenario_from_dict(document: Any, base_dir: Union[str, Path, None] = None,
                       path: Optional[Path] = None) -> Scenario:
    """
    Build a Scenario from a decoded document.

    Raises:
        ConfigError: Naming the JSON path of the first problem
    """
    document = expect_mapping(document, "$")
    topology = topology_from_dict(document)
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    scenario = Scenario(
        topology=topology,
        scheduler=SchedulerConfig.from_dict(document.get("scheduler", {})),
        netsim=NetConfig.from_dict(document.get("netsim", {})),
        fl=FLConfig.from_dict(document.get("fl", {})),
        routing=PolicyConfig.from_dict(document.get("routing", {})),
        name=get_str(document, "name", "$", path.stem if path else "scenario"),
        description=document.get("description", "") or "",
        base_dir=base,
        path=path,
        document=copy.deepcopy(document),
    )
    check_referenced_files(scenario)
    return scenario


def load_scenario(path: Union[str, Path]) -> Scenario:
    """
    Read, parse and validate a scenario file.

    Relative trace and MCS table paths resolve against the file's directory.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read scenario {path}: {e.strerror}", "$") from e
    try:
        document = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg} (line {e.lineno}, column {e.colno})", "$") from e
    scenario = scenario_from_dict(document, base_dir=path.parent, path=path)
    logger.info("loaded scenario %s from %s", scenario.name, path)
    return scenario


def resolve(scenario: Scenario, relative: str) -> Path:
    candidate = Path(relative)
    return candidate if candidate.is_absolute() else scenario.base_dir / candidate


def check_referenced_files(scenario: Scenario) -> None:
    """Fail with the JSON path of every referenced file that does not exist."""
    for i, node in enumerate(scenario.topology.nodes):
        for j, radio in enumerate(node.interfaces):
            if radio.trace_file and not resolve(scenario, radio.trace_file).is_file():
                raise ConfigError(f"trace file not found: {resolve(scenario, radio.trace_file)}",
                                  f"$.nodes[{i}].interfaces[{j}].trace_file")
    table = scenario.scheduler.mcs_table
    if table and not resolve(scenario, table).is_file():
        raise ConfigError(f"MCS table not found: {resolve(scenario, table)}", "$.scheduler.mcs_table")


def with_trace_files(document: Mapping[str, Any], traces: Mapping[Tuple[str, str], Path],
                     relative_to: Union[str, Path], base_dir: Union[str, Path, None] = None) -> Dict[str, Any]:
    """
    Copy of a scenario document whose interfaces replay the given traces.

    Paths the document already references are rewritten so they still point
    at the same files from the new location.

    Args:
        document: Original scenario document
        traces: ``(node, iface) -> trace path``
        relative_to: Directory the derived document will be written to
        base_dir: Directory the original document's relative paths resolve against
    """
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def moved(path: Union[str, Path]) -> str:
        target = Path(path) if Path(path).is_absolute() else base / path
        return Path(os.path.relpath(target.resolve(), Path(relative_to).resolve())).as_posix()

    derived = copy.deepcopy(dict(document))
    for node in derived.get("nodes", []):
        for radio in node.get("interfaces", []):
            key = (node.get("id"), radio.get("iface_id"))
            if key in traces:
                radio["trace_file"] = moved(traces[key])
            elif radio.get("trace_file"):
                radio["trace_file"] = moved(radio["trace_file"])
    scheduler = derived.get("scheduler")
    if isinstance(scheduler, dict) and scheduler.get("mcs_table"):
        scheduler["mcs_table"] = moved(scheduler["mcs_table"])
    return derived
