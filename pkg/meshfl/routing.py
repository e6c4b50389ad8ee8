"""
Next-hop selection.

Two policies share one interface: a minimum-hop baseline and multi-agent
tabular Q-routing where every router is an agent. An agent observes the
(flow source, flow destination) pair of a chunk, samples a neighbor from a
softmax over its Q values and learns on-policy from the negative per-hop
delay. Q-tables can be exported to JSON and imported elsewhere, frozen or as
a warm start.
"""

import hashlib
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from .exceptions import ConfigError, MeshFLError, ValidationError
from .rng import StreamFactory
from .schema import expect_mapping, get_bool, get_enum, get_number, reject_unknown
from .topology import Topology

logger = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1

State = Tuple[str, str]


class RoutingError(MeshFLError):
    """Base exception for routing errors."""
    pass


class NoRouteError(RoutingError):
    """Raised when no live path leads to the destination."""
    pass


class SnapshotError(RoutingError, ValidationError):
    """
    Raised when a Q-table snapshot does not fit a topology.

    Attributes:
        mismatches: One line per offending node or neighbor
    """

    def __init__(self, message: str, mismatches: Sequence[str] = ()):
        detail = "; ".join(mismatches)
        super().__init__(f"{message}: {detail}" if detail else message)
        self.mismatches = list(mismatches)


class PolicyMode(str, Enum):
    """Whether agents learn during a run."""
    ONLINE = "online"
    FROZEN = "frozen"


class RewardGranularity(str, Enum):
    """Apply an update per chunk, or one averaged update per flow."""
    CHUNK = "chunk"
    FLOW = "flow"


@dataclass(frozen=True)
class PolicyConfig:
    """
    Q-routing hyperparameters (scenario section ``routing``).

    ``temperature_schedule`` lists ``(first_round, tau)`` steps; frozen runs
    use the last step's temperature from the first round on.
    """
    mode: PolicyMode = PolicyMode.ONLINE
    temperature_schedule: Tuple[Tuple[int, float], ...] = ((0, 1.0), (10, 0.3))
    learning_rate: float = 0.1
    discount: float = 1.0
    initial_q: float = 0.0
    loop_penalty_s: float = 0.1
    reward_granularity: RewardGranularity = RewardGranularity.CHUNK
    greedy: bool = False

    def __post_init__(self):
        if not self.temperature_schedule or self.temperature_schedule[0][0] != 0:
            raise ConfigError("temperature_schedule must start at round 0", "$.routing.temperature_schedule")
        rounds = [r for r, _ in self.temperature_schedule]
        if rounds != sorted(set(rounds)):
            raise ConfigError("temperature_schedule rounds must increase", "$.routing.temperature_schedule")
        if any(not tau > 0 for _, tau in self.temperature_schedule):
            raise ConfigError("temperatures must be > 0", "$.routing.temperature_schedule")
        if not 0.0 <= self.learning_rate <= 1.0:
            raise ConfigError("learning_rate must be in [0, 1]", "$.routing.learning_rate")
        if not 0.0 < self.discount <= 1.0:
            raise ConfigError("discount must be in (0, 1]", "$.routing.discount")
        if self.loop_penalty_s < 0:
            raise ConfigError("loop_penalty_s must be >= 0", "$.routing.loop_penalty_s")

    def temperature_at(self, round_idx: int) -> float:
        tau = self.temperature_schedule[0][1]
        for first_round, value in self.temperature_schedule:
            if round_idx >= first_round:
                tau = value
        return tau

    @property
    def final_temperature(self) -> float:
        return self.temperature_schedule[-1][1]

    @classmethod
    def from_dict(cls, data: Any, path: str = "$.routing") -> "PolicyConfig":
        data = expect_mapping(data, path)
        reject_unknown(data, ("mode", "temperature", "temperature_schedule", "learning_rate", "discount",
                              "initial_q", "loop_penalty_s", "reward_granularity", "greedy"), path)
        defaults = cls()
        schedule = defaults.temperature_schedule
        if "temperature" in data:
            schedule = ((0, get_number(data, "temperature", path)),)
        if "temperature_schedule" in data:
            raw = data["temperature_schedule"]
            if (not isinstance(raw, list) or not raw
                    or not all(isinstance(step, list) and len(step) == 2 for step in raw)):
                raise ConfigError("expected a list of [round, temperature] pairs", f"{path}.temperature_schedule")
            try:
                schedule = tuple((int(r), float(tau)) for r, tau in raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad schedule step ({e})", f"{path}.temperature_schedule") from e
        return cls(
            mode=get_enum(data, "mode", path, PolicyMode, defaults.mode),
            temperature_schedule=schedule,
            learning_rate=get_number(data, "learning_rate", path, defaults.learning_rate),
            discount=get_number(data, "discount", path, defaults.discount),
            initial_q=get_number(data, "initial_q", path, defaults.initial_q),
            loop_penalty_s=get_number(data, "loop_penalty_s", path, defaults.loop_penalty_s),
            reward_granularity=get_enum(data, "reward_granularity", path, RewardGranularity,
                                        defaults.reward_granularity),
            greedy=get_bool(data, "greedy", path, defaults.greedy),
        )


def live_graph(topo: Topology, is_live: Callable[[str, str], bool]) -> nx.Graph:
    """Graph of every node with the radio links currently up and all attachments."""
    graph = nx.Graph()
    graph.add_nodes_from(topo.node_ids())
    for link in topo.links:
        if is_live(link.node_a, link.node_b):
            graph.add_edge(link.node_a, link.node_b)
    for host, router in topo.attachments():
        graph.add_edge(host, router)
    return graph


def hop_distances(topo: Topology, graph: nx.Graph, dst: str) -> Dict[str, int]:
    """Hop count to ``dst`` using routers only as transit nodes."""
    transit = graph.subgraph([n for n in graph.nodes if n == dst or topo.is_router(n)])
    return dict(nx.single_source_shortest_path_length(transit, dst))


def _pick_shortest(distances: Mapping[str, int], candidates: Iterable[str]) -> Optional[str]:
    reachable = [(distances[n], n) for n in candidates if n in distances]
    return min(reachable)[1] if reachable else None


def shortest_path_next_hop(topo: Topology, link_states: Union[Mapping[str, Any], Iterable[Any]],
                           node: str, dst: str) -> str:
    """
    Next hop on a minimum-hop path over links that are currently up.

    Args:
        topo: Topology
        link_states: LinkStates (or a mapping link id -> LinkState); a radio
            link is up when its effective rate is positive
        node: Deciding node
        dst: Destination node

    Returns:
        The neighbor id; ties go to the lexicographically smallest id

    Raises:
        NoRouteError: When ``dst`` is unreachable
    """
    states = link_states.values() if isinstance(link_states, Mapping) else link_states
    up = {s.link_id for s in states if s.effective_rate_mbps > 0}

    def is_live(a: str, b: str) -> bool:
        link = topo.link_between(a, b)
        return link is not None and link.link_id in up

    graph = live_graph(topo, is_live)
    distances = hop_distances(topo, graph, dst)
    choice = _pick_shortest(distances, graph.neighbors(node))
    if choice is None or node == dst:
        raise NoRouteError(f"no route from {node} to {dst}")
    return choice


class RoutingPolicy:
    """
    Interface between the network engine and a routing scheme.

    The engine attaches itself with ``attach``; it must expose ``topology``,
    ``is_live(a, b)`` and a ``link_version`` counter that changes whenever a
    link goes up or down.
    """

    name = "base"
    installs_flow_entries = False

    def __init__(self):
        self.network = None
        self.logger = logging.getLogger(__name__)

    def attach(self, network) -> None:
        self.network = network

    def set_round(self, round_idx: int) -> None:
        pass

    def next_hop(self, node: str, chunk, candidates: List[str], t: float, revisit: bool = False) -> str:
        raise NotImplementedError

    def on_reward(self, node: str, next_hop: str, chunk, delay_s: float, t: float) -> None:
        pass

    def on_chunk_lost(self, chunk) -> None:
        pass

    def on_flow_complete(self, flow_id: int) -> None:
        pass


class ShortestPathRouting(RoutingPolicy):
    """Minimum-hop routing over live links (batman-adv stand-in)."""

    name = "shortest_path"
    installs_flow_entries = True

    def __init__(self):
        super().__init__()
        self._version = None
        self._distances: Dict[str, Dict[str, int]] = {}

    def distances_to(self, dst: str) -> Dict[str, int]:
        if self.network.link_version != self._version:
            self._version = self.network.link_version
            self._distances.clear()
        distances = self._distances.get(dst)
        if distances is None:
            graph = live_graph(self.network.topology, self.network.is_live)
            distances = hop_distances(self.network.topology, graph, dst)
            self._distances[dst] = distances
        return distances

    def next_hop(self, node: str, chunk, candidates: List[str], t: float, revisit: bool = False) -> str:
        choice = _pick_shortest(self.distances_to(chunk.dst), candidates)
        if choice is None:
            raise NoRouteError(f"no route from {node} to {chunk.dst}")
        return choice


class QTable:
    """Action values of one router agent, in negative seconds."""

    def __init__(self, owner: str):
        self.owner = owner
        self.values: Dict[State, Dict[str, float]] = {}
        self.visits: Dict[State, Dict[str, int]] = {}

    def ensure(self, state: State, actions: Iterable[str], initial_q: float) -> Dict[str, float]:
        """Create missing entries for ``actions`` and return the state's row."""
        row = self.values.setdefault(state, {})
        counts = self.visits.setdefault(state, {})
        for action in actions:
            if action not in row:
                row[action] = float(initial_q)
                counts[action] = 0
        return row

    def q(self, state: State, action: str) -> float:
        return self.values[state][action]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QTable):
            return NotImplemented
        return self.owner == other.owner and self.values == other.values and self.visits == other.visits

    def __repr__(self) -> str:
        return f"QTable(owner={self.owner!r}, states={len(self.values)})"


def softmax_probabilities(q_values: Mapping[str, float], temperature: float) -> Dict[str, float]:
    """Boltzmann probabilities with max-subtraction for numerical stability."""
    if not q_values:
        raise RoutingError("cannot select from an empty action set")
    if not temperature > 0:
        raise RoutingError(f"temperature must be > 0, got {temperature}")
    actions = list(q_values)
    scaled = np.array([q_values[a] for a in actions], dtype=float) / temperature
    weights = np.exp(scaled - scaled.max())
    weights /= weights.sum()
    return {action: float(p) for action, p in zip(actions, weights)}


def softmax_select(q_values: Mapping[str, float], temperature: float, rng: np.random.Generator) -> str:
    """
    Sample an action with probability proportional to exp(q / temperature).

    Actions are considered in sorted order so the draw does not depend on
    dict insertion order.
    """
    ordered = {action: q_values[action] for action in sorted(q_values)}
    probabilities = softmax_probabilities(ordered, temperature)
    u = rng.random()
    cumulative = 0.0
    last = None
    for action, p in probabilities.items():
        cumulative += p
        last = action
        if u < cumulative:
            return action
    return last


def greedy_select(q_values: Mapping[str, float]) -> str:
    """Highest-valued action; ties go to the smallest id."""
    if not q_values:
        raise RoutingError("cannot select from an empty action set")
    return min(q_values, key=lambda a: (-q_values[a], a))


def q_update(qtable: QTable, state: State, action: str, reward: float, q_next: float,
             alpha: float, gamma: float) -> float:
    """
    On-policy update ``Q <- (1 - alpha) Q + alpha (r + gamma Q_next)``.

    ``q_next`` is the downstream agent's value for the action it actually
    took, or 0 when the chunk reached its destination.

    Returns:
        The new value

    Raises:
        RoutingError: If ``action`` has no entry for ``state``
    """
    row = qtable.values.get(state)
    if row is None or action not in row:
        raise RoutingError(f"agent {qtable.owner} has no entry for action {action} in state {state}")
    updated = (1.0 - alpha) * row[action] + alpha * (reward + gamma * q_next)
    row[action] = updated
    qtable.visits[state][action] += 1
    return updated


@dataclass
class PendingTransition:
    """A forwarding decision whose bootstrap value is not known yet."""
    node: str
    action: str
    reward: float


@dataclass
class RoutingCounters:
    reward_events: int = 0
    q_updates: int = 0
    skipped_updates: int = 0
    loop_events: int = 0
    fallback_hops: int = 0


class MultiAgentQRouting(RoutingPolicy):
    """
    One tabular agent per router, learning from negative per-hop delays.

    The downstream agent's value reaches the upstream agent through the
    chunk itself (``chunk.pending``), which stands in for the distributed
    exchange a real deployment would need.
    """

    installs_flow_entries = False

    def __init__(self, topology: Topology, config: Optional[PolicyConfig] = None,
                 streams: Optional[StreamFactory] = None, tables: Optional[Dict[str, QTable]] = None):
        super().__init__()
        self.topology = topology
        self.config = config or PolicyConfig()
        self.streams = streams or StreamFactory(topology.seed)
        self.tables: Dict[str, QTable] = tables if tables is not None else {}
        for router in topology.routers:
            self.tables.setdefault(router, QTable(router))
        self.fallback = ShortestPathRouting()
        self.counters = RoutingCounters()
        self.round_idx = 0
        self._flow_buffer: Dict[int, List[Tuple[str, State, str, float, float]]] = defaultdict(list)

    @property
    def name(self) -> str:
        return "marl_frozen" if self.frozen else "marl_online"

    @property
    def frozen(self) -> bool:
        return self.config.mode is PolicyMode.FROZEN

    def attach(self, network) -> None:
        super().attach(network)
        self.fallback.attach(network)

    def set_round(self, round_idx: int) -> None:
        self.round_idx = round_idx

    @property
    def temperature(self) -> float:
        if self.frozen:
            return self.config.final_temperature
        return self.config.temperature_at(self.round_idx)

    def next_hop(self, node: str, chunk, candidates: List[str], t: float, revisit: bool = False) -> str:
        state = (chunk.src, chunk.dst)
        table = self.tables[node]
        if self.frozen:
            # Unseen entries read as initial_q without being written.
            known = table.values.get(state, {})
            row = {a: known.get(a, self.config.initial_q) for a in candidates}
        else:
            row = table.ensure(state, candidates, self.config.initial_q)

        action = None
        if revisit:
            self.counters.loop_events += 1
            try:
                action = self.fallback.next_hop(node, chunk, candidates, t)
                self.counters.fallback_hops += 1
            except NoRouteError:
                action = None
        if action is None:
            live = {a: row[a] for a in candidates}
            if self.config.greedy:
                action = greedy_select(live)
            else:
                action = softmax_select(live, self.temperature, self.streams.stream("agent", node))

        pending = chunk.pending
        if pending is not None:
            chunk.pending = None
            reward = pending.reward - (self.config.loop_penalty_s if revisit else 0.0)
            self._learn(pending.node, state, pending.action, reward, row[action], chunk.flow_id)
        return action

    def on_reward(self, node: str, next_hop: str, chunk, delay_s: float, t: float) -> None:
        """
        Deliver the reward ``-delay_s`` for the hop ``node -> next_hop``.

        Terminal hops update immediately; otherwise the update waits for the
        downstream agent's next decision.
        """
        if node not in self.tables:
            return
        self.counters.reward_events += 1
        reward = -delay_s
        self.logger.debug("reward t=%.6f agent=%s action=%s state=%s->%s r=%.6g",
                          t, node, next_hop, chunk.src, chunk.dst, reward)
        if self.frozen:
            self.counters.skipped_updates += 1
            return
        if next_hop == chunk.dst:
            self._learn(node, (chunk.src, chunk.dst), next_hop, reward, 0.0, chunk.flow_id)
        else:
            chunk.pending = PendingTransition(node=node, action=next_hop, reward=reward)

    def on_chunk_lost(self, chunk) -> None:
        chunk.pending = None

    def _learn(self, node: str, state: State, action: str, reward: float, q_next: float, flow_id: int) -> None:
        if self.frozen:
            self.counters.skipped_updates += 1
            return
        if self.config.reward_granularity is RewardGranularity.FLOW:
            self._flow_buffer[flow_id].append((node, state, action, reward, q_next))
            return
        q_update(self.tables[node], state, action, reward, q_next, self.config.learning_rate, self.config.discount)
        self.counters.q_updates += 1

    def on_flow_complete(self, flow_id: int) -> None:
        """Apply one averaged update per (agent, state, action) seen in the flow."""
        samples = self._flow_buffer.pop(flow_id, None)
        if not samples:
            return
        grouped: Dict[Tuple[str, State, str], List[Tuple[float, float]]] = {}
        for node, state, action, reward, q_next in samples:
            grouped.setdefault((node, state, action), []).append((reward, q_next))
        for (node, state, action), values in grouped.items():
            reward = sum(v[0] for v in values) / len(values)
            q_next = sum(v[1] for v in values) / len(values)
            q_update(self.tables[node], state, action, reward, q_next,
                     self.config.learning_rate, self.config.discount)
            self.counters.q_updates += 1


def _state_key(state: State) -> str:
    return f"{state[0]}->{state[1]}"


def _parse_state_key(key: str) -> Optional[State]:
    src, sep, dst = key.partition("->")
    if not sep or not src or not dst or src == dst:
        return None
    return src, dst


def _parse_entry(entry: Any) -> Optional[Tuple[float, int]]:
    if not isinstance(entry, dict) or "q" not in entry:
        return None
    try:
        return float(entry["q"]), int(entry.get("visits", 0))
    except (TypeError, ValueError):
        return None


def export_qtables(tables: Mapping[str, QTable]) -> Dict[str, Any]:
    """Portable snapshot of every agent's table and visit counts."""
    agents = {}
    for node in sorted(tables):
        table = tables[node]
        states = {}
        for state in sorted(table.values):
            states[_state_key(state)] = {
                action: {"q": table.values[state][action], "visits": table.visits[state][action]}
                for action in sorted(table.values[state])
            }
        agents[node] = {"states": states}
    return {"version": SNAPSHOT_VERSION, "agents": agents}


def import_qtables(snapshot: Mapping[str, Any], topo: Topology) -> Dict[str, QTable]:
    """
    Rebuild agents from a snapshot, checking it against a topology.

    Raises:
        SnapshotError: Listing every problem found, not just the first:
            agents or neighbors the topology lacks, malformed state keys,
            unknown destinations and unreadable or non-finite entries
    """
    if snapshot.get("version") != SNAPSHOT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {snapshot.get('version')!r}")
    agents = snapshot.get("agents")
    if not isinstance(agents, dict):
        raise SnapshotError("snapshot has no 'agents' object")

    neighbors: Dict[str, set] = {node: set() for node in topo.node_ids()}
    for link in topo.links:
        neighbors[link.node_a].add(link.node_b)
        neighbors[link.node_b].add(link.node_a)
    for host, router in topo.attachments():
        neighbors[host].add(router)
        neighbors[router].add(host)

    mismatches: List[str] = []
    tables: Dict[str, QTable] = {}
    for node, payload in agents.items():
        if not topo.has_node(node) or not topo.is_router(node):
            mismatches.append(f"agent {node} is not a router in the topology")
            continue
        table = QTable(node)
        states = payload.get("states", {}) if isinstance(payload, dict) else None
        if not isinstance(states, dict):
            mismatches.append(f"agent {node}: 'states' is not an object")
            continue
        for key, actions in states.items():
            state = _parse_state_key(key)
            if state is None:
                mismatches.append(f"agent {node}: invalid state key {key!r}")
                continue
            unknown = [name for name in state if not topo.has_node(name)]
            if unknown:
                mismatches.append(f"agent {node}: state {key!r} names unknown node {', '.join(unknown)}")
                continue
            if not isinstance(actions, dict):
                mismatches.append(f"agent {node}: state {key!r} is not an object")
                continue
            for action, entry in actions.items():
                if action not in neighbors[node]:
                    mismatches.append(f"agent {node}: {action} is not a neighbor")
                    continue
                parsed = _parse_entry(entry)
                if parsed is None:
                    mismatches.append(f"agent {node}: unreadable entry for {key}/{action}")
                    continue
                value, visits = parsed
                if not math.isfinite(value):
                    mismatches.append(f"agent {node}: non-finite value for {key}/{action}")
                    continue
                table.values.setdefault(state, {})[action] = value
                table.visits.setdefault(state, {})[action] = visits
        tables[node] = table
    if mismatches:
        raise SnapshotError("snapshot does not match the topology", mismatches)
    return tables


def snapshot_to_json(snapshot: Mapping[str, Any]) -> str:
    # json writes floats with repr, which round-trips exactly.
    return json.dumps(snapshot, indent=2, sort_keys=True)


def write_snapshot(tables: Mapping[str, QTable], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(snapshot_to_json(export_qtables(tables)) + "\n", encoding="utf-8")
    return path


def load_snapshot(path: Union[str, Path]) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise SnapshotError(f"cannot read snapshot {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise SnapshotError(f"snapshot {path} is not valid JSON: {e.msg}") from e


def qtables_digest(tables: Mapping[str, QTable]) -> str:
    """SHA-256 over the canonical snapshot; equal digests mean identical tables."""
    return hashlib.sha256(snapshot_to_json(export_qtables(tables)).encode("utf-8")).hexdigest()
