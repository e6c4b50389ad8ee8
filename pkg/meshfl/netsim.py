"""
Deterministic discrete-event network engine.

Flows are cut into chunks which hop from node to node. Every directed link
owns a FIFO transmitter shaped by a token bucket whose rates come from the
link scheduler; every node owns a flow table consulted before the routing
policy. Per-hop delays (queueing plus transmission) are published to the
routing policy as its reward signal and kept as telemetry.
"""

import heapq
import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Deque, Dict, List, Mapping, NamedTuple, Optional, Tuple

from .exceptions import ConfigError, MeshFLError
from .link_scheduler import LinkScheduler, LinkState, SchedulerConfig
from .rng import StreamFactory
from .routing import NoRouteError, RoutingPolicy
from .schema import expect_mapping, get_bool, get_field, get_int, get_number, reject_unknown
from .topology import Topology

logger = logging.getLogger(__name__)

MAX_CHUNK_BYTES = 65536
MTU_BYTES = 1500
TOKEN_SLACK_BYTES = 1e-3


class NetsimError(MeshFLError):
    """Base exception for network engine errors."""
    pass


class UnknownNodeError(NetsimError):
    """Raised when a flow names a node that is not in the topology."""
    pass


class FlowIncompleteError(NetsimError):
    """Raised when a delay is requested for a flow that has not completed."""
    pass


class EventKind(str, Enum):
    CHUNK_ARRIVAL = "chunk_arrival"
    CHUNK_TX_COMPLETE = "chunk_tx_complete"
    LINK_READY = "link_ready"
    SCHEDULER_TICK = "scheduler_tick"
    FLOW_START = "flow_start"
    FLOW_COMPLETE = "flow_complete"
    ROUND_TIMER = "round_timer"


@dataclass(order=True)
class Event:
    time: float
    sequence: int
    kind: EventKind = field(compare=False)
    payload: Any = field(compare=False, default=None)


@dataclass(frozen=True)
class NetConfig:
    """Engine settings (scenario section ``netsim``)."""
    chunk_size_bytes: int = 1500
    queue_capacity: int = 100
    propagation_delay_s: float = 0.0
    link_propagation_delay_s: Mapping[str, float] = field(default_factory=dict)
    apply_loss: bool = True
    max_retransmits: int = 64
    min_retransmit_delay_s: float = 1e-4
    max_hops: Optional[int] = None

    def __post_init__(self):
        if not 1 <= self.chunk_size_bytes <= MAX_CHUNK_BYTES:
            raise ConfigError(f"chunk_size_bytes must be in [1, {MAX_CHUNK_BYTES}]", "$.netsim.chunk_size_bytes")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1", "$.netsim.queue_capacity")
        if not self.min_retransmit_delay_s > 0:
            raise ConfigError("min_retransmit_delay_s must be > 0", "$.netsim.min_retransmit_delay_s")
        if self.propagation_delay_s < 0 or any(v < 0 for v in self.link_propagation_delay_s.values()):
            raise ConfigError("propagation delays must be >= 0", "$.netsim")

    def propagation_for(self, link_id: Optional[str]) -> float:
        if link_id is None:
            return 0.0
        return self.link_propagation_delay_s.get(link_id, self.propagation_delay_s)

    @classmethod
    def from_dict(cls, data: Any, path: str = "$.netsim") -> "NetConfig":
        data = expect_mapping(data, path)
        reject_unknown(data, ("chunk_size_bytes", "queue_capacity", "propagation_delay_s",
                              "link_propagation_delay_s", "apply_loss", "max_retransmits", "min_retransmit_delay_s",
                              "max_hops"), path)
        per_link = expect_mapping(get_field(data, "link_propagation_delay_s", path, {}),
                                  f"{path}.link_propagation_delay_s")
        delays = {link_id: get_number(per_link, link_id, f"{path}.link_propagation_delay_s", minimum=0.0)
                  for link_id in per_link}
        return cls(
            chunk_size_bytes=get_int(data, "chunk_size_bytes", path, 1500, minimum=1),
            queue_capacity=get_int(data, "queue_capacity", path, 100, minimum=1),
            propagation_delay_s=get_number(data, "propagation_delay_s", path, 0.0, minimum=0.0),
            link_propagation_delay_s=delays,
            apply_loss=get_bool(data, "apply_loss", path, True),
            max_retransmits=get_int(data, "max_retransmits", path, 64, minimum=0),
            min_retransmit_delay_s=get_number(data, "min_retransmit_delay_s", path, 1e-4),
            max_hops=get_int(data, "max_hops", path, None, minimum=1, allow_none=True),
        )


class HopRecord(NamedTuple):
    node: str
    next_hop: str
    enqueued_at: float
    dequeued_at: float
    tx_delay_s: float

    @property
    def delay_s(self) -> float:
        """Queueing plus transmission (including propagation) on this hop."""
        return (self.dequeued_at - self.enqueued_at) + self.tx_delay_s


class DelaySample(NamedTuple):
    t: float
    node: str
    next_hop: str
    flow_src: str
    flow_dst: str
    delay_s: float


@dataclass(eq=False)
class Chunk:
    """A piece of a flow travelling through the mesh."""
    flow_id: int
    src: str
    dst: str
    size_bytes: int
    index: int
    of: int
    injected_at: float = 0.0
    attempt: int = 0
    hop_log: List[HopRecord] = field(default_factory=list)
    visited: set = field(default_factory=set)
    enqueued_at: float = 0.0
    current: Optional[HopRecord] = None
    gating: bool = False
    pending: Any = None
    held_since: Optional[float] = None

    def retransmission(self) -> "Chunk":
        return Chunk(flow_id=self.flow_id, src=self.src, dst=self.dst, size_bytes=self.size_bytes,
                     index=self.index, of=self.of, attempt=self.attempt + 1)


@dataclass
class Flow:
    flow_id: int
    src: str
    dst: str
    size_bytes: int
    start_time: float
    chunk_count: int
    reliable: bool = False
    label: Optional[str] = None
    on_complete: Optional[Callable[["Flow"], None]] = None
    next_index: int = 0
    delivered: int = 0
    retransmissions: int = 0
    completion_time: Optional[float] = None
    failed: bool = False
    last_chunk: Optional[Chunk] = None

    @property
    def complete(self) -> bool:
        return self.completion_time is not None


class FlowTable:
    """Per-node ``(flow src, flow dst) -> next hop`` entries."""

    def __init__(self, node: str, neighbors: List[str]):
        self.node = node
        self.neighbors = frozenset(neighbors)
        self.entries: Dict[Tuple[str, str], str] = {}

    def lookup(self, src: str, dst: str) -> Optional[str]:
        return self.entries.get((src, dst))

    def install(self, src: str, dst: str, next_hop: str) -> None:
        if next_hop == self.node or next_hop not in self.neighbors:
            raise NetsimError(f"{self.node}: flow entry {src}->{dst} must point at a neighbor, got {next_hop}")
        self.entries[(src, dst)] = next_hop

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class LinkQueue:
    """
    FIFO transmitter of one directed link, shaped by a token bucket.

    Chunks are serialized at the line rate (the scheduler's nominal PHY
    rate). Tokens refill at the shaped rate up to ``bucket_bytes``, and a
    chunk may only start once the bucket holds its size. After an idle
    period a burst leaves at line rate; sustained traffic settles at the
    shaped rate. With equal rates the bucket never holds a chunk back.
    """
    src: str
    dst: str
    link_id: Optional[str]
    ideal: bool = False
    rate_mbps: float = 0.0
    line_rate_mbps: float = 0.0
    loss: float = 0.0
    bucket_bytes: float = 2 * MTU_BYTES
    tokens: float = 2 * MTU_BYTES
    tokens_at: float = 0.0
    fifo: Deque[Chunk] = field(default_factory=deque)
    in_service: Optional[Chunk] = None
    busy_until: float = 0.0
    wake_id: int = 0
    wake_at: Optional[float] = None
    drops: int = 0
    window_bytes: int = 0

    @property
    def directed_id(self) -> str:
        return f"{self.src}->{self.dst}"

    @property
    def live(self) -> bool:
        return self.ideal or self.rate_mbps > 0

    def tx_delay(self, size_bytes: int) -> float:
        if self.ideal:
            return 0.0
        return size_bytes * 8 / (max(self.line_rate_mbps, self.rate_mbps) * 1e6)

    def refill(self, now: float) -> None:
        """Credit tokens earned at the shaped rate since the last refill."""
        if now > self.tokens_at:
            earned = self.rate_mbps * 1e6 / 8 * (now - self.tokens_at)
            self.tokens = min(self.bucket_bytes, self.tokens + earned)
        self.tokens_at = now

    def token_wait(self, size_bytes: int) -> float:
        """Seconds until the bucket holds ``size_bytes`` (0 when it already does)."""
        missing = size_bytes - self.tokens
        if missing <= TOKEN_SLACK_BYTES:
            return 0.0
        return missing * 8 / (self.rate_mbps * 1e6)


@dataclass
class NetCounters:
    injected: int = 0
    delivered: int = 0
    dropped: int = 0
    retransmitted: int = 0
    routing_queries: int = 0
    table_hits: int = 0

    def to_dict(self) -> Dict[str, int]:
        return dict(self.__dict__)


class NetworkEngine:
    """
    Single-threaded event loop owning every piece of mutable network state.

    Example:
        >>> engine = NetworkEngine(topology, ShortestPathRouting())
        >>> engine.set_link_rate("A", "B", 39.0)
        >>> flow = engine.start_flow("A", "B", 1500, 0.0)
        >>> engine.run_until(1.0)
    """

    def __init__(self, topology: Topology, router: RoutingPolicy, config: Optional[NetConfig] = None,
                 streams: Optional[StreamFactory] = None, scheduler: Optional[LinkScheduler] = None,
                 burst_bytes: Optional[int] = None):
        """
        Initialize the engine.

        Args:
            topology: Validated topology
            router: Routing policy consulted on flow-table misses
            config: Engine settings
            streams: Random streams (chunk loss); defaults to the topology seed
            scheduler: When given, ticks run every scheduler period from t=0;
                otherwise link rates are set with ``set_link_rate``
            burst_bytes: Token-bucket depth of every radio link; defaults to
                the scheduler's ``burst_mtus`` MTUs. A bucket never holds
                less than one chunk.
        """
        self.topology = topology
        self.router = router
        self.config = config or NetConfig()
        self.streams = streams or StreamFactory(topology.seed)
        self.scheduler = scheduler
        self.logger = logging.getLogger(__name__)
        self.max_hops = self.config.max_hops or 4 * len(topology.nodes)
        if burst_bytes is None:
            if scheduler is not None:
                burst_bytes = scheduler.burst_bytes(MTU_BYTES)
            else:
                burst_bytes = SchedulerConfig().burst_mtus * MTU_BYTES
        if burst_bytes <= 0:
            raise NetsimError(f"burst_bytes must be > 0, got {burst_bytes}")
        self.bucket_bytes = max(burst_bytes, self.config.chunk_size_bytes)

        self.now = 0.0
        self._heap: List[Event] = []
        self._sequence = itertools.count()
        self._handlers = {
            EventKind.CHUNK_ARRIVAL: self._on_arrival,
            EventKind.CHUNK_TX_COMPLETE: self._on_tx_complete,
            EventKind.LINK_READY: self._on_link_ready,
            EventKind.SCHEDULER_TICK: self._on_scheduler_tick,
            EventKind.FLOW_START: self._on_flow_start,
            EventKind.FLOW_COMPLETE: self._on_flow_complete,
            EventKind.ROUND_TIMER: self._on_timer,
        }

        self.queues: Dict[Tuple[str, str], LinkQueue] = {}
        self._link_queues: Dict[str, Tuple[LinkQueue, LinkQueue]] = {}
        for link in topology.links:
            forward = LinkQueue(link.node_a, link.node_b, link.link_id, bucket_bytes=self.bucket_bytes,
                                tokens=self.bucket_bytes)
            backward = LinkQueue(link.node_b, link.node_a, link.link_id, bucket_bytes=self.bucket_bytes,
                                 tokens=self.bucket_bytes)
            self.queues[(link.node_a, link.node_b)] = forward
            self.queues[(link.node_b, link.node_a)] = backward
            self._link_queues[link.link_id] = (forward, backward)
        for host, router_id in topology.attachments():
            self.queues[(host, router_id)] = LinkQueue(host, router_id, None, ideal=True)
            self.queues[(router_id, host)] = LinkQueue(router_id, host, None, ideal=True)

        neighbors: Dict[str, List[str]] = {node_id: [] for node_id in topology.node_ids()}
        for a, b in self.queues:
            neighbors[a].append(b)
        self.neighbors = {node_id: sorted(nbrs) for node_id, nbrs in neighbors.items()}
        self.flow_tables = {node_id: FlowTable(node_id, nbrs) for node_id, nbrs in self.neighbors.items()}

        self.link_version = 0
        self.flows: Dict[int, Flow] = {}
        self._flow_ids = itertools.count()
        self.counters = NetCounters()
        self.events: List[Dict[str, Any]] = []
        self.delay_samples: List[DelaySample] = []
        self.held: List[Tuple[str, Chunk]] = []
        self._warned_flows: set = set()
        self._scheduler_events_seen = 0
        self._tick_index = 0

        router.attach(self)
        if scheduler is not None:
            self._schedule(0.0, EventKind.SCHEDULER_TICK)

    def _schedule(self, time: float, kind: EventKind, payload: Any = None) -> Event:
        if time < self.now:
            raise NetsimError(f"cannot schedule {kind.value} at {time} before the clock ({self.now})")
        event = Event(time, next(self._sequence), kind, payload)
        heapq.heappush(self._heap, event)
        return event

    def schedule_timer(self, time: float, callback: Callable[[float], None], label: str = "") -> Event:
        """Run ``callback(now)`` at ``time`` in event order."""
        return self._schedule(time, EventKind.ROUND_TIMER, (callback, label))

    def record(self, kind: str, **fields: Any) -> None:
        """Append a significant event to the structured log."""
        entry = {"t": self.now, "kind": kind}
        entry.update(fields)
        self.events.append(entry)

    def run_until(self, t_end: float, stop: Optional[Callable[[], bool]] = None) -> List[Dict[str, Any]]:
        """
        Process events in (time, sequence) order up to ``t_end``.

        Args:
            t_end: Horizon, not earlier than the clock
            stop: Checked after every event; processing ends when it returns True

        Returns:
            The structured event log
        """
        if t_end < self.now:
            raise NetsimError(f"t_end {t_end} is before the clock ({self.now})")
        while self._heap and self._heap[0].time <= t_end:
            event = heapq.heappop(self._heap)
            self.now = event.time
            self._handlers[event.kind](event.payload)
            if stop is not None and stop():
                return self.events
        self.now = t_end
        return self.events

    @property
    def pending_events(self) -> int:
        return len(self._heap)

    def is_live(self, a: str, b: str) -> bool:
        queue = self.queues.get((a, b))
        return queue is not None and queue.live

    def _set_rate(self, link_id: str, rate_mbps: float, loss: float, line_rate_mbps: float) -> bool:
        changed = False
        for queue in self._link_queues[link_id]:
            queue.refill(self.now)
            was_live = queue.live
            queue.rate_mbps = rate_mbps
            queue.line_rate_mbps = max(line_rate_mbps, rate_mbps)
            queue.loss = loss
            changed |= was_live != queue.live
        return changed

    def _links_changed(self) -> None:
        self.link_version += 1
        for table in self.flow_tables.values():
            table.clear()
        self._release_held()

    def _release_held(self) -> None:
        held, self.held = self.held, []
        for node, chunk in held:
            self.forward_chunk(node, chunk, self.now)

    def _restart_idle(self) -> None:
        for key in sorted(self.queues):
            self._try_start(self.queues[key])

    def apply_link_states(self, states: List[LinkState]) -> None:
        """Install one scheduler tick's rates on every link at once."""
        changed = False
        for state in states:
            if state.link_id not in self._link_queues:
                raise NetsimError(f"unknown link {state.link_id}")
            changed |= self._set_rate(state.link_id, state.effective_rate_mbps, state.loss,
                                      state.nominal_rate_mbps)
        if changed:
            self._links_changed()
        self._restart_idle()

    def set_link_rate(self, a: str, b: str, rate_mbps: float, loss: float = 0.0,
                      line_rate_mbps: Optional[float] = None) -> None:
        """
        Set the rate of the radio link between two nodes (both directions).

        Args:
            a: One endpoint
            b: The other endpoint
            rate_mbps: Shaped rate; 0 takes the link down
            loss: Chunk loss probability
            line_rate_mbps: Serialization rate of a burst; defaults to ``rate_mbps``
        """
        link = self.topology.link_between(a, b)
        if link is None:
            raise NetsimError(f"no radio link between {a} and {b}")
        line_rate = rate_mbps if line_rate_mbps is None else line_rate_mbps
        if rate_mbps < 0 or line_rate < rate_mbps or not 0.0 <= loss <= 1.0:
            raise NetsimError(f"invalid rate {rate_mbps} (line {line_rate}) or loss {loss} for {link.link_id}")
        if self._set_rate(link.link_id, rate_mbps, loss, line_rate):
            self._links_changed()
        self._restart_idle()

    def _on_scheduler_tick(self, _payload: Any) -> None:
        active = frozenset(q.link_id for q in self.queues.values() if not q.ideal and q.window_bytes > 0)
        states = self.scheduler.schedule_tick(self.now, active)
        self.apply_link_states(states)
        for queue in self.queues.values():
            queue.window_bytes = 0
        for entry in self.scheduler.events[self._scheduler_events_seen:]:
            self.events.append(dict(entry))
        self._scheduler_events_seen = len(self.scheduler.events)
        self.record("scheduler_tick", links_up=sum(1 for s in states if s.is_up))
        self._tick_index += 1
        self._schedule(self._tick_index * self.scheduler.config.period_s, EventKind.SCHEDULER_TICK)

    def start_flow(self, src: str, dst: str, size_bytes: int, t: Optional[float] = None, reliable: bool = False,
                   label: Optional[str] = None, on_complete: Optional[Callable[[Flow], None]] = None) -> int:
        """
        Register a flow and schedule its first chunk.

        Args:
            src: Source node
            dst: Destination node
            size_bytes: Payload size, > 0
            t: Start time (defaults to the clock)
            reliable: Retransmit lost chunks instead of failing the flow
            label: Free text carried into the event log
            on_complete: Called with the Flow when its last chunk arrives

        Returns:
            The flow id
        """
        for node_id in (src, dst):
            if not self.topology.has_node(node_id):
                raise UnknownNodeError(f"unknown node {node_id}")
        if src == dst:
            raise NetsimError(f"flow source and destination are both {src}")
        if size_bytes <= 0:
            raise NetsimError(f"flow size must be > 0, got {size_bytes}")
        t = self.now if t is None else t
        flow = Flow(flow_id=next(self._flow_ids), src=src, dst=dst, size_bytes=int(size_bytes), start_time=t,
                    chunk_count=math.ceil(size_bytes / self.config.chunk_size_bytes), reliable=reliable,
                    label=label, on_complete=on_complete)
        self.flows[flow.flow_id] = flow
        self._schedule(t, EventKind.FLOW_START, flow.flow_id)
        return flow.flow_id

    def _on_flow_start(self, flow_id: int) -> None:
        flow = self.flows[flow_id]
        self.record("flow_start", flow=flow_id, src=flow.src, dst=flow.dst, size_bytes=flow.size_bytes,
                    chunks=flow.chunk_count, label=flow.label)
        self._inject_next(flow)

    def _inject_next(self, flow: Flow) -> None:
        if flow.failed or flow.next_index >= flow.chunk_count:
            return
        index = flow.next_index
        flow.next_index += 1
        size = min(self.config.chunk_size_bytes, flow.size_bytes - index * self.config.chunk_size_bytes)
        chunk = Chunk(flow_id=flow.flow_id, src=flow.src, dst=flow.dst, size_bytes=size, index=index,
                      of=flow.chunk_count, gating=True)
        self._inject(chunk)

    def _inject(self, chunk: Chunk) -> None:
        chunk.injected_at = self.now
        self.counters.injected += 1
        self.forward_chunk(chunk.src, chunk, self.now)

    def _release_gate(self, chunk: Chunk) -> None:
        if chunk.gating:
            chunk.gating = False
            self._inject_next(self.flows[chunk.flow_id])

    def candidates(self, node: str, dst: str) -> List[str]:
        """Live next hops a node may choose from for destination ``dst``."""
        live = [n for n in self.neighbors[node] if self.queues[(node, n)].live]
        if dst in live:
            return [dst]
        return [n for n in live if self.topology.is_router(n)]

    def _next_hop(self, node: str, chunk: Chunk, t: float, revisit: bool) -> Optional[str]:
        candidates = self.candidates(node, chunk.dst)
        if not candidates:
            return None
        if not self.topology.is_router(node):
            return candidates[0]
        table = self.flow_tables[node]
        entry = table.lookup(chunk.src, chunk.dst)
        if entry is not None and entry in candidates:
            self.counters.table_hits += 1
            return entry
        self.counters.routing_queries += 1
        try:
            next_hop = self.router.next_hop(node, chunk, candidates, t, revisit)
        except NoRouteError:
            return None
        if self.router.installs_flow_entries:
            table.install(chunk.src, chunk.dst, next_hop)
        return next_hop

    def forward_chunk(self, node: str, chunk: Chunk, t: float) -> Optional[str]:
        """
        Pick the next hop for a chunk held by ``node`` and enqueue it.

        A chunk of a reliable flow that finds no live next hop is held at
        ``node`` until link liveness next changes; other chunks are dropped.

        Returns:
            The next hop, or None when the chunk was held or dropped
        """
        if node == chunk.dst:
            raise NetsimError(f"chunk of flow {chunk.flow_id} is already at its destination {node}")
        if len(chunk.hop_log) >= self.max_hops:
            self._drop(chunk, node, "ttl_expired")
            return None
        revisit = node in chunk.visited
        next_hop = self._next_hop(node, chunk, t, revisit)
        if next_hop is None:
            if self.flows[chunk.flow_id].reliable:
                self._hold(node, chunk, t)
            else:
                self._drop(chunk, node, "no_route")
            return None
        chunk.visited.add(node)
        queue = self.queues[(node, next_hop)]
        if len(queue.fifo) >= self.config.queue_capacity:
            queue.drops += 1
            self._drop(chunk, node, "queue_overflow")
            return None
        chunk.enqueued_at = t if chunk.held_since is None else chunk.held_since
        chunk.held_since = None
        queue.fifo.append(chunk)
        self._try_start(queue)
        return next_hop

    def _hold(self, node: str, chunk: Chunk, t: float) -> None:
        if chunk.held_since is None:
            chunk.held_since = t
            self.record("hold", flow=chunk.flow_id, node=node, chunk=chunk.index)
        self.held.append((node, chunk))

    def _try_start(self, queue: LinkQueue) -> None:
        if queue.in_service is not None or not queue.fifo or not queue.live:
            return
        chunk = queue.fifo[0]
        if not queue.ideal:
            queue.refill(self.now)
            wait = queue.token_wait(chunk.size_bytes)
            if wait > 0:
                self._wake_at(queue, self.now + wait)
                return
            queue.tokens = max(0.0, queue.tokens - chunk.size_bytes)
        queue.wake_at = None
        queue.fifo.popleft()
        tx = queue.tx_delay(chunk.size_bytes)
        propagation = self.config.propagation_for(queue.link_id)
        chunk.current = HopRecord(queue.src, queue.dst, chunk.enqueued_at, self.now, tx + propagation)
        queue.in_service = chunk
        queue.busy_until = self.now + tx
        queue.window_bytes += chunk.size_bytes
        self._schedule(self.now + tx, EventKind.CHUNK_TX_COMPLETE, (queue.src, queue.dst))

    def _wake_at(self, queue: LinkQueue, time: float) -> None:
        if queue.wake_at == time:
            return
        queue.wake_id += 1
        queue.wake_at = time
        self._schedule(time, EventKind.LINK_READY, ((queue.src, queue.dst), queue.wake_id))

    def _on_link_ready(self, payload: Tuple[Tuple[str, str], int]) -> None:
        key, wake_id = payload
        queue = self.queues[key]
        if wake_id != queue.wake_id:
            return
        queue.wake_at = None
        self._try_start(queue)

    def transmit(self, queue: LinkQueue) -> None:
        """Start the head-of-line chunk once the link is idle, up and holds enough tokens."""
        self._try_start(queue)

    def _on_tx_complete(self, key: Tuple[str, str]) -> None:
        queue = self.queues[key]
        chunk = queue.in_service
        queue.in_service = None
        hop = chunk.current
        chunk.current = None
        chunk.hop_log.append(hop)

        lost = False
        if not queue.ideal and self.config.apply_loss and queue.loss > 0:
            lost = self.streams.stream("link", queue.src, queue.dst, "loss").random() < queue.loss
        if not queue.ideal:
            self._release_gate(chunk)

        if lost:
            self._drop(chunk, queue.src, "loss")
        else:
            sample = DelaySample(self.now, queue.src, queue.dst, chunk.src, chunk.dst, hop.delay_s)
            self.delay_samples.append(sample)
            self.router.on_reward(queue.src, queue.dst, chunk, hop.delay_s, self.now)
            propagation = self.config.propagation_for(queue.link_id)
            if propagation > 0:
                self._schedule(self.now + propagation, EventKind.CHUNK_ARRIVAL, (queue.dst, chunk))
            else:
                self._arrive(queue.dst, chunk)
        self._try_start(queue)

    def _on_arrival(self, payload: Tuple[Optional[str], Chunk]) -> None:
        node, chunk = payload
        if node is None:
            self._inject(chunk)
        else:
            self._arrive(node, chunk)

    def _arrive(self, node: str, chunk: Chunk) -> None:
        if node == chunk.dst:
            self._deliver(chunk)
        else:
            self.forward_chunk(node, chunk, self.now)

    def _deliver(self, chunk: Chunk) -> None:
        self.counters.delivered += 1
        flow = self.flows[chunk.flow_id]
        flow.delivered += 1
        flow.last_chunk = chunk
        self._release_gate(chunk)
        if flow.delivered == flow.chunk_count and not flow.failed:
            flow.completion_time = self.now
            self._schedule(self.now, EventKind.FLOW_COMPLETE, flow.flow_id)

    def _drop(self, chunk: Chunk, node: str, reason: str) -> None:
        self.counters.dropped += 1
        self.router.on_chunk_lost(chunk)
        flow = self.flows[chunk.flow_id]
        self.record("drop", flow=flow.flow_id, node=node, chunk=chunk.index, reason=reason)
        if flow.flow_id not in self._warned_flows:
            self._warned_flows.add(flow.flow_id)
            self.logger.warning("t=%.6f dropped chunk %d of flow %d at %s (%s)",
                                self.now, chunk.index, flow.flow_id, node, reason)

        if flow.reliable and chunk.attempt < self.config.max_retransmits:
            retry = chunk.retransmission()
            retry.gating = chunk.gating
            chunk.gating = False
            flow.retransmissions += 1
            self.counters.retransmitted += 1
            at = self.now + max(self.now - chunk.injected_at, self.config.min_retransmit_delay_s)
            self.record("retransmit", flow=flow.flow_id, chunk=chunk.index, attempt=retry.attempt, at=at)
            self._schedule(at, EventKind.CHUNK_ARRIVAL, (None, retry))
            return
        if not flow.failed:
            flow.failed = True
            self.record("flow_failed", flow=flow.flow_id, src=flow.src, dst=flow.dst, label=flow.label)
            self.logger.warning("flow %d (%s -> %s) failed", flow.flow_id, flow.src, flow.dst)
        chunk.gating = False

    def _on_flow_complete(self, flow_id: int) -> None:
        flow = self.flows[flow_id]
        self.router.on_flow_complete(flow_id)
        self.record("flow_complete", flow=flow_id, src=flow.src, dst=flow.dst, label=flow.label,
                    delay_s=flow.completion_time - flow.start_time, retransmissions=flow.retransmissions)
        if flow.on_complete is not None:
            flow.on_complete(flow)

    def _on_timer(self, payload: Tuple[Callable[[float], None], str]) -> None:
        callback, _label = payload
        callback(self.now)

    def end_to_end_delay(self, flow_id: int) -> float:
        """
        Completion time minus start time of a flow.

        Raises:
            FlowIncompleteError: If the flow failed or is still in transit
        """
        flow = self.flows.get(flow_id)
        if flow is None:
            raise NetsimError(f"unknown flow {flow_id}")
        if not flow.complete:
            state = "failed" if flow.failed else "in transit"
            raise FlowIncompleteError(f"flow {flow_id} is {state}")
        return flow.completion_time - flow.start_time

    def hop_log_reconstruction(self, flow_id: int) -> float:
        """
        End-to-end delay rebuilt from telemetry alone.

        Source-side injection delay of the last delivered chunk plus the sum
        of its per-hop delays.
        """
        flow = self.flows.get(flow_id)
        if flow is None or not flow.complete:
            raise FlowIncompleteError(f"flow {flow_id} has not completed")
        last = flow.last_chunk
        return (last.injected_at - flow.start_time) + sum(hop.delay_s for hop in last.hop_log)

    def chunks_in_flight(self) -> int:
        """Chunks currently held at nodes, in queues, on the air or awaiting arrival."""
        count = len(self.held)
        for queue in self.queues.values():
            count += len(queue.fifo) + (queue.in_service is not None)
        for event in self._heap:
            if event.kind is EventKind.CHUNK_ARRIVAL and event.payload[0] is not None:
                count += 1
        return count

    def conservation_holds(self) -> bool:
        """Injected chunks are delivered, dropped or still in flight."""
        c = self.counters
        return c.injected == c.delivered + c.dropped + self.chunks_in_flight()
