"""
Periodic link scheduling.

Every scheduler period the conditions of each radio link are re-evaluated
(analytic model or trace replay, per interface), converted to an 802.11ac
MCS index and PHY rate, reduced by airtime sharing and handed to the network
engine as one atomic batch of ``LinkState`` objects. The same loop, pointed
at a ``TraceWriter``, produces trace files.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

from .channel import (LinkCondition, ReplayTrace, ShadowingMode, TraceWriter, communication_range_m,
                      count_contenders, effective_rate, link_condition, link_tx_power_dbm, load_trace,
                      write_trace_row)
from .exceptions import ConfigError, MeshFLError
from .rng import StreamFactory
from .schema import expect_mapping, get_enum, get_int, get_number, get_str, reject_unknown
from .topology import LinkSpec, Topology

logger = logging.getLogger(__name__)

DEFAULT_MCS_TABLE = "mcs_80211ac_20mhz_1ss_lgi.csv"
MCS_HEADER = ("mcs_index", "min_snr_db", "rate_mbps")
DOWN = -1


class SchedulerError(MeshFLError):
    """Base exception for link scheduling errors."""
    pass


class McsTableError(SchedulerError, ConfigError):
    """Raised when an MCS table is malformed."""
    pass


class ReplayField(str, Enum):
    """Trace column that drives MCS selection during replay."""
    RSSI = "rssi"
    MCS = "mcs"


@dataclass(frozen=True)
class SchedulerConfig:
    """Link scheduler settings (scenario section ``scheduler``)."""
    period_s: float = 5.0
    mcs_table: Optional[str] = None
    replay_field: ReplayField = ReplayField.RSSI
    burst_mtus: int = 2

    @classmethod
    def from_dict(cls, data: Any, path: str = "$.scheduler") -> "SchedulerConfig":
        data = expect_mapping(data, path)
        reject_unknown(data, ("period_s", "mcs_table", "replay_field", "burst_mtus"), path)
        period = get_number(data, "period_s", path, 5.0)
        if period <= 0:
            raise ConfigError("period_s must be > 0", f"{path}.period_s")
        return cls(
            period_s=period,
            mcs_table=get_str(data, "mcs_table", path, None),
            replay_field=get_enum(data, "replay_field", path, ReplayField, ReplayField.RSSI),
            burst_mtus=get_int(data, "burst_mtus", path, 2, minimum=1),
        )


@dataclass(frozen=True)
class McsEntry:
    mcs_index: int
    min_snr_db: float
    rate_mbps: float


@dataclass(frozen=True)
class McsTable:
    """SNR thresholds and PHY rates per MCS index."""
    entries: Tuple[McsEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise McsTableError("MCS table is empty", "$.scheduler.mcs_table")
        for position, entry in enumerate(self.entries):
            if entry.mcs_index != position:
                raise McsTableError(f"MCS indices must be 0..{len(self.entries) - 1} in order",
                                    "$.scheduler.mcs_table")
            if entry.rate_mbps <= 0:
                raise McsTableError(f"MCS {entry.mcs_index} rate must be > 0", "$.scheduler.mcs_table")
        for lower, upper in zip(self.entries, self.entries[1:]):
            if upper.min_snr_db <= lower.min_snr_db:
                raise McsTableError(f"min_snr_db must increase strictly (MCS {upper.mcs_index})",
                                    "$.scheduler.mcs_table")
            if upper.rate_mbps <= lower.rate_mbps:
                raise McsTableError(f"rate_mbps must increase strictly (MCS {upper.mcs_index})",
                                    "$.scheduler.mcs_table")

    @property
    def mcs0_snr_db(self) -> float:
        return self.entries[0].min_snr_db

    @property
    def max_index(self) -> int:
        return len(self.entries) - 1

    @classmethod
    def from_rows(cls, rows: Iterable[Tuple[Any, Any, Any]]) -> "McsTable":
        return cls(tuple(McsEntry(int(i), float(snr), float(rate)) for i, snr, rate in rows))

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "McsTable":
        """Load a ``mcs_index,min_snr_db,rate_mbps`` CSV file."""
        try:
            with open(path, newline="", encoding="utf-8") as handle:
                return cls._read(handle, str(path))
        except OSError as e:
            raise McsTableError(f"cannot read MCS table {path}: {e.strerror}", "$.scheduler.mcs_table") from e

    @classmethod
    def default(cls) -> "McsTable":
        """802.11ac, 20 MHz, one spatial stream, long guard interval."""
        source = resources.files("meshfl") / "data" / DEFAULT_MCS_TABLE
        with source.open("r", encoding="utf-8", newline="") as handle:
            return cls._read(handle, DEFAULT_MCS_TABLE)

    @classmethod
    def _read(cls, handle, label: str) -> "McsTable":
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MCS_HEADER:
            raise McsTableError(f"{label}: expected header {','.join(MCS_HEADER)}", "$.scheduler.mcs_table")
        rows = [row for row in reader if row]
        try:
            return cls.from_rows((r[0], r[1], r[2]) for r in rows)
        except (ValueError, IndexError) as e:
            raise McsTableError(f"{label}: malformed row ({e})", "$.scheduler.mcs_table") from e


def select_mcs(table: McsTable, snr_db: float) -> int:
    """Highest MCS whose threshold is at or below ``snr_db``; -1 when none is."""
    chosen = DOWN
    for entry in table.entries:
        if entry.min_snr_db <= snr_db:
            chosen = entry.mcs_index
        else:
            break
    return chosen


def rate_for_mcs(table: McsTable, mcs_index: int) -> float:
    """
    PHY rate of an MCS index in Mbps (0 for a down link).

    Raises:
        SchedulerError: If the index is outside the table and not -1
    """
    if mcs_index == DOWN:
        return 0.0
    if not 0 <= mcs_index <= table.max_index:
        raise SchedulerError(f"MCS index {mcs_index} is outside the table (0..{table.max_index})")
    return table.entries[mcs_index].rate_mbps


@dataclass(frozen=True)
class LinkState:
    """Scheduler output for one link at one tick."""
    link_id: str
    snr_db: float
    mcs_index: int
    nominal_rate_mbps: float
    effective_rate_mbps: float
    loss: float
    updated_at: float
    rssi_dbm: float = math.nan
    contenders: int = 1
    source: str = "analytic"

    def __post_init__(self):
        if self.effective_rate_mbps > self.nominal_rate_mbps:
            raise SchedulerError(f"{self.link_id}: effective rate exceeds nominal rate")
        if (self.mcs_index == DOWN) != (self.effective_rate_mbps == 0.0):
            raise SchedulerError(f"{self.link_id}: MCS -1 must coincide with a zero effective rate")

    @property
    def is_up(self) -> bool:
        return self.mcs_index != DOWN


@dataclass
class ScheduleTimeline:
    """LinkStates of every tick of a scheduler run, in tick order."""
    ticks: List[float] = field(default_factory=list)
    states: Dict[float, List[LinkState]] = field(default_factory=dict)

    def append(self, t: float, states: List[LinkState]) -> None:
        self.ticks.append(t)
        self.states[t] = states

    def states_at(self, t: float) -> List[LinkState]:
        return self.states[t]

    def signature(self) -> List[Tuple[float, str, int, float]]:
        """``(tick, link, mcs, effective rate)`` tuples, for exact comparisons."""
        return [(t, s.link_id, s.mcs_index, s.effective_rate_mbps) for t in self.ticks for s in self.states[t]]


class LinkScheduler:
    """
    Converts channel conditions into per-link rates every period.

    Interfaces with a ``trace_file`` are replayed; every other link follows
    the analytic channel model. Each link draws shadowing from its own seeded
    stream, so a tick's result does not depend on link evaluation order.
    """

    def __init__(self, topology: Topology, config: Optional[SchedulerConfig] = None,
                 streams: Optional[StreamFactory] = None, mcs_table: Optional[McsTable] = None,
                 base_dir: Optional[Union[str, Path]] = None):
        """
        Initialize the scheduler.

        Args:
            topology: Validated topology
            config: Scheduler settings
            streams: Random streams; defaults to one seeded with the topology seed
            mcs_table: Overrides the configured or built-in table
            base_dir: Directory that relative trace/table paths resolve against
        """
        self.topology = topology
        self.config = config or SchedulerConfig()
        self.streams = streams or StreamFactory(topology.seed)
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.logger = logging.getLogger(__name__)

        if mcs_table is not None:
            self.mcs_table = mcs_table
        elif self.config.mcs_table:
            self.mcs_table = McsTable.from_csv(self._resolve(self.config.mcs_table))
        else:
            self.mcs_table = McsTable.default()

        self.traces: Dict[Tuple[str, str], ReplayTrace] = {}
        for node in topology.nodes:
            for radio in node.interfaces:
                if radio.trace_file:
                    label = f"{node.id}.{radio.iface_id}"
                    self.traces[(node.id, radio.iface_id)] = load_trace(self._resolve(radio.trace_file), label)

        model = topology.channel_model
        self._interference_range: Dict[str, float] = {}
        for link in topology.links:
            comm = communication_range_m(model, link_tx_power_dbm(topology, link), self.mcs_table.mcs0_snr_db)
            configured = topology.interference_model.range_m
            self._interference_range[link.link_id] = configured if configured is not None else 2.0 * comm

        self.exhausted: List[str] = []
        self.events: List[Dict[str, Any]] = []
        self.last_conditions: Dict[str, LinkCondition] = {}

    def _resolve(self, path: str) -> Path:
        candidate = Path(path)
        return candidate if candidate.is_absolute() else self.base_dir / candidate

    def replay_trace_for(self, link: LinkSpec) -> Optional[Tuple[Tuple[str, str], ReplayTrace]]:
        """Trace driving a link: endpoint A's when present, else endpoint B's."""
        for key in link.interfaces():
            if key in self.traces:
                return key, self.traces[key]
        return None

    def check_tick(self, t: float) -> None:
        ticks = t / self.config.period_s
        if t < 0 or abs(ticks - round(ticks)) > 1e-9:
            raise SchedulerError(f"t={t} is not a multiple of the {self.config.period_s} s scheduler period")

    def schedule_tick(self, t: float, active_links: FrozenSet[str] = frozenset()) -> List[LinkState]:
        """
        Compute the LinkState of every radio link at tick ``t``.

        Args:
            t: Simulation time, a multiple of the period
            active_links: Links that carried traffic in the previous window

        Returns:
            One LinkState per topology link, in topology order
        """
        self.check_tick(t)
        return [self._link_state(link, t, active_links) for link in self.topology.links]

    def _link_state(self, link: LinkSpec, t: float, active_links: FrozenSet[str]) -> LinkState:
        replay = self.replay_trace_for(link)
        if replay is not None:
            (node_id, iface_id), trace = replay
            record, exhausted = trace.at(t)
            label = f"{node_id}.{iface_id}"
            if exhausted and label not in self.exhausted:
                self.exhausted.append(label)
                self.events.append({"t": t, "kind": "trace_exhausted", "iface": label})
                self.logger.warning("trace for %s exhausted at t=%s; holding its last record", label, t)
            snr = record.rssi_dbm - self.topology.channel_model.noise_floor_dbm
            if self.config.replay_field is ReplayField.MCS:
                mcs = record.mcs_index
                rate_for_mcs(self.mcs_table, mcs)
            else:
                mcs = select_mcs(self.mcs_table, snr)
            condition = LinkCondition(rssi_dbm=record.rssi_dbm, snr_db=snr, loss=record.loss)
            source = "replay"
        else:
            condition = link_condition(self.topology, link, self.topology.channel_model,
                                       self._shadow_stream(link), self.mcs_table.mcs0_snr_db)
            mcs = select_mcs(self.mcs_table, condition.snr_db)
            source = "analytic"

        self.last_conditions[link.link_id] = condition
        nominal = rate_for_mcs(self.mcs_table, mcs)
        contenders = 1
        if mcs != DOWN:
            contenders = count_contenders(self.topology, link, active_links, self.topology.interference_model,
                                          self._interference_range[link.link_id])
        effective = effective_rate(nominal, contenders) if mcs != DOWN else 0.0
        return LinkState(link_id=link.link_id, snr_db=condition.snr_db, mcs_index=mcs, nominal_rate_mbps=nominal,
                         effective_rate_mbps=effective, loss=1.0 if mcs == DOWN else condition.loss,
                         updated_at=t, rssi_dbm=condition.rssi_dbm, contenders=contenders, source=source)

    def _shadow_stream(self, link: LinkSpec):
        if self.topology.channel_model.shadowing_mode is ShadowingMode.STATIC:
            # Restarting the stream every tick repeats the same draw.
            return self.streams.fresh("link", link.link_id, "shadow")
        return self.streams.stream("link", link.link_id, "shadow")

    def burst_bytes(self, mtu_bytes: int) -> int:
        """Token-bucket depth of a shaped directed link."""
        return self.config.burst_mtus * mtu_bytes

    def write_trace_rows(self, sink: TraceWriter, t: float, states: List[LinkState]) -> None:
        """
        Record one row per backbone interface for tick ``t``.

        An interface serving several links records its weakest link.
        """
        by_link = {state.link_id: state for state in states}
        per_iface: Dict[Tuple[str, str], LinkState] = {}
        for link in self.topology.links:
            state = by_link[link.link_id]
            for key in link.interfaces():
                current = per_iface.get(key)
                if current is None or state.rssi_dbm < current.rssi_dbm:
                    per_iface[key] = state
        for key in sorted(per_iface):
            state = per_iface[key]
            condition = LinkCondition(rssi_dbm=state.rssi_dbm, snr_db=state.snr_db, loss=state.loss)
            write_trace_row(sink, key, t, condition, state.mcs_index, state.effective_rate_mbps)


def tick_times(horizon_s: float, period_s: float) -> List[float]:
    """Scheduler ticks 0, period, 2*period, ... up to and including the horizon."""
    count = int(math.floor(horizon_s / period_s + 1e-9)) + 1
    return [k * period_s for k in range(count)]


def run_scheduler(scheduler: LinkScheduler, horizon_s: float,
                  sink: Optional[TraceWriter] = None) -> ScheduleTimeline:
    """
    Run the scheduler alone over a horizon (no traffic, so no contention).

    Args:
        scheduler: Configured scheduler
        horizon_s: Last time that may receive a tick, > 0
        sink: When given, trace rows are written every tick

    Returns:
        The full LinkState timeline
    """
    if not horizon_s > 0:
        raise SchedulerError(f"horizon must be > 0, got {horizon_s}")
    timeline = ScheduleTimeline()
    if sink is not None:
        for node in scheduler.topology.nodes:
            for radio in node.interfaces:
                if len(scheduler.topology.links_of_interface(node.id, radio.iface_id)) > 1:
                    logger.warning("interface %s.%s serves several links; its trace keeps the weakest",
                                   node.id, radio.iface_id)
    for t in tick_times(horizon_s, scheduler.config.period_s):
        states = scheduler.schedule_tick(t)
        if sink is not None:
            scheduler.write_trace_rows(sink, t, states)
        timeline.append(t, states)
    logger.info("scheduler ran %d ticks over %.1f s", len(timeline.ticks), horizon_s)
    return timeline
