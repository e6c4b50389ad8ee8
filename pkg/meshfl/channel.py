"""
Radio channel models.

Analytic propagation (log-distance, log-normal shadowing), the SNR to frame
loss mapping, the airtime-sharing interference model and the trace-based
channel model in both directions: replaying per-interface CSV traces and
writing them from a simulated run.
"""

import bisect
import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ConfigError, MeshFLError, ValidationError
from .schema import expect_mapping, get_enum, get_number, reject_unknown

if TYPE_CHECKING:
    from .topology import LinkSpec, Topology

logger = logging.getLogger(__name__)

TRACE_HEADER = ("time_s", "mcs_index", "rssi_dbm", "loss", "traffic_rate_mbps")


class ChannelError(MeshFLError):
    """Base exception for channel-model errors."""
    pass


class ChannelConfigError(ChannelError, ConfigError):
    """Raised when a channel or interference model section is invalid."""
    pass


class TraceError(ChannelError):
    """
    Raised for trace file problems.

    Attributes:
        path: Trace file involved, if any
        line: 1-based line number of the offending row, if any
        iface: ``node.iface`` the trace belongs to, if known
    """

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None,
                 line: Optional[int] = None, iface: Optional[str] = None):
        where = []
        if iface:
            where.append(f"interface {iface}")
        if path is not None:
            where.append(str(path) if line is None else f"{path}:{line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.path = None if path is None else str(path)
        self.line = line
        self.iface = iface


class TraceFormatError(TraceError, ValidationError):
    """Raised when a trace file is missing, empty or malformed."""
    pass


class ChannelModelName(str, Enum):
    """Channel models selectable in a scenario."""
    LOG_DISTANCE = "log_distance"
    LOG_NORMAL_SHADOWING = "log_normal_shadowing"
    TRACE_REPLAY = "trace_replay"


class ShadowingMode(str, Enum):
    """Whether shadowing is redrawn every scheduler tick or fixed per link."""
    PER_TICK = "per_tick"
    STATIC = "static"


class InterferenceModelName(str, Enum):
    """Interference models selectable in a scenario."""
    NONE = "none"
    AIRTIME_SHARING = "airtime_sharing"


@dataclass(frozen=True)
class ChannelModelConfig:
    """Parameters of the propagation model."""
    name: ChannelModelName = ChannelModelName.LOG_DISTANCE
    ref_loss_db: float = 40.0
    ref_distance_m: float = 1.0
    exponent: float = 3.0
    shadow_sigma_db: float = 4.0
    noise_floor_dbm: float = -91.0
    shadowing_mode: ShadowingMode = ShadowingMode.PER_TICK
    loss_ramp_db: float = 3.0

    def __post_init__(self):
        if isinstance(self.name, str):
            object.__setattr__(self, "name", ChannelModelName(self.name))
        if isinstance(self.shadowing_mode, str):
            object.__setattr__(self, "shadowing_mode", ShadowingMode(self.shadowing_mode))
        if not 1.0 < self.exponent <= 6.0:
            raise ChannelConfigError(f"exponent must be in (1, 6], got {self.exponent}",
                                     "$.channel_model.exponent")
        if self.shadow_sigma_db < 0:
            raise ChannelConfigError("shadow_sigma_db must be >= 0", "$.channel_model.shadow_sigma_db")
        if self.ref_distance_m <= 0:
            raise ChannelConfigError("ref_distance_m must be > 0", "$.channel_model.ref_distance_m")
        if self.loss_ramp_db <= 0:
            raise ChannelConfigError("loss_ramp_db must be > 0", "$.channel_model.loss_ramp_db")

    @property
    def is_analytic(self) -> bool:
        return self.name is not ChannelModelName.TRACE_REPLAY

    @classmethod
    def from_dict(cls, data: Any, path: str = "$.channel_model") -> "ChannelModelConfig":
        """Build the config from its scenario section."""
        data = expect_mapping(data, path)
        reject_unknown(data, ("name", "ref_loss_db", "ref_distance_m", "exponent", "shadow_sigma_db",
                              "noise_floor_dbm", "shadowing_mode", "loss_ramp_db"), path)
        defaults = cls()
        return cls(
            name=get_enum(data, "name", path, ChannelModelName),
            ref_loss_db=get_number(data, "ref_loss_db", path, defaults.ref_loss_db),
            ref_distance_m=get_number(data, "ref_distance_m", path, defaults.ref_distance_m),
            exponent=get_number(data, "exponent", path, defaults.exponent),
            shadow_sigma_db=get_number(data, "shadow_sigma_db", path, defaults.shadow_sigma_db),
            noise_floor_dbm=get_number(data, "noise_floor_dbm", path, defaults.noise_floor_dbm),
            shadowing_mode=get_enum(data, "shadowing_mode", path, ShadowingMode, defaults.shadowing_mode),
            loss_ramp_db=get_number(data, "loss_ramp_db", path, defaults.loss_ramp_db),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name.value,
            "ref_loss_db": self.ref_loss_db,
            "ref_distance_m": self.ref_distance_m,
            "exponent": self.exponent,
            "shadow_sigma_db": self.shadow_sigma_db,
            "noise_floor_dbm": self.noise_floor_dbm,
            "shadowing_mode": self.shadowing_mode.value,
            "loss_ramp_db": self.loss_ramp_db,
        }


@dataclass(frozen=True)
class InterferenceModelConfig:
    """
    Airtime-sharing interference model.

    ``range_m`` of None means twice the communication range implied by the
    MCS0 SNR threshold.
    """
    name: InterferenceModelName = InterferenceModelName.AIRTIME_SHARING
    range_m: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.name, str):
            object.__setattr__(self, "name", InterferenceModelName(self.name))
        if self.range_m is not None and self.range_m <= 0:
            raise ChannelConfigError("range_m must be > 0", "$.interference_model.range_m")

    @classmethod
    def from_dict(cls, data: Any, path: str = "$.interference_model") -> "InterferenceModelConfig":
        data = expect_mapping(data, path)
        reject_unknown(data, ("name", "range_m"), path)
        return cls(
            name=get_enum(data, "name", path, InterferenceModelName),
            range_m=get_number(data, "range_m", path, None, allow_none=True),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name.value, "range_m": self.range_m}


@dataclass(frozen=True)
class LinkCondition:
    """Radio conditions of a link at one instant."""
    rssi_dbm: float
    snr_db: float
    loss: float

    @property
    def link_down(self) -> bool:
        return self.loss >= 1.0


@dataclass(frozen=True)
class TraceRecord:
    """One row of a per-interface trace file."""
    time_s: float
    mcs_index: int
    rssi_dbm: float
    loss: float
    traffic_rate_mbps: float


def path_loss_db(model: ChannelModelConfig, distance_m: float,
                 rng: Optional[np.random.Generator] = None) -> float:
    """
    Propagation loss between two points.

    Args:
        model: Analytic channel model
        distance_m: Distance in meters, must be > 0
        rng: Per-link stream; required for log-normal shadowing

    Returns:
        Path loss in dB

    Raises:
        ChannelError: For non-positive distances or the trace_replay model
    """
    if model.name is ChannelModelName.TRACE_REPLAY:
        raise ChannelError("path loss is undefined for the trace_replay model; use replay_condition")
    if not (distance_m > 0 and math.isfinite(distance_m)):
        raise ChannelError(f"distance must be positive and finite, got {distance_m}")

    loss = model.ref_loss_db + 10.0 * model.exponent * math.log10(distance_m / model.ref_distance_m)
    if model.name is ChannelModelName.LOG_NORMAL_SHADOWING:
        if rng is None:
            raise ChannelError("log_normal_shadowing needs a random stream")
        loss += float(rng.normal(0.0, model.shadow_sigma_db))
    return loss


def loss_from_snr(snr_db: float, mcs0_snr_db: float, ramp_db: float = 3.0) -> float:
    """
    Frame loss fraction for a given SNR.

    Below the MCS0 threshold every frame is lost; within ``ramp_db`` above it
    the loss falls linearly to zero.
    """
    if snr_db < mcs0_snr_db:
        return 1.0
    if snr_db < mcs0_snr_db + ramp_db:
        return (mcs0_snr_db + ramp_db - snr_db) / ramp_db
    return 0.0


def link_distance_m(topo: "Topology", link: "LinkSpec") -> float:
    """Euclidean distance between the endpoints of a link."""
    a = topo.node(link.node_a).position
    b = topo.node(link.node_b).position
    if a is None or b is None:
        raise ChannelError(f"link {link.link_id} needs node positions for an analytic channel model")
    return math.hypot(a[0] - b[0], a[1] - b[1])


def link_tx_power_dbm(topo: "Topology", link: "LinkSpec") -> float:
    # The weaker radio limits the link budget.
    return min(topo.interface(link.node_a, link.iface_a).tx_power_dbm,
               topo.interface(link.node_b, link.iface_b).tx_power_dbm)


def link_condition(topo: "Topology", link: "LinkSpec", model: ChannelModelConfig,
                   rng: Optional[np.random.Generator] = None, mcs0_snr_db: float = 5.0) -> LinkCondition:
    """
    Analytic radio conditions of a link.

    Args:
        topo: Topology holding node positions and radio parameters
        link: Link to evaluate
        model: Analytic channel model
        rng: The link's shadowing stream
        mcs0_snr_db: Lowest SNR at which any MCS decodes

    Returns:
        LinkCondition with rssi = tx_power - path_loss and snr = rssi - noise_floor
    """
    distance = max(link_distance_m(topo, link), model.ref_distance_m)
    rssi = link_tx_power_dbm(topo, link) - path_loss_db(model, distance, rng)
    snr = rssi - model.noise_floor_dbm
    return LinkCondition(rssi_dbm=rssi, snr_db=snr, loss=loss_from_snr(snr, mcs0_snr_db, model.loss_ramp_db))


def communication_range_m(model: ChannelModelConfig, tx_power_dbm: float, mcs0_snr_db: float) -> float:
    """Distance at which the median SNR reaches the MCS0 threshold."""
    if not model.is_analytic:
        return math.inf
    budget_db = tx_power_dbm - model.noise_floor_dbm - mcs0_snr_db - model.ref_loss_db
    return model.ref_distance_m * 10.0 ** (budget_db / (10.0 * model.exponent))


def effective_rate(nominal_rate_mbps: float, contenders: int) -> float:
    """
    Rate left to a link that shares airtime fairly with its contenders.

    Args:
        nominal_rate_mbps: PHY rate selected by the scheduler
        contenders: Active co-channel links in range, the link itself included

    Raises:
        ChannelError: If contenders < 1
    """
    if contenders < 1:
        raise ChannelError(f"contenders must be >= 1, got {contenders}")
    return nominal_rate_mbps / contenders


def count_contenders(topo: "Topology", link: "LinkSpec", active_links: FrozenSet[str],
                     config: InterferenceModelConfig, interference_range_m: float) -> int:
    """
    Number of links sharing airtime with ``link`` (itself included).

    A contender is another link on the same band and channel that carried
    traffic in the previous scheduler window and has an endpoint within the
    interference range of one of ``link``'s endpoints. Links without node
    positions all share one contention domain.
    """
    if config.name is InterferenceModelName.NONE:
        return 1
    radio = topo.interface(link.node_a, link.iface_a)
    count = 1
    for other in topo.links:
        if other.link_id == link.link_id or other.link_id not in active_links:
            continue
        other_radio = topo.interface(other.node_a, other.iface_a)
        if other_radio.band != radio.band or other_radio.channel != radio.channel:
            continue
        if _links_within(topo, link, other, interference_range_m):
            count += 1
    return count


def _links_within(topo: "Topology", first: "LinkSpec", second: "LinkSpec", range_m: float) -> bool:
    points = []
    for node_id in (first.node_a, first.node_b, second.node_a, second.node_b):
        position = topo.node(node_id).position
        if position is None:
            return True
        points.append(position)
    return any(math.hypot(p[0] - q[0], p[1] - q[1]) <= range_m for p in points[:2] for q in points[2:])


class ReplayTrace:
    """A loaded trace with a precomputed time index for zero-order hold lookups."""

    def __init__(self, records: Sequence[TraceRecord], iface: Optional[str] = None):
        if not records:
            raise TraceFormatError("trace is empty", iface=iface)
        self.records: Tuple[TraceRecord, ...] = tuple(records)
        self.times: List[float] = [r.time_s for r in self.records]
        self.iface = iface

    def __len__(self) -> int:
        return len(self.records)

    def at(self, t: float) -> Tuple[TraceRecord, bool]:
        """Record in force at time t and whether the trace has run out."""
        index = bisect.bisect_right(self.times, t) - 1
        if index < 0:
            return self.records[0], False
        return self.records[index], t > self.times[-1]


def replay_condition(trace: Union[Sequence[TraceRecord], ReplayTrace], t: float) -> Tuple[TraceRecord, bool]:
    """
    Zero-order hold lookup into a trace.

    Returns the last record with ``time_s <= t`` (the first record for
    earlier times) and a flag telling whether ``t`` lies past the last record.

    Raises:
        TraceFormatError: If the trace is empty
    """
    if not isinstance(trace, ReplayTrace):
        trace = ReplayTrace(trace)
    return trace.at(t)


def load_trace(path: Union[str, Path], iface: Optional[str] = None) -> ReplayTrace:
    """
    Read and validate a trace CSV.

    Args:
        path: File to read
        iface: ``node.iface`` label used in diagnostics

    Returns:
        ReplayTrace over the file's records

    Raises:
        TraceFormatError: Missing file, bad header, malformed row (with line
            number) or non-increasing timestamps
    """
    path = Path(path)
    try:
        handle = path.open("r", newline="", encoding="utf-8")
    except OSError as e:
        raise TraceFormatError(f"cannot open trace file: {e.strerror}", path=path, iface=iface) from e

    records: List[TraceRecord] = []
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRACE_HEADER:
            raise TraceFormatError(f"expected header {','.join(TRACE_HEADER)}", path=path, line=1, iface=iface)
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            records.append(_parse_row(row, path, line, iface, records[-1].time_s if records else None))

    if not records:
        raise TraceFormatError("trace has no records", path=path, iface=iface)
    return ReplayTrace(records, iface=iface)


def _parse_row(row: List[str], path: Path, line: int, iface: Optional[str],
               previous_time: Optional[float]) -> TraceRecord:
    if len(row) != len(TRACE_HEADER):
        raise TraceFormatError(f"expected {len(TRACE_HEADER)} columns, got {len(row)}",
                               path=path, line=line, iface=iface)
    try:
        record = TraceRecord(
            time_s=float(row[0]),
            mcs_index=int(row[1]),
            rssi_dbm=float(row[2]),
            loss=float(row[3]),
            traffic_rate_mbps=float(row[4]),
        )
    except ValueError as e:
        raise TraceFormatError(f"malformed row: {e}", path=path, line=line, iface=iface) from e

    if not all(math.isfinite(v) for v in (record.time_s, record.rssi_dbm, record.loss, record.traffic_rate_mbps)):
        raise TraceFormatError("non-finite value", path=path, line=line, iface=iface)
    if record.time_s < 0:
        raise TraceFormatError("time_s must be >= 0", path=path, line=line, iface=iface)
    if previous_time is not None and record.time_s <= previous_time:
        raise TraceFormatError("time_s must be strictly increasing", path=path, line=line, iface=iface)
    if record.mcs_index < -1:
        raise TraceFormatError("mcs_index must be -1 or a table index", path=path, line=line, iface=iface)
    if not 0.0 <= record.loss <= 1.0:
        raise TraceFormatError("loss must be within [0, 1]", path=path, line=line, iface=iface)
    if record.traffic_rate_mbps < 0:
        raise TraceFormatError("traffic_rate_mbps must be >= 0", path=path, line=line, iface=iface)
    return record


def format_trace_row(t: float, mcs: int, rssi_dbm: float, loss: float, rate_mbps: float) -> List[str]:
    """Render one trace row; floats use the shortest repr so replay is exact."""
    return [repr(float(t)), str(int(mcs)), repr(float(rssi_dbm)), repr(float(loss)), repr(float(rate_mbps))]


def trace_filename(node_id: str, iface_id: str) -> str:
    return f"{node_id}_{iface_id}.csv"


class TraceWriter:
    """
    Writes one trace CSV per interface into a directory.

    Files are created on the first row for an interface and closed by
    ``close()`` (or by leaving the ``with`` block).
    """

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self._files: Dict[Tuple[str, str], Any] = {}
        self._writers: Dict[Tuple[str, str], Any] = {}
        self.rows_written: Dict[Tuple[str, str], int] = {}

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def path_for(self, node_id: str, iface_id: str) -> Path:
        return self.directory / trace_filename(node_id, iface_id)

    def _writer(self, key: Tuple[str, str]):
        writer = self._writers.get(key)
        if writer is None:
            self.directory.mkdir(parents=True, exist_ok=True)
            handle = self.path_for(*key).open("w", newline="", encoding="utf-8")
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(TRACE_HEADER)
            self._files[key] = handle
            self._writers[key] = writer
            self.rows_written[key] = 0
        return writer

    def write_row(self, node_id: str, iface_id: str, t: float, cond: LinkCondition,
                  mcs: int, rate_mbps: float) -> None:
        key = (node_id, iface_id)
        try:
            self._writer(key).writerow(format_trace_row(t, mcs, cond.rssi_dbm, cond.loss, rate_mbps))
        except OSError as e:
            raise TraceError(f"cannot write trace row: {e.strerror}", path=self.path_for(*key),
                             iface=f"{node_id}.{iface_id}") from e
        self.rows_written[key] += 1

    def files(self) -> List[Path]:
        return [self.path_for(*key) for key in sorted(self._writers)]

    def close(self) -> None:
        for handle in self._files.values():
            handle.close()
        self._files.clear()
        self._writers.clear()


def write_trace_row(sink: TraceWriter, iface: Tuple[str, str], t: float, cond: LinkCondition,
                    mcs: int, rate_mbps: float) -> None:
    """Append one row for ``iface`` (a ``(node, iface_id)`` pair) to the sink."""
    sink.write_row(iface[0], iface[1], t, cond, mcs, rate_mbps)


def interfaces_with_traces(topo: "Topology") -> Iterable[Tuple[str, str, str]]:
    """Yield ``(node, iface, trace_file)`` for every interface configured for replay."""
    for node in topo.nodes:
        for radio in node.interfaces:
            if radio.trace_file:
                yield node.id, radio.iface_id, radio.trace_file
