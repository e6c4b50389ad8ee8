"""
Unit tests for propagation, the SNR to loss mapping, interference and traces.
"""

import math

import numpy as np
import pytest

from meshfl.channel import (ChannelConfigError, ChannelError, ChannelModelConfig, ChannelModelName,
                            InterferenceModelConfig, InterferenceModelName, LinkCondition, TraceFormatError,
                            TraceRecord, TraceWriter, count_contenders, effective_rate, format_trace_row,
                            link_condition, load_trace, loss_from_snr, path_loss_db, replay_condition,
                            write_trace_row)
from meshfl.exceptions import ValidationError

LOG_DISTANCE = ChannelModelConfig()
SHADOWING = ChannelModelConfig(name=ChannelModelName.LOG_NORMAL_SHADOWING, shadow_sigma_db=4.0)


class TestPathLoss:
    """Test cases for path_loss_db."""

    def test_reference_distance(self):
        """At the reference distance the loss is the reference loss."""
        assert path_loss_db(LOG_DISTANCE, 1.0) == 40.0

    def test_ten_meters(self):
        """40 dB + 30 log10(10) = 70 dB."""
        assert path_loss_db(LOG_DISTANCE, 10.0) == pytest.approx(70.0, abs=1e-12)

    def test_monotonic_in_distance(self):
        """Log-distance loss strictly increases with distance."""
        losses = [path_loss_db(LOG_DISTANCE, d) for d in (1.5, 2.0, 5.0, 10.0, 50.0, 200.0)]

        assert all(b > a for a, b in zip(losses, losses[1:]))

    def test_shadowing_is_seeded(self):
        """Same seed gives the same draw."""
        first = path_loss_db(SHADOWING, 10.0, np.random.default_rng(5))
        second = path_loss_db(SHADOWING, 10.0, np.random.default_rng(5))

        assert first == second
        assert first != 70.0

    def test_shadowing_mean(self):
        """The mean over 10^4 draws stays within 0.2 dB of the median loss."""
        rng = np.random.default_rng(11)
        draws = [path_loss_db(SHADOWING, 10.0, rng) for _ in range(10_000)]

        assert abs(np.mean(draws) - 70.0) < 0.2

    def test_shadowing_needs_stream(self):
        """Log-normal shadowing without a stream is an error."""
        with pytest.raises(ChannelError):
            path_loss_db(SHADOWING, 10.0)

    @pytest.mark.parametrize("distance", [0.0, -3.0, math.inf])
    def test_bad_distance(self, distance):
        """Distances must be positive and finite."""
        with pytest.raises(ChannelError):
            path_loss_db(LOG_DISTANCE, distance)

    def test_trace_replay_has_no_path_loss(self):
        """Path loss is undefined for the trace model."""
        with pytest.raises(ChannelError, match="replay_condition"):
            path_loss_db(ChannelModelConfig(name=ChannelModelName.TRACE_REPLAY), 10.0)


class TestModelConfig:
    """Test cases for the channel and interference sections."""

    def test_from_dict_defaults(self):
        """Only the model name is required."""
        config = ChannelModelConfig.from_dict({"name": "log_normal_shadowing"})

        assert config.name is ChannelModelName.LOG_NORMAL_SHADOWING
        assert config.noise_floor_dbm == -91.0
        assert config.loss_ramp_db == 3.0

    def test_bad_exponent(self):
        """Exponents outside (1, 6] are rejected with their path."""
        with pytest.raises(ChannelConfigError) as excinfo:
            ChannelModelConfig.from_dict({"name": "log_distance", "exponent": 0.5})

        assert excinfo.value.path == "$.channel_model.exponent"
        assert isinstance(excinfo.value, ValidationError)

    def test_interference_range(self):
        """A configured interference range must be positive."""
        assert InterferenceModelConfig.from_dict({"name": "none"}).name is InterferenceModelName.NONE
        with pytest.raises(ChannelConfigError):
            InterferenceModelConfig.from_dict({"name": "airtime_sharing", "range_m": 0})


class TestLinkCondition:
    """Test cases for link_condition and loss_from_snr."""

    def test_ten_meter_link(self, make_topology):
        """15 dBm minus 70 dB gives -55 dBm and 36 dB SNR."""
        topo = make_topology([("A", "B")])

        cond = link_condition(topo, topo.links[0], LOG_DISTANCE)

        assert cond.rssi_dbm == pytest.approx(-55.0)
        assert cond.snr_db == pytest.approx(36.0)
        assert cond.loss == 0.0
        assert cond.snr_db == cond.rssi_dbm - LOG_DISTANCE.noise_floor_dbm

    def test_colocated_nodes_clamp_distance(self, make_topology):
        """Co-located nodes are evaluated at the reference distance."""
        topo = make_topology([("A", "B")], positions={"A": (0.0, 0.0), "B": (0.0, 0.0)})

        cond = link_condition(topo, topo.links[0], LOG_DISTANCE)

        assert cond.rssi_dbm == pytest.approx(15.0 - 40.0)

    def test_far_link_is_down(self, make_topology):
        """Below the MCS0 threshold the link loses every frame."""
        topo = make_topology([("A", "B")], spacing_m=500.0)

        cond = link_condition(topo, topo.links[0], LOG_DISTANCE)

        assert cond.snr_db < 5.0
        assert cond.loss == 1.0
        assert cond.link_down

    def test_weaker_radio_limits_budget(self, make_document):
        """The lower transmit power of the two radios is used."""
        from meshfl.topology import topology_from_dict

        document = make_document([("A", "B")])
        document["nodes"][1]["interfaces"][0]["tx_power_dbm"] = 10.0
        topo = topology_from_dict(document)

        assert link_condition(topo, topo.links[0], LOG_DISTANCE).rssi_dbm == pytest.approx(-60.0)

    @pytest.mark.parametrize("snr, expected", [
        (4.99, 1.0),
        (5.0, 1.0),
        (6.5, 0.5),
        (8.0, 0.0),
        (30.0, 0.0),
    ])
    def test_loss_ramp(self, snr, expected):
        """Loss falls linearly over 3 dB above the MCS0 threshold."""
        assert loss_from_snr(snr, 5.0) == pytest.approx(expected)


class TestReplayCondition:
    """Test cases for zero-order hold replay."""

    RECORDS = [TraceRecord(0.0, 4, -55.0, 0.0, 39.0), TraceRecord(5.0, 3, -60.0, 0.0, 26.0),
               TraceRecord(10.0, -1, -95.0, 1.0, 0.0)]

    def test_single_record(self):
        """A one-row trace answers every query with that row."""
        record, exhausted = replay_condition(self.RECORDS[:1], 3.0)

        assert record == self.RECORDS[0]
        assert exhausted

    def test_hold_previous_record(self):
        """t=7 reads the t=5 row."""
        assert replay_condition(self.RECORDS, 7.0) == (self.RECORDS[1], False)

    def test_exact_timestamp(self):
        """A row applies from its own timestamp on."""
        assert replay_condition(self.RECORDS, 10.0) == (self.RECORDS[2], False)

    def test_past_the_end(self):
        """Queries past the last row hold it and flag exhaustion."""
        assert replay_condition(self.RECORDS, 12.0) == (self.RECORDS[2], True)

    def test_before_the_start(self, write_trace):
        """Queries before the first row read the first row."""
        trace = load_trace(write_trace([(2.0, 4, -55.0, 0.0, 39.0), (7.0, 5, -50.0, 0.0, 52.0)]))

        assert trace.at(0.5) == (trace.records[0], False)

    def test_empty_trace(self):
        """An empty trace is rejected."""
        with pytest.raises(TraceFormatError):
            replay_condition([], 0.0)


class TestLoadTrace:
    """Test cases for trace file validation."""

    def test_valid_file(self, write_trace):
        """Rows are parsed in order."""
        trace = load_trace(write_trace([(0.0, 4, -55.0, 0.0, 39.0), (5.0, -1, -95.0, 1.0, 0.0)]))

        assert len(trace) == 2
        assert trace.records[1].mcs_index == -1

    def test_missing_file(self, tmp_path):
        """A missing file is a validation error naming the path."""
        with pytest.raises(TraceFormatError, match="nope.csv"):
            load_trace(tmp_path / "nope.csv", "R1.wlan0")

    def test_bad_header(self, write_trace):
        """The header is checked."""
        with pytest.raises(TraceFormatError, match="expected header"):
            load_trace(write_trace([(0.0, 4, -55.0, 0.0, 39.0)], header="t,mcs,rssi,loss,rate"))

    def test_malformed_row_reports_line(self, write_trace):
        """A bad value is reported with its 1-based line number."""
        path = write_trace([(0.0, 4, -55.0, 0.0, 39.0), (5.0, "four", -55.0, 0.0, 39.0)])

        with pytest.raises(TraceFormatError) as excinfo:
            load_trace(path)

        assert excinfo.value.line == 3

    def test_times_must_increase(self, write_trace):
        """Repeated timestamps are rejected."""
        path = write_trace([(0.0, 4, -55.0, 0.0, 39.0), (0.0, 4, -55.0, 0.0, 39.0)])

        with pytest.raises(TraceFormatError, match="strictly increasing"):
            load_trace(path)

    def test_loss_range(self, write_trace):
        """Loss must be a fraction."""
        with pytest.raises(TraceFormatError, match="loss"):
            load_trace(write_trace([(0.0, 4, -55.0, 1.5, 39.0)]))


class TestTraceWriting:
    """Test cases for trace rows and the trace writer."""

    def test_row_format(self):
        """Floats use their shortest representation."""
        assert ",".join(format_trace_row(0, 4, -55, 0, 39)) == "0.0,4,-55.0,0.0,39.0"

    def test_down_link_row(self):
        """A down link is written with MCS -1 and zero rate."""
        assert ",".join(format_trace_row(5.0, -1, -95.0, 1.0, 0.0)) == "5.0,-1,-95.0,1.0,0.0"

    def test_writer_creates_one_file_per_interface(self, tmp_path):
        """Each interface gets its own CSV with the header."""
        cond = LinkCondition(rssi_dbm=-55.0, snr_db=36.0, loss=0.0)
        with TraceWriter(tmp_path) as sink:
            sink.write_row("R1", "wlan0", 0.0, cond, 4, 39.0)
            sink.write_row("R1", "wlan0", 5.0, cond, 4, 39.0)
            sink.write_row("R2", "wlan0", 0.0, cond, 4, 39.0)
            files = sink.files()

        assert [f.name for f in files] == ["R1_wlan0.csv", "R2_wlan0.csv"]
        lines = (tmp_path / "R1_wlan0.csv").read_text().splitlines()
        assert lines == ["time_s,mcs_index,rssi_dbm,loss,traffic_rate_mbps", "0.0,4,-55.0,0.0,39.0",
                         "5.0,4,-55.0,0.0,39.0"]

    def test_written_trace_loads_back(self, tmp_path):
        """Written rows are read back exactly."""
        cond = LinkCondition(rssi_dbm=-61.123456789, snr_db=29.876543211, loss=0.25)
        with TraceWriter(tmp_path) as sink:
            sink.write_row("R1", "wlan0", 0.0, cond, 7, 65.0)

        record = load_trace(tmp_path / "R1_wlan0.csv").records[0]

        assert record.rssi_dbm == -61.123456789
        assert record.loss == 0.25

    def test_write_trace_row(self, tmp_path):
        """Rows are routed to the interface named by the key."""
        cond = LinkCondition(rssi_dbm=-95.0, snr_db=-4.0, loss=1.0)
        with TraceWriter(tmp_path) as sink:
            write_trace_row(sink, ("R3", "wlan1"), 10.0, cond, -1, 0.0)

        assert (tmp_path / "R3_wlan1.csv").read_text().splitlines()[1] == "10.0,-1,-95.0,1.0,0.0"


class TestInterference:
    """Test cases for airtime sharing."""

    def test_single_contender(self):
        """A link alone keeps its rate."""
        assert effective_rate(39.0, 1) == 39.0

    def test_two_contenders(self):
        """Two links share airtime evenly."""
        assert effective_rate(39.0, 2) == 19.5

    def test_three_contenders(self):
        """Three links at 26 Mbps get 8.67 Mbps each."""
        assert effective_rate(26.0, 3) == pytest.approx(8.67, abs=0.01)

    def test_no_contenders(self):
        """The link itself always counts."""
        with pytest.raises(ChannelError):
            effective_rate(39.0, 0)

    def test_count_contenders(self, chain_topology):
        """Only active co-channel links within range contend."""
        config = InterferenceModelConfig()
        link = chain_topology.links[0]
        others = frozenset(l.link_id for l in chain_topology.links[1:])

        assert count_contenders(chain_topology, link, frozenset(), config, 100.0) == 1
        assert count_contenders(chain_topology, link, others, config, 100.0) == 3
        assert count_contenders(chain_topology, link, others, config, 5.0) == 2
        assert count_contenders(chain_topology, link, others, InterferenceModelConfig(InterferenceModelName.NONE),
                                100.0) == 1

    def test_other_channels_do_not_contend(self, make_document):
        """Links on different channels never share airtime."""
        from meshfl.topology import topology_from_dict

        document = make_document([("A", "B"), ("B", "C")])
        document["nodes"][1]["interfaces"][1]["channel"] = 40
        document["nodes"][2]["interfaces"][0]["channel"] = 40
        topo = topology_from_dict(document)
        first, second = topo.links

        assert count_contenders(topo, first, frozenset({second.link_id}), InterferenceModelConfig(), 100.0) == 1
