"""
Unit tests for scenario loading and trace relocation.
"""

import json

import pytest

from meshfl.exceptions import ConfigError
from meshfl.routing import PolicyMode
from meshfl.scenario import load_scenario, resolve, scenario_from_dict, with_trace_files


class TestLoadScenario:
    """Test cases for load_scenario."""

    def test_testbed_sections(self, testbed_path):
        """Every section of the testbed file is parsed."""
        scenario = load_scenario(testbed_path)

        assert scenario.name == "testbed10"
        assert scenario.seed == 7
        assert scenario.fl.rounds == 20
        assert scenario.netsim.chunk_size_bytes == 64000
        assert scenario.scheduler.period_s == 5.0
        assert scenario.routing.temperature_schedule == ((0, 0.1), (10, 0.02))
        assert scenario.routing.mode is PolicyMode.ONLINE
        assert scenario.base_dir == testbed_path.parent

    def test_relative_traces_resolve_next_to_the_file(self, congested_path, scenarios_dir):
        """Trace paths are relative to the scenario's directory."""
        scenario = load_scenario(congested_path)

        radio = scenario.topology.interface("R4", "wlan0")
        assert resolve(scenario, radio.trace_file) == scenarios_dir / "traces" / "R4_wlan0.csv"

    def test_missing_file(self, tmp_path):
        """A scenario that cannot be read is a configuration error."""
        with pytest.raises(ConfigError, match="cannot read"):
            load_scenario(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        """Broken JSON is reported with its position."""
        path = tmp_path / "broken.json"
        path.write_text('{"nodes": [}', encoding="utf-8")

        with pytest.raises(ConfigError, match="invalid JSON"):
            load_scenario(path)

    def test_missing_trace_names_interface(self, make_document, write_scenario):
        """A trace file that does not exist is reported at its interface."""
        document = make_document([("A", "B")])
        document["nodes"][1]["interfaces"][0]["trace_file"] = "missing.csv"

        with pytest.raises(ConfigError) as excinfo:
            load_scenario(write_scenario(document))

        assert excinfo.value.path == "$.nodes[1].interfaces[0].trace_file"

    def test_missing_mcs_table(self, make_document, write_scenario):
        """A custom MCS table must exist."""
        document = make_document([("A", "B")], scheduler={"mcs_table": "tables/mcs.csv"})

        with pytest.raises(ConfigError) as excinfo:
            load_scenario(write_scenario(document))

        assert excinfo.value.path == "$.scheduler.mcs_table"

    @pytest.mark.parametrize("section,path", [
        ({"netsim": {"queue_size": 10}}, "$.netsim.queue_size"),
        ({"fl": {"rounds": 0}}, "$.fl.rounds"),
        ({"routing": {"greedy": "yes"}}, "$.routing.greedy"),
        ({"scheduler": {"period_s": -1}}, "$.scheduler.period_s"),
    ])
    def test_section_errors(self, make_document, section, path):
        """Errors inside optional sections carry their JSON path."""
        document = make_document([("A", "B")], **section)

        with pytest.raises(ConfigError) as excinfo:
            scenario_from_dict(document)

        assert excinfo.value.path == path

    def test_with_seed(self, oracle_path):
        """Seed overrides leave the rest of the scenario alone."""
        scenario = load_scenario(oracle_path)

        reseeded = scenario.with_seed(12)

        assert reseeded.seed == 12
        assert reseeded.topology.links == scenario.topology.links
        assert scenario.seed == 3


class TestWithTraceFiles:
    """Test cases for relocating trace references."""

    def test_existing_traces_still_resolve(self, congested_path, scenarios_dir, tmp_path):
        """Paths already in the document keep pointing at the same files."""
        scenario = load_scenario(congested_path)
        out = tmp_path / "derived"
        out.mkdir()

        derived = with_trace_files(scenario.document, {}, out, scenario.base_dir)

        relocated = derived["nodes"][3]["interfaces"][0]["trace_file"]
        assert (out / relocated).resolve() == (scenarios_dir / "traces" / "R4_wlan0.csv").resolve()
        assert scenario.document["nodes"][3]["interfaces"][0]["trace_file"] == "traces/R4_wlan0.csv"

    def test_new_traces_are_attached(self, congested_path, write_trace, tmp_path):
        """Interfaces named in the mapping replay the given files."""
        scenario = load_scenario(congested_path)
        trace = write_trace([(0.0, 8, -55.0, 0.0, 78.0)], name="traces/R1_wlan1.csv")
        out = tmp_path / "derived"
        out.mkdir()

        derived = with_trace_files(scenario.document, {("R1", "wlan1"): trace}, out, scenario.base_dir)
        path = out / "scenario.json"
        path.write_text(json.dumps(derived), encoding="utf-8")
        reloaded = load_scenario(path)

        assert resolve(reloaded, reloaded.topology.interface("R1", "wlan1").trace_file).resolve() == trace.resolve()
        replayed = [(n.id, r.iface_id) for n in reloaded.topology.nodes for r in n.interfaces if r.trace_file]
        assert replayed == [("R1", "wlan1"), ("R4", "wlan0")]
