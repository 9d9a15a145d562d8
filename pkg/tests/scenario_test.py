import sys
import os

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import json

import pandas as pd
import pytest
from src.scenario.scenario import (
    Event,
    EventKind,
    ScenarioError,
    load_scenario,
    read_profiles,
    scenario_from_dict,
)


@pytest.fixture
def scenario_doc(fixture_path):
    with open(fixture_path("mv_two_substations_scenario.json")) as f:
        return json.load(f)


@pytest.fixture
def fixtures_dir(fixture_path):
    return os.path.dirname(fixture_path("mv_two_substations.json"))


class TestLoadScenario:
    def test_fixture(self, fixture_path):
        sc = load_scenario(fixture_path("mv_two_substations_scenario.json"))
        assert sc.name == "mv-two-substations"
        assert sc.horizon == 12
        assert sc.seed == 3
        assert [e.kind for e in sc.events] == [EventKind.TSO_Q_REQUEST] * 2
        assert sc.constraints == {"v_min": 0.9, "v_max": 1.1}

    def test_profiles_in_per_unit(self, fixture_path):
        sc = load_scenario(fixture_path("mv_two_substations_scenario.json"))
        p = sc.p_at(0)
        assert p["pv_mv2"] == pytest.approx(0.03)
        assert p["com2"] == pytest.approx(-0.03)
        assert sc.p_at(11)["pv_lv1"] == pytest.approx((0.02 + 0.002 * 11) / 10)
        assert sc.p_at(12) == {}
        assert sc.q_at(0) == {}

    def test_events_at(self, fixture_path):
        sc = load_scenario(fixture_path("mv_two_substations_scenario.json"))
        [event] = sc.events_at(6)
        assert event.data == {"value": -0.3}
        assert sc.events_at(5) == []

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "scenario.json"
        path.write_text("{")
        with pytest.raises(ScenarioError, match="not valid JSON"):
            load_scenario(path)


class TestScenarioFromDict:
    def test_missing_value(self, scenario_doc, fixtures_dir, mv_net):
        del scenario_doc["events"][0]["value"]
        with pytest.raises(ScenarioError) as exc:
            scenario_from_dict(scenario_doc, fixtures_dir, mv_net)
        assert any(p.startswith("events.0") for p in exc.value.problems)

    def test_event_outside_horizon(self, scenario_doc, fixtures_dir, mv_net):
        scenario_doc["events"].append({"at": 12, "kind": "tso_q_request", "value": 0.0})
        with pytest.raises(ScenarioError, match="outside horizon"):
            scenario_from_dict(scenario_doc, fixtures_dir, mv_net)

    def test_tap_mode_for_fixed_transformer(self, scenario_doc, fixtures_dir, mv_net):
        scenario_doc["tap_modes"] = {"T2": "auto"}
        with pytest.raises(ScenarioError, match="T2"):
            scenario_from_dict(scenario_doc, fixtures_dir, mv_net)

    def test_unknown_asset_event(self, scenario_doc, fixtures_dir, mv_net):
        scenario_doc["events"].append({"at": 3, "kind": "asset_limit_change", "asset": "ghost",
                                       "q_min": -0.1, "q_max": 0.1})
        with pytest.raises(ScenarioError, match="unknown asset ghost"):
            scenario_from_dict(scenario_doc, fixtures_dir, mv_net)

    def test_events_sorted(self, scenario_doc, fixtures_dir, mv_net):
        scenario_doc["events"].reverse()
        sc = scenario_from_dict(scenario_doc, fixtures_dir, mv_net)
        assert [e.at for e in sc.events] == [2, 6]

    def test_profile_gaps(self, scenario_doc, mv_net, tmp_path):
        pd.DataFrame({"step": [0, 2], "asset_id": ["hh1", "hh1"], "p_mw": [-0.02, -0.02]}).to_csv(
            tmp_path / "p.csv", index=False)
        scenario_doc.update(profiles="p.csv", horizon=3, events=[])
        with pytest.raises(ScenarioError, match="misses 1 steps"):
            scenario_from_dict(scenario_doc, tmp_path, mv_net)

    def test_profile_unknown_asset(self, scenario_doc, mv_net, tmp_path):
        pd.DataFrame({"step": [0], "asset_id": ["ghost"], "p_mw": [1.0]}).to_csv(tmp_path / "p.csv", index=False)
        scenario_doc.update(profiles="p.csv", horizon=1, events=[])
        with pytest.raises(ScenarioError, match="unknown assets: ghost"):
            scenario_from_dict(scenario_doc, tmp_path, mv_net)

    def test_tap_mode_defaults(self, scenario_doc, fixtures_dir, mv_net):
        sc = scenario_from_dict(scenario_doc, fixtures_dir, mv_net)
        assert sc.tap_mode("T0") == "auto"
        assert sc.tap_mode("T1") == "optimiser"

    def test_interface_resolved_below_slack(self, scenario_doc, fixtures_dir, mv_net):
        del scenario_doc["interface"]
        assert scenario_from_dict(scenario_doc, fixtures_dir, mv_net).resolve_interface() == "T0"

    def test_settings_sections(self, fixture_path, mv_net, fixtures_dir):
        with open(fixture_path("mv_two_substations_partition.json")) as f:
            doc = json.load(f)
        sc = scenario_from_dict(doc, fixtures_dir, mv_net)
        assert sc.settings == {"coordination": {"fallback_strategy": "edge_optimisation"}}


class TestProfiles:
    def test_reactive_column(self, tmp_path):
        path = tmp_path / "p.csv"
        pd.DataFrame({"step": [1, 0], "asset_id": ["a", "a"], "p_mw": [1.0, 2.0], "q_mvar": [0.5, -0.5]}).to_csv(
            path, index=False)
        frame = read_profiles(path, 10.0)
        assert frame["step"].tolist() == [0, 1]
        assert frame["q"].tolist() == [-0.05, 0.05]

    def test_missing_column(self, tmp_path):
        path = tmp_path / "p.csv"
        pd.DataFrame({"step": [0], "asset": ["a"], "p_mw": [1.0]}).to_csv(path, index=False)
        with pytest.raises(ScenarioError, match="lacks columns"):
            read_profiles(path, 10.0)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ScenarioError, match="Cannot read profiles"):
            read_profiles(tmp_path / "none.csv", 10.0)


class TestEvent:
    def test_partition_patterns(self):
        event = Event(4, EventKind.COMM_PARTITION, {"sets": [["central"], ["edge:*"]], "duration": 5})
        a, b = event.partition_sets(["upstream", "central", "edge:T2", "edge:T1", "bat_lv1"])
        assert a == ["central"]
        assert b == ["edge:T1", "edge:T2"]
