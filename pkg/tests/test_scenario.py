import json

import numpy as np
import pytest

from cloop.geometry import LocalFrame, boxes_overlap, project_to_polyline
from cloop.scenario import (
    FUTURE_STEPS,
    HISTORY_STEPS,
    STEP_DT,
    TEMPLATES,
    AgentKind,
    AgentTrack,
    Scenario,
    ScenarioParseError,
    ScenarioValidationError,
    generate_scenario,
    load_scenario,
    nearest_agents,
    nearest_centerline_clearance,
    obstacle_positions,
    route_centerline,
    sample_lane_points,
    save_scenario,
    scenario_from_dict,
    scenario_to_dict,
    stack_histories,
)


@pytest.fixture(scope="module")
def scenes():
    return {t: generate_scenario(t, 7) for t in TEMPLATES}


class TestGeneration:
    def test_deterministic(self):
        a = generate_scenario("lane_follow", 0)
        b = generate_scenario("lane_follow", 0)
        assert json.dumps(scenario_to_dict(a), sort_keys=True) == \
               json.dumps(scenario_to_dict(b), sort_keys=True)

    def test_seeds_differ(self):
        a = generate_scenario("lane_follow", 0)
        b = generate_scenario("lane_follow", 1)
        assert not np.allclose(a.ev.position, b.ev.position)

    def test_unknown_template(self):
        with pytest.raises(ValueError):
            generate_scenario("zigzag", 0)

    def test_lead_follow_contract(self):
        for seed in range(20):
            s = generate_scenario("lead_follow", seed)
            assert len(s.agents) == 2
            ev, lead = s.ev, s.agent("sv1")
            # lead ahead of the EV along the (single) route lane
            pts = route_centerline(s)
            s_ev, _ = project_to_polyline(ev.position, pts)
            s_lead, lat = project_to_polyline(lead.position, pts)
            assert s_lead > s_ev
            assert lat < 0.5

    @pytest.mark.parametrize("template", TEMPLATES)
    def test_shapes_and_invariants(self, template, scenes):
        s = scenes[template]
        assert len(s.agents) >= 1
        for a in s.agents:
            assert len(a.history) == HISTORY_STEPS
            assert abs(a.history.end_time) < 1e-9
            assert a.future is not None
            assert len(a.future) == FUTURE_STEPS
            assert a.future.start_time == pytest.approx(STEP_DT)
        assert s.metadata["category"] == template

    @pytest.mark.parametrize("template", TEMPLATES)
    def test_no_initial_overlap(self, template):
        for seed in range(150):
            s = generate_scenario(template, seed)
            boxes = [a.box() for a in s.agents]
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    assert not boxes_overlap(boxes[i], boxes[j]), \
                        f"{template} seed {seed}: agents {i},{j} overlap at t=0"

    @pytest.mark.parametrize("template", TEMPLATES)
    def test_expert_future_stays_on_road(self, template):
        for seed in range(25):
            s = generate_scenario(template, seed)
            for p in s.ev.future.positions:
                lat, half_width = nearest_centerline_clearance(s, p)
                assert lat <= half_width + 0.3

    @pytest.mark.parametrize("template", TEMPLATES)
    def test_expert_future_avoids_agents(self, template):
        from cloop.geometry import OrientedBox
        for seed in range(25):
            s = generate_scenario(template, seed)
            ev = s.ev
            for t in range(FUTURE_STEPS):
                eb = OrientedBox(ev.future.positions[t], ev.future.headings[t],
                                 ev.length, ev.width)
                for a in s.agents:
                    if a.kind is AgentKind.EV:
                        continue
                    ab = OrientedBox(a.future.positions[t], a.future.headings[t],
                                     a.length, a.width)
                    assert not boxes_overlap(eb, ab), \
                        f"{template} seed {seed}: expert hits {a.id} at step {t}"

    def test_route_lane_ids_exist(self, scenes):
        for s in scenes.values():
            lane_ids = {lane.id for lane in s.lanes}
            assert set(s.route) <= lane_ids


class TestValidation:
    def test_two_evs_rejected(self, scenes):
        s = scenes["lane_follow"]
        ev2 = AgentTrack("ev2", AgentKind.EV, 4.0, 2.0, s.ev.history)
        with pytest.raises(ScenarioValidationError, match="exactly one EV"):
            Scenario(s.lanes, list(s.agents) + [ev2], [], s.route)

    def test_unknown_route_lane_rejected(self, scenes):
        s = scenes["lane_follow"]
        with pytest.raises(ScenarioValidationError, match="unknown lane id"):
            Scenario(s.lanes, s.agents, [], ["nope"])

    def test_history_must_end_at_zero(self, scenes):
        s = scenes["lane_follow"]
        shifted = s.ev.history
        from cloop.geometry import TimedPath
        bad = TimedPath(shifted.times + 1.0, shifted.positions, shifted.headings)
        with pytest.raises(ScenarioValidationError, match="end at t=0"):
            AgentTrack("x", AgentKind.EV, 4.0, 2.0, bad)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path, scenes):
        for s in scenes.values():
            p = tmp_path / f"{s.metadata['id']}.json"
            save_scenario(s, str(p))
            loaded = load_scenario(str(p))
            for a, b in zip(s.agents, loaded.agents):
                assert np.array_equal(a.history.positions, b.history.positions)
                assert np.array_equal(a.history.headings, b.history.headings)
                assert np.array_equal(a.future.positions, b.future.positions)
            for la, lb in zip(s.lanes, loaded.lanes):
                assert la.id == lb.id
                assert np.array_equal(la.centerline(), lb.centerline())
                for pa, pb in zip(la.points, lb.points):
                    assert pa.tangent == pb.tangent
                    assert pa.traffic_light is pb.traffic_light
                    assert pa.on_route == pb.on_route
            assert np.array_equal(obstacle_positions(s), obstacle_positions(loaded))
            assert s.route == loaded.route
            # and saving again produces identical bytes
            p2 = tmp_path / "again.json"
            save_scenario(loaded, str(p2))
            assert p.read_bytes() == p2.read_bytes()

    def test_bad_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        with pytest.raises(ScenarioParseError):
            load_scenario(str(p))

    def test_missing_field(self, scenes):
        d = scenario_to_dict(scenes["lane_follow"])
        del d["agents"][0]["history"]
        with pytest.raises(ScenarioParseError):
            scenario_from_dict(d)

    def test_wrong_version(self, scenes):
        d = scenario_to_dict(scenes["lane_follow"])
        d["schema_version"] = 99
        with pytest.raises(ScenarioParseError, match="schema_version"):
            scenario_from_dict(d)


class TestQueries:
    def test_nearest_agents_matches_brute_force(self):
        for seed in range(20):
            s = generate_scenario("lane_change", seed)
            got = nearest_agents(s, "ev", radius=80.0, k=10)
            ev = s.ev.position
            brute = sorted((float(np.linalg.norm(a.position - ev)), a.id)
                           for a in s.agents if a.id != "ev")
            brute = [aid for d, aid in brute if d <= 80.0][:10]
            assert got == brute

    def test_nearest_agents_all(self, scenes):
        s = scenes["lane_change"]
        ids = nearest_agents(s, "ev")
        assert sorted(ids) == sorted(a.id for a in s.agents if a.id != "ev")

    def test_nearest_agents_zero_radius(self, scenes):
        assert nearest_agents(scenes["lane_change"], "ev", radius=0.0) == []

    def test_nearest_agents_unknown_id(self, scenes):
        with pytest.raises(KeyError):
            nearest_agents(scenes["lane_follow"], "ghost")

    def test_sample_lane_points_within_radius(self, scenes):
        s = scenes["left_turn"]
        frame = s.ev.frame()
        pts = sample_lane_points(s, frame, radius=30.0)
        assert pts
        for p in pts:
            assert np.linalg.norm(p.position - frame.origin) <= 30.0 + 1e-9
        # nearest first
        d = [np.linalg.norm(p.position - frame.origin) for p in pts]
        assert d == sorted(d)

    def test_sample_lane_points_brute_force(self, scenes):
        s = scenes["right_turn"]
        frame = s.ev.frame()
        got = sample_lane_points(s, frame, radius=25.0)
        count = sum(1 for lane in s.lanes for p in lane.points
                    if np.linalg.norm(p.position - frame.origin) <= 25.0)
        assert len(got) == count

    def test_sample_lane_points_route_only_and_cap(self, scenes):
        s = scenes["lane_change"]
        frame = s.ev.frame()
        pts = sample_lane_points(s, frame, radius=40.0, route_only=True)
        assert pts
        assert all(p.on_route for p in pts)
        capped = sample_lane_points(s, frame, radius=40.0, max_points=5)
        assert len(capped) == 5

    def test_sample_lane_points_zero_radius(self, scenes):
        assert sample_lane_points(scenes["merge"], scenes["merge"].ev.frame(), 0.0) == []

    def test_stack_histories(self, scenes):
        s = scenes["merge"]
        ids, pos, hdg, ext = stack_histories(s)
        assert pos.shape == (len(s.agents), HISTORY_STEPS, 2)
        assert hdg.shape == (len(s.agents), HISTORY_STEPS)
        assert ext.shape == (len(s.agents), 2)
        i = ids.index("ev")
        assert np.array_equal(pos[i], s.ev.history.positions)

    def test_route_centerline_monotone(self, scenes):
        for s in scenes.values():
            pts = route_centerline(s)
            seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            assert (seg > 1e-9).all()

    def test_clearance_on_lane_is_small(self, scenes):
        s = scenes["lane_follow"]
        lat, hw = nearest_centerline_clearance(s, s.ev.position)
        assert lat < 0.4
        assert hw == pytest.approx(1.75)
