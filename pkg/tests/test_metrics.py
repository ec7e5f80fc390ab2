import math

import numpy as np
import pytest

from cloop.decoder import ModeSet
from cloop.geometry import LocalFrame, OrientedBox, TimedPath, boxes_overlap, box_corners, project_to_polyline
from cloop.metrics import (
    MetricReport,
    MetricWeights,
    aggregate,
    comfort_metrics,
    composite_score,
    conditional_ade,
    detect_collision,
    detect_offroad,
    evaluate_log,
    progress_ratio,
    read_reports_csv,
    reference_from_scenario,
    speed_compliance,
    write_reports_csv,
)
from cloop.scenario import (
    FUTURE_STEPS,
    HISTORY_STEPS,
    STEP_DT,
    AgentKind,
    AgentTrack,
    Lane,
    LanePoint,
    Obstacle,
    Scenario,
    generate_scenario,
)
from cloop.simulator import OraclePlanner, SimLog, run_closed_loop


def history_at(xy, heading=0.0, speed=0.0):
    t = (np.arange(HISTORY_STEPS) - (HISTORY_STEPS - 1)) * STEP_DT
    d = np.array([np.cos(heading), np.sin(heading)])
    pos = np.asarray(xy, dtype=float) + speed * t[:, None] * d
    return TimedPath(t, pos, np.full(HISTORY_STEPS, heading))


def future_along(xy, speed, heading=0.0, steps=FUTURE_STEPS):
    t = (np.arange(steps) + 1) * STEP_DT
    d = np.array([np.cos(heading), np.sin(heading)])
    pos = np.asarray(xy, dtype=float) + speed * t[:, None] * d
    return TimedPath(t, pos, np.full(steps, heading))


def track_at(agent_id, xy, kind=AgentKind.SV, heading=0.0, speed=0.0,
             length=4.0, width=2.0, future=None):
    return AgentTrack(agent_id, kind, length, width,
                      history_at(xy, heading, speed), future)


def long_lane(y=0.0, lane_id="l0", on_route=True):
    pts = [LanePoint(np.array([x, y]), 0.0, on_route=on_route)
           for x in np.arange(-80.0, 300.1, 2.0)]
    return Lane(lane_id, pts)


def scene_of(agents, obstacles=()):
    return Scenario([long_lane()], list(agents), list(obstacles), ["l0"])


def make_log(traces: dict, dt=STEP_DT, speeds=None):
    """traces: id -> [T, 2] positions (constant heading 0)."""
    n = len(next(iter(traces.values())))
    snapshots = []
    ev_trace = []
    for i in range(n):
        clock = round(i * dt, 9)
        agents = {}
        for aid, pos in sorted(traces.items()):
            v = 0.0 if speeds is None else speeds.get(aid, 0.0)
            agents[aid] = {"position": [float(pos[i][0]), float(pos[i][1])],
                           "heading": 0.0, "speed": v}
        snapshots.append({"clock": clock, "agents": agents})
        if "ego" in traces:
            ev_trace.append(dict(agents["ego"], clock=clock))
    return SimLog(snapshots, [], ev_trace, {"mode": "nonreactive"})


def still(n, xy):
    return np.tile(np.asarray(xy, dtype=float), (n, 1))


def moving(n, xy, v, dt=STEP_DT):
    t = np.arange(n) * dt
    return np.asarray(xy, dtype=float) + np.stack([v * t, np.zeros(n)], -1)


class TestCompositeScore:
    def test_perfect_run(self):
        assert composite_score(False, False, 1.0, 1.0, 1.0) == 100.0

    def test_gating(self):
        assert composite_score(True, False, 1.0, 1.0, 1.0) == 0.0
        assert composite_score(False, True, 1.0, 1.0, 1.0) == 0.0

    def test_half_progress(self):
        assert composite_score(False, False, 0.5, 1.0, 1.0) == pytest.approx(70.0)

    def test_progress_capped_at_one(self):
        assert composite_score(False, False, 1.7, 1.0, 1.0) == 100.0

    def test_monotone_in_progress(self):
        scores = [composite_score(False, False, p, 0.8, 0.9)
                  for p in np.linspace(0, 1.2, 13)]
        assert all(a <= b + 1e-12 for a, b in zip(scores, scores[1:]))

    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = composite_score(False, False, rng.uniform(0, 2),
                                rng.uniform(0, 1), rng.uniform(0, 1))
            assert 0.0 <= s <= 100.0

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            MetricWeights(progress=-0.1)
        with pytest.raises(ValueError):
            MetricWeights(accel_limit=0.0)


class TestDetectCollision:
    def test_alone_is_clean(self):
        scene = scene_of([track_at("ego", (0, 0), AgentKind.EV)])
        log = make_log({"ego": moving(30, (0, 0), 5.0)})
        assert detect_collision(log, scene) is None

    def test_scripted_overlap_time(self):
        scene = scene_of([track_at("ego", (0, 0), AgentKind.EV),
                          track_at("sv", (200, 0))])
        ego = still(40, (0, 0))
        sv = still(40, (200.0, 0.0))
        sv[30:] = [2.0, 0.0]  # teleports onto the EV at t = 3.0
        log = make_log({"ego": ego, "sv": sv})
        assert detect_collision(log, scene) == (3.0, "sv")

    def test_obstacle_contact(self):
        scene = scene_of([track_at("ego", (0, 0), AgentKind.EV)],
                         [Obstacle(np.array([10.0, 0.0]))])
        log = make_log({"ego": moving(40, (0, 0), 5.0)})
        t, who = detect_collision(log, scene)
        assert who == "obstacle:0"
        # contact when the gap 10 - 5t <= half length + half extent = 2.55
        assert t == pytest.approx(1.5, abs=0.11)

    def test_agent_order_invariance(self):
        scene_a = scene_of([track_at("ego", (0, 0), AgentKind.EV),
                            track_at("a", (4.0, 0.0)), track_at("b", (4.0, 0.5))])
        scene_b = scene_of([track_at("ego", (0, 0), AgentKind.EV),
                            track_at("b", (4.0, 0.5)), track_at("a", (4.0, 0.0))])
        traces = {"ego": still(3, (0, 0)), "a": still(3, (4.0, 0.0)),
                  "b": still(3, (4.0, 0.5))}
        assert detect_collision(make_log(traces), scene_a) == \
            detect_collision(make_log(traces), scene_b) == (0.0, "a")

    def test_matches_bruteforce_oracle(self):
        rng = np.random.default_rng(5)
        for trial in range(25):
            n = 20
            ids = ["ego", "s1", "s2"]
            tracks = [track_at("ego", (0, 0), AgentKind.EV),
                      track_at("s1", (6, 1)), track_at("s2", (-5, -2))]
            scene = scene_of(tracks)
            traces = {aid: np.cumsum(rng.normal(0, 0.8, (n, 2)), axis=0)
                      + rng.normal(0, 4, 2) for aid in ids}
            log = make_log(traces)
            got = detect_collision(log, scene)

            expected = None
            for i in range(n):
                ev_box = OrientedBox(traces["ego"][i], 0.0, 4.0, 2.0)
                for aid in ("s1", "s2"):
                    if boxes_overlap(ev_box, OrientedBox(traces[aid][i], 0.0, 4.0, 2.0)):
                        expected = (round(i * STEP_DT, 9), aid)
                        break
                if expected:
                    break
            assert got == expected, f"trial {trial}"


class TestDetectOffroad:
    def test_centerline_is_on_road(self):
        scene = scene_of([track_at("ego", (0, 0), AgentKind.EV)])
        log = make_log({"ego": moving(30, (0, 0), 8.0)})
        assert detect_offroad(log, scene) is None

    def test_teleport_detected_at_jump(self):
        scene = scene_of([track_at("ego", (0, 0), AgentKind.EV)])
        ego = moving(40, (0, 0), 5.0)
        ego[20:, 1] = 10.0  # 10 m lateral jump at t = 2.0
        log = make_log({"ego": ego})
        assert detect_offroad(log, scene) == 2.0

    def test_matches_corner_distance_oracle(self):
        scene = scene_of([track_at("ego", (0, 0), AgentKind.EV)])
        cl = scene.lanes[0].centerline()
        drift = np.stack([5.0 * np.arange(30) * STEP_DT,
                          0.12 * np.arange(30)], axis=-1)
        log = make_log({"ego": drift})
        got = detect_offroad(log, scene)

        expected = None
        for i in range(30):
            corners = box_corners(drift[i][None], np.zeros(1), 4.0, 2.0)[0]
            dists = [project_to_polyline(c, cl)[1] for c in corners]
            if max(dists) > 1.75 + 0.3:
                expected = round(i * STEP_DT, 9)
                break
        assert expected is not None
        assert got == expected


class TestProgressRatio:
    def reference(self, speed=10.0, steps=50):
        t = np.arange(steps + 1) * STEP_DT
        pos = np.stack([speed * t, np.zeros(steps + 1)], -1)
        return TimedPath(t, pos, np.zeros(steps + 1))

    def test_identical_is_one(self):
        ref = self.reference()
        log = make_log({"ego": ref.positions})
        assert progress_ratio(log, ref) == pytest.approx(1.0, abs=1e-9)

    def test_stationary_is_zero(self):
        ref = self.reference()
        log = make_log({"ego": still(51, (0, 0))})
        assert progress_ratio(log, ref) == 0.0

    def test_half_speed(self):
        ref = self.reference(10.0)
        log = make_log({"ego": moving(51, (0, 0), 5.0)})
        assert progress_ratio(log, ref) == pytest.approx(0.5, abs=1e-6)

    def test_early_termination_window(self):
        # run ends at 2 s; both EV and reference measured over [0, 2]
        ref = self.reference(10.0)
        log = make_log({"ego": moving(21, (0, 0), 5.0)})
        assert progress_ratio(log, ref) == pytest.approx(0.5, abs=1e-6)

    def test_reverse_clipped_to_zero(self):
        ref = self.reference(10.0)
        log = make_log({"ego": moving(21, (0, 0), -3.0)})
        assert progress_ratio(log, ref) == 0.0


class TestComfort:
    def _log_with_speeds(self, speeds):
        n = len(speeds)
        snapshots = []
        trace = []
        for i, v in enumerate(speeds):
            clock = round(i * STEP_DT, 9)
            entry = {"position": [float(i), 0.0], "heading": 0.0,
                     "speed": float(v)}
            snapshots.append({"clock": clock, "agents": {"ego": entry}})
            trace.append(dict(entry, clock=clock))
        return SimLog(snapshots, [], trace, {})

    def test_smooth_trace_is_clean(self):
        log = self._log_with_speeds(np.full(30, 8.0))
        violations, share = comfort_metrics(log)
        assert violations == 0 and share == 1.0

    def test_hard_braking_counts(self):
        speeds = np.full(20, 8.0)
        speeds[10:] = 8.0 - 0.35 * np.arange(10)  # -3.5 m/s^2 sustained
        log = self._log_with_speeds(speeds)
        violations, share = comfort_metrics(log)
        assert violations >= 9
        assert share < 0.6

    def test_jerk_spike_counts(self):
        speeds = np.full(20, 5.0)
        speeds[10] += 0.25  # one-step accel blip: jerk ~ 50 m/s^3
        log = self._log_with_speeds(speeds)
        violations, _ = comfort_metrics(log)
        assert violations >= 2

    def test_speed_compliance_fraction(self):
        speeds = np.concatenate([np.full(10, 10.0), np.full(10, 20.0)])
        log = self._log_with_speeds(speeds)
        assert speed_compliance(log) == pytest.approx(0.5)


class TestConditionalAde:
    def _scene_with_svs(self, offsets, speeds=None):
        agents = [track_at("ego", (0, 0), AgentKind.EV,
                           future=future_along((0, 0), 5.0))]
        for i, off in enumerate(offsets):
            v = 3.0 if speeds is None else speeds[i]
            agents.append(track_at(f"sv{i}", off,
                                   future=future_along(off, v)))
        return scene_of(agents)

    def _mode_set_from_truth(self, scene, ids, times, jitter=None):
        locs, scales, confs, frames = [], [], [], []
        for aid in ids:
            tr = scene.agent(aid)
            truth = tr.future.resample(times).positions
            frame = tr.frame()
            local = (truth - frame.origin) @ frame.rotation
            if jitter is not None:
                local = local + jitter
            locs.append(np.stack([local, local + 50.0]))
            scales.append(np.ones((2, len(times), 2)))
            confs.append([0.9, 0.1])
            frames.append(frame)
        return ModeSet(list(ids), frames, np.array(locs), np.array(scales),
                       np.array(confs, dtype=float), STEP_DT)

    def test_exact_predictions_score_zero(self):
        scene = self._scene_with_svs([(10, 2), (-8, 1)])
        times = (np.arange(FUTURE_STEPS) + 1) * STEP_DT
        ms = self._mode_set_from_truth(scene, ["sv0", "sv1"], times)
        assert conditional_ade(ms, scene) == 0.0

    def test_constant_offset_is_its_norm(self):
        scene = self._scene_with_svs([(10, 2)])
        times = (np.arange(FUTURE_STEPS) + 1) * STEP_DT
        ms = self._mode_set_from_truth(scene, ["sv0"], times,
                                       jitter=np.array([0.0, 1.0]))
        assert conditional_ade(ms, scene) == pytest.approx(1.0, abs=1e-9)

    def test_nearest_k_selection(self):
        # the distant SV has a huge error but sits outside the top-k ring
        offsets = [(6, 0), (8, 1), (-7, 2), (150, 0)]
        scene = self._scene_with_svs(offsets)
        times = (np.arange(FUTURE_STEPS) + 1) * STEP_DT
        ms = self._mode_set_from_truth(scene, [f"sv{i}" for i in range(4)], times)
        ms.locations[3] += 500.0
        assert conditional_ade(ms, scene, k_agents=3) == 0.0
        assert conditional_ade(ms, scene, k_agents=4) > 100.0

    def test_horizon_truncation(self):
        scene = self._scene_with_svs([(10, 2)])
        times = (np.arange(FUTURE_STEPS) + 1) * STEP_DT
        ms = self._mode_set_from_truth(scene, ["sv0"], times)
        # corrupt only the tail past 2 s; a 2 s horizon must not see it
        ms.locations[0, 0, 20:] += 99.0
        assert conditional_ade(ms, scene, horizon_s=2.0) == 0.0
        assert conditional_ade(ms, scene, horizon_s=5.0) > 1.0

    def test_no_ground_truth_is_nan(self):
        agents = [track_at("ego", (0, 0), AgentKind.EV), track_at("sv0", (5, 1))]
        scene = scene_of(agents)
        times = (np.arange(10) + 1) * STEP_DT
        frame = scene.agent("sv0").frame()
        ms = ModeSet(["sv0"], [frame], np.zeros((1, 1, 10, 2)),
                     np.ones((1, 1, 10, 2)), np.ones((1, 1)), STEP_DT)
        assert math.isnan(conditional_ade(ms, scene))

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(9)
        scene = self._scene_with_svs([(9, 0), (-6, 2), (14, -1)],
                                     speeds=[2.0, 4.0, 3.0])
        times = (np.arange(FUTURE_STEPS) + 1) * STEP_DT
        ids = ["sv0", "sv1", "sv2"]
        ms = self._mode_set_from_truth(scene, ids, times)
        noise = rng.normal(0, 0.5, ms.locations.shape)
        ms.locations[:] = ms.locations + noise
        got = conditional_ade(ms, scene, k_agents=8, horizon_s=5.0)

        per_agent = []
        for aid in ids:
            i = ms.agent_ids.index(aid)
            k = int(np.argmax(ms.confidences[i]))
            frame = scene.agent(aid).frame()
            pred = ms.locations[i, k] @ frame.rotation.T + frame.origin
            truth = scene.agent(aid).future.resample(times).positions
            per_agent.append(np.linalg.norm(pred - truth, axis=1).mean())
        assert got == pytest.approx(float(np.mean(per_agent)), abs=1e-12)


class TestEvaluateLog:
    def test_oracle_lane_follow_scores_high(self):
        scene = generate_scenario("lane_follow", 11)
        log = run_closed_loop(scene, OraclePlanner(), "nonreactive", duration=5.0)
        report = evaluate_log(log, scene)
        assert not report.collided and not report.off_road
        assert report.composite > 60.0
        assert 0.0 <= report.progress_ratio

    def test_collision_gates_composite(self):
        scene = scene_of([track_at("ego", (0, 0), AgentKind.EV,
                                   future=future_along((0, 0), 5.0)),
                          track_at("sv", (3.0, 0.0))])
        log = make_log({"ego": still(10, (0, 0)), "sv": still(10, (3.0, 0.0))})
        report = evaluate_log(log, scene)
        assert report.collided and report.composite == 0.0
        assert report.collision_time == 0.0 and report.collision_agent == "sv"

    def test_reference_from_scenario_requires_future(self):
        scene = scene_of([track_at("ego", (0, 0), AgentKind.EV)])
        with pytest.raises(ValueError, match="future"):
            reference_from_scenario(scene)


class TestReporting:
    def _rows(self):
        return [
            {"template": "lane_follow", "seed": 0, "collided": False,
             "composite": 88.0, "conditional_ade": 0.4},
            {"template": "lane_follow", "seed": 1, "collided": True,
             "composite": 0.0, "conditional_ade": 0.6},
            {"template": "merge", "seed": 0, "collided": False,
             "composite": 70.0, "conditional_ade": math.nan},
        ]

    def test_csv_roundtrip(self, tmp_path):
        path = str(tmp_path / "rows.csv")
        rows = self._rows()
        write_reports_csv(rows, path)
        back = read_reports_csv(path)
        assert len(back) == 3
        assert back[0]["template"] == "lane_follow"
        assert float(back[0]["composite"]) == 88.0
        header = open(path).readline().strip().split(",")
        assert header == list(rows[0].keys())

    def test_csv_rejects_ragged_rows(self, tmp_path):
        rows = self._rows()
        rows[1] = {"template": "x"}
        with pytest.raises(ValueError, match="columns"):
            write_reports_csv(rows, str(tmp_path / "bad.csv"))

    def test_aggregate_rates_and_means(self):
        agg = aggregate(self._rows(), "template")
        lf = agg["lane_follow"]
        assert lf["count"] == 2
        assert lf["collided_rate"] == pytest.approx(0.5)
        assert lf["mean_composite"] == pytest.approx(44.0)
        assert lf["mean_conditional_ade"] == pytest.approx(0.5)
        # nan entries drop out of the mean instead of poisoning it
        assert agg["merge"]["mean_conditional_ade"] != agg["merge"]["mean_conditional_ade"] or \
            math.isnan(agg["merge"]["mean_conditional_ade"])

    def test_report_row_shape(self):
        r = MetricReport(False, None, None, False, None, 0.9, 0, 1.0, 1.0, 97.0)
        row = r.as_row()
        assert row["composite"] == 97.0 and row["collided"] is False
        assert list(row.keys())[0] == "collided"
