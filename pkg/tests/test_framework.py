import json

import numpy as np
import pytest

from cloop.decoder import DecoderConfig, ModeSet
from cloop.framework import (
    Decision,
    NeuralModel,
    PlannerState,
    SchedulerConfig,
    min_ttc_against_plan,
    mode_timed_path,
    monitor_step,
    plan_from_mode,
    read_event_log,
    select_trajectory,
    split_ev_modes,
    tick,
    write_event_log,
)
from cloop.backbone import BackboneConfig
from cloop.geometry import LocalFrame, TimedPath, time_to_collision
from cloop.scenario import HISTORY_STEPS, AgentKind, AgentTrack, Lane, LanePoint, Scenario
from cloop.tensor import ParamStore
from cloop.training import _save_checkpoint


def still_track(agent_id, xy, kind=AgentKind.SV, heading=0.0, length=4.0, width=2.0):
    t = (np.arange(HISTORY_STEPS) - (HISTORY_STEPS - 1)) * 0.1
    pos = np.tile(np.asarray(xy, dtype=float), (HISTORY_STEPS, 1))
    return AgentTrack(agent_id, kind, length, width,
                      TimedPath(t, pos, np.full(HISTORY_STEPS, heading)))


def tiny_scene(agents, obstacles=()):
    pts = [LanePoint(np.array([x, 0.0]), 0.0, on_route=True)
           for x in np.arange(-20.0, 20.1, 2.0)]
    return Scenario([Lane("l0", pts)], list(agents), list(obstacles), ["l0"])


def frame_at(xy, heading=0.0):
    return LocalFrame(np.asarray(xy, dtype=float), heading)


def mode_set(frames, locations, confidences, ids=None, dt=0.1):
    locations = np.asarray(locations, dtype=float)
    n, k, t, _ = locations.shape
    ids = ids or [f"a{i}" for i in range(n)]
    return ModeSet(ids, list(frames), locations, np.ones((n, k, t, 2)),
                   np.asarray(confidences, dtype=float), dt)


def straight_modes(frame, speeds, confidences, horizon=50, dt=0.1):
    """One agent, one straight +x local mode per speed."""
    t = (np.arange(horizon) + 1) * dt
    loc = np.stack([np.stack([v * t, np.zeros(horizon)], axis=-1) for v in speeds])
    return mode_set([frame], loc[None], [confidences], dt=dt)


class FakeModel:
    """Scripted stand-in: everyone predicted stationary, with an optional
    window of wall-clock times in which conditioned predictions put the
    first SV on top of the plan start."""

    def __init__(self, horizon=60, danger_window=None):
        self.horizon = horizon
        self.danger_window = danger_window
        self.clock = 0.0
        self.cmp_calls = 0
        self.plan_calls = 0

    def _stationary(self, agents, horizon):
        n = len(agents)
        loc = np.zeros((n, 2, horizon, 2))
        conf = np.tile([0.7, 0.3], (n, 1))
        return ModeSet([a.id for a in agents], [a.frame() for a in agents],
                       loc, np.ones((n, 2, horizon, 2)), conf, 0.1)

    def plan_modes(self, scenario):
        self.plan_calls += 1
        return self._stationary(scenario.agents, self.horizon)

    def predict_conditioned(self, scenario, plan_now, horizon=None):
        self.cmp_calls += 1
        h = horizon or self.horizon
        svs = [a for a in scenario.agents if a.kind != AgentKind.EV]
        ms = self._stationary(svs, h)
        if self.danger_window is not None:
            lo, hi = self.danger_window
            if lo <= self.clock <= hi and svs:
                # top mode of SV 0 parked on the plan's current position
                target = plan_now.positions[0]
                local = (target - ms.frames[0].origin) @ ms.frames[0].rotation
                ms.locations[0, 0] = local
        return ms


def run_loop(scenario, model, config, ticks):
    state = PlannerState()
    for i in range(ticks):
        clock = i * config.monitor_period
        model.clock = clock
        tick(state, scenario, clock, model, config)
    return state


def events_of(state, kind):
    return [e for e in state.events if e["event"] == kind]


class TestSchedulerConfig:
    def test_defaults(self):
        cfg = SchedulerConfig()
        assert cfg.ticks_per_cycle == 20
        assert cfg.plan_period == 2.0 and cfg.monitor_period == 0.1

    def test_non_multiple_rejected(self):
        with pytest.raises(ValueError, match="integer multiple"):
            SchedulerConfig(plan_period=0.25, monitor_period=0.1)

    def test_degenerate_single_tick_cycle(self):
        assert SchedulerConfig(plan_period=0.1).ticks_per_cycle == 1

    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            SchedulerConfig(ttc_penalty=-1.0)
        with pytest.raises(ValueError):
            SchedulerConfig(ttc_trigger_threshold=0.0)
        with pytest.raises(ValueError):
            SchedulerConfig(monitor_period=-0.1)
        with pytest.raises(ValueError):
            SchedulerConfig(replan_latency=-0.5)


class TestDecision:
    def test_reason_iff_replan(self):
        Decision(True, "ttc_danger")
        Decision(False)
        with pytest.raises(ValueError):
            Decision(True)
        with pytest.raises(ValueError):
            Decision(False, "cycle_elapsed")

    def test_unknown_reason_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            Decision(True, "bored")


class TestSplitModes:
    def test_partition(self):
        frames = [frame_at((0, 0)), frame_at((5, 0)), frame_at((9, 1))]
        loc = np.arange(3 * 2 * 4 * 2, dtype=float).reshape(3, 2, 4, 2)
        joint = mode_set(frames, loc, np.tile([0.5, 0.5], (3, 1)),
                         ids=["s0", "ego", "s1"])
        ev, sv = split_ev_modes(joint, "ego")
        assert ev.agent_ids == ["ego"] and sv.agent_ids == ["s0", "s1"]
        assert np.array_equal(ev.locations[0], loc[1])
        assert np.array_equal(sv.locations, loc[[0, 2]])

    def test_missing_agent(self):
        joint = mode_set([frame_at((0, 0))], np.zeros((1, 1, 3, 2)), [[1.0]])
        with pytest.raises(ValueError, match="not in mode set"):
            split_ev_modes(joint, "ghost")


class TestPlanFromMode:
    def test_prepends_current_pose(self):
        frame = frame_at((3.0, 4.0), np.pi / 2)
        ms = straight_modes(frame, [2.0], [1.0], horizon=5)
        plan = plan_from_mode(ms, 0)
        assert np.allclose(plan.times, np.arange(6) * 0.1)
        assert np.allclose(plan.positions[0], [3.0, 4.0])
        assert plan.headings[0] == np.pi / 2
        # +x local at heading pi/2 points +y in the global frame
        assert np.allclose(plan.positions[1:], ms.global_trajectory(0, 0))
        assert np.allclose(plan.positions[-1], [3.0, 5.0])
        assert np.allclose(plan.headings[1:], np.pi / 2)

    def test_stationary_mode_keeps_heading(self):
        frame = frame_at((1.0, 1.0), 0.7)
        ms = straight_modes(frame, [0.0], [1.0], horizon=4)
        plan = plan_from_mode(ms, 0)
        assert np.allclose(plan.positions, [1.0, 1.0])
        assert np.allclose(plan.headings, 0.7)

    def test_mode_path_headings_follow_motion(self):
        frame = frame_at((0.0, 0.0), 0.0)
        t = np.arange(1, 5) * 0.1
        loc = np.stack([np.zeros(4), 3.0 * t], axis=-1)[None, None]
        ms = mode_set([frame], loc, [[1.0]])
        path = mode_timed_path(ms, 0, 0)
        assert np.allclose(path.headings, np.pi / 2)


class TestSelectTrajectory:
    def _colliding_sv(self, x=2.0, horizon=50):
        # parked ahead of the EV, squarely on the straight-ahead mode
        return straight_modes(frame_at((x, 0.0)), [0.0], [1.0], horizon)

    def test_penalty_prefers_safe_runner_up(self):
        # fast mode reaches the car parked 20 m out; the braking mode never does
        ev = straight_modes(frame_at((0, 0)), [8.0, 0.0], [0.7, 0.3])
        k, plan, info = select_trajectory(ev, self._colliding_sv(x=20.0),
                                          SchedulerConfig())
        assert k == 1
        assert info["min_ttc"][0] < 3.0 and np.isinf(info["min_ttc"][1])
        assert info["penalized"][0] == pytest.approx(0.7 - 10.0)
        assert np.allclose(plan.positions[0], [0.0, 0.0])

    def test_zero_penalty_is_pure_argmax(self):
        ev = straight_modes(frame_at((0, 0)), [8.0, 0.0], [0.7, 0.3])
        k, _, _ = select_trajectory(ev, self._colliding_sv(x=20.0),
                                    SchedulerConfig(ttc_penalty=0.0))
        assert k == 0

    def test_no_neighbors_is_argmax(self):
        ev = straight_modes(frame_at((0, 0)), [8.0, 0.0], [0.2, 0.8])
        k, _, info = select_trajectory(ev, None, SchedulerConfig())
        assert k == 1 and np.isinf(info["min_ttc"]).all()

    def test_both_penalized_falls_back_to_confidence(self):
        # two modes at different speeds, both reach the parked SV early
        ev = straight_modes(frame_at((0, 0)), [8.0, 4.0], [0.4, 0.6])
        k, _, info = select_trajectory(ev, self._colliding_sv(),
                                       SchedulerConfig())
        assert (info["min_ttc"] < 3.0).all()
        assert k == 1

    def test_exact_tie_takes_lower_index(self):
        ev = straight_modes(frame_at((0, 0)), [0.0, 0.0], [0.5, 0.5])
        k, _, _ = select_trajectory(ev, None, SchedulerConfig())
        assert k == 0

    def test_selection_threshold_boundary(self):
        # collision at ~2.5 s penalized under the 3 s threshold, not under 2 s
        ev = straight_modes(frame_at((0, 0)), [10.0], [1.0])
        sv = straight_modes(frame_at((28.0, 0.0)), [0.0], [1.0])
        _, _, info = select_trajectory(ev, sv, SchedulerConfig())
        ttc = info["min_ttc"][0]
        assert 2.0 < ttc < 3.0
        assert info["penalized"][0] == pytest.approx(1.0 - 10.0)
        _, _, info2 = select_trajectory(
            ev, sv, SchedulerConfig(ttc_selection_threshold=2.0))
        assert info2["penalized"][0] == pytest.approx(1.0)

    def test_sv_reduced_to_top_mode(self):
        # SV's low-confidence mode blocks, top mode is clear: no penalty
        frame = frame_at((6.0, 0.0))
        t = (np.arange(50) + 1) * 0.1
        blocking = np.stack([np.zeros(50), np.zeros(50)], axis=-1)
        clear = np.stack([np.zeros(50), np.full(50, 30.0)], axis=-1)
        sv = mode_set([frame], np.stack([blocking, clear])[None],
                      [[0.2, 0.8]])
        ev = straight_modes(frame_at((0, 0)), [8.0], [1.0])
        _, _, info = select_trajectory(ev, sv, SchedulerConfig())
        assert np.isinf(info["min_ttc"][0])

    def test_extent_count_mismatch(self):
        ev = straight_modes(frame_at((0, 0)), [1.0], [1.0])
        with pytest.raises(ValueError, match="extent"):
            select_trajectory(ev, self._colliding_sv(), SchedulerConfig(),
                              sv_extents=[(4.0, 2.0), (4.0, 2.0)])

    def test_randomized_against_bruteforce(self):
        rng = np.random.default_rng(11)
        cfg = SchedulerConfig(ttc_penalty=0.5, ttc_selection_threshold=2.0)
        ev_ext = (4.6, 2.0)
        for trial in range(40):
            k_modes, n_sv, horizon = 4, int(rng.integers(0, 4)), 30
            ev_frame = frame_at(rng.normal(0, 5, 2), rng.uniform(-np.pi, np.pi))
            steps = rng.normal(0.6, 0.5, (1, k_modes, horizon, 2))
            ev = mode_set([ev_frame], np.cumsum(steps, axis=2),
                          [np.random.default_rng(trial).dirichlet(np.ones(k_modes))])
            sv = None
            sv_exts = []
            if n_sv:
                frames = [frame_at(rng.normal(0, 8, 2), rng.uniform(-np.pi, np.pi))
                          for _ in range(n_sv)]
                walks = np.cumsum(rng.normal(0.4, 0.5, (n_sv, 2, horizon, 2)), axis=2)
                conf = rng.dirichlet(np.ones(2), size=n_sv)
                sv = mode_set(frames, walks, conf)
                sv_exts = [tuple(rng.uniform(1.5, 5.0, 2)) for _ in range(n_sv)]
            got, _, info = select_trajectory(ev, sv, cfg, ev_ext, sv_exts or None)

            # independent re-derivation of the penalized pick
            penalized = np.array(ev.confidences[0], dtype=float)
            for k in range(k_modes):
                worst = np.inf
                for i in range(n_sv):
                    top = int(sv.confidences[i].argmax())
                    ttc = time_to_collision(
                        mode_timed_path(ev, 0, k), ev_ext,
                        mode_timed_path(sv, i, top), sv_exts[i])
                    if ttc is not None:
                        worst = min(worst, ttc)
                if worst < cfg.ttc_selection_threshold:
                    penalized[k] -= cfg.ttc_penalty
                assert info["min_ttc"][k] == pytest.approx(
                    worst if np.isfinite(worst) else np.inf)
            want = int(np.lexsort((np.arange(k_modes), -ev.confidences[0],
                                   -penalized))[0])
            assert got == want, f"trial {trial}"


def monitoring_state(plan, birth=0.0):
    return PlannerState(plan=plan, plan_birth=birth, phase="monitoring",
                        chosen_mode=0)


def stationary_plan(horizon=60, dt=0.1, origin=(0.0, 0.0), heading=0.0):
    t = np.arange(horizon + 1) * dt
    pos = np.tile(np.asarray(origin, dtype=float), (horizon + 1, 1))
    return TimedPath(t, pos, np.full(horizon + 1, heading))


def sv_on(point, horizon=15):
    """Conditioned prediction: one SV parked on the given global point."""
    frame = frame_at((10.0, 10.0))
    local = (np.asarray(point, dtype=float) - frame.origin) @ frame.rotation
    loc = np.tile(local, (1, 1, horizon, 1))
    return mode_set([frame], loc, [[1.0]])


class TestMonitorStep:
    CFG = SchedulerConfig()
    EGO = (np.zeros(2), 0.0)

    def test_quiet_continue_with_telemetry(self):
        st = monitoring_state(stationary_plan())
        d = monitor_step(st, sv_on((40.0, 40.0)), self.EGO, 0.5, self.CFG)
        assert not d.replan and d.reason is None
        assert d.min_ttc is None  # nothing collides

    def test_ttc_danger(self):
        st = monitoring_state(stationary_plan())
        d = monitor_step(st, sv_on((0.5, 0.0)), self.EGO, 0.5, self.CFG)
        assert d.replan and d.reason == "ttc_danger"
        assert d.min_ttc == pytest.approx(0.1)

    def test_trigger_threshold_respected(self):
        # collision predicted at 1.4 s triggers; 1.6 s does not
        st = monitoring_state(stationary_plan())
        horizon = 20
        loc = np.tile([[60.0, 0.0]], (horizon, 1))
        loc[13:] = 0.0  # overlaps from step 14 -> 1.4 s
        ms = mode_set([frame_at((0.0, 0.0))], loc[None, None], [[1.0]])
        d = monitor_step(st, ms, self.EGO, 0.0, self.CFG)
        assert d.replan and d.reason == "ttc_danger" and d.min_ttc == pytest.approx(1.4)
        loc2 = np.tile([[60.0, 0.0]], (horizon, 1))
        loc2[15:] = 0.0
        ms2 = mode_set([frame_at((0.0, 0.0))], loc2[None, None], [[1.0]])
        d2 = monitor_step(st, ms2, self.EGO, 0.0, self.CFG)
        assert not d2.replan and d2.min_ttc == pytest.approx(1.6)

    def test_lateral_deviation(self):
        st = monitoring_state(stationary_plan())
        d = monitor_step(st, None, (np.array([0.0, 1.5]), 0.0), 0.5, self.CFG)
        assert d.replan and d.reason == "deviation"
        ok = monitor_step(st, None, (np.array([0.0, 0.5]), 0.0), 0.5, self.CFG)
        assert not ok.replan

    def test_longitudinal_deviation(self):
        st = monitoring_state(stationary_plan())
        d = monitor_step(st, None, (np.array([3.0, 0.0]), 0.0), 0.5, self.CFG)
        assert d.replan and d.reason == "deviation"
        ok = monitor_step(st, None, (np.array([2.0, 0.0]), 0.0), 0.5, self.CFG)
        assert not ok.replan

    def test_deviation_measured_in_plan_frame(self):
        # plan heading +y: a +x offset is lateral there, not longitudinal
        st = monitoring_state(stationary_plan(heading=np.pi / 2))
        d = monitor_step(st, None, (np.array([1.5, 0.0]), 0.0), 0.5, self.CFG)
        assert d.replan and d.reason == "deviation"

    def test_plan_exhausted(self):
        st = monitoring_state(stationary_plan(horizon=5))  # covers 0.5 s
        d = monitor_step(st, None, self.EGO, 0.45, self.CFG)
        assert d.replan and d.reason == "plan_exhausted"

    def test_never_continue_without_coverage(self):
        cfg = self.CFG
        st = monitoring_state(stationary_plan(horizon=7))  # 0.7 s plan
        for i in range(1, 30):
            clock = i * cfg.monitor_period
            d = monitor_step(st, None, self.EGO, clock, cfg)
            remaining = st.plan.end_time - (clock - st.plan_birth)
            if remaining < cfg.monitor_period - 1e-9:
                assert d.replan, f"no replan at rel {clock}"

    def test_cycle_boundary_inclusive(self):
        st = monitoring_state(stationary_plan())
        before = monitor_step(st, None, self.EGO, 1.9, self.CFG)
        assert not before.replan
        at = monitor_step(st, None, self.EGO, 2.0, self.CFG)
        assert at.replan and at.reason == "cycle_elapsed"
        accumulated = sum([0.1] * 20)  # 1.9999999999999998
        assert monitor_step(st, None, self.EGO, accumulated, self.CFG).replan

    def test_priority_order(self):
        cfg = self.CFG
        # everything wrong at once: danger outranks deviation outranks cycle
        st = monitoring_state(stationary_plan())
        far_ego = (np.array([5.0, 5.0]), 0.0)
        d = monitor_step(st, sv_on((0.2, 0.0)), far_ego, 2.0, cfg)
        assert d.reason == "ttc_danger"
        d = monitor_step(st, sv_on((40.0, 40.0)), far_ego, 2.0, cfg)
        assert d.reason == "deviation"
        short = monitoring_state(stationary_plan(horizon=20))  # 2 s plan
        d = monitor_step(short, sv_on((40.0, 40.0)), self.EGO, 1.95, cfg)
        assert d.reason == "plan_exhausted"
        d = monitor_step(st, sv_on((40.0, 40.0)), self.EGO, 2.0, cfg)
        assert d.reason == "cycle_elapsed"

    def test_triggers_toggleable(self):
        no_ttc = SchedulerConfig(enable_ttc_trigger=False)
        st = monitoring_state(stationary_plan())
        d = monitor_step(st, sv_on((0.2, 0.0)), self.EGO, 0.5, no_ttc)
        assert not d.replan
        no_dev = SchedulerConfig(enable_deviation_trigger=False)
        d = monitor_step(st, None, (np.array([9.0, 9.0]), 0.0), 0.5, no_dev)
        assert not d.replan

    def test_requires_plan(self):
        with pytest.raises(ValueError, match="active plan"):
            monitor_step(PlannerState(), None, self.EGO, 0.0, self.CFG)


class TestMinTtcAgainstPlan:
    def test_grid_truncated_to_plan(self):
        plan = stationary_plan(horizon=5)  # 0.5 s coverage
        ms = sv_on((0.0, 0.0), horizon=15)  # asks about 1.5 s
        assert min_ttc_against_plan(plan, ms) == pytest.approx(0.1)

    def test_none_when_clear(self):
        assert min_ttc_against_plan(stationary_plan(), sv_on((50.0, 0.0))) is None

    def test_worst_neighbor_wins(self):
        plan = stationary_plan()
        frames = [frame_at((10.0, 10.0)), frame_at((-9.0, 3.0))]
        horizon = 15
        near = np.tile(((np.array([0.0, 0.0]) - frames[0].origin)
                        @ frames[0].rotation), (horizon, 1))
        later = np.tile(((np.array([50.0, 0.0]) - frames[1].origin)
                         @ frames[1].rotation), (horizon, 1))
        later[8:] = (np.array([0.0, 0.0]) - frames[1].origin) @ frames[1].rotation
        ms = mode_set(frames, np.stack([near[None], later[None]]), [[1.0], [1.0]])
        assert min_ttc_against_plan(plan, ms) == pytest.approx(0.1)


class TestTickLoop:
    def scene(self):
        return tiny_scene([still_track("ego", (0.0, 0.0), AgentKind.EV),
                           still_track("sv0", (60.0, 0.0))])

    def test_quiet_ten_seconds(self):
        cfg = SchedulerConfig()
        state = run_loop(self.scene(), FakeModel(), cfg, 100)
        planned = events_of(state, "planned")
        assert len(planned) == 5
        assert [e["time"] for e in planned] == [0.0, 2.0, 4.0, 6.0, 8.0]
        assert len(events_of(state, "monitored_ok")) == 95
        assert events_of(state, "replan_triggered") == []
        assert planned[0]["reason"] == "initial"
        assert all(e["reason"] == "cycle_elapsed" for e in planned[1:])

    def test_degenerate_every_tick(self):
        cfg = SchedulerConfig(plan_period=0.1)
        state = run_loop(self.scene(), FakeModel(), cfg, 30)
        assert len(events_of(state, "planned")) == 30
        assert events_of(state, "monitored_ok") == []

    def test_monitor_count_between_cycles(self):
        cfg = SchedulerConfig(plan_period=0.5)
        state = run_loop(self.scene(), FakeModel(), cfg, 60)
        n = cfg.ticks_per_cycle
        kinds = [(e["event"], e.get("reason")) for e in state.events]
        planned_idx = [i for i, (k, _) in enumerate(kinds) if k == "planned"]
        assert len(planned_idx) >= 3
        for a, b in zip(planned_idx, planned_idx[1:]):
            between = kinds[a + 1:b]
            assert all(k == "monitored_ok" for k, _ in between)
            assert len(between) == n - 1

    def test_danger_replans_same_tick(self):
        cfg = SchedulerConfig()
        model = FakeModel(danger_window=(0.65, 0.75))
        state = run_loop(self.scene(), model, cfg, 100)
        triggered = events_of(state, "replan_triggered")
        assert len(triggered) == 1
        assert triggered[0]["reason"] == "ttc_danger"
        assert triggered[0]["time"] == 0.7
        assert triggered[0]["min_ttc"] == pytest.approx(0.1)
        # same-tick replan, and the cycle clock restarts from the trigger
        planned_times = [e["time"] for e in events_of(state, "planned")]
        assert planned_times == [0.0, 0.7, 2.7, 4.7, 6.7, 8.7]
        trig_i = state.events.index(triggered[0])
        assert state.events[trig_i + 1]["event"] == "planned"
        assert state.events[trig_i + 1]["time"] == 0.7
        assert state.events[trig_i + 1]["reason"] == "ttc_danger"

    def test_deviation_replan(self):
        cfg = SchedulerConfig()
        scene = self.scene()
        state = PlannerState()
        model = FakeModel()
        tick(state, scene, 0.0, model, cfg)
        moved = tiny_scene([still_track("ego", (0.0, 1.4), AgentKind.EV),
                            still_track("sv0", (60.0, 0.0))])
        tick(state, moved, 0.1, model, cfg)
        assert state.events[-2]["event"] == "replan_triggered"
        assert state.events[-2]["reason"] == "deviation"
        assert state.events[-1]["event"] == "planned"
        # new plan starts from where the ego actually is
        assert np.allclose(state.plan.positions[0], [0.0, 1.4])

    def test_short_plan_exhaustion_replans(self):
        cfg = SchedulerConfig()
        model = FakeModel(horizon=3)  # plans only cover 0.3 s
        state = run_loop(self.scene(), model, cfg, 10)
        reasons = {e["reason"] for e in events_of(state, "replan_triggered")}
        assert reasons == {"plan_exhausted"}
        for e in events_of(state, "monitored_ok"):
            # monitoring never let coverage drop below one period
            assert e["min_ttc"] is None

    def test_adaptive_off_skips_model_monitor(self):
        cfg = SchedulerConfig(enable_ttc_trigger=False,
                              enable_deviation_trigger=False)
        model = FakeModel(danger_window=(0.0, 10.0))
        state = run_loop(self.scene(), model, cfg, 60)
        assert model.cmp_calls == 0
        assert [e["time"] for e in events_of(state, "planned")] == [0.0, 2.0, 4.0]
        assert events_of(state, "replan_triggered") == []

    def test_latency_defers_adoption(self):
        cfg = SchedulerConfig(replan_latency=0.2)
        model = FakeModel(danger_window=(0.65, 0.72))
        state = run_loop(self.scene(), model, cfg, 20)
        trig = events_of(state, "replan_triggered")
        assert [e["time"] for e in trig] == [0.7]
        planned = events_of(state, "planned")
        assert [e["time"] for e in planned] == [0.0, 0.9]
        assert planned[1]["reason"] == "ttc_danger"
        # the old plan kept executing during the wait
        ok_times = [e["time"] for e in events_of(state, "monitored_ok")]
        assert 0.8 in ok_times

    def test_returns_absolute_plan(self):
        cfg = SchedulerConfig()
        state = PlannerState()
        model = FakeModel()
        plan0, _ = tick(state, self.scene(), 0.0, model, cfg)
        assert plan0.start_time == 0.0
        for i in range(1, 25):
            model.clock = i * 0.1
            plan, _ = tick(state, self.scene(), i * 0.1, model, cfg)
            assert plan.start_time == pytest.approx(state.plan_birth)
            assert plan.end_time >= i * 0.1 + cfg.monitor_period - 1e-9

    def test_event_log_roundtrip(self, tmp_path):
        state = run_loop(self.scene(), FakeModel(danger_window=(0.3, 0.4)),
                         SchedulerConfig(), 30)
        path = str(tmp_path / "events.jsonl")
        write_event_log(state.events, path)
        assert read_event_log(path) == json.loads(json.dumps(state.events))
        first = open(path).readline()
        assert json.loads(first)["event"] == "planned"


class TestNeuralModel:
    def test_plan_and_monitor_shapes(self):
        bcfg = BackboneConfig(hidden_dim=16, heads=2, temporal_layers=1, modes=2)
        dcfg = DecoderConfig(horizon_steps=25, step_dt=0.1, heads=2)
        store = ParamStore(0)
        model = NeuralModel(store, bcfg, dcfg)
        scene = tiny_scene([still_track("ego", (0.0, 0.0), AgentKind.EV),
                            still_track("sv0", (8.0, 3.0))])
        joint = model.plan_modes(scene)
        assert joint.agent_ids == ["ego", "sv0"]
        assert joint.horizon == 25
        ev, sv = split_ev_modes(joint, "ego")
        k, plan, _ = select_trajectory(ev, sv, SchedulerConfig())
        cond = model.predict_conditioned(scene, plan, horizon=10)
        assert cond.agent_ids == ["sv0"] and cond.horizon == 10

    def test_checkpoint_roundtrip(self, tmp_path):
        bcfg = BackboneConfig(hidden_dim=8, heads=2, temporal_layers=1, modes=2)
        dcfg = DecoderConfig(horizon_steps=7, step_dt=0.1, heads=2)
        store = ParamStore(3)
        store["probe/w"] = np.arange(4.0).reshape(2, 2)
        path = str(tmp_path / "model.weights")
        _save_checkpoint(store, path, {
            "backbone_config": {"hidden_dim": 8, "heads": 2,
                                "temporal_layers": 1, "modes": 2},
            "decoder_config": {"horizon_steps": 7, "step_dt": 0.1, "heads": 2},
        })
        model = NeuralModel.from_checkpoint(path)
        assert model.decoder_config.horizon_steps == 7
        assert model.backbone_config.hidden_dim == 8
        assert np.array_equal(model.store["probe/w"], store["probe/w"])

    def test_checkpoint_without_sidecar_uses_defaults(self, tmp_path):
        store = ParamStore(0)
        store["x"] = np.ones(3)
        path = str(tmp_path / "bare.weights")
        store.save(path)
        model = NeuralModel.from_checkpoint(path)
        assert model.decoder_config.horizon_steps == 50

    def test_closed_loop_ticks_with_neural_model(self):
        bcfg = BackboneConfig(hidden_dim=16, heads=2, temporal_layers=1, modes=2)
        dcfg = DecoderConfig(horizon_steps=25, step_dt=0.1, heads=2)
        model = NeuralModel(ParamStore(1), bcfg, dcfg)
        scene = tiny_scene([still_track("ego", (0.0, 0.0), AgentKind.EV),
                            still_track("sv0", (12.0, 0.0))])
        cfg = SchedulerConfig(plan_period=0.5,
                              lateral_deviation_limit=50.0,
                              longitudinal_deviation_limit=50.0)
        state = PlannerState()
        for i in range(6):
            tick(state, scene, i * 0.1, model, cfg)
        kinds = [e["event"] for e in state.events]
        assert kinds[0] == "planned"
        assert len([k for k in kinds if k == "planned"]) >= 2
