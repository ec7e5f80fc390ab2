"""Closed-loop synthetic driving engine.

Advances a scenario at a fixed step: the EV tracks its planner's trajectory
through a kinematic bicycle model with pure-pursuit steering, while the
surrounding vehicles either replay their recorded futures exactly
(nonreactive) or car-follow along their lane with an IDM controller that
treats the EV as a leader when it is ahead in lane (reactive). Every run
produces a JSONL-serializable log with the planner's event stream and a
config hash for provenance.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .decoder import ModeSet
from .framework import PlannerState, SchedulerConfig, UnconditionedMonitorModel, tick
from .geometry import (
    OrientedBox,
    TimedPath,
    box_corners,
    boxes_overlap,
    point_at_arclength,
    polyline_arclengths,
    project_to_polyline,
    wrap_angle,
)
from .scenario import HISTORY_STEPS, STEP_DT, AgentKind, AgentTrack, Scenario

WHEELBASE = 3.0
MAX_STEER = 0.6            # rad
ACCEL_BOUNDS = (-4.0, 3.0)  # m/s^2 tracking-controller clamp
SPEED_GAIN = 2.0           # 1/s proportional speed control
LOOKAHEAD_MIN = 3.0        # m
LOOKAHEAD_TIME = 0.5       # s of travel added to the pursuit distance
EMERGENCY_DECEL = 6.0      # m/s^2 lower clamp on IDM output
OFF_ROAD_MARGIN = 0.3      # m a corner may poke past the lane edge
IN_LANE_LATERAL = 1.75     # m, how close to a centerline counts as in lane

SIM_MODES = ("nonreactive", "reactive")


@dataclass(frozen=True)
class IdmParams:
    desired_speed: float = 10.0   # m/s
    min_gap: float = 2.0          # m, standstill bumper distance
    time_headway: float = 1.5     # s
    max_accel: float = 1.5        # m/s^2
    comfort_decel: float = 2.0    # m/s^2
    exponent: float = 4.0

    def __post_init__(self):
        for name in ("desired_speed", "min_gap", "time_headway", "max_accel",
                     "comfort_decel"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.exponent < 1:
            raise ValueError("exponent must be >= 1")


def idm_acceleration(speed: float, gap: float, closing_speed: float,
                     params: IdmParams) -> float:
    """Car-following acceleration: free-road term minus interaction term.

    gap is bumper to bumper; pass gap=inf, closing_speed=0 for an empty road.
    Output is clamped below at the emergency deceleration.
    """
    if gap <= 0:
        raise ValueError("leader gap must be positive; contact already happened")
    desired = params.min_gap + speed * params.time_headway + \
        speed * closing_speed / (2.0 * math.sqrt(params.max_accel * params.comfort_decel))
    a = params.max_accel * (1.0 - (speed / params.desired_speed) ** params.exponent
                            - (desired / gap) ** 2)
    return max(a, -EMERGENCY_DECEL)


@dataclass
class AgentState:
    position: np.ndarray
    heading: float
    speed: float

    def box(self, length: float, width: float) -> OrientedBox:
        return OrientedBox(self.position, self.heading, length, width)


@dataclass
class WorldState:
    scenario: Scenario
    clock: float
    states: dict  # agent id -> AgentState
    terminated: bool = False
    cause: str | None = None
    # reactive-mode caches, carried along between steps
    lane_paths: dict | None = None      # agent id -> centerline [P, 2]
    idm: dict | None = None             # agent id -> IdmParams

    @classmethod
    def from_scenario(cls, scenario: Scenario) -> "WorldState":
        states = {a.id: AgentState(a.position.copy(), a.heading, a.speed)
                  for a in scenario.agents}
        return cls(scenario, 0.0, states)


def cruise_speed(track: AgentTrack) -> float:
    """Fastest recorded speed; the IDM agent's free-flow setpoint."""
    v = float(track.history.speeds().max())
    if track.future is not None and len(track.future) > 1:
        v = max(v, float(track.future.speeds().max()))
    return max(v, 1.0)


def assign_lanes(scenario: Scenario) -> dict:
    """Each non-EV agent's follow polyline: nearest well-aligned centerline."""
    out = {}
    for a in scenario.agents:
        if a.kind is AgentKind.EV:
            continue
        best = None
        for lane in scenario.lanes:
            cl = lane.centerline()
            s, lat = project_to_polyline(a.position, cl)
            _, tangent = point_at_arclength(cl, s)
            score = lat + 4.0 * abs(wrap_angle(tangent - a.heading))
            if best is None or score < best[0]:
                best = (score, cl)
        out[a.id] = best[1]
    return out


def route_polyline(scenario: Scenario) -> np.ndarray:
    pts = []
    for lane_id in scenario.route:
        cl = scenario.lane(lane_id).centerline()
        if pts and np.linalg.norm(pts[-1] - cl[0]) < 1e-6:
            cl = cl[1:]
        pts.extend(cl)
    return np.asarray(pts)


# ---------------------------------------------------------------------------
# EV tracking controller

def _lookahead_point(plan: TimedPath, clock: float, position: np.ndarray,
                     distance: float) -> np.ndarray:
    ahead = plan.times >= clock - 1e-9
    pts = plan.positions[ahead]
    if len(pts) == 0:
        return plan.positions[-1]
    far = np.linalg.norm(pts - position, axis=1) >= distance
    idx = int(np.argmax(far)) if far.any() else len(pts) - 1
    return pts[idx]


def track_plan(state: AgentState, plan: TimedPath, clock: float,
               dt: float) -> AgentState:
    """One controller step toward the plan: pure-pursuit steering plus
    proportional speed control, integrated through a kinematic bicycle."""
    if clock > plan.end_time + 1e-9:
        raise ValueError(f"plan exhausted: clock {clock} past {plan.end_time}")
    _, _, v_ref = plan.interpolate(min(max(clock, plan.start_time), plan.end_time))
    lookahead = max(LOOKAHEAD_MIN, LOOKAHEAD_TIME * state.speed)
    target = _lookahead_point(plan, clock, state.position, lookahead)
    offset = target - state.position
    dist = float(np.linalg.norm(offset))
    if dist > 1e-6:
        alpha = wrap_angle(math.atan2(offset[1], offset[0]) - state.heading)
        steer = math.atan2(2.0 * WHEELBASE * math.sin(alpha), dist)
    else:
        steer = 0.0
    steer = float(np.clip(steer, -MAX_STEER, MAX_STEER))
    accel = float(np.clip(SPEED_GAIN * (v_ref - state.speed), *ACCEL_BOUNDS))

    v = state.speed
    new_pos = state.position + v * dt * np.array([math.cos(state.heading),
                                                  math.sin(state.heading)])
    turn = v / WHEELBASE * math.tan(steer) * dt
    # avoid wrap-induced float churn when the pose should not change
    new_heading = state.heading if turn == 0.0 else float(wrap_angle(state.heading + turn))
    new_speed = max(0.0, v + accel * dt)
    return AgentState(new_pos, new_heading, new_speed)


# ---------------------------------------------------------------------------
# Surrounding vehicles

def _replay_state(track: AgentTrack, t: float) -> AgentState:
    future = track.future
    if future is None or len(future) == 0:
        return AgentState(track.position.copy(), track.heading, 0.0)
    if t > future.end_time + 1e-9:
        # log exhausted: hold the final pose
        return AgentState(future.positions[-1].copy(),
                          float(future.headings[-1]), 0.0)
    if len(future) > 1:
        # return recorded samples verbatim so replay is exact on the log grid
        idx = int(round((t - future.start_time) / future.step))
        if 0 <= idx < len(future) and abs(future.times[idx] - t) <= 1e-9:
            return AgentState(future.positions[idx].copy(),
                              float(future.headings[idx]),
                              float(future.speeds()[idx]))
    pos, heading, speed = future.interpolate(min(t, future.end_time))
    return AgentState(pos, heading, speed)


def _idm_state(world: WorldState, track: AgentTrack, dt: float) -> AgentState:
    me = world.states[track.id]
    path = world.lane_paths[track.id]
    params = world.idm[track.id]
    s_me, _ = project_to_polyline(me.position, path)
    lead_gap, lead_speed = math.inf, 0.0
    for other in world.scenario.agents:
        if other.id == track.id:
            continue
        st = world.states[other.id]
        s_o, lat_o = project_to_polyline(st.position, path)
        if lat_o > IN_LANE_LATERAL or s_o <= s_me:
            continue
        gap = s_o - s_me - 0.5 * (track.length + other.length)
        if gap < lead_gap:
            lead_gap, lead_speed = gap, st.speed
    if math.isinf(lead_gap):
        accel = idm_acceleration(me.speed, math.inf, 0.0, params)
    elif lead_gap <= 0.05:
        accel = -EMERGENCY_DECEL  # bumper contact imminent: full brake
    else:
        accel = idm_acceleration(me.speed, lead_gap, me.speed - lead_speed, params)
    new_s = s_me + me.speed * dt
    pos, heading = point_at_arclength(path, new_s)
    return AgentState(pos, heading, max(0.0, me.speed + accel * dt))


# ---------------------------------------------------------------------------
# Stepping and termination

def _lane_half_width(lane) -> float:
    return max(p.half_width for p in lane.points)


def off_road(scenario: Scenario, position: np.ndarray, heading: float,
             length: float, width: float,
             margin: float = OFF_ROAD_MARGIN) -> bool:
    """True when any footprint corner is beyond every lane's edge margin."""
    corners = box_corners(np.asarray(position, dtype=float)[None],
                          np.array([float(heading)]), length, width)[0]
    for corner in corners:
        inside = False
        for lane in scenario.lanes:
            _, lat = project_to_polyline(corner, lane.centerline())
            if lat <= _lane_half_width(lane) + margin:
                inside = True
                break
        if not inside:
            return True
    return False


def _snap(t: float, dt: float) -> float:
    return round(t / dt) * dt


def step_world(world: WorldState, ev_plan: TimedPath, mode: str,
               dt: float = STEP_DT,
               idm_base: IdmParams | None = None) -> WorldState:
    """Advance every agent one step and check termination.

    SV updates are synchronous: reactive leaders are resolved against the
    pre-step states, so agent order never matters. idm_base sets the shared
    car-following parameters; each agent's desired speed still comes from
    its own recorded track.
    """
    if mode not in SIM_MODES:
        raise ValueError(f"mode must be one of {SIM_MODES}")
    if world.terminated:
        return world
    scenario = world.scenario
    lane_paths, idm = world.lane_paths, world.idm
    if mode == "reactive" and lane_paths is None:
        base = idm_base if idm_base is not None else IdmParams()
        lane_paths = assign_lanes(scenario)
        idm = {a.id: dataclasses.replace(base, desired_speed=cruise_speed(a))
               for a in scenario.agents if a.kind is not AgentKind.EV}
        world = dataclasses.replace(world, lane_paths=lane_paths, idm=idm)

    t_next = _snap(world.clock + dt, dt)
    ev = scenario.ev
    states = {ev.id: track_plan(world.states[ev.id], ev_plan, world.clock, dt)}
    for a in scenario.agents:
        if a.kind is AgentKind.EV:
            continue
        states[a.id] = _replay_state(a, t_next) if mode == "nonreactive" \
            else _idm_state(world, a, dt)

    terminated, cause = False, None
    ev_box = states[ev.id].box(ev.length, ev.width)
    for a in scenario.agents:
        if a.kind is AgentKind.EV:
            continue
        if boxes_overlap(ev_box, states[a.id].box(a.length, a.width)):
            terminated, cause = True, "collision"
            break
    if not terminated and off_road(scenario, states[ev.id].position,
                                   states[ev.id].heading, ev.length, ev.width):
        terminated, cause = True, "off_road"
    return WorldState(scenario, t_next, states, terminated, cause,
                      lane_paths, idm)


# ---------------------------------------------------------------------------
# Planners the loop can drive

class HeuristicModel:
    """Rule-based stand-in for the learned planner.

    The joint decode offers route-following ego candidates at a few braking
    levels and predicts every other agent at constant velocity in its own
    frame. Lets the scheduler, selection penalty, and safety monitor run
    without trained weights.
    """

    prediction_type = "cmp"
    # hardest candidate stays trackable by the speed controller's accel floor
    DECELS = (0.0, 2.0, 4.0)
    CONFIDENCES = (0.5, 0.3, 0.2)

    def __init__(self, horizon_steps: int = 50, step_dt: float = STEP_DT):
        self.horizon_steps = horizon_steps
        self.step_dt = step_dt

    def _ev_candidates(self, scenario: Scenario) -> np.ndarray:
        route = route_polyline(scenario)
        ev = scenario.ev
        s0, _ = project_to_polyline(ev.position, route)
        v0 = max(float(ev.speed), 0.0)
        out = np.empty((len(self.DECELS), self.horizon_steps, 2))
        for mode, decel in enumerate(self.DECELS):
            s, v = s0, v0
            for k in range(self.horizon_steps):
                v = max(v - decel * self.step_dt, 0.0)
                s = s + v * self.step_dt
                out[mode, k] = point_at_arclength(route, s)[0]
        return out

    def _sv_local(self, track: AgentTrack) -> np.ndarray:
        # constant-acceleration extrapolation; the speed trend from recent
        # history is what makes a braking lead visible before it is close
        speeds = track.history.speeds()
        v = max(float(speeds[-1]), 0.0)
        back = min(5, len(speeds) - 1)
        accel = 0.0
        if back > 0:
            accel = float(np.clip((speeds[-1] - speeds[-1 - back])
                                  / (back * track.history.step), -6.0, 2.0))
        t = (np.arange(self.horizon_steps) + 1) * self.step_dt
        v_t = np.maximum(v + accel * t, 0.0)
        x = np.cumsum(v_t * self.step_dt)
        return np.stack([x, np.zeros_like(x)], axis=-1)

    def plan_modes(self, scenario: Scenario) -> ModeSet:
        n = len(scenario.agents)
        k_modes = len(self.DECELS)
        ids = [a.id for a in scenario.agents]
        frames = [a.frame() for a in scenario.agents]
        locations = np.empty((n, k_modes, self.horizon_steps, 2))
        confidences = np.empty((n, k_modes))
        ev_id = scenario.ev.id
        for i, a in enumerate(scenario.agents):
            if a.id == ev_id:
                g = self._ev_candidates(scenario)
                f = frames[i]
                locations[i] = (g - f.origin) @ f.rotation
                confidences[i] = self.CONFIDENCES
            else:
                locations[i] = self._sv_local(a)[None]
                confidences[i] = (1.0,) + (0.0,) * (k_modes - 1)
        return ModeSet(ids, frames, locations, np.ones_like(locations),
                       confidences, self.step_dt)

    def predict_conditioned(self, scenario: Scenario, plan_now: TimedPath,
                            horizon: int | None = None) -> ModeSet:
        h = self.horizon_steps if horizon is None else min(horizon, self.horizon_steps)
        svs = [a for a in scenario.agents if a.id != scenario.ev.id]
        ids = [a.id for a in svs]
        frames = [a.frame() for a in svs]
        locations = np.stack([self._sv_local(a)[:h] for a in svs])[:, None] \
            if svs else np.zeros((0, 1, h, 2))
        return ModeSet(ids, frames, locations, np.ones_like(locations),
                       np.ones((len(svs), 1)), self.step_dt)

    def describe(self) -> dict:
        return {"model": "heuristic", "horizon_steps": self.horizon_steps,
                "step_dt": self.step_dt, "decels": list(self.DECELS)}


class ClosedLoopPlanner:
    """Scheduler-driven neural planner: one tick per simulation step."""

    def __init__(self, model, config: SchedulerConfig | None = None,
                 prediction_type: str = "cmp"):
        if prediction_type not in ("cmp", "mpp"):
            raise ValueError(f"unknown prediction type {prediction_type!r}")
        if prediction_type == "mpp":
            model = UnconditionedMonitorModel(model)
        self.model = model
        self.prediction_type = prediction_type
        self.config = config or SchedulerConfig()
        self.state = PlannerState()

    def plan(self, snapshot: Scenario, clock: float) -> TimedPath:
        before = len(self.state.events)
        plan_abs, _ = tick(self.state, snapshot, clock, self.model, self.config)
        for e in self.state.events[before:]:
            e["prediction"] = self.prediction_type
        return plan_abs

    @property
    def events(self):
        return self.state.events

    def describe(self) -> dict:
        desc = {"planner": "closed_loop",
                "prediction_type": self.prediction_type,
                "scheduler": dataclasses.asdict(self.config)}
        for attr in ("backbone_config", "decoder_config"):
            cfg = getattr(self.model, attr, None)
            if cfg is not None:
                desc[attr] = dataclasses.asdict(cfg)
        inner = getattr(self.model, "describe", None)
        if inner is not None:
            desc["model"] = inner()
        return desc


class OraclePlanner:
    """Scripted reference: follow the route centerline, either holding the
    speed the EV entered the scene with or chasing a demonstration's speed
    profile. No learned parts; useful as a safety baseline."""

    def __init__(self, horizon_steps: int = 50, step_dt: float = STEP_DT,
                 speed: float | None = None,
                 demonstration: TimedPath | None = None,
                 lead_time: float = 0.8):
        self.horizon_steps = horizon_steps
        self.step_dt = step_dt
        self.speed = speed
        self.demonstration = demonstration
        # reading the demo speed slightly ahead covers the tracker's lag so
        # the executed run never falls behind the demonstration
        self.lead_time = lead_time
        self._v_plan: float | None = None
        self._a_prev = 0.0
        self.events: list = []

    def _demo_speed(self, t: float) -> float:
        demo = self.demonstration
        q = min(max(t + self.lead_time, demo.start_time), demo.end_time)
        return demo.interpolate(q)[2]

    def _profile_arcs(self, s0: float, clock: float, v_now: float) -> np.ndarray:
        # slew-limited chase of the demonstration speed, re-anchored at the
        # plan's own first step each tick so the reference stays jerk-feasible
        v = v_now if self._v_plan is None else self._v_plan
        a_prev = self._a_prev
        arcs = np.empty(self.horizon_steps + 1)
        arcs[0] = s0
        for k in range(self.horizon_steps):
            # small surplus over the demo so onset losses are reclaimed
            target = 1.02 * self._demo_speed(clock + k * self.step_dt) + 0.05
            a = min(2.0 * (target - v), 2.9, a_prev + 0.45)
            a = max(a, -3.0)
            v = max(v + a * self.step_dt, 0.0)
            a_prev = a
            arcs[k + 1] = arcs[k] + v * self.step_dt
            if k == 0:
                first = (v, a)
        self._v_plan, self._a_prev = first
        return arcs

    def plan(self, snapshot: Scenario, clock: float) -> TimedPath:
        route = route_polyline(snapshot)
        ev = snapshot.ev
        s0, _ = project_to_polyline(ev.position, route)
        if self.demonstration is not None:
            arcs = self._profile_arcs(s0, clock, max(float(ev.speed), 0.0))
        else:
            if self.speed is None:
                self.speed = max(float(ev.speed), 0.0)
            arcs = s0 + self.speed * np.arange(self.horizon_steps + 1) * self.step_dt
        samples = [point_at_arclength(route, s) for s in arcs]
        times = clock + np.arange(self.horizon_steps + 1) * self.step_dt
        return TimedPath(times, np.array([p for p, _ in samples]),
                         np.array([h for _, h in samples]))

    def describe(self) -> dict:
        return {"planner": "oracle", "horizon_steps": self.horizon_steps,
                "step_dt": self.step_dt,
                "follows_demonstration": self.demonstration is not None}


# ---------------------------------------------------------------------------
# The rollout loop

@dataclass
class SimLog:
    snapshots: list
    events: list
    ev_trace: list
    metadata: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.snapshots)


def _pose_dict(state: AgentState) -> dict:
    return {"position": [float(state.position[0]), float(state.position[1])],
            "heading": float(state.heading), "speed": float(state.speed)}


def _world_snapshot(world: WorldState) -> dict:
    return {"clock": round(float(world.clock), 9),
            "agents": {aid: _pose_dict(st) for aid, st in
                       sorted(world.states.items())}}


def config_hash(desc: dict) -> str:
    payload = json.dumps(desc, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _planner_snapshot(scenario: Scenario, buffers: dict) -> Scenario:
    times = (np.arange(HISTORY_STEPS) - (HISTORY_STEPS - 1)) * STEP_DT
    agents = []
    for a in scenario.agents:
        poses = buffers[a.id][-HISTORY_STEPS:]
        hist = TimedPath(times, np.array([p for p, _ in poses]),
                         np.array([h for _, h in poses]))
        agents.append(AgentTrack(a.id, a.kind, a.length, a.width, hist, None))
    return dataclasses.replace(scenario, agents=agents)


def run_closed_loop(scenario: Scenario, planner, mode: str = "nonreactive",
                    duration: float = 5.0, seed: int = 0,
                    dt: float = STEP_DT,
                    idm: IdmParams | None = None) -> SimLog:
    """Tick the planner and step the world until the duration elapses or the
    run terminates. Deterministic: same inputs give a bit-identical log."""
    if mode not in SIM_MODES:
        raise ValueError(f"mode must be one of {SIM_MODES}")
    world = WorldState.from_scenario(scenario)
    buffers = {a.id: [(a.history.positions[i].copy(), float(a.history.headings[i]))
                      for i in range(len(a.history))]
               for a in scenario.agents}
    snapshots = [_world_snapshot(world)]
    ev_trace = [dict(_pose_dict(world.states[scenario.ev.id]), clock=0.0)]
    n_steps = int(round(duration / dt))
    for i in range(n_steps):
        clock = _snap(i * dt, dt)
        snap = _planner_snapshot(scenario, buffers)
        plan = planner.plan(snap, clock)
        world = step_world(world, plan, mode, dt, idm)
        for aid, st in world.states.items():
            buffers[aid].append((st.position.copy(), float(st.heading)))
        snapshots.append(_world_snapshot(world))
        ev_trace.append(dict(_pose_dict(world.states[scenario.ev.id]),
                             clock=round(float(world.clock), 9)))
        if world.terminated:
            break
    desc = planner.describe() if hasattr(planner, "describe") else {}
    desc.update({"mode": mode, "dt": dt, "duration": duration,
                 "seed": int(seed), "scenario": scenario.metadata.get("id", "")})
    if idm is not None:
        desc["idm"] = dataclasses.asdict(idm)
    meta = {"mode": mode, "seed": int(seed), "dt": dt, "duration": duration,
            "scenario": scenario.metadata.get("id", ""),
            "terminated": world.terminated, "cause": world.cause,
            "config_hash": config_hash(desc)}
    return SimLog(snapshots, list(getattr(planner, "events", [])), ev_trace, meta)


# ---------------------------------------------------------------------------
# Log serialization

def serialize_simlog(log: SimLog) -> str:
    lines = [json.dumps({"kind": "meta", **log.metadata}, sort_keys=True)]
    for s in log.snapshots:
        lines.append(json.dumps({"kind": "snapshot", **s}, sort_keys=True))
    for p in log.ev_trace:
        lines.append(json.dumps({"kind": "ev", **p}, sort_keys=True))
    for e in log.events:
        lines.append(json.dumps({"kind": "event", **e}, sort_keys=True))
    return "\n".join(lines) + "\n"


def write_simlog(log: SimLog, path: str) -> None:
    with open(path, "w") as f:
        f.write(serialize_simlog(log))


def read_simlog(path: str) -> SimLog:
    meta, snapshots, trace, events = {}, [], [], []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            kind = row.pop("kind")
            if kind == "meta":
                meta = row
            elif kind == "snapshot":
                snapshots.append(row)
            elif kind == "ev":
                trace.append(row)
            elif kind == "event":
                events.append(row)
            else:
                raise ValueError(f"unknown log row kind {kind!r}")
    return SimLog(snapshots, events, trace, meta)
