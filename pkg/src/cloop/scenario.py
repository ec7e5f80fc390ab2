"""World data model: lanes, agents, obstacles, routes, plus synthetic generation.

Scenarios are treated as immutable after construction. Files use a versioned
JSON schema (see docs/scenario_schema.md); all positions are meters, angles
radians, times seconds, with agent histories ending at t = 0.
"""
from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    LocalFrame,
    OrientedBox,
    TimedPath,
    point_at_arclength,
    polyline_arclengths,
    project_to_polyline,
    rotation_from_heading,
    wrap_angle,
)

HISTORY_STEPS = 21          # 2 s of history at 0.1 s, ending at t=0
FUTURE_STEPS = 50           # 5 s ground-truth horizon
STEP_DT = 0.1
LANE_HALF_WIDTH = 1.75
LANE_SAMPLE_DS = 2.0


class ScenarioError(Exception):
    pass


class ScenarioParseError(ScenarioError):
    pass


class ScenarioValidationError(ScenarioError):
    pass


class TrafficLight(enum.Enum):
    GREEN = "green"
    RED = "red"
    UNKNOWN = "unknown"


class LaneType(enum.Enum):
    DRIVING = "driving"
    TURN = "turn"
    OTHER = "other"


class AgentKind(enum.Enum):
    EV = "EV"
    SV = "SV"


class ObstacleType(enum.Enum):
    CONE = "cone"
    BARRIER = "barrier"
    DEBRIS = "debris"


@dataclass(frozen=True)
class LanePoint:
    position: np.ndarray
    tangent: float
    traffic_light: TrafficLight = TrafficLight.UNKNOWN
    lane_type: LaneType = LaneType.DRIVING
    on_route: bool = False
    half_width: float = LANE_HALF_WIDTH

    def __post_init__(self):
        if self.half_width <= 0:
            raise ScenarioValidationError(
                f"lane point half_width must be > 0, got {self.half_width}")
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))

    def attributes(self) -> np.ndarray:
        """One-hot attribute vector: traffic light (3), lane type (3), on-route flag."""
        v = np.zeros(7)
        v[list(TrafficLight).index(self.traffic_light)] = 1.0
        v[3 + list(LaneType).index(self.lane_type)] = 1.0
        v[6] = 1.0 if self.on_route else 0.0
        return v


@dataclass(frozen=True)
class Lane:
    id: str
    points: list[LanePoint]

    def centerline(self) -> np.ndarray:
        return np.array([p.position for p in self.points])


@dataclass(frozen=True)
class AgentTrack:
    id: str
    kind: AgentKind
    length: float
    width: float
    history: TimedPath
    future: TimedPath | None = None

    def __post_init__(self):
        if abs(self.history.end_time) > 1e-9:
            raise ScenarioValidationError(
                f"agent {self.id}: history must end at t=0, ends at {self.history.end_time}")

    @property
    def position(self) -> np.ndarray:
        """Position at t=0 (last history sample)."""
        return self.history.positions[-1]

    @property
    def heading(self) -> float:
        return float(self.history.headings[-1])

    @property
    def speed(self) -> float:
        return float(self.history.speeds()[-1])

    def frame(self) -> LocalFrame:
        return LocalFrame(self.position, self.heading)

    def box(self) -> OrientedBox:
        return OrientedBox(self.position, self.heading, self.length, self.width)


@dataclass(frozen=True)
class Obstacle:
    position: np.ndarray
    type: ObstacleType = ObstacleType.CONE
    extent: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))


@dataclass(frozen=True)
class Scenario:
    lanes: list[Lane]
    agents: list[AgentTrack]
    obstacles: list[Obstacle]
    route: list[str]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ev_count = sum(1 for a in self.agents if a.kind is AgentKind.EV)
        if ev_count != 1:
            raise ScenarioValidationError(f"exactly one EV required, found {ev_count}")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ScenarioValidationError(f"duplicate agent ids: {ids}")
        lane_ids = {lane.id for lane in self.lanes}
        for rid in self.route:
            if rid not in lane_ids:
                raise ScenarioValidationError(f"route references unknown lane id {rid!r}")
        base = self.agents[0].history.times
        for a in self.agents[1:]:
            if len(a.history.times) != len(base) or np.abs(a.history.times - base).max() > 1e-9:
                raise ScenarioValidationError(
                    f"agent {a.id}: history time base differs from agent {self.agents[0].id}")

    @property
    def ev(self) -> AgentTrack:
        return next(a for a in self.agents if a.kind is AgentKind.EV)

    def agent(self, agent_id: str) -> AgentTrack:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(f"unknown agent id {agent_id!r}")

    def lane(self, lane_id: str) -> Lane:
        for lane in self.lanes:
            if lane.id == lane_id:
                return lane
        raise KeyError(f"unknown lane id {lane_id!r}")


# ---------------------------------------------------------------------------
# Queries

def nearest_agents(scenario: Scenario, agent_id: str, radius: float = np.inf,
                   k: int | None = None) -> list[str]:
    """Ids of other agents within radius of agent_id at t=0, nearest first.

    Ties break by id so the result is deterministic.
    """
    center = scenario.agent(agent_id).position
    rows = []
    for a in scenario.agents:
        if a.id == agent_id:
            continue
        d = float(np.linalg.norm(a.position - center))
        if d <= radius:
            rows.append((d, a.id))
    rows.sort()
    if k is not None:
        rows = rows[:k]
    return [aid for _, aid in rows]


def sample_lane_points(scenario: Scenario, frame: LocalFrame, radius: float,
                       max_points: int | None = None,
                       route_only: bool = False) -> list[LanePoint]:
    """Lane points within radius of the frame origin, nearest first.

    Positions stay in global coordinates; callers transform during encoding.
    route_only restricts to lanes on the scenario route.
    """
    route_ids = set(scenario.route)
    rows = []
    for li, lane in enumerate(scenario.lanes):
        if route_only and lane.id not in route_ids:
            continue
        pts = lane.centerline()
        if len(pts) == 0:
            continue
        d = np.linalg.norm(pts - frame.origin, axis=1)
        for pi in np.nonzero(d <= radius)[0]:
            rows.append((float(d[pi]), li, int(pi)))
    rows.sort()
    if max_points is not None:
        rows = rows[:max_points]
    return [scenario.lanes[li].points[pi] for _, li, pi in rows]


def nearest_centerline_clearance(scenario: Scenario, point: np.ndarray) -> tuple[float, float]:
    """(lateral distance, half_width) for the lane centerline closest to point."""
    best = None
    for lane in scenario.lanes:
        pts = lane.centerline()
        if len(pts) < 2:
            continue
        s, lat = project_to_polyline(point, pts)
        if best is None or lat < best[0]:
            arcs = polyline_arclengths(pts)
            idx = int(np.searchsorted(arcs, s, side="left"))
            idx = min(idx, len(lane.points) - 1)
            best = (lat, lane.points[idx].half_width)
    if best is None:
        raise ScenarioValidationError("scenario has no usable lanes")
    return best


def _concat_polylines(parts: list[np.ndarray]) -> np.ndarray:
    pts = []
    for cl in parts:
        if pts and np.linalg.norm(pts[-1] - cl[0]) < 1e-6:
            cl = cl[1:]
        pts.extend(cl)
    if len(pts) < 2:
        raise ScenarioValidationError("route must span at least two centerline points")
    return np.array(pts)


def route_centerline(scenario: Scenario) -> np.ndarray:
    """Concatenated centerline of the route lanes, duplicate joints dropped."""
    return _concat_polylines([scenario.lane(rid).centerline() for rid in scenario.route])


def stack_histories(scenario: Scenario):
    """(ids, positions [N,H,2], headings [N,H], extents [N,2]) for all agents."""
    ids = [a.id for a in scenario.agents]
    pos = np.stack([a.history.positions for a in scenario.agents])
    hdg = np.stack([a.history.headings for a in scenario.agents])
    ext = np.array([[a.length, a.width] for a in scenario.agents])
    return ids, pos, hdg, ext


def obstacle_positions(scenario: Scenario) -> np.ndarray:
    if not scenario.obstacles:
        return np.zeros((0, 2))
    return np.array([o.position for o in scenario.obstacles])


# ---------------------------------------------------------------------------
# Serialization (schema_version 1)

SCHEMA_VERSION = 1


def _path_to_dict(p: TimedPath) -> dict:
    return {"times": p.times.tolist(), "positions": p.positions.tolist(),
            "headings": p.headings.tolist()}


def _path_from_dict(d: dict) -> TimedPath:
    return TimedPath(np.array(d["times"], dtype=float),
                     np.array(d["positions"], dtype=float).reshape(-1, 2),
                     np.array(d["headings"], dtype=float))


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "metadata": s.metadata,
        "lanes": [{
            "id": lane.id,
            "points": [{
                "position": p.position.tolist(),
                "tangent": p.tangent,
                "traffic_light": p.traffic_light.value,
                "lane_type": p.lane_type.value,
                "on_route": p.on_route,
                "half_width": p.half_width,
            } for p in lane.points],
        } for lane in s.lanes],
        "agents": [{
            "id": a.id,
            "kind": a.kind.value,
            "length": a.length,
            "width": a.width,
            "history": _path_to_dict(a.history),
            "future": _path_to_dict(a.future) if a.future is not None else None,
        } for a in s.agents],
        "obstacles": [{
            "position": o.position.tolist(),
            "type": o.type.value,
            "extent": o.extent,
        } for o in s.obstacles],
        "route": list(s.route),
    }


def scenario_from_dict(d: dict) -> Scenario:
    try:
        version = d["schema_version"]
        if version != SCHEMA_VERSION:
            raise ScenarioParseError(f"unsupported schema_version {version}")
        lanes = [Lane(ld["id"], [LanePoint(
            np.array(p["position"], dtype=float), float(p["tangent"]),
            TrafficLight(p["traffic_light"]), LaneType(p["lane_type"]),
            bool(p["on_route"]), float(p["half_width"]),
        ) for p in ld["points"]]) for ld in d["lanes"]]
        agents = [AgentTrack(
            ad["id"], AgentKind(ad["kind"]), float(ad["length"]), float(ad["width"]),
            _path_from_dict(ad["history"]),
            _path_from_dict(ad["future"]) if ad.get("future") else None,
        ) for ad in d["agents"]]
        obstacles = [Obstacle(np.array(od["position"], dtype=float),
                              ObstacleType(od["type"]), float(od["extent"]))
                     for od in d.get("obstacles", [])]
        route = [str(r) for r in d.get("route", [])]
        metadata = dict(d.get("metadata", {}))
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ScenarioParseError(f"malformed scenario payload: {e}") from e
    return Scenario(lanes, agents, obstacles, route, metadata)


def save_scenario(s: Scenario, path: str) -> None:
    with open(path, "w") as f:
        json.dump(scenario_to_dict(s), f, indent=1, sort_keys=True)
        f.write("\n")


def load_scenario(path: str) -> Scenario:
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ScenarioParseError(f"{path}: invalid JSON: {e}") from e
    return scenario_from_dict(payload)


# ---------------------------------------------------------------------------
# Synthetic generation

TEMPLATES = ("lane_follow", "lead_follow", "lane_change", "left_turn",
             "right_turn", "merge")

EV_EXTENT = (4.6, 2.0)


def _straight_lane(lane_id, start, end, heading, on_route, light=TrafficLight.GREEN,
                   lane_type=LaneType.DRIVING, offset=0.0):
    """Straight lane from start to end (scalars along heading), lateral offset left."""
    n = max(int(np.ceil((end - start) / LANE_SAMPLE_DS)) + 1, 2)
    s = np.linspace(start, end, n)
    direction = np.array([np.cos(heading), np.sin(heading)])
    normal = np.array([-direction[1], direction[0]])
    pts = [LanePoint(direction * si + normal * offset, heading, light,
                     lane_type, on_route) for si in s]
    return Lane(lane_id, pts)


def _arc_lane(lane_id, center, radius, angle0, angle1, on_route,
              lane_type=LaneType.TURN):
    n = max(int(np.ceil(abs(angle1 - angle0) * radius / LANE_SAMPLE_DS)) + 1, 2)
    ang = np.linspace(angle0, angle1, n)
    sign = 1.0 if angle1 > angle0 else -1.0
    pts = [LanePoint(np.array(center) + radius * np.array([np.cos(a), np.sin(a)]),
                     wrap_angle(a + sign * np.pi / 2), TrafficLight.GREEN,
                     lane_type, on_route) for a in ang]
    return Lane(lane_id, pts)


def _history_along(path_pts: np.ndarray, s_end: float, speed: float) -> TimedPath:
    """Constant-speed history ending at arclength s_end at t=0."""
    times = (np.arange(HISTORY_STEPS) - (HISTORY_STEPS - 1)) * STEP_DT
    samples = [point_at_arclength(path_pts, s_end + speed * t) for t in times]
    return TimedPath(times, np.array([p for p, _ in samples]),
                     np.array([h for _, h in samples]))


def _future_from_arclengths(path_pts: np.ndarray, arcs: np.ndarray) -> TimedPath:
    times = (np.arange(len(arcs)) + 1) * STEP_DT
    samples = [point_at_arclength(path_pts, s) for s in arcs]
    return TimedPath(times, np.array([p for p, _ in samples]),
                     np.array([h for _, h in samples]))


def _curvature_speed_cap(path_pts: np.ndarray, a_lat_max: float = 2.5) -> np.ndarray:
    """Per-vertex speed cap from discrete curvature, min-filtered 12 m ahead."""
    arcs = polyline_arclengths(path_pts)
    caps = np.full(len(path_pts), np.inf)
    for i in range(1, len(path_pts) - 1):
        v1 = path_pts[i] - path_pts[i - 1]
        v2 = path_pts[i + 1] - path_pts[i]
        a1, a2 = np.arctan2(v1[1], v1[0]), np.arctan2(v2[1], v2[0])
        ds = 0.5 * (np.linalg.norm(v1) + np.linalg.norm(v2))
        kappa = abs(wrap_angle(a2 - a1)) / max(ds, 1e-9)
        if kappa > 1e-6:
            caps[i] = np.sqrt(a_lat_max / kappa)
    out = caps.copy()
    for i in range(len(caps)):
        ahead = (arcs >= arcs[i]) & (arcs <= arcs[i] + 12.0)
        out[i] = caps[ahead].min() if ahead.any() else caps[i]
    return out


def _expert_profile(path_pts: np.ndarray, s_start: float, v_start: float,
                    v_des: float, leads: list[tuple[np.ndarray, float]],
                    n_steps: int = FUTURE_STEPS) -> np.ndarray:
    """Arclengths of a longitudinal rollout along path_pts.

    leads: (positions [n_steps+1, 2], body length) per agent the profile must
    yield to; an agent constrains only while projected near the path (lateral
    < 2.5 m) and ahead. Safe speed from a constant-deceleration envelope.
    """
    arcs_table = polyline_arclengths(path_pts)
    caps = _curvature_speed_cap(path_pts)
    s, v = s_start, v_start
    out = np.empty(n_steps)
    prev_lead_s = {}
    a_prev = 0.0
    for t in range(n_steps):
        i = min(int(np.searchsorted(arcs_table, s)), len(caps) - 1)
        v_target = min(v_des, caps[i])
        # cruise accel stays comfort-feasible (ramp-ups slew-limited, cap
        # under the scoring limits); braking keeps full authority below
        a = min(1.2 * (v_target - v), 1.8, a_prev + 0.45)
        for j, (lead_pos, lead_len) in enumerate(leads):
            p = lead_pos[min(t, len(lead_pos) - 1)]
            s_lead, lat = project_to_polyline(p, path_pts)
            if lat >= 2.5 or s_lead <= s:
                prev_lead_s[j] = s_lead
                continue
            v_lead = max((s_lead - prev_lead_s.get(j, s_lead)) / STEP_DT, 0.0)
            prev_lead_s[j] = s_lead
            gap = s_lead - s - 0.5 * (lead_len + EV_EXTENT[0])
            v_allow = np.sqrt(max(v_lead ** 2 + 2 * 3.0 * (gap - 3.0), 0.0))
            a = min(a, 2.0 * (v_allow - v))
        a = float(max(a, -4.5))
        a_prev = a
        v = max(v + a * STEP_DT, 0.0)
        s = s + v * STEP_DT
        out[t] = s
    return out


def apply_rigid_motion(scenario: Scenario, angle: float, shift: np.ndarray) -> Scenario:
    """Rotate by angle about the origin, then translate; preserves all structure."""
    r = rotation_from_heading(angle)

    def move_path(p: TimedPath) -> TimedPath:
        return TimedPath(p.times, p.positions @ r.T + shift,
                         wrap_angle(p.headings + angle))

    lanes = [Lane(lane.id, [dataclasses.replace(
        lp, position=r @ lp.position + shift, tangent=float(wrap_angle(lp.tangent + angle)))
        for lp in lane.points]) for lane in scenario.lanes]
    agents = [dataclasses.replace(
        a, history=move_path(a.history),
        future=move_path(a.future) if a.future is not None else None)
        for a in scenario.agents]
    obstacles = [dataclasses.replace(o, position=r @ o.position + shift)
                 for o in scenario.obstacles]
    return Scenario(lanes, agents, obstacles, scenario.route, scenario.metadata)


def _roadside_obstacles(rng, route_pts: np.ndarray, count: int,
                        s_range: tuple[float, float]) -> list[Obstacle]:
    kinds = [(ObstacleType.CONE, 0.4), (ObstacleType.BARRIER, 0.9),
             (ObstacleType.DEBRIS, 0.6)]
    out = []
    for _ in range(count):
        s = rng.uniform(*s_range)
        pos, heading = point_at_arclength(route_pts, s)
        side = rng.choice([-1.0, 1.0])
        lateral = rng.uniform(2.3, 3.2)
        normal = np.array([-np.sin(heading), np.cos(heading)])
        kind, extent = kinds[rng.integers(len(kinds))]
        out.append(Obstacle(pos + side * lateral * normal, kind, extent))
    return out


def _constant_speed_future(path_pts, s0, speed):
    arcs = s0 + speed * (np.arange(FUTURE_STEPS) + 1) * STEP_DT
    return _future_from_arclengths(path_pts, arcs)


def _braking_future(path_pts, s0, v0, t_brake, decel, v_floor):
    v, s, arcs = v0, s0, []
    for t in range(FUTURE_STEPS):
        if (t + 1) * STEP_DT >= t_brake and v > v_floor:
            v = max(v - decel * STEP_DT, v_floor)
        s += v * STEP_DT
        arcs.append(s)
    return _future_from_arclengths(path_pts, np.array(arcs))


def generate_scenario(template: str, seed: int) -> Scenario:
    """Deterministic synthetic scene for one of the six templates.

    Pure function of (template, seed). Agents never overlap at t=0 and the
    EV carries a car-following demonstration future along its route.
    """
    if template not in TEMPLATES:
        raise ValueError(f"unknown template {template!r}; choose from {TEMPLATES}")
    rng = np.random.default_rng([int(seed), TEMPLATES.index(template)])
    builder = {
        "lane_follow": _build_lane_follow,
        "lead_follow": _build_lead_follow,
        "lane_change": _build_lane_change,
        "left_turn": _build_left_turn,
        "right_turn": _build_right_turn,
        "merge": _build_merge,
    }[template]
    scenario = builder(rng)
    scenario = apply_rigid_motion(scenario, rng.uniform(-np.pi, np.pi),
                                   rng.uniform(-100, 100, 2))
    meta = dict(scenario.metadata)
    meta.update({"id": f"{template}-{seed}", "category": template, "seed": int(seed)})
    return dataclasses.replace(scenario, metadata=meta)


def _ev_track(route_pts, s0, v0, future_arcs):
    return AgentTrack("ev", AgentKind.EV, *EV_EXTENT,
                      history=_history_along(route_pts, s0, v0),
                      future=_future_from_arclengths(route_pts, future_arcs))


def _build_lane_follow(rng) -> Scenario:
    lane = _straight_lane("lane_0", -60.0, 160.0, 0.0, True)
    lanes = [lane]
    route_pts = lane.centerline()
    s0 = 60.0 + rng.uniform(-3, 3)
    v0 = rng.uniform(5, 12)
    v_des = min(rng.uniform(v0, 13.5), 15.0)
    agents = [_ev_track(route_pts, s0, v0, _expert_profile(route_pts, s0, v0, v_des, []))]
    if rng.random() < 0.5:
        side = _straight_lane("lane_1", -60.0, 160.0, 0.0, False, offset=3.5,
                              light=TrafficLight.UNKNOWN)
        lanes.append(side)
        sv_s = s0 + rng.uniform(-25, 25)
        sv_v = rng.uniform(4, 11)
        agents.append(AgentTrack(
            "sv1", AgentKind.SV, 4.4, 1.9,
            history=_history_along(side.centerline(), sv_s, sv_v),
            future=_constant_speed_future(side.centerline(), sv_s, sv_v)))
    obstacles = _roadside_obstacles(rng, route_pts, rng.integers(0, 3), (s0 + 10, s0 + 70))
    return Scenario(lanes, agents, obstacles, ["lane_0"])


def _build_lead_follow(rng) -> Scenario:
    lane = _straight_lane("lane_0", -60.0, 170.0, 0.0, True)
    route_pts = lane.centerline()
    s_ev = 60.0 + rng.uniform(-3, 3)
    v_ev = rng.uniform(5, 12)
    gap = rng.uniform(14, 30)
    v_lead = v_ev * rng.uniform(0.65, 1.0)
    s_lead = s_ev + gap
    t_brake = rng.uniform(0.4, 2.5)
    decel = rng.uniform(2.0, 5.0)
    v_floor = v_lead * rng.uniform(0.0, 0.4)
    lead_future = _braking_future(route_pts, s_lead, v_lead, t_brake, decel, v_floor)
    lead = AgentTrack("sv1", AgentKind.SV, 4.8, 2.0,
                      history=_history_along(route_pts, s_lead, v_lead),
                      future=lead_future)
    lead_pos = np.vstack([lead.position[None], lead_future.positions])
    arcs = _expert_profile(route_pts, s_ev, v_ev, min(v_ev * 1.1, 14.0),
                           [(lead_pos, lead.length)])
    agents = [_ev_track(route_pts, s_ev, v_ev, arcs), lead]
    obstacles = _roadside_obstacles(rng, route_pts, rng.integers(0, 2), (s_ev + 15, s_ev + 60))
    return Scenario([lane], agents, obstacles, ["lane_0"])


def _blended_change_path(ds: float = LANE_SAMPLE_DS) -> np.ndarray:
    """Smoothstep lateral blend from y=0 to y=3.5 between x=10 and x=45."""
    x = np.arange(-60.0, 170.0 + ds / 2, ds)
    u = np.clip((x - 10.0) / 35.0, 0.0, 1.0)
    y = 3.5 * u * u * (3 - 2 * u)
    return np.stack([x, y], axis=1)


def _build_lane_change(rng) -> Scenario:
    lane0 = _straight_lane("lane_0", -60.0, 170.0, 0.0, False)
    lane1 = _straight_lane("lane_1", -60.0, 170.0, 0.0, True, offset=3.5)
    path = _blended_change_path()
    s_ev = rng.uniform(52, 62)
    v_ev = rng.uniform(6, 11)
    leads = []
    agents_extra = []
    # slow vehicle ahead in the origin lane is the reason to change
    cl0 = lane0.centerline()
    s_slow = s_ev + rng.uniform(18, 30)
    v_slow = v_ev * rng.uniform(0.35, 0.6)
    slow_future = _constant_speed_future(cl0, s_slow, v_slow)
    slow = AgentTrack("sv1", AgentKind.SV, 4.5, 1.9,
                      history=_history_along(cl0, s_slow, v_slow), future=slow_future)
    agents_extra.append(slow)
    leads.append((np.vstack([slow.position[None], slow_future.positions]), slow.length))
    if rng.random() < 0.6:
        # traffic behind in the target lane
        cl1 = lane1.centerline()
        s_back = s_ev - rng.uniform(15, 25)
        # never faster than the EV by much, so the scripted future stays clear
        v_back = rng.uniform(4, min(10.0, v_ev + 1.0))
        back_future = _constant_speed_future(cl1, s_back, v_back)
        agents_extra.append(AgentTrack("sv2", AgentKind.SV, 4.4, 1.9,
                                       history=_history_along(cl1, s_back, v_back),
                                       future=back_future))
    arcs = _expert_profile(path, s_ev, v_ev, min(v_ev * 1.15, 14.0), leads)
    ev = AgentTrack("ev", AgentKind.EV, *EV_EXTENT,
                    history=_history_along(path, s_ev, v_ev),
                    future=_future_from_arclengths(path, arcs))
    obstacles = _roadside_obstacles(rng, lane1.centerline(), rng.integers(0, 2),
                                    (s_ev + 20, s_ev + 60))
    return Scenario([lane0, lane1], [ev] + agents_extra, obstacles, ["lane_1"])


def _turn_geometry(rng, left: bool):
    radius = rng.uniform(8, 12) if left else rng.uniform(6, 9)
    approach = _straight_lane("lane_in", -80.0, -radius, 0.0, True)
    sign = 1.0 if left else -1.0
    if left:
        arc = _arc_lane("lane_turn", (-radius, radius), radius, -np.pi / 2, 0.0, True)
    else:
        arc = _arc_lane("lane_turn", (-radius, -radius), radius, np.pi / 2, 0.0, True)
    exit_hdg = sign * np.pi / 2
    exit_start = np.array([0.0, sign * radius])

    n = int(np.ceil(120.0 / LANE_SAMPLE_DS)) + 1
    s = np.linspace(0, 120.0, n)
    direction = np.array([0.0, sign])
    exit_pts = [LanePoint(exit_start + direction * si, exit_hdg,
                          TrafficLight.GREEN, LaneType.DRIVING, True) for si in s]
    exit_lane = Lane("lane_out", exit_pts)
    return radius, [approach, arc, exit_lane]


def _build_turn(rng, left: bool) -> Scenario:
    radius, lanes = _turn_geometry(rng, left)
    route = ["lane_in", "lane_turn", "lane_out"]
    route_pts = _concat_polylines([lane.centerline() for lane in lanes])
    v_ev = rng.uniform(4, 8)
    s_ev = 80.0 - radius - rng.uniform(28, 40)
    s_ev = max(s_ev, v_ev * 2.2)
    # oncoming traffic on the opposite side of the approach road
    oncoming = _straight_lane("lane_opp", -80.0, 40.0, 0.0, False, offset=3.5,
                              light=TrafficLight.UNKNOWN)
    oncoming_rev = Lane("lane_opp", list(reversed([dataclasses.replace(
        p, tangent=float(wrap_angle(p.tangent + np.pi))) for p in oncoming.points])))
    lanes = lanes + [oncoming_rev]
    cl_opp = oncoming_rev.centerline()
    agents_extra = []
    leads = []
    if rng.random() < 0.7:
        v_sv = rng.uniform(4, 9)
        # pass the junction clearly before or after the EV gets there
        t_conflict = (80.0 - radius - s_ev) / max(v_ev, 1.0)
        early = rng.random() < 0.5
        t_sv = max(t_conflict - rng.uniform(2.5, 4.0), 0.3) if early \
            else t_conflict + rng.uniform(2.5, 4.5)
        s_conflict_opp = project_to_polyline(np.array([-radius, 3.5]), cl_opp)[0]
        s_sv = s_conflict_opp - v_sv * t_sv
        s_total = polyline_arclengths(cl_opp)[-1]
        min_s = v_sv * (HISTORY_STEPS - 1) * STEP_DT + 1.0
        s_sv = float(np.clip(s_sv, min_s, s_total - 5.0))
        sv_future = _constant_speed_future(cl_opp, s_sv, v_sv)
        sv = AgentTrack("sv1", AgentKind.SV, 4.5, 1.9,
                        history=_history_along(cl_opp, s_sv, v_sv), future=sv_future)
        agents_extra.append(sv)
        if left:
            leads.append((np.vstack([sv.position[None], sv_future.positions]), sv.length))
    arcs = _expert_profile(route_pts, s_ev, v_ev, min(v_ev * 1.2, 10.0), leads)
    ev = _ev_track(route_pts, s_ev, v_ev, arcs)
    obstacles = _roadside_obstacles(rng, route_pts, rng.integers(0, 2),
                                    (s_ev + 10, s_ev + 40))
    return Scenario(lanes, [ev] + agents_extra, obstacles, route)


def _build_left_turn(rng) -> Scenario:
    return _build_turn(rng, left=True)


def _build_right_turn(rng) -> Scenario:
    return _build_turn(rng, left=False)


def _build_merge(rng) -> Scenario:
    """A side vehicle cuts into the EV's lane ahead; the EV must yield."""
    lane0 = _straight_lane("lane_0", -60.0, 170.0, 0.0, True)
    lane1 = _straight_lane("lane_1", -60.0, 170.0, 0.0, False, offset=3.5)
    route_pts = lane0.centerline()
    s_ev = 60.0 + rng.uniform(-3, 3)
    v_ev = rng.uniform(6, 12)
    v_sv = v_ev * rng.uniform(0.75, 1.05)
    t_cut = rng.uniform(0.4, 1.8)
    blend = 2.0
    # choose the start so the cut-in completes with a seeded forward gap
    end_gap = rng.uniform(7, 16)
    t_end = t_cut + blend
    s_sv = (s_ev + v_ev * t_end + end_gap + 0.5 * (EV_EXTENT[0] + 4.4)) - v_sv * t_end
    times = (np.arange(FUTURE_STEPS) + 1) * STEP_DT
    xs = s_sv + v_sv * times
    u = np.clip((times - t_cut) / blend, 0.0, 1.0)
    ys = 3.5 * (1 - u * u * (3 - 2 * u))
    headings = np.arctan2(np.gradient(ys, STEP_DT), np.gradient(xs, STEP_DT))
    sv_future = TimedPath(times, np.stack([xs, ys], axis=1), headings)
    sv = AgentTrack("sv1", AgentKind.SV, 4.4, 1.9,
                    history=_history_along(lane1.centerline(), s_sv, v_sv),
                    future=sv_future)
    lead_pos = np.vstack([sv.position[None], sv_future.positions])
    arcs = _expert_profile(route_pts, s_ev, v_ev, min(v_ev * 1.1, 14.0),
                           [(lead_pos, sv.length)])
    ev = _ev_track(route_pts, s_ev, v_ev, arcs)
    obstacles = _roadside_obstacles(rng, route_pts, rng.integers(0, 2),
                                    (s_ev + 20, s_ev + 60))
    return Scenario([lane0, lane1], [ev, sv], obstacles, ["lane_0"])
