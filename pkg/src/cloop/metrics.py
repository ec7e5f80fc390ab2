"""Rollout scoring and prediction quality.

Closed-loop runs are graded on collision, road departure, progress against a
reference demonstration, comfort, and speed compliance, folded into a single
0-100 composite that zeroes out on any safety failure. Open-loop prediction
quality is the mean displacement of each nearby vehicle's most confident
predicted mode against its recorded future.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .decoder import ModeSet
from .geometry import OrientedBox, TimedPath, boxes_overlap, project_to_polyline
from .scenario import AgentKind, Scenario, nearest_agents
from .simulator import OFF_ROAD_MARGIN, SimLog, off_road


@dataclass(frozen=True)
class MetricWeights:
    progress: float = 0.6
    comfort: float = 0.3
    speed_compliance: float = 0.1
    accel_limit: float = 3.0       # m/s^2
    jerk_limit: float = 5.0        # m/s^3
    speed_limit: float = 15.0      # m/s, compliance threshold
    offroad_margin: float = OFF_ROAD_MARGIN

    def __post_init__(self):
        if min(self.progress, self.comfort, self.speed_compliance) < 0:
            raise ValueError("weights must be nonnegative")
        if self.progress + self.comfort + self.speed_compliance <= 0:
            raise ValueError("at least one weight must be positive")
        if self.accel_limit <= 0 or self.jerk_limit <= 0 or self.speed_limit <= 0:
            raise ValueError("comfort limits must be positive")


@dataclass
class MetricReport:
    collided: bool
    collision_time: float | None
    collision_agent: str | None
    off_road: bool
    off_road_time: float | None
    progress_ratio: float
    comfort_violations: int
    comfort_share: float
    speed_compliance: float
    composite: float

    def as_row(self) -> dict:
        return {
            "collided": self.collided,
            "collision_time": self.collision_time,
            "collision_agent": self.collision_agent,
            "off_road": self.off_road,
            "off_road_time": self.off_road_time,
            "progress_ratio": self.progress_ratio,
            "comfort_violations": self.comfort_violations,
            "comfort_share": self.comfort_share,
            "speed_compliance": self.speed_compliance,
            "composite": self.composite,
        }


def _snapshot_pose(snap: dict, agent_id: str):
    entry = snap["agents"][agent_id]
    return np.asarray(entry["position"], dtype=float), float(entry["heading"])


def detect_collision(log: SimLog, scenario: Scenario):
    """First (time, blocker id) where the EV footprint touches an agent or a
    static obstacle; None if the run stays contact-free. Agents are scanned
    in id order so the report never depends on log layout."""
    ev = scenario.ev
    others = sorted(a.id for a in scenario.agents if a.kind is not AgentKind.EV)
    extents = {a.id: (a.length, a.width) for a in scenario.agents}
    for snap in log.snapshots:
        pos, heading = _snapshot_pose(snap, ev.id)
        ev_box = OrientedBox(pos, heading, ev.length, ev.width)
        for aid in others:
            if aid not in snap["agents"]:
                continue
            p, h = _snapshot_pose(snap, aid)
            if boxes_overlap(ev_box, OrientedBox(p, h, *extents[aid])):
                return float(snap["clock"]), aid
        for i, obs in enumerate(scenario.obstacles):
            box = OrientedBox(obs.position, 0.0, obs.extent, obs.extent)
            if boxes_overlap(ev_box, box):
                return float(snap["clock"]), f"obstacle:{i}"
    return None


def detect_offroad(log: SimLog, scenario: Scenario,
                   margin: float = OFF_ROAD_MARGIN):
    """First time any EV footprint corner leaves every lane corridor."""
    ev = scenario.ev
    for snap in log.snapshots:
        pos, heading = _snapshot_pose(snap, ev.id)
        if off_road(scenario, pos, heading, ev.length, ev.width, margin):
            return float(snap["clock"])
    return None


def progress_ratio(log: SimLog, reference: TimedPath) -> float:
    """Arc length the EV made good along the reference path, relative to the
    reference's own advance over the same wall-clock window. Clipped at 0;
    may exceed 1 when the EV outruns the demonstration."""
    trace = log.ev_trace
    if len(trace) < 2:
        return 0.0
    route = reference.positions
    start = np.asarray(trace[0]["position"], dtype=float)
    end = np.asarray(trace[-1]["position"], dtype=float)
    s_start, _ = project_to_polyline(start, route)
    s_end, _ = project_to_polyline(end, route)
    t_end = min(float(trace[-1]["clock"]), reference.end_time)
    ref_start, _, _ = reference.interpolate(max(0.0, reference.start_time))
    ref_end, _, _ = reference.interpolate(t_end)
    r_start, _ = project_to_polyline(ref_start, route)
    r_end, _ = project_to_polyline(ref_end, route)
    denom = r_end - r_start
    if denom < 1e-6:
        return 1.0  # the demonstration itself goes nowhere
    return max(0.0, (s_end - s_start) / denom)


def comfort_metrics(log: SimLog, weights: MetricWeights | None = None):
    """(violation count, comfortable share) from the executed speed trace."""
    weights = weights or MetricWeights()
    trace = log.ev_trace
    if len(trace) < 2:
        return 0, 1.0
    speeds = np.array([e["speed"] for e in trace])
    times = np.array([e["clock"] for e in trace])
    dt = np.diff(times)
    accel = np.diff(speeds) / dt
    bad = np.abs(accel) > weights.accel_limit
    if len(accel) >= 2:
        jerk = np.diff(accel) / dt[1:]
        bad[1:] |= np.abs(jerk) > weights.jerk_limit
    violations = int(bad.sum())
    return violations, float(1.0 - violations / len(accel))


def speed_compliance(log: SimLog, weights: MetricWeights | None = None) -> float:
    weights = weights or MetricWeights()
    speeds = [e["speed"] for e in log.ev_trace]
    if not speeds:
        return 1.0
    ok = sum(1 for v in speeds if v <= weights.speed_limit + 1e-9)
    return ok / len(speeds)


def composite_score(collided: bool, off_road_flag: bool, progress: float,
                    comfort_share: float, compliance: float,
                    weights: MetricWeights | None = None) -> float:
    """0 on any safety failure, else a weighted 0-100 blend."""
    if collided or off_road_flag:
        return 0.0
    weights = weights or MetricWeights()
    # normalize by the weight sum: float addition of the default weights
    # misses 1.0 by one ulp, and a perfect run must score exactly 100
    total = weights.progress + weights.comfort + weights.speed_compliance
    blend = (weights.progress * min(progress, 1.0)
             + weights.comfort * comfort_share
             + weights.speed_compliance * compliance)
    return 100.0 * blend / total


def reference_from_scenario(scenario: Scenario) -> TimedPath:
    """The expert demonstration: the EV's recorded future with its current
    pose prepended at t=0."""
    ev = scenario.ev
    if ev.future is None or len(ev.future) == 0:
        raise ValueError("scenario has no recorded EV future to compare against")
    times = np.concatenate([[0.0], ev.future.times])
    positions = np.vstack([ev.position[None], ev.future.positions])
    headings = np.concatenate([[ev.heading], ev.future.headings])
    return TimedPath(times, positions, headings)


def evaluate_log(log: SimLog, scenario: Scenario,
                 reference: TimedPath | None = None,
                 weights: MetricWeights | None = None) -> MetricReport:
    weights = weights or MetricWeights()
    if reference is None:
        reference = reference_from_scenario(scenario)
    hit = detect_collision(log, scenario)
    off_t = detect_offroad(log, scenario, weights.offroad_margin)
    progress = progress_ratio(log, reference)
    violations, comfort_share = comfort_metrics(log, weights)
    compliance = speed_compliance(log, weights)
    score = composite_score(hit is not None, off_t is not None, progress,
                            comfort_share, compliance, weights)
    return MetricReport(
        collided=hit is not None,
        collision_time=None if hit is None else hit[0],
        collision_agent=None if hit is None else hit[1],
        off_road=off_t is not None,
        off_road_time=off_t,
        progress_ratio=progress,
        comfort_violations=violations,
        comfort_share=comfort_share,
        speed_compliance=compliance,
        composite=score,
    )


# ---------------------------------------------------------------------------
# Prediction quality

def conditional_ade(predictions: ModeSet, scenario: Scenario,
                    k_agents: int = 8, horizon_s: float = 5.0) -> float:
    """Mean displacement of the top-confidence predicted mode against the
    recorded future, averaged over the k SVs nearest the EV. NaN when no
    predicted agent has ground truth."""
    ev_id = scenario.ev.id
    ranked = nearest_agents(scenario, ev_id)
    chosen = []
    for aid in ranked:
        if aid not in predictions.agent_ids:
            continue
        track = scenario.agent(aid)
        if track.kind is AgentKind.EV or track.future is None:
            continue
        chosen.append(aid)
        if len(chosen) == k_agents:
            break
    if not chosen:
        return math.nan
    times = predictions.times()
    times = times[times <= horizon_s + 1e-9]
    steps = len(times)
    if steps == 0:
        return math.nan
    errors = []
    for aid in chosen:
        idx = predictions.agent_ids.index(aid)
        k = int(predictions.confidences[idx].argmax())
        frame = predictions.frames[idx]
        future = scenario.agent(aid).future
        truth = future.resample(times[times <= future.end_time + 1e-9])
        # compare in the prediction's own frame: rotation preserves
        # distances, and a prediction matching the recorded future then
        # scores an exact zero instead of frame round-trip noise
        local_truth = (truth.positions - frame.origin) @ frame.rotation
        n = len(local_truth)
        pred = predictions.locations[idx, k, :steps][:n]
        d = np.linalg.norm(pred - local_truth, axis=1)
        errors.append(float(d.mean()))
    return float(np.mean(errors))


# ---------------------------------------------------------------------------
# Batch reporting

def write_reports_csv(rows: list[dict], path: str) -> None:
    """One row per rollout; column order comes from the first row."""
    if not rows:
        raise ValueError("no rows to write")
    columns = list(rows[0].keys())
    for r in rows:
        if list(r.keys()) != columns:
            raise ValueError("all rows must share the same columns")
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def read_reports_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return [dict(row) for row in csv.DictReader(f)]


def aggregate(rows: list[dict], group_key: str) -> dict:
    """Per-group means for numeric fields and rates for boolean fields."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(str(r[group_key]), []).append(r)
    out = {}
    for key, rs in sorted(groups.items()):
        summary: dict = {"count": len(rs)}
        for field_name in rs[0]:
            vals = [r[field_name] for r in rs]
            if all(isinstance(v, bool) for v in vals):
                summary[f"{field_name}_rate"] = sum(vals) / len(vals)
            elif all(isinstance(v, (int, float)) and not isinstance(v, bool)
                     for v in vals):
                finite = [v for v in vals if not math.isnan(v)]
                summary[f"mean_{field_name}"] = (
                    sum(finite) / len(finite) if finite else math.nan)
        out[key] = summary
    return out
