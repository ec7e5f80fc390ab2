"""Dual-frequency closed-loop planning.

A low-frequency planner produces joint multimodal rollouts and picks one EV
mode as the plan, penalizing modes that come within a time-to-collision
threshold of any surrounding vehicle's most confident prediction. Between
planning cycles a high-frequency safety monitor re-predicts the surrounding
vehicles conditioned on the committed plan and triggers an early replan on
danger, deviation, or plan exhaustion. Replans happen within the same tick
unless a nonzero latency is configured.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig, backbone_forward
from .decoder import DecoderConfig, ModeSet, rollout_cmp, rollout_mpp
from .geometry import TimedPath, time_to_collision
from .scenario import Scenario
from .tensor import ParamStore

REPLAN_REASONS = ("cycle_elapsed", "ttc_danger", "deviation", "plan_exhausted")
_EPS = 1e-9


@dataclass(frozen=True)
class SchedulerConfig:
    plan_period: float = 2.0           # seconds between scheduled replans
    monitor_period: float = 0.1        # tick length; monitoring frequency
    ttc_penalty: float = 10.0          # confidence penalty for risky modes
    ttc_selection_threshold: float = 3.0   # s, penalize modes colliding sooner
    ttc_trigger_threshold: float = 1.5     # s, monitor replan trigger
    lateral_deviation_limit: float = 1.0   # m, ego offset from plan
    longitudinal_deviation_limit: float = 2.5
    monitor_horizon_steps: int = 15
    enable_ttc_trigger: bool = True
    enable_deviation_trigger: bool = True
    replan_latency: float = 0.0        # s until a triggered plan takes effect

    def __post_init__(self):
        if self.monitor_period <= 0 or self.plan_period <= 0:
            raise ValueError("periods must be positive")
        n = round(self.plan_period / self.monitor_period)
        if n < 1 or abs(n * self.monitor_period - self.plan_period) > _EPS:
            raise ValueError(
                f"plan_period must be an integer multiple of monitor_period, "
                f"got {self.plan_period} / {self.monitor_period}")
        if self.ttc_penalty < 0:
            raise ValueError("ttc_penalty must be >= 0")
        if self.ttc_selection_threshold <= 0 or self.ttc_trigger_threshold <= 0:
            raise ValueError("TTC thresholds must be > 0")
        if self.monitor_horizon_steps < 1:
            raise ValueError("monitor_horizon_steps must be >= 1")
        if self.replan_latency < 0:
            raise ValueError("replan_latency must be >= 0")

    @property
    def ticks_per_cycle(self) -> int:
        return round(self.plan_period / self.monitor_period)


@dataclass(frozen=True)
class Decision:
    replan: bool
    reason: str | None = None
    min_ttc: float | None = None

    def __post_init__(self):
        if self.replan != (self.reason is not None):
            raise ValueError("reason must be present exactly when replanning")
        if self.reason is not None and self.reason not in REPLAN_REASONS:
            raise ValueError(f"unknown replan reason {self.reason!r}")


CONTINUE = Decision(False)


@dataclass
class PlannerState:
    plan: TimedPath | None = None       # times relative to plan_birth
    plan_birth: float = 0.0
    phase: str = "need_plan"            # need_plan | monitoring
    chosen_mode: int = -1
    events: list = field(default_factory=list)
    # plan computed but not yet adopted (replan latency): (plan, ready, mode, ttc)
    pending: tuple | None = None

    def active_plan_absolute(self) -> TimedPath:
        if self.plan is None:
            raise ValueError("no active plan")
        return TimedPath(self.plan.times + self.plan_birth,
                         self.plan.positions, self.plan.headings)


# ---------------------------------------------------------------------------
# Mode-set plumbing

def split_ev_modes(mode_set: ModeSet, ev_id: str):
    """(EV-only, SV-only) views of a joint mode set. Tensor links dropped."""
    if ev_id not in mode_set.agent_ids:
        raise ValueError(f"agent {ev_id!r} not in mode set")
    ev_i = mode_set.agent_ids.index(ev_id)
    sv = [i for i in range(len(mode_set.agent_ids)) if i != ev_i]

    def take(rows):
        return ModeSet([mode_set.agent_ids[i] for i in rows],
                       [mode_set.frames[i] for i in rows],
                       mode_set.locations[rows], mode_set.scales[rows],
                       mode_set.confidences[rows], mode_set.step_dt)
    return take([ev_i]), take(sv)


def _motion_headings(points: np.ndarray, first_ref: np.ndarray,
                     fallback: float) -> np.ndarray:
    prev = np.vstack([first_ref[None], points[:-1]])
    delta = points - prev
    h = np.empty(len(points))
    last = fallback
    for i, d in enumerate(delta):
        if np.hypot(d[0], d[1]) > 1e-6:
            last = float(np.arctan2(d[1], d[0]))
        h[i] = last
    return h


def mode_timed_path(mode_set: ModeSet, agent_index: int, mode: int) -> TimedPath:
    """Global-frame trajectory of one mode with headings from motion."""
    pts = mode_set.global_trajectory(agent_index, mode)
    frame = mode_set.frames[agent_index]
    return TimedPath(mode_set.times(), pts,
                     _motion_headings(pts, frame.origin, frame.heading))


def plan_from_mode(ev_modes: ModeSet, mode: int) -> TimedPath:
    """Executable plan: the decoded mode with the current pose prepended at
    t=0, so downstream consumers always have full coverage from now on."""
    frame = ev_modes.frames[0]
    pts = ev_modes.global_trajectory(0, mode)
    dt = ev_modes.step_dt
    times = np.arange(len(pts) + 1) * dt
    positions = np.vstack([frame.origin[None], pts])
    headings = np.concatenate([[frame.heading],
                               _motion_headings(pts, frame.origin, frame.heading)])
    return TimedPath(times, positions, headings)


def top_mode_paths(sv_predictions: ModeSet) -> list[TimedPath]:
    out = []
    for i in range(len(sv_predictions.agent_ids)):
        k = int(sv_predictions.confidences[i].argmax())
        out.append(mode_timed_path(sv_predictions, i, k))
    return out


# ---------------------------------------------------------------------------
# Trajectory selection (planning mode)

def select_trajectory(ev_modes: ModeSet, sv_predictions: ModeSet | None,
                      config: SchedulerConfig,
                      ev_extent: tuple[float, float] = (4.6, 2.0),
                      sv_extents: list | None = None):
    """Pick the EV mode with the highest TTC-penalized confidence.

    Each SV is reduced to its most confident mode. A mode whose earliest
    collision against any of those happens before the selection threshold
    loses a fixed confidence penalty. Ties go to the higher unpenalized
    confidence, then the lower mode index. Returns (index, plan, diagnostics).
    """
    n_modes = ev_modes.locations.shape[1]
    if n_modes < 1 or len(ev_modes.agent_ids) != 1:
        raise ValueError("ev_modes must hold exactly one agent with K >= 1 modes")
    conf = ev_modes.confidences[0]
    sv_paths = []
    if sv_predictions is not None and len(sv_predictions.agent_ids) > 0:
        sv_paths = top_mode_paths(sv_predictions)
        if sv_extents is None:
            sv_extents = [(4.6, 2.0)] * len(sv_paths)
        if len(sv_extents) != len(sv_paths):
            raise ValueError("one extent per surrounding agent required")
    min_ttc = np.full(n_modes, np.inf)
    for k in range(n_modes):
        ev_path = mode_timed_path(ev_modes, 0, k)
        for path, ext in zip(sv_paths, sv_extents or []):
            ttc = time_to_collision(ev_path, ev_extent, path, ext)
            if ttc is not None and ttc < min_ttc[k]:
                min_ttc[k] = ttc
    penalized = conf - config.ttc_penalty * (min_ttc < config.ttc_selection_threshold)
    best = min(range(n_modes), key=lambda k: (-penalized[k], -conf[k], k))
    info = {"penalized": penalized, "min_ttc": min_ttc}
    return best, plan_from_mode(ev_modes, best), info


# ---------------------------------------------------------------------------
# Safety monitoring

def _plan_suffix_now(state: PlannerState, clock: float) -> TimedPath:
    rel = clock - state.plan_birth
    suffix = state.plan.suffix_from(rel)
    return TimedPath(suffix.times - rel, suffix.positions, suffix.headings)


def min_ttc_against_plan(plan_now: TimedPath, sv_predictions: ModeSet,
                         ev_extent: tuple[float, float] = (4.6, 2.0),
                         sv_extents: list | None = None) -> float | None:
    """Earliest predicted collision between the remaining plan and any SV's
    top mode; None when nothing collides. Grids are aligned to the
    prediction timestamps, truncated to plan coverage."""
    times = sv_predictions.times()
    times = times[times <= plan_now.end_time + _EPS]
    if len(times) == 0:
        return None
    # clamp float spill past the plan end, then restore the prediction grid
    # so the collision check sees matching timestamps
    sampled = plan_now.resample(np.minimum(times, plan_now.end_time))
    ev_path = TimedPath(times, sampled.positions, sampled.headings)
    if sv_extents is None:
        sv_extents = [(4.6, 2.0)] * len(sv_predictions.agent_ids)
    best = None
    for i, ext in enumerate(sv_extents):
        k = int(sv_predictions.confidences[i].argmax())
        full = mode_timed_path(sv_predictions, i, k)
        path = TimedPath(times, full.positions[:len(times)],
                         full.headings[:len(times)])
        ttc = time_to_collision(ev_path, ev_extent, path, ext)
        if ttc is not None and (best is None or ttc < best):
            best = float(ttc)
    return best


def monitor_step(state: PlannerState, cmp_predictions: ModeSet | None,
                 ego_pose: tuple[np.ndarray, float], clock: float,
                 config: SchedulerConfig,
                 ev_extent: tuple[float, float] = (4.6, 2.0),
                 sv_extents: list | None = None) -> Decision:
    """One safety-monitor evaluation. Check order: predicted danger, plan
    deviation, plan exhaustion, scheduled cycle end."""
    if state.plan is None:
        raise ValueError("monitor_step requires an active plan")
    rel = clock - state.plan_birth
    observed = None
    if config.enable_ttc_trigger and cmp_predictions is not None \
            and len(cmp_predictions.agent_ids) > 0 \
            and rel <= state.plan.end_time + _EPS:
        observed = min_ttc_against_plan(_plan_suffix_now(state, clock),
                                        cmp_predictions, ev_extent, sv_extents)
        if observed is not None and observed < config.ttc_trigger_threshold:
            return Decision(True, "ttc_danger", observed)
    if config.enable_deviation_trigger:
        pos, heading, _ = state.plan.interpolate(
            min(rel, state.plan.end_time))
        err = np.asarray(ego_pose[0], dtype=float) - pos
        direction = np.array([np.cos(heading), np.sin(heading)])
        lon = abs(float(err @ direction))
        lat = abs(float(err[0] * -direction[1] + err[1] * direction[0]))
        if lat > config.lateral_deviation_limit or \
                lon > config.longitudinal_deviation_limit:
            return Decision(True, "deviation", observed)
    remaining = state.plan.end_time - rel
    if remaining < config.monitor_period - _EPS:
        return Decision(True, "plan_exhausted", observed)
    if clock - state.plan_birth >= config.plan_period - _EPS:
        return Decision(True, "cycle_elapsed", observed)
    return Decision(False, None, observed)


# ---------------------------------------------------------------------------
# Models

class NeuralModel:
    """Trained weights plus the encode/rollout calls the scheduler needs."""

    prediction_type = "cmp"

    def __init__(self, store: ParamStore, backbone_config: BackboneConfig | None = None,
                 decoder_config: DecoderConfig | None = None):
        self.store = store
        self.backbone_config = backbone_config or BackboneConfig()
        self.decoder_config = decoder_config or DecoderConfig()

    def plan_modes(self, scenario: Scenario) -> ModeSet:
        enc = backbone_forward(scenario, self.backbone_config, self.store)
        return rollout_mpp(enc, scenario, self.decoder_config, self.store)

    def predict_conditioned(self, scenario: Scenario, plan_now: TimedPath,
                            horizon: int | None = None) -> ModeSet:
        enc = backbone_forward(scenario, self.backbone_config, self.store)
        return rollout_cmp(enc, scenario, plan_now, self.decoder_config,
                           self.store, horizon=horizon)

    @classmethod
    def from_checkpoint(cls, path: str) -> "NeuralModel":
        store = ParamStore.load(path)
        bcfg, dcfg = None, None
        try:
            with open(path + ".json") as f:
                meta = json.load(f)
            if "backbone_config" in meta:
                bcfg = BackboneConfig(**meta["backbone_config"])
            if "decoder_config" in meta:
                dcfg = DecoderConfig(**meta["decoder_config"])
        except FileNotFoundError:
            pass
        return cls(store, bcfg, dcfg)


class UnconditionedMonitorModel:
    """Ablation wrapper: the safety monitor consumes the joint decode's SV
    modes instead of plan-conditioned predictions. Planning is unchanged."""

    prediction_type = "mpp"

    def __init__(self, base):
        self.base = base
        self.backbone_config = getattr(base, "backbone_config", None)
        self.decoder_config = getattr(base, "decoder_config", None)

    def plan_modes(self, scenario: Scenario) -> ModeSet:
        return self.base.plan_modes(scenario)

    def predict_conditioned(self, scenario: Scenario, plan_now: TimedPath,
                            horizon: int | None = None) -> ModeSet:
        _, svs = split_ev_modes(self.base.plan_modes(scenario), scenario.ev.id)
        if horizon is not None and horizon < svs.locations.shape[2]:
            svs = ModeSet(svs.agent_ids, svs.frames,
                          svs.locations[:, :, :horizon],
                          svs.scales[:, :, :horizon],
                          svs.confidences, svs.step_dt)
        return svs


# ---------------------------------------------------------------------------
# The tick loop

def _extents(scenario: Scenario):
    ev = scenario.ev
    svs = [a for a in scenario.agents if a.id != ev.id]
    return (ev.length, ev.width), [(a.length, a.width) for a in svs]


def _compute_plan(scenario: Scenario, model, config: SchedulerConfig):
    joint = model.plan_modes(scenario)
    ev_ms, sv_ms = split_ev_modes(joint, scenario.ev.id)
    ev_ext, sv_exts = _extents(scenario)
    k, plan, info = select_trajectory(ev_ms, sv_ms, config, ev_ext, sv_exts)
    ttc = info["min_ttc"][k]
    return k, plan, (None if np.isinf(ttc) else float(ttc))


def _adopt(state: PlannerState, plan: TimedPath, clock: float, mode: int,
           ttc, reason: str):
    state.plan = plan
    state.plan_birth = float(clock)
    state.phase = "monitoring"
    state.chosen_mode = int(mode)
    state.events.append({"time": round(float(clock), 9), "event": "planned",
                         "reason": reason, "mode": int(mode), "min_ttc": ttc})


def tick(state: PlannerState, scenario: Scenario, clock: float, model,
         config: SchedulerConfig):
    """Advance the planner one monitoring period.

    Returns the active plan with absolute timestamps; the state is updated in
    place and its event log extended. scenario is the current world snapshot
    (agent histories ending at this clock).
    """
    if state.pending is not None and clock >= state.pending[1] - _EPS:
        plan, _, mode, ttc, why = state.pending
        _adopt(state, plan, clock, mode, ttc, why)
        state.pending = None
        return state.active_plan_absolute(), state

    if state.phase == "need_plan" or state.plan is None:
        k, plan, ttc = _compute_plan(scenario, model, config)
        _adopt(state, plan, clock, k, ttc, "initial")
        return state.active_plan_absolute(), state

    cmp_ms = None
    rel = clock - state.plan_birth
    if config.enable_ttc_trigger and rel <= state.plan.end_time + _EPS:
        plan_now = _plan_suffix_now(state, clock)
        max_steps = int((plan_now.end_time + _EPS) / config.monitor_period) + 1
        horizon = min(config.monitor_horizon_steps, max_steps)
        if horizon >= 1:
            cmp_ms = model.predict_conditioned(scenario, plan_now, horizon)
    ev_ext, sv_exts = _extents(scenario)
    ego = (scenario.ev.position, scenario.ev.heading)
    decision = monitor_step(state, cmp_ms, ego, clock, config, ev_ext, sv_exts)

    if not decision.replan:
        state.events.append({"time": round(clock, 9), "event": "monitored_ok",
                             "min_ttc": decision.min_ttc})
        return state.active_plan_absolute(), state

    if state.pending is not None:
        # a replan is already in flight; keep executing the old plan
        state.events.append({"time": round(clock, 9), "event": "monitored_ok",
                             "min_ttc": decision.min_ttc})
        return state.active_plan_absolute(), state

    if decision.reason != "cycle_elapsed":
        state.events.append({"time": round(clock, 9),
                             "event": "replan_triggered",
                             "reason": decision.reason,
                             "min_ttc": decision.min_ttc})
    k, plan, ttc = _compute_plan(scenario, model, config)
    if config.replan_latency > _EPS:
        state.pending = (plan, clock + config.replan_latency, k, ttc,
                         decision.reason)
    else:
        _adopt(state, plan, clock, k, ttc, decision.reason)
    return state.active_plan_absolute(), state


# ---------------------------------------------------------------------------
# Event log io

def write_event_log(events: list, path: str) -> None:
    with open(path, "w") as f:
        for e in events:
            f.write(json.dumps(e, sort_keys=True) + "\n")


def read_event_log(path: str) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
