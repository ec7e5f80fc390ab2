"""Interactive autoregressive decoder over the encoded scene context.

Produces K joint trajectory modes for every agent (planning mode) or
predictions for the surrounding vehicles conditioned on a fixed plan for the
controlled vehicle (monitoring mode, late fusion). All decoded positions live
in each agent's own local frame; cross-agent geometry is restored through
per-pair frame transforms, so mode k of one agent interacts with mode k of
every neighbor. The position fed back each step is the Laplace location.

Parameter layout: the controlled vehicle and surrounding vehicles have
separate branches ("decoder/ev/*", "decoder/sv/*"); the interaction module
("decoder/shared/*") is the single shared component. Branch outputs are
computed for the full batch and mixed by a 0/1 mask.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import tensor as T
from .backbone import EncodedScene
from .geometry import LocalFrame, TimedPath, to_local
from .scenario import AgentKind, Scenario, route_centerline
from .tensor import ParamStore, Tensor

FUSION_IN = 12   # recentered position (2), obstacle type one-hot (3), lane attrs (7)


@dataclass(frozen=True)
class DecoderConfig:
    horizon_steps: int = 50
    step_dt: float = 0.1
    heads: int = 4
    neighbor_radius: float = 50.0
    fusion_radius: float = 30.0
    max_fusion_points: int = 16

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ValueError("horizon_steps must be >= 1")


@dataclass
class DecoderState:
    step: int
    hidden: Tensor                 # [N*K, D]
    cur: Tensor                    # [N, K, 2] decoded positions, own local frames
    prev: Tensor                   # [N, K, 2]
    frames: list[LocalFrame]
    modes: int
    plan_local: np.ndarray | None = None   # [T, 2] EV-frame fixed plan (monitor mode)
    ev_index: int | None = None


@dataclass
class ModeSet:
    """K trajectory modes per agent with Laplace parameters and confidences."""

    agent_ids: list[str]
    frames: list[LocalFrame]
    locations: np.ndarray          # [N, K, T, 2] in each agent's local frame
    scales: np.ndarray             # [N, K, T, 2], strictly positive
    confidences: np.ndarray        # [N, K], rows on the simplex
    step_dt: float
    loc_t: Tensor | None = None
    log_scale_t: Tensor | None = None
    conf_t: Tensor | None = None

    def __post_init__(self):
        n, k, t, _ = self.locations.shape
        if self.scales.shape != (n, k, t, 2) or self.confidences.shape != (n, k):
            raise ValueError("ModeSet array shapes disagree")
        if not (self.scales > 0).all():
            raise ValueError("Laplace scales must be strictly positive")
        if self.confidences.size and (
                np.abs(self.confidences.sum(-1) - 1.0).max() > 1e-9
                or (self.confidences < 0).any()):
            raise ValueError("confidences must be nonnegative and sum to 1")

    @property
    def horizon(self) -> int:
        return self.locations.shape[2]

    def global_trajectory(self, agent_index: int, mode: int) -> np.ndarray:
        frame = self.frames[agent_index]
        return self.locations[agent_index, mode] @ frame.rotation.T + frame.origin

    def global_trajectories(self) -> np.ndarray:
        out = np.empty_like(self.locations)
        for i, frame in enumerate(self.frames):
            out[i] = self.locations[i] @ frame.rotation.T + frame.origin
        return out

    def times(self) -> np.ndarray:
        return (np.arange(self.horizon) + 1) * self.step_dt


# ---------------------------------------------------------------------------
# Geometry plumbing

def _pair_transforms(frames: list[LocalFrame]):
    """Row-vector transforms: y_in_i = y_in_j @ MT[i,j] + c[i,j]."""
    r = np.stack([f.rotation for f in frames])
    o = np.stack([f.origin for f in frames])
    m = np.einsum("iab,jac->ijbc", r, r)              # R_i^T R_j
    mt = np.swapaxes(m, -1, -2)
    c = np.einsum("iab,ija->ijb", r, o[None] - o[:, None])
    return mt, c


def _globals(cur: np.ndarray, frames: list[LocalFrame]) -> np.ndarray:
    r = np.stack([f.rotation for f in frames])
    o = np.stack([f.origin for f in frames])
    return np.einsum("ikb,iab->ika", cur, r) + o[:, None, :]


def _mix(ev_out: Tensor, sv_out: Tensor, ev_col: np.ndarray) -> Tensor:
    m = np.broadcast_to(ev_col.reshape((-1,) + (1,) * (len(ev_out.shape) - 1)),
                        ev_out.shape).copy()
    return T.add(T.mul(ev_out, m), T.mul(sv_out, 1.0 - m))


def _tile_modes(t: Tensor, count: int) -> Tensor:
    """[B, 1, F] -> [B, count, F] by differentiable repetition."""
    return T.gather(t, np.zeros(count, dtype=np.intp), axis=1)


# ---------------------------------------------------------------------------
# Interaction edges (shared module)

def decode_edges(state: DecoderState, config: DecoderConfig, store: ParamStore):
    """Interaction features over decoded positions at the current step.

    Returns ([N*K, N-1, D] features, [N*K, 1, N-1] adjacency mask). For each
    ordered pair, the neighbor's mode-k position is restored into the
    observer's frame; displacement uses the previous decoded step.
    """
    n, k, _ = state.cur.shape
    d = state.hidden.shape[-1]
    if n < 2:
        return Tensor(np.zeros((n * k, 0, d))), np.zeros((n * k, 1, 0))
    slots = np.array([[j for j in range(n) if j != i] for i in range(n)], dtype=np.intp)
    i_idx = np.repeat(np.arange(n), n - 1)
    j_idx = slots.reshape(-1)
    mt, c = _pair_transforms(state.frames)
    mt_sel = mt[i_idx, j_idx]                                   # [P, 2, 2]
    c_sel = np.broadcast_to(c[i_idx, j_idx][:, None, :], (len(i_idx), k, 2)).copy()

    cur_j = T.gather(state.cur, j_idx, axis=0)
    restored = T.add(T.matmul(cur_j, mt_sel), c_sel)
    rel = T.sub(restored, T.gather(state.cur, i_idx, axis=0))
    disp = T.sub(state.cur, state.prev)
    disp_rot = T.matmul(T.gather(disp, j_idx, axis=0), mt_sel)
    edge_in = T.reshape(T.concat([disp_rot, rel], axis=-1), (len(i_idx) * k, 4))
    feats = nn.mlp(store, "decoder/shared/edge_mlp", edge_in, [4, d, d])
    feats = T.reshape(T.transpose(T.reshape(feats, (n, n - 1, k, d)), (0, 2, 1, 3)),
                      (n * k, n - 1, d))

    glob = _globals(state.cur.data, state.frames)               # [N, K, 2]
    diff = glob[:, None, :, :] - glob[None, :, :, :]            # [N, N, K, 2]
    adj = (np.linalg.norm(diff, axis=-1) <= config.neighbor_radius)  # [N, N, K]
    mask = np.take_along_axis(adj.transpose(0, 2, 1),           # [N, K, N]
                              slots[:, None, :].repeat(k, axis=1), axis=2)
    return feats, mask.reshape(n * k, 1, n - 1).astype(np.float64)


# ---------------------------------------------------------------------------
# Local fusion (per-branch module)

@dataclass
class FusionCandidates:
    local: np.ndarray      # [N, C, 2] candidate positions in each agent frame
    static: np.ndarray     # [N, C, 10] type one-hots (obstacle 3, lane attrs 7)
    valid: np.ndarray      # [N, C] 1 = real candidate


def _route_points_with_attrs(scenario: Scenario):
    pts, arc, last = [], 0.0, None
    for rid in scenario.route:
        for p in scenario.lane(rid).points:
            if last is not None:
                d = float(np.linalg.norm(p.position - last))
                if d < 1e-9:
                    continue
                arc += d
            pts.append((arc, p))
            last = p.position
    return pts


def build_fusion_candidates(scenario: Scenario, frames: list[LocalFrame],
                            config: DecoderConfig, ev_index: int) -> FusionCandidates:
    """Static per-agent candidate sets: nearby obstacles for everyone, a
    forward window of route lane points additionally for the controlled
    vehicle. Selections are deterministic (distance, then insertion order)."""
    from .geometry import project_to_polyline

    n = len(frames)
    per_agent = []
    obstacles = scenario.obstacles
    for i, frame in enumerate(frames):
        rows = []
        if obstacles:
            d = [float(np.linalg.norm(o.position - frame.origin)) for o in obstacles]
            order = np.argsort(d, kind="stable")[:config.max_fusion_points]
            for oi in order:
                o = obstacles[oi]
                feat = np.zeros(10)
                feat[["cone", "barrier", "debris"].index(o.type.value)] = 1.0
                rows.append((o.position, feat))
        if i == ev_index and scenario.route:
            route = route_centerline(scenario)
            s0, _ = project_to_polyline(frame.origin, route)
            window = [(s, p) for s, p in _route_points_with_attrs(scenario)
                      if s0 - 6.0 <= s <= s0 + 70.0]
            if len(window) > config.max_fusion_points:
                keep = np.linspace(0, len(window) - 1, config.max_fusion_points)
                window = [window[int(round(x))] for x in keep]
            for _, p in window:
                feat = np.zeros(10)
                feat[3:] = p.attributes()
                rows.append((p.position, feat))
        per_agent.append(rows)

    cmax = max((len(r) for r in per_agent), default=0)
    local = np.zeros((n, cmax, 2))
    static = np.zeros((n, cmax, 10))
    valid = np.zeros((n, cmax))
    for i, rows in enumerate(per_agent):
        for j, (pos, feat) in enumerate(rows):
            local[i, j] = to_local(frames[i], pos)
            static[i, j] = feat
            valid[i, j] = 1.0
    return FusionCandidates(local, static, valid)


def local_fusion(state: DecoderState, config: DecoderConfig, store: ParamStore,
                 cands: FusionCandidates, branch: str, return_weights: bool = False):
    """Attend from the recurrent feature over nearby static context,
    re-centered on the current decoded position. A learned null token is
    always present, so empty candidate sets degrade to it."""
    n, k, _ = state.cur.shape
    nk = n * k
    d = state.hidden.shape[-1]
    c = cands.local.shape[1]
    name = f"decoder/{branch}/fusion"
    if c > 0:
        local = np.broadcast_to(cands.local[:, None], (n, k, c, 2)).reshape(nk, c, 2)
        static = np.broadcast_to(cands.static[:, None], (n, k, c, 10)).reshape(nk, c, 10)
        cur_rep = _tile_modes(T.reshape(state.cur, (nk, 1, 2)), c)
        rel = T.sub(local, cur_rep)
        feat = T.reshape(T.concat([rel, Tensor(static)], axis=-1), (nk * c, FUSION_IN))
        keys = T.reshape(nn.mlp(store, f"{name}/mlp", feat, [FUSION_IN, d, d]),
                         (nk, c, d))
        # mask: candidate real and within radius of the decoded position
        dist = np.linalg.norm(cands.local[:, None] - state.cur.data[:, :, None], axis=-1)
        near = (dist <= config.fusion_radius) & (cands.valid[:, None] > 0)
        mask = near.reshape(nk, 1, c).astype(np.float64)
    else:
        keys = Tensor(np.zeros((nk, 0, d)))
        mask = np.zeros((nk, 1, 0))
    null = T.reshape(nn.param(store, f"{name}/null", (1, d)), (1, 1, d))
    null = T.gather(null, np.zeros(nk, dtype=np.intp), axis=0)
    keys = T.concat([keys, null], axis=1)
    mask = np.concatenate([mask, np.ones((nk, 1, 1))], axis=-1)
    q = T.reshape(state.hidden, (nk, 1, d))
    out = nn.attend(store, f"{name}/attn", q, keys, keys, d, config.heads, mask,
                    return_weights=return_weights)
    if return_weights:
        out, w = out
        return T.reshape(out, (nk, d)), w.data
    return T.reshape(out, (nk, d))


# ---------------------------------------------------------------------------
# Step and rollouts

def decoder_step(state: DecoderState, context: Tensor, config: DecoderConfig,
                 store: ParamStore, cands: FusionCandidates, ev_col: np.ndarray):
    """One autoregressive step for all agents and modes jointly.

    Returns (new state, location [N*K, 2], log-scale [N*K, 2]). The location
    is the next decoded position in each agent's own frame.
    """
    n, k, d = context.shape
    nk = n * k
    f = state.hidden
    ctx = T.reshape(context, (nk, d))
    s = _mix(local_fusion(state, config, store, cands, "ev"),
             local_fusion(state, config, store, cands, "sv"), ev_col)
    z_in = T.concat([f, ctx, s], axis=-1)
    z = _mix(nn.mlp(store, "decoder/ev/pre", z_in, [3 * d, d, d]),
             nn.mlp(store, "decoder/sv/pre", z_in, [3 * d, d, d]), ev_col)
    edge_feats, edge_mask = decode_edges(state, config, store)
    if edge_feats.shape[1] > 0:
        q = T.reshape(z, (nk, 1, d))
        a = nn.attend(store, "decoder/shared/interact", q, edge_feats, edge_feats,
                      d, config.heads, edge_mask)
        z = T.add(z, T.reshape(a, (nk, d)))
    h = _mix(nn.gru_cell(store, "decoder/ev/gru", z, f, d, d),
             nn.gru_cell(store, "decoder/sv/gru", z, f, d, d), ev_col)
    out = _mix(nn.linear(store, "decoder/ev/head", h, d, 4),
               nn.linear(store, "decoder/sv/head", h, d, 4), ev_col)
    loc = T.slice_(out, (slice(None), slice(0, 2)))
    log_scale = T.slice_(out, (slice(None), slice(2, 4)))
    new_state = replace(state, step=state.step + 1, hidden=h, prev=state.cur,
                        cur=T.reshape(loc, (n, k, 2)))
    return new_state, loc, log_scale


def _replace_ev_row(t: Tensor, ev_index: int, value: np.ndarray, n: int, k: int) -> Tensor:
    keep = np.ones((n, 1, 1))
    keep[ev_index] = 0.0
    keep = np.broadcast_to(keep, (n, k, 2)).copy()
    filled = np.zeros((n, k, 2))
    filled[ev_index] = value
    return T.add(T.mul(t, keep), filled)


def _rollout(enc: EncodedScene, scenario: Scenario, config: DecoderConfig,
             store: ParamStore, horizon: int, plan_local: np.ndarray | None,
             state_hook=None):
    n, k, d = enc.context_t.shape
    if config.heads and d % config.heads:
        raise ValueError(f"context dim {d} not divisible by heads {config.heads}")
    ev_index = next(i for i, a in enumerate(scenario.agents) if a.kind is AgentKind.EV)
    ev_col = np.array([1.0 if i == ev_index else 0.0
                       for i in range(n) for _ in range(k)])
    cands = build_fusion_candidates(scenario, enc.frames, config, ev_index)
    state = DecoderState(step=0, hidden=Tensor(np.zeros((n * k, d))),
                         cur=Tensor(np.zeros((n, k, 2))),
                         prev=Tensor(np.zeros((n, k, 2))),
                         frames=enc.frames, modes=k,
                         plan_local=plan_local, ev_index=ev_index)
    locs, log_scales = [], []
    for step in range(horizon):
        if plan_local is not None:
            state = replace(
                state,
                cur=_replace_ev_row(state.cur, ev_index, plan_local[step], n, k),
                prev=_replace_ev_row(state.prev, ev_index,
                                     plan_local[max(step - 1, 0)], n, k))
        if state_hook is not None:
            state = state_hook(state) or state
        state, loc, log_scale = decoder_step(state, enc.context_t, config, store,
                                             cands, ev_col)
        locs.append(T.reshape(loc, (n * k, 1, 2)))
        log_scales.append(T.reshape(log_scale, (n * k, 1, 2)))

    loc_t = T.reshape(T.concat(locs, axis=1), (n, k, horizon, 2))
    log_scale_t = T.reshape(T.concat(log_scales, axis=1), (n, k, horizon, 2))
    conf_logits = _mix(nn.linear(store, "decoder/ev/conf", state.hidden, d, 1),
                       nn.linear(store, "decoder/sv/conf", state.hidden, d, 1),
                       ev_col)
    conf_t = T.softmax(T.reshape(conf_logits, (n, k)), axis=-1)
    return loc_t, log_scale_t, conf_t, ev_index


def rollout_mpp(enc: EncodedScene, scenario: Scenario, config: DecoderConfig,
                store: ParamStore, horizon: int | None = None,
                state_hook=None) -> ModeSet:
    """Joint K-mode rollout for every agent (planning mode)."""
    horizon = config.horizon_steps if horizon is None else horizon
    loc_t, log_scale_t, conf_t, _ = _rollout(enc, scenario, config, store,
                                             horizon, None, state_hook)
    return ModeSet(list(enc.agent_ids), list(enc.frames), loc_t.data,
                   np.exp(log_scale_t.data), conf_t.data, config.step_dt,
                   loc_t=loc_t, log_scale_t=log_scale_t, conf_t=conf_t)


def rollout_cmp(enc: EncodedScene, scenario: Scenario, fixed_ev_plan: TimedPath,
                config: DecoderConfig, store: ParamStore,
                horizon: int | None = None, state_hook=None) -> ModeSet:
    """Surrounding-vehicle predictions conditioned on a fixed plan.

    fixed_ev_plan is a global-frame trajectory with times relative to now
    (0 = current state); it is resampled to the decoder grid and replaces the
    controlled vehicle's decoded positions at every step and mode. Outputs at
    decoder step s depend on plan samples at times <= (s-1) * step_dt only.
    """
    horizon = config.horizon_steps if horizon is None else horizon
    needed = (horizon - 1) * config.step_dt
    if fixed_ev_plan.end_time < needed - 1e-9 or fixed_ev_plan.start_time > 1e-9:
        raise ValueError(f"fixed plan covers [{fixed_ev_plan.start_time}, "
                         f"{fixed_ev_plan.end_time}] s but the rollout needs [0, {needed}] s")
    ev_index = next(i for i, a in enumerate(scenario.agents) if a.kind is AgentKind.EV)
    grid = np.arange(horizon) * config.step_dt
    resampled = fixed_ev_plan.resample(grid)
    plan_local = to_local(enc.frames[ev_index], resampled.positions)
    loc_t, log_scale_t, conf_t, _ = _rollout(enc, scenario, config, store,
                                             horizon, plan_local, state_hook)
    keep = np.array([i for i in range(len(enc.agent_ids)) if i != ev_index],
                    dtype=np.intp)
    loc_sv = T.gather(loc_t, keep, axis=0)
    log_scale_sv = T.gather(log_scale_t, keep, axis=0)
    conf_sv = T.gather(conf_t, keep, axis=0)
    return ModeSet([enc.agent_ids[i] for i in keep],
                   [enc.frames[i] for i in keep],
                   loc_sv.data, np.exp(log_scale_sv.data), conf_sv.data,
                   config.step_dt,
                   loc_t=loc_sv, log_scale_t=log_scale_sv, conf_t=conf_sv)
