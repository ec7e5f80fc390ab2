"""Scene encoder: agent-centric node/edge features, temporal aggregation,
attention message passing with lanes, and multimodal context projection.

Every geometric input is expressed in the observing agent's local frame, so
the encoding is invariant to rigid motions of the whole scene. All agents run
through identical parameters; nothing distinguishes the controlled vehicle
here. Internally agents are processed in id-sorted order and scattered back,
which makes permutation equivariance bit-exact.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .geometry import LocalFrame
from .scenario import Scenario, sample_lane_points, stack_histories
from .tensor import ParamStore, Tensor

NODE_IN = 6     # local position (2), local displacement (2), length, width
EDGE_IN = 4     # neighbor displacement (2), relative position (2), both rotated
LANE_IN = 11    # tangent direction (2), relative position (2), attributes (7)


@dataclass(frozen=True)
class BackboneConfig:
    hidden_dim: int = 64
    heads: int = 4
    temporal_layers: int = 2
    modes: int = 6
    neighbor_radius: float = 50.0
    lane_radius: float = 35.0
    max_lane_points: int = 48

    def __post_init__(self):
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} must be divisible "
                             f"by heads {self.heads}")
        if self.modes < 1:
            raise ValueError(f"modes must be >= 1, got {self.modes}")


@dataclass
class EncodedScene:
    agent_ids: list[str]
    frames: list[LocalFrame]
    node_hist: np.ndarray        # [N, H, D]
    edge_index: np.ndarray       # [E, 2] pairs (i, j), input agent order
    edge_hist: np.ndarray        # [E, H, D]
    nodes: np.ndarray            # [N, D]
    edges: np.ndarray            # [E, D]
    context_t: Tensor            # [N, K, D], tape-linked when built for training

    @property
    def context(self) -> np.ndarray:
        return self.context_t.data

    def edge_feature(self, i: int, j: int) -> np.ndarray:
        for e, (a, b) in enumerate(self.edge_index):
            if a == i and b == j:
                return self.edges[e]
        raise KeyError(f"no edge ({i}, {j})")


def _rotations(headings: np.ndarray) -> np.ndarray:
    c, s = np.cos(headings), np.sin(headings)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _local_displacements(positions: np.ndarray) -> np.ndarray:
    """Per-step displacement with a zero first row, shape like positions."""
    disp = np.diff(positions, axis=-2)
    pad = np.zeros_like(positions[..., :1, :])
    return np.concatenate([pad, disp], axis=-2)


def node_input_features(scenario: Scenario, valid: np.ndarray | None = None):
    """Raw [N, H, 6] agent-node inputs plus per-agent frames."""
    _, pos, hdg, ext = stack_histories(scenario)
    if not np.isfinite(pos).all() or not np.isfinite(hdg).all():
        raise ValueError("non-finite history in scenario")
    n, h, _ = pos.shape
    rot = _rotations(hdg[:, -1])                     # [N, 2, 2]
    rel = np.matmul(pos - pos[:, -1:, :], rot)       # R^T (x_t - x_0) as rows
    disp = np.matmul(_local_displacements(pos), rot)
    feat = np.concatenate([rel, disp, np.broadcast_to(ext[:, None, :], (n, h, 2))],
                          axis=-1)
    if valid is not None:
        feat = feat * valid[:, :, None]
    frames = [LocalFrame(pos[i, -1], float(hdg[i, -1])) for i in range(n)]
    return feat, frames


def encode_agent_nodes(scenario: Scenario, config: BackboneConfig, store: ParamStore,
                       valid: np.ndarray | None = None):
    """Node history encodings [N, H, D] and the agents' local frames."""
    feat, frames = node_input_features(scenario, valid)
    d = config.hidden_dim
    out = nn.mlp(store, "backbone/node_mlp", Tensor(feat), [NODE_IN, d, d])
    return out, frames


def neighbor_pairs(scenario: Scenario, radius: float) -> np.ndarray:
    """Ordered (i, j) pairs with j within radius of i at t=0; symmetric set."""
    _, pos, _, _ = stack_histories(scenario)
    cur = pos[:, -1]
    n = len(cur)
    dist = np.linalg.norm(cur[:, None] - cur[None], axis=-1)
    pairs = [(i, j) for i in range(n) for j in range(n)
             if i != j and dist[i, j] <= radius]
    return np.array(pairs, dtype=np.intp).reshape(-1, 2)


def edge_input_features(scenario: Scenario, pairs: np.ndarray) -> np.ndarray:
    """Raw [E, H, 4] agent-agent edge inputs for the given (i, j) pairs."""
    _, pos, hdg, _ = stack_histories(scenario)
    if len(pairs) == 0:
        return np.zeros((0, pos.shape[1], EDGE_IN))
    rot = _rotations(hdg[:, -1])
    disp = _local_displacements(pos)
    i_idx, j_idx = pairs[:, 0], pairs[:, 1]
    r = rot[i_idx]                                   # [E, 2, 2]
    dj = np.matmul(disp[j_idx], r)
    rel = np.matmul(pos[j_idx] - pos[i_idx], r)
    return np.concatenate([dj, rel], axis=-1)


def encode_aa_edges(scenario: Scenario, config: BackboneConfig, store: ParamStore,
                    pairs: np.ndarray | None = None):
    """Edge history encodings [E, H, D] plus the pair index used."""
    if pairs is None:
        pairs = neighbor_pairs(scenario, config.neighbor_radius)
    feat = edge_input_features(scenario, pairs)
    d = config.hidden_dim
    out = nn.mlp(store, "backbone/edge_mlp", Tensor(feat), [EDGE_IN, d, d])
    return out, pairs


def temporal_aggregate(store: ParamStore, config: BackboneConfig,
                       node_hist: Tensor, edge_hist: Tensor,
                       node_valid: np.ndarray | None = None,
                       edge_valid: np.ndarray | None = None):
    """Reduce [.., H, D] histories to per-sequence tokens via transformers.

    Node and edge sequences use the same architecture with separate
    parameters; the output is the final-timestep token.
    """
    d, heads, layers = config.hidden_dim, config.heads, config.temporal_layers
    nodes = nn.transformer_last_token(store, "backbone/temporal_nodes", node_hist,
                                      d, heads, layers, node_valid)
    if edge_hist.shape[0] > 0:
        edges = nn.transformer_last_token(store, "backbone/temporal_edges", edge_hist,
                                          d, heads, layers, edge_valid)
    else:
        edges = Tensor(np.zeros((0, d)))
    return nodes, edges


def lane_input_features(scenario: Scenario, config: BackboneConfig,
                        frames: list[LocalFrame]):
    """Padded [N, L, 11] lane-point inputs per agent plus a [N, 1, L] mask."""
    rows = []
    for frame in frames:
        pts = sample_lane_points(scenario, frame, config.lane_radius,
                                 config.max_lane_points)
        feat = np.zeros((len(pts), LANE_IN))
        for k, p in enumerate(pts):
            direction = np.array([np.cos(p.tangent), np.sin(p.tangent)])
            feat[k, 0:2] = direction @ frame.rotation
            feat[k, 2:4] = (p.position - frame.origin) @ frame.rotation
            feat[k, 4:] = p.attributes()
        rows.append(feat)
    lmax = max((len(r) for r in rows), default=0)
    n = len(frames)
    padded = np.zeros((n, lmax, LANE_IN))
    mask = np.zeros((n, 1, lmax))
    for i, r in enumerate(rows):
        padded[i, :len(r)] = r
        mask[i, 0, :len(r)] = 1.0
    return padded, mask


def message_passing(store: ParamStore, config: BackboneConfig, nodes: Tensor,
                    edges: Tensor, edge_index: np.ndarray, lane_feats: Tensor,
                    lane_mask: np.ndarray, positions: np.ndarray,
                    return_attention: bool = False):
    """Fuse aggregated features: edge attention, lane attention, agent
    self-attention (radius-masked), then a feed-forward block, all residual."""
    d, heads = config.hidden_dim, config.heads
    n = nodes.shape[0]
    x = T.reshape(nodes, (n, 1, d))
    info = {}

    if len(edge_index) > 0:
        grouped = [[] for _ in range(n)]
        for e, (i, _) in enumerate(edge_index):
            grouped[i].append(e)
        emax = max(len(g) for g in grouped)
        idx = np.full((n, emax), len(edge_index), dtype=np.intp)
        mask = np.zeros((n, 1, emax))
        for i, g in enumerate(grouped):
            idx[i, :len(g)] = g
            mask[i, 0, :len(g)] = 1.0
        with_pad = T.concat([edges, Tensor(np.zeros((1, d)))], axis=0)
        kv = T.reshape(T.gather(with_pad, idx.reshape(-1), axis=0), (n, emax, d))
        h = nn.layer_norm(store, "backbone/mp/ln_edge", x, d)
        out = nn.attend(store, "backbone/mp/edge_attn", h, kv, kv, d, heads,
                        mask, return_weights=return_attention)
        if return_attention:
            out, info["edge_weights"] = out
        x = T.add(x, out)

    if lane_feats.shape[1] > 0:
        h = nn.layer_norm(store, "backbone/mp/ln_lane", x, d)
        out = nn.attend(store, "backbone/mp/lane_attn", h, lane_feats, lane_feats,
                        d, heads, lane_mask, return_weights=return_attention)
        if return_attention:
            out, info["lane_weights"] = out
        x = T.add(x, out)

    xs = T.reshape(x, (1, n, d))
    dist = np.linalg.norm(positions[:, None] - positions[None], axis=-1)
    adj = ((dist <= config.neighbor_radius) | np.eye(n, dtype=bool))
    h = nn.layer_norm(store, "backbone/mp/ln_self", xs, d)
    out = nn.attend(store, "backbone/mp/self_attn", h, h, h, d, heads,
                    adj[None].astype(np.float64), return_weights=return_attention)
    if return_attention:
        out, info["self_weights"] = out
    xs = T.add(xs, out)
    h = nn.layer_norm(store, "backbone/mp/ln_ffn", xs, d)
    xs = T.add(xs, nn.ffn(store, "backbone/mp/ffn", h, d))
    fused = T.reshape(nn.layer_norm(store, "backbone/mp/ln_out", xs, d), (n, d))
    if return_attention:
        return fused, info
    return fused


def multimodal_project(store: ParamStore, config: BackboneConfig,
                       fused: Tensor) -> Tensor:
    """K learned linear heads turning fused nodes into [N, K, D] context."""
    n, d, k = fused.shape[0], config.hidden_dim, config.modes
    flat = nn.linear(store, "backbone/proj", fused, d, k * d)
    return T.reshape(flat, (n, k, d))


def backbone_forward(scenario: Scenario, config: BackboneConfig, store: ParamStore,
                     valid: np.ndarray | None = None) -> EncodedScene:
    """Full encoder pass producing per-agent, per-mode context vectors.

    Agents are processed in id-sorted order internally and results scattered
    back, so reordering the input permutes outputs bit-exactly.
    """
    order = sorted(range(len(scenario.agents)), key=lambda i: scenario.agents[i].id)
    inv = np.argsort(order)
    sorted_view = dataclasses.replace(
        scenario, agents=[scenario.agents[i] for i in order])
    sorted_valid = valid[order] if valid is not None else None

    node_hist, frames_sorted = encode_agent_nodes(sorted_view, config, store,
                                                  sorted_valid)
    pairs = neighbor_pairs(sorted_view, config.neighbor_radius)
    edge_hist, pairs = encode_aa_edges(sorted_view, config, store, pairs)
    edge_valid = None
    if sorted_valid is not None and len(pairs):
        edge_valid = sorted_valid[pairs[:, 0]] * sorted_valid[pairs[:, 1]]
    nodes, edges = temporal_aggregate(store, config, node_hist, edge_hist,
                                      sorted_valid, edge_valid)
    lane_feats_np, lane_mask = lane_input_features(sorted_view, config, frames_sorted)
    d = config.hidden_dim
    if lane_feats_np.shape[1] > 0:
        lane_feats = nn.mlp(store, "backbone/lane_mlp", Tensor(lane_feats_np),
                            [LANE_IN, d, d])
    else:
        lane_feats = Tensor(np.zeros((len(frames_sorted), 0, d)))
    positions = np.array([f.origin for f in frames_sorted])
    fused = message_passing(store, config, nodes, edges, pairs, lane_feats,
                            lane_mask, positions)
    context_sorted = multimodal_project(store, config, fused)
    context = T.gather(context_sorted, inv, axis=0)

    # report edges in the caller's agent order
    order_arr = np.asarray(order, dtype=np.intp)
    edge_index = order_arr[pairs] if len(pairs) else pairs
    frames = [frames_sorted[inv[i]] for i in range(len(order))]
    return EncodedScene(
        agent_ids=[a.id for a in scenario.agents],
        frames=frames,
        node_hist=node_hist.data[inv],
        edge_index=edge_index,
        edge_hist=edge_hist.data,
        nodes=nodes.data[inv],
        edges=edges.data,
        context_t=context,
    )
