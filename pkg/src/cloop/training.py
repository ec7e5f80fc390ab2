"""Imitation losses and a momentum-SGD training loop.

The loss has three parts: Laplace regression on selected modes, a soft
cross-entropy on mode confidences whose target labels carry no gradient, and
an obstacle repulsion term that lowers predicted density at nearby static
obstacles. One scenario is one batch; runs are reproducible from seeds alone.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, backbone_forward
from .decoder import DecoderConfig, ModeSet, rollout_mpp
from .geometry import to_local
from .scenario import Scenario, generate_scenario
from .tensor import ParamStore, Tensor, tape

LOG2 = float(np.log(2.0))
SELECTIONS = ("closest_at_T", "highest_confidence", "both_averaged")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    weight_confidence: float = 1.0     # multiplies the confidence term
    weight_obstacle: float = 0.1       # multiplies the obstacle term
    soft_label_sharpness: float = 1.0  # temperature on final-displacement labels
    mode_selection: str = "both_averaged"
    obstacle_radius: float = 10.0      # m, obstacles farther from an agent are ignored

    def __post_init__(self):
        if self.weight_confidence < 0 or self.weight_obstacle < 0:
            raise ValueError("loss weights must be >= 0")
        if self.soft_label_sharpness <= 0:
            raise ValueError("soft_label_sharpness must be > 0")
        if self.mode_selection not in SELECTIONS:
            raise ValueError(f"mode_selection must be one of {SELECTIONS}")


def local_targets(scenario: Scenario, mode_set: ModeSet) -> np.ndarray:
    """Ground-truth future positions on the decoder grid, in each agent's
    frame. Raises when any agent lacks a future covering the horizon."""
    times = mode_set.times()
    out = np.empty((len(mode_set.agent_ids), len(times), 2))
    for i, aid in enumerate(mode_set.agent_ids):
        a = scenario.agent(aid)
        if a.future is None:
            raise ValueError(f"agent {aid!r} has no ground-truth future")
        if a.future.end_time < times[-1] - 1e-9 or a.future.start_time > times[0] + 1e-9:
            raise ValueError(f"agent {aid!r}: future covers "
                             f"[{a.future.start_time}, {a.future.end_time}] s, "
                             f"need [{times[0]}, {times[-1]}] s")
        out[i] = to_local(mode_set.frames[i], a.future.resample(times).positions)
    return out


def select_modes(mode_set: ModeSet, targets: np.ndarray, selection: str) -> np.ndarray:
    """Index of the training mode per agent. closest_at_T ranks by euclidean
    final-step displacement; highest_confidence by predicted probability."""
    if selection == "closest_at_T":
        d = np.linalg.norm(mode_set.locations[:, :, -1] - targets[:, None, -1], axis=-1)
        return d.argmin(axis=1)
    if selection == "highest_confidence":
        return mode_set.confidences.argmax(axis=1)
    raise ValueError(f"unknown selection {selection!r}")


def _laplace_nll(loc: Tensor, log_scale: Tensor, target) -> Tensor:
    # per element: log(2 s) + |r| / s, with s = exp(log_scale); summed over xy
    r = T.abs_(T.sub(loc, target))
    per = T.add(T.add(log_scale, LOG2), T.mul(r, T.exp(T.mul(log_scale, -1.0))))
    return T.sum_(per, axis=-1)


def _reg_for_selection(mode_set: ModeSet, targets: np.ndarray,
                       k_star: np.ndarray) -> Tensor:
    n, k, t, _ = mode_set.locations.shape
    rows = np.arange(n) * k + k_star
    loc = T.gather(T.reshape(mode_set.loc_t, (n * k, t, 2)), rows, axis=0)
    log_scale = T.gather(T.reshape(mode_set.log_scale_t, (n * k, t, 2)), rows, axis=0)
    return T.mul(T.sum_(_laplace_nll(loc, log_scale, targets)), 1.0 / (n * t))


def active_selections(selection: str) -> list[str]:
    if selection == "both_averaged":
        return ["closest_at_T", "highest_confidence"]
    return [selection]


def loss_reg(mode_set: ModeSet, targets: np.ndarray,
             selection: str = "both_averaged",
             modes: list[np.ndarray] | None = None) -> Tensor:
    """Mean negative Laplace log-likelihood of the selected mode; modes that
    are not selected receive no gradient. Passing precomputed mode indices
    (one array per active selection) freezes the otherwise data-dependent
    choice, which finite-difference gradient checks require."""
    if modes is None:
        modes = [select_modes(mode_set, targets, s)
                 for s in active_selections(selection)]
    terms = [_reg_for_selection(mode_set, targets, m) for m in modes]
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return T.mul(out, 1.0 / len(terms))


def soft_labels(mode_set: ModeSet, targets: np.ndarray, sharpness: float) -> np.ndarray:
    """Per-agent mode distribution from final displacements (L1). Constant
    with respect to the parameters: labels carry no gradient."""
    fd = np.abs(mode_set.locations[:, :, -1] - targets[:, None, -1]).sum(-1)
    z = -sharpness * fd
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_conf(mode_set: ModeSet, targets: np.ndarray, sharpness: float = 1.0,
              labels: np.ndarray | None = None) -> Tensor:
    n, k = mode_set.confidences.shape
    q = soft_labels(mode_set, targets, sharpness) if labels is None else labels
    return T.mul(T.sum_(T.mul(T.log(mode_set.conf_t), q)), -1.0 / (k * n))


def loss_obs(mode_set: ModeSet, scenario: Scenario, radius: float = 10.0) -> Tensor:
    """Mean predicted log-density at nearby obstacles, positive sign: lower is
    farther from obstacles. Averaged over agents, steps and modes; obstacles
    within radius of an agent's current position are summed."""
    n, k, t, _ = mode_set.locations.shape
    flat_loc = T.reshape(mode_set.loc_t, (n * k, t, 2))
    flat_ls = T.reshape(mode_set.log_scale_t, (n * k, t, 2))
    terms = None
    for i, frame in enumerate(mode_set.frames):
        near = [o for o in scenario.obstacles
                if np.linalg.norm(o.position - frame.origin) <= radius]
        if not near:
            continue
        rows = np.arange(i * k, (i + 1) * k)
        loc = T.gather(flat_loc, rows, axis=0)
        log_scale = T.gather(flat_ls, rows, axis=0)
        for o in near:
            nll = T.sum_(_laplace_nll(loc, log_scale, to_local(frame, o.position)))
            terms = nll if terms is None else T.add(terms, nll)
    if terms is None:
        return Tensor(np.float64(0.0))
    return T.mul(terms, -1.0 / (n * t * k))


def freeze_selections(mode_set: ModeSet, targets: np.ndarray,
                      config: LossConfig) -> dict:
    """Snapshot the data-dependent pieces of the loss (mode indices, soft
    labels) so repeated evaluations see a fixed differentiable function."""
    return {"modes": [select_modes(mode_set, targets, s)
                      for s in active_selections(config.mode_selection)],
            "labels": soft_labels(mode_set, targets, config.soft_label_sharpness)}


def total_loss(mode_set: ModeSet, scenario: Scenario, config: LossConfig,
               targets: np.ndarray | None = None, frozen: dict | None = None):
    """Weighted sum of the three components. Returns (loss, float parts)."""
    if targets is None:
        targets = local_targets(scenario, mode_set)
    modes = frozen["modes"] if frozen is not None else None
    labels = frozen["labels"] if frozen is not None else None
    reg = loss_reg(mode_set, targets, config.mode_selection, modes=modes)
    conf = loss_conf(mode_set, targets, config.soft_label_sharpness, labels=labels)
    obs = loss_obs(mode_set, scenario, config.obstacle_radius)
    loss = T.add(T.add(reg, T.mul(conf, config.weight_confidence)),
                 T.mul(obs, config.weight_obstacle))
    parts = {"reg": float(reg.data), "conf": float(conf.data),
             "obs": float(obs.data), "total": float(loss.data)}
    return loss, parts


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    reg: list = field(default_factory=list)
    conf: list = field(default_factory=list)
    obs: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.losses)


def global_grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def clip_gradients(grads: dict, max_norm: float):
    """Scale all gradients so the global norm is at most max_norm."""
    gn = global_grad_norm(grads)
    if max_norm and gn > max_norm:
        s = max_norm / gn
        grads = {name: g * s for name, g in grads.items()}
    return grads, gn


def scenario_stream(templates, seeds) -> list[Scenario]:
    """Deterministic training set: one scenario per (seed, template), ordered."""
    return [generate_scenario(t, s) for s in seeds for t in templates]


def _save_checkpoint(store: ParamStore, path: str, meta: dict) -> None:
    store.save(path)
    with open(path + ".json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def train(scenarios, store: ParamStore, backbone_config: BackboneConfig,
          decoder_config: DecoderConfig, loss_config: LossConfig,
          epochs: int = 1, lr: float = 1e-2, momentum: float = 0.9,
          clip_norm: float = 1.0, horizon: int | None = None,
          checkpoint_dir: str | None = None, log_every: int = 0) -> TrainReport:
    """Momentum gradient descent, one scenario per step.

    Aborts with TrainingError on a non-finite loss. When checkpoint_dir is
    set, weights plus a JSON sidecar are written after every epoch.
    """
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("no training scenarios")
    velocity: dict[str, np.ndarray] = {}
    report = TrainReport()
    start = time.perf_counter()
    step = 0
    for epoch in range(epochs):
        for sc in scenarios:
            try:
                with tape() as tp:
                    enc = backbone_forward(sc, backbone_config, store)
                    ms = rollout_mpp(enc, sc, decoder_config, store,
                                     horizon=horizon)
                    loss, parts = total_loss(ms, sc, loss_config)
                    if not np.isfinite(loss.data):
                        raise TrainingError(
                            f"non-finite loss at step {step}: {parts}")
                    grads = tp.backward(loss, store)
            except ValueError as e:
                # a blown-up run can fail validation mid-forward; report it as
                # divergence, but let genuine usage errors through untouched
                bad = [n for n in store.names()
                       if not np.isfinite(store[n]).all()]
                if bad:
                    raise TrainingError(
                        f"non-finite loss at step {step}: parameters "
                        f"{bad[:3]} diverged ({e})") from e
                raise
            grads, gn = clip_gradients(grads, clip_norm)
            if not np.isfinite(gn):
                raise TrainingError(f"non-finite gradient norm at step {step}")
            for name, g in grads.items():
                v = velocity.get(name)
                velocity[name] = g if v is None else momentum * v + g
                store[name] = store[name] - lr * velocity[name]
            report.losses.append(parts["total"])
            report.reg.append(parts["reg"])
            report.conf.append(parts["conf"])
            report.obs.append(parts["obs"])
            report.grad_norms.append(gn)
            if log_every and step % log_every == 0:
                print(f"step {step}: loss {parts['total']:.4f} "
                      f"(reg {parts['reg']:.4f} conf {parts['conf']:.4f} "
                      f"obs {parts['obs']:.4f}) |g| {gn:.3f}")
            step += 1
        if checkpoint_dir is not None:
            meta = {"epoch": epoch, "steps": step, "seed": store.seed,
                    "lr": lr, "momentum": momentum, "clip_norm": clip_norm,
                    "loss_config": asdict(loss_config),
                    "backbone_config": asdict(backbone_config),
                    "decoder_config": asdict(decoder_config),
                    "last_loss": report.losses[-1]}
            _save_checkpoint(store, f"{checkpoint_dir}/epoch_{epoch:03d}.weights",
                             meta)
    report.wall_time = time.perf_counter() - start
    return report
