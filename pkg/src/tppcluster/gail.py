"""Adversarial imitation of one cluster's event sequences.

The discriminator encodes the inter-event stream with its own recurrent cell;
its state before step i together with features of the action a_i enter a
logistic head. ``D`` is read as the probability that a step came from the
policy, so high ``D`` marks a step as recognisably fake.
Each sequence ends with a terminal step carrying the censored gap T - t_n,
flagged on a second input channel, so that when to stop is also imitated.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .policy import (
    PolicyModel,
    RolloutBatch,
    pad_with_terminal,
    rollout_batch,
    trajectory_log_probs,
)
from .sim import EventSequence

log = logging.getLogger(__name__)


N_ACTION_FEATURES = 7


def action_features(values: np.ndarray, term_mask: np.ndarray, absorb_mask: np.ndarray, scale: float) -> np.ndarray:
    """(B, L, 7) head features of each step, with u = scale * a.

    Events give u, u^2, log u; the terminal step gives 1, u, u^2 of the
    censored gap; absorbing steps give a single indicator. These span the
    log-likelihood ratio of two exponential or Rayleigh steps, which a
    saturating recurrent state cannot express for long gaps.
    """
    f = term_mask.astype(np.float64)
    g = absorb_mask.astype(np.float64)
    e = 1.0 - f - g
    u = np.where(absorb_mask, 0.0, values * scale)
    lu = np.log(np.maximum(u, 1e-8))
    return np.stack([e * u, e * u * u, e * lu, f, f * u, f * u * u, g], axis=-1)


class DiscriminatorModel(nn.Module):
    def __init__(
        self,
        d: int = 32,
        cell: str = "lstm",
        input_scale: float = 1.0,
        rng: np.random.Generator | int | None = 0,
    ):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.d = d
        self.input_scale = float(input_scale)
        self.cell = nn.make_cell(cell, 3, d, rng)
        self.head = nn.Dense(d, 1, rng)
        self.action_W = nn.init_uniform(rng, (N_ACTION_FEATURES, 1), d + N_ACTION_FEATURES)
        self.opt_steps = 0

    def zero_head(self) -> None:
        for p in (self.head.W, self.head.b, self.action_W):
            p.data[...] = 0.0

    def config(self) -> dict:
        return {"d": self.d, "cell": self.cell.kind, "input_scale": self.input_scale}


@dataclass
class GailConfig:
    entropy_coef: float = 1e-3
    batch_size: int = 32
    disc_steps: int = 1
    gamma: float = 0.99
    policy_lr: float = 1e-3
    disc_lr: float = 1e-3
    rounds: int = 100
    max_events: int | None = None
    adam_beta1: float = 0.9
    cost: str = "log_d"  # or "logit"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.entropy_coef < 0:
            raise ValueError("entropy coefficient must be non-negative")
        if self.cost not in ("logit", "log_d"):
            raise ValueError(f"unknown cost {self.cost!r}")


@dataclass
class Trajectory:
    """Per-step quantities of one rollout."""

    actions: np.ndarray
    log_probs: np.ndarray
    scores: np.ndarray
    q: np.ndarray
    q_log: np.ndarray = field(default_factory=lambda: np.zeros(0))


def step_inputs(values: np.ndarray, term_mask: np.ndarray, absorb_mask: np.ndarray, scale: float) -> np.ndarray:
    """(B, L, 3) recurrent inputs: scaled value, terminal flag, absorbing flag."""
    v = np.where(absorb_mask, 0.0, values * scale)
    return np.stack([v, term_mask.astype(np.float64), absorb_mask.astype(np.float64)], axis=-1)


def disc_logits(
    disc: DiscriminatorModel,
    values: np.ndarray,
    term_mask: np.ndarray,
    absorb_mask: np.ndarray | None = None,
) -> nn.Tensor:
    """Pre-sigmoid score of every step of a padded (B, L) array.

    Step i is scored from the state that has read steps 0..i-1 and from the
    features of step i itself. Positions after the terminal step are scored
    as absorbing steps when ``absorb_mask`` marks them.
    """
    B, L = values.shape
    if absorb_mask is None:
        absorb_mask = np.zeros((B, L), dtype=bool)
    x = step_inputs(values, term_mask, absorb_mask, disc.input_scale)
    cell = disc.cell
    state = nn.zero_state(cell, B)
    states = [state]
    for i in range(L - 1):
        state = cell(nn.Tensor(x[:, i]), state)
        states.append(state)
    H = cell.hidden(nn.stack(states, axis=1))
    F = action_features(values, term_mask, absorb_mask, disc.input_scale)
    return (disc.head(H) + nn.matmul(nn.Tensor(F), disc.action_W))[..., 0]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def discriminate(disc: DiscriminatorModel, sequence: EventSequence, terminal: bool = False) -> np.ndarray:
    """Per-event score D(s_i, a_i) in (0, 1); empty input gives an empty array.

    With ``terminal`` the score of the closing censored-gap step is appended.
    """
    values, em, tm = pad_with_terminal([sequence])
    with nn.no_grad():
        z = disc_logits(disc, values, tm, np.zeros_like(tm)).data[0]
    keep = em[0] | tm[0] if terminal else em[0]
    return _sigmoid(z[keep])


def padded_stream(seqs, width: int | None = None):
    """(values, action mask, terminal mask, absorbing mask) at a common width.

    Action steps are the events plus the terminal step; every later position
    up to ``width`` is absorbing. ``seqs`` is a list of EventSequence or a
    RolloutBatch.
    """
    if isinstance(seqs, RolloutBatch):
        values, em, tm = seqs.values, seqs.event_mask, seqs.term_mask
    else:
        values, em, tm = pad_with_terminal(list(seqs))
    B, L = values.shape
    if width is not None and width > L:
        extra = width - L
        values = np.concatenate([values, np.ones((B, extra))], axis=1)
        em = np.concatenate([em, np.zeros((B, extra), dtype=bool)], axis=1)
        tm = np.concatenate([tm, np.zeros((B, extra), dtype=bool)], axis=1)
    act = em | tm
    return values, act, tm, ~act


def _width(seqs) -> int:
    if isinstance(seqs, RolloutBatch):
        return seqs.values.shape[1]
    return max((len(s) for s in seqs), default=0) + 1


def disc_objective(disc: DiscriminatorModel, policy_seqs, expert_seqs) -> nn.Tensor:
    """E_policy[log D] + E_expert[log(1 - D)] over all steps, absorbing ones included.

    Both streams are padded to a common width so every trajectory
    contributes the same number of steps whatever its event count.
    """
    width = max(_width(policy_seqs), _width(expert_seqs))
    pv, _, pt, pa = padded_stream(policy_seqs, width)
    ev, _, et, ea = padded_stream(expert_seqs, width)
    zp = disc_logits(disc, pv, pt, pa)
    ze = disc_logits(disc, ev, et, ea)
    return nn.reduce_mean(nn.log_sigmoid(zp)) + nn.reduce_mean(nn.log_sigmoid(-ze))


def irl_step(disc: DiscriminatorModel, optimizer: nn.Adam, policy_seqs, expert_seqs) -> float:
    """One ascent step on the discriminator objective; returns the loss (its negative).

    Either argument may be a list of EventSequence or a RolloutBatch.
    """
    if len(policy_seqs) == 0 or len(expert_seqs) == 0:
        raise ValueError("irl_step needs non-empty policy and expert batches")
    loss = -disc_objective(disc, policy_seqs, expert_seqs)
    if loss.requires_grad:
        nn.backward(loss)
        optimizer.step()
        disc.opt_steps = optimizer.t
    return loss.item()


def reward_to_go(costs: np.ndarray, gamma: float, mask: np.ndarray | None = None) -> np.ndarray:
    """Discounted suffix sums Q_i = sum_{j >= i} gamma^(j-i) c_j along the last axis.

    Masked (padding) steps contribute nothing.
    """
    c = np.asarray(costs, dtype=np.float64)
    if mask is not None:
        c = np.where(mask, c, 0.0)
    q = np.zeros_like(c)
    acc = np.zeros(c.shape[:-1])
    for i in range(c.shape[-1] - 1, -1, -1):
        acc = c[..., i] + gamma * acc
        q[..., i] = acc
    return q


def rl_step(
    policy: PolicyModel,
    disc: DiscriminatorModel,
    optimizer: nn.Adam,
    config: GailConfig,
    rng: np.random.Generator | None = None,
    T: float | None = None,
    batch: RolloutBatch | None = None,
) -> float:
    """Policy-gradient step on the discriminator cost with a causal-entropy bonus.

    Descends E[grad log pi * (Q - b)] - lambda * E[grad log pi * (Q_log - b_log)]
    where Q, Q_log are reward-to-go of the step cost and of -log pi, and b,
    b_log their batch means at the same step index. Every rollout is padded
    with absorbing steps to the batch width, so a rollout's return does not
    depend on how many events it has unless the discriminator says so.
    Returns the surrogate value.
    """
    if batch is None:
        if rng is None or T is None:
            raise ValueError("rl_step needs either a rollout batch or (rng, T)")
        batch = rollout_batch(policy, T, config.batch_size, rng, config.max_events)
    n = len(batch)
    if n == 0:
        raise ValueError("rl_step needs a non-empty rollout batch")
    values, act, tm, absorb = padded_stream(batch)
    with nn.no_grad():
        z = disc_logits(disc, values, tm, absorb).data
    adv = _advantage(step_costs(z, config.cost), batch.step_log_probs, act, config)
    lp = trajectory_log_probs(policy, batch.values, batch.event_mask, batch.term_mask)
    surrogate = nn.reduce_sum(lp * nn.Tensor(adv)) * (1.0 / n)
    nn.backward(surrogate)
    if not np.isfinite(optimizer.grad_norm()):
        optimizer.zero_grad()
        raise FloatingPointError("non-finite policy gradient")
    optimizer.step()
    policy.opt_steps = optimizer.t
    return surrogate.item()


def step_costs(z: np.ndarray, kind: str = "logit") -> np.ndarray:
    """Per-step policy cost from discriminator logits ``z``.

    ``log_d`` is log D; ``logit`` is log D - log(1 - D) = z, which is zero
    wherever the discriminator cannot tell the streams apart.
    """
    if kind == "log_d":
        return -np.logaddexp(0.0, -z)
    return np.asarray(z, dtype=np.float64)


def position_baseline(q: np.ndarray, act: np.ndarray) -> np.ndarray:
    """Batch mean of ``q`` at every step index over rows acting there."""
    n = act.sum(axis=0)
    mean = np.where(act, q, 0.0).sum(axis=0) / np.maximum(n, 1)
    return np.where(n > 0, mean, 0.0)


def _advantage(costs, log_probs, act, config: GailConfig) -> np.ndarray:
    # absorbing steps carry cost but no action; they still enter the reward-to-go
    q = reward_to_go(costs, config.gamma)
    adv = q - position_baseline(q, act)
    if config.entropy_coef:
        q_log = reward_to_go(np.where(act, -log_probs, 0.0), config.gamma)
        adv = adv - config.entropy_coef * (q_log - position_baseline(q_log, act))
    return np.where(act, adv, 0.0)


def trajectories(batch: RolloutBatch, disc: DiscriminatorModel, config: GailConfig) -> list[Trajectory]:
    """Split a scored rollout batch into per-rollout trajectories (terminal step last)."""
    values, act, tm, absorb = padded_stream(batch)
    with nn.no_grad():
        z = disc_logits(disc, values, tm, absorb).data
    q = reward_to_go(step_costs(z, config.cost), config.gamma)
    q_log = reward_to_go(np.where(act, -batch.step_log_probs, 0.0), config.gamma)
    out = []
    for b, k in enumerate(batch.lengths + 1):
        out.append(
            Trajectory(
                batch.values[b, :k].copy(),
                batch.step_log_probs[b, :k].copy(),
                _sigmoid(z[b, :k]),
                q[b, :k].copy(),
                q_log[b, :k].copy(),
            )
        )
    return out


def mean_scores(disc: DiscriminatorModel, sequences, width: int | None = None, absorbing: bool = False) -> float:
    """Mean discriminator score over events and terminal steps.

    With ``absorbing`` the padded steps up to ``width`` count too, which is
    the population the discriminator objective averages over.
    """
    values, act, tm, absorb = padded_stream(sequences, width)
    with nn.no_grad():
        z = disc_logits(disc, values, tm, absorb).data
    d = _sigmoid(z)
    return float(d.mean() if absorbing else d[act].mean())


@dataclass
class RoundLog:
    round: int
    cluster: int
    disc_loss: float
    surrogate_loss: float
    mean_len: float


def make_optimizers(policy: PolicyModel, disc: DiscriminatorModel, config: GailConfig):
    popt = nn.Adam(policy.parameters(), nn.OptimizerConfig(lr=config.policy_lr, beta1=config.adam_beta1))
    dopt = nn.Adam(disc.parameters(), nn.OptimizerConfig(lr=config.disc_lr, beta1=config.adam_beta1))
    popt.t = policy.opt_steps
    dopt.t = disc.opt_steps
    return popt, dopt


def gail_tpp(
    policy: PolicyModel,
    disc: DiscriminatorModel,
    data: list[EventSequence],
    config: GailConfig,
    rng: np.random.Generator | int,
    cluster: int = 0,
    log_path=None,
) -> list[RoundLog]:
    """Run ``config.rounds`` rounds of (sample, discriminator step, policy step).

    Both models are updated in place. Expert minibatches are drawn with
    replacement from ``data``; returns the per-round diagnostics.
    """
    if len(data) == 0:
        raise ValueError("gail_tpp needs a non-empty cluster")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    T = data[0].T
    popt, dopt = make_optimizers(policy, disc, config)
    history = []
    fh = open(log_path, "a") if log_path is not None else None
    try:
        for r in range(config.rounds):
            batch = rollout_batch(policy, T, config.batch_size, rng, config.max_events)
            d_loss = 0.0
            for _ in range(config.disc_steps):
                idx = rng.integers(0, len(data), size=config.batch_size)
                d_loss = irl_step(disc, dopt, batch, [data[i] for i in idx])
            s_loss = rl_step(policy, disc, popt, config, batch=batch)
            rec = RoundLog(r, cluster, d_loss, s_loss, float(batch.lengths.mean()))
            history.append(rec)
            if fh is not None:
                fh.write(json.dumps(asdict(rec)) + "\n")
    finally:
        if fh is not None:
            fh.close()
    return history


def disc_header(disc: DiscriminatorModel) -> dict:
    return {"model": "discriminator", **disc.config()}


def disc_from_checkpoint(doc: dict) -> DiscriminatorModel:
    h = doc["header"]
    disc = DiscriminatorModel(d=h["d"], cell=h["cell"], input_scale=h.get("input_scale", 1.0))
    nn.load_params_dict(disc, doc)
    return disc
