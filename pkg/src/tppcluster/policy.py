"""Stochastic recurrent policy over inter-event times.

The state is the recurrent embedding of the inter-event history and the
action is the time until the next event. The head maps the hidden state to
a positive rate through softplus; the rate parameterises either an
exponential or a Rayleigh density over the action.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .sim import EventSequence

DISTRIBUTIONS = ("rayleigh", "exponential")


class RunawayRollout(RuntimeError):
    """A rollout produced more events than the configured cap."""


def default_event_cap(T: float, rate_sup: float = 1.0) -> int:
    return max(1000, int(10 * math.ceil(rate_sup) * math.ceil(T)))


class PolicyModel(nn.Module):
    def __init__(
        self,
        d: int = 32,
        cell: str = "lstm",
        dist: str = "rayleigh",
        input_scale: float = 1.0,
        rng: np.random.Generator | int | None = 0,
    ):
        if dist not in DISTRIBUTIONS:
            raise ValueError(f"unknown action distribution {dist!r}")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.d = d
        self.dist = dist
        self.input_scale = float(input_scale)
        self.cell = nn.make_cell(cell, 1, d, rng)
        self.head = nn.Dense(d, 1, rng)
        self.opt_steps = 0

    @property
    def cell_kind(self) -> str:
        return self.cell.kind

    def config(self) -> dict:
        return {
            "d": self.d,
            "cell": self.cell_kind,
            "dist": self.dist,
            "input_scale": self.input_scale,
        }

    @property
    def rate_unit(self) -> float:
        """theta is expressed in time units of 1/input_scale: a rate for
        exponential, an inverse squared time for Rayleigh."""
        return self.input_scale if self.dist == "exponential" else self.input_scale**2

    def set_constant_rate(self, rate: float) -> None:
        """Zero the head weights and set its bias so that rate(h) == ``rate`` for all h."""
        z = rate / self.rate_unit
        self.head.W.data[...] = 0.0
        self.head.b.data[...] = z + math.log(-math.expm1(-z))  # softplus inverse


def rate(model: PolicyModel, h) -> nn.Tensor:
    """Positive scalar rate per hidden vector; ``h`` has shape (..., d)."""
    h = nn.as_tensor(h)
    if h.shape[-1] != model.d:
        raise ValueError(f"hidden vector has dimension {h.shape[-1]}, model expects {model.d}")
    theta = nn.softplus(model.head(h))[..., 0]
    return theta if model.rate_unit == 1.0 else theta * model.rate_unit


def _log_density(dist: str, theta, a) -> nn.Tensor:
    theta = nn.as_tensor(theta)
    a = nn.as_tensor(a)
    if dist == "exponential":
        return nn.log(theta) - theta * a
    return nn.log(theta) + nn.log(a) - theta * nn.square(a) * 0.5


def log_density(dist: str, theta, a) -> np.ndarray:
    """log pi(a | theta) as a plain array."""
    with nn.no_grad():
        return _log_density(dist, theta, a).data


def inverse_cdf(dist: str, theta: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Action whose survival probability under ``theta`` equals ``u``."""
    if dist == "exponential":
        return -np.log(u) / theta
    return np.sqrt(-2.0 * np.log(u) / theta)


def _uniform(rng: np.random.Generator, size) -> np.ndarray:
    # (0, 1): keeps actions finite and strictly positive
    return rng.uniform(np.finfo(np.float64).tiny, 1.0, size=size)


def sample_action(model: PolicyModel, h, rng: np.random.Generator):
    """Sample a ~ pi(. | rate(h)); returns ``(a, log_prob)`` as arrays."""
    with nn.no_grad():
        theta = rate(model, h).data
    u = _uniform(rng, np.shape(theta))
    a = inverse_cdf(model.dist, theta, u)
    return a, log_density(model.dist, theta, a)


@dataclass
class RolloutBatch:
    """Padded batch of policy rollouts.

    Arrays are (B, L + 1): row ``b`` holds its ``n_b`` inter-event times
    followed by the censored gap ``T - t_n`` at position ``n_b`` (the
    terminal step). ``event_mask`` marks real events, ``term_mask`` the
    terminal step. Padding values are 1.0 so that densities stay finite.
    """

    sequences: list[EventSequence]
    values: np.ndarray
    event_mask: np.ndarray
    term_mask: np.ndarray
    step_log_probs: np.ndarray  # log pi for events, log survival at the terminal step
    states: np.ndarray  # (B, L, d) pre-action hidden embeddings of the events

    def __len__(self):
        return len(self.sequences)

    @property
    def lengths(self) -> np.ndarray:
        return self.event_mask.sum(axis=1).astype(int)

    @property
    def step_mask(self) -> np.ndarray:
        return self.event_mask | self.term_mask

    @property
    def intervals(self) -> np.ndarray:
        return self.values[:, :-1]

    @property
    def mask(self) -> np.ndarray:
        return self.event_mask[:, :-1]

    @property
    def log_probs(self) -> np.ndarray:
        """Per-event log pi (terminal step excluded)."""
        return np.where(self.event_mask, self.step_log_probs, 0.0)[:, :-1]

    def state_actions(self, b: int) -> list[tuple[np.ndarray, float, float]]:
        """(state, action, absolute time) triples of rollout ``b``."""
        n = self.lengths[b]
        ts = self.sequences[b].timestamps
        return [(self.states[b, i], float(self.values[b, i]), float(ts[i])) for i in range(n)]


def rollout_batch(
    model: PolicyModel,
    T: float,
    n: int,
    rng: np.random.Generator,
    max_events: int | None = None,
) -> RolloutBatch:
    """Sample ``n`` sequences on (0, T] from the policy.

    Starting from the zero state, each step samples an action from the rate of
    the current state and advances time; the first action that would cross T
    is discarded and ends that rollout.
    """
    if max_events is None:
        max_events = default_event_cap(T)
    cell = model.cell
    t = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    term_lp = np.zeros(n)
    steps_a, steps_lp, steps_m, steps_h = [], [], [], []
    with nn.no_grad():
        state = nn.zero_state(cell, n)
        while alive.any():
            if len(steps_a) >= max_events:
                raise RunawayRollout(f"rollout exceeded {max_events} events")
            h = cell.hidden(state)
            theta = rate(model, h).data
            a = inverse_cdf(model.dist, theta, _uniform(rng, n))
            t_new = t + a
            accept = alive & (t_new <= T)
            stopped = alive & ~accept
            if stopped.any():
                term_lp[stopped] = log_survival(model.dist, theta[stopped], T - t[stopped])
            if not accept.any():
                break
            a = np.where(accept, a, 1.0)
            steps_a.append(a)
            steps_lp.append(np.where(accept, log_density(model.dist, theta, a), 0.0))
            steps_m.append(accept)
            steps_h.append(h.data)
            t = np.where(accept, t_new, t)
            alive = accept
            state = cell(nn.Tensor(a[:, None] * model.input_scale), state)
    L = len(steps_a)
    values = np.ones((n, L + 1))
    event_mask = np.zeros((n, L + 1), dtype=bool)
    lp = np.zeros((n, L + 1))
    states = np.zeros((n, L, model.d))
    if L:
        values[:, :L] = np.stack(steps_a, axis=1)
        event_mask[:, :L] = np.stack(steps_m, axis=1)
        lp[:, :L] = np.stack(steps_lp, axis=1)
        states[...] = np.stack(steps_h, axis=1)
    lengths = event_mask.sum(axis=1)
    rows = np.arange(n)
    term_mask = np.zeros_like(event_mask)
    term_mask[rows, lengths] = True
    seqs = []
    for b in range(n):
        seqs.append(EventSequence(np.cumsum(values[b, : lengths[b]]), T))
    values[rows, lengths] = T - t
    lp[rows, lengths] = term_lp
    return RolloutBatch(seqs, values, event_mask, term_mask, lp, states)


def rollout(model: PolicyModel, T: float, rng: np.random.Generator, max_events: int | None = None):
    """Single rollout: ``(sequence, [(state, action, time)], per-event log-probs)``."""
    batch = rollout_batch(model, T, 1, rng, max_events)
    k = batch.lengths[0]
    return batch.sequences[0], batch.state_actions(0), batch.log_probs[0, :k].copy()


def pad_intervals(sequences: list[EventSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Stack inter-event times into (B, L) with a validity mask; padding is 1.0."""
    L = max((len(s) for s in sequences), default=0)
    out = np.ones((len(sequences), L))
    mask = np.zeros((len(sequences), L), dtype=bool)
    for b, s in enumerate(sequences):
        a = s.intervals
        if a.size and np.any(a <= 0):
            raise ValueError("inter-event times must be positive")
        out[b, : a.size] = a
        mask[b, : a.size] = True
    return out, mask


def pad_with_terminal(sequences: list[EventSequence]):
    """(values, event_mask, term_mask) of shape (B, L + 1), as in RolloutBatch."""
    a, m = pad_intervals(sequences)
    B, L = a.shape
    values = np.ones((B, L + 1))
    values[:, :L] = a
    event_mask = np.zeros((B, L + 1), dtype=bool)
    event_mask[:, :L] = m
    term_mask = np.zeros_like(event_mask)
    for b, s in enumerate(sequences):
        n = len(s)
        term_mask[b, n] = True
        values[b, n] = s.T - (s.timestamps[-1] if n else 0.0)
    return values, event_mask, term_mask


def _log_survival(dist: str, theta, r) -> nn.Tensor:
    theta = nn.as_tensor(theta)
    r = nn.as_tensor(r)
    if dist == "exponential":
        return -(theta * r)
    return -(theta * nn.square(r) * 0.5)


def log_survival(dist: str, theta, r) -> np.ndarray:
    """log P(a > r | theta)."""
    with nn.no_grad():
        return _log_survival(dist, theta, r).data


def _hidden_path(model: PolicyModel, values: np.ndarray, n_states: int) -> nn.Tensor:
    """Stacked hidden states h_0 .. h_{n_states-1} driven by ``values``."""
    cell = model.cell
    B = values.shape[0]
    state = nn.zero_state(cell, B)
    states = [state]
    for i in range(n_states - 1):
        state = cell(nn.Tensor(values[:, i : i + 1] * model.input_scale), state)
        states.append(state)
    return cell.hidden(nn.stack(states, axis=1))


def step_log_probs(model: PolicyModel, intervals: np.ndarray) -> nn.Tensor:
    """Teacher-forced log pi(a_i | h_{i-1}) for a padded (B, L) interval array."""
    B, L = intervals.shape
    if L == 0:
        return nn.Tensor(np.zeros((B, 0)))
    H = _hidden_path(model, intervals, L)
    return _log_density(model.dist, rate(model, H), intervals)


def trajectory_log_probs(model: PolicyModel, values, event_mask, term_mask) -> nn.Tensor:
    """Teacher-forced per-step log-probabilities including the terminal step.

    Events contribute log pi(a_i | h_{i-1}); the terminal step contributes the
    log survival of the censored gap under the state after the last event.
    Other positions are zero.
    """
    H = _hidden_path(model, values, values.shape[1])
    theta = rate(model, H)
    em = event_mask.astype(np.float64)
    tm = term_mask.astype(np.float64)
    a = np.where(event_mask, values, 1.0)
    r = np.where(term_mask, values, 0.0)
    return _log_density(model.dist, theta, a) * em + _log_survival(model.dist, theta, r) * tm


def log_prob_sequence(model: PolicyModel, sequence: EventSequence):
    """Teacher-forced log-likelihood of one sequence's inter-event times.

    Returns ``(total, per-step log pi, per-step -log pi)``; ``total`` is a
    differentiable Tensor. The censored tail after the last event is not
    included.
    """
    intervals, _ = pad_intervals([sequence])
    lp = step_log_probs(model, intervals)
    return nn.reduce_sum(lp), lp.data[0].copy(), -lp.data[0].copy()


def sequence_log_likelihoods(model: PolicyModel, sequences: list[EventSequence]) -> np.ndarray:
    """Per-sequence total log pi (no survival term), evaluated without gradients."""
    if not sequences:
        return np.zeros(0)
    intervals, mask = pad_intervals(sequences)
    with nn.no_grad():
        lp = step_log_probs(model, intervals).data
    return np.where(mask, lp, 0.0).sum(axis=1)


def policy_header(model: PolicyModel) -> dict:
    return {"model": "policy", **model.config()}


def policy_from_checkpoint(doc: dict) -> PolicyModel:
    h = doc["header"]
    model = PolicyModel(d=h["d"], cell=h["cell"], dist=h["dist"], input_scale=h.get("input_scale", 1.0))
    nn.load_params_dict(model, doc)
    return model
