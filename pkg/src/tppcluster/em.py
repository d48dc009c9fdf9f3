"""Mixture-of-policies clustering by alternating classification and imitation.

E-step: sample labelled sequences from the current policies (cluster chosen
in proportion to the current cluster sizes), fit the sequence classifier on
them and relabel the dataset by argmax. M-step: run adversarial imitation
for every cluster on its (augmented) members.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .gail import DiscriminatorModel, GailConfig, gail_tpp
from .metrics import ClusteringResult, purity, rand_index
from .policy import PolicyModel, pad_with_terminal, rollout_batch, sequence_log_likelihoods
from .sim import EventSequence

log = logging.getLogger(__name__)


class ClassifierModel(nn.Module):
    """Step embedding -> recurrent cell -> softmax over clusters.

    Every step of a sequence (its inter-event times, then the censored gap
    up to T with a terminal flag) is embedded, and the state after the
    terminal step is classified.
    """

    def __init__(
        self,
        n_clusters: int,
        d: int = 32,
        cell: str = "lstm",
        input_scale: float = 1.0,
        rng: np.random.Generator | int | None = 0,
    ):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.n_clusters = n_clusters
        self.d = d
        self.input_scale = float(input_scale)
        self.embed = nn.Dense(2, d, rng)
        self.cell = nn.make_cell(cell, d, d, rng)
        self.head = nn.Dense(d, n_clusters, rng)
        self.opt_steps = 0

    def config(self) -> dict:
        return {
            "n_clusters": self.n_clusters,
            "d": self.d,
            "cell": self.cell.kind,
            "input_scale": self.input_scale,
        }


def classifier_logits(model: ClassifierModel, sequences: list[EventSequence]) -> nn.Tensor:
    values, em, tm = pad_with_terminal(sequences)
    B, L = values.shape
    x = np.stack([values * model.input_scale, tm.astype(np.float64)], axis=-1)
    E = nn.tanh(model.embed(x))
    state = nn.zero_state(model.cell, B)
    states = []
    for i in range(L):
        state = model.cell(E[:, i], state)
        states.append(state)
    S = nn.stack(states, axis=1)
    last = np.argmax(tm, axis=1)
    H = model.cell.hidden(S[np.arange(B), last])
    return model.head(H)


def classify(model: ClassifierModel, sequences: list[EventSequence], batch: int = 512) -> np.ndarray:
    """Cluster posterior (rows sum to one) for each sequence."""
    out = []
    with nn.no_grad():
        for lo in range(0, len(sequences), batch):
            z = classifier_logits(model, sequences[lo : lo + batch]).data
            z = z - z.max(axis=1, keepdims=True)
            p = np.exp(z)
            out.append(p / p.sum(axis=1, keepdims=True))
    if not out:
        return np.zeros((0, model.n_clusters))
    return np.concatenate(out)


def hard_labels(posterior: np.ndarray) -> np.ndarray:
    """Argmax with ties going to the lowest cluster index."""
    return np.argmax(posterior, axis=1)


def classifier_loss(model: ClassifierModel, sequences, labels, weights=None) -> nn.Tensor:
    """Mean (optionally per-sample weighted) cross-entropy."""
    labels = np.asarray(labels)
    logp = nn.log_softmax(classifier_logits(model, list(sequences)), axis=1)
    onehot = np.zeros(logp.shape)
    onehot[np.arange(len(labels)), labels] = 1.0 if weights is None else np.asarray(weights)
    return -nn.reduce_sum(logp * nn.Tensor(onehot)) * (1.0 / len(labels))


def balanced_weights(labels: np.ndarray) -> np.ndarray:
    """Per-sample weights giving every present class the same total weight (mean weight 1)."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    per_class = len(labels) / (len(classes) * counts)
    return per_class[np.searchsorted(classes, labels)]


def train_classifier(
    model: ClassifierModel,
    sequences: list[EventSequence],
    labels: np.ndarray,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    balanced: bool = False,
) -> float:
    """Minibatch cross-entropy training; returns the final-epoch mean loss.

    With ``balanced`` every class present in ``labels`` carries equal total
    weight, so the argmax compares likelihoods rather than posteriors.
    """
    opt = nn.Adam(model.parameters(), nn.OptimizerConfig(lr=lr))
    opt.t = model.opt_steps
    labels = np.asarray(labels)
    weights = balanced_weights(labels) if balanced else np.ones(len(labels))
    n = len(sequences)
    last = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            loss = classifier_loss(model, [sequences[i] for i in idx], labels[idx], weights[idx])
            nn.backward(loss)
            opt.step()
            losses.append(loss.item())
        last = float(np.mean(losses)) if losses else last
    model.opt_steps = opt.t
    return last


# ----------------------------------------------------------------------------
# configuration and state


@dataclass
class EmConfig:
    n_clusters: int = 2
    m: int = 256
    max_iter: int = 50
    tol: float = 0.01
    classifier_epochs: int = 20
    classifier_batch: int = 64
    classifier_lr: float = 3e-3
    balanced_classifier: bool = True
    lr_decay: float = 1.0  # per-iteration factor on imitation and classifier step sizes
    aug_f0: float = 0.2
    aug_decay: float = 0.5
    warmup_rounds: int | None = None
    d: int = 32
    cell: str = "lstm"
    dist: str = "rayleigh"
    input_scale: float | None = None  # None: the dataset's mean event rate
    gail: GailConfig = field(default_factory=GailConfig)

    def __post_init__(self):
        if isinstance(self.gail, dict):
            self.gail = GailConfig(**self.gail)
        if self.n_clusters < 2:
            raise ValueError("need at least two clusters")
        if self.m < self.n_clusters:
            raise ValueError("classifier sample size must be at least the number of clusters")
        if not 0.0 <= self.aug_f0 <= 1.0 or not 0.0 <= self.aug_decay <= 1.0:
            raise ValueError("augmentation fraction and decay must lie in [0, 1]")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")

    def step_scale(self, iteration: int) -> float:
        """Step-size multiplier for EM iteration ``iteration`` (1-based; warm-up is 0)."""
        return self.lr_decay ** max(0, iteration - 1)

    def gail_for(self, iteration: int) -> GailConfig:
        c = self.step_scale(iteration)
        return replace(self.gail, policy_lr=self.gail.policy_lr * c, disc_lr=self.gail.disc_lr * c)


def desk_config(n_clusters: int = 2, **overrides) -> EmConfig:
    """Settings that cluster the sine / negative-sine mixture (200 per cluster, T=100)
    on a single core in roughly ten minutes per run."""
    base = dict(
        n_clusters=n_clusters,
        max_iter=25,
        lr_decay=0.85,
        warmup_rounds=2000,
        d=16,
        dist="exponential",
        gail=GailConfig(rounds=500, batch_size=64, disc_lr=3e-3),
    )
    base.update(overrides)
    return EmConfig(**base)


@dataclass
class MixtureState:
    policies: list[PolicyModel]
    discriminators: list[DiscriminatorModel]
    classifier: ClassifierModel
    labels: np.ndarray  # partition of the dataset as one cluster index per sequence
    iteration: int = 0

    @property
    def n_clusters(self) -> int:
        return len(self.policies)

    def partition(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.labels == i) for i in range(self.n_clusters)]


def sequence_key(seq: EventSequence) -> int:
    """Content hash identifying a sequence independently of dataset order."""
    h = hashlib.sha256(np.float64(seq.T).tobytes() + seq.timestamps.astype(np.float64).tobytes())
    return int.from_bytes(h.digest()[:8], "little")


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(p) for p in path]]))


# stream tags
_INIT, _PARTITION, _ESTEP, _MSTEP, _TRAIN = 1, 2, 3, 4, 5


def data_rate(dataset: list[EventSequence]) -> float:
    """Events per unit time over the whole dataset (1/T when there are none)."""
    n = sum(len(s) for s in dataset)
    horizon = sum(s.T for s in dataset)
    return n / horizon if n else 1.0 / dataset[0].T


def init_state(dataset: list[EventSequence], config: EmConfig, seed: int) -> MixtureState:
    """Fresh models and a random partition keyed on sequence content.

    Recurrent inputs are multiplied by ``config.input_scale`` (the dataset's
    event rate when unset) so that typical gaps are of order one.
    """
    N = config.n_clusters
    scale = config.input_scale if config.input_scale is not None else data_rate(dataset)
    policies, discs = [], []
    for i in range(N):
        policies.append(
            PolicyModel(config.d, config.cell, config.dist, scale, _rng(seed, _INIT, 0, i))
        )
        discs.append(DiscriminatorModel(config.d, config.cell, scale, _rng(seed, _INIT, 1, i)))
    clf = ClassifierModel(N, config.d, config.cell, scale, _rng(seed, _INIT, 2))
    labels = np.array([_rng(seed, _PARTITION, sequence_key(s) % 2**63).integers(N) for s in dataset])
    return MixtureState(policies, discs, clf, labels, 0)


def augment(
    labels: np.ndarray,
    posterior: np.ndarray,
    fraction: float,
    keys: np.ndarray | None = None,
    floor: int = 0,
) -> list[np.ndarray]:
    """Training index sets per cluster: own members plus borrowed outsiders.

    Cluster ``i`` borrows the ``floor(fraction * |outside|)`` non-members with
    the highest posterior for ``i``; a cluster with no members borrows at least
    ``floor`` of them. Membership of the partition itself is not changed.
    """
    labels = np.asarray(labels)
    M, N = posterior.shape
    if keys is None:
        keys = np.arange(M)
    fraction = max(0.0, fraction)
    out = []
    for i in range(N):
        own = np.flatnonzero(labels == i)
        outside = np.flatnonzero(labels != i)
        k = int(math.floor(fraction * outside.size + 1e-9))
        if own.size == 0:
            k = max(k, floor)
        k = min(k, outside.size)
        if k:
            order = np.lexsort((keys[outside], -posterior[outside, i]))
            borrowed = outside[order[:k]]
            own = np.concatenate([own, borrowed])
        out.append(own)
    return out


def augmentation_fraction(config: EmConfig, iteration: int) -> float:
    return max(0.0, config.aug_f0 * config.aug_decay**iteration)


def e_step(
    state: MixtureState,
    dataset: list[EventSequence],
    config: EmConfig,
    seed: int,
    T: float,
):
    """Returns ``(new labels, posterior, classifier training loss)``; updates the classifier in place."""
    N = state.n_clusters
    rng = _rng(seed, _ESTEP, state.iteration)
    sizes = np.bincount(state.labels, minlength=N).astype(np.float64)
    y = rng.choice(N, size=config.m, replace=True, p=sizes / sizes.sum())
    samples: list[EventSequence] = []
    sample_labels: list[int] = []
    for i in range(N):
        n_i = int((y == i).sum())
        if n_i == 0:
            continue
        batch = rollout_batch(state.policies[i], T, n_i, rng, config.gail.max_events)
        if batch.lengths.max(initial=0) == 0:
            log.warning("policy %d generated only empty sequences", i)
        samples.extend(batch.sequences)
        sample_labels.extend([i] * n_i)
    loss = train_classifier(
        state.classifier,
        samples,
        np.array(sample_labels),
        config.classifier_epochs,
        config.classifier_batch,
        config.classifier_lr * config.step_scale(state.iteration),
        rng,
        config.balanced_classifier,
    )
    posterior = classify(state.classifier, dataset)
    return hard_labels(posterior), posterior, loss


def _gail_task(args):
    policy, disc, data, gail_cfg, seed_path = args
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    logs = gail_tpp(policy, disc, data, gail_cfg, _rng(*seed_path))
    return policy, disc, logs


def m_step(
    state: MixtureState,
    dataset: list[EventSequence],
    train_sets: list[np.ndarray],
    gail_cfg: GailConfig,
    seed: int,
    keys: np.ndarray,
    workers: int = 1,
):
    """Imitation on every cluster's training set; cluster ``i`` uses stream (seed, iteration, i)."""
    tasks = []
    for i, idx in enumerate(train_sets):
        idx = np.asarray(idx)
        if idx.size == 0:
            tasks.append(None)
            continue
        idx = idx[np.lexsort((np.arange(idx.size), keys[idx]))]
        data = [dataset[j] for j in idx]
        tasks.append((state.policies[i], state.discriminators[i], data, gail_cfg, (seed, _MSTEP, state.iteration, i)))
    live = [t for t in tasks if t is not None]
    if workers > 1 and len(live) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(live))) as ex:
            results = list(ex.map(_gail_task, live))
    else:
        results = [_gail_task(t) for t in live]
    logs = {}
    it = iter(results)
    for i, t in enumerate(tasks):
        if t is None:
            log.warning("cluster %d has no training data; skipped", i)
            continue
        policy, disc, lg = next(it)
        state.policies[i] = policy
        state.discriminators[i] = disc
        logs[i] = lg
    return logs


def assigned_log_likelihood(state: MixtureState, dataset: list[EventSequence], labels=None) -> float:
    """Mean over sequences of log pi_{theta_y}(x) under each sequence's assigned policy."""
    labels = state.labels if labels is None else labels
    total = 0.0
    for i, pol in enumerate(state.policies):
        idx = np.flatnonzero(labels == i)
        if idx.size:
            total += sequence_log_likelihoods(pol, [dataset[j] for j in idx]).sum()
    return total / len(dataset)


@dataclass
class IterationRecord:
    iteration: int
    sizes: list[int]
    changed: float
    loglik: float
    classifier_loss: float
    purity: float | None = None
    rand_index: float | None = None
    wall_time: float = 0.0


def _scores(labels, dataset):
    true = [s.label for s in dataset]
    if any(t is None for t in true):
        return None, None
    res = ClusteringResult(labels, np.array(true))
    return purity(res), rand_index(res)


def rlpmm(
    dataset: list[EventSequence],
    config: EmConfig,
    seed: int = 0,
    workers: int = 1,
    callback=None,
    round_callback=None,
) -> tuple[MixtureState, list[IterationRecord]]:
    """Full EM loop: random partition, warm-up imitation, then E/M until labels settle.

    Stops when the fraction of sequences whose label changed between
    consecutive E-steps drops below ``config.tol`` or after ``config.max_iter``
    iterations. ``callback(state, record)`` is invoked after every iteration
    (including the warm-up, recorded as iteration 0) and
    ``round_callback(iteration, logs)`` after every M-step with the
    per-cluster round diagnostics.
    """
    if not dataset:
        raise ValueError("empty dataset")
    T = dataset[0].T
    keys = np.array([sequence_key(s) for s in dataset], dtype=np.uint64)
    start = time.perf_counter()
    state = init_state(dataset, config, seed)

    warm = config.gail
    if config.warmup_rounds is not None:
        warm = GailConfig(**{**asdict(config.gail), "rounds": config.warmup_rounds})
    logs = m_step(state, dataset, state.partition(), warm, seed, keys, workers)
    if round_callback:
        round_callback(0, logs)
    cp, ri = _scores(state.labels, dataset)
    rec = IterationRecord(
        0,
        np.bincount(state.labels, minlength=config.n_clusters).tolist(),
        1.0,
        assigned_log_likelihood(state, dataset),
        float("nan"),
        cp,
        ri,
        time.perf_counter() - start,
    )
    history = [rec]
    if callback:
        callback(state, rec)

    for k in range(1, config.max_iter + 1):
        state.iteration = k
        labels, posterior, loss = e_step(state, dataset, config, seed, T)
        changed = float(np.mean(labels != state.labels))
        state.labels = labels
        f = augmentation_fraction(config, k - 1)
        train_sets = augment(labels, posterior, f, keys, floor=int(math.ceil(config.m / config.n_clusters)))
        converged = changed < config.tol
        if not converged:
            logs = m_step(state, dataset, train_sets, config.gail_for(k), seed, keys, workers)
            if round_callback:
                round_callback(k, logs)
        cp, ri = _scores(labels, dataset)
        rec = IterationRecord(
            k,
            np.bincount(labels, minlength=config.n_clusters).tolist(),
            changed,
            assigned_log_likelihood(state, dataset),
            loss,
            cp,
            ri,
            time.perf_counter() - start,
        )
        history.append(rec)
        log.info("iteration %d: sizes=%s changed=%.4f cp=%s", k, rec.sizes, changed, cp)
        if callback:
            callback(state, rec)
        if converged:
            break
    return state, history
