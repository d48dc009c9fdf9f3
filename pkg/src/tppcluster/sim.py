"""Ground-truth temporal point processes, thinning simulation and dataset files."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

KINDS = ("hawkes", "sine", "negative-sine", "constant", "bimodal")


@dataclass
class EventSequence:
    timestamps: np.ndarray
    T: float
    label: int | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        ts = self.timestamps
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        if ts.size:
            if ts[0] <= 0 or ts[-1] > self.T:
                raise ValueError("timestamps must lie in (0, T]")
            if np.any(np.diff(ts) <= 0):
                raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return self.timestamps.size

    @property
    def intervals(self) -> np.ndarray:
        """Inter-event times a_i = t_i - t_{i-1} with t_0 = 0."""
        return np.diff(self.timestamps, prepend=0.0)


@dataclass(frozen=True)
class IntensitySpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown intensity kind {self.kind!r}")
        if self.kind == "hawkes":
            p = self.params
            for key in ("gamma0", "alpha", "w"):
                if key not in p:
                    raise ValueError(f"hawkes spec needs {key!r}")
            if p["gamma0"] < 0 or p["alpha"] < 0 or p["w"] <= 0:
                raise ValueError("hawkes requires gamma0 >= 0, alpha >= 0, w > 0")
            if p["alpha"] / p["w"] >= 1:
                if not p.get("allow_unstable", False):
                    raise ValueError("hawkes branching ratio alpha/w must be < 1")
                warnings.warn("simulating a supercritical Hawkes process", RuntimeWarning)

    @classmethod
    def hawkes(cls, gamma0: float, alpha: float, w: float = 1.0) -> "IntensitySpec":
        return cls("hawkes", {"gamma0": float(gamma0), "alpha": float(alpha), "w": float(w)})

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "IntensitySpec":
        d = dict(d)
        return cls(d.pop("kind"), d)


def _bimodal(t: np.ndarray, T: float) -> np.ndarray:
    # Gaussian bumps of width T/8 centred at T/4 and 3T/4
    centre = np.where(t <= T / 2, T / 4, 3 * T / 4)
    return 0.15 * np.exp(-((t - centre) ** 2) / (2 * (T / 8) ** 2))


def _inhomogeneous_rate(kind: str, t: np.ndarray, T: float) -> np.ndarray:
    if kind == "sine":
        return np.sin(np.pi * t / 50) / 10 + 0.1
    if kind == "negative-sine":
        return -np.sin(np.pi * t / 50) / 10 + 0.1
    if kind == "constant":
        return np.full_like(t, 0.1)
    if kind == "bimodal":
        return _bimodal(t, T)
    raise ValueError(kind)


_SUPREMUM = {"sine": 0.2, "negative-sine": 0.2, "constant": 0.1, "bimodal": 0.15}


def intensity_at(spec: IntensitySpec, t: float, history: Sequence[float] = (), T: float = 100.0) -> float:
    """Exact conditional intensity at time ``t`` given prior events ``history``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    hist = np.asarray(history, dtype=np.float64)
    if hist.size and (np.any(np.diff(hist) < 0) or hist[-1] >= t):
        raise ValueError("history must be sorted and strictly before t")
    if spec.kind == "hawkes":
        p = spec.params
        return float(p["gamma0"] + p["alpha"] * np.exp(-p["w"] * (t - hist)).sum())
    return float(_inhomogeneous_rate(spec.kind, np.asarray(t, dtype=np.float64), T))


def _simulate_hawkes(p: dict, T: float, rng: np.random.Generator) -> np.ndarray:
    gamma0, alpha, w = p["gamma0"], p["alpha"], p["w"]
    events = []
    t = 0.0
    excite = 0.0  # sum of exp(-w (t - t_j)) at the current time
    bound = gamma0
    while True:
        if bound <= 0:
            break
        dt = rng.exponential(1.0 / bound)
        t += dt
        if t > T:
            break
        excite *= math.exp(-w * dt)
        lam = gamma0 + alpha * excite
        if rng.uniform() * bound <= lam:
            events.append(t)
            excite += 1.0
            lam += alpha
        # intensity only decays until the next event, so its current value bounds it
        bound = lam
    return np.asarray(events)


def _simulate_inhomogeneous(kind: str, T: float, rng: np.random.Generator) -> np.ndarray:
    bound = _SUPREMUM[kind]
    n = rng.poisson(bound * T)
    cand = np.sort(rng.uniform(0.0, T, size=n))
    keep = rng.uniform(size=n) * bound <= _inhomogeneous_rate(kind, cand, T)
    out = cand[keep]
    return out[out > 0]


def simulate(spec: IntensitySpec, T: float, rng) -> EventSequence:
    """Draw one sequence on (0, T] by thinning against an intensity upper bound.

    ``rng`` is a numpy Generator or an integer seed.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if spec.kind == "hawkes":
        ts = _simulate_hawkes(spec.params, T, rng)
    else:
        ts = _simulate_inhomogeneous(spec.kind, T, rng)
    return EventSequence(ts, T)


def sequence_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sequence ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def simulate_many(spec: IntensitySpec, T: float, n: int, seed: int) -> list[EventSequence]:
    return [simulate(spec, T, sequence_rng(seed, i)) for i in range(n)]


@dataclass
class EmpiricalIntensity:
    dt: float
    centers: np.ndarray
    rates: np.ndarray


def empirical_intensity(sequences: Sequence[EventSequence], dt: float = 5.0, T: float | None = None) -> EmpiricalIntensity:
    """Per-bin mean event count divided by the bin width."""
    if len(sequences) == 0:
        raise ValueError("need at least one sequence")
    if dt <= 0:
        raise ValueError("bin width must be positive")
    if T is None:
        T = sequences[0].T
    if any(abs(s.T - T) > 1e-12 for s in sequences):
        raise ValueError("all sequences must share the same horizon")
    nbins = int(math.ceil(T / dt - 1e-12))
    edges = np.arange(nbins + 1) * dt
    counts = np.zeros(nbins)
    for s in sequences:
        if len(s):
            idx = np.minimum((s.timestamps / dt).astype(np.int64), nbins - 1)
            counts += np.bincount(idx, minlength=nbins)
    centers = (edges[:-1] + np.minimum(edges[1:], T)) / 2
    return EmpiricalIntensity(dt, centers, counts / len(sequences) / dt)


def generate_dataset(
    specs: Sequence[IntensitySpec], per_cluster: int, T: float = 100.0, seed: int = 0
) -> list[EventSequence]:
    """Labelled mixture with equal cluster sizes, returned in shuffled order.

    Sequence ``j`` of cluster ``k`` is drawn from ``sequence_rng(seed, k * per_cluster + j)``.
    """
    if not specs:
        raise ValueError("need at least one intensity spec")
    if per_cluster <= 0:
        raise ValueError("per-cluster count must be positive")
    data = []
    for k, spec in enumerate(specs):
        for j in range(per_cluster):
            s = simulate(spec, T, sequence_rng(seed, k * per_cluster + j))
            s.label = k
            data.append(s)
    order = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED])).permutation(len(data))
    return [data[i] for i in order]


def random_hawkes_specs(k: int, seed: int) -> list[IntensitySpec]:
    """Hawkes clusters with gamma0, alpha ~ U[0, 1] and w = 1.

    Draws with alpha >= 1 are redrawn so that every cluster is stationary.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x4A3C]))
    specs = []
    while len(specs) < k:
        gamma0, alpha = rng.uniform(0.0, 1.0, size=2)
        if alpha < 1.0:
            specs.append(IntensitySpec.hawkes(gamma0, alpha, 1.0))
    return specs


APPENDIX_KINDS = ("sine", "negative-sine", "constant", "bimodal")


def appendix_specs(k: int) -> list[IntensitySpec]:
    """First ``k`` of the sine, negative-sine, constant and bimodal intensities."""
    if not 1 <= k <= 4:
        raise ValueError("k must be between 1 and 4")
    return [IntensitySpec(kind) for kind in APPENDIX_KINDS[:k]]


# ----------------------------------------------------------------------------
# dataset file: one JSON object per line


def write_dataset(path, sequences: Iterable[EventSequence]) -> None:
    with open(path, "w") as fh:
        for i, s in enumerate(sequences):
            rec = {
                "id": i,
                "label": -1 if s.label is None else int(s.label),
                "T": float(s.T),
                "timestamps": [float(x) for x in s.timestamps],
            }
            fh.write(json.dumps(rec) + "\n")


def read_dataset(path) -> list[EventSequence]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            label = rec.get("label", -1)
            out.append(EventSequence(rec["timestamps"], rec["T"], None if label < 0 else int(label)))
    return out
