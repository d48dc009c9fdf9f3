"""Small reverse-mode differentiation substrate on top of numpy.

Only the handful of operations the recurrent policy, discriminator and
classifier need are provided. Recurrent cells are fused into single tape
nodes with hand-written backward passes so that unrolling a batch of
sequences records one node per time step.
"""
from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording them on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "_g")

    def __init__(self, data, parents: tuple = (), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self._g = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.backward_fn is not None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter(Tensor):
    """Trainable leaf with gradient accumulator and optimizer moment buffers."""

    __slots__ = ("grad", "m", "v")

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64))
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)

    @property
    def requires_grad(self) -> bool:
        return True

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter(shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, parents, backward_fn)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    # floored at the smallest normal double so the result stays strictly positive
    out = np.maximum(np.logaddexp(0.0, a.data), np.finfo(np.float64).tiny)
    return _record(out, (a,), lambda g: (g * _sigmoid(a.data),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)), stable for large |a|."""
    a = as_tensor(a)
    return _record(-np.logaddexp(0.0, -a.data), (a,), lambda g: (g * _sigmoid(-a.data),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), backward)


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(a.data.sum(axis=axis), (a,), backward)


def reduce_mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis=axis), 1.0 / n)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(out, tuple(tensors), backward)


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a 2-d ``b`` of shape (k, n)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward)


# ----------------------------------------------------------------------------
# fused recurrent cells


def rnn_cell(x, h, V, W, b=None) -> Tensor:
    """Simple recurrence ``tanh(x @ V + h @ W [+ b])``.

    x: (B, n_in), h: (B, d), V: (n_in, d), W: (d, d).
    """
    x, h, V, W = as_tensor(x), as_tensor(h), as_tensor(V), as_tensor(W)
    if x.shape[-1] != V.shape[0] or h.shape[-1] != W.shape[0] or V.shape[1] != W.shape[1]:
        raise ValueError(f"rnn_cell shape mismatch: x{x.shape} h{h.shape} V{V.shape} W{W.shape}")
    z = x.data @ V.data + h.data @ W.data
    parents = [x, h, V, W]
    if b is not None:
        b = as_tensor(b)
        z = z + b.data
        parents.append(b)
    out = np.tanh(z)

    def backward(g):
        dz = g * (1.0 - out * out)
        grads = [dz @ V.data.T, dz @ W.data.T, x.data.T @ dz, h.data.T @ dz]
        if b is not None:
            grads.append(dz.sum(axis=0))
        return tuple(grads)

    return _record(out, tuple(parents), backward)


def lstm_cell(x, state, Wx, Wh, b) -> Tensor:
    """One LSTM step. ``state`` packs ``[h, c]`` along the last axis (B, 2d).

    Gate order in the 4d pre-activation: input, forget, candidate, output.
    """
    x, state, Wx, Wh, b = (as_tensor(t) for t in (x, state, Wx, Wh, b))
    d = Wh.shape[0]
    if x.shape[-1] != Wx.shape[0] or state.shape[-1] != 2 * d or Wx.shape[1] != 4 * d:
        raise ValueError(
            f"lstm_cell shape mismatch: x{x.shape} state{state.shape} Wx{Wx.shape} Wh{Wh.shape}"
        )
    h, c = state.data[:, :d], state.data[:, d:]
    z = x.data @ Wx.data + h @ Wh.data + b.data
    i = _sigmoid(z[:, :d])
    f = _sigmoid(z[:, d : 2 * d])
    gg = np.tanh(z[:, 2 * d : 3 * d])
    o = _sigmoid(z[:, 3 * d :])
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc

    def backward(g):
        gh, gc = g[:, :d], g[:, d:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * gg * i * (1.0 - i),
                dc * c * f * (1.0 - f),
                dc * i * (1.0 - gg * gg),
                gh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        dstate = np.concatenate([dz @ Wh.data.T, dc * f], axis=1)
        return (dz @ Wx.data.T, dstate, x.data.T @ dz, h.T @ dz, dz.sum(axis=0))

    return _record(np.concatenate([h_new, c_new], axis=1), (x, state, Wx, Wh, b), backward)


# ----------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``grad`` of every reachable Parameter."""
    if loss.data.size != 1:
        raise ValueError("backward expects a scalar loss")
    if isinstance(loss, Parameter):
        loss.grad += 1.0
        return
    if loss.backward_fn is None:
        raise RuntimeError("backward called on a value with no recorded forward pass")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    loss._g = np.ones_like(loss.data)
    for node in reversed(order):
        g, node._g = node._g, None
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            parent._g = pg if parent._g is None else parent._g + pg


# ----------------------------------------------------------------------------
# layers


def init_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Parameter:
    s = 1.0 / math.sqrt(fan_in)
    return Parameter(rng.uniform(-s, s, size=shape))


class Module:
    """Anything owning named Parameters."""

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                out[name] = value
            elif isinstance(value, Module):
                for sub, p in value.named_parameters().items():
                    out[f"{name}.{sub}"] = p
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.W = init_uniform(rng, (n_in, n_out), n_in)
        self.b = init_uniform(rng, (n_out,), n_in)

    def __call__(self, x) -> Tensor:
        return dense_forward(x, self.W, self.b)


def dense_forward(x, W, b) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"dense input has {x.shape[-1]} features, layer expects {W.shape[0]}")
    return add(matmul(x, W), b)


class TanhCell(Module):
    """h' = tanh(x V + h W); no bias, state is just h."""

    kind = "tanh"

    def __init__(self, n_in: int, d: int, rng: np.random.Generator):
        self.d = d
        self.V = init_uniform(rng, (n_in, d), n_in + d)
        self.W = init_uniform(rng, (d, d), n_in + d)

    @property
    def state_size(self) -> int:
        return self.d

    def hidden(self, state):
        return state

    def __call__(self, x, state) -> Tensor:
        return rnn_cell(x, state, self.V, self.W)


class LSTMCell(Module):
    kind = "lstm"

    def __init__(self, n_in: int, d: int, rng: np.random.Generator):
        self.d = d
        self.Wx = init_uniform(rng, (n_in, 4 * d), n_in + d)
        self.Wh = init_uniform(rng, (d, 4 * d), n_in + d)
        self.b = init_uniform(rng, (4 * d,), n_in + d)

    @property
    def state_size(self) -> int:
        return 2 * self.d

    def hidden(self, state):
        return state[..., : self.d]

    def __call__(self, x, state) -> Tensor:
        return lstm_cell(x, state, self.Wx, self.Wh, self.b)


def make_cell(kind: str, n_in: int, d: int, rng: np.random.Generator):
    if kind == "lstm":
        return LSTMCell(n_in, d, rng)
    if kind == "tanh":
        return TanhCell(n_in, d, rng)
    raise ValueError(f"unknown cell kind {kind!r}")


def zero_state(cell, batch: int) -> Tensor:
    return Tensor(np.zeros((batch, cell.state_size)))


def recurrent_step(cell, prev_state, x) -> Tensor:
    """Advance ``cell`` by one input; thin functional alias of ``cell(x, state)``."""
    return cell(x, prev_state)


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    mode: str = "adam"  # or "sgd"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment decays must lie in (0, 1)")
        if self.mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")


class Adam:
    """Adam (or plain SGD) over a fixed list of Parameters.

    ``step`` clips the global gradient norm, updates and then clears gradients.
    """

    def __init__(self, params: Iterable[Parameter], config: OptimizerConfig | None = None):
        self.params = list(params)
        self.config = config or OptimizerConfig()
        self.t = 0

    def grad_norm(self) -> float:
        return math.sqrt(float(np.sum([np.sum(p.grad * p.grad) for p in self.params])))

    def step(self) -> float:
        cfg = self.config
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm")
        scale = 1.0
        if cfg.clip_norm is not None and norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
        self.t += 1
        if cfg.mode == "sgd":
            for p in self.params:
                p.data -= cfg.lr * scale * p.grad
                p.zero_grad()
            return norm
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for p in self.params:
            g = scale * p.grad
            p.m *= cfg.beta1
            p.m += (1.0 - cfg.beta1) * g
            p.v *= cfg.beta2
            p.v += (1.0 - cfg.beta2) * g * g
            p.data -= cfg.lr * (p.m / bc1) / (np.sqrt(p.v / bc2) + cfg.eps)
            p.zero_grad()
        return norm

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_dict(self) -> dict:
        return {"t": self.t}


def optimizer_step(optimizer: Adam) -> float:
    return optimizer.step()


# ----------------------------------------------------------------------------
# gradient oracle


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    step: float = 1e-5,
    eps: float = 1e-6,
) -> float:
    """Max over ``params`` of ||analytic - numeric|| / (||numeric|| + eps).

    ``loss_fn`` must rebuild the same scalar deterministically on each call.
    Gradients are central differences with the given step.
    """
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                up = loss_fn().item()
                flat[k] = orig - step
                down = loss_fn().item()
                flat[k] = orig
                nflat[k] = (up - down) / (2.0 * step)
            err = np.linalg.norm(a - numeric) / (np.linalg.norm(numeric) + eps)
            worst = max(worst, float(err))
    return worst


# ----------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "tppcluster-params/1"


def params_to_dict(module: Module, header: dict | None = None) -> dict:
    params = {}
    for name, p in module.named_parameters().items():
        params[name] = {
            "shape": list(p.data.shape),
            "data": [float(format(x, ".17g")) for x in p.data.reshape(-1)],
        }
    return {"format": CHECKPOINT_FORMAT, "header": dict(header or {}), "params": params}


def load_params_dict(module: Module, doc: dict) -> None:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    own = module.named_parameters()
    missing = set(own) ^ set(doc["params"])
    if missing:
        raise ValueError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
    for name, p in own.items():
        rec = doc["params"][name]
        arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
        if arr.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data[...] = arr


def save_checkpoint(module: Module, path, header: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(module, header), fh)
        fh.write("\n")


def read_checkpoint(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
