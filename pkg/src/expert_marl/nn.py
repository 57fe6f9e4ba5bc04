"""Tiny numpy network kernel with hand-written backward passes.

Layers work on batches.  ``forward`` returns ``(output, cache)`` and
``backward(cache, grad_out)`` accumulates parameter gradients and returns the
gradient with respect to the layer input.  Everything is float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


def check_finite(arr: np.ndarray, what: str) -> None:
    # a sum is non-finite iff some entry is (or the values are already absurd)
    if not math.isfinite(float(np.sum(arr))):
        raise NonFiniteError(f"non-finite values in {what}")


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Param(shape={self.value.shape})"


class Module:
    def __init__(self):
        self._params: dict[str, Param] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value) -> Param:
        p = Param(value)
        self._params[name] = p
        return p

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad.fill(0.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.value.shape}")
            p.value[...] = value

    def copy_from(self, other: "Module") -> None:
        """Hard copy of parameter values (target-network sync)."""
        for (na, a), (nb, b) in zip(self.named_parameters(), other.named_parameters()):
            if na != nb or a.value.shape != b.value.shape:
                raise ValueError(f"structure mismatch: {na} vs {nb}")
            a.value[...] = b.value


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# activations: (forward(z), derivative(z, y))
def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, y):
    return (z > 0).astype(np.float64)


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_grad(z, y):
    return np.where(z > 0, 1.0, y + 1.0)


def _abs_grad(z, y):
    return np.sign(z)


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "identity": (lambda z: z, lambda z, y: np.ones_like(z)),
    "relu": (_relu, _relu_grad),
    "elu": (_elu, _elu_grad),
    "abs": (np.abs, _abs_grad),
}


def elu(z):
    return _elu(z)


class Dense(Module):
    """y = act(x @ W.T + b) over the last axis of ``x``."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity",
                 rng: np.random.Generator | None = None):
        super().__init__()
        if in_dim <= 0 or out_dim <= 0:
            raise ValueError("layer dims must be positive")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim, self.activation = in_dim, out_dim, activation
        self.W = self.add_param("W", uniform_init(rng, in_dim, (out_dim, in_dim)))
        self.b = self.add_param("b", np.zeros(out_dim))

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"Dense expected last dim {self.in_dim}, got {x.shape}")
        lead = x.shape[:-1]
        x2 = x.reshape(-1, self.in_dim)
        z = x2 @ self.W.value.T + self.b.value
        y = ACTIVATIONS[self.activation][0](z)
        check_finite(y, "Dense output")
        return y.reshape(*lead, self.out_dim), (x2, z, y, lead)

    def backward(self, cache, dy):
        x2, z, y, lead = cache
        dy = np.asarray(dy, dtype=np.float64).reshape(-1, self.out_dim)
        if self.activation != "identity":
            dy = dy * ACTIVATIONS[self.activation][1](z, y)
        self.W.grad += dy.T @ x2
        self.b.grad += dy.sum(axis=0)
        return (dy @ self.W.value).reshape(*lead, self.in_dim)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LSTMCell(Module):
    """Standard LSTM cell.

    ``Wx`` (4H x in) and ``Wh`` (4H x H) stack the eight gate matrices in the
    order input, forget, candidate, output; ``b`` stacks the four biases.
    """

    def __init__(self, in_dim: int, hidden_dim: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.hidden_dim = in_dim, hidden_dim
        H = hidden_dim
        self.Wx = self.add_param("Wx", uniform_init(rng, in_dim, (4 * H, in_dim)))
        self.Wh = self.add_param("Wh", uniform_init(rng, H, (4 * H, H)))
        self.b = self.add_param("b", np.zeros(4 * H))

    def forward(self, x, h, c):
        x = np.asarray(x, dtype=np.float64)
        H = self.hidden_dim
        if x.shape[-1] != self.in_dim or h.shape[-1] != H or c.shape[-1] != H:
            raise ValueError(f"LSTMCell shape mismatch: x{x.shape} h{h.shape} c{c.shape}")
        lead = x.shape[:-1]
        x2, h2, c2 = x.reshape(-1, self.in_dim), h.reshape(-1, H), c.reshape(-1, H)
        z = x2 @ self.Wx.value.T + h2 @ self.Wh.value.T + self.b.value
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c_new = f * c2 + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        check_finite(h_new, "LSTMCell output")
        cache = (x2, h2, c2, i, f, g, o, tc, lead)
        return h_new.reshape(*lead, H), c_new.reshape(*lead, H), cache

    def backward(self, cache, dh_new, dc_new=None):
        x2, h2, c2, i, f, g, o, tc, lead = cache
        H = self.hidden_dim
        dh_new = dh_new.reshape(-1, H)
        dc = dh_new * o * (1.0 - tc * tc)
        if dc_new is not None:
            dc = dc + dc_new.reshape(-1, H)
        dz = np.empty((x2.shape[0], 4 * H))
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c2 * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh_new * tc * o * (1.0 - o)
        self.Wx.grad += dz.T @ x2
        self.Wh.grad += dz.T @ h2
        self.b.grad += dz.sum(axis=0)
        dx = (dz @ self.Wx.value).reshape(*lead, self.in_dim)
        dh = (dz @ self.Wh.value).reshape(*lead, H)
        dc_prev = (dc * f).reshape(*lead, H)
        return dx, dh, dc_prev


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Attention(Module):
    """Single-head scaled dot-product self-attention with a residual path.

    Input is ``(batch, n_tokens, d)``; output has the same shape:
    ``X + softmax(Q K^T / sqrt(d)) V``.
    """

    def __init__(self, dim: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.Wq = self.add_param("Wq", uniform_init(rng, dim, (dim, dim)))
        self.Wk = self.add_param("Wk", uniform_init(rng, dim, (dim, dim)))
        self.Wv = self.add_param("Wv", uniform_init(rng, dim, (dim, dim)))

    def forward(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            X = X[None]
        if X.shape[-1] != self.dim:
            raise ValueError(f"Attention expected token dim {self.dim}, got {X.shape}")
        B, n, d = X.shape
        X2 = X.reshape(-1, d)
        Q = (X2 @ self.Wq.value.T).reshape(B, n, d)
        K = (X2 @ self.Wk.value.T).reshape(B, n, d)
        V = (X2 @ self.Wv.value.T).reshape(B, n, d)
        scale = 1.0 / np.sqrt(self.dim)
        A = softmax(Q @ K.transpose(0, 2, 1) * scale)
        out = X + A @ V
        check_finite(out, "Attention output")
        return out, (X, Q, K, V, A, scale)

    def backward(self, cache, dout):
        X, Q, K, V, A, scale = cache
        dout = dout.reshape(X.shape)
        dA = dout @ V.transpose(0, 2, 1)
        dV = A.transpose(0, 2, 1) @ dout
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
        dQ = dS @ K
        dK = dS.transpose(0, 2, 1) @ Q
        d = self.dim
        X2 = X.reshape(-1, d)
        dQ2, dK2, dV2 = dQ.reshape(-1, d), dK.reshape(-1, d), dV.reshape(-1, d)
        self.Wq.grad += dQ2.T @ X2
        self.Wk.grad += dK2.T @ X2
        self.Wv.grad += dV2.T @ X2
        dX = dQ2 @ self.Wq.value + dK2 @ self.Wk.value + dV2 @ self.Wv.value
        return dout + dX.reshape(X.shape)


class Sequential(Module):
    def __init__(self, *layers: Dense):
        super().__init__()
        self.layers = list(layers)
        for k, layer in enumerate(self.layers):
            self.add_child(str(k), layer)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def backward(self, caches, dy):
        for layer, c in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(c, dy)
        return dy


def mlp(sizes: list[int], activation: str, rng, out_activation: str = "identity") -> Sequential:
    layers = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = out_activation if k == len(sizes) - 2 else activation
        layers.append(Dense(a, b, act, rng))
    return Sequential(*layers)


class Adam:
    """Adam with bias correction.

    The parameters are moved into one contiguous buffer (each ``Param`` keeps
    a view), so a step is a handful of vector ops.  A parameter whose gradient
    is identically zero is left untouched on that step, moments included; the
    step counter still advances.
    """

    def __init__(self, params: list[Param], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        sizes = [p.value.size for p in self.params]
        self._sizes = np.array(sizes)
        self._starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        total = int(sum(sizes))
        self.values = np.empty(total)
        self.grads = np.zeros(total)
        offset = 0
        for p, size in zip(self.params, sizes):
            self.values[offset:offset + size] = p.value.reshape(-1)
            self.grads[offset:offset + size] = p.grad.reshape(-1)
            p.value = self.values[offset:offset + size].reshape(p.value.shape)
            p.grad = self.grads[offset:offset + size].reshape(p.grad.shape)
            offset += size
        self.m = np.zeros(total)
        self.v = np.zeros(total)
        self.step_count = 0

    def grad_norm(self) -> float:
        return float(np.sqrt(self.grads @ self.grads))

    def step(self) -> None:
        g = self.grads
        check_finite(g, "gradient")
        self.step_count += 1
        t = self.step_count
        live = np.add.reduceat(np.abs(g), self._starts) > 0 if g.size else np.zeros(0, bool)
        b1, b2 = self.beta1, self.beta2
        if live.all():
            self.m *= b1
            self.m += (1.0 - b1) * g
            self.v *= b2
            self.v += (1.0 - b2) * g * g
            m, v, sel = self.m, self.v, slice(None)
        else:
            sel = np.repeat(live, self._sizes)
            self.m[sel] = b1 * self.m[sel] + (1.0 - b1) * g[sel]
            self.v[sel] = b2 * self.v[sel] + (1.0 - b2) * g[sel] * g[sel]
            m, v = self.m[sel], self.v[sel]
        step_size = self.lr / (1.0 - b1 ** t)
        denom = np.sqrt(v / (1.0 - b2 ** t)) + self.eps
        self.values[sel] -= step_size * m / denom
        g.fill(0.0)

    def zero_grad(self) -> None:
        self.grads.fill(0.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"step_count": np.array(self.step_count), "m": self.m.copy(), "v": self.v.copy()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step_count"])
        self.m[...] = state["m"]
        self.v[...] = state["v"]


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(loss_fn: Callable[[bool], float], params: dict[str, Param],
               h: float = 1e-5, tolerance: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn(with_grad)`` must return the scalar loss and, when ``with_grad``
    is true, leave freshly computed gradients in every ``Param.grad``.
    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params.values():
        p.grad.fill(0.0)
    loss_fn(True)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    worst, worst_name, count = 0.0, "", 0
    for name, p in params.items():
        flat = p.value.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            lp = loss_fn(False)
            flat[k] = orig - h
            lm = loss_fn(False)
            flat[k] = orig
            num = (lp - lm) / (2.0 * h)
            a = a_flat[k]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            count += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{k}]"
    for p in params.values():
        p.grad.fill(0.0)
    return GradCheckReport(float(worst), worst_name, count, tolerance)


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> Path:
    """Write named arrays to a versioned ``.npz`` checkpoint (bit-exact round trip)."""
    path = Path(path)
    payload = {f"a/{k}": np.asarray(v) for k, v in arrays.items()}
    payload["__format_version__"] = np.array(CHECKPOINT_FORMAT_VERSION)
    for k, v in (meta or {}).items():
        payload[f"meta/{k}"] = np.array(v)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["__format_version__"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        arrays = {k[2:]: data[k] for k in data.files if k.startswith("a/")}
        meta = {k[5:]: str(data[k]) for k in data.files if k.startswith("meta/")}
    return arrays, meta
