"""Small dense-network engine in numpy: MLP forward/backward and Adam.

Checkpoint format (``save_mlp`` / ``load_mlp``) is a numpy ``.npz`` archive::

    format   "hexfleet-mlp"        version  1
    widths   int array, input width first
    hidden   "relu" | "elu"        output   "identity" | "relu1"
    W0, b0, W1, b1, ...             row-major float64 arrays, W_l of shape (in, out)
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if name == "identity":
        return z
    if name == "relu1":
        return np.maximum(z, 0.0) + 1.0
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z):
    if name in ("relu", "relu1"):
        return (z > 0).astype(z.dtype)
    if name == "elu":
        return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))
    if name == "identity":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


class Mlp:
    """Fully connected network.  ``widths = [in, h1, ..., out]``.

    ``output="relu1"`` gives ReLU(z) + 1, so every output is >= 1.
    """

    def __init__(self, widths, hidden="relu", output="identity", seed=0, init_scale=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        _act(hidden, np.zeros(1))
        _act(output, np.zeros(1))
        self.widths = widths
        self.hidden = hidden
        self.output = output
        rng = np.random.default_rng(seed)
        self.params = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            limit = np.sqrt(6.0 / fan_in)
            if last:
                limit = init_scale if init_scale is not None else np.sqrt(1.0 / fan_in)
            self.params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))
        self._cache = None

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def forward(self, x, cache=True):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"input width {x.shape[-1]} != {self.widths[0]}")
        pre, post = [], [x]
        h = x
        for l in range(self.n_layers):
            W, b = self.params[2 * l], self.params[2 * l + 1]
            z = h @ W + b
            h = _act(self.output if l == self.n_layers - 1 else self.hidden, z)
            pre.append(z)
            post.append(h)
        if cache:
            self._cache = (pre, post)
        return h

    __call__ = forward

    def backward(self, grad_out, return_input_grad=False):
        """Reverse-mode gradients of sum(grad_out * outputs) w.r.t. params."""
        if self._cache is None:
            raise RuntimeError("backward() called without a cached forward pass")
        pre, post = self._cache
        g = np.asarray(grad_out, dtype=float)
        if g.shape != post[-1].shape:
            g = g.reshape(post[-1].shape)
        grads = [None] * len(self.params)
        for l in reversed(range(self.n_layers)):
            name = self.output if l == self.n_layers - 1 else self.hidden
            g = g * _act_grad(name, pre[l])
            grads[2 * l] = post[l].T @ g
            grads[2 * l + 1] = g.sum(axis=0)
            g = g @ self.params[2 * l].T
        if return_input_grad:
            return grads, g
        return grads

    def copy(self):
        other = Mlp.__new__(Mlp)
        other.widths = list(self.widths)
        other.hidden = self.hidden
        other.output = self.output
        other.params = [p.copy() for p in self.params]
        other._cache = None
        return other

    def load_params(self, params):
        for dst, src in zip(self.params, params):
            if dst.shape != src.shape:
                raise ValueError("parameter shape mismatch")
            dst[...] = src


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        """In-place bias-corrected Adam update of ``params``."""
        if len(params) != len(self.m) or len(grads) != len(params):
            raise ValueError("params/grads do not match optimizer state")
        for p, g, m in zip(params, grads, self.m):
            if p.shape != g.shape or p.shape != m.shape:
                raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params


def adam_step(state: Adam, params, grads):
    return state.step(params, grads)


def mse_grad(pred, target):
    """Mean squared error over the batch and its gradient w.r.t. ``pred``."""
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def save_mlp(net: Mlp, path):
    arrays = {f"W{l}": net.params[2 * l] for l in range(net.n_layers)}
    arrays.update({f"b{l}": net.params[2 * l + 1] for l in range(net.n_layers)})
    np.savez(
        Path(path),
        format=np.array("hexfleet-mlp"),
        version=np.array(CHECKPOINT_VERSION),
        widths=np.array(net.widths),
        hidden=np.array(net.hidden),
        output=np.array(net.output),
        **arrays,
    )


def load_mlp(path) -> Mlp:
    with np.load(Path(path)) as data:
        if str(data["format"]) != "hexfleet-mlp":
            raise ValueError("not a hexfleet network checkpoint")
        if int(data["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {int(data['version'])}")
        net = Mlp(data["widths"].tolist(), str(data["hidden"]), str(data["output"]))
        for l in range(net.n_layers):
            net.params[2 * l][...] = data[f"W{l}"]
            net.params[2 * l + 1][...] = data[f"b{l}"]
    return net
