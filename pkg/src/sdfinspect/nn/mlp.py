"""Small fully connected heads with softplus hidden layers and a linear output."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from .encoders import quantize


def softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def param_count(widths) -> int:
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def widths_for_target(n_in: int, target: int, hidden_layers: int = 2, max_width: int = 512):
    """Hidden widths giving exactly ``target`` parameters.

    Among all exact solutions the most balanced one wins (smallest spread,
    then the wider first layer). Raises if none exists.
    """
    best = None
    if hidden_layers == 1:
        for h in range(1, max_width + 1):
            if param_count([n_in, h, 1]) == target:
                return [n_in, h, 1]
    elif hidden_layers == 2:
        for h1 in range(1, max_width + 1):
            # target = (n_in+1) h1 + (h1+1) h2 + h2 + 1  ->  solve for h2
            rest = target - (n_in + 1) * h1 - 1
            if rest <= 0:
                break
            if rest % (h1 + 2):
                continue
            h2 = rest // (h1 + 2)
            key = (abs(h1 - h2), -h1)
            if h2 >= 1 and (best is None or key < best[0]):
                best = (key, [n_in, h1, h2, 1])
    else:
        raise InvalidInputError("only 1 or 2 hidden layers supported")
    if best is None:
        raise InvalidInputError(f"no {hidden_layers}-hidden-layer head with {target} parameters for input width {n_in}")
    return best[1]


class MlpHead:
    """Dense layers ``widths[0] -> ... -> 1``; softplus on hidden layers.

    Parameters live in ``self.params`` as ``[W0, b0, W1, b1, ...]`` with
    ``W`` shaped (fan_in, fan_out).
    """

    def __init__(self, widths, seed: int = 0, params=None):
        self.widths = [int(w) for w in widths]
        if self.widths[-1] != 1:
            raise InvalidInputError("head must end in a single output")
        if params is None:
            rng = np.random.default_rng(seed)
            params = []
            for a, b in zip(self.widths[:-1], self.widths[1:]):
                bound = 1.0 / np.sqrt(a)
                params.append(quantize(rng.uniform(-bound, bound, size=(a, b))))
                params.append(quantize(rng.uniform(-bound, bound, size=b)))
        self.params = [np.array(p, dtype=np.float64) for p in params]

    @classmethod
    def for_target(cls, n_in: int, target: int, seed: int = 0, hidden_layers: int = 2) -> "MlpHead":
        return cls(widths_for_target(n_in, target, hidden_layers), seed=seed)

    @property
    def n_params(self) -> int:
        return param_count(self.widths)

    def copy(self) -> "MlpHead":
        return MlpHead(self.widths, params=[p.copy() for p in self.params])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def load_flat(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_params:
            raise InvalidInputError("parameter vector has the wrong length")
        off = 0
        for i, p in enumerate(self.params):
            self.params[i] = vec[off:off + p.size].reshape(p.shape).copy()
            off += p.size

    def forward(self, features, return_cache: bool = False):
        h = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if h.shape[1] != self.widths[0]:
            raise InvalidInputError(f"expected {self.widths[0]} features, got {h.shape[1]}")
        acts, pre = [h], []
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            pre.append(z)
            h = softplus(z) if i < n_layers - 1 else z
            acts.append(h)
        out = h[:, 0]
        if return_cache:
            return out, (acts, pre)
        return out

    def backward(self, cache, grad_out):
        """Returns (parameter gradients in ``params`` order, feature gradients)."""
        acts, pre = cache
        g = np.asarray(grad_out, dtype=np.float64).reshape(-1, 1)
        n_layers = len(self.params) // 2
        grads = [None] * len(self.params)
        for i in reversed(range(n_layers)):
            if i < n_layers - 1:
                g = g * sigmoid(pre[i])
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, g


def mlp_forward(head: MlpHead, features):
    features = np.asarray(features, dtype=np.float64)
    out = head.forward(features.reshape(-1, head.widths[0]) if features.ndim == 1 else features)
    return float(out[0]) if features.ndim == 1 else out


def mlp_backward(head: MlpHead, features, upstream):
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    _, cache = head.forward(features.reshape(1, -1) if single else features, return_cache=True)
    grads, gfeat = head.backward(cache, np.atleast_1d(upstream))
    return grads, (gfeat[0] if single else gfeat)
