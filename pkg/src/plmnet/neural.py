"""Dense feed-forward nets with exact backprop, inverted dropout and Adam."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class FrozenError(RuntimeError):
    """Raised when an optimizer step targets a frozen net."""


class CheckpointError(ValueError):
    pass


@dataclass
class Layer:
    weights: np.ndarray  # (n_in, n_out)
    biases: np.ndarray  # (n_out,)
    activation: str = "relu"  # "relu" | "identity"
    keep_prob: float = 1.0  # dropout applied to this layer's output

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape


def _init_layer(rng: np.random.Generator, n_in: int, n_out: int, activation: str) -> tuple[np.ndarray, np.ndarray]:
    if activation == "relu":
        limit = np.sqrt(6.0 / n_in)  # He-uniform
    else:
        limit = np.sqrt(6.0 / (n_in + n_out))  # Xavier-uniform
    w = rng.uniform(-limit, limit, size=(n_in, n_out))
    return w, np.zeros(n_out)


class MlpNet:
    """Stack of affine layers, each followed by its activation and optional dropout.

    ``sizes`` includes the input width: ``[n_in, h1, ..., n_out]``. Hidden
    layers use relu unless ``activations`` says otherwise. ``dropout[i]`` is
    the drop rate after layer ``i``.
    """

    def __init__(self, sizes, activations=None, dropout=None, seed=0, rng=None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        n = len(sizes) - 1
        if activations is None:
            activations = ["relu"] * (n - 1) + ["identity"]
        if dropout is None:
            dropout = [0.0] * n
        if len(activations) != n or len(dropout) != n:
            raise ValueError("activations/dropout must have one entry per layer")
        init_rng = np.random.default_rng(seed) if rng is None else rng
        self.layers = []
        for i in range(n):
            w, b = _init_layer(init_rng, sizes[i], sizes[i + 1], activations[i])
            self.layers.append(Layer(w, b, activations[i], 1.0 - float(dropout[i])))
        self.mask_rng = np.random.default_rng([seed, 1]) if rng is None else rng
        self.training = False
        self.frozen = False

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].weights.shape[0]] + [l.weights.shape[1] for l in self.layers]

    @property
    def n_params(self) -> int:
        return sum(l.weights.size + l.biases.size for l in self.layers)

    def train(self) -> "MlpNet":
        self.training = True
        return self

    def eval(self) -> "MlpNet":
        self.training = False
        return self

    def params(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.weights, l.biases]
        return out

    def forward(self, x: np.ndarray):
        """Returns ``(output, cache)``; accepts a vector or a (batch, n_in) array."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.layers[0].weights.shape[0]:
            raise ValueError(f"input width {x.shape[1]} != {self.layers[0].weights.shape[0]}")
        cache = []
        h = x
        for l in self.layers:
            z = h @ l.weights + l.biases
            a = np.maximum(z, 0.0) if l.activation == "relu" else z
            mask = None
            if self.training and l.keep_prob < 1.0:
                mask = (self.mask_rng.random(a.shape) < l.keep_prob) / l.keep_prob
                a = a * mask
            cache.append((h, z, mask))
            h = a
        return (h[0] if squeeze else h), (cache, squeeze)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, output_grad: np.ndarray):
        """Gradients ``[dW0, db0, dW1, ...]`` and the gradient wrt the input."""
        cache, squeeze = cache
        g = np.asarray(output_grad, dtype=float)
        if squeeze:
            g = g[None, :]
        grads = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            l = self.layers[i]
            h, z, mask = cache[i]
            if mask is not None:
                g = g * mask
            if l.activation == "relu":
                g = g * (z > 0)
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ l.weights.T
        return grads, (g[0] if squeeze else g)

    def freeze(self) -> None:
        self.frozen = True

    def is_frozen(self) -> bool:
        return self.frozen

    def copy(self) -> "MlpNet":
        net = MlpNet.__new__(MlpNet)
        net.layers = [Layer(l.weights.copy(), l.biases.copy(), l.activation, l.keep_prob) for l in self.layers]
        net.mask_rng = copy.deepcopy(self.mask_rng)
        net.training = self.training
        net.frozen = False
        return net

    def spec(self) -> dict:
        return {"sizes": self.sizes,
                "activations": [l.activation for l in self.layers],
                "dropout": [1.0 - l.keep_prob for l in self.layers]}


def freeze(net) -> None:
    net.freeze()


def is_frozen(net) -> bool:
    return net.is_frozen()


class Adam:
    """Adam with bias-corrected moments over a fixed list of nets."""

    def __init__(self, nets, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.nets = list(nets)
        for net in self.nets:
            if net.is_frozen():
                raise FrozenError("cannot optimize a frozen net")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.params = [p for net in self.nets for p in net.params()]
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self._tmp = [np.empty_like(p) for p in self.params]
        self.step_count = 0

    def step(self, grads) -> None:
        for net in self.nets:
            if net.is_frozen():
                raise FrozenError("net was frozen after the optimizer was built")
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameters")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps), rearranged to work in place
        step = self.lr * math.sqrt(c2) / c1
        eps = self.eps * math.sqrt(c2)
        for p, g, m, v, t in zip(self.params, grads, self.m, self.v, self._tmp):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= b1
            np.multiply(g, 1.0 - b1, out=t)
            m += t
            v *= b2
            np.multiply(g, g, out=t)
            t *= 1.0 - b2
            v += t
            np.sqrt(v, out=t)
            t += eps
            np.divide(m, t, out=t)
            t *= step
            p -= t


def adam_step(optimizer: Adam, grads) -> None:
    optimizer.step(grads)


def refit_output_layer(net: MlpNet, last_inputs: np.ndarray, targets: np.ndarray,
                       ridge: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares weights and biases for the final (identity) layer of ``net``.

    ``last_inputs`` are eval-mode activations feeding that layer. Dropout
    upstream of relu layers makes eval-mode activations differ from the
    train-mode ones the layer was fitted to; solving the last affine map
    directly on eval-mode activations removes most of that shift.
    """
    layer = net.layers[-1]
    if layer.activation != "identity":
        raise ValueError("final layer must be affine")
    h = np.asarray(last_inputs, dtype=float)
    y = np.asarray(targets, dtype=float).reshape(len(h), -1)
    a = np.column_stack([h, np.ones(len(h))])
    gram = a.T @ a + ridge * len(h) * np.eye(a.shape[1])
    sol = np.linalg.solve(gram, a.T @ y)
    return sol[:-1], sol[-1]


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient wrt ``pred``."""
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


# -- checkpoints ------------------------------------------------------------

def params_hash(nets: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(nets):
        h.update(name.encode())
        for p in nets[name].params():
            h.update(np.ascontiguousarray(p, dtype=np.float64).tobytes())
    return h.hexdigest()


def save_checkpoint(path, nets: dict, meta: dict | None = None) -> str:
    """Write named nets (plus JSON-able metadata) to a .npz; returns the content hash."""
    arrays = {}
    specs = {}
    for name, net in nets.items():
        specs[name] = net.spec()
        for i, l in enumerate(net.layers):
            arrays[f"{name}/{i}/W"] = l.weights
            arrays[f"{name}/{i}/b"] = l.biases
    digest = params_hash(nets)
    header = {"version": CHECKPOINT_VERSION, "nets": specs, "hash": digest, "meta": meta or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return digest


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns ``(nets, meta)``; raises CheckpointError on a hash mismatch."""
    with np.load(Path(path)) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
        nets = {}
        for name, spec in header["nets"].items():
            net = MlpNet(spec["sizes"], spec["activations"], spec["dropout"])
            for i, l in enumerate(net.layers):
                l.weights = np.array(data[f"{name}/{i}/W"], dtype=float)
                l.biases = np.array(data[f"{name}/{i}/b"], dtype=float)
            nets[name] = net.eval()
    if params_hash(nets) != header["hash"]:
        raise CheckpointError(f"content hash mismatch in {path}")
    return nets, header["meta"]
