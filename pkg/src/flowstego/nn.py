"""Tanh MLP velocity fields with hand-written backprop, rectified-flow training and reflow."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .core import ConfigError, FlowStegoError, FormatError, ShapeError, TimeGrid
from .flows import VelocityField

TIME_FREQS = np.pi * np.array([0.5, 1.0, 2.0, 4.0])


class TrainingDivergence(FlowStegoError):
    pass


@dataclass
class Mlp:
    """Fully connected tanh network ``[x, time features, one-hot label] -> velocity``.

    ``weights[i]`` has shape ``(in, out)``; rows of the input are samples.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dim: int
    n_classes: int = 0
    time_freqs: np.ndarray = field(default_factory=lambda: TIME_FREQS.copy())
    history: list = field(default_factory=list, repr=False, compare=False)

    @property
    def t_embed(self) -> int:
        return 2 * len(self.time_freqs)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.dim, self.n_classes, self.time_freqs.copy())

    @classmethod
    def init(cls, dim: int, hidden=(64, 64), n_classes: int = 0, seed: int = 0,
             time_freqs=None, out_scale: float = 0.1) -> "Mlp":
        freqs = TIME_FREQS.copy() if time_freqs is None else np.asarray(time_freqs, dtype=np.float64)
        rng = np.random.default_rng(seed)
        dims = [dim + 2 * len(freqs) + n_classes, *hidden, dim]
        weights, biases = [], []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            scale = np.sqrt(2.0 / (a + b))
            if i == len(dims) - 2:
                scale *= out_scale
            weights.append(rng.normal(0.0, scale, size=(a, b)))
            biases.append(np.zeros(b))
        return cls(weights, biases, dim, n_classes, freqs)


def time_features(t, freqs=TIME_FREQS) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)[..., None]
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)], axis=-1)


def _inputs(net: Mlp, x, t, labels):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.dim:
        raise ShapeError(f"net expects dim {net.dim}, got {x.shape[-1]}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), x.shape[:-1])
    parts = [x, time_features(t, net.time_freqs)]
    if net.n_classes:
        if labels is None:
            raise ConfigError("conditional net needs a class label")
        lab = np.broadcast_to(np.asarray(labels, dtype=np.int64), x.shape[:-1])
        if np.any(lab < 0) or np.any(lab >= net.n_classes):
            raise ConfigError(f"label outside [0, {net.n_classes})")
        parts.append(np.eye(net.n_classes)[lab])
    return np.concatenate(parts, axis=-1)


def mlp_forward(net: Mlp, x, t, labels=None, return_cache=False):
    h = _inputs(net, x, t, labels)
    cache = [h]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.tanh(h)
        cache.append(h)
    return (h, cache) if return_cache else h


def mlp_grad(net: Mlp, x, t, target, labels=None):
    """Loss ``mean_i ||net(x_i, t_i) - target_i||^2`` and its parameter gradients.

    Gradients come back in ``net.params`` order (W0, b0, W1, b1, ...).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, net.dim)
    target = np.asarray(target, dtype=np.float64).reshape(x.shape)
    out, cache = mlp_forward(net, x, t, labels, return_cache=True)
    n = x.shape[0]
    resid = out - target
    loss = float(np.sum(resid**2) / n)
    delta = 2.0 * resid / n
    grads = []
    for i in range(len(net.weights) - 1, -1, -1):
        a_in = cache[i]
        grads.append(delta.sum(axis=0))
        grads.append(a_in.T @ delta)
        if i:
            delta = (delta @ net.weights[i].T) * (1.0 - a_in**2)
    grads.reverse()
    return loss, grads


class MlpField(VelocityField):
    """A trained net as a velocity field; an optional second net answers ``cond=None``.

    With both nets present, ``evaluate(field, x, t, label, w)`` gives
    classifier-free-style guidance composed from the two trained fields.
    """

    def __init__(self, net: Mlp, uncond: Mlp | None = None):
        if uncond is not None and (uncond.dim != net.dim or uncond.n_classes):
            raise ConfigError("unconditional companion must be an unconditional net of the same dim")
        self.net, self.uncond = net, uncond
        self.dim = net.dim

    def _eval(self, x, t, cond):
        if cond is None and self.uncond is not None:
            return mlp_forward(self.uncond, x, t)
        if cond is not None and not self.net.n_classes:
            return mlp_forward(self.net, x, t)
        return mlp_forward(self.net, x, t, cond)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 512
    n_iters: int = 4000
    learning_rate: float = 3e-3
    optimizer: str = "adam"
    seed: int = 0
    hidden: tuple = (64, 64)
    eval_every: int = 200
    lr_decay: bool = True
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.batch_size < 1 or self.n_iters < 1 or self.learning_rate <= 0:
            raise ConfigError("batch_size, n_iters and learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


PairSampler = Callable[[int, np.random.Generator], tuple]


def independent_pairs(prior: Callable, data: Callable) -> PairSampler:
    """Pair fresh prior draws with fresh data draws.

    ``data(n, rng)`` may return ``x1`` or ``(x1, labels)``.
    """

    def sample(n, rng):
        x1 = data(n, rng)
        labels = None
        if isinstance(x1, tuple):
            x1, labels = x1
        return prior(n, rng), x1, labels

    return sample


def coupled_pairs(x0, x1, labels=None) -> PairSampler:
    """Resample rows of a fixed coupling ``(x0[i], x1[i])``."""
    x0, x1 = np.asarray(x0), np.asarray(x1)

    def sample(n, rng):
        idx = rng.integers(0, len(x0), size=n)
        return x0[idx], x1[idx], None if labels is None else labels[idx]

    return sample


def train_rectified_flow(pairs: PairSampler, cfg: TrainConfig, dim: int | None = None,
                         n_classes: int = 0, init: Mlp | None = None) -> Mlp:
    """Regress ``net(X_t, t)`` onto ``X1 - X0`` with ``X_t = (1 - t) X0 + t X1``, t ~ U[0, 1]."""
    rng = np.random.default_rng(cfg.seed)
    if init is not None:
        net = init.copy()
    else:
        if dim is None:
            raise ConfigError("dim is required when no initial net is given")
        net = Mlp.init(dim, cfg.hidden, n_classes, seed=cfg.seed)
    params = net.params
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    initial, run_above, window = None, 0, []
    history = []
    for it in range(1, cfg.n_iters + 1):
        x0, x1, labels = pairs(cfg.batch_size, rng)
        t = rng.random(cfg.batch_size)
        xt = (1 - t)[:, None] * x0 + t[:, None] * x1
        loss, grads = mlp_grad(net, xt, t, x1 - x0, labels)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss at iteration {it}")
        if initial is None:
            initial = loss
        run_above = run_above + 1 if loss > 10 * initial else 0
        if run_above >= 100:
            raise TrainingDivergence(f"loss above 10x its initial value for 100 iterations (iter {it})")
        lr = cfg.learning_rate
        if cfg.lr_decay:
            lr *= 0.5 * (1 + np.cos(np.pi * (it - 1) / cfg.n_iters))
        if cfg.optimizer == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
        else:
            b1, b2 = cfg.beta1, cfg.beta2
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= b1
                mi += (1 - b1) * g
                vi *= b2
                vi += (1 - b2) * g * g
                mhat = mi / (1 - b1**it)
                vhat = vi / (1 - b2**it)
                p -= lr * mhat / (np.sqrt(vhat) + 1e-8)
        window.append(loss)
        if it % cfg.eval_every == 0 or it == cfg.n_iters:
            history.append((it, float(np.mean(window))))
            window = []
    net.history = history
    return net


def transport(net: Mlp, x0, grid: TimeGrid, labels=None) -> np.ndarray:
    """Forward Euler push of ``x0`` through a single net (labels may vary per row)."""
    x = np.array(x0, dtype=np.float64)
    for t in grid.nodes[:-1]:
        x = x + grid.dt * mlp_forward(net, x, t, labels)
    return x


def reflow(net1: Mlp, prior: Callable, grid: TimeGrid, cfg: TrainConfig, n_pairs: int = 20000,
           label_sampler: Callable | None = None, warm_start: bool = True) -> Mlp:
    """Retrain on the deterministic coupling ``(X0, Euler transport of X0 under net1)``."""
    rng = np.random.default_rng(cfg.seed + 7919)
    x0 = prior(n_pairs, rng)
    labels = None
    if net1.n_classes:
        if label_sampler is None:
            raise ConfigError("conditional reflow needs a label sampler")
        labels = np.asarray(label_sampler(n_pairs, rng))
    x1 = transport(net1, x0, grid, labels)
    pairs = coupled_pairs(x0, x1, labels)
    return train_rectified_flow(pairs, cfg, net1.dim, net1.n_classes, init=net1 if warm_start else None)


# checkpoint format
_CK_MAGIC = b"FSNN"
_CK_VERSION = 1


def save_checkpoint(path, net: Mlp) -> None:
    dims = net.layer_dims
    parts = [struct.pack("<4sHIII", _CK_MAGIC, _CK_VERSION, len(dims), net.n_classes, len(net.time_freqs))]
    parts.append(struct.pack(f"<{len(dims)}Q", *dims))
    parts.append(struct.pack("<Q", net.dim))
    parts.append(np.asarray(net.time_freqs, dtype="<f8").tobytes())
    for p in net.params:
        parts.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Mlp:
    buf = Path(path).read_bytes()
    head = struct.Struct("<4sHIII")
    if len(buf) < head.size:
        raise FormatError("truncated checkpoint header")
    magic, version, n_dims, n_classes, n_freqs = head.unpack_from(buf, 0)
    if magic != _CK_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    if version != _CK_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = head.size
    try:
        dims = list(struct.unpack_from(f"<{n_dims}Q", buf, off))
        off += 8 * n_dims
        (dim,) = struct.unpack_from("<Q", buf, off)
        off += 8
        freqs = np.frombuffer(buf, "<f8", n_freqs, off).astype(np.float64)
        off += 8 * n_freqs
        weights, biases = [], []
        for a, b in zip(dims[:-1], dims[1:]):
            weights.append(np.frombuffer(buf, "<f8", a * b, off).reshape(a, b).astype(np.float64))
            off += 8 * a * b
            biases.append(np.frombuffer(buf, "<f8", b, off).astype(np.float64))
            off += 8 * b
    except (struct.error, ValueError) as exc:
        raise FormatError("truncated checkpoint payload") from exc
    if off != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    net = Mlp(weights, biases, int(dim), int(n_classes), freqs)
    if dims[0] != net.dim + net.t_embed + net.n_classes or dims[-1] != net.dim:
        raise FormatError("checkpoint layer dims inconsistent with header")
    if not all(np.all(np.isfinite(p)) for p in net.params):
        raise FormatError("checkpoint contains non-finite parameters")
    return net
