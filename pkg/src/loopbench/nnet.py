"""Minimal dense feedforward network with hand-written reverse-mode gradients.

This is the single function-approximation engine behind plant surrogates,
gain schedulers, and neural controllers. 64-bit floats throughout; tanh
hidden layers, identity output; Adam-rule updates with seeded shuffling so
training is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TrainingDiverged

STD_FLOOR = 1e-12

WEIGHTS_MAGIC = "loopbench-mlp v1"


def normalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (x - mean) / std


def denormalize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return x * std + mean


def _stats(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=0)
    std = np.maximum(a.std(axis=0), STD_FLOOR)
    return mean, std


@dataclass
class SupervisedDataset:
    """Sample rows plus the per-feature normalization stats of this split."""

    x: np.ndarray
    y: np.ndarray
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    y_mean: np.ndarray = None
    y_std: np.ndarray = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.y.shape[0] == 1 and self.x.shape[0] > 1:
            self.y = self.y.T
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("input and target row counts differ")
        if self.x_mean is None:
            self.x_mean, self.x_std = _stats(self.x)
        if self.y_mean is None:
            self.y_mean, self.y_std = _stats(self.y)

    def __len__(self) -> int:
        return self.x.shape[0]

    def with_stats_of(self, other: "SupervisedDataset") -> "SupervisedDataset":
        """Same rows, normalization stats borrowed from another split."""
        return SupervisedDataset(self.x, self.y, other.x_mean, other.x_std,
                                 other.y_mean, other.y_std)

    def normalized(self) -> "SupervisedDataset":
        """Rows mapped into this dataset's normalized space."""
        xs = normalize(self.x, self.x_mean, self.x_std)
        ys = normalize(self.y, self.y_mean, self.y_std)
        d_in, d_out = self.x.shape[1], self.y.shape[1]
        return SupervisedDataset(xs, ys, np.zeros(d_in), np.ones(d_in),
                                 np.zeros(d_out), np.ones(d_out))


class Mlp:
    """tanh hidden layers, identity output, Glorot-uniform init."""

    def __init__(self, layer_sizes, seed: int = 0, init: bool = True):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError("need at least input and output sizes, all >= 1")
        self.layer_sizes = sizes
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        rng = np.random.default_rng(seed)
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-lim, lim, size=(n_out, n_in)) if init else np.zeros((n_out, n_in))
            self.weights.append(w)
            self.biases.append(np.zeros(n_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "Mlp":
        out = Mlp(self.layer_sizes, init=False)
        out.weights = [w.copy() for w in self.weights]
        out.biases = [b.copy() for b in self.biases]
        return out

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        single = np.asarray(x).ndim == 1
        a = np.atleast_2d(np.asarray(x, dtype=float))
        if a.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"input dim {a.shape[1]} != first layer size {self.layer_sizes[0]}")
        for l in range(self.n_layers - 1):
            a = np.tanh(a @ self.weights[l].T + self.biases[l])
        out = a @ self.weights[-1].T + self.biases[-1]
        return out[0] if single else out

    def forward_cached(self, x: np.ndarray):
        """Batch forward keeping every activation for the reverse pass."""
        a = np.atleast_2d(np.asarray(x, dtype=float))
        acts = [a]
        for l in range(self.n_layers - 1):
            a = np.tanh(a @ self.weights[l].T + self.biases[l])
            acts.append(a)
        out = a @ self.weights[-1].T + self.biases[-1]
        return out, acts

    def backward(self, acts, grad_out: np.ndarray, extra_last_hidden_grad: np.ndarray | None = None):
        """Reverse pass: (per-layer (dW, db) list, gradient w.r.t. the input).

        `extra_last_hidden_grad` injects an adjoint at the last hidden
        activation (used by auxiliary output heads that branch off there).
        """
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        grads = [None] * self.n_layers
        grads[-1] = (g.T @ acts[-1], g.sum(axis=0))
        ga = g @ self.weights[-1]
        if extra_last_hidden_grad is not None:
            ga = ga + np.atleast_2d(extra_last_hidden_grad)
        for l in range(self.n_layers - 2, -1, -1):
            gz = ga * (1.0 - acts[l + 1] ** 2)
            grads[l] = (gz.T @ acts[l], gz.sum(axis=0))
            ga = gz @ self.weights[l]
        return grads, ga

    # -- flat parameter vector ----------------------------------------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_params:
            raise ValueError("flat parameter vector has the wrong length")
        pos = 0
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[l] = flat[pos:pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[l] = flat[pos:pos + b.size].copy()
            pos += b.size


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])


def zero_grads_like(net: Mlp):
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(net.weights, net.biases)]


def accumulate_grads(total, grads, scale: float = 1.0):
    for (tw, tb), (dw, db) in zip(total, grads):
        tw += scale * dw
        tb += scale * db
    return total


class LinearHead:
    """Single linear layer reading an activation vector; used for auxiliary outputs."""

    def __init__(self, n_in: int, n_out: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        lim = np.sqrt(6.0 / (n_in + n_out))
        self.w = rng.uniform(-lim, lim, size=(n_out, n_in))
        self.b = np.zeros(n_out)

    def forward(self, h: np.ndarray) -> np.ndarray:
        return np.atleast_2d(h) @ self.w.T + self.b

    def backward(self, h: np.ndarray, grad_out: np.ndarray):
        g = np.atleast_2d(grad_out)
        h = np.atleast_2d(h)
        return g.T @ h, g.sum(axis=0), g @ self.w

    def copy(self) -> "LinearHead":
        out = LinearHead(self.w.shape[1], self.w.shape[0])
        out.w = self.w.copy()
        out.b = self.b.copy()
        return out


# ---------------------------------------------------------------------------
# Loss, gradients, optimizer
# ---------------------------------------------------------------------------

def mse(net: Mlp, x: np.ndarray, y: np.ndarray) -> float:
    pred = net.forward(np.atleast_2d(x))
    return float(np.mean((pred - np.atleast_2d(y)) ** 2))


def grad(net: Mlp, x: np.ndarray, y: np.ndarray):
    """Gradients of the mean squared error over the batch; returns (grads, loss)."""
    xb = np.atleast_2d(np.asarray(x, dtype=float))
    yb = np.atleast_2d(np.asarray(y, dtype=float))
    if xb.shape[0] == 0:
        raise ValueError("empty batch")
    out, acts = net.forward_cached(xb)
    diff = out - yb
    loss = float(np.mean(diff ** 2))
    grads, _ = net.backward(acts, 2.0 * diff / diff.size)
    return grads, loss


class Adam:
    """Adaptive-moment update rule on a flat parameter vector."""

    def __init__(self, n_params: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads ** 2
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10_000
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class TrainResult:
    net: Mlp
    history: list = field(default_factory=list)  # (train_loss, val_loss) per epoch
    best_epoch: int = -1
    best_val_loss: float = float("inf")


def train(net: Mlp, data: SupervisedDataset, val: SupervisedDataset, cfg: TrainConfig) -> TrainResult:
    """Mini-batch Adam with seeded shuffling; returns the best-validation snapshot.

    Operates on the raw dataset arrays; callers that want normalized training
    pass `data.normalized()` / `val.with_stats_of(data).normalized()`.
    """
    work = net.copy()
    rng = np.random.default_rng(cfg.seed)
    adam = Adam(work.n_params, cfg.learning_rate, cfg.beta1, cfg.beta2)
    result = TrainResult(net=net.copy())
    n = len(data)
    wait = 0

    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            grads, loss = grad(work, data.x[idx], data.y[idx])
            batch_losses.append(loss)
            work.set_flat(adam.step(work.get_flat(), flatten_grads(grads)))
        train_loss = float(np.mean(batch_losses))
        val_loss = mse(work, val.x, val.y)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingDiverged("non-finite loss", epoch=epoch)
        result.history.append((train_loss, val_loss))
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            result.net = work.copy()
            wait = 0
        else:
            wait += 1
            if wait > cfg.patience:
                break
    return result


# ---------------------------------------------------------------------------
# Weight file format: versioned text, exact float round-trip via repr
# ---------------------------------------------------------------------------

def save_weights(net: Mlp, path) -> None:
    lines = [WEIGHTS_MAGIC, "layers " + " ".join(str(s) for s in net.layer_sizes)]
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W{l}")
        for row in w:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append(f"b{l}")
        lines.append(" ".join(repr(float(v)) for v in b))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_weights(path) -> Mlp:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != WEIGHTS_MAGIC:
        raise ValueError(f"not a {WEIGHTS_MAGIC!r} file: {path}")
    if not lines[1].startswith("layers "):
        raise ValueError("missing layer header")
    sizes = [int(s) for s in lines[1].split()[1:]]
    net = Mlp(sizes, init=False)
    pos = 2
    for l, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if lines[pos] != f"W{l}":
            raise ValueError(f"expected W{l} marker at line {pos + 1}")
        pos += 1
        rows = [np.array([float(v) for v in lines[pos + r].split()]) for r in range(n_out)]
        net.weights[l] = np.vstack(rows)
        pos += n_out
        if lines[pos] != f"b{l}":
            raise ValueError(f"expected b{l} marker at line {pos + 1}")
        pos += 1
        net.biases[l] = np.array([float(v) for v in lines[pos].split()])
        pos += 1
    return net
