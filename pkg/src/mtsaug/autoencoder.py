"""One-hidden-layer autoencoder trained with Adam, written directly in numpy.

The encoder output plays the role of the common factors and the decoder
weights the factor loadings; the output layer is always linear.  All
parameters sit in one flat float64 vector so the optimizer update is a handful
of vectorized operations per step.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .augmentation import TrainingSet
from .errors import DivergenceError

ACTIVATIONS = ("linear", "tanh")
CHECKPOINT_VERSION = 1


def hidden_width(input_dim: int, compression_ratio: float) -> int:
    """``round(C * N / 100)`` with halves rounded up, clipped to ``[1, N]``."""
    m = math.floor(compression_ratio * input_dim / 100.0 + 0.5)
    return int(min(max(m, 1), input_dim))


@dataclass(frozen=True)
class AEConfig:
    input_dim: int
    compression_ratio: float = 50.0
    hidden_activation: str = "linear"
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta_1: float = 0.9
    beta_2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 0

    output_activation = "linear"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not 0 < self.compression_ratio <= 100:
            raise ValueError(f"compression ratio must be in (0, 100], got {self.compression_ratio}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ValueError(f"hidden_activation must be one of {ACTIVATIONS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate and epsilon must be positive")
        if not (0 <= self.beta_1 < 1 and 0 <= self.beta_2 < 1):
            raise ValueError("decay rates must lie in [0, 1)")

    @property
    def hidden_dim(self) -> int:
        return hidden_width(self.input_dim, self.compression_ratio)


@dataclass(eq=False)
class AEModel:
    """Autoencoder parameters.

    ``params`` is the flat parameter vector; ``W_enc`` (M x N), ``b_enc`` (M),
    ``W_dec`` (N x M) and ``b_dec`` (N) are views into it.
    """

    config: AEConfig
    params: np.ndarray
    trained: bool = False
    epoch_losses: list[float] = field(default_factory=list)
    initial_loss: float | None = None
    final_loss: float | None = None

    def __post_init__(self):
        n, m = self.config.input_dim, self.config.hidden_dim
        if self.params.shape != (2 * n * m + n + m,):
            raise ValueError("parameter vector does not match config shapes")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("non-finite parameters")
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        self.W_enc, self.b_enc, self.W_dec, self.b_dec = _views(self.params, n, m)

    @property
    def tanh(self) -> bool:
        return self.config.hidden_activation == "tanh"

    def copy(self) -> "AEModel":
        return AEModel(self.config, self.params.copy(), self.trained,
                       list(self.epoch_losses), self.initial_loss, self.final_loss)

    def encode(self, X: np.ndarray) -> np.ndarray:
        H = X @ self.W_enc.T + self.b_enc
        return np.tanh(H) if self.tanh else H

    def reconstruct(self, X: np.ndarray) -> np.ndarray:
        X = _check_input(X, self.config.input_dim)
        return self.encode(X) @ self.W_dec.T + self.b_dec

    def loss(self, X: np.ndarray) -> float:
        """Mean squared reconstruction error over samples and assets."""
        R = self.reconstruct(X) - X
        return float(np.mean(R * R))

    def loss_and_grad(self, X: np.ndarray) -> tuple[float, np.ndarray]:
        X = _check_input(np.atleast_2d(X), self.config.input_dim)
        grad = np.zeros_like(self.params)
        loss = _loss_grad(X, self.W_enc, self.b_enc, self.W_dec, self.b_dec, self.tanh,
                          *_views(grad, self.config.input_dim, self.config.hidden_dim))
        return loss, grad


def _views(flat: np.ndarray, n: int, m: int):
    a = m * n
    return (flat[:a].reshape(m, n), flat[a:a + m],
            flat[a + m:2 * a + m].reshape(n, m), flat[2 * a + m:])


def _check_input(X: np.ndarray, n: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != n:
        raise ValueError(f"expected vectors of length {n}, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    return X


def _loss_grad(X, We, be, Wd, bd, use_tanh, gWe, gbe, gWd, gbd) -> float:
    """Batch MSE and its gradient, written into the ``g*`` buffers."""
    H = X @ We.T
    H += be
    A = np.tanh(H) if use_tanh else H
    R = A @ Wd.T
    R += bd
    R -= X
    scale = 1.0 / R.size
    flat = R.ravel()
    loss = float(np.dot(flat, flat)) * scale
    R *= 2.0 * scale
    np.dot(R.T, A, out=gWd)
    R.sum(axis=0, out=gbd)
    dA = R @ Wd
    if use_tanh:
        dA *= 1.0 - A * A
    np.dot(dA.T, X, out=gWe)
    dA.sum(axis=0, out=gbe)
    return loss


def init_model(config: AEConfig) -> AEModel:
    """Glorot-uniform weights, zero biases, drawn from ``config.seed``."""
    n, m = config.input_dim, config.hidden_dim
    rng = np.random.default_rng([config.seed, 0])
    limit = math.sqrt(6.0 / (n + m))
    params = np.zeros(2 * n * m + n + m)
    We, _, Wd, _ = _views(params, n, m)
    We[...] = rng.uniform(-limit, limit, size=(m, n))
    Wd[...] = rng.uniform(-limit, limit, size=(n, m))
    return AEModel(config, params)


def forward(model: AEModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(factors, reconstruction)`` for one vector or a batch of rows."""
    x = _check_input(x, model.config.input_dim)
    factors = model.encode(x)
    return factors, factors @ model.W_dec.T + model.b_dec


def train(model: AEModel, training_set: TrainingSet | np.ndarray) -> AEModel:
    """Minimize mean squared reconstruction error with Adam; returns a new model.

    Each epoch visits the samples in a fresh permutation drawn from the config
    seed, in batches of ``batch_size`` (the last short batch is kept).  The
    Adam moments start from zero on every call.
    """
    X = training_set.values if isinstance(training_set, TrainingSet) else training_set
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("training set is empty")
    cfg = model.config
    X = _check_input(X, cfg.input_dim)

    out = model.copy()
    theta = out.params
    n, m = cfg.input_dim, cfg.hidden_dim
    We, be, Wd, bd = out.W_enc, out.b_enc, out.W_dec, out.b_dec
    grad = np.zeros_like(theta)
    gWe, gbe, gWd, gbd = _views(grad, n, m)
    mom = np.zeros_like(theta)
    vel = np.zeros_like(theta)
    tmp = np.empty_like(theta)
    b1, b2, lr, eps = cfg.beta_1, cfg.beta_2, cfg.learning_rate, cfg.epsilon
    use_tanh = cfg.hidden_activation == "tanh"

    rng = np.random.default_rng([cfg.seed, 1])
    n_samples, bs = len(X), cfg.batch_size
    initial = out.loss(X)
    losses = []
    step = 0
    for _ in range(cfg.epochs):
        Xp = X[rng.permutation(n_samples)]
        total = 0.0
        for start in range(0, n_samples, bs):
            xb = Xp[start:start + bs]
            loss = _loss_grad(xb, We, be, Wd, bd, use_tanh, gWe, gbe, gWd, gbd)
            step += 1
            if not math.isfinite(loss):
                raise DivergenceError(step, loss)
            total += loss * len(xb)
            # Adam in the bias-corrected step-size form
            mom *= b1
            mom += (1.0 - b1) * grad
            vel *= b2
            np.multiply(grad, grad, out=tmp)
            tmp *= 1.0 - b2
            vel += tmp
            lr_t = lr * math.sqrt(1.0 - b2 ** step) / (1.0 - b1 ** step)
            np.sqrt(vel, out=tmp)
            tmp += eps
            np.divide(mom, tmp, out=tmp)
            tmp *= lr_t
            theta -= tmp
        losses.append(total / n_samples)
    if not np.all(np.isfinite(theta)):
        raise DivergenceError(step, float("nan"))
    out.trained = True
    out.epoch_losses = model.epoch_losses + losses
    out.initial_loss = initial if model.initial_loss is None else model.initial_loss
    out.final_loss = out.loss(X)
    return out


def fine_tune(model: AEModel, pre: TrainingSet, ft: TrainingSet) -> AEModel:
    """Train on ``pre`` then keep training the same weights on ``ft``.

    Both stages use the model's hyperparameters; optimizer moments restart at
    the stage boundary.
    """
    return train(train(model, pre), ft)


@dataclass(frozen=True, eq=False)
class RestorationError:
    xi: np.ndarray
    window: np.ndarray


def restoration_errors(model: AEModel, training_set: TrainingSet) -> RestorationError:
    """Per-asset RMS reconstruction residual over the training window."""
    if len(training_set) == 0:
        raise ValueError("restoration error needs a non-empty window")
    X = training_set.values
    R = model.reconstruct(X) - X
    xi = np.sqrt(np.mean(R * R, axis=0))
    return RestorationError(xi, training_set.times.copy())


def gradient_check(model: AEModel, x: np.ndarray, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The relative error of each parameter is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps parameters with vanishing gradient from dividing by zero.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, analytic = model.loss_and_grad(X)
    probe = model.copy()
    numeric = np.empty_like(analytic)
    for k in range(len(probe.params)):
        orig = probe.params[k]
        probe.params[k] = orig + h
        up = probe.loss(X)
        probe.params[k] = orig - h
        down = probe.loss(X)
        probe.params[k] = orig
        numeric[k] = (up - down) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def save_model(model: AEModel, path) -> None:
    """Checkpoint config and parameters to an ``.npz`` container (bit-exact)."""
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.config),
            "trained": model.trained, "initial_loss": model.initial_loss,
            "final_loss": model.final_loss}
    with open(path, "wb") as fh:
        np.savez(fh, params=model.params, epoch_losses=np.asarray(model.epoch_losses, float),
                 meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8))


def load_model(path) -> AEModel:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        return AEModel(AEConfig(**meta["config"]), data["params"].copy(), meta["trained"],
                       data["epoch_losses"].tolist(), meta["initial_loss"], meta["final_loss"])


def with_seed(config: AEConfig, seed: int) -> AEConfig:
    return replace(config, seed=int(seed))
