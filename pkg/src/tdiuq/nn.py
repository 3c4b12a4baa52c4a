"""Fully connected ReLU network trained by backpropagation.

Low-level functions operate on an :class:`MlpModel` (a plain stack of
weight matrices and intercepts).  :class:`MLPRegressor` wraps them with
standardized training, Adam updates and early stopping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .core import NumericalError, ValidationError, as_2d


class TrainingError(NumericalError):
    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


@dataclass
class MlpModel:
    """``weights[l]`` has shape (layer_sizes[l+1], layer_sizes[l])."""

    weights: list
    biases: list

    def __post_init__(self):
        self.weights = [np.asarray(A, dtype=float) for A in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValidationError("need one intercept per weight matrix")
        for i, (A, b) in enumerate(zip(self.weights, self.biases)):
            if A.ndim != 2 or b.shape != (A.shape[0],):
                raise ValidationError(f"layer {i}: bad shapes {A.shape}, {b.shape}")
            if i and A.shape[1] != self.weights[i - 1].shape[0]:
                raise ValidationError(f"layer {i}: input size does not chain")
            if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {i}: non-finite parameters")

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [A.shape[0] for A in self.weights]

    @classmethod
    def initialize(cls, layer_sizes, seed=0):
        """Uniform fan-in scaled initialization with zero intercepts."""
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            limit = np.sqrt(6.0 / n_in)
            weights.append(rng.uniform(-limit, limit, (n_out, n_in)))
            biases.append(np.zeros(n_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, layer_sizes):
        return cls([np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])],
                   [np.zeros(o) for o in layer_sizes[1:]])

    def copy(self):
        return MlpModel([A.copy() for A in self.weights], [b.copy() for b in self.biases])

    def to_dict(self):
        return {
            "layer_sizes": self.layer_sizes,
            "weights": [A.tolist() for A in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["weights"], d["biases"])


def _activations(model, X):
    """Pre-activations and layer outputs for a batch ``X`` (n, d_in)."""
    H = [X]
    Z = []
    last = len(model.weights) - 1
    for i, (A, b) in enumerate(zip(model.weights, model.biases)):
        z = H[-1] @ A.T + b
        Z.append(z)
        H.append(z if i == last else np.maximum(z, 0.0))
    return Z, H


def forward(model: MlpModel, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.layer_sizes[0]:
        raise ValidationError(f"input length {x.shape[-1]} != {model.layer_sizes[0]}")
    out = _activations(model, np.atleast_2d(x))[1][-1]
    return out[0] if x.ndim == 1 else out


def loss(model: MlpModel, X, Y, l2_penalty=0.0) -> float:
    """Mean squared error norm per sample plus ``l2_penalty`` times the squared weight norms."""
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    resid = forward(model, X) - Y
    penalty = sum(float(np.sum(A * A)) for A in model.weights)
    return float(np.sum(resid * resid) / X.shape[0] + l2_penalty * penalty)


def grad_params(model: MlpModel, X, Y, l2_penalty=0.0):
    """Gradient of :func:`loss` as two lists, ``(dweights, dbiases)``."""
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    Z, H = _activations(model, X)
    delta = 2.0 * (H[-1] - Y) / X.shape[0]
    dW = [None] * len(model.weights)
    db = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        dW[i] = delta.T @ H[i] + 2.0 * l2_penalty * model.weights[i]
        db[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ model.weights[i]) * (Z[i - 1] > 0)
    return dW, db


def grad_input(model: MlpModel, x) -> np.ndarray:
    """Jacobian of the network output with respect to its input.

    ``x`` of shape (d_in,) gives (d_out, d_in); a batch (n, d_in) gives
    (n, d_out, d_in).  ReLU units exactly at zero count as inactive.
    """
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    Z, _ = _activations(model, X)
    J = np.broadcast_to(model.weights[0], (X.shape[0],) + model.weights[0].shape)
    for i in range(1, len(model.weights)):
        J = (Z[i - 1] > 0)[:, :, None] * J
        J = np.einsum("oh,nhi->noi", model.weights[i], J)
    return J[0] if x.ndim == 1 else J


def forward_and_grad_input(model: MlpModel, x):
    """Output and input Jacobian of a single input in one pass."""
    x = np.asarray(x, dtype=float)
    Z, H = _activations(model, x[None, :])
    J = model.weights[0]
    for i in range(1, len(model.weights)):
        J = model.weights[i] @ ((Z[i - 1][0] > 0)[:, None] * J)
    return H[-1][0], J


@dataclass
class TrainConfig:
    l2_penalty: float = 1e-4
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 3000
    early_stop_patience: int = 50
    seed: int = 0
    lr_decay: float = 0.5
    lr_patience: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 0 or self.early_stop_patience < 1:
            raise ValidationError("batch_size and patience must be positive, max_epochs nonnegative")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValidationError("learning_rate must be positive and finite")
        if not (np.isfinite(self.l2_penalty) and self.l2_penalty >= 0):
            raise ValidationError("l2_penalty must be nonnegative")


@dataclass
class History:
    train_mae: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    val_mae: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self):
        return len(self.train_mae)

    def to_rows(self):
        for i in range(len(self)):
            yield {
                "epoch": i + 1,
                "train_mae": self.train_mae[i],
                "train_mse": self.train_mse[i],
                "val_mae": self.val_mae[i] if self.val_mae else float("nan"),
                "val_mse": self.val_mse[i] if self.val_mse else float("nan"),
            }


def _errors(model, X, Y):
    r = forward(model, X) - Y
    return float(np.mean(np.abs(r))), float(np.mean(r * r))


def train(model: MlpModel, X, Y, X_val=None, Y_val=None, config: TrainConfig | None = None):
    """Adam mini-batch training with early stopping.

    Early stopping watches the validation MSE (training MSE when no
    validation data is given); the weights of the best epoch are returned.
    With ``lr_patience > 0`` the step size is multiplied by ``lr_decay``
    whenever the monitored error stalls for that many epochs.
    """
    config = config or TrainConfig()
    X, Y = np.atleast_2d(X), np.atleast_2d(Y)
    if X.shape[1] != model.layer_sizes[0] or Y.shape[1] != model.layer_sizes[-1]:
        raise ValidationError("data dimensions do not match the architecture")
    history = History()
    model = model.copy()
    if config.max_epochs == 0:
        return model, history
    has_val = X_val is not None
    rng = np.random.default_rng(config.seed)
    params = model.weights + model.biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lr = config.learning_rate
    step = 0
    best, best_err, stale, lr_stale = model.copy(), np.inf, 0, 0
    n = X.shape[0]
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            dW, db = grad_params(model, X[idx], Y[idx], config.l2_penalty)
            step += 1
            c1 = 1 - beta1**step
            c2 = 1 - beta2**step
            for j, (p, g) in enumerate(zip(params, dW + db)):
                m[j] = beta1 * m[j] + (1 - beta1) * g
                v[j] = beta2 * v[j] + (1 - beta2) * g * g
                p -= lr * (m[j] / c1) / (np.sqrt(v[j] / c2) + eps)
        tr_mae, tr_mse = _errors(model, X, Y)
        if not np.isfinite(tr_mse):
            raise TrainingError("training diverged: non-finite loss", epoch + 1)
        history.train_mae.append(tr_mae)
        history.train_mse.append(tr_mse)
        monitored = tr_mse
        if has_val:
            va_mae, va_mse = _errors(model, X_val, Y_val)
            history.val_mae.append(va_mae)
            history.val_mse.append(va_mse)
            monitored = va_mse
        if monitored < best_err:
            best, best_err, stale, lr_stale = model.copy(), monitored, 0, 0
            history.best_epoch = epoch + 1
        else:
            stale += 1
            lr_stale += 1
            if stale >= config.early_stop_patience:
                break
            if config.lr_patience and lr_stale >= config.lr_patience:
                lr *= config.lr_decay
                lr_stale = 0
    return best, history


def _fold_scaling(model, x_mean, x_scale, y_mean, y_scale):
    """Absorb input/output standardization into the first and last layers."""
    out = model.copy()
    A0 = out.weights[0] / x_scale
    out.biases[0] = out.biases[0] - A0 @ x_mean
    out.weights[0] = A0
    out.weights[-1] = out.weights[-1] * y_scale
    out.biases[-1] = out.biases[-1] * y_scale + y_mean
    return out


class MLPRegressor(RegressorMixin, BaseEstimator):
    """ReLU network regressor with a linear output layer.

    Training runs on standardized inputs (per column) and outputs (one
    pooled scale), then the scalings are folded into the first and last
    layers, so ``model_`` maps raw inputs to raw outputs and
    :func:`grad_input` on it gives raw-space Jacobians.
    """

    def __init__(self, hidden_layer_sizes=(32, 32), l2_penalty=1e-4, learning_rate=1e-3,
                 batch_size=32, max_epochs=3000, early_stop_patience=50, lr_patience=0,
                 lr_decay=0.5, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.l2_penalty = l2_penalty
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.lr_patience = lr_patience
        self.lr_decay = lr_decay
        self.random_state = random_state

    def _config(self):
        return TrainConfig(self.l2_penalty, self.learning_rate, self.batch_size, self.max_epochs,
                           self.early_stop_patience, self.random_state, self.lr_decay,
                           self.lr_patience)

    def fit(self, X, Y, X_val=None, Y_val=None):
        X = as_2d(X)
        Y = np.asarray(Y, dtype=float)
        Y = Y[:, None] if Y.ndim == 1 else Y
        if X.shape[0] != Y.shape[0]:
            raise ValidationError("X and Y differ in row count")
        config = self._config()
        x_mean, x_scale = X.mean(0), X.std(0)
        x_scale[x_scale == 0] = 1.0
        y_mean = Y.mean(0)
        y_scale = float(np.sqrt(np.mean((Y - y_mean) ** 2))) or 1.0
        sizes = [X.shape[1], *self.hidden_layer_sizes, Y.shape[1]]
        init = MlpModel.initialize(sizes, self.random_state)
        Xs, Ys = (X - x_mean) / x_scale, (Y - y_mean) / y_scale
        if X_val is not None:
            X_val = as_2d(X_val, X.shape[1])
            Y_val = np.asarray(Y_val, dtype=float).reshape(X_val.shape[0], -1)
            Xv, Yv = (X_val - x_mean) / x_scale, (Y_val - y_mean) / y_scale
        else:
            Xv = Yv = None
        trained, history = train(init, Xs, Ys, Xv, Yv, config)
        # report history in raw output units
        for name in ("train_mae", "val_mae"):
            setattr(history, name, [e * y_scale for e in getattr(history, name)])
        for name in ("train_mse", "val_mse"):
            setattr(history, name, [e * y_scale**2 for e in getattr(history, name)])
        self.model_ = _fold_scaling(trained, x_mean, x_scale, y_mean, y_scale)
        self.history_ = history
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = Y.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return forward(self.model_, X)

    def jacobian(self, X):
        check_is_fitted(self, "model_")
        return grad_input(self.model_, X)

    def to_dict(self):
        check_is_fitted(self, "model_")
        return {"kind": "mlp", "params": self.get_params(), **self.model_.to_dict()}

    @classmethod
    def from_dict(cls, d):
        params = dict(d.get("params", {}))
        if "hidden_layer_sizes" in params:
            params["hidden_layer_sizes"] = tuple(params["hidden_layer_sizes"])
        est = cls(**params)
        est.model_ = MlpModel.from_dict(d)
        est.n_features_in_ = est.model_.layer_sizes[0]
        est.n_outputs_ = est.model_.layer_sizes[-1]
        est.history_ = History()
        return est

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
