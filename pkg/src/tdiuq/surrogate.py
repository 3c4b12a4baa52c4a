"""Surrogates mapping parameters to a flattened output series.

Two back ends share one estimator: ``gp_pca`` (PCA on the outputs, one GP
per retained score) and ``mlp`` (a single network with one output per
flattened point).  Only ``mlp`` provides input Jacobians.
"""

from __future__ import annotations

import json
import logging

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .core import NumericalError, TrainingSet, ValidationError, as_2d
from .doe import lhs_sample, uniform_sample
from .gp import GaussianProcess
from .nn import MLPRegressor, forward_and_grad_input
from .pca import PCA, DegeneratePCAError

log = logging.getLogger(__name__)

BACKENDS = ("gp_pca", "mlp")


class UnsupportedCapability(NotImplementedError):
    pass


class GPFitError(NumericalError):
    def __init__(self, index, cause):
        super().__init__(f"GP for principal component {index} failed: {cause}")
        self.index = index


class Surrogate(RegressorMixin, BaseEstimator):
    """Parameter-to-series emulator.

    Parameters
    ----------
    backend : {"gp_pca", "mlp"}
    evr_threshold : float
        Explained-variance threshold for the number of GP-modelled scores.
    kernel, restarts :
        Passed to each :class:`~tdiuq.gp.GaussianProcess`.
    hidden_layer_sizes, l2_penalty, learning_rate, max_epochs, early_stop_patience, lr_patience :
        Passed to :class:`~tdiuq.nn.MLPRegressor`.
    random_state : int
    """

    def __init__(self, backend="gp_pca", evr_threshold=0.999, kernel="rbf", restarts=5,
                 hidden_layer_sizes=(32, 32), l2_penalty=1e-6, learning_rate=3e-3,
                 max_epochs=4000, early_stop_patience=300, lr_patience=100, random_state=0):
        self.backend = backend
        self.evr_threshold = evr_threshold
        self.kernel = kernel
        self.restarts = restarts
        self.hidden_layer_sizes = hidden_layer_sizes
        self.l2_penalty = l2_penalty
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.early_stop_patience = early_stop_patience
        self.lr_patience = lr_patience
        self.random_state = random_state

    def fit(self, X, Y, X_val=None, Y_val=None):
        if self.backend not in BACKENDS:
            raise ValidationError(f"unknown backend {self.backend!r}")
        X = as_2d(X)
        Y = as_2d(Y, name="Y")
        if X.shape[0] != Y.shape[0]:
            raise ValidationError("X and Y differ in row count")
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = Y.shape[1]
        if self.backend == "mlp":
            self.mlp_ = MLPRegressor(
                hidden_layer_sizes=tuple(self.hidden_layer_sizes), l2_penalty=self.l2_penalty,
                learning_rate=self.learning_rate, max_epochs=self.max_epochs,
                early_stop_patience=self.early_stop_patience, lr_patience=self.lr_patience,
                random_state=self.random_state,
            ).fit(X, Y, X_val, Y_val)
            return self
        self.pca_ = PCA(n_components=self.evr_threshold).fit(Y)
        if self.pca_.degenerate_:
            raise DegeneratePCAError("training outputs are constant; nothing to emulate")
        scores = self.pca_.transform(Y)
        self.gps_ = []
        for i in range(self.pca_.n_components_):
            gp = GaussianProcess(kernel=self.kernel, restarts=self.restarts,
                                 random_state=self.random_state + i)
            try:
                gp.fit(X, scores[:, i])
            except (NumericalError, ValidationError) as exc:
                raise GPFitError(i, exc) from exc
            self.gps_.append(gp)
        return self

    def _check(self, theta):
        # hot path of every posterior evaluation, so skip sklearn's full check
        if not hasattr(self, "n_outputs_"):
            raise NotFittedError("surrogate is not fitted")
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.n_features_in_:
            raise ValidationError(f"expected {self.n_features_in_} parameters, got {theta.shape[-1]}")
        return theta

    def predict(self, theta):
        theta = self._check(theta)
        if self.backend == "mlp":
            return self.mlp_.predict(theta)
        scores = np.column_stack([gp.predict(as_2d(theta)) for gp in self.gps_])
        out = self.pca_.inverse_transform(scores)
        return out[0] if theta.ndim == 1 else out

    def grad_predict(self, theta):
        """Jacobian d prediction / d theta, shape (k, d) (or (n, k, d) for a batch)."""
        theta = self._check(theta)
        if self.backend != "mlp":
            raise UnsupportedCapability(f"backend {self.backend!r} provides no input derivatives")
        return self.mlp_.jacobian(theta)

    def predict_and_grad(self, theta):
        """Prediction (k,) and Jacobian (k, d) for one parameter vector."""
        theta = self._check(np.asarray(theta, dtype=float).ravel())
        if self.backend != "mlp":
            raise UnsupportedCapability(f"backend {self.backend!r} provides no input derivatives")
        return forward_and_grad_input(self.mlp_.model_, theta)

    @property
    def supports_gradient(self):
        return self.backend == "mlp"

    def emulator_covariance(self, theta):
        """Predictive covariance of the output series (gp_pca only), shape (k, k)."""
        theta = self._check(np.asarray(theta, dtype=float).ravel())
        if self.backend != "gp_pca":
            raise UnsupportedCapability("only gp_pca carries predictive variance")
        var = np.array([gp.predict(theta[None, :], return_std=True)[1][0] ** 2 for gp in self.gps_])
        P = self.pca_.projection_
        return (P.T * var) @ P

    def to_dict(self):
        check_is_fitted(self, "n_outputs_")
        params = self.get_params()
        params["hidden_layer_sizes"] = list(params["hidden_layer_sizes"])
        d = {"kind": "surrogate", "params": params, "n_features": self.n_features_in_,
             "n_outputs": self.n_outputs_}
        if self.backend == "mlp":
            d["mlp"] = self.mlp_.to_dict()
        else:
            d["pca"] = self.pca_.to_dict()
            d["gps"] = [gp.to_dict() for gp in self.gps_]
        return d

    @classmethod
    def from_dict(cls, d):
        params = dict(d["params"])
        params["hidden_layer_sizes"] = tuple(params["hidden_layer_sizes"])
        model = cls(**params)
        model.n_features_in_ = d["n_features"]
        model.n_outputs_ = d["n_outputs"]
        if model.backend == "mlp":
            model.mlp_ = MLPRegressor.from_dict(d["mlp"])
        else:
            model.pca_ = PCA.from_dict(d["pca"])
            model.gps_ = [GaussianProcess.from_dict(g) for g in d["gps"]]
        return model

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def train_gp_pca(training: TrainingSet, evr_threshold=0.999, kernel="rbf", restarts=5,
                 seed=0) -> Surrogate:
    return Surrogate("gp_pca", evr_threshold=evr_threshold, kernel=kernel, restarts=restarts,
                     random_state=seed).fit(training.inputs, training.outputs)


def train_mlp(training: TrainingSet, validation: TrainingSet | None = None, seed=0,
              **kwargs) -> Surrogate:
    model = Surrogate("mlp", random_state=seed, **kwargs)
    if validation is None:
        return model.fit(training.inputs, training.outputs)
    return model.fit(training.inputs, training.outputs, validation.inputs, validation.outputs)


def build_training_set(simulator, spec, n, bounds, seed=0, design="lhs") -> TrainingSet:
    """Run ``simulator(theta, spec)`` on an LHS (or uniform) design."""
    if design == "lhs":
        X = lhs_sample(n, bounds, seed).points
    else:
        X = uniform_sample(n, bounds, seed)
    Y = np.array([simulator(x, spec) for x in X])
    return TrainingSet(X, Y, getattr(spec, "id", ""))


def convergence_study(simulator, case_spec, sample_sizes, test_size=50, backends=BACKENDS,
                      seed=0, bounds=((0.0, 5.0),) * 4, backend_options=None):
    """Held-out MAE of each backend as a function of training-set size.

    Training designs are LHS; the test set is ``test_size`` uniform random
    draws shared by every cell.  Returns a list of row dicts with keys
    ``n``, ``backend``, ``mae``, ``mae_relative`` (MAE over the test-output
    range) and ``status``.  A failing cell is recorded and the study goes on.
    """
    backend_options = backend_options or {}
    test = build_training_set(simulator, case_spec, test_size, bounds, seed + 1, design="uniform")
    # extra validation draws steer MLP early stopping, never the test set
    val = build_training_set(simulator, case_spec, max(test_size, 10), bounds, seed + 2,
                             design="uniform")
    out_range = float(np.ptp(test.outputs)) or 1.0
    rows = []
    for n in sample_sizes:
        train = build_training_set(simulator, case_spec, n, bounds, seed + 1000 + int(n))
        for backend in backends:
            opts = dict(backend_options.get(backend, {}))
            row = {"n": int(n), "backend": backend}
            try:
                model = Surrogate(backend, random_state=seed, **opts)
                if backend == "mlp":
                    model.fit(train.inputs, train.outputs, val.inputs, val.outputs)
                else:
                    model.fit(train.inputs, train.outputs)
                mae = float(np.mean(np.abs(model.predict(test.inputs) - test.outputs)))
                row.update(mae=mae, mae_relative=mae / out_range, status="ok")
            except (NumericalError, ValidationError) as exc:
                log.warning("convergence cell n=%s backend=%s failed: %s", n, backend, exc)
                row.update(mae=float("nan"), mae_relative=float("nan"), status=f"error: {exc}")
            rows.append(row)
    return rows
