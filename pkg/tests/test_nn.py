import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd_utils import central_diff, flat_params, random_config, rel_err, unflat_params
from tdiuq.core import ValidationError
from tdiuq.nn import (
    MLPRegressor, MlpModel, TrainConfig, forward, forward_and_grad_input, grad_input,
    grad_params, loss, train,
)


def test_forward_zero_model():
    assert np.array_equal(forward(MlpModel.zeros([3, 5, 2]), [1.0, -2.0, 3.0]), np.zeros(2))


def test_forward_identity_layer():
    m = MlpModel([np.eye(3)], [np.zeros(3)])
    x = np.array([0.5, -1.0, 2.0])
    assert np.array_equal(forward(m, x), x)


def test_relu_unit():
    m = MlpModel([np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
    assert forward(m, [-1.0])[0] == 0.0
    assert forward(m, [2.0])[0] == 2.0


def test_forward_length_mismatch():
    with pytest.raises(ValidationError):
        forward(MlpModel.zeros([3, 2]), [1.0, 2.0])


def test_loss_examples():
    rng = np.random.default_rng(0)
    m = MlpModel([rng.normal(size=(2, 3))], [rng.normal(size=2)])
    X = rng.normal(size=(7, 3))
    assert loss(m, X, forward(m, X), 0.0) == 0.0
    Y = rng.normal(size=(7, 2))
    assert loss(MlpModel.zeros([3, 4, 2]), X, Y) == pytest.approx(np.mean(np.sum(Y**2, 1)))


def loss_oracle(model, X, Y, l2):
    total = 0.0
    for x, y in zip(X, Y):
        h = x
        for i, (A, b) in enumerate(zip(model.weights, model.biases)):
            z = [sum(A[r, c] * h[c] for c in range(len(h))) + b[r] for r in range(A.shape[0])]
            h = z if i == len(model.weights) - 1 else [max(v, 0.0) for v in z]
        total += sum((hv - yv) ** 2 for hv, yv in zip(h, y))
    pen = sum(float((A**2).sum()) for A in model.weights)
    return total / len(X) + l2 * pen


def test_loss_matches_oracle():
    rng = np.random.default_rng(1)
    model, X, Y = random_config(rng)
    assert abs(loss(model, X, Y, 0.3) - loss_oracle(model, X, Y, 0.3)) < 1e-10


def test_grad_zero_at_minimum():
    rng = np.random.default_rng(2)
    m = MlpModel([rng.normal(size=(2, 3))], [rng.normal(size=2)])
    X = rng.normal(size=(10, 3))
    dW, db = grad_params(m, X, forward(m, X), 0.0)
    assert np.sqrt(sum((g**2).sum() for g in dW + db)) < 1e-8


def check_grad_params(model, X, Y, l2):
    dW, db = grad_params(model, X, Y, l2)
    analytic = np.concatenate([g.ravel() for g in dW] + [g.ravel() for g in db])
    numeric = central_diff(lambda v: loss(unflat_params(model, v), X, Y, l2), flat_params(model))
    return rel_err(analytic, numeric)


def check_grad_input(model, x):
    return rel_err(grad_input(model, x), central_diff(lambda v: forward(model, v), x))


def test_grad_params_finite_difference():
    rng = np.random.default_rng(3)
    for _ in range(10):
        model, X, Y = random_config(rng)
        assert np.max(check_grad_params(model, X, Y, 0.05)) < 1e-4


def test_grad_params_duplicate_batch():
    rng = np.random.default_rng(4)
    model, X, Y = random_config(rng)
    g1 = grad_params(model, X, Y, 0.1)
    g2 = grad_params(model, np.r_[X, X], np.r_[Y, Y], 0.1)
    for a, b in zip(g1[0] + g1[1], g2[0] + g2[1]):
        assert np.allclose(a, b, atol=1e-14)


def test_grad_input_linear():
    A = np.random.default_rng(5).normal(size=(3, 4))
    m = MlpModel([A], [np.zeros(3)])
    assert np.array_equal(grad_input(m, np.ones(4)), A)


def test_grad_input_dead_layer():
    m = MlpModel([np.eye(2), np.ones((3, 2))], [np.array([-10.0, -10.0]), np.zeros(3)])
    assert np.array_equal(grad_input(m, [0.5, 0.5]), np.zeros((3, 2)))


def test_grad_input_finite_difference():
    rng = np.random.default_rng(6)
    for _ in range(10):
        model, X, _ = random_config(rng)
        assert np.max(check_grad_input(model, X[0])) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradients_property(seed):
    rng = np.random.default_rng(seed)
    model, X, Y = random_config(rng)
    assert np.max(check_grad_params(model, X, Y, float(rng.uniform(0, 0.1)))) < 1e-4
    assert np.max(check_grad_input(model, X[0])) < 1e-4


def test_forward_and_grad_input_agree():
    rng = np.random.default_rng(7)
    model, X, _ = random_config(rng)
    out, J = forward_and_grad_input(model, X[0])
    assert np.allclose(out, forward(model, X[0]))
    assert np.allclose(J, grad_input(model, X[0]))
    assert np.allclose(grad_input(model, X)[0], J)


def test_train_linear_data_reaches_noise():
    rng = np.random.default_rng(8)
    A = rng.normal(size=(2, 3))
    X = rng.normal(size=(300, 3))
    Xv = rng.normal(size=(60, 3))
    noise = 0.01
    Y = X @ A.T + noise * rng.normal(size=(300, 2))
    Yv = Xv @ A.T + noise * rng.normal(size=(60, 2))
    cfg = TrainConfig(l2_penalty=0.0, learning_rate=1e-2, max_epochs=400, early_stop_patience=50)
    model, hist = train(MlpModel.initialize([3, 2], 0), X, Y, Xv, Yv, cfg)
    # mean absolute value of N(0, noise^2) is noise * sqrt(2/pi)
    assert hist.val_mae[hist.best_epoch - 1] < 1.5 * noise


def test_train_zero_epochs():
    init = MlpModel.initialize([2, 4, 1], 3)
    model, hist = train(init, np.ones((5, 2)), np.ones((5, 1)), config=TrainConfig(max_epochs=0))
    assert len(hist) == 0
    assert all(np.array_equal(a, b) for a, b in zip(model.weights, init.weights))


def test_train_dimension_mismatch():
    with pytest.raises(ValidationError):
        train(MlpModel.initialize([2, 1]), np.ones((5, 3)), np.ones((5, 1)))


def test_full_batch_loss_non_increasing():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(40, 2))
    Y = np.sin(X[:, :1]) + X[:, 1:] ** 2
    cfg = TrainConfig(l2_penalty=0.0, learning_rate=1e-3, batch_size=40, max_epochs=100,
                      early_stop_patience=100)
    _, hist = train(MlpModel.initialize([2, 8, 1], 1), X, Y, config=cfg)
    mse = np.array(hist.train_mse)
    assert np.all(np.diff(mse) <= 1e-12)


def test_history_consistent_with_stored_model():
    rng = np.random.default_rng(10)
    X, Xv = rng.normal(size=(80, 2)), rng.normal(size=(20, 2))
    f = lambda Z: np.c_[np.tanh(Z[:, 0]), Z[:, 1] ** 2]
    cfg = TrainConfig(max_epochs=60, learning_rate=5e-3, early_stop_patience=60)
    model, hist = train(MlpModel.initialize([2, 8, 2], 0), X, f(X), Xv, f(Xv), cfg)
    achieved = np.mean(np.abs(forward(model, Xv) - f(Xv)))
    assert min(hist.val_mae) >= achieved - 1e-12
    assert achieved == pytest.approx(hist.val_mae[hist.best_epoch - 1], abs=1e-12)


def test_training_is_deterministic():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(50, 2))
    Y = X[:, :1] * X[:, 1:]
    a = MLPRegressor((8,), max_epochs=30, random_state=2).fit(X, Y)
    b = MLPRegressor((8,), max_epochs=30, random_state=2).fit(X, Y)
    assert np.array_equal(a.predict(X), b.predict(X))


def test_regressor_folded_scaling_and_serialization():
    rng = np.random.default_rng(12)
    X = rng.uniform(0, 5, (200, 2))
    Y = np.c_[X[:, 0] * 10 + 3, X[:, 1] ** 2]
    est = MLPRegressor((16,), max_epochs=300, learning_rate=1e-2, random_state=0).fit(X, Y)
    assert np.mean(np.abs(est.predict(X) - Y)) < 0.05 * np.ptp(Y)
    x = X[3]
    J_fd = central_diff(lambda v: est.predict(v), x)
    assert np.allclose(est.jacobian(x), J_fd, rtol=1e-4, atol=1e-6)
    back = MLPRegressor.from_dict(est.to_dict())
    assert np.array_equal(back.predict(X), est.predict(X))


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=float("nan"))
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
