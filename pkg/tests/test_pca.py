import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdiuq import synthsim as ss
from tdiuq.pca import PCA, DegeneratePCAError, fit_data_matrix, select_components


def eig_oracle(A):
    """Principal axes of a p x N data matrix via the sample covariance."""
    Ac = A - A.mean(axis=1, keepdims=True)
    w, V = np.linalg.eigh(Ac @ Ac.T / (A.shape[1] - 1))
    order = np.argsort(w)[::-1]
    w, V = w[order], V[:, order].T
    for row in V:
        first = np.flatnonzero(np.abs(row) > 1e-12)[0]
        row *= np.sign(row[first])
    return V, w / w.sum()


def test_rank_one():
    rng = np.random.default_rng(0)
    v = rng.normal(size=8)
    A = np.outer(v, rng.normal(size=30))
    m = fit_data_matrix(A)
    assert m.explained_variance_ratio_[0] == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(m.explained_variance_ratio_[1:], 0, atol=1e-12)
    assert m.n_components_ == 1


def test_matches_eigendecomposition():
    rng = np.random.default_rng(1)
    for _ in range(5):
        A = rng.normal(size=(6, 50)) * np.arange(1, 7)[:, None]
        m = fit_data_matrix(A, n_components=None)
        V, ratios = eig_oracle(A)
        assert np.max(np.abs(m.components_ - V)) < 1e-8
        assert np.max(np.abs(m.explained_variance_ratio_ - ratios)) < 1e-8


def test_constant_is_degenerate():
    m = fit_data_matrix(np.full((5, 10), 0.3))
    assert m.degenerate_
    with pytest.raises(DegeneratePCAError):
        m.select_components(0.999)


def test_select_components_examples():
    assert select_components([0.9, 0.09, 0.008, 0.0015, 0.0005], 0.999) == 4
    assert select_components([1.0], 0.999) == 1


def test_synthetic_family_needs_at_most_five():
    from tdiuq.surrogate import build_training_set
    suite = ss.make_benchmark_suite(0)
    spec = suite.spec("6T-FR")
    tr = build_training_set(lambda x, s: ss.simulate_flat(x, s, discrepancy=False), spec, 200,
                            [(0, 5)] * 4, seed=3)
    m = PCA(0.999).fit(tr.outputs)
    assert tr.outputs.shape[1] == 120
    assert m.n_components_ <= 5


def fitted(seed=2, p=7, N=20):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(N, p)) @ rng.normal(size=(p, p))
    return X, PCA(n_components=None).fit(X)


def test_transform_examples():
    X, m = fitted()
    assert np.allclose(m.transform(m.mean_), 0, atol=1e-12)
    s = m.transform(m.mean_ + 2.5 * m.components_[3])
    assert np.allclose(s, 2.5 * np.eye(m.n_components_)[3], atol=1e-10)
    a = np.random.default_rng(3).normal(size=X.shape[1])
    assert np.allclose(m.transform(a), m.components_ @ (a - m.mean_), atol=1e-12)


def test_inverse_transform_examples():
    X, m = fitted()
    assert np.allclose(m.inverse_transform(np.zeros(m.n_components_)), m.mean_)
    assert np.max(np.abs(m.inverse_transform(m.transform(X)) - X)) < 1e-8


def test_truncation_error_monotone():
    X, m = fitted(p=8, N=40)
    a = X[5]
    errs = []
    for n in range(1, 9):
        m.set_n_components(n)
        errs.append(np.linalg.norm(m.inverse_transform(m.transform(a)) - a))
    assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(errs, errs[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 8), st.integers(3, 15), st.integers(0, 10_000))
def test_invariants(p, N, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(N, p))
    m = PCA(n_components=None).fit(X)
    C = m.components_
    assert np.allclose(C @ C.T, np.eye(C.shape[0]), atol=1e-10)
    r = m.explained_variance_ratio_
    assert np.all(r >= 0) and np.all(np.diff(r) <= 1e-12) and r.sum() <= 1 + 1e-10
    for row in C:
        first = row[np.flatnonzero(np.abs(row) > 1e-12)[0]]
        assert first > 0
    for n in range(1, C.shape[0] + 1):
        m.set_n_components(n)
        err = np.sum((m.inverse_transform(m.transform(X)) - X) ** 2) / N
        assert abs(err - m.reconstruction_residual(n)) < 1e-8
        s = rng.normal(size=n)
        assert np.allclose(m.transform(m.inverse_transform(s)), s, atol=1e-10)


def test_serialization_roundtrip():
    X, m = fitted()
    back = PCA.from_dict(m.to_dict())
    assert np.array_equal(back.transform(X), m.transform(X))
