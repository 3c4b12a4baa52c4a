import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from fd_utils import central_diff, rel_err
from tdiuq import synthsim as ss
from tdiuq.calib import (
    DiagnosticsError, Normal, PriorSpec, Uniform, boundary_mass, build_hierarchical_target,
    build_single_level_target, extend_bounds, find_mode, iterative_resample, posterior_summary,
    summarize_hyper, theta_samples, validate_posterior,
)
from tdiuq.core import TimeSeriesGrid, TransientCase, ValidationError
from tdiuq.covest import regularize_cov
from tdiuq.sampler import PosteriorChain, nuts_sample, pooled


class LinearModel:
    """y = A theta + b, with exact Jacobian."""

    supports_gradient = True

    def __init__(self, A, b=None):
        self.A = np.atleast_2d(np.asarray(A, float))
        self.b = np.zeros(self.A.shape[0]) if b is None else np.asarray(b, float)
        self.n_outputs_, self.n_features_in_ = self.A.shape

    def predict(self, theta):
        return self.A @ np.asarray(theta, float) + self.b

    def predict_and_grad(self, theta):
        return self.predict(theta), self.A


class TanhModel(LinearModel):
    """Nonlinear test surrogate: y = tanh(A theta) + b."""

    def predict(self, theta):
        return np.tanh(self.A @ np.asarray(theta, float)) + self.b

    def predict_and_grad(self, theta):
        u = np.tanh(self.A @ np.asarray(theta, float))
        return u + self.b, (1 - u * u)[:, None] * self.A


class SimulatorModel:
    """The synthetic simulator itself, without gradients."""

    supports_gradient = False
    n_features_in_ = 4

    def __init__(self, spec):
        self.spec = spec
        self.n_outputs_ = spec.k

    def predict(self, theta):
        return ss.simulate_flat(theta, self.spec, discrepancy=False)


def vector_case(y, cid="c"):
    y = np.asarray(y, float)
    grid = TimeSeriesGrid(np.arange(y.size, dtype=float), ["loc"], y[None, :])
    return TransientCase(cid, None, grid)


def test_flat_prior_unit_cov_logp_differences():
    rng = np.random.default_rng(0)
    m = LinearModel(rng.normal(size=(6, 2)))
    case = vector_case(rng.normal(size=6))
    t = build_single_level_target(m, case, "diagonal", PriorSpec.uniform([[-10, 10]] * 2), np.eye(6))
    a, b = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
    ra, rb = case.flattened - m.predict(a), case.flattened - m.predict(b)
    assert t.logp(a) - t.logp(b) == pytest.approx(-0.5 * (ra @ ra - rb @ rb), abs=1e-10)


def test_mode_recovers_truth_on_synthetic_case():
    spec = ss.make_benchmark_suite(0).spec("6T-FR")
    theta_true = np.array([1.4, 1.7, 2.2, 0.8])
    case = ss.synthesize_observations(spec, theta_true, {"kind": "iid", "sigma": 0.0})
    t = build_single_level_target(SimulatorModel(spec), case, "diagonal",
                                  PriorSpec.uniform([[0, 5]] * 4), np.eye(120) * 1e-6)
    mode = find_mode(t, init=[1, 1, 1, 1], restarts=1)
    assert np.max(np.abs(mode - theta_true)) < 0.05


def test_outside_support_is_minus_inf():
    m = LinearModel(np.eye(2))
    t = build_single_level_target(m, vector_case([1, 1]), "diagonal",
                                  PriorSpec.uniform([[0, 5]] * 2), np.eye(2))
    assert t.logp([5.5, 1.0]) == -np.inf
    assert t.logp_and_grad([-0.1, 1.0])[0] == -np.inf


def test_diagonal_equals_sum_of_univariate():
    rng = np.random.default_rng(1)
    m = LinearModel(rng.normal(size=(5, 3)))
    y = rng.normal(size=5)
    C = rng.normal(size=(5, 5))
    C = C @ C.T + np.eye(5)
    laws = (Normal(0, 2), Uniform(-3, 3), Normal(1, 0.5))
    t = build_single_level_target(m, vector_case(y), "diagonal", PriorSpec(laws), regularize_cov(C))
    theta = rng.uniform(-1, 1, 3)
    expected = norm.logpdf(y, m.predict(theta), np.sqrt(np.diag(C))).sum()
    expected += sum(float(l.logpdf(x)) for l, x in zip(laws, theta))
    assert abs(t.logp(theta) - expected) < 1e-10


def test_dimension_and_covariance_errors():
    m = LinearModel(np.eye(3))
    with pytest.raises(ValidationError):
        build_single_level_target(m, vector_case([1, 2]), "full", PriorSpec.uniform([[0, 1]] * 3), np.eye(2))
    with pytest.raises(ValidationError):
        build_single_level_target(m, vector_case([1, 2, 3]), "full", PriorSpec.uniform([[0, 1]] * 3))
    with pytest.raises(ValidationError):
        build_single_level_target(m, vector_case([1, 2, 3]), "full", PriorSpec.uniform([[0, 1]] * 2), np.eye(3))


def hier_target(G=3, d=2, seed=0, mode="full"):
    rng = np.random.default_rng(seed)
    models, cases, covs = [], [], []
    for g in range(G):
        models.append(TanhModel(rng.normal(size=(5, d)) * 0.5, rng.normal(size=5)))
        cases.append(vector_case(rng.normal(size=5), f"g{g}"))
        C = rng.normal(size=(5, 5))
        covs.append(regularize_cov(C @ C.T + np.eye(5), 0.1))
    return build_hierarchical_target(models, cases, mode, PriorSpec.default_hierarchical(d), covs)


def random_state(t, rng):
    d = t.d
    return np.concatenate([rng.uniform(0.5, 4.5, d), rng.uniform(0.1, 0.9, d),
                           rng.normal(size=t.G * d)])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["full", "diagonal"]))
def test_gradients_match_finite_differences(seed, mode):
    rng = np.random.default_rng(seed)
    t = hier_target(seed=seed, mode=mode)
    z = t.to_unconstrained(random_state(t, rng))
    _, g = t.unconstrained_logp_and_grad(z)
    assert np.max(rel_err(g, central_diff(t.unconstrained_logp, z))) < 1e-4
    m = TanhModel(rng.normal(size=(4, 2)), rng.normal(size=4))
    s = build_single_level_target(m, vector_case(rng.normal(size=4)), mode,
                                  PriorSpec((Normal(0, 1), Uniform(-3, 3))), np.eye(4) * 0.3)
    x = rng.uniform(-2, 2, 2)
    _, g = s.logp_and_grad(x)
    assert np.max(rel_err(g, central_diff(s.logp, x))) < 1e-4


def test_hierarchical_permutation_invariance():
    rng = np.random.default_rng(3)
    t = hier_target(G=3, seed=3)
    x = random_state(t, rng)
    perm = [2, 0, 1]
    t2 = build_hierarchical_target([t.likelihoods[i].surrogate for i in perm],
                                   [t.likelihoods[i].case for i in perm], "full",
                                   PriorSpec.default_hierarchical(2),
                                   [t.likelihoods[i].cov for i in perm])
    mu, sd, eta = t.split(x)
    x2 = np.concatenate([mu, sd, eta[perm].ravel()])
    assert t2.logp(x2) == pytest.approx(t.logp(x), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_centered_and_noncentered_agree(seed):
    rng = np.random.default_rng(seed)
    t = hier_target(seed=seed)
    mu, sd = rng.uniform(0.5, 4.5, 2), rng.uniform(0.1, 0.9, 2)
    theta = rng.normal(mu, 1.0, (t.G, 2))
    x = t.to_state(mu, sd, theta)
    # change of variables theta = mu + sd * eta contributes sum log sd per group
    assert t.logp(x) == pytest.approx(t.centered_logp(mu, sd, theta) + t.G * np.log(sd).sum(), abs=1e-9)


def test_needs_two_groups():
    m = LinearModel(np.eye(2))
    with pytest.raises(ValidationError):
        build_hierarchical_target([m], [vector_case([1, 1])], "full", PriorSpec.default_hierarchical(2), [np.eye(2)])


def identity_groups(thetas, s=0.05, n_obs=4, seed=0):
    """Each group observes its own parameters directly, n_obs times, with noise s."""
    rng = np.random.default_rng(seed)
    d = thetas.shape[1]
    A = np.tile(np.eye(d), (n_obs, 1))
    models, cases, covs = [], [], []
    for g, th in enumerate(thetas):
        models.append(LinearModel(A))
        cases.append(vector_case(A @ th + s * rng.normal(size=A.shape[0]), f"g{g}"))
        covs.append(np.eye(A.shape[0]) * s * s)
    return models, cases, covs


def test_identical_groups_indistinguishable():
    models, cases, covs = identity_groups(np.array([[1.0, 2.0]]), seed=1)
    t = build_hierarchical_target(models * 2, [cases[0], vector_case(cases[0].flattened, "g1")],
                                  "full", PriorSpec.default_hierarchical(2), covs * 2)
    ch = nuts_sample(t, chains=2, warmup=300, draws=400, seed=0)
    per = t.per_group_draws(pooled(ch))
    lo, hi = np.quantile(per, [0.025, 0.975], axis=0)
    assert np.all(lo[0] < hi[1]) and np.all(lo[1] < hi[0])
    sd = pooled(ch)[:, 2:4]
    assert np.all((sd > 0) & (sd < 1))


def test_hyper_posterior_covers_generating_values():
    rng = np.random.default_rng(5)
    mu_star, sd_star = np.array([2.0, 3.0]), np.array([0.3, 0.5])
    thetas = mu_star + sd_star * rng.standard_normal((12, 2))
    models, cases, covs = identity_groups(thetas, seed=5)
    t = build_hierarchical_target(models, cases, "diagonal", PriorSpec.default_hierarchical(2), covs)
    ch = nuts_sample(t, chains=4, warmup=400, draws=500, seed=1)
    s = posterior_summary(ch)
    for j, p in enumerate(["theta0", "theta1"]):
        assert s[f"mu_{p}"]["lower"] < mu_star[j] < s[f"mu_{p}"]["upper"]
        assert s[f"sigma_{p}"]["lower"] < sd_star[j] < s[f"sigma_{p}"]["upper"]


def test_summarize_degenerate():
    draws = np.tile([2.0, 0.5], (50, 1))
    chains = [PosteriorChain(draws, ("mu_a", "sigma_a"), 0, i) for i in range(2)]
    out = summarize_hyper(chains)
    assert out["a"]["predictive"] == {"law": "normal", "mean": 2.0, "sd": 0.5}


def test_summarize_conjugate_case():
    # sd fixed by a narrow hyperprior, flat mean prior: mu | y ~ N(mean(y), (sd^2 + s^2) / G)
    G, sd, s = 8, 0.5, 0.2
    rng = np.random.default_rng(7)
    thetas = (2.0 + sd * rng.standard_normal(G))[:, None]
    models, cases, covs = identity_groups(thetas, s=s, n_obs=1, seed=7)
    y = np.array([c.flattened[0] for c in cases])
    hp = PriorSpec((Uniform(-20, 20),), ("a",), (Uniform(-20, 20),), (Uniform(sd - 1e-4, sd + 1e-4),))
    t = build_hierarchical_target(models, cases, "full", hp, covs)
    ch = nuts_sample(t, chains=4, warmup=500, draws=1000, seed=2)
    out = summarize_hyper(ch)
    from tdiuq.sampler import mcse_mean

    mcse = mcse_mean(ch)[0]
    assert abs(out["a"]["mu"] - y.mean()) < 3 * mcse
    assert out["a"]["sigma"] == pytest.approx(sd, abs=1e-4)


def test_summarize_order_invariant_and_rhat_gate():
    rng = np.random.default_rng(8)
    chains = [PosteriorChain(rng.normal(size=(100, 2)) + [2, 0.5], ("mu_a", "sigma_a"), 0, i) for i in range(3)]
    a = summarize_hyper(chains)
    b = summarize_hyper(chains[::-1])
    assert a == b
    bad = chains + [PosteriorChain(rng.normal(size=(100, 2)) + [10, 5], ("mu_a", "sigma_a"), 0, 9)]
    with pytest.raises(DiagnosticsError):
        summarize_hyper(bad)
    assert "a" in summarize_hyper(bad, override=True)


def test_prior_spec_rules():
    with pytest.raises(ValidationError):
        PriorSpec((Uniform(0, 1),), hyper_mean=(Uniform(0, 5),), hyper_sd=(Uniform(-1, 1),))
    with pytest.raises(ValidationError):
        Uniform(2, 1)
    with pytest.raises(ValidationError):
        Normal(0, 0)
    p = PriorSpec.default_hierarchical(3, ("a", "b", "c"))
    assert PriorSpec.from_dict(p.to_dict()) == p
    assert p.hierarchical and p.bounds.tolist() == [[0, 5]] * 3


def test_boundary_mass_and_extension():
    draws = np.column_stack([np.full(100, 4.9), np.linspace(1, 4, 100)])
    mass = boundary_mass(draws, [[0, 5], [0, 5]])
    assert mass[0, 1] == 1.0 and mass[1].tolist() == [0.0, 0.0]
    new, changed = extend_bounds([[0, 5], [0, 5]], mass, 0.05)
    assert changed and new.tolist() == [[0, 7.5], [0, 5]]
    new, changed = extend_bounds([[0, 5]], np.array([[1.0, 0.0]]), 0.05, floor=0.0)
    assert not changed


def toy_simulator(theta, spec):
    t = np.linspace(0, 1, 12)
    return np.concatenate([theta[0] * (1 + t), theta[1] * t ** 2])


FAST_MLP = {"hidden_layer_sizes": (16,), "max_epochs": 600, "early_stop_patience": 100}
FAST_NUTS = {"chains": 2, "warmup": 200, "draws": 300}


def toy_case(theta, s=0.01, seed=0):
    y = toy_simulator(np.asarray(theta, float), None)
    return vector_case(y + s * np.random.default_rng(seed).normal(size=y.size))


def test_resample_interior_keeps_bounds():
    res = iterative_resample(toy_simulator, None, toy_case([2.0, 3.0]), [[0, 5], [0, 5]],
                             n_train=120, covariance=np.eye(24) * 1e-4,
                             surrogate_options=FAST_MLP, sampler_options=FAST_NUTS)
    assert res.status == "ok" and res.rounds == 0
    assert np.array_equal(res.bounds, [[0, 5], [0, 5]])


def test_resample_zero_rounds_warns():
    res = iterative_resample(toy_simulator, None, toy_case([6.0, 3.0]), [[0, 5], [0, 5]],
                             max_rounds=0, n_train=120, covariance=np.eye(24) * 1e-4,
                             surrogate_options=FAST_MLP, sampler_options=FAST_NUTS)
    assert res.status == "warning" and res.rounds == 0 and res.messages


def test_theta_samples():
    assert theta_samples({"kind": "point", "theta": [1, 2]}).shape == (1, 2)
    n = theta_samples({"kind": "normal", "mean": [0, 1], "sd": [1, 0]}, 50, seed=1)
    assert n.shape == (50, 2) and np.all(n[:, 1] == 1)
    c = theta_samples({"kind": "chains", "draws": np.arange(20.0)[:, None]}, 5)
    assert c.ravel().tolist() == [0, 4, 9, 14, 19]
    with pytest.raises(ValidationError):
        theta_samples({"kind": "other"})


def test_validate_posterior_at_truth_is_noise_only():
    suite = ss.make_benchmark_suite(0)
    sigma = 0.01
    cases = [ss.synthesize_observations(suite.spec(c), suite.theta_true[c], {"kind": "iid", "sigma": sigma}, seed=i)
             for i, c in enumerate(suite.train_ids + suite.test_ids)]
    sim = lambda th, case: ss.simulate_flat(th, suite.spec(case.id), discrepancy=False)
    rep = validate_posterior({"kind": "point", "theta": ss.DEFAULT_MU}, cases[:5], cases[5:], sim,
                             prior_source={"kind": "point", "theta": ss.NOMINAL})
    for split in ("train", "test"):
        stats = rep[split]["_all"]["posterior"]
        assert abs(stats["mean"]) < 3 * sigma / np.sqrt(stats["n"]) * 3
        assert stats["sd"] == pytest.approx(sigma, rel=0.1)
    only_train = validate_posterior({"kind": "point", "theta": ss.DEFAULT_MU}, cases[:5], [], sim)
    assert "train" in only_train and "test" not in only_train
