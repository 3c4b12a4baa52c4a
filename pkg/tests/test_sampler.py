import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fd_utils import central_diff, rel_err
from tdiuq.core import ValidationError
from tdiuq.sampler import (
    PosteriorChain, SamplingError, TargetDensity, diagnostics, ess, mcse_mean, nuts_sample,
    pooled, read_chains, rhat, rwm_sample, sample, write_chains, write_diagnostics,
)


def gaussian_target(mean, cov, bounds=None):
    mean = np.asarray(mean, float)
    P = np.linalg.inv(np.atleast_2d(cov))

    def lg(x):
        r = x - mean
        return -0.5 * r @ P @ r, -P @ r

    return TargetDensity(lg, mean.size, bounds=bounds)


@pytest.fixture(scope="module")
def normal_chains():
    return nuts_sample(gaussian_target([0.0], [[1.0]]), chains=4, warmup=500, draws=1000, seed=0)


def test_standard_normal(normal_chains):
    x = pooled(normal_chains)[:, 0]
    assert abs(x.mean()) < 3 * mcse_mean(normal_chains)[0]
    assert abs(x.var() - 1) < 0.1


def test_ks_detailed_balance_smoke():
    # thin so the S = 4000 retained draws are close to independent
    ch = nuts_sample(gaussian_target([0.0], [[1.0]]), chains=4, warmup=500, draws=5000, seed=0)
    x = np.concatenate([c.draws[::5, 0] for c in ch])
    assert x.size == 4000
    d = stats.kstest(x, "norm").statistic
    assert d < 1.628 / np.sqrt(x.size)  # 1% critical value


def test_correlated_gaussian():
    cov = [[1.0, 0.9], [0.9, 1.0]]
    ch = nuts_sample(gaussian_target([1.0, -1.0], cov), chains=4, warmup=500, draws=1000, seed=1)
    x = pooled(ch)
    assert abs(np.corrcoef(x.T)[0, 1] - 0.9) < 0.05
    assert np.all(rhat(ch) < 1.01)


def test_conjugate_normal_normal():
    rng = np.random.default_rng(2)
    y = rng.normal(1.5, 2.0, 20)
    m0, s0, s = 0.0, 3.0, 2.0
    post_var = 1 / (1 / s0**2 + y.size / s**2)
    post_mean = post_var * (m0 / s0**2 + y.sum() / s**2)

    def lg(x):
        mu = x[0]
        return (-0.5 * (mu - m0) ** 2 / s0**2 - 0.5 * np.sum((y - mu) ** 2) / s**2,
                np.array([-(mu - m0) / s0**2 + np.sum(y - mu) / s**2]))

    ch = nuts_sample(TargetDensity(lg, 1), chains=4, warmup=500, draws=1000, seed=3)
    x = pooled(ch)[:, 0]
    mcse = mcse_mean(ch)[0]
    assert abs(x.mean() - post_mean) < 3 * mcse
    # the MCSE of a standard deviation is about sd / sqrt(2 ESS)
    assert abs(x.std() - np.sqrt(post_var)) < 3 * np.sqrt(post_var / (2 * ess(ch)[0]))


def test_bounded_draws_stay_in_bounds():
    t = gaussian_target([0.0, 0.0], np.eye(2) * 4, bounds=[[0.0, 1.0], [0.5, np.inf]])
    ch = nuts_sample(t, chains=2, warmup=200, draws=300, seed=4)
    x = pooled(ch)
    assert np.all((x[:, 0] > 0) & (x[:, 0] < 1) & (x[:, 1] > 0.5))


def test_uniform_on_interval_recovered():
    t = TargetDensity(lambda x: (0.0, np.zeros(1)), 1, bounds=[[2.0, 5.0]])
    x = pooled(nuts_sample(t, chains=4, warmup=300, draws=1000, seed=5))[:, 0]
    assert stats.kstest(x, stats.uniform(2, 3).cdf).statistic < 1.628 / np.sqrt(x.size)


def test_fixed_seed_identical():
    t = gaussian_target([0.0, 1.0], np.eye(2))
    a = nuts_sample(t, chains=2, warmup=50, draws=50, seed=9)
    b = nuts_sample(t, chains=2, warmup=50, draws=50, seed=9)
    assert all(np.array_equal(x.draws, y.draws) for x, y in zip(a, b))


def test_all_divergent_warmup_raises():
    calls = [0]

    def lg(x):
        # finite only at the starting point; every trajectory step diverges
        calls[0] += 1
        return (0.0, np.zeros(1)) if calls[0] == 1 else (-np.inf, np.zeros(1))

    with pytest.raises(SamplingError):
        nuts_sample(TargetDensity(lg, 1), chains=1, warmup=20, draws=5)


def test_nuts_requires_gradient():
    t = TargetDensity(None, 1, logp=lambda x: -0.5 * x @ x)
    with pytest.raises(ValidationError):
        nuts_sample(t)


def test_rwm_fallback():
    t = TargetDensity(None, 2, logp=lambda x: -0.5 * np.sum((x - 1) ** 2))
    ch = sample(t, chains=2, warmup=500, draws=500, seed=6)
    assert ch[0].method == "rwm"
    x = pooled(ch)
    assert np.allclose(x.mean(0), 1, atol=0.2)
    assert rwm_sample(t, chains=1, warmup=100, draws=10, seed=0)[0].n_draws == 10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_transform_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    t = gaussian_target(rng.normal(size=3), np.diag(rng.uniform(0.5, 2, 3)),
                        bounds=[[0.0, 5.0], [-1.0, np.inf], [-np.inf, 2.0]])
    z = rng.uniform(-2, 2, 3)
    _, g = t.unconstrained_logp_and_grad(z)
    fd = central_diff(t.unconstrained_logp, z)
    assert np.max(rel_err(g, fd)) < 1e-4
    assert np.allclose(t.to_unconstrained(t.to_constrained(z)), z)


def test_rhat_iid():
    x = np.random.default_rng(7).normal(size=(4, 1000, 1))
    assert 0.99 <= rhat(x)[0] <= 1.01


def test_rhat_offset_chains():
    rng = np.random.default_rng(8)
    x = np.stack([rng.normal(size=500), rng.normal(size=500) + 10])
    assert rhat(x)[0] > 1.1


def test_rhat_constant_is_nan_flagged():
    x = np.full((3, 50, 1), 2.0)
    assert np.isnan(rhat(x)[0])
    chains = [PosteriorChain(np.full((50, 1), 2.0), ("a",), 0, i) for i in range(3)]
    d = diagnostics(chains)
    assert d["degenerate"] == [True] and d["rhat"] == [None]


def test_rhat_ess_too_few():
    with pytest.raises(ValidationError):
        rhat(np.zeros((1, 100, 1)))
    with pytest.raises(ValidationError):
        ess(np.zeros((2, 3, 1)))


def test_ess_iid():
    x = np.random.default_rng(9).normal(size=(4, 1000, 1))
    assert ess(x)[0] == pytest.approx(4000, rel=0.2)


def test_ess_constant_degenerate():
    assert np.isnan(ess(np.ones((2, 100, 1)))[0])


def test_ess_ar1():
    from tdiuq.synthsim import ar1_series

    rho = 0.9
    x = ar1_series(5000, rho, 1.0, np.random.default_rng(10), size=4)[:, :, None]
    expected = 4 * 5000 * (1 - rho) / (1 + rho)
    assert ess(x)[0] == pytest.approx(expected, rel=0.3)


def test_chain_io(tmp_path, normal_chains):
    write_chains(normal_chains, tmp_path / "c.csv")
    back = read_chains(tmp_path / "c.csv")
    assert len(back) == 4
    assert all(np.array_equal(a.draws, b.draws) for a, b in zip(normal_chains, back))
    write_diagnostics(normal_chains, tmp_path / "d.json")
    assert (tmp_path / "d.json").read_text().startswith("{")


def test_posterior_chain_validation():
    with pytest.raises(ValidationError):
        PosteriorChain(np.array([[np.nan]]), ("a",), 0, 0)
