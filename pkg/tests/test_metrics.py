import warnings

import numpy as np
import pytest
from scipy.stats import gaussian_kde

from ipsur.gp import KernelSpec, condition
from ipsur.mcmc import PosteriorChain
from ipsur.metrics import KdeModel, compute_metrics, entropy_kde, ivar, kl_kde


def gaussian_chain(n, mean=(0.0, 0.0), seed=0):
    X = np.random.default_rng(seed).standard_normal((n, 2)) + np.asarray(mean)
    return PosteriorChain(X, np.zeros(n), 0.3, 0, n, iat=np.array([1.0, 1.2]))


def test_kde_matches_scipy_reference():
    X = np.random.default_rng(0).standard_normal((2000, 2))
    kde = KdeModel(X)
    Y = np.random.default_rng(1).standard_normal((50, 2))
    np.testing.assert_allclose(kde.logpdf(Y, method="exact"), gaussian_kde(X.T).logpdf(Y.T), rtol=1e-8)


def test_binned_and_exact_agree():
    X = np.random.default_rng(2).standard_normal((20_000, 2))
    kde = KdeModel(X)
    Y = X[:500]
    np.testing.assert_allclose(kde.logpdf(Y, method="binned"), kde.logpdf(Y, method="exact"), atol=0.02)


def test_binned_tails_fall_back_to_exact():
    X = np.random.default_rng(3).standard_normal((5000, 2))
    kde = KdeModel(X)
    far = np.array([[6.0, 6.0]])
    np.testing.assert_allclose(kde.logpdf(far, method="binned"), kde.logpdf(far, method="exact"), rtol=1e-10)


def test_entropy_of_standard_gaussian():
    assert entropy_kde(gaussian_chain(20_000)) == pytest.approx(np.log(2 * np.pi * np.e), abs=0.05)


def test_entropy_needs_enough_samples():
    with pytest.raises(ValueError, match="1000"):
        entropy_kde(gaussian_chain(500))


def test_kl_of_shifted_gaussians():
    a, b = gaussian_chain(20_000, seed=1), gaussian_chain(20_000, mean=(1.0, 0.0), seed=2)
    assert kl_kde(a, b) == pytest.approx(0.5, abs=0.08)
    assert abs(kl_kde(a, gaussian_chain(20_000, seed=5))) < 0.05


def test_ivar_matches_direct_average():
    spec = KernelSpec.default(2, 2, lengthscale=0.4)
    X = np.random.default_rng(0).uniform(size=(8, 2))
    gp = condition(spec, X, np.c_[np.sin(3 * X[:, 0]), X[:, 1] ** 2])
    S = np.random.default_rng(1).uniform(size=(100, 2))
    direct = np.mean([np.linalg.det(gp.predict(s)[1]) for s in S])
    assert ivar(gp, S) == pytest.approx(direct, rel=1e-8)
    with pytest.raises(ValueError):
        ivar(gp, np.empty((0, 2)))


def test_compute_metrics_does_not_modify_inputs():
    spec = KernelSpec.default(2, 2, lengthscale=0.5)
    X = np.random.default_rng(0).uniform(size=(6, 2))
    gp = condition(spec, X, X ** 2)
    chain = gaussian_chain(3000)
    before = chain.samples.copy()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rec = compute_metrics(2, gp, chain, gaussian_chain(3000, seed=9), kde_max_samples=2000)
    np.testing.assert_array_equal(chain.samples, before)
    assert rec.iteration == 2 and rec.iat_max == pytest.approx(1.2) and rec.acceptance_rate == 0.3
    assert np.isfinite(rec.ivar) and np.isfinite(rec.entropy) and np.isfinite(rec.kl)
    assert np.isnan(compute_metrics(0, gp, chain).kl)
