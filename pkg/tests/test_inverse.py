import numpy as np
import pytest

from ipsur.gp import KernelSpec, condition
from ipsur.inverse import FULL_LIKELIHOOD_MAX_SIZE, InverseProblem, ObservationSet
from ipsur.optim import AnnealConfig
from ipsur.testbeds import BANANA_BOX, banana, initial_design, make_observations, make_testbed


@pytest.fixture(scope="module")
def banana_problem():
    tc = make_testbed("banana")
    X = initial_design(BANANA_BOX, 30, seed=0)
    spec = KernelSpec.default(2, 2, family="matern52", lengthscale=[12.0, 6.0])
    gp = condition(spec, X, banana(X))
    obs = make_observations(tc.center, tc.c_obs, tc.N, seed=0)
    return InverseProblem(obs, gp, BANANA_BOX)


def test_observation_set_validates_covariance():
    with pytest.raises(ValueError, match="symmetric"):
        ObservationSet(np.zeros((3, 2)), [[1.0, 0.5], [0.4, 1.0]])
    with pytest.raises(ValueError, match="positive definite"):
        ObservationSet(np.zeros((3, 2)), [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValueError, match="2x2"):
        ObservationSet(np.zeros((3, 2)), np.eye(3))


def test_observation_files_round_trip(tmp_path):
    obs = ObservationSet(np.arange(6.0).reshape(3, 2), np.diag([2.0, 0.5]))
    obs.to_files(tmp_path / "y.csv", tmp_path / "y.json", box=BANANA_BOX)
    back, box = ObservationSet.from_files(tmp_path / "y.csv", tmp_path / "y.json")
    np.testing.assert_array_equal(back.y, obs.y)
    np.testing.assert_array_equal(back.c_obs, obs.c_obs)
    np.testing.assert_array_equal(box, BANANA_BOX)
    assert (tmp_path / "y.csv").read_text().splitlines()[0] == "y1,y2"


def test_observation_csv_header_is_checked(tmp_path):
    (tmp_path / "y.csv").write_text("a,b\n1,2\n")
    (tmp_path / "y.json").write_text('{"c_obs": [[1, 0], [0, 1]]}')
    with pytest.raises(ValueError, match="header"):
        ObservationSet.from_files(tmp_path / "y.csv", tmp_path / "y.json")


def test_box_validation(banana_problem):
    with pytest.raises(ValueError):
        InverseProblem(banana_problem.obs, banana_problem.gp, [[1.0, 0.0], [0.0, 1.0]])


def test_log_posterior_outside_box_is_minus_infinity(banana_problem):
    assert banana_problem.log_posterior([25.0, 0.0]) == -np.inf
    assert np.isfinite(banana_problem.log_posterior([0.0, 0.0]))
    assert banana_problem.log_prior([0.0, 0.0]) == pytest.approx(-np.log(40.0 * 20.0))


def test_batch_and_single_point_agree(banana_problem):
    X = np.random.default_rng(1).uniform(BANANA_BOX[:, 0], BANANA_BOX[:, 1], size=(15, 2))
    X[0] = [30.0, 0.0]
    batch = banana_problem.log_posterior_batch(X)
    single = np.array([banana_problem.log_posterior(x) for x in X])
    assert batch[0] == -np.inf and single[0] == -np.inf
    np.testing.assert_allclose(batch[1:], single[1:], rtol=1e-9)


def test_effective_covariance_adds_scaled_noise(banana_problem):
    x = np.array([1.0, 2.0])
    expected = banana_problem.gp.predict(x)[1] + banana_problem.obs.c_obs / banana_problem.obs.N
    np.testing.assert_allclose(banana_problem.effective_cov(x), expected)


def test_simplified_likelihood_is_proportional_to_full(banana_problem):
    X = np.random.default_rng(2).uniform(BANANA_BOX[:, 0], BANANA_BOX[:, 1], size=(20, 2))
    diff = np.array([banana_problem.log_likelihood_full(x) - banana_problem.log_likelihood(x) for x in X])
    assert np.ptp(diff) <= 1e-8


def test_full_likelihood_refuses_large_problems(banana_problem):
    big = ObservationSet(np.zeros((FULL_LIKELIHOOD_MAX_SIZE, 2)), np.eye(2))
    ip = InverseProblem(big, banana_problem.gp, BANANA_BOX)
    with pytest.raises(ValueError, match="exceeds"):
        ip.log_likelihood_full([0.0, 0.0])


def test_full_likelihood_single_observation_is_gaussian_density():
    spec = KernelSpec.default(1, 1, lengthscale=0.3)
    gp = condition(spec, [[0.0], [1.0]], [[0.0], [1.0]], normalize=False, mean_const=0.0)
    obs = ObservationSet([[0.4]], [[0.25]])
    ip = InverseProblem(obs, gp, [[0.0, 1.0]])
    x = np.array([0.5])
    m, c = gp.predict(x)
    var = c[0, 0] + 0.25
    expected = -0.5 * np.log(2 * np.pi * var) - 0.5 * (0.4 - m[0]) ** 2 / var
    assert ip.log_likelihood_full(x) == pytest.approx(expected, rel=1e-12)


def test_dimension_mismatch_is_rejected(banana_problem):
    obs = ObservationSet(np.zeros((2, 3)), np.eye(3))
    with pytest.raises(ValueError, match="dimension"):
        InverseProblem(obs, banana_problem.gp, BANANA_BOX)


def test_banana_posterior_matches_analytic_form_with_near_exact_surrogate():
    # with 200 training points the surrogate is essentially exact and the
    # simplified likelihood reduces to the analytic Gaussian in f(x)
    tc = make_testbed("banana")
    X = initial_design(BANANA_BOX, 200, seed=1)
    spec = KernelSpec.default(2, 2, family="rbf", lengthscale=[15.0, 15.0])
    gp = condition(spec, X, banana(X))
    obs = make_observations(tc.center, tc.c_obs, tc.N, seed=3)
    ip = InverseProblem(obs, gp, BANANA_BOX)
    C = tc.c_obs / tc.N
    Ci = np.linalg.inv(C)

    def analytic(x):
        r = obs.y_bar - banana(x)
        return -0.5 * r @ Ci @ r

    x_map = ip.find_map(AnnealConfig(max_evals=2000, seed=0))
    pts = np.random.default_rng(4).normal(x_map, [3.0, 0.5], size=(20, 2))
    pts = np.clip(pts, BANANA_BOX[:, 0], BANANA_BOX[:, 1])
    diff = np.array([ip.log_posterior(x) - analytic(x) for x in pts])
    assert np.ptp(diff) <= 0.05


def test_find_map_locates_posterior_mode(banana_problem):
    x_map = banana_problem.find_map(AnnealConfig(max_evals=3000, seed=1))
    grid = np.stack(np.meshgrid(np.linspace(-20, 20, 161), np.linspace(-10, 10, 81)), -1).reshape(-1, 2)
    best = banana_problem.log_posterior_batch(grid).max()
    assert banana_problem.log_posterior(x_map) >= best - 1e-3
