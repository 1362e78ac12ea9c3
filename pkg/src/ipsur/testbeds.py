"""Direct models, observation generators and initial designs for the benchmarks."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .inverse import ObservationSet


@dataclass(frozen=True)
class NuclearData:
    """Neutron multiplicity statistics for induced and spontaneous fission.

    The defaults are placeholders that only keep the pipeline runnable; they
    are not evaluated nuclear data.
    """

    nu_bar: float = 2.4
    D2: float = 0.8
    D3: float = 0.5
    nu_bar_s: float = 2.1
    D2s: float = 0.9
    D3s: float = 0.7

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"nuclear datum {name} must be strictly positive, got {value}")


@dataclass(frozen=True)
class PointModelParams:
    k_p: float
    eps_F: float
    S: float
    x_s: float

    @property
    def rho(self):
        return (self.k_p - 1.0) / self.k_p


def banana(x):
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 0], x[..., 1] + 0.03 * x[..., 0] ** 2], axis=-1)


def bimodal(x):
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 1] - x[..., 0] ** 2, x[..., 1] - x[..., 0]], axis=-1)


def point_model(params, nd=None):
    """Point-model neutron statistics ``(R, Y_inf, X_inf)``.

    Parameters
    ----------
    params : PointModelParams or array_like
        ``(k_p, eps_F, S, x_s)``; arrays may carry leading batch dimensions.
    nd : NuclearData, optional
    """
    nd = NuclearData() if nd is None else nd
    if isinstance(params, PointModelParams):
        k_p, eps, S, xs = params.k_p, params.eps_F, params.S, params.x_s
    else:
        arr = np.asarray(params, dtype=float)
        k_p, eps, S, xs = arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3]
    if np.any(np.asarray(k_p) >= 1.0):
        raise ValueError("k_p >= 1 describes a supercritical system, which the point model does not cover")
    if np.any(np.asarray(k_p) <= 0.0):
        raise ValueError("k_p must be positive")
    rho = (k_p - 1.0) / k_p
    R = -eps * S * nd.nu_bar_s / (rho * nd.nu_bar * (nd.nu_bar_s + xs - nd.nu_bar_s * xs))
    y_lead = eps * nd.D2 / rho ** 2
    corr2 = 1.0 - xs * rho * nd.nu_bar_s * nd.D2s / (nd.nu_bar * nd.D2)
    corr3 = 1.0 - xs * rho * nd.nu_bar_s ** 2 * nd.D3s / (nd.nu_bar ** 2 * nd.D3)
    Y = y_lead * corr2
    Xinf = 3.0 * y_lead ** 2 * corr2 - eps ** 2 * nd.D3 / rho ** 3 * corr3
    return np.stack(np.broadcast_arrays(R, Y, Xinf), axis=-1)


@dataclass(frozen=True)
class DirectModel:
    name: str
    func: Callable = field(repr=False)
    box: np.ndarray = field(repr=False)
    d: int

    @property
    def p(self):
        return self.box.shape[0]

    def __call__(self, x):
        return self.func(x)


BANANA_BOX = np.array([[-20.0, 20.0], [-10.0, 10.0]])
BIMODAL_BOX = np.array([[-6.0, 6.0], [-4.0, 8.0]])
NEUTRON_BOX = np.array([[0.7, 0.9], [0.01, 0.10], [1e5, 2e5], [0.1, 0.9]])


@dataclass(frozen=True)
class TestCase:
    """A direct model with its observation protocol."""

    model: DirectModel
    N: int
    c_obs: np.ndarray
    center: np.ndarray  # noiseless observation mean

    __test__ = False  # not a pytest class


def make_testbed(name, nuclear_data=None, x_th=None, neutron_rel_noise=0.05):
    """Build one of ``banana``, ``bimodal``, ``neutron``.

    Banana and bimodal observations are drawn around the stated mean ``mu``
    directly. For the neutron case ``x_th`` defaults to the box centre and the
    noise is diagonal with standard deviation ``neutron_rel_noise * f(x_th)``.
    """
    if name == "banana":
        model = DirectModel("banana", banana, BANANA_BOX, 2)
        return TestCase(model, 5, np.diag([100.0, 1.0]), np.array([0.0, 3.0]))
    if name == "bimodal":
        model = DirectModel("bimodal", bimodal, BIMODAL_BOX, 2)
        c_obs = np.diag([5.0 / np.sqrt(0.2), 5.0 / np.sqrt(0.75)])
        return TestCase(model, 10, c_obs, np.array([0.0, 2.0]))
    if name == "neutron":
        nd = nuclear_data if nuclear_data is not None else NuclearData()
        model = DirectModel("neutron", lambda x: point_model(x, nd), NEUTRON_BOX, 3)
        x_th = NEUTRON_BOX.mean(axis=1) if x_th is None else np.asarray(x_th, dtype=float)
        f_th = model(x_th)
        c_obs = np.diag((neutron_rel_noise * f_th) ** 2)
        return TestCase(model, 20, c_obs, f_th)
    raise ValueError(f"unknown test bed {name!r}; expected banana, bimodal or neutron")


def make_observations(center, c_obs, N, seed=None):
    """Draw ``N`` i.i.d. observations ``center + eps`` with ``eps ~ N(0, c_obs)``.

    ``center`` is either ``f(x_th)`` or a stated observation mean.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    c_obs = np.atleast_2d(np.asarray(c_obs, dtype=float))
    try:
        np.linalg.cholesky(c_obs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("observation covariance must be symmetric positive definite") from exc
    rng = np.random.default_rng(seed)
    y = rng.multivariate_normal(center, c_obs, size=N, method="cholesky")
    return ObservationSet(y, c_obs)


def initial_design(box, n0, seed=None):
    """Latin hypercube of ``n0`` points in ``box`` (one point per stratum per axis)."""
    if n0 < 2:
        raise ValueError("initial design needs at least two points")
    box = np.asarray(box, dtype=float)
    unit = qmc.LatinHypercube(d=box.shape[0], seed=seed).random(n0)
    return qmc.scale(unit, box[:, 0], box[:, 1])
