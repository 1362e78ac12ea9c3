"""Multi-output Gaussian process regression with LMC kernels.

The matrix-valued kernel is a linear model of coregionalization,

    k(x, x') = sum_q var_q * a_q a_q^T * k_q(x, x'),

with stationary latent correlations ``k_q`` (RBF, Matern-3/2, Matern-5/2).
Gram matrices are laid out point-major: block ``(i, j)`` of size ``d x d``
is ``k(x_i, x_j)``.

Outputs are standardized internally (per-output shift and scale). Everything
returned by the public methods is in original output units unless noted.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sl
from scipy.optimize import minimize as _scipy_minimize

logger = logging.getLogger(__name__)

FAMILIES = ("rbf", "matern32", "matern52")
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
FORMAT_VERSION = 1

_SQRT3 = np.sqrt(3.0)
_SQRT5 = np.sqrt(5.0)


class GPError(RuntimeError):
    """Numerical failure inside the GP machinery."""


class FactorizationError(GPError):
    """The Gram matrix stayed indefinite after the whole jitter ladder."""


class ExhaustedPointError(GPError):
    """Conditioning on a point whose predictive covariance has collapsed."""


class DegradedFitWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# kernels


def _correlation(family, r2):
    """Unit-variance stationary correlation as a function of squared distance."""
    if family == "rbf":
        return np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    if family == "matern32":
        return (1.0 + _SQRT3 * r) * np.exp(-_SQRT3 * r)
    if family == "matern52":
        return (1.0 + _SQRT5 * r + 5.0 / 3.0 * r2) * np.exp(-_SQRT5 * r)
    raise ValueError(f"unknown kernel family {family!r}")


def _correlation_dlog_factor(family, r2):
    """``g`` with d k / d log(l_i) = g * (delta_i / l_i)**2."""
    if family == "rbf":
        return np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    if family == "matern32":
        return 3.0 * np.exp(-_SQRT3 * r)
    if family == "matern52":
        return 5.0 / 3.0 * (1.0 + _SQRT5 * r) * np.exp(-_SQRT5 * r)
    raise ValueError(f"unknown kernel family {family!r}")


@dataclass(frozen=True, eq=False)
class LatentKernel:
    family: str
    lengthscales: np.ndarray
    variance: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"kernel family must be one of {FAMILIES}, got {self.family!r}")
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if np.any(ls <= 0) or not np.all(np.isfinite(ls)):
            raise ValueError("lengthscales must be strictly positive")
        if not self.variance > 0:
            raise ValueError("latent variance must be strictly positive")

    def correlation(self, X1, X2):
        diff = (X1[:, None, :] - X2[None, :, :]) / self.lengthscales
        return _correlation(self.family, np.einsum("ijk,ijk->ij", diff, diff))


@dataclass(frozen=True, eq=False)
class KernelSpec:
    """LMC kernel: latent kernels, ``Q x d`` mixing matrix and per-output nugget.

    The nugget is expressed in standardized output units.
    """

    latent: tuple
    mixing: np.ndarray
    nugget: np.ndarray

    def __post_init__(self):
        latent = tuple(self.latent)
        object.__setattr__(self, "latent", latent)
        mixing = np.atleast_2d(np.asarray(self.mixing, dtype=float))
        object.__setattr__(self, "mixing", mixing)
        nugget = np.atleast_1d(np.asarray(self.nugget, dtype=float))
        object.__setattr__(self, "nugget", nugget)
        if len(latent) == 0:
            raise ValueError("at least one latent kernel is required")
        if mixing.shape[0] != len(latent):
            raise ValueError("mixing must have one row per latent kernel")
        if nugget.shape != (mixing.shape[1],):
            raise ValueError("nugget must have one entry per output")
        if np.any(nugget < 0):
            raise ValueError("nugget must be non-negative")
        dims = {lk.lengthscales.size for lk in latent}
        if len(dims) != 1:
            raise ValueError("all latent kernels must share the input dimension")

    @classmethod
    def default(cls, p, d, family="rbf", lengthscale=1.0, n_latent=None, nugget=0.0):
        """Independent-output start point: ``Q = d`` latents, identity mixing."""
        q = d if n_latent is None else n_latent
        ls = np.broadcast_to(np.asarray(lengthscale, dtype=float), (p,)).copy()
        latent = tuple(LatentKernel(family, ls.copy(), 1.0) for _ in range(q))
        mixing = np.eye(q, d)
        return cls(latent, mixing, np.full(d, float(nugget)))

    @property
    def p(self):
        return self.latent[0].lengthscales.size

    @property
    def d(self):
        return self.mixing.shape[1]

    @property
    def Q(self):
        return len(self.latent)

    def coregionalization(self):
        """``(Q, d, d)`` stack of ``var_q a_q a_q^T``."""
        a = self.mixing
        var = np.array([lk.variance for lk in self.latent])
        return var[:, None, None] * a[:, :, None] * a[:, None, :]

    def prior_cov(self):
        """``k(x, x)``; constant because every latent kernel is stationary."""
        return self.coregionalization().sum(axis=0)

    def matrix(self, X1, X2):
        """Point-major cross-covariance of shape ``(n1 * d, n2 * d)``."""
        X1 = np.atleast_2d(X1)
        X2 = np.atleast_2d(X2)
        n1, n2, d = X1.shape[0], X2.shape[0], self.d
        out = np.zeros((n1, d, n2, d))
        for lk, B in zip(self.latent, self.coregionalization()):
            out += lk.correlation(X1, X2)[:, None, :, None] * B[None, :, None, :]
        return out.reshape(n1 * d, n2 * d)

    def with_params(self, **changes):
        fields_ = {"latent": self.latent, "mixing": self.mixing, "nugget": self.nugget}
        fields_.update(changes)
        return KernelSpec(**fields_)

    def to_dict(self):
        return {
            "latent_kernels": [
                {"family": lk.family, "lengthscales": lk.lengthscales.tolist(),
                 "variance": float(lk.variance)}
                for lk in self.latent
            ],
            "mixing": self.mixing.tolist(),
            "nugget": self.nugget.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        latent = tuple(
            LatentKernel(item["family"], np.asarray(item["lengthscales"], float), float(item["variance"]))
            for item in doc["latent_kernels"]
        )
        return cls(latent, np.asarray(doc["mixing"], float), np.asarray(doc["nugget"], float))


# ---------------------------------------------------------------------------
# conditioned model


def _cholesky_with_jitter(K, inputs, d):
    try:
        return sl.cholesky(K, lower=True, check_finite=False), 0.0
    except np.linalg.LinAlgError:
        pass
    eye = np.eye(K.shape[0])
    for jitter in JITTER_LADDER:
        try:
            L = sl.cholesky(K + jitter * eye, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        logger.debug("Gram matrix needed jitter %.1e", jitter)
        return L, jitter
    i, j, dist = _closest_pair(inputs)
    raise FactorizationError(
        f"Gram matrix of size {K.shape[0]} is not positive definite even with jitter "
        f"{JITTER_LADDER[-1]:.0e}; inputs {i} and {j} are nearly identical "
        f"(distance {dist:.3e}); drop one or add a nugget"
    )


def _closest_pair(X):
    if X.shape[0] < 2:
        return 0, 0, 0.0
    D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    D[np.diag_indices_from(D)] = np.inf
    i, j = np.unravel_index(np.argmin(D), D.shape)
    return int(min(i, j)), int(max(i, j)), float(D[i, j])


def _symmetrize(C):
    return 0.5 * (C + np.swapaxes(C, -1, -2))


def _psd_clamp(C):
    """Clip tiny negative eigenvalues of a (stack of) symmetric matrices to zero."""
    C = _symmetrize(C)
    w, V = np.linalg.eigh(C)
    if np.all(w >= 0):
        return C
    w = np.clip(w, 0.0, None)
    return np.einsum("...ij,...j,...kj->...ik", V, w, V)


@dataclass(frozen=True, eq=False)
class TrainedGP:
    """A GP conditioned on ``n`` input/output pairs.

    Construct with :func:`condition`. Instances are never mutated; adding a
    point returns a new object.
    """

    spec: KernelSpec
    inputs: np.ndarray
    outputs: np.ndarray
    shift: np.ndarray
    scale: np.ndarray
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    @property
    def n(self):
        return self.inputs.shape[0]

    @property
    def d(self):
        return self.spec.d

    @property
    def p(self):
        return self.spec.p

    @property
    def mean_const(self):
        return self.shift

    def _to_original(self, mean, cov):
        s = self.scale
        return mean * s + self.shift, cov * s[:, None] * s[None, :]

    def _solve_lower(self, B):
        return sl.solve_triangular(self.chol, B, lower=True, check_finite=False)

    def _normalized_predict(self, Xs):
        """Standardized-unit mean ``(M, d)``, cov ``(M, d, d)`` and ``L^-1 K(X, Xs)``."""
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        M, d = Xs.shape[0], self.d
        prior = self.spec.prior_cov()
        if self.n == 0:
            return np.zeros((M, d)), np.broadcast_to(prior, (M, d, d)).copy(), None
        Kx = self.spec.matrix(self.inputs, Xs)  # (n d, M d)
        mean = (Kx.T @ self.alpha).reshape(M, d)
        V = self._solve_lower(Kx).reshape(-1, M, d)
        cov = prior[None] - np.einsum("kmi,kmj->mij", V, V)
        return mean, _symmetrize(cov), V

    def predict(self, x):
        """Predictive mean ``(d,)`` and covariance ``(d, d)`` at one point."""
        mean, cov = self.predict_batch(np.atleast_2d(x))
        return mean[0], cov[0]

    @cached_property
    def _point_cache(self):
        lengthscales = np.array([lk.lengthscales for lk in self.spec.latent])
        families = [lk.family for lk in self.spec.latent]
        if len(set(families)) == 1:
            families = families[0]
        linv = sl.solve_triangular(self.chol, np.eye(self.chol.shape[0]), lower=True, check_finite=False)
        B = self.spec.coregionalization()
        return lengthscales, families, B.reshape(B.shape[0], -1), self.spec.prior_cov(), linv

    def predict_point(self, x):
        """Unclamped predictive mean and covariance at one point, original units.

        Same quantities as :meth:`predict` through a cached inverse factor;
        this is the hot path of posterior sampling.
        """
        lengthscales, families, B, prior, linv = self._point_cache
        s = self.scale
        if self.n == 0:
            return self.shift.copy(), prior * s[:, None] * s[None, :]
        diff = (self.inputs[None, :, :] - x) / lengthscales[:, None, :]
        r2 = np.einsum("qnp,qnp->qn", diff, diff)
        if isinstance(families, str):
            kq = _correlation(families, r2)
        else:
            kq = np.empty_like(r2)
            for q, fam in enumerate(families):
                kq[q] = _correlation(fam, r2[q])
        d = prior.shape[0]
        Kx = (kq.T @ B).reshape(-1, d)
        mean = Kx.T @ self.alpha
        V = linv @ Kx
        cov = prior - V.T @ V
        return mean * s + self.shift, cov * s[:, None] * s[None, :]

    def predict_batch(self, Xs, clamp=True):
        mean, cov, _ = self._normalized_predict(Xs)
        if clamp:
            cov = _psd_clamp(cov)
        return self._to_original(mean, cov)

    def predict_normalized(self, Xs):
        """Like :meth:`predict_batch` but in standardized units, unclamped."""
        mean, cov, _ = self._normalized_predict(Xs)
        return mean, cov

    def cross_cov(self, x_star, x):
        """Posterior cross-covariance ``C_n(x_star, x)`` of shape ``(d, d)``."""
        return self.cross_cov_batch(np.atleast_2d(x_star), x)[0]

    def cross_cov_batch(self, Xs, x):
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        x = np.atleast_2d(np.asarray(x, dtype=float))
        M, d = Xs.shape[0], self.d
        k = self.spec.matrix(Xs, x).reshape(M, d, d)
        if self.n > 0:
            Vs = self._solve_lower(self.spec.matrix(self.inputs, Xs)).reshape(-1, M, d)
            vx = self._solve_lower(self.spec.matrix(self.inputs, x))
            k = k - np.einsum("kmi,kj->mij", Vs, vx)
        s = self.scale
        return k * s[:, None] * s[None, :]

    def updated_cov(self, x_star, x):
        """Covariance at ``x_star`` after also conditioning on an output at ``x``.

        Independent of the (unknown) output value. Raises
        :class:`ExhaustedPointError` when the predictive covariance at ``x``
        has already collapsed to zero.
        """
        return self.snapshot(np.atleast_2d(x_star)).updated_cov(x)[0]

    def snapshot(self, Xs):
        """Precompute everything needed to evaluate covariance updates at ``Xs``."""
        return CovarianceSnapshot(self, np.atleast_2d(np.asarray(Xs, dtype=float)))

    def log_marginal_likelihood(self):
        """Log-marginal likelihood of the training outputs, in original units."""
        nd = self.alpha.size
        if nd == 0:
            return 0.0
        z = ((self.outputs - self.shift) / self.scale).ravel()
        lml = -0.5 * nd * np.log(2 * np.pi) - np.log(np.diag(self.chol)).sum() - 0.5 * z @ self.alpha
        return float(lml - self.n * np.log(self.scale).sum())

    def with_point(self, x, z):
        """Condition on one more pair, keeping the output standardization."""
        X = np.vstack([self.inputs, np.atleast_2d(x)])
        Z = np.vstack([self.outputs, np.atleast_2d(z)])
        return condition(self.spec, X, Z, transform=(self.shift, self.scale))

    def to_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "spec": self.spec.to_dict(),
            "inputs": self.inputs.tolist(),
            "outputs": self.outputs.tolist(),
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported GP document version {doc.get('format_version')!r}")
        spec = KernelSpec.from_dict(doc["spec"])
        d = spec.d
        X = np.asarray(doc["inputs"], float).reshape(-1, spec.p)
        Z = np.asarray(doc["outputs"], float).reshape(-1, d)
        return condition(spec, X, Z, transform=(np.asarray(doc["shift"], float), np.asarray(doc["scale"], float)))

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if not text.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


class CovarianceSnapshot:
    """Cached ``C_n`` at a fixed set of points for repeated one-point updates.

    ``updated_cov(x)`` returns, for every cached point ``u``,

        C_{n+1}(u | x) = C_n(u) - C_n(u, x) [C_n(x) + N]^{-1} C_n(u, x)^T

    where ``N`` is the nugget (zero for deterministic simulators). Everything
    is computed in standardized units and converted on the way out.
    """

    def __init__(self, gp, Xs):
        self.gp = gp
        self.points = Xs
        _, cov, V = gp._normalized_predict(Xs)
        self._cov = cov
        self._V = V
        s = gp.scale
        self._outer = s[:, None] * s[None, :]
        self._logdet_scale = 2.0 * np.log(s).sum()
        self._noise = np.diag(gp.spec.nugget)
        self._prior_trace = float(np.trace(gp.spec.prior_cov()))

    def __len__(self):
        return self.points.shape[0]

    def cov(self):
        return self._cov * self._outer

    def _cross(self, x):
        gp = self.gp
        M, d = len(self), gp.d
        x = np.atleast_2d(x)
        k = gp.spec.matrix(self.points, x).reshape(M, d, d)
        if self._V is not None:
            vx = gp._solve_lower(gp.spec.matrix(gp.inputs, x))
            k = k - np.einsum("kmi,kj->mij", self._V, vx)
        return k

    def _factor_at(self, x):
        _, cxx, _ = self.gp._normalized_predict(np.atleast_2d(x))
        cxx = _symmetrize(cxx[0]) + self._noise
        d = cxx.shape[0]
        trace = float(np.trace(cxx))
        if trace <= 1e-12 * self._prior_trace:
            raise ExhaustedPointError(
                f"predictive covariance at {np.asarray(x).ravel()} has collapsed (trace {trace:.2e}); "
                "the point is already known exactly, do not query it again"
            )
        delta = 1e-9 * trace / d
        try:
            return sl.cho_factor(cxx + delta * np.eye(d), lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise ExhaustedPointError(
                f"predictive covariance at {np.asarray(x).ravel()} is singular; do not re-query an exhausted point"
            ) from exc

    def updated_cov_normalized(self, x):
        cross = self._cross(x)  # (M, d, d): C_n(u_l, x)
        factor = self._factor_at(x)
        M, d = cross.shape[0], cross.shape[1]
        # C^{-1} C(u, x)^T for every l at once
        sol = sl.cho_solve(factor, np.swapaxes(cross, 1, 2).transpose(1, 0, 2).reshape(d, M * d),
                           check_finite=False)
        sol = sol.reshape(d, M, d).transpose(1, 0, 2)
        return _symmetrize(self._cov - np.einsum("mij,mjk->mik", cross, sol))

    def updated_cov(self, x):
        return self.updated_cov_normalized(x) * self._outer

    def det(self):
        return det_psd(self._cov) * np.exp(self._logdet_scale)

    def updated_det(self, x):
        return det_psd(self.updated_cov_normalized(x)) * np.exp(self._logdet_scale)


def det_psd(C):
    """Determinants of a stack of small symmetric PSD matrices, floored at zero."""
    d = C.shape[-1]
    if d == 1:
        det = C[..., 0, 0]
    elif d == 2:
        det = C[..., 0, 0] * C[..., 1, 1] - C[..., 0, 1] * C[..., 1, 0]
    else:
        det = np.linalg.det(C)
    return np.clip(det, 0.0, None)


def condition(spec, inputs, outputs, mean_const=None, normalize=True, transform=None):
    """Condition a zero-mean (after standardization) GP on training pairs.

    Parameters
    ----------
    spec : KernelSpec
    inputs : array_like, shape (n, p)
    outputs : array_like, shape (n, d)
    mean_const : array_like, shape (d,), optional
        Constant prior mean. Defaults to the per-output empirical mean, or
        zero when there is no data.
    normalize : bool
        Divide centred outputs by their per-output standard deviation.
    transform : tuple of arrays, optional
        Explicit ``(shift, scale)``; overrides ``mean_const``/``normalize``.
        Used when growing a design so that the units stay fixed.
    """
    d, p = spec.d, spec.p
    X = np.asarray(inputs, dtype=float).reshape(-1, p)
    Z = np.asarray(outputs, dtype=float).reshape(-1, d)
    if X.shape[0] != Z.shape[0]:
        raise ValueError("inputs and outputs must have the same number of rows")
    n = X.shape[0]
    if transform is not None:
        shift = np.asarray(transform[0], dtype=float).reshape(d)
        scale = np.asarray(transform[1], dtype=float).reshape(d)
    else:
        if mean_const is not None:
            shift = np.broadcast_to(np.asarray(mean_const, dtype=float), (d,)).copy()
        elif n > 0:
            shift = Z.mean(axis=0)
        else:
            shift = np.zeros(d)
        scale = np.ones(d)
        if normalize and n > 1:
            std = Z.std(axis=0)
            scale = np.where(std > 0, std, 1.0)
    if np.any(scale <= 0):
        raise ValueError("output scale must be positive")
    Zn = (Z - shift) / scale
    if n == 0:
        return TrainedGP(spec, X, Z, shift, scale, np.zeros((0, 0)), np.zeros(0))
    K = spec.matrix(X, X) + np.kron(np.eye(n), np.diag(spec.nugget))
    L, jitter = _cholesky_with_jitter(K, X, d)
    alpha = sl.cho_solve((L, True), Zn.ravel(), check_finite=False)
    return TrainedGP(spec, X, Z, shift, scale, L, alpha, jitter)


# ---------------------------------------------------------------------------
# hyperparameters


class _Packing:
    """Map between a KernelSpec and an unconstrained optimization vector.

    Free parameters: log lengthscales of every latent; the log variance of
    each latent when ``d == 1`` (mixing is then fixed at 1) or the mixing
    matrix when ``d > 1`` (variances then fixed); log nuggets if requested.
    """

    def __init__(self, spec, fit_nugget=False):
        self.spec = spec
        self.fit_nugget = fit_nugget
        self.fit_variance = spec.d == 1
        self.fit_mixing = spec.d > 1

    def pack(self, spec):
        parts = []
        for lk in spec.latent:
            parts.append(np.log(lk.lengthscales))
        if self.fit_variance:
            parts.append(np.log([lk.variance for lk in spec.latent]))
        if self.fit_mixing:
            parts.append(spec.mixing.ravel())
        if self.fit_nugget:
            parts.append(np.log(np.maximum(spec.nugget, 1e-300)))
        return np.concatenate(parts)

    def unpack(self, theta):
        spec, p, i = self.spec, self.spec.p, 0
        ls = []
        for _ in spec.latent:
            ls.append(np.exp(theta[i:i + p]))
            i += p
        if self.fit_variance:
            var = np.exp(theta[i:i + spec.Q])
            i += spec.Q
        else:
            var = [lk.variance for lk in spec.latent]
        if self.fit_mixing:
            mixing = theta[i:i + spec.Q * spec.d].reshape(spec.Q, spec.d)
            i += spec.Q * spec.d
        else:
            mixing = spec.mixing
        nugget = np.exp(theta[i:i + spec.d]) if self.fit_nugget else spec.nugget
        latent = tuple(LatentKernel(lk.family, l, float(v)) for lk, l, v in zip(spec.latent, ls, var))
        return KernelSpec(latent, mixing, nugget)

    def bounds(self, bounds):
        out = []
        for _ in self.spec.latent:
            lo, hi = bounds["lengthscale"]
            out += list(zip(np.log(np.broadcast_to(lo, (self.spec.p,))),
                            np.log(np.broadcast_to(hi, (self.spec.p,)))))
        if self.fit_variance:
            lo, hi = bounds["variance"]
            out += [(np.log(lo), np.log(hi))] * self.spec.Q
        if self.fit_mixing:
            out += [tuple(bounds["mixing"])] * (self.spec.Q * self.spec.d)
        if self.fit_nugget:
            lo, hi = bounds["nugget"]
            out += [(np.log(lo), np.log(hi))] * self.spec.d
        return np.array(out, dtype=float)


def default_bounds(inputs):
    """Hyperparameter box; lengthscale bounds scale with the input spread."""
    X = np.atleast_2d(inputs)
    span = np.ptp(X, axis=0) if X.shape[0] > 1 else np.ones(X.shape[1])
    span = np.where(span > 0, span, 1.0)
    return {
        "lengthscale": (1e-2 * span, 2e1 * span),
        "variance": (1e-4, 1e2),
        "mixing": (-5.0, 5.0),
        "nugget": (1e-10, 1e-1),
    }


def _gram_derivatives(spec, packing, X):
    """Gram matrix (no nugget) and its derivatives wrt every packed parameter."""
    n, d, p = X.shape[0], spec.d, spec.p
    B = spec.coregionalization()
    K = np.zeros((n * d, n * d))
    grads = []
    mixing_grads = []
    var_grads = []
    for q, lk in enumerate(spec.latent):
        diff = (X[:, None, :] - X[None, :, :]) / lk.lengthscales
        sq = diff ** 2
        r2 = sq.sum(-1)
        R = _correlation(lk.family, r2)
        K += np.kron(R, B[q])
        g = _correlation_dlog_factor(lk.family, r2)
        for i in range(p):
            grads.append(np.kron(g * sq[:, :, i], B[q]))
        if packing.fit_variance:
            var_grads.append(np.kron(R, B[q]))
        if packing.fit_mixing:
            a = spec.mixing[q]
            for j in range(d):
                e = np.zeros(d)
                e[j] = 1.0
                dB = lk.variance * (np.outer(e, a) + np.outer(a, e))
                mixing_grads.append(np.kron(R, dB))
    grads += var_grads
    if packing.fit_mixing:
        # packed order is q-major then j, matching the loop above
        grads += mixing_grads
    if packing.fit_nugget:
        for j in range(d):
            E = np.zeros((d, d))
            E[j, j] = spec.nugget[j]
            grads.append(np.kron(np.eye(n), E))
    return K, grads


def _lml_normalized(spec, X, Zn):
    n, d = X.shape[0], spec.d
    K = spec.matrix(X, X) + np.kron(np.eye(n), np.diag(spec.nugget))
    L, _ = _cholesky_with_jitter(K, X, d)
    z = Zn.ravel()
    alpha = sl.cho_solve((L, True), z, check_finite=False)
    return -0.5 * z.size * np.log(2 * np.pi) - np.log(np.diag(L)).sum() - 0.5 * z @ alpha


def lml_and_grad(theta, packing, X, Zn, method="analytic", fd_step=1e-5):
    """Standardized-unit LML and its gradient wrt the packed log-parameters.

    ``method="fd"`` uses central finite differences; it exists as a fallback
    and as a cross-check of the analytic path.
    """
    spec = packing.unpack(theta)
    if method == "fd":
        val = _lml_normalized(spec, X, Zn)
        grad = np.empty_like(theta)
        for i in range(theta.size):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += fd_step
            tm[i] -= fd_step
            grad[i] = (_lml_normalized(packing.unpack(tp), X, Zn)
                       - _lml_normalized(packing.unpack(tm), X, Zn)) / (2 * fd_step)
        return float(val), grad
    n, d = X.shape[0], spec.d
    K, dKs = _gram_derivatives(spec, packing, X)
    K = K + np.kron(np.eye(n), np.diag(spec.nugget))
    L, _ = _cholesky_with_jitter(K, X, d)
    z = Zn.ravel()
    alpha = sl.cho_solve((L, True), z, check_finite=False)
    val = -0.5 * z.size * np.log(2 * np.pi) - np.log(np.diag(L)).sum() - 0.5 * z @ alpha
    Kinv = sl.cho_solve((L, True), np.eye(z.size), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    grad = np.array([0.5 * np.sum(W * dK) for dK in dKs])
    return float(val), grad


@dataclass
class FitInfo:
    lml: float
    lml_start: float
    n_success: int
    n_starts: int
    degraded: bool


def fit_hyperparameters(spec0, inputs, outputs, bounds=None, restarts=2, seed=None,
                        fit_nugget=False, normalize=True, mean_const=None,
                        gradient="analytic", maxiter=200, return_info=False):
    """Maximize the log-marginal likelihood in log-parameter space.

    The first local search starts from ``spec0``; ``restarts`` further ones
    start uniformly in the (log) bounds. The best spec seen is returned, and
    it is never worse than ``spec0``.
    """
    X = np.asarray(inputs, dtype=float).reshape(-1, spec0.p)
    Z = np.asarray(outputs, dtype=float).reshape(-1, spec0.d)
    ref = condition(spec0, X, Z, mean_const=mean_const, normalize=normalize)
    Zn = (Z - ref.shift) / ref.scale
    packing = _Packing(spec0, fit_nugget=fit_nugget)
    box = packing.bounds(bounds if bounds is not None else default_bounds(X))
    rng = np.random.default_rng(seed)

    def objective(theta):
        try:
            val, grad = lml_and_grad(theta, packing, X, Zn, method=gradient)
        except (GPError, np.linalg.LinAlgError, FloatingPointError):
            return np.inf, np.zeros_like(theta)
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            return np.inf, np.zeros_like(theta)
        return -val, -grad

    theta0 = packing.pack(spec0)
    start_val = -objective(theta0)[0]
    best_theta, best_val = theta0, start_val
    starts = [np.clip(theta0, box[:, 0], box[:, 1])]
    for _ in range(restarts):
        starts.append(rng.uniform(box[:, 0], box[:, 1]))
    n_success = 0
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        for theta in starts:
            try:
                res = _scipy_minimize(objective, theta, jac=True, method="L-BFGS-B", bounds=box,
                                      options={"maxiter": maxiter})
            except (ValueError, np.linalg.LinAlgError) as exc:
                logger.debug("hyperparameter restart failed: %s", exc)
                continue
            if np.isfinite(res.fun):
                n_success += res.success
                if -res.fun > best_val:
                    best_theta, best_val = res.x, -res.fun
    degraded = n_success == 0
    if degraded:
        warnings.warn("every hyperparameter restart failed its line search; returning best spec seen",
                      DegradedFitWarning, stacklevel=2)
    spec = packing.unpack(best_theta)
    if not return_info:
        return spec
    shift_lml = -X.shape[0] * np.log(ref.scale).sum()
    return spec, FitInfo(best_val + shift_lml, start_val + shift_lml, n_success, len(starts), degraded)
