"""Surrogate-based Bayesian inverse problem with a uniform prior on a box.

The likelihood fuses surrogate (epistemic) and observation (aleatoric)
uncertainty through the effective covariance ``C_n(x) + C_obs / N``. The
exact ``N * d`` dimensional Kronecker-form likelihood is available as a
check, never as the working path. The posterior normalizing constant is
never computed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sl

from .optim import AnnealConfig, minimize

FULL_LIKELIHOOD_MAX_SIZE = 200


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """``N`` noisy observations ``y`` (rows) with noise covariance ``c_obs``."""

    y: np.ndarray
    c_obs: np.ndarray

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        c = np.atleast_2d(np.asarray(self.c_obs, dtype=float))
        if c.shape != (y.shape[1], y.shape[1]):
            raise ValueError(f"c_obs must be {y.shape[1]}x{y.shape[1]}, got {c.shape}")
        if not np.allclose(c, c.T, rtol=1e-12, atol=0.0):
            raise ValueError("c_obs must be symmetric")
        try:
            np.linalg.cholesky(c)
        except np.linalg.LinAlgError as exc:
            raise ValueError("c_obs must be positive definite") from exc
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "c_obs", c)

    @property
    def N(self):
        return self.y.shape[0]

    @property
    def d(self):
        return self.y.shape[1]

    @property
    def y_bar(self):
        return self.y.mean(axis=0)

    def to_files(self, csv_path, sidecar_path, box=None):
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"y{j + 1}" for j in range(self.d)])
            writer.writerows(self.y.tolist())
        doc = {"c_obs": self.c_obs.tolist()}
        if box is not None:
            doc["box"] = np.asarray(box).tolist()
        with open(sidecar_path, "w") as fh:
            json.dump(doc, fh, indent=2)

    @classmethod
    def from_files(cls, csv_path, sidecar_path):
        """Load observations from CSV (header ``y1..yd``) and a JSON sidecar.

        Returns ``(obs, box)``; ``box`` is ``None`` when the sidecar has none.
        """
        with open(csv_path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        expected = [f"y{j + 1}" for j in range(len(header))]
        if header != expected:
            raise ValueError(f"observation CSV header must be {expected}, got {header}")
        y = np.array([[float(v) for v in row] for row in body if row], dtype=float)
        with open(sidecar_path) as fh:
            doc = json.load(fh)
        box = np.asarray(doc["box"], dtype=float) if "box" in doc else None
        return cls(y.reshape(-1, len(header)), np.asarray(doc["c_obs"], dtype=float)), box


def _gauss_logdens_unnormalized(r, C):
    """``-0.5 log|C| - 0.5 r^T C^{-1} r`` for small dense ``C``."""
    if C.shape == (2, 2):
        det = C[0, 0] * C[1, 1] - C[0, 1] * C[1, 0]
        if det <= 0:
            raise np.linalg.LinAlgError("effective covariance is not positive definite")
        quad = (C[1, 1] * r[0] ** 2 - 2 * C[0, 1] * r[0] * r[1] + C[0, 0] * r[1] ** 2) / det
        return -0.5 * np.log(det) - 0.5 * quad
    L = np.linalg.cholesky(C)
    w = sl.solve_triangular(L, r, lower=True, check_finite=False)
    return -np.log(np.diag(L)).sum() - 0.5 * w @ w


class InverseProblem:
    """Posterior ``p_n(x | y)`` induced by a trained surrogate.

    Parameters
    ----------
    obs : ObservationSet
    gp : TrainedGP
    box : array_like, shape (p, 2)
        Support of the uniform prior.
    """

    def __init__(self, obs, gp, box):
        box = np.asarray(box, dtype=float)
        if box.ndim != 2 or box.shape[1] != 2 or np.any(box[:, 1] <= box[:, 0]):
            raise ValueError("prior box must be a (p, 2) array with positive widths")
        if gp.d != obs.d:
            raise ValueError("surrogate output dimension does not match the observations")
        self.obs = obs
        self.gp = gp
        self.box = box
        self._lo, self._hi = box[:, 0].copy(), box[:, 1].copy()
        self._y_bar = obs.y_bar
        self._c_obs_N = obs.c_obs / obs.N
        self._log_prior = -float(np.log(np.ptp(box, axis=1)).sum())

    @property
    def p(self):
        return self.box.shape[0]

    def with_gp(self, gp):
        return InverseProblem(self.obs, gp, self.box)

    def in_box(self, x):
        x = np.asarray(x)
        return bool(((x >= self._lo) & (x <= self._hi)).all())

    def log_prior(self, x):
        return self._log_prior if self.in_box(x) else -np.inf

    def effective_cov(self, x):
        _, cov = self.gp.predict(x)
        return cov + self._c_obs_N

    def log_likelihood(self, x):
        """Simplified log-likelihood, up to an ``x``-independent constant."""
        mean, cov = self.gp.predict_point(np.asarray(x, dtype=float))
        return float(_gauss_logdens_unnormalized(self._y_bar - mean, cov + self._c_obs_N))

    def log_likelihood_batch(self, X):
        mean, cov = self.gp.predict_batch(X)
        C = cov + self._c_obs_N
        r = self._y_bar - mean
        L = np.linalg.cholesky(C)
        w = np.linalg.solve(L, r[..., None])[..., 0]
        return -np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(-1) - 0.5 * (w ** 2).sum(-1)

    def log_likelihood_full(self, x):
        """Exact Kronecker-form log-density of all ``N * d`` observations.

        Observations are flattened output-major (``y.T.ravel()``), matching
        ``C_tot = C_n(x) kron U_N + C_obs kron I_N``. Only meant for checks.
        """
        N, d = self.obs.N, self.obs.d
        if N * d > FULL_LIKELIHOOD_MAX_SIZE:
            raise ValueError(
                f"full likelihood is an O((Nd)^3) check; N*d={N * d} exceeds {FULL_LIKELIHOOD_MAX_SIZE}"
            )
        mean, cov = self.gp.predict(x)
        C_tot = np.kron(cov, np.ones((N, N))) + np.kron(self.obs.c_obs, np.eye(N))
        r = self.obs.y.T.ravel() - np.repeat(mean, N)
        L = np.linalg.cholesky(C_tot)
        w = sl.solve_triangular(L, r, lower=True)
        return float(-0.5 * N * d * np.log(2 * np.pi) - np.log(np.diag(L)).sum() - 0.5 * w @ w)

    def log_posterior(self, x):
        """Unnormalized log posterior; ``-inf`` outside the prior box."""
        x = np.asarray(x, dtype=float)
        if not self.in_box(x):
            return -np.inf
        return self.log_likelihood(x) + self._log_prior

    def log_posterior_batch(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.full(X.shape[0], -np.inf)
        inside = np.all((X >= self.box[:, 0]) & (X <= self.box[:, 1]), axis=1)
        if inside.any():
            out[inside] = self.log_likelihood_batch(X[inside]) + self._log_prior
        return out

    def find_map(self, optim=None):
        """Maximum a posteriori point found by the global optimizer (best seen)."""
        optim = AnnealConfig() if optim is None else optim
        res = minimize(lambda x: -self.log_posterior(x), self.box, optim)
        return res.x
