"""Design-quality metrics computed from posterior chains.

* IVAR: chain average of the predictive covariance determinant.
* Differential entropy of the posterior from a Gaussian KDE of the chain.
* Kullback-Leibler divergence to a reference posterior, both densities
  estimated by KDE and averaged over the current chain.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.signal import fftconvolve
from scipy.special import logsumexp

from .gp import det_psd

logger = logging.getLogger(__name__)

KDE_KERNEL = "gaussian"
KDE_BANDWIDTH_RULE = "scott"


class DegenerateSampleWarning(UserWarning):
    pass


class KdeModel:
    """Gaussian KDE with a full Scott's-rule bandwidth matrix.

    ``H = M**(-1/(p+4)) * Cov**(1/2)``. Evaluation whitens the data by
    ``H^{-1}`` so the kernel becomes a unit isotropic Gaussian. Small
    problems are summed exactly; for ``p <= 2`` large ones use linear
    binning on a grid of spacing ``grid_step`` (in bandwidth units) and an
    FFT convolution, falling back to exact sums wherever the binned density
    is too small to be trusted.

    Parameters
    ----------
    points : array_like, shape (M, p)
    box_scale : float, optional
        Length scale of the domain, used to floor a degenerate bandwidth at
        ``1e-6 * box_scale``. Defaults to the largest data range (or 1).
    """

    exact_limit = 4_000_000
    grid_step = 0.1
    grid_max = 2048
    _cutoff = 8.0

    def __init__(self, points, box_scale=None):
        X = np.asarray(points, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        M, p = X.shape
        if M < 2:
            raise ValueError("KDE needs at least two points")
        self.points = X
        factor = M ** (-1.0 / (p + 4))
        cov = np.atleast_2d(np.cov(X.T))
        if box_scale is None:
            span = float(np.ptp(X, axis=0).max())
            box_scale = span if span > 0 else 1.0
        floor = (1e-6 * box_scale) ** 2
        w, V = np.linalg.eigh(cov)
        self.degenerate = bool(np.any(w < floor))
        if self.degenerate:
            warnings.warn("sample covariance is (nearly) singular; bandwidth floored at 1e-6 box scale",
                          DegenerateSampleWarning, stacklevel=2)
            w = np.maximum(w, floor)
        self.bandwidth = factor * (V * np.sqrt(w)) @ V.T
        self._whiten = (V / (factor * np.sqrt(w))) @ V.T
        self._log_norm = -np.log(M) - 0.5 * p * np.log(2 * np.pi) - np.log(factor ** p * np.sqrt(w).prod())
        self._U = X @ self._whiten.T
        self._grid = None

    @property
    def M(self):
        return self._U.shape[0]

    @property
    def p(self):
        return self._U.shape[1]

    def logpdf(self, x, method="auto"):
        Y = np.asarray(x, dtype=float).reshape(-1, self.p)
        U = Y @ self._whiten.T
        if method == "exact" or (method == "auto" and (U.shape[0] * self.M <= self.exact_limit or self.p > 2)):
            return self._exact(U)
        return self._binned(U)

    def pdf(self, x, method="auto"):
        return np.exp(self.logpdf(x, method))

    def _exact(self, U, chunk=1024):
        out = np.empty(U.shape[0])
        sq_ref = (self._U ** 2).sum(1)
        for start in range(0, U.shape[0], chunk):
            block = U[start:start + chunk]
            d2 = (block ** 2).sum(1)[:, None] + sq_ref[None, :] - 2.0 * block @ self._U.T
            np.maximum(d2, 0.0, out=d2)
            out[start:start + chunk] = logsumexp(-0.5 * d2, axis=1)
        return out + self._log_norm

    def _build_grid(self):
        U, p = self._U, self.p
        lo = U.min(0) - self._cutoff
        hi = U.max(0) + self._cutoff
        step = np.maximum(self.grid_step, (hi - lo) / (self.grid_max - 3))
        shape = tuple(int(v) for v in np.ceil((hi - lo) / step) + 2)
        # linear binning: each point spreads unit mass over its 2**p grid corners
        f = (U - lo) / step
        i0 = np.floor(f).astype(int)
        frac = f - i0
        counts = np.zeros(int(np.prod(shape)))
        for corner in range(2 ** p):
            bits = np.array([(corner >> k) & 1 for k in range(p)])
            wgt = np.prod(np.where(bits == 1, frac, 1.0 - frac), axis=1)
            flat = np.ravel_multi_index((i0 + bits).T, shape)
            counts += np.bincount(flat, weights=wgt, minlength=counts.size)
        counts = counts.reshape(shape)
        half = [int(np.ceil(self._cutoff / s)) for s in step]
        axes = [np.arange(-h, h + 1) * s for h, s in zip(half, step)]
        mesh = np.meshgrid(*axes, indexing="ij")
        kernel = np.exp(-0.5 * sum(m ** 2 for m in mesh))
        dens = fftconvolve(counts, kernel, mode="same")
        self._grid = (lo, step, np.maximum(dens, 0.0))

    def _binned(self, U):
        if self._grid is None:
            self._build_grid()
        lo, step, dens = self._grid
        vals = map_coordinates(dens, ((U - lo) / step).T, order=1, mode="constant", cval=0.0)
        # tails: binned sums lose relative accuracy, recompute exactly
        low = vals < 1e-3
        out = np.empty(U.shape[0])
        out[~low] = np.log(vals[~low]) + self._log_norm
        if low.any():
            out[low] = self._exact(U[low])
        return out


def _samples(chain):
    return chain.samples if hasattr(chain, "samples") else np.asarray(chain, dtype=float)


def ivar(gp, chain):
    """Chain average of ``|C_n(X_l)|`` (original output units)."""
    X = _samples(chain)
    if X.shape[0] == 0:
        raise ValueError("cannot average over an empty chain")
    _, cov = gp.predict_normalized(X)
    dets = det_psd(cov) * np.prod(gp.scale) ** 2
    return float(dets.mean())


def entropy_kde(chain, box_scale=None):
    """Differential entropy estimate ``-mean(log p_hat(X_l))``."""
    X = _samples(chain)
    if X.shape[0] < 1000:
        raise ValueError("entropy estimate needs at least 1000 chain samples")
    kde = KdeModel(X, box_scale=box_scale)
    return float(-kde.logpdf(X).mean())


def kl_kde(chain_n, chain_ref, box_scale=None):
    """KL(p_n || p_ref) averaged over ``chain_n``; reported raw, may be negative."""
    Xn, Xr = _samples(chain_n), _samples(chain_ref)
    if Xn.shape[0] == 0 or Xr.shape[0] == 0:
        raise ValueError("both chains must be non-empty")
    kn = KdeModel(Xn, box_scale=box_scale)
    kr = KdeModel(Xr, box_scale=box_scale)
    value = float((kn.logpdf(Xn) - kr.logpdf(Xn)).mean())
    if value < 0:
        logger.info("KDE KL estimate is negative (%.3g); reported unclamped", value)
    return value


@dataclass
class MetricsRecord:
    iteration: int
    ivar: float
    entropy: float
    kl: float
    acceptance_rate: float
    iat_max: float

    def as_dict(self):
        return asdict(self)


def compute_metrics(iteration, gp, chain, ref_chain=None, box_scale=None, kde_max_samples=None):
    """All metrics for one design iteration. Nothing passed in is modified."""
    h = ivar(gp, chain)
    kde_chain = chain.strided(kde_max_samples) if kde_max_samples else chain
    ref = ref_chain.strided(kde_max_samples) if (ref_chain is not None and kde_max_samples) else ref_chain
    s = entropy_kde(kde_chain, box_scale) if len(kde_chain) >= 1000 else float("nan")
    kl = kl_kde(kde_chain, ref, box_scale) if ref is not None else float("nan")
    iat = getattr(chain, "iat", None)
    iat_max = float(np.nanmax(iat)) if iat is not None and np.any(np.isfinite(iat)) else float("nan")
    return MetricsRecord(iteration, h, s, kl, float(getattr(chain, "acceptance_rate", np.nan)), iat_max)
