"""Adaptive Metropolis sampling (Haario et al. style) and chain diagnostics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class SamplerError(RuntimeError):
    pass


class InvalidStartError(SamplerError):
    pass


class StuckChainError(SamplerError):
    pass


@dataclass(eq=False)
class PosteriorChain:
    """Post-burn-in samples of a Markov chain and their log densities."""

    samples: np.ndarray
    log_densities: np.ndarray
    acceptance_rate: float
    burn_in: int
    n_total: int
    iat: np.ndarray = field(default=None)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def p(self):
        return self.samples.shape[1]

    def strided(self, max_samples):
        """Evenly strided sub-chain with at most ``max_samples`` points."""
        L = len(self)
        if L <= max_samples:
            return self
        stride = int(math.ceil(L / max_samples))
        return PosteriorChain(self.samples[::stride], self.log_densities[::stride],
                              self.acceptance_rate, self.burn_in, self.n_total, self.iat)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i + 1}" for i in range(self.p)] + ["logpdf"])
            for x, lp in zip(self.samples, self.log_densities):
                writer.writerow([repr(float(v)) for v in x] + [repr(float(lp))])

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, :-1], data[:, -1], float("nan"), 0, data.shape[0])


def adaptive_metropolis(logpdf, box, L, seed=None, init=None, adapt_start=200, eps=1e-6,
                        burn_in_fraction=0.2, init_cov=None, refresh_every=10, compute_iat=True):
    """Run an Adaptive Metropolis chain of ``L`` total steps.

    After ``adapt_start`` draws the Gaussian proposal covariance becomes
    ``(2.38**2 / p) * (Cov(history) + eps * I)``. Proposals that leave
    ``box`` are rejected without evaluating ``logpdf``. The first
    ``burn_in_fraction * L`` states are discarded.

    Parameters
    ----------
    logpdf : callable
        Unnormalized log density of one point.
    box : array_like, shape (p, 2)
    L : int
        Total number of chain states (including burn-in), at least 1000.
    seed : int, optional
    init : array_like, optional
        Starting point, box centre by default.
    init_cov : array_like, optional
        Proposal covariance before adaptation; ``(span / 20)**2`` diagonal
        by default.
    refresh_every : int
        The running covariance is updated at every step but only
        re-factorized every ``refresh_every`` steps.
    """
    box = np.asarray(box, dtype=float)
    lo, hi = box[:, 0], box[:, 1]
    p = box.shape[0]
    if L < 1000:
        raise ValueError("chain length L must be at least 1000")
    x = box.mean(axis=1) if init is None else np.asarray(init, dtype=float).copy()
    if np.any(x < lo) or np.any(x > hi):
        raise InvalidStartError(f"initial point {x} lies outside the box")
    lp = float(logpdf(x))
    if not np.isfinite(lp):
        raise InvalidStartError(f"log density at the initial point {x} is {lp}")
    rng = np.random.default_rng(seed)
    span = hi - lo
    C0 = np.diag((span / 20.0) ** 2) if init_cov is None else np.asarray(init_cov, dtype=float)
    sd = 2.38 ** 2 / p
    chol = np.linalg.cholesky(C0)

    chain = np.empty((L, p))
    logd = np.empty(L)
    # running mean / scatter of all states so far (Welford)
    mean = np.zeros(p)
    scatter = np.zeros((p, p))
    accepted = 0
    stuck = 0
    stuck_limit = 10 * p * 1000
    eye = np.eye(p)
    z = rng.standard_normal((L, p))
    u = np.log(rng.random(L))
    for t in range(L):
        if t > 0:
            cand = x + chol @ z[t]
            if ((cand >= lo) & (cand <= hi)).all():
                lc = float(logpdf(cand))
                if lc - lp >= u[t]:
                    x, lp = cand, lc
                    accepted += 1
                    stuck = 0
                else:
                    stuck += 1
            else:
                stuck += 1
            if stuck >= stuck_limit:
                raise StuckChainError(
                    f"no proposal accepted in {stuck} consecutive steps at t={t} "
                    f"(acceptance so far {accepted / t:.3g}, state {x}, log density {lp})"
                )
        chain[t] = x
        logd[t] = lp
        n = t + 1
        delta = x - mean
        mean += delta / n
        scatter += np.outer(delta, x - mean)
        if n >= adapt_start and (n - adapt_start) % refresh_every == 0:
            cov = scatter / (n - 1)
            try:
                chol = np.linalg.cholesky(sd * (cov + eps * eye))
            except np.linalg.LinAlgError:
                logger.debug("proposal covariance not PD at t=%d; keeping previous", t)

    burn = int(burn_in_fraction * L)
    acc = accepted / (L - 1)
    out = PosteriorChain(chain[burn:], logd[burn:], acc, burn, L)
    if compute_iat:
        out.iat = estimate_iat(out)
    return out


def _autocovariance(x):
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n] / n
    return acov


def estimate_iat(chain):
    """Integrated autocorrelation time per coordinate.

    Uses Geyer's initial positive sequence: autocorrelations are summed in
    adjacent pairs until a pair sum turns non-positive. A constant coordinate
    yields NaN (undefined). Values are floored at 1.
    """
    X = chain.samples if isinstance(chain, PosteriorChain) else np.asarray(chain, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    taus = np.empty(X.shape[1])
    for j in range(X.shape[1]):
        acov = _autocovariance(X[:, j])
        if acov[0] <= 0 or not np.isfinite(acov[0]):
            taus[j] = np.nan
            continue
        rho = acov / acov[0]
        total = -1.0  # tau = -1 + 2 * sum of pair sums, pairs start at lag 0
        for k in range(0, rho.size - 1, 2):
            pair = rho[k] + rho[k + 1]
            if pair <= 0:
                break
            total += 2.0 * pair
        taus[j] = max(total, 1.0)
    return taus
