"""Sequential design strategies: IP-SUR, CSQ, D-optimal and I-optimal.

Every strategy reduces to one bounded global minimization with the annealer
of :mod:`ipsur.optim`. Criterion objects capture an immutable GP and chain
snapshot, so each optimizer evaluation only pays for the one-point
covariance update.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import logsumexp
from scipy.stats import qmc

from .gp import ExhaustedPointError, det_psd
from .optim import AnnealConfig, minimize

logger = logging.getLogger(__name__)

KINDS = ("IPSUR", "CSQ", "DOPT", "IOPT")
ACQUISITION_MAX_SAMPLES = 2000
CSQ_PENALTY = 1e6
CSQ_TOLERANCE = 1e-6


@dataclass(frozen=True)
class DesignStrategy:
    """A design strategy and its optimizer budget.

    Parameters
    ----------
    kind : {"IPSUR", "CSQ", "DOPT", "IOPT"}
    h : float, optional
        CSQ log-posterior gap defining the admissible set; required for CSQ.
    beta : float
        IP-SUR tempering exponent in ``[0, 1]``; 1 is the untempered criterion.
    m_int : int
        Number of integration nodes for IOPT (at least 64).
    optim : AnnealConfig
    """

    kind: str
    h: float | None = None
    beta: float = 1.0
    m_int: int = 256
    optim: AnnealConfig = field(default_factory=AnnealConfig)

    def __post_init__(self):
        kind = str(self.kind).upper()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {KINDS}")
        if kind == "CSQ" and (self.h is None or not self.h > 0):
            raise ValueError("CSQ needs a positive gap h")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.m_int < 64:
            raise ValueError("m_int must be at least 64")

    @property
    def label(self):
        if self.kind == "CSQ":
            return f"CSQ(h={self.h:g})"
        if self.kind == "IPSUR" and self.beta != 1.0:
            return f"IPSUR(beta={self.beta:g})"
        return self.kind

    def to_dict(self):
        doc = {"kind": self.kind}
        if self.kind == "CSQ":
            doc["h"] = self.h
        if self.kind == "IPSUR":
            doc["beta"] = self.beta
        if self.kind == "IOPT":
            doc["m_int"] = self.m_int
        doc["optim"] = asdict(self.optim)
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        optim = AnnealConfig(**doc.pop("optim", {}))
        unknown = set(doc) - {"kind", "h", "beta", "m_int"}
        if unknown:
            raise ValueError(f"unknown strategy fields {sorted(unknown)}")
        return cls(optim=optim, **doc)


@dataclass
class SelectionRecord:
    strategy: str
    iteration: int
    point: np.ndarray
    criterion: float
    nfev: int
    wall_time: float

    def to_dict(self):
        doc = asdict(self)
        doc["point"] = np.asarray(self.point).tolist()
        return doc

    def to_json(self):
        return json.dumps(self.to_dict())


def _chain_samples(chain, max_samples):
    """Evenly strided samples and log densities (at most ``max_samples``)."""
    if hasattr(chain, "strided"):
        sub = chain.strided(max_samples)
        if len(sub) < len(chain):
            logger.debug("acquisition uses every %d-th of %d chain samples", -(-len(chain) // max_samples), len(chain))
        return sub.samples, sub.log_densities
    X = np.atleast_2d(np.asarray(chain, dtype=float))
    stride = max(1, -(-X.shape[0] // max_samples))
    return X[::stride], None


class IpsurCriterion:
    """Chain estimate of the expected post-acquisition IVAR.

    ``F(x) = sum_l w_l |C_{n+1}(X_l | x)|`` with ``w_l = 1/L`` for
    ``beta = 1``. Otherwise self-normalized weights proportional to
    ``L_n(y | X_l)**(beta - 1)`` retarget the chain to the tempered
    posterior; under a uniform prior the chain's stored log posterior equals
    the log-likelihood up to a constant, which cancels.
    """

    def __init__(self, gp, chain, beta=1.0, max_samples=ACQUISITION_MAX_SAMPLES):
        if not 0.0 <= beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        X, logd = _chain_samples(chain, max_samples)
        if X.shape[0] == 0:
            raise ValueError("cannot evaluate the criterion on an empty chain")
        self.beta = beta
        self.samples = X
        self.snapshot = gp.snapshot(X)
        if beta == 1.0:
            self.weights = None
        else:
            if logd is None:
                raise ValueError("tempering needs the chain's log densities")
            logw = (beta - 1.0) * logd
            self.weights = np.exp(logw - logsumexp(logw))
        self.baseline = self._average(self.snapshot.det())

    def _average(self, dets):
        if self.weights is None:
            return float(dets.mean())
        return float(self.weights @ dets)

    def __call__(self, x):
        try:
            dets = self.snapshot.updated_det(np.asarray(x, dtype=float))
        except ExhaustedPointError:
            # querying a known point brings no information
            return self.baseline
        return self._average(dets)


def ipsur_criterion(gp, chain, x, beta=1.0, max_samples=ACQUISITION_MAX_SAMPLES):
    """Estimated IVAR after acquiring ``x`` (see :class:`IpsurCriterion`)."""
    return IpsurCriterion(gp, chain, beta, max_samples)(x)


def _minimize_timed(objective, box, optim):
    t0 = time.perf_counter()
    res = minimize(objective, box, optim)
    return res, time.perf_counter() - t0


def ipsur_select(gp, ip, chain, strategy, iteration=0):
    """Point minimizing the IP-SUR criterion over the prior box."""
    crit = IpsurCriterion(gp, chain, strategy.beta)
    res, wall = _minimize_timed(crit, ip.box, strategy.optim)
    return SelectionRecord(strategy.label, iteration, res.x, res.fun, res.nfev, wall)


def _logdet_objective(gp):
    def neg_logdet(x):
        _, cov = gp.predict_point(np.asarray(x, dtype=float))
        det = float(det_psd(cov[None])[0])
        return -np.log(det) if det > 0 else np.inf

    return neg_logdet


def d_optimal_select(gp, box, optim=None, iteration=0):
    """Point of largest predictive covariance determinant in ``box``.

    The returned criterion value is ``log |C_n(x)|``.
    """
    optim = AnnealConfig() if optim is None else optim
    if gp.n == 0:
        logger.warning("D-optimal criterion is constant for an untrained stationary GP; selection is arbitrary")
    res, wall = _minimize_timed(_logdet_objective(gp), box, optim)
    return SelectionRecord("DOPT", iteration, res.x, -res.fun, res.nfev, wall)


def csq_select(gp, ip, strategy, iteration=0, x_map=None):
    """Most uncertain point among those within log-posterior gap ``h`` of the MAP.

    The admissible set is enforced by the penalty ``1e6 * max(0, gap - h)``.
    The returned point is the best strictly admissible point evaluated
    (within ``1e-6``), which always exists because the MAP itself is one.
    The returned criterion value is ``log |C_n(x)|``.
    """
    optim = strategy.optim
    t0 = time.perf_counter()
    if x_map is None:
        x_map = ip.find_map(optim)
    lp_map = ip.log_posterior(x_map)
    neg_logdet = _logdet_objective(gp)
    best = {"x": np.asarray(x_map, dtype=float), "f": neg_logdet(x_map)}

    def objective(x):
        gap = lp_map - ip.log_posterior(x)
        violation = max(0.0, gap - strategy.h)
        f = neg_logdet(x)
        if violation <= CSQ_TOLERANCE and f < best["f"]:
            best["x"], best["f"] = np.array(x, dtype=float), f
        return f + CSQ_PENALTY * violation

    res = minimize(objective, ip.box, optim)
    wall = time.perf_counter() - t0
    return SelectionRecord(strategy.label, iteration, best["x"], -best["f"], res.nfev, wall)


def integration_nodes(box, m_int, seed=0):
    """Fixed scrambled Sobol nodes over ``box``."""
    box = np.asarray(box, dtype=float)
    sampler = qmc.Sobol(d=box.shape[0], scramble=True, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # balance warning for non powers of two
        unit = sampler.random(m_int)
    return qmc.scale(unit, box[:, 0], box[:, 1])


def i_optimal_select(gp, box, optim=None, m_int=256, iteration=0, nodes=None):
    """Point minimizing the uniform average of the updated covariance determinant."""
    optim = AnnealConfig() if optim is None else optim
    nodes = integration_nodes(box, m_int) if nodes is None else np.atleast_2d(nodes)
    crit = IpsurCriterion(gp, nodes, 1.0, max_samples=nodes.shape[0])
    res, wall = _minimize_timed(crit, box, optim)
    return SelectionRecord("IOPT", iteration, res.x, res.fun, res.nfev, wall)


def select(strategy, gp, ip, chain, iteration=0):
    """Dispatch to the selection rule of ``strategy``."""
    if strategy.kind == "IPSUR":
        return ipsur_select(gp, ip, chain, strategy, iteration)
    if strategy.kind == "CSQ":
        return csq_select(gp, ip, strategy, iteration)
    if strategy.kind == "DOPT":
        rec = d_optimal_select(gp, ip.box, strategy.optim, iteration)
    else:
        rec = i_optimal_select(gp, ip.box, strategy.optim, strategy.m_int, iteration)
    rec.strategy = strategy.label
    return rec
