"""Bounded global minimization by simulated annealing with a local polish.

Temperatures follow the logarithmic schedule ``T_k = C / log(k + e)``.
Proposals are Gaussian steps whose scale shrinks with the temperature and
which are reflected back into the box. Each annealing run finishes with a
coordinate-wise golden-section descent from its best point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

logger = logging.getLogger(__name__)

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class OptimizerError(RuntimeError):
    pass


@dataclass
class AnnealConfig:
    """Budget and schedule for :func:`minimize`.

    ``max_evals`` counts every objective call: probes, annealing and polish.
    ``C`` is the cooling constant; ``None`` derives it from the spread of the
    objective over ``n_probe`` space-filling probes (``c_factor`` times the
    range).
    """

    max_evals: int = 1000
    n_restarts: int = 1
    polish_evals: int = 100
    C: float | None = None
    c_factor: float = 5.0
    n_probe: int = 50
    step0: float = 0.5
    step_power: float = 1.0
    seed: int | None = 0

    def __post_init__(self):
        if self.max_evals < 1:
            raise ValueError("max_evals must be at least 1")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be at least 1")
        if self.C is not None and not self.C > 0:
            raise ValueError("cooling constant must be positive")

    def temperature(self, k, C):
        return C / math.log(k + math.e)


@dataclass
class AnnealResult:
    x: np.ndarray
    fun: float
    nfev: int
    C: float = float("nan")
    n_nan: int = 0
    history: list = field(default_factory=list, repr=False)

    def __iter__(self):
        return iter((self.x, self.fun, self.nfev))


class _Budgeted:
    """Objective wrapper: counts calls, tracks the best point, drops NaNs."""

    def __init__(self, f, max_evals, keep_history):
        self.f = f
        self.max_evals = max_evals
        self.nfev = 0
        self.n_nan = 0
        self.best_x = None
        self.best_f = np.inf
        self.history = [] if keep_history else None

    @property
    def exhausted(self):
        return self.nfev >= self.max_evals

    def __call__(self, x):
        self.nfev += 1
        val = float(self.f(x))
        if math.isnan(val):
            self.n_nan += 1
            logger.debug("objective returned NaN at %s; candidate rejected", x)
            val = np.inf
        if self.history is not None:
            self.history.append(val)
        if val < self.best_f or self.best_x is None:
            self.best_f = val
            self.best_x = np.array(x, dtype=float)
        return val


def _reflect(x, lo, hi):
    width = hi - lo
    y = np.mod(x - lo, 2.0 * width)
    y = np.where(y > width, 2.0 * width - y, y)
    return lo + y


def _golden_polish(obj, x, fx, lo, hi, width, budget):
    """Cyclic coordinate golden-section descent; stops when ``budget`` is spent."""
    x = x.copy()
    used = 0
    w = width.copy()
    while used < budget and np.any(w > 1e-12 * (hi - lo)):
        improved = False
        for i in range(x.size):
            if used >= budget:
                break
            a, b = max(lo[i], x[i] - w[i]), min(hi[i], x[i] + w[i])
            c, e = b - _INVPHI * (b - a), a + _INVPHI * (b - a)

            def at(t):
                y = x.copy()
                y[i] = t
                return obj(y)

            fc, fe = at(c), at(e)
            used += 2
            while used < budget and b - a > 1e-10 * (hi[i] - lo[i]):
                if fc < fe:
                    b, e, fe = e, c, fc
                    c = b - _INVPHI * (b - a)
                    fc = at(c)
                else:
                    a, c, fc = c, e, fe
                    e = a + _INVPHI * (b - a)
                    fe = at(e)
                used += 1
                if used >= budget or (b - a) < 1e-3 * w[i]:
                    break
            t, ft = (c, fc) if fc < fe else (e, fe)
            if ft < fx:
                x[i], fx = t, ft
                improved = True
        w = w * (0.5 if improved else 0.1)
    return x, fx, used


def minimize(f, box, cfg=None):
    """Globally minimize ``f`` over an axis-aligned ``box`` (shape ``(p, 2)``).

    Returns the best point ever evaluated, its value and the number of
    evaluations. NaN values are treated as rejected candidates; if every
    evaluation is NaN an :class:`OptimizerError` is raised.
    """
    cfg = AnnealConfig() if cfg is None else cfg
    box = np.asarray(box, dtype=float)
    lo, hi = box[:, 0], box[:, 1]
    if np.any(hi <= lo):
        raise ValueError("box must have positive width on every axis")
    p = box.shape[0]
    span = hi - lo
    rng = np.random.default_rng(cfg.seed)
    obj = _Budgeted(f, cfg.max_evals, keep_history=True)

    n_probe = min(cfg.n_probe, cfg.max_evals)
    probes = qmc.scale(qmc.LatinHypercube(d=p, seed=rng).random(n_probe), lo, hi)
    probe_vals = np.array([obj(x) for x in probes])
    finite = np.isfinite(probe_vals)

    if cfg.C is not None:
        C = cfg.C
    elif finite.sum() >= 2:
        C = cfg.c_factor * float(np.ptp(probe_vals[finite]))
    else:
        C = 0.0
    if not C > 0:
        C = cfg.c_factor * max(abs(obj.best_f), 1.0) if np.isfinite(obj.best_f) else 1.0
    logger.debug("annealing cooling constant C=%.4g", C)

    remaining = cfg.max_evals - obj.nfev
    order = np.argsort(np.where(finite, probe_vals, np.inf))
    per_run = remaining // cfg.n_restarts
    for r in range(cfg.n_restarts):
        if obj.exhausted:
            break
        budget = per_run if r < cfg.n_restarts - 1 else cfg.max_evals - obj.nfev
        polish = min(cfg.polish_evals, budget // 4)
        anneal = budget - polish
        start = order[r % len(order)]
        x, fx = probes[start].copy(), probe_vals[start]
        if not np.isfinite(fx):
            x = rng.uniform(lo, hi)
            fx = obj(x)
            anneal -= 1
        run_best_x, run_best_f = x.copy(), fx
        T1 = cfg.temperature(1, C)
        for k in range(1, anneal + 1):
            if obj.exhausted:
                break
            T = cfg.temperature(k, C)
            scale = cfg.step0 * span * (T / T1) ** cfg.step_power
            cand = _reflect(x + scale * rng.standard_normal(p), lo, hi)
            fc = obj(cand)
            if fc <= fx or (np.isfinite(fc) and rng.random() < math.exp(-(fc - fx) / T)):
                x, fx = cand, fc
                if fx < run_best_f:
                    run_best_x, run_best_f = x.copy(), fx
        polish = min(polish, cfg.max_evals - obj.nfev)
        if polish > 0 and np.isfinite(run_best_f):
            T = cfg.temperature(max(anneal, 1), C)
            width = np.maximum(cfg.step0 * span * (T / T1) ** cfg.step_power, 1e-6 * span) * 3.0
            _golden_polish(obj, run_best_x, run_best_f, lo, hi, width, polish)

    if obj.best_x is None or not np.isfinite(obj.best_f):
        raise OptimizerError(f"objective was NaN or infinite at all {obj.nfev} evaluated points")
    return AnnealResult(obj.best_x, obj.best_f, obj.nfev, C, obj.n_nan, obj.history)
