"""Replicated sequential-design campaigns: run, record, summarize, plot.

A campaign is a grid of (strategy, replicate) cells. Each cell starts from
the replicate's initial design and observations, then alternates posterior
sampling, metric evaluation, acquisition, one direct-model call and a GP
update. Rows are appended to a CSV record as soon as they exist, so an
interrupted campaign resumes by redoing only the unfinished cells.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import gp as gplib
from .design import DesignStrategy, select
from .inverse import InverseProblem
from .mcmc import adaptive_metropolis
from .metrics import compute_metrics
from .optim import AnnealConfig
from .testbeds import NuclearData, initial_design, make_observations, make_testbed

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORKERS_ENV = "IPSUR_WORKERS"
RECORD_NAME = "record.csv"
COLUMNS = [
    "schema_version", "strategy", "replicate", "seed", "iteration",
    "ivar", "entropy", "kl", "x_selected", "criterion",
    "acceptance_rate", "iat_max", "n_evals", "wall_time", "status",
]
METRICS = ("ivar", "entropy", "kl")
TIMING_COLUMNS = ("wall_time",)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a campaign.

    ``seeds`` gives one seed per replicate; when omitted the seeds are
    ``base_seed + r``. Observations, the initial design and the reference
    posterior depend only on the replicate seed, so every strategy of a
    replicate starts from the same state.
    """

    testbed: str
    strategies: list
    n0: int = 10
    n_iterations: int = 20
    n_replicates: int = 10
    L: int = 20_000
    seeds: list | None = None
    base_seed: int = 0
    output_dir: str = "results"
    reference_budget: int = 200
    testbed_params: dict = field(default_factory=dict)
    kernel_family: str = "matern52"
    refit_every_iteration: bool = True
    refit_restarts: int = 2
    kde_max_samples: int | None = 5000
    map_optim: AnnealConfig = field(default_factory=AnnealConfig)

    def __post_init__(self):
        if self.testbed not in ("banana", "bimodal", "neutron"):
            raise ConfigError(f"unknown test bed {self.testbed!r}")
        strategies = []
        for s in self.strategies:
            try:
                strategies.append(s if isinstance(s, DesignStrategy) else DesignStrategy.from_dict(s))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid strategy {s!r}: {exc}") from exc
        if not strategies:
            raise ConfigError("at least one strategy is required")
        labels = [s.label for s in strategies]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate strategies {labels}")
        self.strategies = strategies
        if isinstance(self.map_optim, dict):
            self.map_optim = AnnealConfig(**self.map_optim)
        if self.n_iterations < 0:
            raise ConfigError("n_iterations must be non-negative")
        if self.n0 < 2:
            raise ConfigError("n0 must be at least 2")
        if self.n_replicates < 1:
            raise ConfigError("n_replicates must be at least 1")
        if self.L < 1000:
            raise ConfigError("chain length L must be at least 1000")
        if self.reference_budget < 2:
            raise ConfigError("reference_budget must be at least 2")
        if self.seeds is None:
            self.seeds = [self.base_seed + r for r in range(self.n_replicates)]
        self.seeds = [int(s) for s in self.seeds]
        if len(self.seeds) != self.n_replicates:
            raise ConfigError("need exactly one seed per replicate")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("replicate seeds must be distinct")
        if self.kernel_family not in ("rbf", "matern32", "matern52"):
            raise ConfigError(f"unknown kernel family {self.kernel_family!r}")

    def to_dict(self):
        doc = asdict(self)
        doc["strategies"] = [s.to_dict() for s in self.strategies]
        doc["map_optim"] = asdict(self.map_optim)
        return doc

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown configuration fields {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        return cls.from_dict(doc)


# ---------------------------------------------------------------------------
# one replicate


def _child_seed(seed, *tags):
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def _testbed(cfg):
    params = dict(cfg.testbed_params)
    if "nuclear_data" in params and isinstance(params["nuclear_data"], dict):
        params["nuclear_data"] = NuclearData(**params["nuclear_data"])
    return make_testbed(cfg.testbed, **params)


def _fit(spec0, X, Z, restarts, seed):
    spec = gplib.fit_hyperparameters(spec0, X, Z, restarts=restarts, seed=seed)
    return gplib.condition(spec, X, Z)


def _initial_spec(cfg, tc):
    span = np.ptp(tc.model.box, axis=1)
    return gplib.KernelSpec.default(tc.model.p, tc.model.d, family=cfg.kernel_family,
                                    lengthscale=0.3 * span)


def _chain(ip, L, seed, optim):
    x_map = ip.find_map(optim)
    return adaptive_metropolis(ip.log_posterior, ip.box, L, seed=seed, init=x_map)


def reference_chain(cfg, seed, tc=None, obs=None):
    """Posterior chain from a GP trained on ``reference_budget`` LHS points."""
    tc = _testbed(cfg) if tc is None else tc
    obs = make_observations(tc.center, tc.c_obs, tc.N, _child_seed(seed, 1)) if obs is None else obs
    X = initial_design(tc.model.box, cfg.reference_budget, _child_seed(seed, 3))
    gp = _fit(_initial_spec(cfg, tc), X, tc.model(X), cfg.refit_restarts, _child_seed(seed, 4))
    ip = InverseProblem(obs, gp, tc.model.box)
    return _chain(ip, cfg.L, _child_seed(seed, 5), cfg.map_optim)


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def run_cell(cfg, strategy, replicate, ref=None, on_row=None):
    """Run one (strategy, replicate) campaign and return its rows.

    Errors end the cell: a final row with ``status = "failed: ..."`` is
    emitted and the exception is not propagated.
    """
    seed = cfg.seeds[replicate]
    tc = _testbed(cfg)
    box = tc.model.box
    box_scale = float(np.ptp(box, axis=1).max())
    obs = make_observations(tc.center, tc.c_obs, tc.N, _child_seed(seed, 1))
    rows = []

    def emit(row):
        rows.append(row)
        if on_row is not None:
            on_row(row)

    base = {"schema_version": SCHEMA_VERSION, "strategy": strategy.label, "replicate": replicate, "seed": seed}
    iteration = 0
    try:
        if ref is None:
            ref = reference_chain(cfg, seed, tc, obs)
        X = initial_design(box, cfg.n0, _child_seed(seed, 2))
        Z = tc.model(X)
        n_evals = cfg.n0
        spec0 = _initial_spec(cfg, tc)
        gp = _fit(spec0, X, Z, cfg.refit_restarts, _child_seed(seed, 6))
        for iteration in range(cfg.n_iterations + 1):
            t0 = time.perf_counter()
            ip = InverseProblem(obs, gp, box)
            chain = _chain(ip, cfg.L, _child_seed(seed, 7, iteration), cfg.map_optim)
            m = compute_metrics(iteration, gp, chain, ref, box_scale, cfg.kde_max_samples)
            x_sel, crit = None, None
            if iteration < cfg.n_iterations:
                rec = select(strategy, gp, ip, chain, iteration)
                x_sel, crit = np.asarray(rec.point, dtype=float), rec.criterion
                z_new = tc.model(x_sel[None])[0]
                n_evals += 1
                X, Z = np.vstack([X, x_sel]), np.vstack([Z, z_new])
                if cfg.refit_every_iteration:
                    gp = _fit(gp.spec, X, Z, cfg.refit_restarts, _child_seed(seed, 8, iteration))
                else:
                    gp = gp.with_point(x_sel, z_new)
            emit({**base, "iteration": iteration, "ivar": _fmt(m.ivar), "entropy": _fmt(m.entropy),
                  "kl": _fmt(m.kl), "x_selected": "" if x_sel is None else ";".join(repr(float(v)) for v in x_sel),
                  "criterion": _fmt(crit), "acceptance_rate": _fmt(m.acceptance_rate),
                  "iat_max": _fmt(m.iat_max), "n_evals": n_evals,
                  "wall_time": f"{time.perf_counter() - t0:.3f}", "status": "ok"})
    except Exception as exc:  # recorded against the cell, never aborts the campaign
        logger.error("strategy %s replicate %d failed at iteration %d: %s\n%s", strategy.label, replicate,
                     iteration, exc, traceback.format_exc())
        msg = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
        emit({**base, "iteration": iteration, **{c: "" for c in COLUMNS if c not in base and c != "iteration"},
              "status": msg})
    return rows


def _run_replicate(cfg, labels, replicate):
    """Worker entry point: all requested strategies of one replicate."""
    seed = cfg.seeds[replicate]
    try:
        ref = reference_chain(cfg, seed)
    except Exception:  # every cell will record the failure itself
        ref = None
    by_label = {s.label: s for s in cfg.strategies}
    return [run_cell(cfg, by_label[lab], replicate, ref) for lab in labels]


# ---------------------------------------------------------------------------
# the record


@dataclass
class ExperimentRecord:
    rows: list
    path: str | None = None

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != COLUMNS:
                raise ValueError(f"{path} does not follow record schema version {SCHEMA_VERSION}")
            rows = list(reader)
        return cls(rows, str(path))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)
        self.path = str(path)

    def cells(self):
        out = {}
        for row in self.rows:
            out.setdefault((row["strategy"], int(row["replicate"])), []).append(row)
        return out

    def final(self, strategy, metric="ivar"):
        """Final-iteration values of ``metric`` for every successful replicate of ``strategy``."""
        vals = []
        for (lab, _), rows in sorted(self.cells().items()):
            if lab == strategy and all(r["status"] == "ok" for r in rows):
                last = max(rows, key=lambda r: int(r["iteration"]))
                vals.append(float(last[metric]) if last[metric] else math.nan)
        return np.array(vals)


def _complete(rows, n_iterations):
    if any(r["status"].startswith("failed") for r in rows):
        return True
    its = sorted(int(r["iteration"]) for r in rows)
    return its == list(range(n_iterations + 1))


def run_experiment(cfg, workers=None):
    """Run (or resume) a campaign; the record lives in ``cfg.output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out / "config.json")
    path = out / RECORD_NAME
    kept = []
    if path.exists():
        previous = ExperimentRecord.from_csv(path)
        for key, rows in previous.cells().items():
            if _complete(rows, cfg.n_iterations):
                kept.extend(rows)
            else:
                logger.info("discarding %d rows of unfinished cell %s", len(rows), key)
    ExperimentRecord(kept).to_csv(path)  # rewrite without partial cells
    done = {(r["strategy"], int(r["replicate"])) for r in kept}
    todo = {}
    for rep in range(cfg.n_replicates):
        labels = [s.label for s in cfg.strategies if (s.label, rep) not in done]
        if labels:
            todo[rep] = labels
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))

    fh = open(path, "a", newline="")
    writer = csv.DictWriter(fh, COLUMNS)

    def write(row):
        writer.writerow(row)
        fh.flush()

    try:
        if workers <= 1:
            for rep, labels in todo.items():
                seed = cfg.seeds[rep]
                try:
                    ref = reference_chain(cfg, seed)
                except Exception:
                    ref = None
                by_label = {s.label: s for s in cfg.strategies}
                for lab in labels:
                    run_cell(cfg, by_label[lab], rep, ref, on_row=write)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_replicate, cfg, labels, rep) for rep, labels in todo.items()]
                for fut in futures:
                    for rows in fut.result():
                        for row in rows:
                            write(row)
    finally:
        fh.close()
    record = ExperimentRecord.from_csv(path)
    order = {s.label: i for i, s in enumerate(cfg.strategies)}
    record.rows.sort(key=lambda r: (order.get(r["strategy"], len(order)), int(r["replicate"]), int(r["iteration"])))
    record.to_csv(path)
    return record


# ---------------------------------------------------------------------------
# summaries and plots


SUMMARY_COLUMNS = ["strategy", "metric", "iteration", "mean", "ci_low", "ci_high", "n", "degenerate"]


def summarize(record, metrics=METRICS):
    """Per-iteration mean and 95% interval ``mean +- 1.96 sd / sqrt(R)``.

    Failed cells are left out. With a single replicate the interval collapses
    to the mean and the row is flagged ``degenerate``.
    """
    if isinstance(record, (str, Path)):
        record = ExperimentRecord.from_csv(record)
    groups = {}
    for (lab, _), rows in record.cells().items():
        if not all(r["status"] == "ok" for r in rows):
            continue
        for r in rows:
            for metric in metrics:
                if r[metric] != "":
                    groups.setdefault((lab, metric, int(r["iteration"])), []).append(float(r[metric]))
    out = []
    for (lab, metric, it), vals in sorted(groups.items()):
        v = np.asarray(vals)
        R = v.size
        mean = float(v.mean())
        half = 1.96 * float(v.std(ddof=1)) / math.sqrt(R) if R >= 2 else 0.0
        out.append({"strategy": lab, "metric": metric, "iteration": it, "mean": mean,
                    "ci_low": mean - half, "ci_high": mean + half, "n": R, "degenerate": R < 2})
    return out


def write_summary(summary, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(summary)


def read_summary(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["iteration"] = int(r["iteration"])
        r["n"] = int(r["n"])
        for k in ("mean", "ci_low", "ci_high"):
            r[k] = float(r[k])
        r["degenerate"] = r["degenerate"] == "True"
    return rows


_TITLES = {"ivar": "Integrated variance", "entropy": "Posterior entropy", "kl": "KL divergence to reference"}


def emit_plots(summary, outdir):
    """One SVG chart per metric (mean curve and 95% band per strategy) plus ``summary.csv``."""
    if not summary:
        raise ValueError("nothing to plot: the summary is empty")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_summary(summary, outdir / "summary.csv")
    files = [outdir / "summary.csv"]
    for metric in sorted({r["metric"] for r in summary}):
        rows = [r for r in summary if r["metric"] == metric]
        fig, ax = plt.subplots(figsize=(6, 4))
        lows, highs = [], []
        for lab in dict.fromkeys(r["strategy"] for r in rows):
            sel = sorted((r for r in rows if r["strategy"] == lab), key=lambda r: r["iteration"])
            it = [r["iteration"] for r in sel]
            mean = np.array([r["mean"] for r in sel])
            lo = np.array([r["ci_low"] for r in sel])
            hi = np.array([r["ci_high"] for r in sel])
            ax.plot(it, mean, marker="o", ms=3, label=lab)
            ax.fill_between(it, lo, hi, alpha=0.25)
            lows.append(np.min(np.r_[lo, mean]))
            highs.append(np.max(np.r_[hi, mean]))
        positive = min(lows) > 0 and metric == "ivar"
        if positive:
            ax.set_yscale("log")
        lo_all, hi_all = min(lows), max(highs)
        if positive:
            ax.set_ylim(lo_all / 1.2, hi_all * 1.2)
        else:
            pad = 0.05 * (hi_all - lo_all) or 0.05 * max(abs(hi_all), 1.0)
            ax.set_ylim(lo_all - pad, hi_all + pad)
        ax.set_xlabel("iteration")
        ax.set_ylabel(metric)
        ax.set_title(_TITLES.get(metric, metric))
        ax.legend()
        fig.tight_layout()
        path = outdir / f"{metric}.svg"
        fig.savefig(path, format="svg")
        plt.close(fig)
        files.append(path)
    return files
