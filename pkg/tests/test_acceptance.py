"""The ten acceptance criteria at their stated sizes and tolerances.

Criteria 5 and 6 run a full banana campaign (four strategies, ten
replicates, twenty iterations, chains of 20 000 states) and take about half
an hour on one core; deselect them with ``-m "not slow"``. Set
``IPSUR_ACCEPTANCE_DIR`` to keep the campaign record between sessions (an
unfinished campaign in that directory is resumed).
"""

import os
import time
import warnings

import numpy as np
import pytest

from ipsur import oracles
from ipsur.harness import ExperimentConfig, run_experiment

CAMPAIGN = dict(testbed="banana", n0=10, n_iterations=20, n_replicates=10, L=20_000, base_seed=0,
                kde_max_samples=2000)
ORDERING_STRATEGIES = [{"kind": "IPSUR"}, {"kind": "DOPT"}, {"kind": "CSQ", "h": 3}]
H1 = {"kind": "CSQ", "h": 1}


def _oracle(report, number, check, budget):
    res = check()
    ok = res.passed and res.seconds <= budget
    report(number, ok, f"{res.name}: {res.value:.3g} (tolerance {res.tolerance:.3g}); "
                       f"{res.seconds:.1f}s of {budget:g}s; {res.detail}")
    assert res.passed, res.line()
    assert res.seconds <= budget, f"took {res.seconds:.1f}s, budget {budget}s"


def test_criterion_01_closed_form_matches_brute_force(report):
    _oracle(report, 1, oracles.check_prop1, 120)


def test_criterion_02_supermartingale(report):
    _oracle(report, 2, oracles.check_supermartingale, 10)


def test_criterion_03_likelihood_proportionality(report):
    _oracle(report, 3, oracles.check_likelihood_proportionality, 30)


def test_criterion_04_update_equivalence(report):
    _oracle(report, 4, oracles.check_update_equivalence, 30)


def test_criterion_07_sampler_calibration(report):
    _oracle(report, 7, oracles.check_mcmc, 60)


def test_criterion_08_kde_calibration(report):
    _oracle(report, 8, oracles.check_kde, 60)


def test_criterion_09_point_model_identities(report):
    _oracle(report, 9, oracles.check_point_model, 1)


def test_criterion_10_gp_numerics(report):
    _oracle(report, 10, oracles.check_gp_numerics, 30)


# ---------------------------------------------------------------------------
# criteria 5 and 6: one shared banana campaign


@pytest.fixture(scope="module")
def campaign(tmp_path_factory):
    out = os.environ.get("IPSUR_ACCEPTANCE_DIR") or str(tmp_path_factory.mktemp("acceptance"))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t0 = time.perf_counter()
        run_experiment(ExperimentConfig(strategies=ORDERING_STRATEGIES, output_dir=out, **CAMPAIGN), workers=1)
        t_ordering = time.perf_counter() - t0
        # resuming with one more strategy keeps every finished cell
        record = run_experiment(ExperimentConfig(strategies=ORDERING_STRATEGIES + [H1], output_dir=out, **CAMPAIGN),
                                workers=1)
        t_total = time.perf_counter() - t0
    return record, t_ordering, t_total


def _mean_curve(record, strategy, metric="ivar"):
    its = {}
    for (lab, _), rows in record.cells().items():
        if lab == strategy and all(r["status"] == "ok" for r in rows):
            for r in rows:
                its.setdefault(int(r["iteration"]), []).append(float(r[metric]))
    return np.array([np.mean(its[k]) for k in sorted(its)])


@pytest.mark.slow
def test_criterion_05_strategy_ordering(campaign, report):
    record, t_ordering, _ = campaign
    final = {s: record.final(s) for s in ("IPSUR", "DOPT", "CSQ(h=3)")}
    means = {s: float(np.mean(v)) for s, v in final.items()}
    curve = _mean_curve(record, "IPSUR")
    rises = int(np.sum(np.diff(curve) > 0))
    complete = all(v.size == 10 for v in final.values()) and curve.size == 21
    ok = (complete and means["IPSUR"] < means["DOPT"] and means["CSQ(h=3)"] < means["DOPT"]
          and rises <= 2 and t_ordering <= 30 * 60)
    report(5, ok, "mean final IVAR " + ", ".join(f"{s}={m:.3g}" for s, m in means.items())
           + f"; IPSUR mean IVAR rises at {rises} of {curve.size - 1} steps (<=2); {t_ordering / 60:.1f} of 30 min")
    assert complete, "some replicates failed or are missing"
    assert means["IPSUR"] < means["DOPT"]
    assert means["CSQ(h=3)"] < means["DOPT"]
    assert rises <= 2, curve
    assert t_ordering <= 30 * 60


@pytest.mark.slow
def test_criterion_06_csq_gap_effect(campaign, report):
    record, _, t_total = campaign
    h1, h3 = record.final("CSQ(h=1)"), record.final("CSQ(h=3)")
    ok = h1.size == 10 and h3.size == 10 and h1.mean() >= h3.mean() and t_total <= 45 * 60
    report(6, ok, f"mean final IVAR CSQ(h=1)={h1.mean():.3g} >= CSQ(h=3)={h3.mean():.3g}; "
                  f"campaign {t_total / 60:.1f} of 45 min")
    assert h1.size == 10 and h3.size == 10
    assert h1.mean() >= h3.mean()
    assert t_total <= 45 * 60
