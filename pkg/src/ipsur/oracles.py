"""Independent numerical oracles for the package's core identities.

The oracles here deliberately avoid the package's fast paths: kernels are
rebuilt from their hyperparameters, posteriors use dense matrix inverses,
the sequential-design expectation is integrated by brute force and the
point-model formulas are re-derived symbolically. Each check returns an
:class:`OracleResult` with the measured discrepancy and its tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid

from . import gp as gplib


@dataclass
class OracleResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    seconds: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3g} (tolerance {self.tolerance:.3g}, {self.seconds:.1f}s) {self.detail}".rstrip()


def _timed(name, tolerance, fn, compare="le"):
    t0 = time.perf_counter()
    value, detail = fn()
    passed = value <= tolerance if compare == "le" else value >= tolerance
    return OracleResult(name, float(value), tolerance, bool(passed), time.perf_counter() - t0, detail)


# ---------------------------------------------------------------------------
# dense reference GP


def _corr(family, r):
    if family == "rbf":
        return np.exp(-0.5 * r ** 2)
    if family == "matern32":
        return (1 + np.sqrt(3) * r) * np.exp(-np.sqrt(3) * r)
    return (1 + np.sqrt(5) * r + 5 * r ** 2 / 3) * np.exp(-np.sqrt(5) * r)


def dense_kernel(spec, X1, X2, scale=None):
    """LMC kernel in original output units, built entry by entry block."""
    d = spec.d
    s = np.ones(d) if scale is None else np.asarray(scale, dtype=float)
    K = np.zeros((X1.shape[0], d, X2.shape[0], d))
    for lk, a in zip(spec.latent, spec.mixing):
        r = np.sqrt((((X1[:, None, :] - X2[None, :, :]) / lk.lengthscales) ** 2).sum(-1))
        block = lk.variance * np.outer(a * s, a * s)
        K += _corr(lk.family, r)[:, None, :, None] * block[None, :, None, :]
    return K.reshape(X1.shape[0] * d, X2.shape[0] * d)


def dense_posterior(spec, X, Z, Xs, shift, scale):
    """Posterior mean ``(M, d)`` and joint covariance ``(M d, M d)`` by explicit inversion."""
    d = spec.d
    noise = np.kron(np.eye(X.shape[0]), np.diag(spec.nugget * scale ** 2))
    K = dense_kernel(spec, X, X, scale) + noise
    Ks = dense_kernel(spec, X, Xs, scale)
    Kss = dense_kernel(spec, Xs, Xs, scale)
    W = np.linalg.solve(K, np.column_stack([Ks, (Z - shift).ravel()]))
    mean = np.tile(shift, Xs.shape[0]) + Ks.T @ W[:, -1]
    cov = Kss - Ks.T @ W[:, :-1]
    return mean.reshape(-1, d), cov


def _random_gp(rng, p, d, n, family=None, nugget=0.0, ls_range=(0.4, 1.2)):
    family = family or rng.choice(gplib.FAMILIES)
    ls = rng.uniform(*ls_range, size=p)
    spec = gplib.KernelSpec.default(p, d, family=family, lengthscale=ls, nugget=nugget)
    spec = spec.with_params(mixing=rng.normal(size=(d, d)) + 2 * np.eye(d))
    X = rng.uniform(0, 1, size=(n, p))
    Z = rng.normal(size=(n, d)) * rng.uniform(0.5, 3, size=d) + rng.normal(size=d)
    return gplib.condition(spec, X, Z)


# ---------------------------------------------------------------------------
# criterion 1: expected post-acquisition uncertainty


def _toy_problem():
    spec = gplib.KernelSpec.default(1, 1, family="rbf", lengthscale=0.15)
    X = np.array([[0.1], [0.35], [0.6], [0.9]])
    Z = np.sin(2 * np.pi * X) + 0.5 * X
    return spec, X, Z


def prop1_oracle(n_z=10_000, n_grid=2000, n_probe=10, seed=0):
    """Closed-form versus brute-force expected uncertainty on a 1D toy problem.

    The toy has ``p = d = 1``, ``n = 4`` training pairs and ``N = 2``
    observations. For each probe ``x`` the brute force draws ``z_{n+1}``
    from the predictive distribution, re-conditions a dense GP on
    ``(x, z_{n+1})`` and integrates ``|C_{n+1}| L_{n+1} p`` with the full
    ``N``-observation likelihood on a trapezoid grid. The closed form
    integrates ``|C_{n+1}(.|x)| L_n p`` with the package's one-point update.
    Both are divided by ``Z_n``.

    Returns a list of ``(x, closed, brute, standard_error)``.
    """
    from .inverse import InverseProblem, ObservationSet

    spec, X, Z = _toy_problem()
    gp = gplib.condition(spec, X, Z, normalize=False, mean_const=0.0)
    shift, scale = gp.shift, gp.scale
    rng = np.random.default_rng(seed)
    sigma2 = 0.04
    y = np.sin(2 * np.pi * 0.45) + 0.5 * 0.45 + np.sqrt(sigma2) * rng.standard_normal((2, 1))
    box = np.array([[0.0, 1.0]])
    grid = np.linspace(0.0, 1.0, n_grid)[:, None]
    prior = 1.0  # uniform on [0, 1]

    # package side
    ip = InverseProblem(ObservationSet(y, [[sigma2]]), gp, box)
    loglik = ip.log_likelihood_batch(grid)
    snap = gp.snapshot(grid)
    w_pkg = np.exp(loglik - loglik.max()) * prior
    Z_pkg = trapezoid(w_pkg, grid[:, 0])

    # oracle side: dense posterior on the grid
    K_XX = dense_kernel(spec, X, X, scale)
    kg_X = dense_kernel(spec, grid, X, scale)
    mean_g = shift + kg_X @ np.linalg.solve(K_XX, (Z - shift).ravel())
    var_g = np.diag(dense_kernel(spec, grid[:1], grid[:1], scale))[0] - np.einsum(
        "ij,ji->i", kg_X, np.linalg.solve(K_XX, kg_X.T))
    mean_g = mean_g[:, None]
    m_g = mean_g[:, 0]

    def full_loglik(mean, var):
        # y1, y2 | x* ~ N(mean 1, var U + sigma2 I), both observations jointly
        a = var + sigma2
        c = var
        det = a * a - c * c
        r1, r2 = y[0, 0] - mean, y[1, 0] - mean
        quad = (a * r1 ** 2 - 2 * c * r1 * r2 + a * r2 ** 2) / det
        return -np.log(2 * np.pi) - 0.5 * np.log(det) - 0.5 * quad

    ll_n = full_loglik(m_g, var_g)
    ref = ll_n.max()
    Z_oracle = trapezoid(np.exp(ll_n - ref) * prior, grid[:, 0])

    probes = np.linspace(0.03, 0.97, n_probe)  # none coincides with a training input
    out = []
    for x in probes:
        xs = np.array([[x]])
        closed = trapezoid(w_pkg * snap.updated_det(xs)[:], grid[:, 0]) / Z_pkg
        # dense re-conditioning for the brute force
        mx, cx = dense_posterior(spec, X, Z, xs, shift, scale)
        c_gx = dense_kernel(spec, grid, xs, scale)[:, 0] - kg_X @ np.linalg.solve(K_XX, dense_kernel(spec, X, xs, scale))[:, 0]
        gain = c_gx / cx[0, 0]
        var_new = var_g - c_gx * gain
        z = mx[0, 0] + np.sqrt(cx[0, 0]) * rng.standard_normal(n_z)
        vals = np.empty(n_z)
        for start in range(0, n_z, 500):
            zz = z[start:start + 500]
            m_new = m_g[None, :] + gain[None, :] * (zz[:, None] - mx[0, 0])
            ll = full_loglik(m_new, var_new[None, :])
            vals[start:start + 500] = trapezoid(np.abs(var_new)[None, :] * np.exp(ll - ref) * prior,
                                               grid[:, 0], axis=1) / Z_oracle
        out.append((float(x), float(closed), float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_z))))
    return out


def check_prop1(**kw):
    def run():
        rows = prop1_oracle(**kw)
        zs = [abs(c - b) / se for _, c, b, se in rows]
        return max(zs), f"max |closed - brute| / MC-se over {len(rows)} probes"

    return _timed("expected-uncertainty closed form vs brute force (MC se units)", 3.0, run)


# ---------------------------------------------------------------------------
# criteria 2 and 4: covariance update


def check_supermartingale(n_instances=200, seed=0):
    def run():
        rng = np.random.default_rng(seed)
        worst, done, skipped = -np.inf, 0, 0
        while done < n_instances:
            p, d = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            gp = _random_gp(rng, p, d, int(rng.integers(1, 10)))
            xs, x = rng.uniform(-0.2, 1.2, size=(2, p))
            before = np.linalg.det(gp.predict(xs)[1])
            try:
                after = np.linalg.det(gp.updated_cov(xs, x))
            except gplib.ExhaustedPointError:
                skipped += 1  # nothing left to learn at x; draw another instance
                continue
            worst = max(worst, after - before)
            done += 1
        return worst, f"max |C_(n+1)(x*|x)| - |C_n(x*)| over {done} instances ({skipped} exhausted redrawn)"

    return _timed("determinant never increases after an update", 1e-12, run)


def check_update_equivalence(n_instances=50, seed=1):
    def run():
        rng = np.random.default_rng(seed)
        worst, remaining = 0.0, n_instances
        while remaining > 0:
            p, d = int(rng.integers(1, 5)), int(rng.integers(1, 4))
            gp = _random_gp(rng, p, d, int(rng.integers(1, 13)), ls_range=(0.1, 0.5))
            xs = rng.uniform(0, 1, size=(3, p))
            x = rng.uniform(0, 1, size=p)
            X = np.vstack([gp.inputs, x])
            if np.linalg.cond(dense_kernel(gp.spec, X, X)) > 1e10:
                continue  # the dense oracle itself is unreliable here
            try:
                fast = np.array([gp.updated_cov(u, x) for u in xs])
            except gplib.ExhaustedPointError:
                continue
            Z = np.vstack([gp.outputs, rng.normal(size=d)])
            _, cov = dense_posterior(gp.spec, X, Z, xs, gp.shift, gp.scale)
            full = np.array([cov[i * d:(i + 1) * d, i * d:(i + 1) * d] for i in range(3)])
            worst = max(worst, float(np.abs(fast - full).max()))
            remaining -= 1
        return worst, "max element-wise |fast update - dense re-conditioning|"

    return _timed("one-point covariance update equals re-conditioning", 1e-7, run)


# ---------------------------------------------------------------------------
# criterion 3: likelihood proportionality


def check_likelihood_proportionality(n_points=20, seed=2):
    from .inverse import InverseProblem
    from .testbeds import initial_design, make_observations, make_testbed

    def run():
        rng = np.random.default_rng(seed)
        worst, parts = 0.0, []
        for name in ("banana", "bimodal", "neutron"):
            tc = make_testbed(name)
            if tc.N * tc.model.d > 60:
                continue
            box = tc.model.box
            X = initial_design(box, 15, seed)
            spec = gplib.KernelSpec.default(tc.model.p, tc.model.d, family="matern52",
                                            lengthscale=0.3 * np.ptp(box, axis=1))
            gp = gplib.condition(spec, X, tc.model(X))
            ip = InverseProblem(make_observations(tc.center, tc.c_obs, tc.N, seed), gp, box)
            pts = rng.uniform(box[:, 0], box[:, 1], size=(n_points, box.shape[0]))
            diff = np.array([ip.log_likelihood_full(x) - ip.log_likelihood(x) for x in pts])
            ratio = np.exp(diff - diff.mean())
            spread = float(np.ptp(ratio) / ratio.mean())
            parts.append(f"{name}={spread:.1e}")
            worst = max(worst, spread)
        return worst, ", ".join(parts)

    return _timed("full / simplified likelihood ratio is constant", 1e-6, run)


# ---------------------------------------------------------------------------
# criterion 7: sampler calibration


def check_mcmc(seed=0, L=50_000):
    from .mcmc import adaptive_metropolis, estimate_iat

    def run():
        mu = np.array([1.0, -0.5])
        cov = np.array([[1.0, 0.6], [0.6, 2.0]])
        prec = np.linalg.inv(cov)
        box = np.array([[-15.0, 15.0], [-15.0, 15.0]])

        def logpdf(x):
            r = x - mu
            return -0.5 * r @ prec @ r

        chain = adaptive_metropolis(logpdf, box, L, seed=seed)
        mean_err = float(np.abs(chain.samples.mean(0) - mu).max())
        cov_err = float(np.linalg.norm(np.cov(chain.samples.T) - cov))
        phi = 0.9
        rng = np.random.default_rng(seed)
        e = rng.standard_normal(200_000)
        ar = np.empty_like(e)
        ar[0] = e[0]
        for t in range(1, e.size):
            ar[t] = phi * ar[t - 1] + e[t]
        tau_true = (1 + phi) / (1 - phi)
        tau_err = abs(estimate_iat(ar)[0] - tau_true) / tau_true
        score = max(mean_err / 0.05, cov_err / 0.1, tau_err / 0.3)
        return score, f"mean err {mean_err:.3f} (<=0.05), cov Frobenius err {cov_err:.3f} (<=0.1), IAT rel err {tau_err:.3f} (<=0.3)"

    return _timed("adaptive Metropolis and IAT calibration (worst ratio to tolerance)", 1.0, run)


# ---------------------------------------------------------------------------
# criterion 8: KDE metrics


def check_kde(seed=0):
    from .metrics import entropy_kde, kl_kde

    def run():
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((20_000, 2))
        h_true = np.log(2 * np.pi * np.e)
        h_err = abs(entropy_kde(X) - h_true)
        self_kl = abs(kl_kde(X[:10_000], X[10_000:]))
        A = rng.standard_normal((100_000, 1))
        B = rng.standard_normal((100_000, 1)) + 1.0
        kl_err = abs(kl_kde(A, B) - 0.5)
        score = max(h_err / 0.1, self_kl / 0.05, kl_err / 0.1)
        return score, f"entropy err {h_err:.3f} (<=0.1), split-chain KL {self_kl:.3f} (<=0.05), Gaussian KL err {kl_err:.3f} (<=0.1)"

    return _timed("KDE entropy and KL calibration (worst ratio to tolerance)", 1.0, run)


# ---------------------------------------------------------------------------
# criterion 9: point model


def point_model_symbolic(params, nd):
    """Point-model outputs re-derived with exact rational arithmetic (sympy)."""
    import sympy as sp

    k_p, eps, S, xs = (sp.Rational(float(v)) for v in params)
    nu, D2, D3, nus, D2s, D3s = (sp.Rational(float(v)) for v in
                                 (nd.nu_bar, nd.D2, nd.D3, nd.nu_bar_s, nd.D2s, nd.D3s))
    rho = 1 - 1 / k_p
    R = -eps * S * nus / (rho * nu * (nus + xs * (1 - nus)))
    base = eps * D2 / rho ** 2
    Y = base - xs * eps * nus * D2s / (rho * nu)
    X = 3 * base ** 2 * (1 - xs * rho * nus * D2s / (nu * D2)) - eps ** 2 * D3 / rho ** 3 + xs * eps ** 2 * nus ** 2 * D3s / (nu ** 2 * rho ** 2)
    return np.array([float(sp.N(v, 30)) for v in (R, Y, X)])


def check_point_model(seed=3, n_points=5):
    import sympy  # noqa: F401  -- load outside the timed region

    from .testbeds import NEUTRON_BOX, NuclearData, point_model

    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        nds = [NuclearData(), NuclearData(2.9, 1.1, 0.3, 2.2, 0.95, 0.8)]
        for nd in nds:
            P = rng.uniform(NEUTRON_BOX[:, 0], NEUTRON_BOX[:, 1], size=(n_points, 4))
            P[0, 3] = 1.0
            for x in P:
                got = point_model(x, nd)
                ref = point_model_symbolic(x, nd)
                worst = max(worst, float(np.max(np.abs(got - ref) / np.abs(ref))))
            # x_s = 0 collapses every correction bracket
            x0 = P[1].copy()
            x0[3] = 0.0
            rho = (x0[0] - 1) / x0[0]
            expected = np.array([-x0[1] * x0[2] / (rho * nd.nu_bar), x0[1] * nd.D2 / rho ** 2,
                                 3 * (x0[1] * nd.D2 / rho ** 2) ** 2 - x0[1] ** 2 * nd.D3 / rho ** 3])
            worst = max(worst, float(np.max(np.abs(point_model(x0, nd) - expected) / np.abs(expected))))
            # S enters R linearly and nothing else
            x2 = P[2].copy()
            y1 = point_model(x2, nd)
            x2[2] *= 2
            y2 = point_model(x2, nd)
            worst = max(worst, abs(y2[0] / (2 * y1[0]) - 1), float(np.max(np.abs(y2[1:] / y1[1:] - 1))))
        return worst, "max relative error over symbolic, x_s=0 and S-scaling checks"

    return _timed("point model matches its exact formulas", 1e-12, run)


# ---------------------------------------------------------------------------
# criterion 10: GP numerics


def check_gp_numerics(seed=4, n_instances=10):
    def run():
        rng = np.random.default_rng(seed)
        grad_err = 0.0
        for k in range(n_instances):
            p, d = int(rng.integers(1, 4)), int(rng.integers(1, 3))
            gp = _random_gp(rng, p, d, int(rng.integers(3, 12)), nugget=1e-4 if k % 2 else 0.0)
            packing = gplib._Packing(gp.spec, fit_nugget=bool(k % 2))
            theta = packing.pack(gp.spec)
            Zn = (gp.outputs - gp.shift) / gp.scale
            _, g = gplib.lml_and_grad(theta, packing, gp.inputs, Zn)
            fd = np.empty_like(theta)
            for i in range(theta.size):
                tp, tm = theta.copy(), theta.copy()
                tp[i] += 1e-5
                tm[i] -= 1e-5
                fd[i] = (gplib.lml_and_grad(tp, packing, gp.inputs, Zn)[0]
                         - gplib.lml_and_grad(tm, packing, gp.inputs, Zn)[0]) / 2e-5
            grad_err = max(grad_err, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8)))
        interp_err, interp_det, revert_err = 0.0, 0.0, 0.0
        for _ in range(n_instances):
            p, d = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            gp = _random_gp(rng, p, d, int(rng.integers(2, 10)))
            for i in range(gp.n):
                m, c = gp.predict(gp.inputs[i])
                interp_err = max(interp_err, float(np.abs(m - gp.outputs[i]).max()))
                cn = c / np.outer(gp.scale, gp.scale)
                interp_det = max(interp_det, abs(float(np.linalg.det(cn))))
            far = gp.inputs.max(0) + 20 * max(lk.lengthscales.max() for lk in gp.spec.latent)
            prior = gp.spec.prior_cov() * np.outer(gp.scale, gp.scale)
            revert_err = max(revert_err, float(np.abs(gp.predict(far)[1] - prior).max() / np.abs(prior).max()))
        score = max(grad_err / 1e-4, interp_err / 1e-6, interp_det / 1e-10, revert_err / 1e-6)
        return score, (f"LML gradient rel err {grad_err:.1e} (<=1e-4), interpolation err {interp_err:.1e} (<=1e-6), "
                       f"|C_n| at data {interp_det:.1e} (<=1e-10), prior reversion err {revert_err:.1e} (<=1e-6)")

    return _timed("GP gradient, interpolation and prior reversion (worst ratio to tolerance)", 1.0, run)


SUITES = {
    "update": [check_supermartingale, check_update_equivalence],
    "likelihood": [check_likelihood_proportionality],
    "design": [check_prop1],
    "mcmc": [check_mcmc],
    "metrics": [check_kde],
    "testbeds": [check_point_model],
    "gp": [check_gp_numerics, check_update_equivalence],
}
SUITES["all"] = [check_prop1, check_supermartingale, check_likelihood_proportionality,
                 check_update_equivalence, check_mcmc, check_kde, check_point_model, check_gp_numerics]


def run_suite(name):
    if name not in SUITES:
        raise KeyError(f"unknown oracle suite {name!r}; choose from {sorted(SUITES)}")
    return [check() for check in SUITES[name]]
