"""Acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL summary that is printed at the end of
the pytest run (see ``conftest.pytest_terminal_summary``). The replicate
experiments (criteria 6-9) run the stated designs and take tens of minutes.
"""
import os
import time

import numpy as np
import pytest

from conftest import record_criterion
from hypoips import experiment as ex
from hypoips.asymptotics import precision_from_states
from hypoips.cli import main
from hypoips.contrast import EMContrast, LGContrast, fd_step_halving_order
from hypoips.lg_transition import generator_terms, lg_mean_sigma, lg_moments_batch
from hypoips.model_core import default_bounds, get_model
from hypoips.partial_obs import KalmanObjective, dense_joint_oracle, factor_dataset, kalman_marginal_loglik
from hypoips.simulator import ExperimentDesign, simulate_ips

MODELS = ("ifhn", "ilangevin1d", "mfou")
WORKERS = int(os.environ.get("HYPOIPS_WORKERS", os.cpu_count() or 1))


def _theta_draws(model, count, rng):
    lo, hi = default_bounds(np.array(model.theta_true))
    return lo + (hi - lo) * rng.random((count, lo.size))


# -- 1 --------------------------------------------------------------------------------

def test_criterion_1_matrix_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {"inverse": 0.0, "det": 0.0, "block": 0.0}
    draws = 0
    for name in MODELS:
        model = get_model(name)
        dS = model.d_S
        for theta in _theta_draws(model, 1000, rng):
            X = rng.normal(scale=2.0, size=(10, 3, model.d))  # 10 states of 3 particles per theta
            mom = lg_moments_batch(model, theta, X, 0.01)
            sig, lam = mom.sigma, mom.lam
            eye = np.eye(model.d)
            worst["inverse"] = max(worst["inverse"], np.linalg.norm(lam @ sig - eye, ord=2, axis=(-2, -1)).max())
            terms = generator_terms(model, theta, X)
            aR = terms["aR"]
            det_R = np.linalg.det(aR)
            if dS:
                aS = terms["JR"] @ aR @ np.swapaxes(terms["JR"], -1, -2)
                target = np.linalg.det(aS) * det_R / 12.0 ** dS
            else:
                target = det_R
            worst["det"] = max(worst["det"], np.max(np.abs(np.exp(mom.log_det_sigma) / target - 1)))
            block = lam @ sig[..., :, dS:]
            expect = np.zeros((model.d, model.d_R))
            expect[dS:] = np.eye(model.d_R)
            worst["block"] = max(worst["block"], np.max(np.abs(block - expect)))
            draws += X.shape[0]
    elapsed = time.perf_counter() - t0
    ok = worst["inverse"] <= 1e-12 and worst["det"] <= 1e-10 and worst["block"] <= 1e-12 and elapsed < 10
    record_criterion(1, ok, f"{draws} draws, |Lambda Sigma - I| {worst['inverse']:.2e}, det rel "
                            f"{worst['det']:.2e}, block {worst['block']:.2e}, {elapsed:.1f}s")
    assert worst["inverse"] <= 1e-12
    assert worst["det"] <= 1e-10
    assert worst["block"] <= 1e-12
    assert elapsed < 10


# -- 2 --------------------------------------------------------------------------------

def test_criterion_2_langevin_closed_forms():
    model = get_model("ilangevin1d")
    theta = np.array([2.0, 1.5, 2.0, 0.5])
    X = np.random.default_rng(0).normal(size=(4, 2))
    mom = lg_moments_batch(model, theta, X, 0.01)
    s2 = 0.25
    sig_err = np.max(np.abs(mom.sigma - s2 * np.array([[1 / 3, 1 / 2], [1 / 2, 1.0]])))
    lam_err = np.max(np.abs(mom.lam - np.array([[12.0, -6.0], [-6.0, 4.0]]) / s2))
    # T = 30 with delta = 0.01; Sigma is state free so any cloud gives the same beta block
    states = np.random.default_rng(1).normal(size=(1, 3000, 3, 2))
    prec = precision_from_states(model, theta, states, 0.01)
    g, g_em = prec.gamma_beta[0, 0], prec.em["gamma_beta"][0, 0]
    ok = (sig_err <= 1e-14 and lam_err <= 1e-14 * 48 and abs(g - 480) <= 1e-9 and abs(g_em - 240) <= 1e-9
          and abs(g / g_em - 2) <= 1e-14)
    record_criterion(2, ok, f"Sigma err {sig_err:.1e}, Lambda rel err {lam_err / 48:.1e}, gamma_beta {g:.12g}, "
                            f"EM {g_em:.12g}, ratio {g / g_em:.15g}")
    assert sig_err <= 1e-14
    assert lam_err <= 1e-14 * 48  # entries up to 48: 1e-14 relative
    assert abs(g - 480.0) <= 1e-9
    assert abs(g_em - 240.0) <= 1e-9
    assert abs(g / g_em - 2.0) <= 1e-14


# -- 3 --------------------------------------------------------------------------------

FHN_TRUE = np.array([0.2, 0.8, 1.5, 2.0, 0.5])


def _fine_fhn_antithetic(X0, delta, draws, substeps, rng):
    """One observation step of the 4-particle FHN system by fine Euler-Maruyama.

    The smooth coordinate uses a Heun (trapezoidal) update so that its
    quadrature error stays below the LG remainder. Brownian increments come
    in antithetic pairs: rows k and k + draws/2 use opposite signs.
    """
    a, b, c, kappa, sigma = FHN_TRUE
    h = delta / substeps
    X = np.broadcast_to(X0, (draws,) + X0.shape).copy()
    for _ in range(substeps):
        y, x = X[..., 0], X[..., 1]
        vs = (x + a - b * y) / c
        vr = x - x ** 3 / 3 - y - kappa * (x - x.mean(axis=-1, keepdims=True))
        half = rng.standard_normal((draws // 2, X0.shape[0])) * np.sqrt(h)
        dW = np.concatenate([half, -half])
        x_new = x + vr * h + sigma * dW
        y_pred = y + vs * h
        y_new = y + 0.5 * h * (vs + (x_new + a - b * y_pred) / c)
        X = np.stack([y_new, x_new], axis=-1)
    return X


def test_criterion_3_conditional_moments():
    t0 = time.perf_counter()
    model = get_model("ifhn")
    X0 = np.array([[0.1, 0.4], [-0.3, 1.0], [0.5, -0.8], [0.0, 0.2]])
    rng = np.random.default_rng(303)
    deltas = (0.01, 0.005, 0.0025)
    draws = 100_000
    norms, cov_ok, worst = [], True, []
    for delta in deltas:
        mean, sigma = lg_mean_sigma(model, FHN_TRUE, X0, delta)
        X = _fine_fhn_antithetic(X0, delta, draws, 20, rng)
        m = (X - mean) * np.array([delta ** -1.5, delta ** -0.5])
        half = draws // 2
        pair_mean = 0.5 * (m[:half] + m[half:])
        norms.append(np.linalg.norm(pair_mean.mean(axis=0)))
        # covariance about the exact zero-mean target; pair-averaged products give honest standard errors
        prods = np.einsum("rip,riq->ripq", m, m)
        pair_prod = 0.5 * (prods[:half] + prods[half:])
        cov = pair_prod.mean(axis=0)
        se = pair_prod.std(axis=0, ddof=1) / np.sqrt(half)
        tol = np.maximum(5 * se, 3 * delta)
        excess = np.max(np.abs(cov - sigma) / tol)
        worst.append(excess)
        cov_ok &= bool(excess <= 1.0)
    slope = np.polyfit(np.log(deltas), np.log(norms), 1)[0]
    elapsed = time.perf_counter() - t0
    ok = cov_ok and slope >= 1.4 and elapsed < 120
    record_criterion(3, ok, f"mean-norm slope {slope:.3f}, worst cov error / tolerance {max(worst):.2f}, "
                            f"{elapsed:.1f}s")
    assert cov_ok
    assert slope >= 1.4
    assert elapsed < 120


# -- 4 --------------------------------------------------------------------------------

def test_criterion_4_kalman_vs_dense_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(404)
    worst = 0.0
    for k in range(100):
        model = get_model(("ifhn", "ilangevin1d")[k % 2])
        N, n = int(rng.integers(1, 5)), int(rng.integers(1, 33))
        delta = float(rng.choice([0.005, 0.01, 0.02]))
        theta_true = np.array(model.theta_true)
        design = ExperimentDesign(N=N, n=n, T=n * delta, fine_step=delta / 5, seed=int(rng.integers(1 << 30)))
        ds = simulate_ips(model, theta_true, design).restrict(model.partial_coords)
        theta = _theta_draws(model, 1, rng)[0]
        init = (rng.normal(size=1), np.array([[rng.uniform(0.1, 3.0)]]))
        ll = kalman_marginal_loglik(model, theta, ds, init=init)
        oracle = dense_joint_oracle(factor_dataset(model, theta, ds, path="probe"), ds.values, init=init)
        worst = max(worst, abs(ll - oracle) / (1 + abs(oracle)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 30
    record_criterion(4, ok, f"100 instances, worst |kalman - oracle| / (1 + |oracle|) = {worst:.2e}, "
                            f"{elapsed:.1f}s")
    assert worst <= 1e-8
    assert elapsed < 30


# -- 5 --------------------------------------------------------------------------------

def test_criterion_5_gradient_step_halving():
    rng = np.random.default_rng(505)
    results = {}
    for name in ("ifhn", "ilangevin1d"):
        model = get_model(name)
        theta_true = np.array(model.theta_true)
        full = simulate_ips(model, theta_true, ExperimentDesign(N=5, n=60, T=0.6, fine_step=0.001, seed=5))
        objectives = {
            "lg_contrast": LGContrast(model, full),
            "em_contrast": EMContrast(model, full),
            "kalman_marginal_loglik": KalmanObjective(model, full.restrict(model.partial_coords)),
        }
        for label, obj in objectives.items():
            orders = np.array([fd_step_halving_order(obj, th) for th in _theta_draws(model, 20, rng)])
            # quadratic directions (drift parameters entering linearly) are exact and reported as inf
            results[f"{label}/{name}"] = (float(np.min(orders)), int(np.isinf(orders).sum()), orders.size)
    ok = all(v[0] >= 1.9 for v in results.values())
    detail = ", ".join(f"{k} {v[0]:.2f} ({v[1]}/{v[2]} exact)" for k, v in results.items())
    record_criterion(5, ok, f"min observed order over 20 theta: {detail}")
    assert ok, results


# -- 6, 7, 9: Langevin Design I ---------------------------------------------------------

LANGEVIN_DESIGN = {"N": 50, "n": 3000, "T": 30.0}


@pytest.fixture(scope="module")
def langevin_complete():
    cfg = ex.ExperimentConfig.from_dict({"model": "ilangevin1d", "design": LANGEVIN_DESIGN, "replicates": 20,
                                         "methods": ["LG", "EM", "LG-biased-poke09"], "modes": ["complete"],
                                         "seed": 2024})
    rows, _ = ex.run_experiment(cfg, workers=WORKERS)
    return ex.summarize(get_model("ilangevin1d").param_names, rows)


@pytest.fixture(scope="module")
def langevin_partial():
    cfg = ex.ExperimentConfig.from_dict({"model": "ilangevin1d", "design": LANGEVIN_DESIGN, "replicates": 20,
                                         "methods": ["LG", "EM"], "modes": ["partial"], "seed": 2024})
    rows, _ = ex.run_experiment(cfg, workers=WORKERS)
    return ex.summarize(get_model("ilangevin1d").param_names, rows)


def test_criterion_6_sigma_stddev_ratio(langevin_complete):
    lg = langevin_complete.lookup("LG", "complete", "sigma")
    em = langevin_complete.lookup("EM", "complete", "sigma")
    ratio = em["stddev"] / lg["stddev"]
    ok = 1.2 <= ratio <= 1.7 and lg["failures"] == 0 and em["failures"] == 0
    record_criterion(6, ok, f"sigma stddev EM {em['stddev']:.5f} / LG {lg['stddev']:.5f} = {ratio:.3f}")
    assert lg["failures"] == 0 and em["failures"] == 0
    assert 1.2 <= ratio <= 1.7


def test_criterion_7_partial_bias(langevin_partial):
    means = {p: langevin_partial.lookup("LG", "partial", p)["mean"] for p in ("lambda", "gamma", "kappa", "sigma")}
    em_gamma = langevin_partial.lookup("EM", "partial", "gamma")["mean"]
    ok = (all(abs(means[p]) <= 0.05 for p in ("lambda", "gamma", "kappa")) and abs(means["sigma"]) <= 0.01
          and abs(em_gamma) > abs(means["gamma"]))
    detail = ", ".join(f"{p} {v:+.4f}" for p, v in means.items())
    record_criterion(7, ok, f"LG partial mean rel: {detail}; EM gamma {em_gamma:+.4f}")
    for p in ("lambda", "gamma", "kappa"):
        assert abs(means[p]) <= 0.05
    assert abs(means["sigma"]) <= 0.01
    assert abs(em_gamma) > abs(means["gamma"])


def test_criterion_9_biased_smooth_drift(langevin_complete):
    def z(method):
        e = langevin_complete.lookup(method, "complete", "gamma")
        se = e["stddev"] / np.sqrt(e["ok"])
        # estimates pinned at a box bound have zero spread
        return e["mean"] / se if se > 0 else np.copysign(np.inf, e["mean"]) if e["mean"] else 0.0

    z_biased, z_lg = z("LG-biased-poke09"), z("LG")
    ok = abs(z_biased) > 3 and abs(z_lg) <= 3
    record_criterion(9, ok, f"gamma bias in standard errors: without correction {z_biased:+.1f}, "
                            f"with correction {z_lg:+.1f}")
    assert abs(z_biased) > 3
    assert abs(z_lg) <= 3


# -- 8 --------------------------------------------------------------------------------

def test_criterion_8_fhn_complete():
    cfg = ex.ExperimentConfig.from_dict({"model": "ifhn", "design": {"N": 50, "n": 2000, "T": 10.0},
                                         "replicates": 10, "methods": ["LG"], "modes": ["complete"], "seed": 2024})
    rows, _ = ex.run_experiment(cfg, workers=WORKERS)
    table = ex.summarize(get_model("ifhn").param_names, rows)
    entries = {p: table.lookup("LG", "complete", p) for p in ("a", "b", "c", "kappa", "sigma")}
    means_ok = all(abs(e["mean"]) <= 0.15 for e in entries.values())
    sd_ok = all(entries[p]["stddev"] < entries["kappa"]["stddev"] for p in ("a", "b", "c"))
    detail = ", ".join(f"{p} {e['mean']:+.4f} ({e['stddev']:.4f})" for p, e in entries.items())
    record_criterion(8, means_ok and sd_ok, f"mean rel (stddev): {detail}")
    assert means_ok
    assert sd_ok


# -- 10 -------------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    import json

    cfg = {"model": "ilangevin1d", "design": {"N": 4, "n": 40, "T": 0.4, "fine_step": 0.002}, "replicates": 8,
           "methods": ["LG", "EM"], "modes": ["complete", "partial"], "adam": {"iterations": 40}, "seed": 99}
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    outputs = []
    for workers in (1, 4, 8):
        out = tmp_path / f"w{workers}"
        assert main(["experiment", "--config", str(path), "--out", str(out), "--workers", str(workers)]) == 0
        outputs.append((out / "estimates.csv").read_bytes())
    again = tmp_path / "again"
    main(["experiment", "--config", str(path), "--out", str(again), "--workers", "4"])
    outputs.append((again / "estimates.csv").read_bytes())
    ok = all(o == outputs[0] for o in outputs)
    record_criterion(10, ok, "estimates.csv byte-identical at 1, 4, 8 workers and on a repeated run" if ok
                     else "estimates.csv differs between runs")
    assert ok
