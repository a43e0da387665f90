"""Plug-in asymptotic precision matrices and CLT scaling diagnostics.

The time integrals of expectations under the mean-field law are replaced by
Riemann sums over simulated particle clouds,

    int_0^T E_{mu_t}[f] dt  ~  (delta / (M N)) sum_{m, i, j} f(X_j^{[i], m}),

theta-derivatives of the drifts are central differences, and derivatives of
Sigma in the diffusion parameters go through the diffusion field, since
Sigma is linear in a_R.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientReplicates, ShapeError
from .lg_transition import _sigma_from_terms, generator_terms
from .model_core import ModelSpec
from .simulator import ExperimentDesign, simulate_ips

__all__ = ["PrecisionMatrices", "CLTReport", "plugin_precision", "precision_from_states", "clt_diagnostic",
           "block_rates"]

REL_STEP = 1e-6


@dataclass
class PrecisionMatrices:
    gamma_alpha_S: np.ndarray | None
    gamma_alpha_R: np.ndarray
    gamma_beta: np.ndarray
    regime: str
    mc_particles_times_steps: int
    se: dict = field(default_factory=dict)
    em: dict = field(default_factory=dict)

    def blocks(self) -> dict:
        out = {"alpha_R": self.gamma_alpha_R, "beta": self.gamma_beta}
        if self.gamma_alpha_S is not None:
            out = {"alpha_S": self.gamma_alpha_S, **out}
        return out

    def to_dict(self) -> dict:
        def conv(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "regime": self.regime,
            "mc_particles_times_steps": int(self.mc_particles_times_steps),
            "gamma": {k: conv(v) for k, v in self.blocks().items()},
            "se": {k: conv(v) for k, v in self.se.items()},
            "em_counterpart": {k: conv(v) for k, v in self.em.items()},
        }


def _steps(theta):
    return REL_STEP * np.maximum(1.0, np.abs(theta))


def _drifts(model: ModelSpec, theta, X):
    """Smooth and rough drifts at every state of X (..., N, d)."""
    alpha_S, alpha_R, _ = model.split(theta)
    VS0 = model.smooth_drift(alpha_S, X) if model.d_S else None
    return VS0, model.rough_drift_field(alpha_R, X)


def _central(model, theta, X, k):
    """Central differences of the drifts in theta_k, divided by the realised probe spacing."""
    h = _steps(theta)[k]
    tp, tm = theta.copy(), theta.copy()
    tp[k] += h
    tm[k] -= h
    span = tp[k] - tm[k]
    qp, qm = _drifts(model, tp, X), _drifts(model, tm, X)
    return [None if a is None else (a - b) / span for a, b in zip(qp, qm)]


def _sigma_beta_derivative(model, theta, X, terms, k):
    """d Sigma / d theta_k for a diffusion parameter.

    Sigma is linear in a_R for fixed smooth Jacobian, and the Jacobian does not
    involve beta, so only the diffusion field is differenced:
    d a_R = dV V^T + V dV^T. Fields linear in beta are then differentiated
    exactly up to rounding.
    """
    h = _steps(theta)[k]
    tp, tm = theta.copy(), theta.copy()
    tp[k] += h
    tm[k] -= h
    bp, bm = model.split(tp)[2], model.split(tm)[2]
    dV = (model.diffusion_field(bp, X) - model.diffusion_field(bm, X)) / (tp[k] - tm[k])
    V = terms["VR"]
    dA = dV @ np.swapaxes(V, -1, -2)
    dA = dA + np.swapaxes(dA, -1, -2)
    return _sigma_from_terms(model, {**terms, "aR": dA})


def _bilinear(D, Minv):
    """Per-state D_k^T Minv D_l for derivative stacks D (K, ..., p)."""
    return np.einsum("k...a,...ab,l...b->...kl", D, Minv, D)


def _trace_form(D, Minv):
    """Per-state tr(D_k Minv D_l Minv) for derivative stacks D (K, ..., p, p)."""
    P = np.einsum("k...ab,...bc->k...ac", D, Minv)
    return np.einsum("k...ab,l...ba->...kl", P, P)


def precision_from_states(model: ModelSpec, theta, states, delta: float) -> PrecisionMatrices:
    """Plug-in precision from full-state clouds ``states`` of shape (M, n, N, d).

    Each (replica, particle) time integral is one Monte Carlo sample; the
    reported standard errors are the sample stddev over those samples
    divided by sqrt(M N).
    """
    X = np.asarray(states, dtype=float)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != model.d:
        raise ShapeError("states must have shape (M, n, N, d)")
    theta = np.asarray(theta, dtype=float)
    nS, nR, nB = model.param_sizes
    dS = model.d_S
    M_rep, n, N = X.shape[:3]

    terms = generator_terms(model, theta, X)
    sigma = _sigma_from_terms(model, terms)
    derivs = [_central(model, theta, X, k) for k in range(nS + nR)]
    beta_idx = range(nS + nR, nS + nR + nB)
    D_sig = np.stack([_sigma_beta_derivative(model, theta, X, terms, k) for k in beta_idx]) if nB else None

    def integrate(per_state):
        # per_state (M, n, N, K, K) -> mean over (replica, particle) of delta * sum_j
        samples = delta * per_state.sum(axis=1)  # (M, N, K, K)
        flat = samples.reshape(-1, *samples.shape[-2:])
        mean = flat.mean(axis=0)
        se = flat.std(axis=0, ddof=1) / np.sqrt(flat.shape[0]) if flat.shape[0] > 1 else np.zeros_like(mean)
        return 0.5 * (mean + mean.T), se

    se = {}
    em = {}
    sigma_RR = sigma[..., dS:, dS:]
    inv_RR = np.linalg.inv(sigma_RR)
    g_S = None
    if dS and nS:
        inv_SS = np.linalg.inv(sigma[..., :dS, :dS])
        D = np.stack([derivs[k][0] for k in range(nS)])
        g_S, se["alpha_S"] = integrate(4.0 * _bilinear(D, inv_SS))
    D = np.stack([derivs[k][1] for k in range(nS, nS + nR)]) if nR else None
    if nR:
        g_R, se["alpha_R"] = integrate(_bilinear(D, inv_RR))
    else:
        g_R = np.zeros((0, 0))
    if nB:
        if dS:
            g_B, se["beta"] = integrate(0.5 * _trace_form(D_sig, np.linalg.inv(sigma)))
            D_RR = D_sig[..., dS:, dS:]
            em["gamma_beta"], em["se_beta"] = integrate(0.5 * _trace_form(D_RR, inv_RR))
            em["gamma_alpha_R"] = g_R
        else:
            g_B, se["beta"] = integrate(0.5 * _trace_form(D_sig, inv_RR))
    else:
        g_B = np.zeros((0, 0))
    return PrecisionMatrices(
        gamma_alpha_S=g_S,
        gamma_alpha_R=g_R,
        gamma_beta=g_B,
        regime="hypoelliptic" if dS else "elliptic",
        mc_particles_times_steps=int(M_rep * n * N),
        se=se,
        em=em,
    )


def plugin_precision(model: ModelSpec, theta, design: ExperimentDesign, mc_replicas: int = 1,
                     first_replicate: int = 0) -> PrecisionMatrices:
    """Simulate ``mc_replicas`` complete datasets at theta and form the plug-in precision.

    Replicate streams start at ``first_replicate`` so the Monte Carlo clouds
    can be kept disjoint from the datasets used for estimation.
    """
    if mc_replicas < 1:
        raise ValueError("mc_replicas must be at least 1")
    full = design.with_(observed_coords=None)
    clouds = [simulate_ips(model, theta, full, replicate=first_replicate + m).values[:-1]
              for m in range(mc_replicas)]
    return precision_from_states(model, theta, np.stack(clouds), full.delta_n)


# -- CLT diagnostics --------------------------------------------------------------------

def block_rates(model: ModelSpec, N: int, delta: float) -> dict:
    rates = {"alpha_R": np.sqrt(N), "beta": np.sqrt(N / delta)}
    if model.d_S:
        rates = {"alpha_S": np.sqrt(N) / delta, **rates}
    return rates


@dataclass
class CLTReport:
    replicates: int
    blocks: dict

    def to_dict(self) -> dict:
        return {"replicates": self.replicates,
                "blocks": {k: {kk: np.asarray(vv).tolist() for kk, vv in v.items()} for k, v in self.blocks.items()}}


def clt_diagnostic(estimates, theta_true, model: ModelSpec, design: ExperimentDesign,
                   precision: PrecisionMatrices) -> CLTReport:
    """Rescale replicate errors by their block rates and compare with the inverse precision.

    ``variance_ratio`` is diag(sample covariance) / diag(Gamma^{-1}) per block.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    theta_true = np.asarray(theta_true, dtype=float)
    if est.shape[0] < 10:
        raise InsufficientReplicates(f"need at least 10 replicates, got {est.shape[0]}")
    if est.shape[1] != theta_true.size:
        raise ShapeError("estimates and theta_true have different lengths")
    nS, nR, nB = model.param_sizes
    slices = {"alpha_S": slice(0, nS), "alpha_R": slice(nS, nS + nR), "beta": slice(nS + nR, nS + nR + nB)}
    rates = block_rates(model, design.N, design.delta_n)
    gammas = precision.blocks()
    out = {}
    for name, rate in rates.items():
        sl = slices[name]
        if sl.stop == sl.start:
            continue
        z = rate * (est[:, sl] - theta_true[sl])
        cov = np.atleast_2d(np.cov(z, rowvar=False, ddof=1))
        predicted = np.linalg.inv(gammas[name])
        out[name] = {
            "rate": np.array(rate),
            "mean": z.mean(axis=0),
            "cov": cov,
            "predicted_cov": predicted,
            "variance_ratio": np.diag(cov) / np.diag(predicted),
        }
    return CLTReport(int(est.shape[0]), out)
