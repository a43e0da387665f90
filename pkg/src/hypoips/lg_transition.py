"""Locally Gaussian (LG) one-step transition of the particle system.

The smooth block is advanced by a second-order Ito-Taylor expansion of its
drift, the rough block by Euler-Maruyama. Conditionally on the current cloud
the standardised residual

    m = ((x'_S - mean_S) / delta^{3/2}, (x'_R - mean_R) / delta^{1/2})

is Gaussian with covariance Sigma:

    Sigma_SS = a_S / 3,   Sigma_SR = dV_S0/dx_R a_R / 2,   Sigma_RR = a_R.

Batched helpers take a cloud ``X`` of shape ``(..., N, d)`` and return
per-particle arrays; the per-particle API mirrors them for one particle.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCovariance, EllipticModelError, ShapeError
from .model_core import ModelSpec, ParticleSystemState

__all__ = [
    "LGMoments",
    "generator_terms",
    "lg_mean_sigma",
    "residual_scale",
    "generator_on_smooth_drift",
    "lg_moments",
    "lg_moments_batch",
    "standardized_residual",
    "lg_log_density",
    "em_log_density_rough",
    "gaussian_quadratic_logdet",
]

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LGMoments:
    mean_smooth: np.ndarray
    mean_rough: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    log_det_sigma: float
    chol: np.ndarray

    @property
    def d_S(self) -> int:
        return self.mean_smooth.size

    @property
    def d_R(self) -> int:
        return self.mean_rough.size

    @property
    def mean(self) -> np.ndarray:
        return np.concatenate([self.mean_smooth, self.mean_rough])


def generator_terms(model: ModelSpec, theta, X):
    """Drift pieces and generator operators on the smooth drift, for every particle.

    Returns a dict with ``VS0`` (..., N, d_S), ``VR0`` (..., N, d_R),
    ``VR`` (..., N, d_R, d_B), ``aR`` (..., N, d_R, d_R), ``JR`` (..., N, d_S, d_R),
    ``L0`` (..., N, d_S) and ``Lk`` (..., N, d_S, d_B) where column k holds the
    first-order operator with index k + 1.
    """
    alpha_S, alpha_R, beta = model.split(theta)
    X = np.asarray(X, dtype=float)
    out = {"VR0": model.rough_drift_field(alpha_R, X), "VR": model.diffusion_field(beta, X)}
    VR = out["VR"]
    out["aR"] = VR @ np.swapaxes(VR, -1, -2)
    if model.d_S:
        dS = model.d_S
        VS0 = model.smooth_drift(alpha_S, X)
        J = model.smooth_jacobian(alpha_S, X)
        H = model.smooth_rr_hessian(alpha_S, X)
        JS, JR = J[..., :dS], J[..., dS:]
        L0 = (
            np.einsum("...ij,...j->...i", JS, VS0)
            + np.einsum("...ij,...j->...i", JR, out["VR0"])
            + 0.5 * np.einsum("...kl,...skl->...s", out["aR"], H)
        )
        out.update(VS0=VS0, JR=JR, L0=L0, Lk=JR @ VR)
    return out


def _sigma_from_terms(model: ModelSpec, terms):
    aR = terms["aR"]
    if not model.d_S:
        return aR
    JR = terms["JR"]
    SR = JR @ aR / 2.0
    SS = JR @ aR @ np.swapaxes(JR, -1, -2) / 3.0
    top = np.concatenate([SS, SR], axis=-1)
    bottom = np.concatenate([np.swapaxes(SR, -1, -2), aR], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def lg_mean_sigma(model: ModelSpec, theta, X, delta: float, correction: bool = True):
    """LG conditional mean of the next state and Sigma for every particle of ``X``.

    ``correction=False`` drops the second-order drift term of the smooth block
    (the biased-poke09 variant kept for demonstrations only).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    X = np.asarray(X, dtype=float)
    terms = generator_terms(model, theta, X)
    dS = model.d_S
    mean_R = X[..., dS:] + terms["VR0"] * delta
    if dS:
        mean_S = X[..., :dS] + terms["VS0"] * delta
        if correction:
            mean_S = mean_S + terms["L0"] * (delta * delta / 2.0)
        mean = np.concatenate([mean_S, mean_R], axis=-1)
    else:
        mean = mean_R
    return mean, _sigma_from_terms(model, terms)


def residual_scale(d_S: int, d_R: int, delta: float) -> np.ndarray:
    return np.concatenate([np.full(d_S, delta ** -1.5), np.full(d_R, delta ** -0.5)])


def gaussian_quadratic_logdet(m, sigma, where=""):
    """Batched m^T sigma^{-1} m and log det sigma via Cholesky."""
    try:
        L = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        flat = np.asarray(sigma).reshape(-1, *np.shape(sigma)[-2:])
        bad = next(k for k, s in enumerate(flat) if np.any(np.linalg.eigvalsh(s) <= 0))
        idx = np.unravel_index(bad, np.shape(sigma)[:-2]) if np.ndim(sigma) > 2 else ()
        raise DegenerateCovariance(
            f"covariance not positive definite at index {tuple(int(k) for k in idx)}{where}",
            particle=int(idx[-1]) if len(idx) else None,
            step=int(idx[0]) if len(idx) > 1 else None,
        ) from None
    z = np.linalg.solve(L, np.asarray(m)[..., None])[..., 0]
    quad = np.einsum("...i,...i->...", z, z)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
    return quad, logdet


# -- per-particle API -------------------------------------------------------------

def _check(model: ModelSpec, state: ParticleSystemState, i: int):
    if state.states.shape[1] != model.d:
        raise ShapeError(f"{model.name} expects d={model.d}, state has d={state.states.shape[1]}")
    if not 0 <= i < state.N:
        raise ShapeError(f"particle index {i} out of range for N={state.N}")


def generator_on_smooth_drift(model: ModelSpec, theta, state: ParticleSystemState, i: int, m: int):
    """Generator with index m applied to V_{S,0} at particle i (m = 0 is second order)."""
    if model.d_S == 0:
        raise EllipticModelError(f"{model.name} is elliptic (d_S = 0)")
    _check(model, state, i)
    if not 0 <= m <= model.d_B:
        raise ValueError(f"generator index must be in 0..{model.d_B}")
    terms = generator_terms(model, theta, state.states)
    if m == 0:
        return terms["L0"][i]
    return terms["Lk"][i][:, m - 1]


def lg_moments_batch(model: ModelSpec, theta, X, delta: float, correction: bool = True) -> LGMoments:
    """LGMoments for every particle of a cloud ``X`` (..., N, d); fields carry the leading axes."""
    mean, sigma = lg_mean_sigma(model, theta, X, delta, correction)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        flat = sigma.reshape(-1, model.d, model.d)
        bad = next(k for k, s in enumerate(flat) if np.any(np.linalg.eigvalsh(s) <= 0))
        particle = int(np.unravel_index(bad, sigma.shape[:-2])[-1])
        raise DegenerateCovariance(f"Sigma not positive definite for particle {particle}",
                                   particle=particle, step=None, theta=np.asarray(theta, dtype=float)) from None
    inv_chol = np.linalg.inv(chol)
    lam = np.swapaxes(inv_chol, -1, -2) @ inv_chol
    return LGMoments(
        mean_smooth=mean[..., : model.d_S],
        mean_rough=mean[..., model.d_S:],
        sigma=sigma,
        lam=lam,
        log_det_sigma=2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1),
        chol=chol,
    )


def lg_moments(model: ModelSpec, theta, state: ParticleSystemState, i: int, delta: float,
               correction: bool = True) -> LGMoments:
    _check(model, state, i)
    try:
        batch = lg_moments_batch(model, theta, state.states, delta, correction)
    except DegenerateCovariance as exc:
        exc.args = (f"{exc.args[0]} at t={state.time}",)
        raise
    return LGMoments(
        mean_smooth=batch.mean_smooth[i],
        mean_rough=batch.mean_rough[i],
        sigma=batch.sigma[i],
        lam=batch.lam[i],
        log_det_sigma=float(batch.log_det_sigma[i]),
        chol=batch.chol[i],
    )


def standardized_residual(moments: LGMoments, x_next, delta: float) -> np.ndarray:
    if delta <= 0:
        raise ValueError("delta must be positive")
    x_next = np.asarray(x_next, dtype=float)
    scale = residual_scale(moments.d_S, moments.d_R, delta)
    return (x_next - moments.mean) * scale


def lg_log_density(moments: LGMoments, x_next, delta: float, d_S: int, d_R: int) -> float:
    """Log of the non-degenerate LG transition density."""
    if (d_S, d_R) != (moments.d_S, moments.d_R):
        raise ShapeError("block sizes do not match the moments")
    m = standardized_residual(moments, x_next, delta)
    z = np.linalg.solve(moments.chol, m)
    d = d_S + d_R
    return float(-0.5 * (z @ z + moments.log_det_sigma + (3 * d_S + d_R) * np.log(delta) + d * LOG_2PI))


def em_log_density_rough(model: ModelSpec, theta, state: ParticleSystemState, i: int,
                         x_next_rough, delta: float) -> float:
    """Euler-Maruyama Gaussian log-density of the rough block only."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    _check(model, state, i)
    _, alpha_R, beta = model.split(theta)
    X = state.states
    mean = X[i, model.d_S:] + model.rough_drift_field(alpha_R, X)[i] * delta
    VR = model.diffusion_field(beta, X)[i]
    aR = VR @ VR.T
    r = (np.asarray(x_next_rough, dtype=float) - mean) / np.sqrt(delta)
    quad, logdet = gaussian_quadratic_logdet(r, aR, where=f" (particle {i})")
    d_R = model.d_R
    return float(-0.5 * (quad + logdet + d_R * np.log(delta) + d_R * LOG_2PI))
