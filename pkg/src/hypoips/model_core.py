"""Parameter/state containers and the coefficient contract for interacting particle systems.

Every coefficient function is vectorised: ``x`` has shape ``(..., d)`` and the
return carries the same leading batch shape. Particle clouds ``X`` have shape
``(..., N, d)``; the empirical measure of a cloud is the uniform measure over
its ``N`` rows, the particle itself included.

State layout is smooth block first (coordinates ``0..d_S-1``) followed by the
rough block (``d_S..d-1``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    EllipticModelError,
    HypoellipticityViolation,
    NumericalError,
    ShapeError,
)

__all__ = [
    "ParameterVector",
    "ParticleSystemState",
    "ModelSpec",
    "FunctionModel",
    "InteractingFHN",
    "InteractingLangevin1D",
    "MeanFieldEllipticOU",
    "get_model",
    "register_model",
    "available_models",
    "rough_drift",
    "diffusion_matrix_aR",
    "hypo_matrix_aS",
    "default_bounds",
]


@dataclass(frozen=True)
class ParameterVector:
    """theta = (alpha_S, alpha_R, beta) together with closed box bounds."""

    alpha_S: np.ndarray
    alpha_R: np.ndarray
    beta: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("alpha_S", "alpha_R", "beta", "lower", "upper"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        if self.alpha_R.size < 1 or self.beta.size < 1:
            raise ShapeError("alpha_R and beta need at least one component")
        d = self.alpha_S.size + self.alpha_R.size + self.beta.size
        if self.lower.shape != (d,) or self.upper.shape != (d,):
            raise ShapeError(f"bounds must have length {d}")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        flat = self.flat
        if np.any(flat < self.lower) or np.any(flat > self.upper):
            raise ValueError(f"parameter {flat} outside bounds [{self.lower}, {self.upper}]")

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.alpha_S, self.alpha_R, self.beta])

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.alpha_S.size, self.alpha_R.size, self.beta.size

    @classmethod
    def from_flat(cls, theta, sizes, lower, upper) -> "ParameterVector":
        theta = np.asarray(theta, dtype=float)
        s, r, b = sizes
        if theta.shape != (s + r + b,):
            raise ShapeError(f"expected {s + r + b} parameters, got shape {theta.shape}")
        return cls(theta[:s], theta[s:s + r], theta[s + r:], lower, upper)


@dataclass
class ParticleSystemState:
    time: float
    states: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[0] < 1:
            raise ShapeError(f"states must be an (N, d) array with N >= 1, got {self.states.shape}")
        if not np.all(np.isfinite(self.states)):
            raise NumericalError("particle states contain non-finite entries")

    @property
    def N(self) -> int:
        return self.states.shape[0]

    @property
    def empirical_mean(self) -> np.ndarray:
        return self.states.mean(axis=0)


class ModelSpec:
    """Coefficient contract of an interacting hypoelliptic (or elliptic) SDE system.

    Subclasses provide the smooth drift with its x-derivatives, the self and
    pair parts of the rough drift and the diffusion columns. The diffusion
    arrays have shape ``(..., d_R, d_B)``: column ``j`` is ``V_{R,j+1}``.

    ``rough_drift_field`` / ``diffusion_field`` evaluate the measure-dependent
    coefficients for every particle of a cloud. The default implementation
    averages the pair kernels over all N particles (O(N^2)); models whose
    kernels reduce to empirical moments override them.

    Models may also expose a linear feature representation of the one-step
    mean increment, ``mean_increment = M(theta, delta) @ phi(X)`` with ``phi``
    free of parameters. It enables the Gram-matrix contrast evaluation; see
    :mod:`hypoips.contrast`.
    """

    name = "custom"
    d_S: int = 0
    d_R: int = 1
    d_B: int = 1
    param_names: tuple[str, ...] = ()
    n_alpha_S: int = 0
    n_alpha_R: int = 1
    n_beta: int = 1
    theta_true: tuple[float, ...] | None = None
    partial_coords: tuple[int, ...] | None = None
    # True when Sigma does not depend on the state or on the measure.
    sigma_state_free = False

    @property
    def d(self) -> int:
        return self.d_S + self.d_R

    @property
    def n_params(self) -> int:
        return self.n_alpha_S + self.n_alpha_R + self.n_beta

    @property
    def param_sizes(self) -> tuple[int, int, int]:
        return self.n_alpha_S, self.n_alpha_R, self.n_beta

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.n_params:
            raise ShapeError(f"{self.name}: expected {self.n_params} parameters, got {theta.shape[-1]}")
        s, r = self.n_alpha_S, self.n_alpha_R
        return theta[..., :s], theta[..., s:s + r], theta[..., s + r:]

    def parameter_vector(self, theta, lower=None, upper=None) -> ParameterVector:
        theta = np.asarray(theta, dtype=float)
        if lower is None or upper is None:
            lower, upper = default_bounds(theta)
        return ParameterVector.from_flat(theta, self.param_sizes, lower, upper)

    # -- coefficient contract ------------------------------------------------
    def smooth_drift(self, alpha_S, x):
        raise EllipticModelError(f"{self.name} has no smooth component")

    def smooth_jacobian(self, alpha_S, x):
        raise EllipticModelError(f"{self.name} has no smooth component")

    def smooth_rr_hessian(self, alpha_S, x):
        raise EllipticModelError(f"{self.name} has no smooth component")

    def rough_drift_self(self, alpha_R, x):
        raise NotImplementedError

    def rough_drift_pair(self, alpha_R, x, w):
        """Pair kernel V^II_{R,0}(x, w); ``None`` when the drift has no interaction."""
        return None

    def diffusion_self(self, beta, x):
        raise NotImplementedError

    def diffusion_pair(self, beta, x, w):
        return None

    # -- measure-dependent evaluation over a cloud ----------------------------
    def rough_drift_field(self, alpha_R, X):
        X = np.asarray(X, dtype=float)
        out = self.rough_drift_self(alpha_R, X)
        pair = self.rough_drift_pair(alpha_R, X[..., :, None, :], X[..., None, :, :])
        if pair is not None:
            out = out + pair.mean(axis=-2)
        return out

    def diffusion_field(self, beta, X):
        X = np.asarray(X, dtype=float)
        out = self.diffusion_self(beta, X)
        pair = self.diffusion_pair(beta, X[..., :, None, :], X[..., None, :, :])
        if pair is not None:
            out = out + pair.mean(axis=-3)
        return out

    # -- optional linear feature representation -------------------------------
    def mean_features(self, X):
        """Parameter-free features phi of shape (..., N, k), or None."""
        return None

    def mean_coefficients(self, theta, delta, correction=True):
        """Matrix M (d x k) with E[increment] = M @ phi under the LG scheme."""
        return None

    @property
    def has_linear_features(self) -> bool:
        return type(self).mean_features is not ModelSpec.mean_features

    def __repr__(self):
        return f"{type(self).__name__}()"


class FunctionModel(ModelSpec):
    """Model assembled from user callables, for programmatic registration."""

    def __init__(
        self,
        dims,
        param_sizes,
        rough_drift_self: Callable,
        diffusion_self: Callable,
        smooth_drift: Callable | None = None,
        smooth_jacobian: Callable | None = None,
        smooth_rr_hessian: Callable | None = None,
        rough_drift_pair: Callable | None = None,
        diffusion_pair: Callable | None = None,
        name: str = "custom",
        param_names=None,
    ):
        self.d_S, self.d_R, self.d_B = (int(v) for v in dims)
        if self.d_S < 0 or self.d_R < 1 or self.d_B < 1:
            raise ShapeError(f"invalid dims {dims}")
        self.n_alpha_S, self.n_alpha_R, self.n_beta = (int(v) for v in param_sizes)
        if self.d_S > 0 and (smooth_drift is None or smooth_jacobian is None):
            raise ShapeError("hypoelliptic models need smooth_drift and smooth_jacobian")
        self.name = name
        self.param_names = tuple(param_names or (f"theta{k}" for k in range(self.n_params)))
        self._f = dict(
            smooth_drift=smooth_drift,
            smooth_jacobian=smooth_jacobian,
            smooth_rr_hessian=smooth_rr_hessian,
            rough_drift_self=rough_drift_self,
            rough_drift_pair=rough_drift_pair,
            diffusion_self=diffusion_self,
            diffusion_pair=diffusion_pair,
        )

    def smooth_drift(self, alpha_S, x):
        if self.d_S == 0:
            return super().smooth_drift(alpha_S, x)
        return np.asarray(self._f["smooth_drift"](alpha_S, x), dtype=float)

    def smooth_jacobian(self, alpha_S, x):
        if self.d_S == 0:
            return super().smooth_jacobian(alpha_S, x)
        return np.asarray(self._f["smooth_jacobian"](alpha_S, x), dtype=float)

    def smooth_rr_hessian(self, alpha_S, x):
        if self.d_S == 0:
            return super().smooth_rr_hessian(alpha_S, x)
        f = self._f["smooth_rr_hessian"]
        if f is None:
            x = np.asarray(x)
            return np.zeros(x.shape[:-1] + (self.d_S, self.d_R, self.d_R))
        return np.asarray(f(alpha_S, x), dtype=float)

    def rough_drift_self(self, alpha_R, x):
        return np.asarray(self._f["rough_drift_self"](alpha_R, x), dtype=float)

    def rough_drift_pair(self, alpha_R, x, w):
        f = self._f["rough_drift_pair"]
        return None if f is None else np.asarray(f(alpha_R, x, w), dtype=float)

    def diffusion_self(self, beta, x):
        return np.asarray(self._f["diffusion_self"](beta, x), dtype=float)

    def diffusion_pair(self, beta, x, w):
        f = self._f["diffusion_pair"]
        return None if f is None else np.asarray(f(beta, x, w), dtype=float)


def _full(x, value, tail):
    x = np.asarray(x)
    return np.broadcast_to(np.asarray(value, dtype=float), x.shape[:-1] + tail).copy()


class InteractingFHN(ModelSpec):
    """Interacting FitzHugh-Nagumo neurons, state stored as (Y, X).

    Y (recovery) is the smooth coordinate, X (voltage) the noisy one.
    theta = (a, b, c, kappa, sigma) with alpha_S = (a, b, c).
    """

    name = "ifhn"
    d_S, d_R, d_B = 1, 1, 1
    param_names = ("a", "b", "c", "kappa", "sigma")
    n_alpha_S, n_alpha_R, n_beta = 3, 1, 1
    theta_true = (0.2, 0.8, 1.5, 2.0, 0.5)
    partial_coords = (1,)
    sigma_state_free = True

    def smooth_drift(self, alpha_S, x):
        a, b, c = alpha_S
        return ((x[..., 1] + a - b * x[..., 0]) / c)[..., None]

    def smooth_jacobian(self, alpha_S, x):
        a, b, c = alpha_S
        return _full(x, [[-b / c, 1.0 / c]], (1, 2))

    def smooth_rr_hessian(self, alpha_S, x):
        return _full(x, 0.0, (1, 1, 1))

    def rough_drift_self(self, alpha_R, x):
        y, v = x[..., 0], x[..., 1]
        return (v - v ** 3 / 3.0 - y)[..., None]

    def rough_drift_pair(self, alpha_R, x, w):
        return (-alpha_R[0] * (x[..., 1] - w[..., 1]))[..., None]

    def rough_drift_field(self, alpha_R, X):
        X = np.asarray(X, dtype=float)
        v = X[..., 1]
        vbar = v.mean(axis=-1, keepdims=True)
        return (v - v ** 3 / 3.0 - X[..., 0] - alpha_R[0] * (v - vbar))[..., None]

    def diffusion_self(self, beta, x):
        return _full(x, beta[0], (1, 1))

    def diffusion_field(self, beta, X):
        return self.diffusion_self(beta, X)

    def mean_features(self, X):
        X = np.asarray(X, dtype=float)
        y, v = X[..., 0], X[..., 1]
        vbar = v.mean(axis=-1, keepdims=True)
        return np.stack([np.ones_like(v), v, y, v ** 3, v - vbar], axis=-1)

    def mean_coefficients(self, theta, delta, correction=True):
        a, b, c, kappa, _ = np.asarray(theta, dtype=float)
        h = delta
        vs = np.array([a / c, 1.0 / c, -b / c, 0.0, 0.0])
        vr = np.array([0.0, 1.0, -1.0, -1.0 / 3.0, -kappa])
        smooth = vs * h
        if correction:
            smooth = smooth + (-b / c * vs + vr / c) * h * h / 2.0
        return np.vstack([smooth, vr * h])


class InteractingLangevin1D(ModelSpec):
    """Interacting underdamped Langevin particles in one dimension, state (q, p).

    V(q) = lambda (q - 1/2)^2, U(q) = q^2 / 2, theta = (lambda, gamma, kappa, sigma).
    """

    name = "ilangevin1d"
    d_S, d_R, d_B = 1, 1, 1
    param_names = ("lambda", "gamma", "kappa", "sigma")
    n_alpha_S, n_alpha_R, n_beta = 0, 3, 1
    theta_true = (2.0, 1.5, 2.0, 0.5)
    partial_coords = (0,)
    sigma_state_free = True

    def smooth_drift(self, alpha_S, x):
        return np.array(x[..., 1:2], dtype=float)

    def smooth_jacobian(self, alpha_S, x):
        return _full(x, [[0.0, 1.0]], (1, 2))

    def smooth_rr_hessian(self, alpha_S, x):
        return _full(x, 0.0, (1, 1, 1))

    def rough_drift_self(self, alpha_R, x):
        lam, gamma, _ = alpha_R
        return (-2.0 * lam * (x[..., 0] - 0.5) - gamma * x[..., 1])[..., None]

    def rough_drift_pair(self, alpha_R, x, w):
        return (-alpha_R[2] * (x[..., 0] - w[..., 0]))[..., None]

    def rough_drift_field(self, alpha_R, X):
        X = np.asarray(X, dtype=float)
        lam, gamma, kappa = alpha_R
        q, p = X[..., 0], X[..., 1]
        qbar = q.mean(axis=-1, keepdims=True)
        return (-2.0 * lam * (q - 0.5) - gamma * p - kappa * (q - qbar))[..., None]

    def diffusion_self(self, beta, x):
        return _full(x, beta[0], (1, 1))

    def diffusion_field(self, beta, X):
        return self.diffusion_self(beta, X)

    def mean_features(self, X):
        X = np.asarray(X, dtype=float)
        q, p = X[..., 0], X[..., 1]
        qbar = q.mean(axis=-1, keepdims=True)
        return np.stack([np.ones_like(q), q, p, q - qbar], axis=-1)

    def mean_coefficients(self, theta, delta, correction=True):
        lam, gamma, kappa, _ = np.asarray(theta, dtype=float)
        h = delta
        vr = np.array([lam, -2.0 * lam, -gamma, -kappa])
        smooth = np.array([0.0, 0.0, h, 0.0])
        if correction:
            smooth = smooth + vr * h * h / 2.0
        return np.vstack([smooth, vr * h])


class MeanFieldEllipticOU(ModelSpec):
    """Scalar elliptic OU particles with linear attraction to the empirical mean.

    dX^i = (-a X^i - kappa (X^i - mean X)) dt + sigma dB^i, theta = (a, kappa, sigma).
    """

    name = "mfou"
    d_S, d_R, d_B = 0, 1, 1
    param_names = ("a", "kappa", "sigma")
    n_alpha_S, n_alpha_R, n_beta = 0, 2, 1
    theta_true = (0.5, 1.0, 0.7)
    partial_coords = None
    sigma_state_free = True

    def rough_drift_self(self, alpha_R, x):
        return -alpha_R[0] * np.array(x[..., 0:1], dtype=float)

    def rough_drift_pair(self, alpha_R, x, w):
        return (-alpha_R[1] * (x[..., 0] - w[..., 0]))[..., None]

    def rough_drift_field(self, alpha_R, X):
        X = np.asarray(X, dtype=float)
        x = X[..., 0]
        xbar = x.mean(axis=-1, keepdims=True)
        return (-alpha_R[0] * x - alpha_R[1] * (x - xbar))[..., None]

    def diffusion_self(self, beta, x):
        return _full(x, beta[0], (1, 1))

    def diffusion_field(self, beta, X):
        return self.diffusion_self(beta, X)

    def mean_features(self, X):
        X = np.asarray(X, dtype=float)
        x = X[..., 0]
        return np.stack([x, x - x.mean(axis=-1, keepdims=True)], axis=-1)

    def mean_coefficients(self, theta, delta, correction=True):
        a, kappa, _ = np.asarray(theta, dtype=float)
        return np.array([[-a * delta, -kappa * delta]])


_REGISTRY: dict[str, Callable[[], ModelSpec]] = {
    "ifhn": InteractingFHN,
    "ilangevin1d": InteractingLangevin1D,
    "mfou": MeanFieldEllipticOU,
}


def register_model(name: str, factory: Callable[[], ModelSpec]) -> None:
    _REGISTRY[name] = factory


def available_models() -> list[str]:
    return sorted(_REGISTRY)


def get_model(name: str) -> ModelSpec:
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {available_models()}") from None


def default_bounds(theta, margin: float = 2.0):
    """Multiplicative box [theta/m, theta*m] around theta (sign aware); [-1, 1] at zero."""
    theta = np.asarray(theta, dtype=float)
    if margin <= 1.0:
        raise ValueError("margin must exceed 1")
    mag = np.abs(theta)
    lower = np.where(mag > 0, theta - mag * (1.0 - 1.0 / margin), -1.0)
    upper = np.where(mag > 0, theta + mag * (margin - 1.0), 1.0)
    neg = theta < 0
    lower = np.where(neg, theta - mag * (margin - 1.0), lower)
    upper = np.where(neg, theta + mag * (1.0 - 1.0 / margin), upper)
    return lower, upper


# -- per-particle operations ----------------------------------------------------

def _check_state(model: ModelSpec, state: ParticleSystemState, i: int):
    if state.states.shape[1] != model.d:
        raise ShapeError(f"{model.name} expects d={model.d}, state has d={state.states.shape[1]}")
    if not 0 <= i < state.N:
        raise ShapeError(f"particle index {i} out of range for N={state.N}")


def rough_drift(model: ModelSpec, alpha_R, state: ParticleSystemState, i: int) -> np.ndarray:
    """V^I_{R,0}(x_i) + mean_l V^II_{R,0}(x_i, x_l)."""
    _check_state(model, state, i)
    alpha_R = np.asarray(alpha_R, dtype=float)
    if alpha_R.shape != (model.n_alpha_R,):
        raise ShapeError(f"alpha_R must have length {model.n_alpha_R}")
    return model.rough_drift_field(alpha_R, state.states)[i]


def diffusion_matrix_aR(model: ModelSpec, beta, state: ParticleSystemState, i: int) -> np.ndarray:
    _check_state(model, state, i)
    VR = model.diffusion_field(np.asarray(beta, dtype=float), state.states)[i]
    aR = VR @ VR.T
    if not np.all(np.isfinite(aR)):
        raise NumericalError(f"non-finite a_R for particle {i}")
    return aR


def hypo_matrix_aS(model: ModelSpec, theta, state: ParticleSystemState, i: int) -> np.ndarray:
    if model.d_S == 0:
        raise EllipticModelError(f"{model.name} is elliptic (d_S = 0)")
    _check_state(model, state, i)
    alpha_S, _, beta = model.split(theta)
    x = state.states[i]
    JR = model.smooth_jacobian(alpha_S, x)[:, model.d_S:]
    aS = JR @ diffusion_matrix_aR(model, beta, state, i) @ JR.T
    try:
        np.linalg.cholesky(aS)
    except np.linalg.LinAlgError:
        raise HypoellipticityViolation(
            f"a_S is not positive definite at particle {i}: {aS.tolist()}"
        ) from None
    return aS
