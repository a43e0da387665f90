"""Marginal likelihood for partially observed LG systems via a Kalman recursion.

When the hidden coordinates enter the LG one-step map affinely, with
coefficients that depend only on observed quantities, each particle follows

    z_{j+1} = A_j + B_j h_j + eps_j,   eps_j ~ N(0, Q_j),

where z is the full state, h its hidden part, and A, B, Q are functions of
the observed cloud at t_j. Particles are conditionally independent given the
observed interaction terms, so the marginal log-likelihood is a sum of
per-particle Kalman filters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .contrast import GramQuadratic, state_free_sigma
from .errors import (
    DataError,
    FilterDegeneracy,
    NotConditionallyLinear,
    OracleSizeError,
    ShapeError,
    StructureError,
)
from .lg_transition import lg_mean_sigma, residual_scale
from .model_core import ModelSpec
from .simulator import TrajectoryDataset

__all__ = [
    "ConditionallyLinearCoeffs",
    "FilterState",
    "factor_conditionally_linear",
    "factor_dataset",
    "kalman_marginal_loglik",
    "kalman_filter",
    "KalmanObjective",
    "dense_joint_oracle",
    "reconstruct_velocity",
    "em_partial_baseline_contrast",
    "EMPartialContrast",
]

AFFINE_TOL = 1e-10
LOG_2PI = math.log(2.0 * math.pi)
STATIONARY_TOL = 1e-15


@dataclass
class ConditionallyLinearCoeffs:
    """A (..., N, d), B (..., N, d, d_h), Q (..., N, d, d); leading axes may broadcast."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    observed_coords: tuple[int, ...]
    hidden_coords: tuple[int, ...]


@dataclass
class FilterState:
    mean: np.ndarray
    cov: np.ndarray
    loglik_accum: float = 0.0


def _split_coords(d, observed_coords):
    observed = tuple(sorted(int(c) for c in observed_coords))
    hidden = tuple(c for c in range(d) if c not in observed)
    if not hidden:
        raise ShapeError("partial observation needs at least one hidden coordinate")
    return observed, hidden


def _embed(obs, observed, hidden, d, hidden_values=None):
    """Full states with observed columns from ``obs`` and hidden columns set to ``hidden_values``."""
    X = np.zeros(obs.shape[:-1] + (d,))
    X[..., list(observed)] = obs
    if hidden_values is not None:
        X[..., list(hidden)] = hidden_values
    return X


def _unscale(d_S, d_R, delta):
    return 1.0 / residual_scale(d_S, d_R, delta)


def _check_affine(probe0, probe1, probe2, coordinate, what):
    err = np.max(np.abs(probe2 - 2.0 * probe1 + probe0))
    size = 1.0 + np.max(np.abs(probe0)) + np.max(np.abs(probe1))
    if not err <= AFFINE_TOL * size:
        raise NotConditionallyLinear(
            f"{what} is not affine in hidden coordinate {coordinate} (second difference {err:.3g})",
            coordinate=coordinate,
        )


def factor_conditionally_linear(model: ModelSpec, theta, observed_slice, delta: float, observed_coords,
                                validate: bool = True) -> ConditionallyLinearCoeffs:
    """Affine-in-hidden factorisation of the LG map by numeric probing.

    ``observed_slice`` holds the observed coordinates of every particle, shape
    (..., N, d_o). The LG mean is evaluated with the hidden block set to 0 and
    to e_k; with ``validate`` it is also evaluated at 2 e_k (affineness) and at
    particle-dependent hidden values (no hidden dependence through the
    empirical measure, and Sigma free of hidden values).
    """
    obs = np.asarray(observed_slice, dtype=float)
    d = model.d
    observed, hidden = _split_coords(d, observed_coords)
    if obs.shape[-1] != len(observed):
        raise ShapeError(f"observed slice has {obs.shape[-1]} columns, expected {len(observed)}")
    dh = len(hidden)
    unscale = _unscale(model.d_S, model.d_R, delta)

    X0 = _embed(obs, observed, hidden, d)
    mean0, sigma0 = lg_mean_sigma(model, theta, X0, delta)
    B = np.empty(obs.shape[:-1] + (d, dh))
    for k in range(dh):
        e = np.zeros(dh)
        e[k] = 1.0
        mean1, sigma1 = lg_mean_sigma(model, theta, _embed(obs, observed, hidden, d, e), delta)
        B[..., k] = mean1 - mean0
        if validate:
            mean2, sigma2 = lg_mean_sigma(model, theta, _embed(obs, observed, hidden, d, 2 * e), delta)
            _check_affine(mean0, mean1, mean2, hidden[k], "LG mean")
            _check_affine(sigma0, sigma1, sigma2, hidden[k], "Sigma")
            if np.max(np.abs(sigma1 - sigma0)) > AFFINE_TOL * (1.0 + np.max(np.abs(sigma0))):
                raise NotConditionallyLinear(
                    f"Sigma depends on hidden coordinate {hidden[k]}", coordinate=hidden[k])
    if validate:
        N = obs.shape[-2]
        shifts = np.linspace(-1.0, 1.0, N)[:, None] * (1.0 + np.arange(dh))[None, :]
        shifts = np.broadcast_to(shifts, obs.shape[:-1] + (dh,))
        mean_v, _ = lg_mean_sigma(model, theta, _embed(obs, observed, hidden, d, shifts), delta)
        pred = mean0 + np.einsum("...ik,...k->...i", B, shifts)
        err = np.max(np.abs(mean_v - pred))
        if not err <= AFFINE_TOL * (1.0 + np.max(np.abs(mean0))):
            raise NotConditionallyLinear(
                f"hidden coordinates enter through the empirical measure (mismatch {err:.3g})",
                coordinate=hidden[0])
    Q = sigma0 * unscale[:, None] * unscale[None, :]
    return ConditionallyLinearCoeffs(mean0, B, Q, observed, hidden)


# -- feature-based factorisation ------------------------------------------------------

class _FeatureFactor:
    """Parameter-free pieces of A and B for models with linear mean features.

    A = X_base + M phi_0 and B[:, k] = e_k + M dphi_k with phi_0 the features at
    hidden = 0 and dphi_k the feature change for a unit hidden shift.
    """

    def __init__(self, model: ModelSpec, obs: np.ndarray, observed, hidden):
        d, dh = model.d, len(hidden)
        self.X_base = _embed(obs, observed, hidden, d)
        self.phi0 = model.mean_features(self.X_base)
        dphis = []
        for k in range(dh):
            e = np.zeros(dh)
            e[k] = 1.0
            phi1 = model.mean_features(_embed(obs, observed, hidden, d, e))
            phi2 = model.mean_features(_embed(obs, observed, hidden, d, 2 * e))
            _check_affine(self.phi0, phi1, phi2, hidden[k], "mean features")
            dphis.append(phi1 - self.phi0)
        N = obs.shape[-2]
        shifts = np.linspace(-1.0, 1.0, N)[:, None] * (1.0 + np.arange(dh))[None, :]
        shifts = np.broadcast_to(shifts, obs.shape[:-1] + (dh,))
        phi_v = model.mean_features(_embed(obs, observed, hidden, d, shifts))
        pred = self.phi0 + sum(shifts[..., k:k + 1] * dphis[k] for k in range(dh))
        if np.max(np.abs(phi_v - pred)) > AFFINE_TOL * (1.0 + np.max(np.abs(self.phi0))):
            raise NotConditionallyLinear("hidden coordinates enter through the empirical measure",
                                         coordinate=hidden[0])
        self.dphi = np.stack(dphis, axis=-1)  # (..., N, k, dh)
        flat = self.dphi.reshape(-1, *self.dphi.shape[-2:])
        self.shared_dphi = flat[0] if np.all(flat == flat[0]) else None
        self.unit = np.zeros((d, dh))
        for k, c in enumerate(hidden):
            self.unit[c, k] = 1.0

    def coeffs(self, model, theta, delta):
        M = model.mean_coefficients(theta, delta, True)
        if self.shared_dphi is not None:
            B = self.unit + M @ self.shared_dphi
        else:
            B = self.unit + np.einsum("ak,...kh->...ah", M, self.dphi)
        return M, B


def factor_dataset(model: ModelSpec, theta, dataset: TrajectoryDataset, path: str = "auto",
                   validate: bool = True) -> ConditionallyLinearCoeffs:
    """Coefficients for every step j = 0..n-1 of a partially observed dataset."""
    if path == "auto":
        path = "features" if (model.has_linear_features and model.sigma_state_free) else "probe"
    obs = dataset.values[:-1]
    if path == "probe":
        return factor_conditionally_linear(model, theta, obs, dataset.delta, dataset.observed_coords, validate)
    observed, hidden = _split_coords(model.d, dataset.observed_coords)
    ff = _FeatureFactor(model, obs, observed, hidden)
    M, B = ff.coeffs(model, theta, dataset.delta)
    A = ff.X_base + ff.phi0 @ M.T
    unscale = _unscale(model.d_S, model.d_R, dataset.delta)
    Q = state_free_sigma(model, theta) * unscale[:, None] * unscale[None, :]
    return ConditionallyLinearCoeffs(A, B, Q, observed, hidden)


# -- numba kernels ---------------------------------------------------------------------

@njit(cache=True)
def _chol(S, L):
    p = S.shape[0]
    for a in range(p):
        for b in range(p):
            L[a, b] = 0.0
    for a in range(p):
        for b in range(a + 1):
            s = S[a, b]
            for c in range(b):
                s -= L[a, c] * L[b, c]
            if a == b:
                if not s > 0.0:
                    return False
                L[a, a] = math.sqrt(s)
            else:
                L[a, b] = s / L[b, b]
    return True


@njit(cache=True)
def _spd_inv(S, Sinv, L, Linv):
    """Inverse and log-determinant of a small SPD matrix; returns (ok, logdet)."""
    p = S.shape[0]
    if not _chol(S, L):
        return False, 0.0
    logdet = 0.0
    for a in range(p):
        logdet += 2.0 * math.log(L[a, a])
        for b in range(p):
            Linv[a, b] = 0.0
    for a in range(p):
        Linv[a, a] = 1.0 / L[a, a]
        for b in range(a):
            s = 0.0
            for c in range(b, a):
                s -= L[a, c] * Linv[c, b]
            Linv[a, b] = s / L[a, a]
    for a in range(p):
        for b in range(p):
            s = 0.0
            for c in range(max(a, b), p):
                s += Linv[c, a] * Linv[c, b]
            Sinv[a, b] = s
    return True, logdet


@njit(cache=True)
def _predict_update(m, P, a, B, Q, o_next, oidx, hidx, m_out, P_out, K, Sinv, L, Linv, C, mean, S, e):
    """One predict/condition step; returns (ok, quad, logdetS) and writes m_out, P_out, K, Sinv."""
    d = a.shape[0]
    dh = hidx.shape[0]
    do = oidx.shape[0]
    for r in range(d):
        s = a[r]
        for k in range(dh):
            s += B[r, k] * m[k]
        mean[r] = s
    # C = B P B^T + Q
    for r in range(d):
        for c in range(d):
            s = Q[r, c]
            for k in range(dh):
                bk = B[r, k]
                if bk != 0.0:
                    for l in range(dh):
                        s += bk * P[k, l] * B[c, l]
            C[r, c] = s
    for r in range(do):
        for c in range(do):
            S[r, c] = C[oidx[r], oidx[c]]
    ok, logdet = _spd_inv(S, Sinv, L, Linv)
    if not ok:
        return False, 0.0, 0.0
    for r in range(do):
        e[r] = o_next[r] - mean[oidx[r]]
    quad = 0.0
    for r in range(do):
        for c in range(do):
            quad += e[r] * Sinv[r, c] * e[c]
    for h in range(dh):
        for c in range(do):
            s = 0.0
            for r in range(do):
                s += C[hidx[h], oidx[r]] * Sinv[r, c]
            K[h, c] = s
    for h in range(dh):
        s = mean[hidx[h]]
        for c in range(do):
            s += K[h, c] * e[c]
        m_out[h] = s
    # Joseph form of the conditional covariance: [-K, I] C [-K, I]^T.
    for h1 in range(dh):
        for h2 in range(dh):
            s = C[hidx[h1], hidx[h2]]
            for r in range(do):
                s -= K[h1, r] * C[oidx[r], hidx[h2]] + C[hidx[h1], oidx[r]] * K[h2, r]
                for c in range(do):
                    s += K[h1, r] * C[oidx[r], oidx[c]] * K[h2, c]
            P_out[h1, h2] = s
    for h1 in range(dh):
        for h2 in range(h1):
            v = 0.5 * (P_out[h1, h2] + P_out[h2, h1])
            P_out[h1, h2] = v
            P_out[h2, h1] = v
    return True, quad, logdet


@njit(cache=True)
def _kalman_general(obs_next, A, B, Q, oidx, hidx, m0, P0, means_out, store):
    n, N, do = obs_next.shape
    d = A.shape[2]
    dh = hidx.shape[0]
    ll = np.zeros(N)
    m = np.empty(dh)
    P = np.empty((dh, dh))
    m_new = np.empty(dh)
    P_new = np.empty((dh, dh))
    K = np.empty((dh, do))
    Sinv = np.empty((do, do))
    L = np.empty((do, do))
    Linv = np.empty((do, do))
    C = np.empty((d, d))
    mean = np.empty(d)
    S = np.empty((do, do))
    e = np.empty(do)
    for i in range(N):
        m[:] = m0
        P[:, :] = P0
        if store:
            means_out[0, i, :] = m
        acc = 0.0
        for j in range(n):
            ok, quad, logdet = _predict_update(m, P, A[j, i], B[j, i], Q[j, i], obs_next[j, i], oidx, hidx,
                                               m_new, P_new, K, Sinv, L, Linv, C, mean, S, e)
            if not ok:
                return ll, j, i
            acc += quad + logdet + do * 1.8378770664093453
            m[:] = m_new
            P[:, :] = P_new
            if store:
                means_out[j + 1, i, :] = m
        ll[i] = -0.5 * acc
    return ll, -1, -1


@njit(cache=True)
def _shared_gains(n, B, Q, oidx, hidx, m0, P0):
    """Covariance recursion when B and Q are common to all steps and particles.

    Once the Riccati iteration is stationary to rounding the remaining gains
    are copied instead of recomputed.
    """
    d = B.shape[0]
    dh = hidx.shape[0]
    do = oidx.shape[0]
    Ks = np.empty((n, dh, do))
    Sinvs = np.empty((n, do, do))
    logdets = np.empty(n)
    P = P0.copy()
    P_new = np.empty((dh, dh))
    m_dummy = np.zeros(dh)
    m_new = np.empty(dh)
    a = np.zeros(d)
    o = np.zeros(do)
    K = np.empty((dh, do))
    Sinv = np.empty((do, do))
    L = np.empty((do, do))
    Linv = np.empty((do, do))
    C = np.empty((d, d))
    mean = np.empty(d)
    S = np.empty((do, do))
    e = np.empty(do)
    for j in range(n):
        ok, quad, logdet = _predict_update(m_dummy, P, a, B, Q, o, oidx, hidx, m_new, P_new, K, Sinv, L, Linv,
                                           C, mean, S, e)
        if not ok:
            return Ks, Sinvs, logdets, j
        Ks[j] = K
        Sinvs[j] = Sinv
        logdets[j] = logdet
        change = 0.0
        size = 0.0
        for h1 in range(dh):
            for h2 in range(dh):
                change = max(change, abs(P_new[h1, h2] - P[h1, h2]))
                size = max(size, abs(P[h1, h2]))
        P[:, :] = P_new
        if j > 0 and change <= STATIONARY_TOL * size:
            for jj in range(j + 1, n):
                Ks[jj] = K
                Sinvs[jj] = Sinv
                logdets[jj] = logdet
            break
    return Ks, Sinvs, logdets, -1


@njit(cache=True, fastmath=True)
def _shared_means(obs_T, ext, W_obs, bias, M_ext, B, Ks, Sinvs, oidx, hidx, m0, means_out, store):
    """Mean recursion and innovation quadratic forms, particle index innermost.

    ``obs_T`` is (n+1, d_o, N) and ``ext`` (n, k_e, N). The one-step mean is
    bias + W_obs o_j + M_ext ext_j + B h_j, so only features that are neither
    constant nor copies of an observed coordinate are streamed from memory.
    """
    n = ext.shape[0]
    k_ext = ext.shape[1]
    do = obs_T.shape[1]
    N = obs_T.shape[2]
    d = W_obs.shape[0]
    dh = hidx.shape[0]
    quad = np.zeros(N)
    m = np.empty((dh, N))
    for h in range(dh):
        m[h, :] = m0[h]
    if store:
        for h in range(dh):
            means_out[0, h, :] = m0[h]
    mean = np.empty((d, N))
    e = np.empty((do, N))
    for j in range(n):
        for r in range(d):
            b = bias[r]
            for i in range(N):
                mean[r, i] = b
            for q in range(do):
                c = W_obs[r, q]
                if c != 0.0:
                    for i in range(N):
                        mean[r, i] += c * obs_T[j, q, i]
            for q in range(k_ext):
                c = M_ext[r, q]
                if c != 0.0:
                    for i in range(N):
                        mean[r, i] += c * ext[j, q, i]
            for h in range(dh):
                c = B[r, h]
                if c != 0.0:
                    for i in range(N):
                        mean[r, i] += c * m[h, i]
        for r in range(do):
            for i in range(N):
                e[r, i] = obs_T[j + 1, r, i] - mean[oidx[r], i]
        for r in range(do):
            for c2 in range(do):
                w = Sinvs[j, r, c2]
                for i in range(N):
                    quad[i] += w * e[r, i] * e[c2, i]
        for h in range(dh):
            for i in range(N):
                m[h, i] = mean[hidx[h], i]
            for c2 in range(do):
                k = Ks[j, h, c2]
                for i in range(N):
                    m[h, i] += k * e[c2, i]
        if store:
            for h in range(dh):
                for i in range(N):
                    means_out[j + 1, h, i] = m[h, i]
    return quad


def _compress_features(phi0, obs):
    """Sort feature columns into constants, copies of observed columns, and the rest.

    Returns (const_cols, const_vals, copy_cols, copy_src, ext_cols).
    """
    const_cols, const_vals, copy_cols, copy_src, ext_cols = [], [], [], [], []
    for q in range(phi0.shape[-1]):
        col = phi0[..., q]
        first = col.reshape(-1)[0]
        if np.all(col == first):
            const_cols.append(q)
            const_vals.append(float(first))
            continue
        match = [r for r in range(obs.shape[-1]) if np.array_equal(col, obs[..., r])]
        if match:
            copy_cols.append(q)
            copy_src.append(match[0])
        else:
            ext_cols.append(q)
    return const_cols, np.array(const_vals), copy_cols, copy_src, ext_cols


# -- public filtering API ----------------------------------------------------------------

def _prior(init, dh):
    if init is None:
        return np.zeros(dh), np.eye(dh)
    m0, P0 = init
    m0 = np.broadcast_to(np.asarray(m0, dtype=float), (dh,)).copy()
    P0 = np.asarray(P0, dtype=float)
    if P0.ndim == 0:
        P0 = np.eye(dh) * float(P0)
    return m0, np.ascontiguousarray(P0.reshape(dh, dh))


def _run_general(coeffs: ConditionallyLinearCoeffs, obs_next, m0, P0, store):
    n, N, _ = obs_next.shape
    d = coeffs.A.shape[-1]
    dh = len(coeffs.hidden_coords)
    A = np.ascontiguousarray(np.broadcast_to(coeffs.A, (n, N, d)))
    B = np.ascontiguousarray(np.broadcast_to(coeffs.B, (n, N, d, dh)))
    Q = np.ascontiguousarray(np.broadcast_to(coeffs.Q, (n, N, d, d)))
    means = np.empty((n + 1, N, dh)) if store else np.empty((1, 1, dh))
    ll, bad_j, bad_i = _kalman_general(np.ascontiguousarray(obs_next), A, B, Q,
                                       np.asarray(coeffs.observed_coords, dtype=np.int64),
                                       np.asarray(coeffs.hidden_coords, dtype=np.int64), m0, P0, means, store)
    if bad_j >= 0:
        raise FilterDegeneracy(f"innovation covariance not SPD at step {bad_j}, particle {bad_i}",
                               step=int(bad_j), particle=int(bad_i))
    return ll, (means if store else None)


class KalmanObjective:
    """theta -> negative marginal log-likelihood of a partially observed dataset.

    Dataset-dependent pieces (embedded states, features, affineness checks) are
    prepared once; each call then costs one pass of the filter.
    """

    def __init__(self, model: ModelSpec, dataset: TrajectoryDataset, init=None, path: str = "auto"):
        if dataset.is_complete:
            raise ShapeError("Kalman marginal likelihood needs a partially observed dataset")
        if dataset.values.shape[2] != len(dataset.observed_coords) or dataset.d != model.d:
            raise ShapeError("dataset dimensions do not match the model")
        if not np.all(np.isfinite(dataset.values)):
            raise DataError("dataset contains non-finite values")
        self.model = model
        self.dataset = dataset
        self.observed, self.hidden = _split_coords(model.d, dataset.observed_coords)
        self.m0, self.P0 = _prior(init, len(self.hidden))
        if path == "auto":
            path = "features" if (model.has_linear_features and model.sigma_state_free) else "probe"
        if path not in ("features", "probe"):
            raise ValueError(f"unknown path {path!r}")
        self.path = path
        self.obs_next = np.ascontiguousarray(dataset.values[1:])
        self._validated = False
        if path == "features":
            self._ff = _FeatureFactor(model, dataset.values[:-1], self.observed, self.hidden)
            self._oidx = np.asarray(self.observed, dtype=np.int64)
            self._hidx = np.asarray(self.hidden, dtype=np.int64)
            if self._ff.shared_dphi is not None:
                obs = dataset.values
                parts = _compress_features(self._ff.phi0, obs[:-1])
                self._const_cols, self._const_vals, self._copy_cols, self._copy_src, ext_cols = parts
                self._ext_cols = ext_cols
                self._obs_T = np.ascontiguousarray(obs.transpose(0, 2, 1))
                self._ext_T = np.ascontiguousarray(self._ff.phi0[..., ext_cols].transpose(0, 2, 1))
                self._obs_embed = np.zeros((model.d, len(self.observed)))
                for r, c in enumerate(self.observed):
                    self._obs_embed[c, r] = 1.0

    def loglik(self, theta, store_means: bool = False):
        theta = np.asarray(theta, dtype=float)
        model, ds = self.model, self.dataset
        if self.path == "probe":
            coeffs = factor_conditionally_linear(model, theta, ds.values[:-1], ds.delta, ds.observed_coords,
                                                 validate=not self._validated)
            self._validated = True
            ll, means = _run_general(coeffs, self.obs_next, self.m0, self.P0, store_means)
            return float(np.sum(ll)), means
        ff = self._ff
        M, B = ff.coeffs(model, theta, ds.delta)
        unscale = _unscale(model.d_S, model.d_R, ds.delta)
        Q = state_free_sigma(model, theta) * unscale[:, None] * unscale[None, :]
        if ff.shared_dphi is None:
            coeffs = ConditionallyLinearCoeffs(ff.X_base + ff.phi0 @ M.T, B, Q, self.observed, self.hidden)
            ll, means = _run_general(coeffs, self.obs_next, self.m0, self.P0, store_means)
            return float(np.sum(ll)), means
        n, N, do = self.obs_next.shape
        Ks, Sinvs, logdets, bad = _shared_gains(n, np.ascontiguousarray(B), np.ascontiguousarray(Q),
                                                self._oidx, self._hidx, self.m0, self.P0)
        if bad >= 0:
            raise FilterDegeneracy(f"innovation covariance not SPD at step {bad}", step=int(bad), particle=0)
        dh = len(self.hidden)
        W_obs = self._obs_embed.copy()
        for q, r in zip(self._copy_cols, self._copy_src):
            W_obs[:, r] += M[:, q]
        bias = M[:, self._const_cols] @ self._const_vals if self._const_cols else np.zeros(model.d)
        M_ext = np.ascontiguousarray(M[:, self._ext_cols])
        means = np.empty((n + 1, dh, N)) if store_means else np.empty((1, dh, 1))
        quad = _shared_means(self._obs_T, self._ext_T, W_obs, bias, M_ext, np.ascontiguousarray(B),
                             Ks, Sinvs, self._oidx, self._hidx, self.m0, means, store_means)
        per_particle = -0.5 * (quad + np.sum(logdets) + n * do * LOG_2PI)
        return float(np.sum(per_particle)), (means.transpose(0, 2, 1).copy() if store_means else None)

    def __call__(self, theta) -> float:
        return -self.loglik(theta)[0]


def kalman_marginal_loglik(model: ModelSpec, theta, dataset: TrajectoryDataset, init=None,
                           path: str = "auto") -> float:
    """Sum over particles of the Kalman marginal log-likelihood of the observed coordinates.

    ``init = (m0, P0)`` is the Gaussian prior of the hidden block at t_0
    (default N(0, I)); the observed initial coordinates are conditioned on.
    """
    return KalmanObjective(model, dataset, init, path).loglik(theta)[0]


def kalman_filter(model: ModelSpec, theta, dataset: TrajectoryDataset, init=None, path: str = "auto"):
    """Log-likelihood and filtered hidden means, shape (n+1, N, d_h)."""
    return KalmanObjective(model, dataset, init, path).loglik(theta, store_means=True)


# -- dense oracle ---------------------------------------------------------------------------

def dense_joint_oracle(coeffs: ConditionallyLinearCoeffs, observations, init=None) -> float:
    """Observed-data log-density by building the joint Gaussian explicitly.

    ``observations`` has shape (n+1, N, d_o); row 0 is conditioned on through
    the coefficients. Every variable is written as an affine map of
    xi = (h_0, eps_0, ..., eps_{n-1}) and the stacked observations are
    marginalised with one dense Cholesky factorisation per particle.
    """
    obs = np.asarray(observations, dtype=float)
    n, N = obs.shape[0] - 1, obs.shape[1]
    if n > 32 or N > 4:
        raise OracleSizeError(f"dense oracle limited to n <= 32 and N <= 4 (got n={n}, N={N})")
    observed, hidden = list(coeffs.observed_coords), list(coeffs.hidden_coords)
    d = coeffs.A.shape[-1]
    dh, do = len(hidden), len(observed)
    A = np.broadcast_to(coeffs.A, (n, N, d))
    B = np.broadcast_to(coeffs.B, (n, N, d, dh))
    Q = np.broadcast_to(coeffs.Q, (n, N, d, d))
    m0, P0 = _prior(init, dh)
    dim = dh + n * d
    total = 0.0
    for i in range(N):
        cov_xi = np.zeros((dim, dim))
        cov_xi[:dh, :dh] = P0
        for j in range(n):
            s = dh + j * d
            cov_xi[s:s + d, s:s + d] = Q[j, i]
        h_mean = m0.copy()
        h_map = np.zeros((dh, dim))
        h_map[:, :dh] = np.eye(dh)
        mu = np.empty(n * do)
        G = np.zeros((n * do, dim))
        for j in range(n):
            z_mean = A[j, i] + B[j, i] @ h_mean
            z_map = B[j, i] @ h_map
            s = dh + j * d
            z_map[:, s:s + d] += np.eye(d)
            mu[j * do:(j + 1) * do] = z_mean[observed]
            G[j * do:(j + 1) * do] = z_map[observed]
            h_mean, h_map = z_mean[hidden], z_map[hidden]
        cov = G @ cov_xi @ G.T
        L = np.linalg.cholesky(cov)
        r = np.linalg.solve(L, obs[1:, i, :].reshape(-1) - mu)
        total += -0.5 * (r @ r + 2.0 * np.log(np.diag(L)).sum() + n * do * LOG_2PI)
    return float(total)


# -- Euler-Maruyama baseline for kinetic models -------------------------------------------

def reconstruct_velocity(q, delta: float) -> np.ndarray:
    """Forward differences (q_{j+1} - q_j) / delta for j = 0..n-1."""
    q = np.asarray(q, dtype=float)
    return (q[1:] - q[:-1]) / delta


def _check_kinetic(model: ModelSpec, theta, observed_coords):
    if model.d_S == 0 or model.d_S != model.d_R:
        raise StructureError(f"{model.name}: the baseline needs dX_S = X_R dt (d_S = d_R)")
    alpha_S = model.split(theta)[0]
    x = np.random.default_rng(12345).normal(size=(5, model.d)) * 1.7
    v = model.smooth_drift(alpha_S, x)
    J = model.smooth_jacobian(alpha_S, x)
    target_J = np.concatenate([np.zeros((model.d_S, model.d_S)), np.eye(model.d_R)], axis=1)
    if not (np.allclose(v, x[:, model.d_S:], rtol=0, atol=1e-12) and np.allclose(J, target_J, rtol=0, atol=1e-12)):
        raise StructureError(f"{model.name}: smooth drift is not the rough coordinate; "
                             "finite-difference velocity reconstruction does not apply")
    if tuple(observed_coords) != tuple(range(model.d_S)):
        raise StructureError("the baseline expects exactly the smooth block to be observed")


class EMPartialContrast:
    """Euler contrast on forward-difference velocities (kinetic models, smooth block observed).

    With p_j = (q_{j+1} - q_j) / delta the residual
    r_j = (p_{j+1} - p_j - V_{R,0}(q_{j-1}, p_{j-1}) delta) / sqrt(delta), j = 1..n-2,
    has conditional covariance (2/3) a_R; the contrast is
    sum (3/2) r^T a_R^{-1} r + log det a_R.
    """

    def __init__(self, model: ModelSpec, dataset: TrajectoryDataset, path: str = "auto"):
        theta_probe = np.array(model.theta_true if model.theta_true is not None else np.ones(model.n_params))
        _check_kinetic(model, theta_probe, dataset.observed_coords)
        if dataset.design.n < 3:
            raise ShapeError("need at least three observation steps")
        self.model = model
        self.delta = dataset.delta
        q = dataset.values
        p_hat = reconstruct_velocity(q, self.delta)
        self.Z = np.concatenate([q[:-1], p_hat], axis=-1)
        if path == "auto":
            path = "gram" if (model.has_linear_features and model.sigma_state_free) else "vectorized"
        self.path = path
        dS = model.d_S
        self.scale = residual_scale(0, model.d_R, self.delta)
        if path == "gram":
            Z = self.Z
            self._gram = GramQuadratic(Z[2:, :, dS:] - Z[1:-1, :, dS:], model.mean_features(Z[:-2]), self.scale)

    def __call__(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        model, dS, Z = self.model, self.model.d_S, self.Z
        _check_kinetic(model, theta, tuple(range(dS)))
        if self.path == "gram":
            M = model.mean_coefficients(theta, self.delta, False)[dS:]
            sigma = state_free_sigma(model, theta)[dS:, dS:]
            quad, logdet = self._gram(M, sigma)
            return 1.5 * quad + self._gram.count * logdet
        from .lg_transition import gaussian_quadratic_logdet

        mean, sigma = lg_mean_sigma(model, theta, Z[:-2], self.delta, correction=False)
        drift_step = mean[..., dS:] - Z[:-2, :, dS:]
        r = (Z[2:, :, dS:] - Z[1:-1, :, dS:] - drift_step) * self.scale
        quad, logdet = gaussian_quadratic_logdet(r, sigma[..., dS:, dS:])
        return float(np.sum(1.5 * quad + logdet))


def em_partial_baseline_contrast(model: ModelSpec, theta, dataset: TrajectoryDataset, path: str = "auto") -> float:
    return EMPartialContrast(model, dataset, path)(theta)
