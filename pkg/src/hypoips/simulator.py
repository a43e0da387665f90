"""Synthetic data: fine-grid Euler-Maruyama for the N-particle system, then subsampling."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import BlowupError, DataError, ShapeError
from .lg_transition import generator_terms
from .model_core import ModelSpec, ParameterVector, ParticleSystemState
from .rng import particle_stream

__all__ = [
    "ExperimentDesign",
    "TrajectoryDataset",
    "IntegratedNoisePair",
    "simulate_ips",
    "sample_correlated_noise",
    "lg_one_step_sample",
    "BLOWUP_THRESHOLD",
    "FORMAT_VERSION",
]

BLOWUP_THRESHOLD = 1e12
FORMAT_VERSION = "1"
_NOISE_BLOCK = 2000


@dataclass(frozen=True)
class ExperimentDesign:
    N: int
    n: int
    T: float
    fine_step: float = 0.0005
    seed: int = 0
    observed_coords: tuple[int, ...] | None = None
    init_mean: float | tuple[float, ...] = 0.0
    init_var: float | tuple[float, ...] = 1.0

    def __post_init__(self):
        if self.N < 1 or self.n < 1:
            raise ValueError("N and n must be positive")
        if self.T <= 0 or self.fine_step <= 0:
            raise ValueError("T and fine_step must be positive")
        if self.observed_coords is not None:
            coords = tuple(int(c) for c in self.observed_coords)
            if not coords or len(set(coords)) != len(coords):
                raise ValueError("observed_coords must be a nonempty set of indices")
            object.__setattr__(self, "observed_coords", tuple(sorted(coords)))
        for name in ("init_mean", "init_var"):
            v = getattr(self, name)
            if not np.isscalar(v):
                object.__setattr__(self, name, tuple(float(a) for a in v))
        self.subsample_factor  # validates the grid ratio

    @property
    def delta_n(self) -> float:
        return self.T / self.n

    @property
    def subsample_factor(self) -> int:
        ratio = self.delta_n / self.fine_step
        k = int(round(ratio))
        if k < 1 or abs(ratio - k) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"delta_n / fine_step = {ratio} is not a positive integer")
        return k

    def coords_for(self, model: ModelSpec) -> tuple[int, ...]:
        coords = self.observed_coords or tuple(range(model.d))
        if max(coords) >= model.d or min(coords) < 0:
            raise ShapeError(f"observed_coords {coords} out of range for d={model.d}")
        return coords

    def with_(self, **changes) -> "ExperimentDesign":
        data = asdict(self)
        data.update(changes)
        return ExperimentDesign(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["observed_coords"] = None if self.observed_coords is None else list(self.observed_coords)
        for name in ("init_mean", "init_var"):
            if isinstance(d[name], tuple):
                d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentDesign":
        d = dict(d)
        d.pop("delta_n", None)
        return cls(**d)


@dataclass
class TrajectoryDataset:
    """Observations at t_j = j * delta_n, values[j, i, :] = observed coords of particle i."""

    design: ExperimentDesign
    values: np.ndarray
    model_id: str = "custom"
    observed_coords: tuple[int, ...] = ()
    truth: ParameterVector | None = None
    replicate: int = 0
    d: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3:
            raise ShapeError("values must have shape (n+1, N, m)")
        n1, N, m = self.values.shape
        if n1 != self.design.n + 1 or N != self.design.N:
            raise ShapeError(f"values shape {self.values.shape} inconsistent with design (n={self.design.n}, N={self.design.N})")
        if not self.observed_coords:
            self.observed_coords = tuple(range(m))
        self.observed_coords = tuple(int(c) for c in self.observed_coords)
        if len(self.observed_coords) != m:
            raise ShapeError("observed_coords does not match the value columns")
        if self.d is None:
            self.d = m
        if not np.all(np.isfinite(self.values)):
            raise DataError("dataset contains non-finite values")

    @property
    def delta(self) -> float:
        return self.design.delta_n

    @property
    def is_complete(self) -> bool:
        return self.observed_coords == tuple(range(self.d))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.design.n + 1) * self.design.delta_n

    def restrict(self, coords: Sequence[int]) -> "TrajectoryDataset":
        coords = tuple(sorted(int(c) for c in coords))
        cols = [self.observed_coords.index(c) for c in coords]
        return TrajectoryDataset(
            design=self.design.with_(observed_coords=coords),
            values=self.values[:, :, cols],
            model_id=self.model_id,
            observed_coords=coords,
            truth=self.truth,
            replicate=self.replicate,
            d=self.d,
        )

    def relabel(self, perm) -> "TrajectoryDataset":
        return TrajectoryDataset(self.design, self.values[:, np.asarray(perm), :], self.model_id,
                                 self.observed_coords, self.truth, self.replicate, self.d)

    # -- serialisation -----------------------------------------------------------
    def metadata(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model": self.model_id,
            "design": self.design.to_dict(),
            "delta_n": self.design.delta_n,
            "d": self.d,
            "observed_coords": list(self.observed_coords),
            "truth": None if self.truth is None else self.truth.flat.tolist(),
            "truth_lower": None if self.truth is None else self.truth.lower.tolist(),
            "truth_upper": None if self.truth is None else self.truth.upper.tolist(),
            "truth_sizes": None if self.truth is None else list(self.truth.sizes),
            "seed": self.design.seed,
            "replicate": self.replicate,
        }

    def to_csv(self, path) -> tuple[Path, Path]:
        path = Path(path)
        n1, N, m = self.values.shape
        lines = ["t,particle," + ",".join(f"c{k}" for k in range(m))]
        times = self.times
        fmt = ",".join(["{:.17g}"] * m)
        for j in range(n1):
            tj = f"{times[j]:.17g}"
            for i in range(N):
                lines.append(f"{tj},{i}," + fmt.format(*self.values[j, i]))
        path.write_text("\n".join(lines) + "\n")
        meta_path = _meta_path(path)
        meta_path.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")
        return path, meta_path

    @classmethod
    def from_csv(cls, path) -> "TrajectoryDataset":
        path = Path(path)
        meta = json.loads(_meta_path(path).read_text())
        if meta.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported dataset format {meta.get('format_version')!r}")
        design = ExperimentDesign.from_dict(meta["design"])
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        m = raw.shape[1] - 2
        n1, N = design.n + 1, design.N
        if raw.shape[0] != n1 * N:
            raise DataError(f"{path}: expected {n1 * N} rows, found {raw.shape[0]}")
        if not np.array_equal(raw[:, 1].reshape(n1, N), np.tile(np.arange(N), (n1, 1))):
            raise DataError(f"{path}: rows are not ordered by (time, particle)")
        truth = None
        if meta.get("truth") is not None:
            truth = ParameterVector.from_flat(meta["truth"], meta["truth_sizes"],
                                              meta["truth_lower"], meta["truth_upper"])
        return cls(design, raw[:, 2:].reshape(n1, N, m), meta["model"],
                   tuple(meta["observed_coords"]), truth, meta.get("replicate", 0), meta.get("d"))


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name[: -len(path.suffix)] + ".meta.json") if path.suffix else path.with_name(path.name + ".meta.json")


def _init_law(design: ExperimentDesign, d: int):
    mean = np.broadcast_to(np.asarray(design.init_mean, dtype=float), (d,))
    var = np.broadcast_to(np.asarray(design.init_var, dtype=float), (d,))
    if np.any(var < 0):
        raise ValueError("initial variances must be nonnegative")
    return mean, np.sqrt(var)


def _em_increment(model: ModelSpec, alpha_S, alpha_R, beta, X, h, dW):
    VR0 = model.rough_drift_field(alpha_R, X)
    VR = model.diffusion_field(beta, X)
    rough = VR0 * h + np.einsum("...ij,...j->...i", VR, dW)
    if model.d_S:
        return np.concatenate([model.smooth_drift(alpha_S, X) * h, rough], axis=-1)
    return rough


def simulate_ips(model: ModelSpec, theta_true, design: ExperimentDesign, replicate: int = 0,
                 model_id: str | None = None) -> TrajectoryDataset:
    """Euler-Maruyama at ``design.fine_step``, recorded every ``subsample_factor`` steps.

    Particle i draws its initial state and then its Brownian increments from the
    stream keyed by (seed, replicate, i), so results depend only on the seed.
    """
    if isinstance(theta_true, ParameterVector):
        truth = theta_true
    else:
        truth = model.parameter_vector(theta_true)
    theta = truth.flat
    alpha_S, alpha_R, beta = model.split(theta)
    coords = design.coords_for(model)
    N, d, dB = design.N, model.d, model.d_B
    factor = design.subsample_factor
    h = design.delta_n / factor
    sqrt_h = math.sqrt(h)
    mean0, sd0 = _init_law(design, d)

    streams = [particle_stream(design.seed, replicate, i) for i in range(N)]
    X = np.empty((N, d))
    for i, g in enumerate(streams):
        X[i] = mean0 + sd0 * g.standard_normal(d)

    total = design.n * factor
    out = np.empty((design.n + 1, N, len(coords)))
    out[0] = X[:, coords]
    noise = np.empty((0, N, dB))
    k0 = 0
    for k in range(total):
        if k - k0 >= noise.shape[0]:
            block = min(_NOISE_BLOCK, total - k)
            noise = np.empty((block, N, dB))
            for i, g in enumerate(streams):
                noise[:, i, :] = g.standard_normal((block, dB))
            k0 = k
        X = X + _em_increment(model, alpha_S, alpha_R, beta, X, h, noise[k - k0] * sqrt_h)
        if not np.max(np.abs(X)) <= BLOWUP_THRESHOLD:
            bad = np.flatnonzero(~(np.abs(X) <= BLOWUP_THRESHOLD).all(axis=1))
            t = (k + 1) * h
            raise BlowupError(f"particle {bad[0]} diverged at t={t:.6g}", time=t, particle=int(bad[0]))
        if (k + 1) % factor == 0:
            out[(k + 1) // factor] = X[:, coords]
    return TrajectoryDataset(design.with_(observed_coords=coords), out,
                             model_id or model.name, coords, truth, replicate, d)


class IntegratedNoisePair(NamedTuple):
    db: np.ndarray
    idb: np.ndarray


def sample_correlated_noise(delta: float, d_B: int, rng: np.random.Generator, size=()) -> IntegratedNoisePair:
    """Brownian increment and its time integral over one step.

    Per component, (idb, db) has covariance [[delta^3/3, delta^2/2], [delta^2/2, delta]].
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    size = tuple(np.atleast_1d(size)) if size != () else ()
    z = rng.standard_normal(size + (2, d_B))
    z1, z2 = z[..., 0, :], z[..., 1, :]
    db = math.sqrt(delta) * z1
    idb = delta ** 1.5 * (0.5 * z1 + z2 / (2.0 * math.sqrt(3.0)))
    return IntegratedNoisePair(db, idb)


def lg_one_step_sample(model: ModelSpec, theta, state: ParticleSystemState, delta: float,
                       rng: np.random.Generator, noise: IntegratedNoisePair | None = None,
                       correction: bool = True) -> ParticleSystemState:
    """Advance every particle one step of the LG scheme (for moment checks, not data generation)."""
    X = state.states
    if X.shape[1] != model.d:
        raise ShapeError(f"{model.name} expects d={model.d}")
    if noise is None:
        noise = sample_correlated_noise(delta, model.d_B, rng, size=X.shape[0])
    terms = generator_terms(model, theta, X)
    rough = X[:, model.d_S:] + terms["VR0"] * delta + np.einsum("nij,nj->ni", terms["VR"], noise.db)
    if model.d_S:
        smooth = X[:, : model.d_S] + terms["VS0"] * delta + np.einsum("nij,nj->ni", terms["Lk"], noise.idb)
        if correction:
            smooth = smooth + terms["L0"] * delta * delta / 2.0
        Xn = np.concatenate([smooth, rough], axis=1)
    else:
        Xn = rough
    if not np.max(np.abs(Xn)) <= BLOWUP_THRESHOLD:
        bad = int(np.flatnonzero(~(np.abs(Xn) <= BLOWUP_THRESHOLD).all(axis=1))[0])
        raise BlowupError(f"particle {bad} diverged", time=state.time + delta, particle=bad)
    return ParticleSystemState(state.time + delta, Xn)
