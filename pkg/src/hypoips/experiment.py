"""Replicate experiments: configuration, per-replicate runs and summary tables."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .contrast import METHODS, MODES, AdamConfig, estimate
from .errors import ConfigError, HypoIPSError
from .model_core import available_models, default_bounds, get_model
from .simulator import ExperimentDesign, TrajectoryDataset, simulate_ips

__all__ = [
    "ExperimentConfig",
    "SummaryTable",
    "PAPER_ADAM",
    "load_config",
    "run_replicate",
    "run_experiment",
    "estimates_csv_text",
    "read_estimates",
    "summarize",
    "boxplot_csv_text",
    "fmt_float",
]

# optimiser settings used for the published experiments
PAPER_ADAM = {
    ("ifhn", "complete"): {"step_size": 0.01, "iterations": 8000},
    ("ifhn", "partial"): {"step_size": 0.005, "iterations": 5000},
    ("ilangevin1d", "complete"): {"step_size": 0.01, "iterations": 5000},
    ("ilangevin1d", "partial"): {"step_size": 0.01, "iterations": 5000},
}

_CONFIG_KEYS = {"model", "theta_true", "design", "replicates", "methods", "modes", "adam", "bounds",
                "bounds_margin", "seed", "out", "kalman_init", "mc_replicas", "path", "partial_coords"}
_DESIGN_KEYS = {"N", "n", "T", "fine_step", "init_mean", "init_var"}


def fmt_float(x) -> str:
    return format(float(x), ".17g")


def _float_list(v, name):
    try:
        return [float(a) for a in v]
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a list of numbers") from None


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description; ``to_dict`` materialises every default."""

    model: str
    theta_true: tuple
    design: dict
    replicates: int
    methods: tuple
    modes: tuple
    adam: dict
    bounds: dict
    seed: int
    out: str = "out"
    partial_coords: tuple = ()
    kalman_init: dict | None = None
    mc_replicas: int = 1
    path: str = "auto"
    bounds_margin: float = 2.0

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "model" not in raw:
            raise ConfigError("config needs a 'model'")
        name = raw["model"]
        if name not in available_models():
            raise ConfigError(f"unknown model {name!r}; known: {available_models()}")
        model = get_model(name)

        theta = raw.get("theta_true")
        theta = list(model.theta_true) if theta is None else _float_list(theta, "theta_true")
        if len(theta) != model.n_params:
            raise ConfigError(f"theta_true has {len(theta)} entries, {name} needs {model.n_params} "
                              f"({', '.join(model.param_names)})")

        design_raw = dict(raw.get("design") or {})
        bad = set(design_raw) - _DESIGN_KEYS
        if bad:
            raise ConfigError(f"unknown design keys: {sorted(bad)}")
        for key in ("N", "n", "T"):
            if key not in design_raw:
                raise ConfigError(f"design needs {key!r}")
        design = {
            "N": int(design_raw["N"]),
            "n": int(design_raw["n"]),
            "T": float(design_raw["T"]),
            "fine_step": float(design_raw.get("fine_step", 0.0005)),
            "init_mean": design_raw.get("init_mean", 0.0),
            "init_var": design_raw.get("init_var", 1.0),
        }
        for key in ("init_mean", "init_var"):
            v = design[key]
            design[key] = float(v) if np.isscalar(v) else _float_list(v, f"design.{key}")

        seed = int(raw.get("seed", 0))
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        try:
            ExperimentDesign(seed=seed, **{k: (tuple(v) if isinstance(v, list) else v) for k, v in design.items()})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid design: {exc}") from None

        replicates = int(raw.get("replicates", 1))
        if replicates < 0:
            raise ConfigError("replicates must be >= 0")
        methods = tuple(raw.get("methods", ["LG"]))
        modes = tuple(raw.get("modes", ["complete"]))
        for m in methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {list(METHODS)}")
        for m in modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}; choose from {list(MODES)}")
        if not methods or not modes:
            raise ConfigError("methods and modes must be nonempty")
        if "LG-biased-poke09" in methods and "partial" in modes:
            raise ConfigError("the biased-poke09 variant is only defined for complete observations")

        partial = raw.get("partial_coords")
        partial = tuple(model.partial_coords or ()) if partial is None else tuple(int(c) for c in partial)
        if "partial" in modes:
            if not partial:
                raise ConfigError(f"{name} declares no partial-observation coordinates; set partial_coords")
            if len(set(partial)) != len(partial) or min(partial) < 0 or max(partial) >= model.d \
                    or len(partial) >= model.d:
                raise ConfigError(f"partial_coords {list(partial)} invalid for d={model.d}")

        adam_raw = raw.get("adam") or {}
        if not isinstance(adam_raw, dict):
            raise ConfigError("adam must be an object")
        per_mode = set(adam_raw) <= set(MODES) and bool(adam_raw)
        adam = {}
        for mode in MODES:
            base = dict(PAPER_ADAM.get((name, mode), {}))
            base.update(adam_raw.get(mode, {}) if per_mode else adam_raw)
            try:
                adam[mode] = AdamConfig(**base).to_dict()
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid adam settings for {mode}: {exc}") from None

        margin = float(raw.get("bounds_margin", 2.0))
        if margin <= 1.0:
            raise ConfigError("bounds_margin must exceed 1")
        bounds_raw = raw.get("bounds")
        if bounds_raw is None:
            lo, hi = default_bounds(theta, margin)
            bounds = {"lower": lo.tolist(), "upper": hi.tolist()}
        else:
            try:
                bounds = {"lower": _float_list(bounds_raw["lower"], "bounds.lower"),
                          "upper": _float_list(bounds_raw["upper"], "bounds.upper")}
            except (KeyError, TypeError):
                raise ConfigError("bounds must have 'lower' and 'upper' lists") from None
        if len(bounds["lower"]) != model.n_params or len(bounds["upper"]) != model.n_params:
            raise ConfigError("bounds length does not match the parameter vector")
        if any(l > u for l, u in zip(bounds["lower"], bounds["upper"])):
            raise ConfigError("bounds lower exceeds upper")

        kalman_init = raw.get("kalman_init")
        if kalman_init is not None:
            if not isinstance(kalman_init, dict) or set(kalman_init) != {"m0", "P0"}:
                raise ConfigError("kalman_init must be an object with 'm0' and 'P0'")
        mc = int(raw.get("mc_replicas", 1))
        if mc < 1:
            raise ConfigError("mc_replicas must be >= 1")
        path = raw.get("path", "auto")
        if path not in ("auto", "gram", "vectorized"):
            raise ConfigError(f"unknown evaluation path {path!r}")
        return cls(name, tuple(theta), design, replicates, methods, modes, adam, bounds, seed,
                   str(raw.get("out", "out")), partial, kalman_init, mc, path, margin)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "theta_true": list(self.theta_true),
            "design": dict(self.design),
            "replicates": self.replicates,
            "methods": list(self.methods),
            "modes": list(self.modes),
            "adam": {k: dict(v) for k, v in self.adam.items()},
            "bounds": {"lower": list(self.bounds["lower"]), "upper": list(self.bounds["upper"])},
            "bounds_margin": self.bounds_margin,
            "seed": self.seed,
            "out": self.out,
            "partial_coords": list(self.partial_coords),
            "kalman_init": self.kalman_init,
            "mc_replicas": self.mc_replicas,
            "path": self.path,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = self.to_dict()
        d["seed"] = seed
        return ExperimentConfig.from_dict(d)

    # -- derived objects ---------------------------------------------------------
    def experiment_design(self) -> ExperimentDesign:
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in self.design.items()}
        return ExperimentDesign(seed=self.seed, **d)

    def adam_config(self, mode: str) -> AdamConfig:
        return AdamConfig(**self.adam[mode])

    def bounds_arrays(self):
        return np.array(self.bounds["lower"]), np.array(self.bounds["upper"])

    def kalman_prior(self):
        if self.kalman_init is None:
            return None
        return np.asarray(self.kalman_init["m0"], dtype=float), np.asarray(self.kalman_init["P0"], dtype=float)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return ExperimentConfig.from_json(text)


# -- replicate runs -----------------------------------------------------------------

def _dataset_for(config: ExperimentConfig, replicate: int, data_dir: Path | None) -> TrajectoryDataset:
    if data_dir is not None:
        path = Path(data_dir) / f"rep{replicate}.csv"
        if path.exists():
            return TrajectoryDataset.from_csv(path)
    model = get_model(config.model)
    return simulate_ips(model, np.array(config.theta_true), config.experiment_design(), replicate=replicate)


def run_replicate(config: ExperimentConfig, replicate: int, data_dir=None):
    """Estimate every (method, mode) pair on one replicate.

    Returns (rows, timings); a failure is recorded in the row status and the
    remaining pairs still run.
    """
    model = get_model(config.model)
    rows, timings = [], []
    try:
        full = _dataset_for(config, replicate, data_dir)
    except HypoIPSError as exc:
        for mode in config.modes:
            for method in config.methods:
                rows.append(_failed_row(config, replicate, method, mode, exc))
                timings.append((replicate, method, mode, 0.0))
        return rows, timings
    lower, upper = config.bounds_arrays()
    for mode in config.modes:
        data = full if mode == "complete" else full.restrict(config.partial_coords)
        for method in config.methods:
            t0 = time.perf_counter()
            try:
                res = estimate(model, data, method, mode, config.adam_config(mode), (lower, upper),
                               kalman_init=config.kalman_prior(), path=_path_for(config.path, mode))
                if not (np.all(np.isfinite(res.theta_hat)) and math.isfinite(res.final_contrast)):
                    raise HypoIPSError("non-finite estimate")
                rows.append({"replicate": replicate, "method": method, "mode": mode, "status": "ok",
                             "theta_hat": [float(v) for v in res.theta_hat],
                             "final_contrast": float(res.final_contrast), "theta_true": list(config.theta_true)})
            except (HypoIPSError, ArithmeticError, np.linalg.LinAlgError) as exc:
                rows.append(_failed_row(config, replicate, method, mode, exc))
            timings.append((replicate, method, mode, time.perf_counter() - t0))
    return rows, timings


def _path_for(path: str, mode: str) -> str:
    # the evaluation-path switch only concerns complete-observation contrasts
    return path if mode == "complete" else "auto"


def _failed_row(config, replicate, method, mode, exc):
    return {"replicate": replicate, "method": method, "mode": mode, "status": f"failed:{type(exc).__name__}",
            "theta_hat": [float("nan")] * len(config.theta_true), "final_contrast": float("nan"),
            "theta_true": list(config.theta_true), "error": str(exc)}


def _worker(args):
    cfg_json, replicate, data_dir = args
    return run_replicate(ExperimentConfig.from_json(cfg_json), replicate, data_dir)


def run_experiment(config: ExperimentConfig, workers: int = 1, data_dir=None):
    """All replicates, in a process pool when ``workers > 1``; results are ordered by replicate."""
    reps = list(range(config.replicates))
    if workers <= 1 or len(reps) <= 1:
        results = [run_replicate(config, k, data_dir) for k in reps]
    else:
        payload = [(config.to_json(), k, None if data_dir is None else str(data_dir)) for k in reps]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_worker, payload))
    rows = [r for res in results for r in res[0]]
    timings = [t for res in results for t in res[1]]
    order = {m: i for i, m in enumerate(METHODS)}
    mode_order = {m: i for i, m in enumerate(MODES)}

    def key(r):
        return (r["replicate"], order[r["method"]], mode_order[r["mode"]])

    rows.sort(key=key)
    timings.sort(key=lambda t: (t[0], order[t[1]], mode_order[t[2]]))
    return rows, timings


# -- CSV / summaries ------------------------------------------------------------------

def estimates_csv_text(rows, param_names) -> str:
    header = (["replicate", "method", "mode", "status"] + [f"{p}_hat" for p in param_names]
              + ["final_contrast"] + [f"true_{p}" for p in param_names])
    lines = [",".join(header)]
    for r in rows:
        vals = ([str(r["replicate"]), r["method"], r["mode"], r["status"]]
                + [fmt_float(v) for v in r["theta_hat"]] + [fmt_float(r["final_contrast"])]
                + [fmt_float(v) for v in r["theta_true"]])
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def read_estimates(path):
    """Parse estimates.csv back into (param_names, rows)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"estimates file not found: expected {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        params = [f[:-4] for f in fields if f.endswith("_hat")]
        rows = []
        for rec in reader:
            rows.append({
                "replicate": int(rec["replicate"]),
                "method": rec["method"],
                "mode": rec["mode"],
                "status": rec["status"],
                "theta_hat": [float(rec[f"{p}_hat"]) for p in params],
                "final_contrast": float(rec["final_contrast"]),
                "theta_true": [float(rec[f"true_{p}"]) for p in params],
            })
    return params, rows


def _five(x):
    return [float(v) for v in np.quantile(x, [0.0, 0.25, 0.5, 0.75, 1.0])]


@dataclass
class SummaryTable:
    """Relative discrepancies (theta_hat - theta_true) / theta_true per (method, mode, component)."""

    param_names: list
    entries: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"param_names": list(self.param_names), "entries": self.entries}

    def lookup(self, method, mode, component):
        for e in self.entries:
            if (e["method"], e["mode"], e["component"]) == (method, mode, component):
                return e
        raise KeyError((method, mode, component))


def summarize(param_names, rows) -> SummaryTable:
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["mode"]), []).append(r)
    table = SummaryTable(list(param_names))
    order = {m: i for i, m in enumerate(METHODS)}
    for (method, mode) in sorted(groups, key=lambda g: (order.get(g[0], 99), g[1])):
        grp = groups[(method, mode)]
        ok = [r for r in grp if r["status"] == "ok"]
        for k, p in enumerate(param_names):
            rel = np.array([(r["theta_hat"][k] - r["theta_true"][k]) / r["theta_true"][k] for r in ok])
            entry = {"method": method, "mode": mode, "component": p, "replicates": len(grp),
                     "ok": len(ok), "failures": len(grp) - len(ok)}
            if rel.size:
                entry["mean"] = float(rel.mean())
                entry["stddev"] = float(rel.std(ddof=1)) if rel.size > 1 else None
                entry["five_number"] = _five(rel)
            else:
                entry.update(mean=None, stddev=None, five_number=None)
            table.entries.append(entry)
    return table


def boxplot_csv_text(table: SummaryTable) -> str:
    lines = ["component,method,mode,min,q1,median,q3,max"]
    for e in table.entries:
        if e["five_number"] is None:
            continue
        lines.append(",".join([e["component"], e["method"], e["mode"]] + [fmt_float(v) for v in e["five_number"]]))
    return "\n".join(lines) + "\n"


def summary_json_text(table: SummaryTable) -> str:
    return json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n"


def timings_csv_text(timings) -> str:
    buf = io.StringIO()
    buf.write("replicate,method,mode,wall_seconds\n")
    for rep, method, mode, secs in timings:
        buf.write(f"{rep},{method},{mode},{secs:.6f}\n")
    return buf.getvalue()
