"""Command-line front end: ``hypoips {simulate,estimate,experiment,asymptotics}``.

Exit codes: 0 success, 2 configuration error, 3 every replicate failed.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import experiment as ex
from .asymptotics import clt_diagnostic, plugin_precision
from .errors import ConfigError, HypoIPSError
from .model_core import get_model
from .simulator import TrajectoryDataset, simulate_ips

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ALL_FAILED = 3

# replicate offset for Monte Carlo clouds, keeps them disjoint from estimation data
MC_REPLICATE_OFFSET = 1_000_000


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _resolve(args) -> tuple[ex.ExperimentConfig, Path]:
    config = ex.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    out = Path(args.out) if getattr(args, "out", None) else Path(config.out)
    return config, out


# -- simulate --------------------------------------------------------------------------

def _simulate_one(args):
    cfg_json, replicate, out = args
    config = ex.ExperimentConfig.from_json(cfg_json)
    model = get_model(config.model)
    try:
        ds = simulate_ips(model, np.array(config.theta_true), config.experiment_design(), replicate=replicate)
    except HypoIPSError as exc:
        return {"replicate": replicate, "status": f"failed:{type(exc).__name__}", "error": str(exc)}
    ds.to_csv(Path(out) / f"rep{replicate}.csv")
    return {"replicate": replicate, "status": "ok", "file": f"rep{replicate}.csv"}


def cmd_simulate(config: ex.ExperimentConfig, out: Path, workers: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(config.to_json(), k, str(out)) for k in range(config.replicates)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_simulate_one, jobs))
    else:
        entries = [_simulate_one(j) for j in jobs]
    failures = sum(e["status"] != "ok" for e in entries)
    manifest = {"command": "simulate", "replicates": entries, "failures": failures}
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write(out / "config.json", config.to_json() + "\n")
    if entries and failures == len(entries):
        return EXIT_ALL_FAILED
    return EXIT_OK


# -- estimate / experiment ----------------------------------------------------------------

def _write_experiment_outputs(config, out: Path, rows, timings, command: str):
    model = get_model(config.model)
    _write(out / "estimates.csv", ex.estimates_csv_text(rows, model.param_names))
    _write(out / "timings.csv", ex.timings_csv_text(timings))
    table = ex.summarize(model.param_names, rows)
    _write(out / "summary.json", ex.summary_json_text(table))
    _write(out / "boxplot.csv", ex.boxplot_csv_text(table))
    _write(out / "config.json", config.to_json() + "\n")
    failed = [{"replicate": r["replicate"], "method": r["method"], "mode": r["mode"], "status": r["status"],
               "error": r.get("error", "")} for r in rows if r["status"] != "ok"]
    manifest = {"command": command, "rows": len(rows), "failures": len(failed), "failed": failed}
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return table


def cmd_experiment(config: ex.ExperimentConfig, out: Path, workers: int = 1, data_dir=None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    rows, timings = ex.run_experiment(config, workers=workers, data_dir=data_dir)
    _write_experiment_outputs(config, out, rows, timings, "experiment")
    if rows and all(r["status"] != "ok" for r in rows):
        return EXIT_ALL_FAILED
    return EXIT_OK


def cmd_estimate(config: ex.ExperimentConfig, out: Path, data=None) -> int:
    """One estimation per (method, mode) on a single dataset (replicate 0 unless --data is given)."""
    out.mkdir(parents=True, exist_ok=True)
    if data is not None:
        path = Path(data)
        if not path.exists():
            raise ConfigError(f"dataset not found: {path}")
        ds = TrajectoryDataset.from_csv(path)
        if ds.model_id != config.model:
            raise ConfigError(f"dataset was generated by {ds.model_id!r}, config names {config.model!r}")
        tmp = out / "_data"
        tmp.mkdir(exist_ok=True)
        ds.to_csv(tmp / f"rep{ds.replicate}.csv")
        single = ex.ExperimentConfig.from_dict({**config.to_dict(), "replicates": ds.replicate + 1})
        rows, timings = ex.run_replicate(single, ds.replicate, tmp)
    else:
        rows, timings = ex.run_replicate(config, 0)
    _write_experiment_outputs(config, out, rows, timings, "estimate")
    result = {"config": config.to_dict(), "estimates": rows}
    _write(out / "estimate.json", json.dumps(result, indent=2, sort_keys=True, default=float) + "\n")
    if rows and all(r["status"] != "ok" for r in rows):
        return EXIT_ALL_FAILED
    return EXIT_OK


# -- asymptotics ---------------------------------------------------------------------------

def cmd_asymptotics(config: ex.ExperimentConfig, out: Path, estimates=None) -> int:
    model = get_model(config.model)
    theta = np.array(config.theta_true)
    design = config.experiment_design()
    report = {"config": config.to_dict()}
    if estimates is not None:
        est_path = Path(estimates)
        if not est_path.exists():
            raise ConfigError(f"estimates file not found: expected {est_path}")
    prec = plugin_precision(model, theta, design, config.mc_replicas, first_replicate=MC_REPLICATE_OFFSET)
    report["precision"] = prec.to_dict()
    if estimates is not None:
        _, rows = ex.read_estimates(est_path)
        diags = {}
        groups = {}
        for r in rows:
            if r["status"] == "ok":
                groups.setdefault(f"{r['method']}/{r['mode']}", []).append(r["theta_hat"])
        for key, est in sorted(groups.items()):
            try:
                diags[key] = clt_diagnostic(np.array(est), theta, model, design, prec).to_dict()
            except HypoIPSError as exc:
                diags[key] = {"error": f"{type(exc).__name__}: {exc}"}
        report["clt"] = diags
    _write(out / "asymptotics.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hypoips", description="Parameter estimation for interacting "
                                     "hypoelliptic particle systems.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=True):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        if workers:
            p.add_argument("--workers", type=int, default=1, help="worker processes")

    common(sub.add_parser("simulate", help="generate replicate datasets"))
    p = sub.add_parser("estimate", help="estimate on a single dataset")
    common(p, workers=False)
    p.add_argument("--data", help="dataset CSV written by 'simulate'")
    p = sub.add_parser("experiment", help="replicate experiment with summaries")
    common(p)
    p.add_argument("--data", help="directory of rep{k}.csv datasets (simulated inline when absent)")
    p = sub.add_parser("asymptotics", help="plug-in precision matrices and CLT diagnostics")
    common(p, workers=False)
    p.add_argument("--estimates", help="estimates.csv for the CLT diagnostic")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config, out = _resolve(args)
        if args.command == "simulate":
            return cmd_simulate(config, out, args.workers)
        if args.command == "estimate":
            return cmd_estimate(config, out, args.data)
        if args.command == "experiment":
            return cmd_experiment(config, out, args.workers, args.data)
        return cmd_asymptotics(config, out, args.estimates)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
