"""Command-line front end.

Every command reads one TOML config, writes its products into a run directory
and records a ``manifest.json`` with input and artifact SHA-256 hashes.

Exit codes: 0 success (or verdict not invalidated), 1 verdict invalidated,
2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    IdentifiabilityError,
    LikelihoodSpec,
    posterior_sample,
    write_chain_csv,
    write_posterior_json,
)
from .config import ConfigError, RunConfig, load_config, parse_config, read_observations
from .core import GradientError, RngSpec
from .design import (
    DesignError,
    optimize_scenario,
    optimize_sensor,
    sensor_scan,
    verify_recovery,
    write_design_csv,
    write_json,
    write_scan_csv,
    write_verify_csv,
)
from .projectile import StepSizeError
from .sensitivity import DegenerateFunctionalError
from .transport import SolveError
from .validation import (
    INVALIDATED,
    WorkflowConfig,
    WorkflowError,
    propagate,
    run_validation_workflow,
)

log = logging.getLogger("optval")

EXIT_OK, EXIT_INVALIDATED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

NUMERIC_ERRORS = (GradientError, DesignError, DegenerateFunctionalError, SolveError, StepSizeError,
                  WorkflowError, IdentifiabilityError, np.linalg.LinAlgError, FloatingPointError)


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fmt(v) -> str:
    return f"{float(v):.17g}"


class Run:
    def __init__(self, cfg: RunConfig, out: Path, command: str, timestamps: bool):
        self.cfg, self.out, self.command, self.timestamps = cfg, out, command, timestamps
        out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.out / name
        self.artifacts.append(p)
        return p

    def manifest(self, status: dict) -> None:
        m = {
            "command": self.command,
            "version": __version__,
            "model": self.cfg.family.name,
            "seed": self.cfg.seed,
            "inputs": {str(p): _sha256(p) for p in self.cfg.inputs},
            "artifacts": {p.name: _sha256(p) for p in self.artifacts if p.exists()},
            "status": status,
        }
        if self.timestamps:
            m["created"] = datetime.now(timezone.utc).isoformat()
        write_json(self.out / "manifest.json", m)


def _qoi(cfg: RunConfig):
    return cfg.family.qois[cfg.qoi]


def _observables(cfg: RunConfig):
    return [cfg.family.functional(o) for o in cfg.observables]


def cmd_design_scenario(cfg: RunConfig, run: Run) -> int:
    res = optimize_scenario(_qoi(cfg), cfg.x_pred, cfg.prior, cfg.X_lab, cfg.options)
    write_design_csv(run.path("design.csv"), res)
    summary = res.summary()
    summary["x_pred"] = cfg.x_pred.tolist()
    write_json(run.path("design.json"), summary)
    run.manifest({"best_point": summary["best_point"],
                  "normalized_objective": summary["normalized_objective"]})
    print(f"x_val = {np.array2string(res.best_point, precision=6)}  "
          f"objective = {res.best_objective:.6g}  normalized = {res.normalized_objective:.3e}")
    return EXIT_OK


def _x_val(cfg: RunConfig) -> np.ndarray:
    if cfg.x_val is not None:
        return cfg.x_val
    return optimize_scenario(_qoi(cfg), cfg.x_pred, cfg.prior, cfg.X_lab, cfg.options).best_point


def cmd_design_sensor(cfg: RunConfig, run: Run) -> int:
    x_val = _x_val(cfg)
    fam = cfg.family
    Z = cfg.z_grid if cfg.z_grid is not None else fam.sensor_domain(x_val, cfg.prior)
    H = _observables(cfg)
    res = optimize_sensor(H, Z, x_val, _qoi(cfg), cfg.prior, cfg.options)
    grid = cfg.z_grid if cfg.z_grid is not None else fam.scan_grid(x_val, cfg.prior)
    for h in H:
        scan = sensor_scan(h, x_val, _qoi(cfg), cfg.prior, grid, cfg.options)
        write_scan_csv(run.path(f"scan_{h.id}.csv"), scan)
    summary = {"x_val": x_val.tolist(), "functional": res.functional_id, "z": res.z.tolist(),
               "objective": res.objective,
               "candidates": {k: {"z": z.tolist(), "objective": v} for k, (z, v) in res.candidates.items()}}
    write_json(run.path("sensor.json"), summary)
    run.manifest({"functional": res.functional_id, "z": res.z.tolist(), "objective": res.objective})
    print(f"observable = {res.functional_id}  z = {np.array2string(res.z, precision=6)}  "
          f"objective = {res.objective:.3e}")
    return EXIT_OK


def _csv_data_source(path: Path):
    vals = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                vals.append(float(row[-1]))
            except ValueError:
                if i == 0:
                    continue
                raise ConfigError(str(path), f"row {i + 1}: non-numeric value") from None
    if not vals:
        raise ConfigError(str(path), "no observations")
    data = np.array(vals)

    def source(x, z, n, rng):
        return data

    return source


def cmd_validate(cfg: RunConfig, run: Run) -> int:
    if cfg.epsilon is None or cfg.eta is None:
        raise ConfigError("validation", "epsilon and eta are required")
    fam = cfg.family
    if cfg.data_csv is not None:
        source = _csv_data_source(cfg.data_csv)
    elif fam.data_source is not None:
        source = fam.data_source
    else:
        raise ConfigError("validation.data_csv", f"{fam.name} has no synthetic data source")
    calib = None
    if cfg.calibration:
        calib = _calibration_inputs(cfg)
    wc = WorkflowConfig(
        h_qoi=_qoi(cfg), x_pred=cfg.x_pred, prior=cfg.prior, X_lab=cfg.X_lab,
        H_lab=_observables(cfg),
        Z_lab=(cfg.z_grid if cfg.z_grid is not None
               else (lambda xv: fam.sensor_domain(xv, cfg.prior))),
        epsilon=cfg.epsilon, eta=cfg.eta, data_source=source, cov_budget=cfg.cov_budget,
        n_exp=cfg.n_exp, n_model=cfg.n_model, n_prop=cfg.n_prop, rng=cfg.rng,
        options=cfg.options, calibration=calib, x_val=cfg.x_val, sensor=cfg.sensor,
    )
    res = run_validation_workflow(wc, run.out)
    for name in ("verdict.json", "qoi_samples.csv", "observations.csv", "discrepancy.csv",
                 "abs_discrepancy_cdf.csv"):
        if (run.out / name).exists():
            run.artifacts.append(run.out / name)
    v = res.verdict
    run.manifest(v.to_dict())
    if v.verdict is None:
        print(f"exit validation: QoI coefficient of variation {v.cov:.3g} exceeds {cfg.cov_budget}")
        return EXIT_OK
    print(f"gamma = {v.gamma:.4f}  epsilon = {v.epsilon}  eta = {v.eta}  verdict = {v.verdict}")
    return EXIT_INVALIDATED if v.verdict == INVALIDATED else EXIT_OK


def _calibration_inputs(cfg: RunConfig):
    c = cfg.calibration
    fam = cfg.family
    h = fam.functional(c["observable"])
    obs = read_observations(c["observations_csv"], len(fam.control_names), h.sensor_dim)
    spec = LikelihoodSpec(c["sigma"], tuple(obs))
    return spec, h, c["n"], c["proposal_scale"]


def cmd_calibrate(cfg: RunConfig, run: Run) -> int:
    if not cfg.calibration:
        raise ConfigError("calibration", "missing [calibration] table")
    spec, h, n, scale = _calibration_inputs(cfg)
    chain = posterior_sample(spec, h, cfg.prior, n, scale, cfg.rng.with_stream(10),
                             burn_in=cfg.calibration["burn_in"])
    names = cfg.family.model_names
    write_chain_csv(run.path("chain.csv"), chain, names)
    write_posterior_json(run.path("posterior.json"), chain, names)
    s = chain.summary()
    run.manifest({"acceptance_rate": s["acceptance_rate"], "mean": s["mean"]})
    print(f"posterior mean = {s['mean']}  acceptance = {s['acceptance_rate']:.3f}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, run: Run) -> int:
    rows, res = verify_recovery(_qoi(cfg), cfg.x_pred, cfg.prior, cfg.X_full,
                                cfg.verify_starts, cfg.rng, cfg.options)
    write_verify_csv(run.path("verify.csv"), rows, cfg.family.control_names)
    summary = res.summary()
    summary["max_normalized_objective"] = max(r.normalized_objective for r in rows)
    write_json(run.path("verify.json"), summary)
    run.manifest({"max_normalized_objective": summary["max_normalized_objective"],
                  "flat_coords": summary["flat_coords"]})
    for r in rows:
        print(f"{np.array2string(r.initial, precision=4)} -> {np.array2string(r.optimum, precision=5)}"
              f"  l2 = {r.l2_error:.3e}  normalized = {r.normalized_objective:.3e}")
    return EXIT_OK


def cmd_propagate(cfg: RunConfig, run: Run) -> int:
    q = propagate(_qoi(cfg), cfg.x_pred, cfg.prior, cfg.n_prop, cfg.rng.with_stream(11))
    s = np.asarray(q.samples)
    with open(run.path("qoi_samples.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([cfg.qoi])
        for v in s:
            w.writerow([_fmt(v)])
    mean, std = float(np.mean(s)), float(np.std(s))
    cov = std / abs(mean) if mean != 0 else (0.0 if std == 0 else math.inf)
    lo, hi = np.quantile(s, [0.025, 0.975])
    status = "proceed" if cov <= cfg.cov_budget else "exit-validation"
    summary = {"n": int(s.size), "mean": mean, "std": std, "cov": cov,
               "q025": float(lo), "q975": float(hi), "cov_budget": cfg.cov_budget, "status": status}
    write_json(run.path("propagate.json"), summary)
    run.manifest(summary)
    print(f"mean = {mean:.6g}  std = {std:.3g}  95% = [{lo:.6g}, {hi:.6g}]  status = {status}")
    return EXIT_OK


COMMANDS = {
    "design-scenario": cmd_design_scenario,
    "design-sensor": cmd_design_sensor,
    "validate": cmd_validate,
    "calibrate": cmd_calibrate,
    "verify": cmd_verify,
    "propagate": cmd_propagate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="optval", description="Optimal validation experiment design.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0])
        p.add_argument("config", help="TOML run configuration")
        p.add_argument("-o", "--out", help="run directory (default: config output_dir or ./run-<command>)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, help="worker threads (default: $OPTVAL_THREADS or 1)")
        p.add_argument("--timestamps", action="store_true", help="record creation time in the manifest")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


cmd_design_scenario.__doc__ = "optimal validation scenario"
cmd_design_sensor.__doc__ = "optimal observable and sensor location"
cmd_validate.__doc__ = "full validation workflow"
cmd_calibrate.__doc__ = "Bayesian calibration from an observations CSV"
cmd_verify.__doc__ = "recover the prediction scenario from random starts"
cmd_propagate.__doc__ = "propagate parameter uncertainty to the QoI"


def _load(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        data = dict(cfg.raw)
        data["seed"] = args.seed
        inputs = cfg.inputs
        cfg = parse_config(data, Path(args.config).parent)
        cfg.inputs = [inputs[0], *cfg.inputs]
    return cfg


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        os.environ["OPTVAL_THREADS"] = str(args.threads)
    try:
        cfg = _load(args)
        out = Path(args.out) if args.out else (cfg.output_dir or Path(f"run-{args.command}"))
        run = Run(cfg, out, args.command, args.timestamps)
        return COMMANDS[args.command](cfg, run)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
