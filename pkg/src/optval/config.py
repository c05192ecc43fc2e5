"""TOML run configuration with path-qualified validation errors."""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .core import Box, Dirac, Distribution, Empirical, Normal, Product, RngSpec, Uniform
from .design import OptimizerOptions
from .families import ModelFamily, projectile_family, transport_family
from .transport import Region

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class _Section:
    """Typed accessor that remembers where it is in the document."""

    def __init__(self, data: dict, path: str, base: Path):
        if not isinstance(data, dict):
            raise ConfigError(path, "expected a table")
        self.data, self.path, self.base = data, path, base

    def _p(self, key):
        return f"{self.path}.{key}" if self.path else key

    def has(self, key) -> bool:
        return key in self.data

    def section(self, key) -> "_Section":
        return _Section(self.data.get(key, {}), self._p(key), self.base)

    def get(self, key, kind, default=None, required=False):
        if key not in self.data:
            if required:
                raise ConfigError(self._p(key), "missing required field")
            return default
        v = self.data[key]
        try:
            if kind is float:
                if isinstance(v, bool):
                    raise TypeError
                return float(v)
            if kind is int:
                if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
                    raise TypeError
                return int(v)
            if kind is bool:
                if not isinstance(v, bool):
                    raise TypeError
                return v
            if kind is str:
                if not isinstance(v, str):
                    raise TypeError
                return v
        except (TypeError, ValueError):
            raise ConfigError(self._p(key), f"expected {kind.__name__}, got {v!r}") from None
        raise AssertionError(kind)

    def vector(self, key, length=None, default=None, required=False):
        if key not in self.data:
            if required:
                raise ConfigError(self._p(key), "missing required field")
            return default
        v = self.data[key]
        try:
            arr = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(self._p(key), "expected a list of numbers") from None
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise ConfigError(self._p(key), "expected a flat list of finite numbers")
        if length is not None and arr.size != length:
            raise ConfigError(self._p(key), f"expected {length} values, got {arr.size}")
        return arr

    def box(self, key, dim, default=None):
        if key not in self.data:
            return default
        v = self.data[key]
        try:
            arr = np.asarray(v, dtype=float)
        except (TypeError, ValueError):
            raise ConfigError(self._p(key), "expected a list of [lower, upper] pairs") from None
        if arr.shape != (dim, 2):
            raise ConfigError(self._p(key), f"expected {dim} [lower, upper] pairs")
        try:
            return Box(arr[:, 0], arr[:, 1])
        except ValueError as exc:
            raise ConfigError(self._p(key), str(exc)) from None

    def file(self, key, required=False):
        name = self.get(key, str, required=required)
        if name is None:
            return None
        p = Path(name)
        if not p.is_absolute():
            p = self.base / p
        if not p.is_file():
            raise ConfigError(self._p(key), f"file not found: {p}")
        return p


@dataclass
class RunConfig:
    family: ModelFamily
    qoi: str
    x_pred: np.ndarray
    prior: Distribution
    X_lab: Box
    X_full: Box
    observables: list[str]
    z_grid: np.ndarray | None
    options: OptimizerOptions
    seed: int
    epsilon: float | None = None
    eta: float | None = None
    cov_budget: float = 0.5
    n_exp: int = 10_000
    n_model: int = 10_000
    n_prop: int = 10_000
    x_val: np.ndarray | None = None
    sensor: tuple | None = None
    data_csv: Path | None = None
    verify_starts: int = 10
    calibration: dict = field(default_factory=dict)
    output_dir: Path | None = None
    inputs: list[Path] = field(default_factory=list)
    raw: dict = field(default_factory=dict)

    @property
    def rng(self) -> RngSpec:
        return RngSpec(self.seed)


def _distribution(sec: _Section, inputs: list) -> Distribution:
    kind = sec.get("dist", str, required=True)
    try:
        if kind == "normal":
            return Normal(sec.get("mean", float, required=True), sec.get("stddev", float, required=True))
        if kind == "uniform":
            return Uniform(sec.get("lo", float, required=True), sec.get("hi", float, required=True))
        if kind == "dirac":
            return Dirac(sec.get("point", float, required=True))
        if kind == "empirical":
            if sec.has("samples"):
                return Empirical(sec.vector("samples"))
            p = sec.file("file", required=True)
            inputs.append(p)
            col = sec.get("column", int, 0)
            return Empirical(_read_column(p, col))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(sec.path, str(exc)) from None
    raise ConfigError(f"{sec.path}.dist", f"unknown distribution {kind!r}")


def _read_column(path: Path, col: int) -> np.ndarray:
    vals = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                vals.append(float(row[col]))
            except ValueError:
                if i == 0:
                    continue  # header
                raise ConfigError(str(path), f"row {i + 1}: not a number: {row[col]!r}") from None
    return np.array(vals)


def _region(sec: _Section, key, default):
    v = sec.vector(key, 4)
    if v is None:
        return default
    try:
        return Region(*v)
    except ValueError as exc:
        raise ConfigError(sec._p(key), str(exc)) from None


def parse_config(data: dict, base: Path = Path(".")) -> RunConfig:
    root = _Section(data, "", base)
    inputs: list[Path] = []
    model = root.get("model", str, required=True)
    if model == "projectile":
        fam = projectile_family()
    elif model == "transport":
        t = root.section("transport")
        vf = t.file("velocity_file")
        if vf is not None:
            inputs.append(vf)
        nx, ny = t.get("nx", int, 64), t.get("ny", int, 32)
        try:
            fam = transport_family(
                nx, ny, t.get("docks", bool, False), vf,
                _region(t, "omega1", Region(1.7, 2.3, 0.1, 0.5)),
                _region(t, "omega2", Region(3.4, 4.0, 1.5, 1.9)),
                t.get("obs_spacing", float, 0.25), t.get("obs_side", float, 0.1))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError("transport", str(exc)) from None
    else:
        raise ConfigError("model", f"unknown model family {model!r} (projectile, transport)")
    dx = len(fam.control_names)
    dth = len(fam.model_names)

    seed = root.get("seed", int, 0)
    if not 0 <= seed < 2**64:
        raise ConfigError("seed", "must be a 64-bit unsigned integer")

    pred = root.section("prediction")
    qoi = pred.get("qoi", str, fam.default_qoi)
    if qoi not in fam.qois:
        raise ConfigError("prediction.qoi", f"unknown QoI {qoi!r}; choose from {sorted(fam.qois)}")
    x_pred = pred.vector("x", dx, np.asarray(fam.x_pred, dtype=float))

    th = root.section("theta")
    if th.has("components"):
        comps = th.data["components"]
        if not isinstance(comps, list) or len(comps) != dth:
            raise ConfigError("theta.components", f"expected a list of {dth} tables")
        parts = [_distribution(_Section(c, f"theta.components[{i}]", base), inputs)
                 for i, c in enumerate(comps)]
        prior = parts[0] if len(parts) == 1 else Product(parts)
    else:
        prior = fam.prior

    lab = root.section("lab")
    X_lab = lab.box("x_bounds", dx, fam.X_lab)
    observables = lab.data.get("observables", list(fam.observables))
    if not isinstance(observables, list) or not observables:
        raise ConfigError("lab.observables", "expected a nonempty list of names")
    for i, o in enumerate(observables):
        if o not in fam.observables and o not in fam.qois:
            raise ConfigError(f"lab.observables[{i}]", f"unknown observable {o!r}")
    z_grid = None
    if lab.has("z_grid"):
        try:
            z_grid = np.asarray(lab.data["z_grid"], dtype=float)
        except (TypeError, ValueError):
            raise ConfigError("lab.z_grid", "expected a list of sensor points") from None
        z_grid = z_grid.reshape(len(z_grid), -1) if z_grid.size else z_grid
        if z_grid.size == 0:
            raise ConfigError("lab.z_grid", "sensor grid is empty")

    o = root.section("optimizer")
    try:
        d = OptimizerOptions()
        opts = OptimizerOptions(
            max_evals=o.get("max_evals", int, d.max_evals),
            initial_mesh=o.get("initial_mesh", float, d.initial_mesh),
            min_mesh=o.get("min_mesh", float, d.min_mesh),
            n_starts=o.get("n_starts", int, d.n_starts),
            rng=RngSpec(seed),
            n_samples=o.get("n_samples", int, d.n_samples),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("optimizer", str(exc)) from None

    v = root.section("validation")
    cfg = RunConfig(
        family=fam, qoi=qoi, x_pred=x_pred, prior=prior, X_lab=X_lab,
        X_full=root.section("verify").box("x_bounds", dx, fam.X_full),
        observables=list(observables), z_grid=z_grid, options=opts, seed=seed,
        epsilon=v.get("epsilon", float), eta=v.get("eta", float),
        cov_budget=v.get("cov_budget", float, 0.5),
        n_exp=v.get("n_exp", int, 10_000), n_model=v.get("n_model", int, 10_000),
        n_prop=root.section("propagate").get("n", int, 10_000),
        x_val=v.vector("x_val", dx), verify_starts=root.section("verify").get("n_starts", int, 10),
        raw=data,
    )
    if cfg.epsilon is not None and not cfg.epsilon > 0:
        raise ConfigError("validation.epsilon", "must be positive")
    if cfg.eta is not None and not 0 <= cfg.eta <= 1:
        raise ConfigError("validation.eta", "must lie in [0, 1]")
    if v.has("sensor"):
        s = v.section("sensor")
        oid = s.get("observable", str, required=True)
        if oid not in fam.observables and oid not in fam.qois:
            raise ConfigError("validation.sensor.observable", f"unknown observable {oid!r}")
        cfg.sensor = (oid, s.vector("z", required=True))
    cfg.data_csv = v.file("data_csv")
    if cfg.data_csv is not None:
        inputs.append(cfg.data_csv)

    if root.has("calibration"):
        c = root.section("calibration")
        obs_file = c.file("observations_csv", required=True)
        inputs.append(obs_file)
        h = c.get("observable", str, required=True)
        if h not in fam.observables and h not in fam.qois:
            raise ConfigError("calibration.observable", f"unknown observable {h!r}")
        sigma = c.get("sigma", float, required=True)
        if not sigma > 0:
            raise ConfigError("calibration.sigma", "must be positive")
        cfg.calibration = {
            "observations_csv": obs_file,
            "observable": h,
            "sigma": sigma,
            "n": c.get("n", int, 5000),
            "proposal_scale": c.vector("proposal_scale", dth, np.full(dth, 0.1)),
            "burn_in": c.get("burn_in", int),
        }
    out = root.get("output_dir", str)
    cfg.output_dir = None if out is None else (Path(out) if Path(out).is_absolute() else base / out)
    cfg.inputs = inputs
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("", f"config file not found: {p}")
    try:
        data = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("", f"{p}: invalid TOML: {exc}") from None
    cfg = parse_config(data, p.parent)
    cfg.inputs.insert(0, p)
    return cfg


def read_observations(path: Path, dx: int, dz: int) -> list:
    """Calibration data: ``dx`` control columns, ``dz`` sensor columns, then ``y``."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for i, row in enumerate(reader):
            if not row:
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError:
                if i == 0:
                    continue
                raise ConfigError(str(path), f"row {i + 1}: non-numeric entry") from None
            if len(vals) != dx + dz + 1:
                raise ConfigError(str(path), f"row {i + 1}: expected {dx + dz + 1} columns")
            rows.append((vals[:dx], vals[dx:dx + dz] if dz else None, vals[-1]))
    if not rows:
        raise ConfigError(str(path), "no observations")
    return rows


def describe(cfg: RunConfig) -> dict[str, Any]:
    return {"model": cfg.family.name, "qoi": cfg.qoi, "seed": cfg.seed,
            "x_pred": cfg.x_pred.tolist(), "X_lab": cfg.X_lab.to_list()}
