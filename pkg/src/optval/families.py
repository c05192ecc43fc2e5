"""Built-in model families: named functionals, default scenarios and data sources."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import projectile as pj
from . import transport as tr
from .core import Box, Dirac, Distribution, ModelFunctional


@dataclass
class ModelFamily:
    name: str
    control_names: tuple[str, ...]
    model_names: tuple[str, ...]
    qois: dict[str, ModelFunctional]
    observables: dict[str, ModelFunctional]
    x_pred: tuple[float, ...]
    X_lab: Box
    X_full: Box
    prior: Distribution
    default_qoi: str
    sensor_domain: Callable  # (x_val, theta_dist) -> Box or grid
    scan_grid: Callable  # (x_val, theta_dist) -> grid
    data_source: Callable | None = None
    extras: dict = field(default_factory=dict)

    @property
    def sensor_dim(self) -> int:
        return max((h.sensor_dim for h in self.observables.values()), default=0)

    def functional(self, fid: str) -> ModelFunctional:
        if fid in self.qois:
            return self.qois[fid]
        if fid in self.observables:
            return self.observables[fid]
        raise KeyError(fid)


def _apex_horizon(x_val, theta_dist) -> float:
    return 2.0 * float(pj.time_of_max(x_val, theta_dist.center()))


def projectile_family() -> ModelFamily:
    def sensor_domain(x_val, theta_dist):
        return Box([0.0], [_apex_horizon(x_val, theta_dist)])

    def scan_grid(x_val, theta_dist, n=200):
        return np.linspace(0.0, _apex_horizon(x_val, theta_dist), n)[:, None]

    def data_source(x, z, n, rng):
        return pj.synthetic_observations(x, float(np.atleast_1d(z)[0]), n, rng)

    return ModelFamily(
        name="projectile",
        control_names=pj.CONTROL_NAMES,
        model_names=pj.MODEL_NAMES,
        qois={"max_altitude": pj.MaxAltitude()},
        observables={"altitude": pj.Altitude(), "acceleration": pj.Acceleration()},
        x_pred=pj.X_PRED,
        X_lab=Box.from_bounds(pj.X_LAB),
        X_full=Box.from_bounds(pj.X_FULL),
        prior=pj.default_theta_distribution(),
        default_qoi="max_altitude",
        sensor_domain=sensor_domain,
        scan_grid=scan_grid,
        data_source=data_source,
    )


def transport_family(nx: int = 64, ny: int = 32, docks: bool = False, velocity_file=None,
                     omega1: tr.Region = tr.OMEGA_1, omega2: tr.Region = tr.OMEGA_2,
                     obs_spacing: float = 0.25, obs_side: float = 0.1) -> ModelFamily:
    grid = tr.Grid.channel(nx, ny, docks)
    if velocity_file is not None:
        vel = tr.load_velocity(velocity_file, grid)
    else:
        vel = tr.poiseuille_velocity(grid)
    obs_grid = tr.observation_grid(grid, obs_spacing)

    def sensor_domain(x_val, theta_dist):
        return obs_grid

    return ModelFamily(
        name="transport",
        control_names=tr.CONTROL_NAMES,
        model_names=tr.MODEL_NAMES,
        qois={
            "qoi1": tr.transport_functional("qoi1", grid, vel, omega1=omega1, omega2=omega2),
            "qoi2": tr.transport_functional("qoi2", grid, vel, omega1=omega1, omega2=omega2),
        },
        observables={"obs": tr.transport_functional("obs", grid, vel, obs_side=obs_side)},
        x_pred=tr.X_PRED,
        X_lab=Box.from_bounds(tr.X_LAB),
        X_full=Box.from_bounds(tr.X_VERIFY),
        prior=Dirac(tr.K0),
        default_qoi="qoi1",
        sensor_domain=sensor_domain,
        scan_grid=sensor_domain,
        extras={"grid": grid, "velocity": vel},
    )
