"""Procedural paired coarse/fine datasets for desk-scale experiments.

Storms are moving, growing and decaying Gaussian rain cells rendered on the
fine grid, enhanced over terrain. Sea-level pressure dips, water vapour
rises and temperature follows latitude, season, the diurnal cycle and
terrain height. The coarse stack is the block mean of the fine fields,
except precipitation: the coarse model places every storm at a seeded
offset of up to ``jitter_cells`` coarse cells, a little wider and weaker
and without the orographic detail, so that coarse and fine rainfall
disagree in position the way two independently run simulations do.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig
from .grid import OCTOBER_FIRST, GridStack, Resolution, Variable, block_mean_upscale

FACTOR = 4


@dataclass
class SynthConfig:
    coarse_shape: tuple = (32, 64)
    fine_shape: tuple | None = None
    n_steps: int = 400
    storm_rate: float = 0.4
    seed: int = 7
    jitter_cells: float = 2.0
    peak_mean: float = 9.0
    start_step: int | None = None

    def __post_init__(self):
        self.coarse_shape = tuple(int(s) for s in self.coarse_shape)
        if self.fine_shape is None:
            self.fine_shape = (FACTOR * self.coarse_shape[0], FACTOR * self.coarse_shape[1])
        self.fine_shape = tuple(int(s) for s in self.fine_shape)

    def validate(self):
        cy, cx = self.coarse_shape
        if cy < 2 or cx < 2:
            raise InvalidConfig(f"coarse grid {self.coarse_shape} too small")
        if self.fine_shape != (FACTOR * cy, FACTOR * cx):
            raise InvalidConfig(
                f"fine shape {self.fine_shape} must be exactly {FACTOR}x coarse shape {self.coarse_shape}"
            )
        if self.n_steps < 1:
            raise InvalidConfig("n_steps must be positive")
        if self.storm_rate < 0 or self.jitter_cells < 0 or self.peak_mean <= 0:
            raise InvalidConfig("storm_rate and jitter_cells must be >= 0, peak_mean > 0")

    @property
    def first_step(self):
        if self.start_step is not None:
            return int(self.start_step)
        # three quarters of the series falls before October
        return max(0, OCTOBER_FIRST - int(round(0.75 * self.n_steps)))


PRESETS = {
    "small": dict(coarse_shape=(32, 64), n_steps=400),
    "medium": dict(coarse_shape=(16, 32), n_steps=640),
    "tiny": dict(coarse_shape=(8, 16), n_steps=64),
}


def preset(name, **overrides):
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return SynthConfig(**base)


def _topography(rng, fy, fx):
    y = (np.arange(fy) + 0.5) / fy
    x = (np.arange(fx) + 0.5) / fx
    yy, xx = np.meshgrid(y, x, indexing="ij")
    # western cordillera plus a lower eastern range and scattered hills
    topo = 2600.0 * np.exp(-((xx - 0.18) ** 2) / (2 * 0.06**2)) * (0.7 + 0.3 * np.sin(6 * yy + 1.0))
    topo += 900.0 * np.exp(-((xx - 0.8) ** 2) / (2 * 0.04**2)) * np.exp(-((yy - 0.55) ** 2) / (2 * 0.2**2))
    for _ in range(12):
        cy, cx = rng.uniform(0, 1, 2)
        s = rng.uniform(0.02, 0.06)
        topo += rng.uniform(150, 700) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s**2))
    return np.clip(topo, 0.0, 3200.0)


def _storms(rng, cfg):
    fy, fx = cfg.fine_shape
    n = rng.poisson(cfg.storm_rate * cfg.n_steps) if cfg.storm_rate > 0 else 0
    storms = []
    for _ in range(n):
        life = int(rng.integers(3, 17))
        birth = int(rng.integers(-life + 1, cfg.n_steps))
        storms.append(
            dict(
                birth=birth,
                life=life,
                y0=rng.uniform(0.05, 0.95) * fy,
                x0=rng.uniform(0.0, 0.9) * fx,
                vy=rng.uniform(-0.01, 0.01) * fy,
                vx=rng.uniform(0.003, 0.012) * fx,
                sy=rng.uniform(0.015, 0.05) * fx,
                sx=rng.uniform(0.015, 0.05) * fx,
                peak=rng.gamma(4.0, cfg.peak_mean / 4.0),
                jy=rng.uniform(-1, 1) * cfg.jitter_cells * FACTOR,
                jx=rng.uniform(-1, 1) * cfg.jitter_cells * FACTOR,
            )
        )
    return storms


def _blob(yc, xc, sy, sx, ys, xs):
    gy = np.exp(-((ys - yc) ** 2) / (2 * sy**2))
    gx = np.exp(-((xs - xc) ** 2) / (2 * sx**2))
    return np.outer(gy, gx)


def synth_dataset(cfg=None):
    """Generate a (COARSE, FINE) pair of GridStacks.

    Deterministic for a given config: the same seed gives bit-identical
    arrays.
    """
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    fy, fx = cfg.fine_shape
    T = cfg.n_steps
    steps = cfg.first_step + np.arange(T, dtype=np.int64)
    ys = np.arange(fy) + 0.5
    xs = np.arange(fx) + 0.5
    lat = (ys / fy)[:, None]  # 0 at the northern edge

    topo = _topography(rng, fy, fx)
    orog = 1.0 + 0.9 * topo / 3200.0
    storms = _storms(rng, cfg)

    precip = np.zeros((T, fy, fx))
    precip_coarse_src = np.zeros((T, fy, fx))
    slp = np.empty((T, fy, fx))
    iwv = np.empty((T, fy, fx))
    t2 = np.empty((T, fy, fx))
    wave_phase = rng.uniform(0, 2 * np.pi)
    xgrid = (xs / fx)[None, :]

    for t in range(T):
        step = steps[t]
        season = np.cos(2 * np.pi * step / 2920.0)
        depression = np.zeros((fy, fx))
        moisture = np.zeros((fy, fx))
        for s in storms:
            age = t - s["birth"]
            if age < 0 or age >= s["life"]:
                continue
            amp = s["peak"] * np.sin(np.pi * (age + 0.5) / s["life"])
            yc = s["y0"] + s["vy"] * age
            xc = s["x0"] + s["vx"] * age
            core = _blob(yc, xc, s["sy"], s["sx"], ys, xs)
            precip[t] += amp * core
            precip_coarse_src[t] += 0.8 * amp * _blob(
                yc + s["jy"], xc + s["jx"], 1.25 * s["sy"], 1.25 * s["sx"], ys, xs
            )
            halo = _blob(yc, xc, 2.5 * s["sy"], 2.5 * s["sx"], ys, xs)
            depression += 1.6 * amp * halo
            moisture += 2.5 * amp * halo
        precip[t] *= orog
        wave = 7.0 * np.sin(2 * np.pi * (xgrid + step / 48.0) + wave_phase) * np.cos(np.pi * (lat - 0.5))
        slp[t] = 1014.0 + wave - depression
        iwv[t] = 8.0 + 30.0 * lat + 8.0 * (1 - season) / 2 + moisture
        t2[t] = (
            270.0 + 25.0 * lat - 12.0 * season + 4.0 * np.sin(2 * np.pi * step / 8.0) - 0.0065 * topo
        )

    fine = GridStack(
        Resolution.FINE,
        steps,
        {Variable.PRECIP: precip},
        {Variable.TOPO: topo},
    )
    coarse = GridStack(
        Resolution.COARSE,
        steps,
        {
            Variable.PRECIP: block_mean_upscale(precip_coarse_src, FACTOR),
            Variable.SLP: block_mean_upscale(slp, FACTOR),
            Variable.IWV: block_mean_upscale(iwv, FACTOR),
            Variable.T2: block_mean_upscale(t2, FACTOR),
        },
    )
    return coarse, fine
