"""Synthetic above-zone pressure time series from a single-phase diffusion proxy.

The AZMI layer is a 2D grid of cells with heterogeneous diffusivity
``D = diffusivity_scale * permeability / porosity``. Shale cells are
inactive: they carry no flow and keep a constant sentinel pressure. A leak
is a constant volumetric source in one active cell. The explicit scheme is

    p[c] += dt / h^2 * sum_faces D_face * (p[nbr] - p[c])  +  dt * q / h^2 * [c == leak]

with harmonic-mean face diffusivities and no-flux outer and shale
boundaries, so ``sum(h^2 * (p - p0))`` equals the injected volume exactly
(up to round-off).
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DataError

# Nominal Table-1 class names; only their 1:2:3:4 ratio is used.
NOMINAL_RATES_MMSCFD = (100_000, 200_000, 300_000, 400_000)
DEFAULT_RATE_VALUES = (1.0, 2.0, 3.0, 4.0)


@dataclass(frozen=True)
class PermeabilityModel:
    permeability: np.ndarray
    porosity: np.ndarray
    active_mask: np.ndarray

    def __post_init__(self):
        shape = self.permeability.shape
        if self.porosity.shape != shape or self.active_mask.shape != shape:
            raise DataError("permeability, porosity and active_mask must share a shape")
        act = self.active_mask
        if not (self.permeability[act] > 0).all():
            raise DataError("permeability must be positive on active cells")
        if not ((self.porosity[act] > 0) & (self.porosity[act] < 1)).all():
            raise DataError("porosity must lie in (0, 1) on active cells")
        for arr in (self.permeability, self.porosity, self.active_mask):
            arr.setflags(write=False)

    @property
    def grid_h(self):
        return self.permeability.shape[0]

    @property
    def grid_w(self):
        return self.permeability.shape[1]

    def diffusivity(self, diffusivity_scale):
        d = np.where(self.active_mask, diffusivity_scale * self.permeability / self.porosity, 0.0)
        return d


@dataclass(frozen=True)
class ScenarioSpec:
    leak_cell: tuple
    rate_class: int
    rate_value: float
    n_steps: int
    dt: float
    diffusivity_scale: float = 1.0
    wells: tuple = ()
    seed: int = 0
    # Internal explicit steps per stored frame; the frame interval is dt * substeps.
    substeps: int = 1
    cell_size: float = 1.0
    p0: float = 0.0

    def __post_init__(self):
        if self.n_steps < 2:
            raise DataError("n_steps must be >= 2")
        if self.dt <= 0 or self.substeps < 1 or self.cell_size <= 0 or self.diffusivity_scale <= 0:
            raise DataError("dt, substeps, cell_size and diffusivity_scale must be positive")
        if self.rate_class < 1:
            raise DataError("rate_class is 1-based")

    def to_dict(self):
        return {
            "leak_cell": list(self.leak_cell), "rate_class": self.rate_class,
            "rate_value": self.rate_value, "n_steps": self.n_steps, "dt": self.dt,
            "diffusivity_scale": self.diffusivity_scale,
            "wells": [list(w) for w in self.wells], "seed": self.seed,
            "substeps": self.substeps, "cell_size": self.cell_size, "p0": self.p0,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["leak_cell"] = tuple(d["leak_cell"])
        d["wells"] = tuple(tuple(w) for w in d.get("wells", ()))
        return cls(**d)


@dataclass(frozen=True)
class PressureSeries:
    spec: ScenarioSpec
    fields: np.ndarray = field(repr=False)  # [n_steps, h, w]


def generate_heterogeneity(seed, grid_h, grid_w, corr_len=4.0, log_mean=math.log(100.0),
                           log_std=0.5, shale_fraction=0.0, porosity_mean=0.2,
                           porosity_std=0.03, keep_active=()):
    """Gaussian-smoothed log-normal permeability with contiguous shale blobs.

    The shale mask thresholds an independent smoothed Gaussian field at its
    ``shale_fraction`` quantile, so the inactive count is exact up to ties.
    Cells listed in ``keep_active`` (wells, leak sites) are forced to sand.
    """
    if grid_h < 4 or grid_w < 4:
        raise DataError("grid dimensions must be >= 4")
    if not 0.0 <= shale_fraction < 1.0:
        raise DataError("shale_fraction must lie in [0, 1)")
    if corr_len <= 0 or log_std < 0:
        raise DataError("corr_len must be positive and log_std non-negative")
    rng = np.random.default_rng(seed)

    def smooth_unit(noise):
        g = ndimage.gaussian_filter(noise, sigma=corr_len, mode="wrap")
        s = g.std()
        return (g - g.mean()) / s if s > 0 else np.zeros_like(g)

    shape = (grid_h, grid_w)
    perm = np.exp(log_mean + log_std * smooth_unit(rng.standard_normal(shape)))
    poro = np.clip(porosity_mean + porosity_std * smooth_unit(rng.standard_normal(shape)),
                   0.01, 0.99)
    facies = smooth_unit(rng.standard_normal(shape))
    if shale_fraction > 0:
        n_shale = int(round(shale_fraction * facies.size))
        cut = np.sort(facies, axis=None)[n_shale - 1] if n_shale else -np.inf
        active = facies > cut
    else:
        active = np.ones(shape, dtype=bool)
    for cell in keep_active:
        active[tuple(cell)] = True
    return PermeabilityModel(perm, poro, active)


def stability_dt(model, diffusivity_scale, cell_size=1.0):
    """Largest stable explicit step: ``cell_size**2 / (4 * D_max)``."""
    d_max = float(model.diffusivity(diffusivity_scale).max())
    if d_max <= 0:
        return math.inf
    return cell_size ** 2 / (4.0 * d_max)


def _face_coefficients(d):
    """Harmonic-mean diffusivities on vertical and horizontal faces (0 across shale)."""
    def harmonic(a, b):
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where((a > 0) & (b > 0), 2.0 * a * b / (a + b), 0.0)
        return out
    return harmonic(d[:-1, :], d[1:, :]), harmonic(d[:, :-1], d[:, 1:])


def simulate_scenario(model, spec):
    """Run the explicit scheme and return one frame per stored step.

    Frame 0 is the initial constant field ``p0``; frame ``k`` is the state
    after ``k * substeps`` internal steps of length ``spec.dt``.
    """
    r, c = spec.leak_cell
    if not (0 <= r < model.grid_h and 0 <= c < model.grid_w):
        raise DataError(f"leak cell {spec.leak_cell} outside the grid")
    if not model.active_mask[r, c]:
        raise DataError(f"leak cell {spec.leak_cell} is an inactive (shale) cell")
    for w in spec.wells:
        if not (0 <= w[0] < model.grid_h and 0 <= w[1] < model.grid_w) or not model.active_mask[tuple(w)]:
            raise DataError(f"well {tuple(w)} is outside the grid or on an inactive cell")
    limit = stability_dt(model, spec.diffusivity_scale, spec.cell_size)
    if spec.dt > limit * (1 + 1e-12):
        raise DataError(f"dt={spec.dt} exceeds the stability bound {limit:.6g}")

    d = model.diffusivity(spec.diffusivity_scale)
    fv, fh = _face_coefficients(d)
    lam = spec.dt / spec.cell_size ** 2
    fv = lam * fv
    fh = lam * fh
    source = spec.dt * spec.rate_value / spec.cell_size ** 2

    p = np.full(d.shape, float(spec.p0))
    frames = np.empty((spec.n_steps,) + d.shape)
    frames[0] = p
    flux = np.empty_like(p)
    for k in range(1, spec.n_steps):
        for _ in range(spec.substeps):
            flux.fill(0.0)
            fvert = fv * (p[1:, :] - p[:-1, :])
            fhorz = fh * (p[:, 1:] - p[:, :-1])
            flux[:-1, :] += fvert
            flux[1:, :] -= fvert
            flux[:, :-1] += fhorz
            flux[:, 1:] -= fhorz
            p += flux
            p[r, c] += source
        frames[k] = p
    frames.setflags(write=False)
    return PressureSeries(spec, frames)


def injected_volume(spec, step):
    """Cumulative source volume after ``step`` stored frames."""
    return spec.rate_value * spec.dt * spec.substeps * step


def simulate_many(model, specs, max_workers=None):
    """Simulate independent scenarios, optionally on a thread pool; order is preserved."""
    if max_workers in (None, 0, 1):
        return [simulate_scenario(model, s) for s in specs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda s: simulate_scenario(model, s), specs))
