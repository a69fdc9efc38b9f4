"""Gridded climate variables: containers, on-disk format and preprocessing.

A dataset directory holds one stack per resolution::

    data/
      coarse/manifest.txt  precip.npy slp.npy iwv.npy t2.npy timesteps.npy
      fine/manifest.txt    precip.npy topo.npy timesteps.npy

The manifest has two header lines (``resolution COARSE``, ``timesteps
timesteps.npy``) followed by one line per variable::

    name shape dtype units path

with ``shape`` written as comma-separated integers and paths relative to
the manifest's directory. Arrays are NPY v1.0, little-endian float64.
"""

import dataclasses
import enum
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyPartition,
    InvalidTarget,
    IoFailure,
    MissingVariable,
    NegativeInput,
    NonDivisibleShape,
    NonFiniteValue,
    ShapeMismatch,
    UnknownVariable,
)

MANIFEST = "manifest.txt"
STEPS_PER_DAY = 8
# first 3-hourly step of 1 October in a non-leap year
OCTOBER_FIRST = 273 * STEPS_PER_DAY


class Variable(str, enum.Enum):
    PRECIP = "precip"
    SLP = "slp"
    IWV = "iwv"
    T2 = "t2"
    TOPO = "topo"

    @property
    def units(self):
        return UNITS[self]

    @property
    def is_static(self):
        return self is Variable.TOPO


UNITS = {
    Variable.PRECIP: "mm/3hr",
    Variable.SLP: "hPa",
    Variable.IWV: "cm",
    Variable.T2: "K",
    Variable.TOPO: "m",
}

# 0.1% / 99.9% ranges of the 2005 WRF data. Precipitation uses 0 as the lower
# bound so that "no rain" maps to 0, and the 12 km upper value for both grids.
TABLE1_BOUNDS = {
    Variable.PRECIP: (0.0, 15.66),
    Variable.SLP: (990.97, 1039.34),
    Variable.IWV: (1.56, 116.46),
    Variable.T2: (241.75, 310.35),
    Variable.TOPO: (0.0, 3204.51),
}

DYNAMIC_INPUTS = (Variable.PRECIP, Variable.SLP, Variable.IWV, Variable.T2)


def as_variable(name):
    if isinstance(name, Variable):
        return name
    try:
        return Variable(str(name).lower())
    except ValueError:
        raise UnknownVariable(f"unknown variable {name!r}") from None


class Resolution(str, enum.Enum):
    COARSE = "COARSE"
    FINE = "FINE"


@dataclass
class GridField:
    """One variable on a 2-D grid at a single 3-hourly step (-1 for static)."""

    variable: Variable
    time_index: int
    values: np.ndarray

    def __post_init__(self):
        self.variable = as_variable(self.variable)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeMismatch(f"field values must be 2-D, got {self.values.shape}")

    @property
    def ny(self):
        return self.values.shape[0]

    @property
    def nx(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape


@dataclass
class GridStack:
    """Time series of several variables on one grid.

    ``fields`` maps each dynamic variable to a (T, ny, nx) array;
    ``static`` holds time-invariant (ny, nx) arrays such as TOPO.
    """

    resolution: Resolution
    timesteps: np.ndarray
    fields: dict = field(default_factory=dict)
    static: dict = field(default_factory=dict)

    def __post_init__(self):
        self.resolution = Resolution(self.resolution)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        self.fields = {as_variable(k): np.asarray(v, dtype=np.float64) for k, v in self.fields.items()}
        self.static = {as_variable(k): np.asarray(v, dtype=np.float64) for k, v in self.static.items()}
        self.validate()

    def validate(self):
        shape = None
        for var, arr in self.fields.items():
            if arr.ndim != 3 or arr.shape[0] != len(self.timesteps):
                raise ShapeMismatch(
                    f"{var.value}: shape {arr.shape} inconsistent with {len(self.timesteps)} timesteps"
                )
            if shape is None:
                shape = arr.shape[1:]
            elif arr.shape[1:] != shape:
                raise ShapeMismatch(f"{var.value}: grid {arr.shape[1:]} differs from {shape}")
        for var, arr in self.static.items():
            if arr.ndim != 2:
                raise ShapeMismatch(f"{var.value}: static field must be 2-D, got {arr.shape}")
            if shape is not None and arr.shape != shape:
                raise ShapeMismatch(f"{var.value}: grid {arr.shape} differs from {shape}")
            shape = shape or arr.shape

    @property
    def shape(self):
        for arr in self.fields.values():
            return arr.shape[1:]
        for arr in self.static.values():
            return arr.shape
        return (0, 0)

    @property
    def variables(self):
        return list(self.fields) + list(self.static)

    def __len__(self):
        return len(self.timesteps)

    def field_at(self, variable, position):
        var = as_variable(variable)
        if var in self.static:
            return GridField(var, -1, self.static[var])
        return GridField(var, int(self.timesteps[position]), self.fields[var][position])

    def subset(self, positions):
        positions = np.asarray(positions, dtype=np.int64)
        return GridStack(
            self.resolution,
            self.timesteps[positions],
            {k: v[positions] for k, v in self.fields.items()},
            dict(self.static),
        )


@dataclass
class NormalizationSpec:
    """Min-max bounds per variable plus the precipitation floor/cap rule."""

    bounds: dict = field(default_factory=lambda: dict(TABLE1_BOUNDS))
    precip_floor: float = 0.05
    precip_cap_quantile: float = 0.995
    caps: np.ndarray | None = None

    def __post_init__(self):
        self.bounds = {as_variable(k): (float(lo), float(hi)) for k, (lo, hi) in self.bounds.items()}
        for var, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise ValueError(f"{var.value}: min {lo} must be below max {hi}")
        if not 0.0 < self.precip_cap_quantile < 1.0:
            raise ValueError("precip_cap_quantile must lie in (0, 1)")


# ------------------------------------------------------------------ file format


def _write_npy(path, arr):
    try:
        np.save(path, np.ascontiguousarray(arr, dtype="<f8") if arr.dtype.kind == "f" else arr)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_npy(path):
    try:
        return np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise
    except (OSError, ValueError, EOFError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def save_grid_stack(stack, path):
    """Write ``stack`` as NPY files plus a manifest under directory ``path``."""
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {path}: {exc}") from exc
    lines = [f"resolution {stack.resolution.value}", "timesteps timesteps.npy"]
    _write_npy(os.path.join(path, "timesteps.npy"), stack.timesteps.astype("<i8"))
    for var, arr in list(stack.fields.items()) + list(stack.static.items()):
        fname = f"{var.value}.npy"
        _write_npy(os.path.join(path, fname), arr)
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"{var.value} {shape} float64 {var.units} {fname}")
    try:
        with open(os.path.join(path, MANIFEST), "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest in {path}: {exc}") from exc


def read_manifest(manifest_path):
    """Parse a manifest into (resolution, timesteps file, variable entries)."""
    try:
        with open(manifest_path) as fh:
            raw = fh.read().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {manifest_path}: {exc}") from exc
    resolution, steps_file, entries = None, None, []
    for lineno, line in enumerate(raw, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "resolution" and len(parts) == 2:
            resolution = parts[1].upper()
        elif parts[0] == "timesteps" and len(parts) == 2:
            steps_file = parts[1]
        elif len(parts) == 5:
            name, shape, dtype, units, fname = parts
            try:
                shape = tuple(int(s) for s in shape.split(","))
            except ValueError:
                raise ShapeMismatch(f"{manifest_path}:{lineno}: bad shape {shape!r}") from None
            entries.append(dict(name=name, shape=shape, dtype=dtype, units=units, path=fname))
        else:
            raise IoFailure(f"{manifest_path}:{lineno}: cannot parse {line!r}")
    if resolution is None:
        raise IoFailure(f"{manifest_path}: missing 'resolution' line")
    return resolution, steps_file, entries


def load_grid_stack(path, manifest=None):
    """Load and validate the stack stored in directory ``path``."""
    manifest = manifest or os.path.join(path, MANIFEST)
    base = os.path.dirname(manifest)
    resolution, steps_file, entries = read_manifest(manifest)
    fields, static = {}, {}
    for entry in entries:
        var = as_variable(entry["name"])
        fpath = os.path.join(base, entry["path"])
        if not os.path.exists(fpath):
            raise MissingVariable(f"{var.value}: file {fpath} listed in manifest does not exist")
        arr = _read_npy(fpath)
        if arr.shape != entry["shape"]:
            raise ShapeMismatch(f"{fpath}: shape {arr.shape} != manifest shape {entry['shape']}")
        arr = arr.astype(np.float64, copy=False)
        bad = ~np.isfinite(arr)
        if bad.any():
            loc = tuple(int(i) for i in np.argwhere(bad)[0])
            raise NonFiniteValue(f"{fpath}: non-finite value at index {loc}", path=fpath, location=loc)
        (static if var.is_static else fields)[var] = arr
    if steps_file is not None:
        spath = os.path.join(base, steps_file)
        if not os.path.exists(spath):
            raise MissingVariable(f"timesteps file {spath} does not exist")
        timesteps = _read_npy(spath).astype(np.int64)
    else:
        n = next(iter(fields.values())).shape[0] if fields else 0
        timesteps = np.arange(n, dtype=np.int64)
    return GridStack(resolution, timesteps, fields, static)


def save_dataset(coarse, fine, root):
    check_pair(coarse, fine)
    save_grid_stack(coarse, os.path.join(root, "coarse"))
    save_grid_stack(fine, os.path.join(root, "fine"))


def load_dataset(root):
    for sub in ("coarse", "fine"):
        if not os.path.isfile(os.path.join(root, sub, MANIFEST)):
            raise IoFailure(f"{root}: no {sub}/{MANIFEST}")
    coarse = load_grid_stack(os.path.join(root, "coarse"))
    fine = load_grid_stack(os.path.join(root, "fine"))
    check_pair(coarse, fine)
    return coarse, fine


def check_pair(coarse, fine, factor=4):
    cy, cx = coarse.shape
    fy, fx = fine.shape
    if (fy, fx) != (factor * cy, factor * cx):
        raise ShapeMismatch(f"fine grid {(fy, fx)} is not {factor}x coarse grid {(cy, cx)}")
    if coarse.fields and fine.fields and not np.array_equal(coarse.timesteps, fine.timesteps):
        raise ShapeMismatch("coarse and fine stacks have different timesteps")


# ---------------------------------------------------------------- preprocessing


def preprocess_precip(series, spec, fit=None):
    """Apply the drizzle floor and per-cell quantile cap to a precip series.

    Parameters
    ----------
    series : ndarray, shape (T, ny, nx)
        Raw non-negative precipitation.
    spec : NormalizationSpec
        If ``spec.caps`` is set the caps are reused as-is (frozen).
    fit : index array or boolean mask, optional
        Timesteps used to fit the caps when they are not frozen; defaults
        to the whole series. Pass the training positions to avoid leakage.

    Returns
    -------
    out : ndarray
    spec : NormalizationSpec
        ``spec`` with ``caps`` populated.
    """
    series = np.asarray(series, dtype=np.float64)
    if (series < 0).any():
        loc = tuple(int(i) for i in np.argwhere(series < 0)[0])
        raise NegativeInput(f"negative precipitation at index {loc}")
    caps = spec.caps
    if caps is None:
        sample = series if fit is None else series[fit]
        if len(sample) == 0:
            raise EmptyPartition("cap fitting period")
        caps = np.quantile(sample, spec.precip_cap_quantile, axis=0)
        spec = dataclasses.replace(spec, caps=caps)
    elif caps.shape != series.shape[1:]:
        raise ShapeMismatch(f"caps {caps.shape} do not match grid {series.shape[1:]}")
    out = np.where(series < spec.precip_floor, 0.0, series)
    out = np.minimum(out, caps)
    # a cap below the floor would reintroduce drizzle
    out = np.where(out < spec.precip_floor, 0.0, out)
    return out, spec


def apply_floor(values, floor=0.05):
    values = np.asarray(values, dtype=np.float64)
    return np.where(values < floor, 0.0, values)


def normalize_array(values, variable, spec, direction="forward"):
    var = as_variable(variable)
    if var not in spec.bounds:
        raise UnknownVariable(f"no normalization bounds for {var.value}")
    lo, hi = spec.bounds[var]
    values = np.asarray(values, dtype=np.float64)
    if direction == "forward":
        return (values - lo) / (hi - lo)
    if direction == "inverse":
        return lo + np.clip(values, 0.0, 1.0) * (hi - lo)
    raise ValueError(f"direction must be 'forward' or 'inverse', not {direction!r}")


def normalize(field, spec, direction="forward"):
    """Min-max map a field onto [0, 1] (``forward``) or back (``inverse``)."""
    return GridField(field.variable, field.time_index, normalize_array(field.values, field.variable, spec, direction))


# ------------------------------------------------------------------- resampling


def _values(field):
    return field.values if isinstance(field, GridField) else np.asarray(field, dtype=np.float64)


def _rewrap(field, values):
    if isinstance(field, GridField):
        return GridField(field.variable, field.time_index, values)
    return values


def block_mean_upscale(field, factor):
    """Average non-overlapping ``factor`` x ``factor`` blocks.

    Accepts a GridField or an array whose last two axes are the grid.
    """
    v = _values(field)
    ny, nx = v.shape[-2:]
    if factor < 1 or ny % factor or nx % factor:
        raise NonDivisibleShape(f"grid {(ny, nx)} not divisible by {factor}")
    blocks = v.reshape(v.shape[:-2] + (ny // factor, factor, nx // factor, factor))
    return _rewrap(field, blocks.mean(axis=(-3, -1)))


def _bilinear_axis(n_src, n_dst):
    # cell-centre alignment, clamped at the edges (no extrapolation)
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), max(n_src - 2, 0))
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = pos - i0
    return i0, i1, frac


def bilinear_resample(field, target_ny, target_nx):
    """Bilinear interpolation onto a finer grid covering the same domain.

    Cell centres are aligned; target cells whose centres fall outside the
    source centres take the nearest edge value.
    """
    v = _values(field)
    ny, nx = v.shape[-2:]
    if target_ny < ny or target_nx < nx:
        raise InvalidTarget(f"target {(target_ny, target_nx)} smaller than source {(ny, nx)}")
    y0, y1, fy = _bilinear_axis(ny, target_ny)
    x0, x1, fx = _bilinear_axis(nx, target_nx)
    fy = fy[:, None]
    top = v[..., y0, :] * (1.0 - fy) + v[..., y1, :] * fy
    out = top[..., x0] * (1.0 - fx) + top[..., x1] * fx
    return _rewrap(field, out)


# ------------------------------------------------------------------- partitions


@dataclass(frozen=True)
class SplitScheme:
    """Calendar split: steps from ``test_start`` on are held out for testing."""

    test_start: int = OCTOBER_FIRST
    val_fraction: float = 0.1
    seed: int = 0


def temporal_split_indices(timesteps, scheme=SplitScheme()):
    """Positions of the train, validation and test steps."""
    timesteps = np.asarray(timesteps)
    test = np.flatnonzero(timesteps >= scheme.test_start)
    early = np.flatnonzero(timesteps < scheme.test_start)
    if early.size == 0:
        raise EmptyPartition("train")
    if test.size == 0:
        raise EmptyPartition("test")
    n_val = int(round(scheme.val_fraction * early.size))
    perm = np.random.default_rng(scheme.seed).permutation(early.size)
    val = np.sort(early[perm[:n_val]])
    train = np.sort(early[perm[n_val:]])
    if train.size == 0:
        raise EmptyPartition("train")
    if scheme.val_fraction > 0 and val.size == 0:
        raise EmptyPartition("validation")
    return train, val, test


def temporal_split(stack, scheme=SplitScheme()):
    train, val, test = temporal_split_indices(stack.timesteps, scheme)
    return stack.subset(train), stack.subset(val), stack.subset(test)


# ----------------------------------------------------------------------- regions


class Region(str, enum.Enum):
    CONUS = "CONUS"
    NE = "NE"
    SE = "SE"
    MW = "MW"
    SW = "SW"
    NW = "NW"
    NGP = "NGP"
    SGP = "SGP"


SUBREGIONS = (Region.SW, Region.NE, Region.MW, Region.SGP, Region.NW, Region.NGP, Region.SE)


@dataclass
class RegionMask:
    region: Region
    mask: np.ndarray

    def __post_init__(self):
        self.region = Region(self.region)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def cell_count(self):
        return int(self.mask.sum())


def nca_regions(ny, nx, land=None):
    """Seven NCA-like subregions as a row/column partition of the grid.

    Row 0 is the northern edge. Without georeferencing the grid is split
    by fixed fractions that keep the regions' relative layout: a western
    band (NW over SW), a Great Plains band (NGP over SGP), the Midwest over
    the eastern Southeast and the Northeast in the far east. ``land``
    restricts every region to a boolean land mask.
    """
    yy, xx = np.meshgrid(np.arange(ny) + 0.5, np.arange(nx) + 0.5, indexing="ij")
    fy, fx = yy / ny, xx / nx
    north = fy < 0.5
    west = fx < 0.3
    plains = (fx >= 0.3) & (fx < 0.5)
    mid = (fx >= 0.5) & (fx < 0.75)
    east = fx >= 0.75
    parts = {
        Region.NW: west & north,
        Region.SW: west & ~north,
        Region.NGP: plains & north,
        Region.SGP: plains & ~north,
        Region.MW: mid & north,
        Region.NE: east & north,
        Region.SE: (mid | east) & ~north,
    }
    if land is not None:
        parts = {k: v & land for k, v in parts.items()}
    conus = np.zeros((ny, nx), dtype=bool)
    for m in parts.values():
        conus |= m
    masks = {Region.CONUS: RegionMask(Region.CONUS, conus)}
    masks.update({k: RegionMask(k, parts[k]) for k in SUBREGIONS})
    return masks


def load_region_masks(path):
    """Region masks from ``<REGION>.npy`` boolean arrays in a directory."""
    masks = {}
    for region in Region:
        fpath = os.path.join(path, f"{region.value}.npy")
        if os.path.exists(fpath):
            masks[region] = RegionMask(region, _read_npy(fpath).astype(bool))
    if Region.CONUS not in masks and masks:
        conus = np.zeros_like(next(iter(masks.values())).mask)
        for m in masks.values():
            conus |= m.mask
        masks = {Region.CONUS: RegionMask(Region.CONUS, conus), **masks}
    return masks


def region_extract(field, mask):
    """Values of ``field`` under ``mask`` in row-major order."""
    v = _values(field)
    m = mask.mask if isinstance(mask, RegionMask) else np.asarray(mask, dtype=bool)
    if v.shape[-2:] != m.shape:
        raise ShapeMismatch(f"mask {m.shape} does not match field {v.shape[-2:]}")
    return v[..., m]
