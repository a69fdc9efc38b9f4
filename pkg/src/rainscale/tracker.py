"""Storm event identification and tracking.

Cells at or above a threshold are grouped per timestep by almost-connected
component labeling: two raw components belong together when their disk
dilations (radius ``r_acc``) overlap or are 8-adjacent. Components at
consecutive timesteps that share a cell are joined into one event, so
splits and mergers keep a single id.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import EmptyEvent, InvalidConfig, ShapeMismatch
from .grid import GridField

CELL_AREA_KM2 = 144.0
VOLUME_FACTOR = 144000.0


@dataclass
class TrackerConfig:
    threshold: float = 10.0
    r_acc: int = 2
    min_cells: int = 1
    min_overlap: int = 1

    def validate(self):
        if not self.threshold > 0:
            raise InvalidConfig("threshold must be > 0")
        if self.r_acc < 0:
            raise InvalidConfig("r_acc must be >= 0")
        if self.min_cells < 1 or self.min_overlap < 1:
            raise InvalidConfig("min_cells and min_overlap must be >= 1")
        return self


def threshold_mask(field, cfg):
    values = field.values if isinstance(field, GridField) else np.asarray(field, dtype=np.float64)
    return values >= cfg.threshold


def disk(r):
    """Offsets (dy, dx) with dy^2 + dx^2 <= r^2."""
    d = np.arange(-r, r + 1)
    yy, xx = np.meshgrid(d, d, indexing="ij")
    on = yy * yy + xx * xx <= r * r
    return np.stack([yy[on], xx[on]], axis=1)


def reach_offsets(r_acc):
    """Half of the offset set D + D + C linking two raw-mask cells.

    D is the radius-``r_acc`` disk and C the 3x3 neighbourhood: two cells
    are linked iff their dilations overlap or touch 8-adjacently. With
    ``r_acc = 0`` this is plain 8-connectivity. Only one of each +/- pair is
    returned, excluding (0, 0).
    """
    d = disk(r_acc)
    dd = (d[:, None, :] + d[None, :, :]).reshape(-1, 2)
    c = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)])
    full = np.unique((dd[:, None, :] + c[None, :, :]).reshape(-1, 2), axis=0)
    half = (full[:, 0] > 0) | ((full[:, 0] == 0) & (full[:, 1] > 0))
    return np.ascontiguousarray(full[half], dtype=np.int64)


def _relabel_min_cells(labels, n, min_cells):
    if min_cells <= 1 or n == 0:
        return labels, n
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= min_cells
    keep[0] = False
    remap = np.zeros(n + 1, dtype=np.int64)
    remap[keep] = np.arange(1, int(keep.sum()) + 1)
    return remap[labels], int(keep.sum())


def acc_label(mask, cfg):
    """Almost-connected labels (0 background, dense 1..n in raster order)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ShapeMismatch(f"mask must be 2-D, got {mask.shape}")
    labels, n = kernels.label_reach(mask, reach_offsets(cfg.r_acc))
    labels, n = _relabel_min_cells(labels, n, cfg.min_cells)
    return labels


@dataclass
class StormEvent:
    event_id: int
    t_b: int
    t_e: int
    # position in the series -> flat indices of the event's cells
    cells: dict = field(default_factory=dict)
    D: int = 0
    S_life: float = math.nan
    I_life: float = math.nan
    V_tot: float = math.nan
    peak: float = math.nan

    def cell_counts(self):
        return [int(self.cells[t].size) if t in self.cells else 0 for t in range(self.t_b, self.t_e + 1)]


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # smaller root wins so ids follow first appearance
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


def link_time(labels, cfg):
    """Join labeled components across consecutive timesteps into events.

    ``labels`` is a (T, ny, nx) integer array (or list of 2-D grids). Events
    are numbered from 1 by their first component in (time, raster) order.
    """
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeMismatch(f"expected (T, ny, nx) labels, got {labels.shape}")
    T = labels.shape[0]
    counts = [int(labels[t].max()) if labels[t].size else 0 for t in range(T)]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    uf = _UnionFind(int(offsets[-1]))
    for t in range(T - 1):
        a, b = labels[t].ravel(), labels[t + 1].ravel()
        both = (a > 0) & (b > 0)
        if not both.any():
            continue
        pairs, n = np.unique(np.stack([a[both], b[both]], axis=1), axis=0, return_counts=True)
        for (la, lb), k in zip(pairs, n):
            if k >= cfg.min_overlap:
                uf.union(int(offsets[t] + la - 1), int(offsets[t + 1] + lb - 1))
    events = {}
    order = []
    for t in range(T):
        flat = labels[t].ravel()
        on = np.flatnonzero(flat)
        if on.size == 0:
            continue
        lab = flat[on]
        for la in range(1, counts[t] + 1):
            root = uf.find(int(offsets[t] + la - 1))
            if root not in events:
                events[root] = StormEvent(len(order) + 1, t, t)
                order.append(root)
            ev = events[root]
            cells = on[lab == la]
            if t in ev.cells:
                ev.cells[t] = np.sort(np.concatenate([ev.cells[t], cells]))
            else:
                ev.cells[t] = cells
            ev.t_e = max(ev.t_e, t)
    return [events[r] for r in order]


def event_stats(event, precip, cell_area_km2=CELL_AREA_KM2, volume_factor=VOLUME_FACTOR):
    """Fill D, S_life (km^2), V_tot (m^3), I_life = V_tot / S_life and peak."""
    precip = np.asarray(precip, dtype=np.float64)
    n_cells = sum(int(c.size) for c in event.cells.values())
    if n_cells == 0:
        raise EmptyEvent(f"event {event.event_id} has no cells")
    event.D = event.t_e - event.t_b + 1
    event.S_life = n_cells * cell_area_km2 / event.D
    amount = 0.0
    peak = -math.inf
    for t in sorted(event.cells):
        vals = precip[t].ravel()[event.cells[t]]
        amount += float(vals.sum())
        peak = max(peak, float(vals.max()))
    event.V_tot = amount * volume_factor
    event.I_life = event.V_tot / event.S_life
    event.peak = peak
    return event


def intensity_mm(event):
    """Lifetime mean intensity as a rate in mm/3hr (I_life in m^3/km^2 over D steps)."""
    return event.I_life / (1000.0 * event.D)


def track(precip, cfg=None):
    """Threshold, label, link and measure events in a (T, ny, nx) series."""
    cfg = (cfg or TrackerConfig()).validate()
    precip = np.asarray(precip, dtype=np.float64)
    if precip.ndim != 3:
        raise ShapeMismatch(f"expected (T, ny, nx) precipitation, got {precip.shape}")
    labels = np.stack([acc_label(threshold_mask(p, cfg), cfg) for p in precip]) if len(precip) else np.zeros(
        (0,) + precip.shape[1:], dtype=np.int64
    )
    events = link_time(labels, cfg)
    return [event_stats(e, precip) for e in events]


DEFAULT_BINS = {
    "intensity": np.append(np.arange(10.0, 21.0), np.inf),
    "duration": np.append(np.arange(1.0, 17.0), np.inf),
    "log_size": np.arange(2.0, 6.01, 0.25),
    "log_volume": np.arange(6.0, 11.01, 0.25),
}


def event_values(events):
    return {
        "intensity": np.array([intensity_mm(e) for e in events], dtype=np.float64),
        "duration": np.array([e.D for e in events], dtype=np.float64),
        "log_size": np.log10(np.array([e.S_life for e in events], dtype=np.float64)),
        "log_volume": np.log10(np.array([e.V_tot for e in events], dtype=np.float64)),
    }


def event_histograms(events, bins=None):
    """Percent frequency per bin for each event characteristic.

    Values outside the edges fall in the first or last bin, so each table
    sums to 100 when there is at least one event. With no events the tables
    are empty.
    """
    bins = {**DEFAULT_BINS, **(bins or {})}
    if not events:
        return {k: (np.asarray(bins[k]), np.zeros(0)) for k in bins}
    values = event_values(events)
    out = {}
    for key, edges in bins.items():
        edges = np.asarray(edges, dtype=np.float64)
        idx = np.clip(np.searchsorted(edges, values[key], side="right") - 1, 0, edges.size - 2)
        counts = np.bincount(idx, minlength=edges.size - 1)
        out[key] = (edges, 100.0 * counts / counts.sum())
    return out


EVENT_COLUMNS = ("id", "T_b", "T_e", "D", "S_life", "I_life", "V_tot", "peak", "cells_per_step")


def write_events_csv(events, path, timesteps=None):
    """Events table; ``timesteps`` maps series positions to time indices."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENT_COLUMNS)
        for e in events:
            tb, te = (e.t_b, e.t_e) if timesteps is None else (int(timesteps[e.t_b]), int(timesteps[e.t_e]))
            writer.writerow(
                [e.event_id, tb, te, e.D, repr(e.S_life), repr(e.I_life), repr(e.V_tot), repr(e.peak),
                 ";".join(str(c) for c in e.cell_counts())]
            )


def write_histograms_csv(tables, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["characteristic", "bin_lo", "bin_hi", "percent"])
        for key, (edges, pct) in tables.items():
            for lo, hi, p in zip(edges[:-1], edges[1:], pct):
                writer.writerow([key, repr(float(lo)), repr(float(hi)), repr(float(p))])
