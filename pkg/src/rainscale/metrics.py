"""Evaluation metrics: per-step MSE summaries, PDFs, J-S distance, pattern
correlation and summary maps, plus CSV/PGM report writers."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BinningMismatch,
    EmptySeries,
    NegativeValue,
    ShapeMismatch,
    TimeMisalignment,
    TooFewSteps,
    ZeroVariance,
)
from .grid import GridField, Region, RegionMask, Variable

# unit bins [0,1), ..., [29,30) and an open last bin [30, inf)
PDF_EDGES = np.append(np.arange(31, dtype=np.float64), np.inf)


def _arr(x):
    return x.values if isinstance(x, GridField) else np.asarray(x, dtype=np.float64)


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = mask.mask if isinstance(mask, RegionMask) else np.asarray(mask, dtype=bool)
    if m.shape != tuple(shape):
        raise ShapeMismatch(f"mask {m.shape} does not match field {tuple(shape)}")
    return m


def pairwise_mse(a, b, mask=None):
    """(1/N) sum over masked cells of (a - b)^2; NaN for an empty mask."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"fields differ in shape: {a.shape} vs {b.shape}")
    m = _mask(mask, a.shape[-2:])
    n = int(m.sum())
    if n == 0:
        return math.nan
    d = a[..., m] - b[..., m]
    return float((d * d).sum(axis=-1) / n) if d.ndim == 1 else (d * d).sum(axis=-1) / n


def eq3_literal(field, mask=None):
    """(1/N) sum (Y_i - Ybar)^2 with Ybar the masked spatial mean."""
    y = _arr(field)
    m = _mask(mask, y.shape[-2:])
    n = int(m.sum())
    if n == 0:
        return math.nan
    v = y[..., m]
    d = v - v.mean(axis=-1, keepdims=True)
    out = (d * d).sum(axis=-1) / n
    return float(out) if np.ndim(out) == 0 else out


def nearest_rank(values, p):
    """Nearest-rank percentile: the ceil(p/100 * N)-th smallest value."""
    s = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if s.size == 0:
        raise EmptySeries("percentile of an empty series")
    rank = max(1, math.ceil(p / 100.0 * s.size))
    return float(s[rank - 1])


def percentile_mse_summary(series, percentiles=(50, 99)):
    series = np.asarray(series, dtype=np.float64).ravel()
    if series.size == 0:
        raise EmptySeries("no per-timestep values to summarize")
    return tuple(nearest_rank(series, p) for p in percentiles)


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def densities(self):
        total = self.counts.sum()
        if total == 0:
            return np.zeros(self.counts.shape)
        return self.counts / total


def pdf_histogram(values, edges=PDF_EDGES):
    """Counts of precipitation values in unit bins with an open top bin."""
    v = np.asarray(_arr(values) if isinstance(values, GridField) else values, dtype=np.float64).ravel()
    if (v < 0).any():
        raise NegativeValue(f"negative value {v[v < 0][0]!r} in PDF input")
    edges = np.asarray(edges, dtype=np.float64)
    idx = np.searchsorted(edges, v, side="right") - 1
    idx = np.clip(idx, 0, edges.size - 2)
    counts = np.bincount(idx, minlength=edges.size - 1).astype(np.int64)
    return Histogram(edges, counts)


def _kl_bits(p, m):
    on = p > 0
    return float((p[on] * np.log2(p[on] / m[on])).sum())


def js_distance(P, Q):
    """Square root of the base-2 Jensen-Shannon divergence; lies in [0, 1]."""
    if isinstance(P, Histogram) and isinstance(Q, Histogram):
        if P.edges.shape != Q.edges.shape or not np.array_equal(P.edges, Q.edges):
            raise BinningMismatch("histograms use different bin edges")
        p, q = P.densities, Q.densities
    else:
        p = P.densities if isinstance(P, Histogram) else np.asarray(P, dtype=np.float64)
        q = Q.densities if isinstance(Q, Histogram) else np.asarray(Q, dtype=np.float64)
        if p.shape != q.shape:
            raise BinningMismatch(f"{p.size} bins vs {q.size} bins")
    m = (p + q) / 2.0
    jsd = (_kl_bits(p, m) + _kl_bits(q, m)) / 2.0
    return math.sqrt(min(max(jsd, 0.0), 1.0))


def pattern_correlation(a, b, mask=None):
    """Pearson correlation over masked cells (two-pass)."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"fields differ in shape: {a.shape} vs {b.shape}")
    m = _mask(mask, a.shape)
    x, y = a[m], b[m]
    if x.size == 0:
        raise ZeroVariance("empty region")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float((dx * dx).sum()), float((dy * dy).sum())
    if sxx == 0.0 or syy == 0.0:
        raise ZeroVariance("a field is constant over the region")
    r = float((dx * dy).sum()) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def summary_map(series, kind):
    """Per-cell temporal ``mean``, sample ``std`` or ``top5`` map.

    ``top5`` averages each cell's values at or above its nearest-rank 95th
    percentile.
    """
    s = np.asarray(series, dtype=np.float64)
    if s.ndim != 3:
        raise ShapeMismatch(f"expected a (T, ny, nx) series, got {s.shape}")
    T = s.shape[0]
    if T == 0 or (kind == "std" and T < 2):
        raise TooFewSteps(f"{kind} map needs at least {2 if kind == 'std' else 1} steps, got {T}")
    if kind == "mean":
        out = s.mean(axis=0)
    elif kind == "std":
        out = s.std(axis=0, ddof=1)
    elif kind == "top5":
        rank = max(1, math.ceil(0.95 * T))
        thr = np.sort(s, axis=0)[rank - 1]
        sel = s >= thr
        out = np.where(sel, s, 0.0).sum(axis=0) / sel.sum(axis=0)
    else:
        raise ValueError(f"unknown summary kind {kind!r}")
    return GridField(Variable.PRECIP, -1, out)


# ------------------------------------------------------------------- reporting

SUMMARY_KINDS = ("mean", "std", "top5")


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    maps: dict = field(default_factory=dict)

    def add(self, region, model, metric, value):
        self.rows.append((Region(region).value, model, metric, float(value)))

    def value(self, region, model, metric):
        region = Region(region).value
        for r, mo, me, v in self.rows:
            if (r, mo, me) == (region, model, metric):
                return v
        raise KeyError((region, model, metric))


def evaluate(truth, candidates, masks, use_eq3=False, percentiles=(50, 99)):
    """Compare candidate (T, ny, nx) precipitation series against ``truth``.

    Per region and candidate this reports the 50th/99th nearest-rank
    percentiles of the per-step MSE, the J-S distance between value PDFs
    and the pattern correlations of the mean/std/top-5% maps.
    """
    truth = np.asarray(truth, dtype=np.float64)
    report = MetricReport()
    truth_maps = {k: summary_map(truth, k).values for k in SUMMARY_KINDS}
    report.maps["truth"] = truth_maps
    for name, cand in candidates.items():
        cand = np.asarray(cand, dtype=np.float64)
        if cand.shape != truth.shape:
            raise TimeMisalignment(f"{name}: shape {cand.shape} does not match truth {truth.shape}")
        cand_maps = {k: summary_map(cand, k).values for k in SUMMARY_KINDS}
        report.maps[name] = cand_maps
        for region, rmask in masks.items():
            m = _mask(rmask, truth.shape[1:])
            if not m.any():
                continue
            per_step = pairwise_mse(cand, truth, m)
            for p, v in zip(percentiles, percentile_mse_summary(per_step, percentiles)):
                report.add(region, name, f"mse_p{p}", v)
            if use_eq3:
                for p, v in zip(percentiles, percentile_mse_summary(eq3_literal(cand, m), percentiles)):
                    report.add(region, name, f"eq3_p{p}", v)
            js = js_distance(pdf_histogram(truth[:, m]), pdf_histogram(cand[:, m]))
            report.add(region, name, "js_distance", js)
            for k in SUMMARY_KINDS:
                try:
                    r = pattern_correlation(truth_maps[k], cand_maps[k], m)
                except ZeroVariance:
                    r = math.nan
                report.add(region, name, f"corr_{k}", r)
    return report


REPORT_COLUMNS = ("region", "model", "metric", "value")


def write_report_csv(report, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for region, model, metric, value in report.rows:
            writer.writerow([region, model, metric, "" if math.isnan(value) else repr(value)])


def read_report_csv(path):
    report = MetricReport()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            value = float(row["value"]) if row["value"] else math.nan
            report.add(row["region"], row["model"], row["metric"], value)
    return report


def write_pgm(values, path, vmin=None, vmax=None):
    """Write a binary (P5) 8-bit grayscale image, row 0 at the top."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeMismatch(f"PGM needs a 2-D array, got {v.shape}")
    lo = float(np.nanmin(v)) if vmin is None else vmin
    hi = float(np.nanmax(v)) if vmax is None else vmax
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.round((np.nan_to_num(v, nan=lo) - lo) * scale), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path):
    """Read a P5 file as written by :func:`write_pgm` (no header comments)."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic, size, maxval, pixels = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    w, h = (int(s) for s in size.split())
    return np.frombuffer(pixels[: w * h], dtype=np.uint8).reshape(h, w)
