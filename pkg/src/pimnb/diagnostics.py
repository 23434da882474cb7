"""Activation-distribution capture and KL/JS divergence between runs.

Histograms pool every post-BatchNorm activation scalar of a layer over a full
dataset sweep. Clean/noisy pairs are built with shared bin edges (a first pass
finds the union range), and divergences apply add-one smoothing so they are
finite on any input pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import nn
from .calibration import CalibrationConfig, calibrate
from .data import Dataset, iter_batches
from .errors import HistogramAlignmentError, UnknownLayerError
from .noise import DeviceInstance

DEFAULT_BINS = 256
DEFAULT_SMOOTHING = 1.0


@dataclass
class ActivationHistogram:
    layer_id: int
    bin_edges: np.ndarray            # float64, B+1, strictly increasing
    counts: np.ndarray               # int64, B
    total: int
    out_of_range_low: int = 0        # clipped into the first bin
    out_of_range_high: int = 0       # clipped into the last bin

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if np.any(np.diff(self.bin_edges) <= 0):
            raise HistogramAlignmentError("bin edges must be strictly increasing")
        if len(self.counts) != len(self.bin_edges) - 1:
            raise HistogramAlignmentError(
                f"{len(self.counts)} counts for {len(self.bin_edges)} edges"
            )
        if int(self.counts.sum()) != self.total:
            raise HistogramAlignmentError("counts do not sum to total")

    @property
    def bins(self) -> int:
        return len(self.counts)


def _check_layer_ids(model: nn.Model, layer_ids: Sequence[int]) -> tuple[int, ...]:
    bn = set(model.bn_layers())
    ids = tuple(int(i) for i in layer_ids)
    for i in ids:
        if i not in bn:
            raise UnknownLayerError(f"layer {i} is not a BatchNorm layer of this model")
    return ids


def _sweep(model, data, ids, device, batch_size):
    """Yield (layer_id, activation array) over all batches in dataset order."""
    for bi, (xb, _) in enumerate(iter_batches(data, batch_size)):
        _, acts = nn.forward(model, xb, nn.ExecMode.EVAL, device=device, trace=set(ids), batch_index=bi)
        for i in ids:
            yield i, acts[i].array


def _value_ranges(model, data, ids, device, batch_size):
    lo = {i: math.inf for i in ids}
    hi = {i: -math.inf for i in ids}
    for i, arr in _sweep(model, data, ids, device, batch_size):
        lo[i] = min(lo[i], float(arr.min()))
        hi[i] = max(hi[i], float(arr.max()))
    return lo, hi


def _edges(lo: float, hi: float, bins: int) -> np.ndarray:
    if not hi > lo:
        # Degenerate (constant) activations: widen to a unit interval.
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1, dtype=np.float64)


def collect_histograms(
    model: nn.Model,
    data: Dataset,
    layer_ids: Sequence[int],
    bins: int = DEFAULT_BINS,
    device: Optional[DeviceInstance] = None,
    batch_size: int = 256,
    ranges: Optional[dict[int, tuple[float, float]]] = None,
) -> list[ActivationHistogram]:
    """One histogram per layer over all post-BatchNorm activations of ``data``.

    Without explicit ``ranges`` a first pass over the same run fixes
    [min, max]; values outside a supplied range are clipped into the end bins
    and counted in the out_of_range fields.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    ids = _check_layer_ids(model, layer_ids)
    if ranges is None:
        lo, hi = _value_ranges(model, data, ids, device, batch_size)
        ranges = {i: (lo[i], hi[i]) for i in ids}
    edges = {i: _edges(*ranges[i], bins) for i in ids}
    counts = {i: np.zeros(bins, dtype=np.int64) for i in ids}
    low = {i: 0 for i in ids}
    high = {i: 0 for i in ids}
    for i, arr in _sweep(model, data, ids, device, batch_size):
        vals = arr.ravel().astype(np.float64)
        e = edges[i]
        low[i] += int((vals < e[0]).sum())
        high[i] += int((vals > e[-1]).sum())
        counts[i] += np.histogram(np.clip(vals, e[0], e[-1]), bins=e)[0]
    return [
        ActivationHistogram(
            layer_id=i,
            bin_edges=edges[i],
            counts=counts[i],
            total=int(counts[i].sum()),
            out_of_range_low=low[i],
            out_of_range_high=high[i],
        )
        for i in ids
    ]


def collect_histogram_pairs(
    model: nn.Model,
    device: DeviceInstance,
    data: Dataset,
    layer_ids: Sequence[int],
    bins: int = DEFAULT_BINS,
    batch_size: int = 256,
) -> tuple[list[ActivationHistogram], list[ActivationHistogram]]:
    """Clean and noisy histograms over shared bin edges.

    The range pass covers the union of the clean and noisy runs so the paired
    histograms are directly comparable (and nothing lands out of range).
    """
    ids = _check_layer_ids(model, layer_ids)
    lo_c, hi_c = _value_ranges(model, data, ids, None, batch_size)
    lo_n, hi_n = _value_ranges(model, data, ids, device, batch_size)
    ranges = {i: (min(lo_c[i], lo_n[i]), max(hi_c[i], hi_n[i])) for i in ids}
    clean = collect_histograms(model, data, ids, bins, device=None, batch_size=batch_size, ranges=ranges)
    noisy = collect_histograms(model, data, ids, bins, device=device, batch_size=batch_size, ranges=ranges)
    return clean, noisy


# ---------------------------------------------------------------------------
# Divergences


def _smoothed(p: ActivationHistogram, q: ActivationHistogram, smoothing: float):
    if p.bins != q.bins or not np.array_equal(p.bin_edges, q.bin_edges):
        raise HistogramAlignmentError("histograms were built over different bin edges")
    if p.total <= 0 or q.total <= 0:
        raise HistogramAlignmentError("histograms must contain at least one count")
    if smoothing <= 0:
        raise ValueError(f"smoothing must be > 0, got {smoothing}")
    ph = (p.counts + smoothing) / (p.total + smoothing * p.bins)
    qh = (q.counts + smoothing) / (q.total + smoothing * q.bins)
    return ph, qh


def _kl(ph: np.ndarray, qh: np.ndarray) -> float:
    return float(np.sum(ph * np.log(ph / qh)))


def kl_divergence(p: ActivationHistogram, q: ActivationHistogram, smoothing: float = DEFAULT_SMOOTHING) -> float:
    """KL(P||Q) in nats, with add-``smoothing`` counts per bin; always finite."""
    ph, qh = _smoothed(p, q, smoothing)
    return max(_kl(ph, qh), 0.0)


def js_divergence(p: ActivationHistogram, q: ActivationHistogram, smoothing: float = DEFAULT_SMOOTHING) -> float:
    """Jensen-Shannon divergence in nats; symmetric and within [0, ln 2]."""
    ph, qh = _smoothed(p, q, smoothing)
    m = 0.5 * (ph + qh)
    js = 0.5 * _kl(ph, m) + 0.5 * _kl(qh, m)
    return min(max(js, 0.0), math.log(2.0))


# ---------------------------------------------------------------------------
# Per-layer report


@dataclass
class DivergenceRow:
    layer_id: int
    kl_nats: float
    js_nats: float
    kl_calibrated: float
    js_calibrated: float
    ratio_kl: float
    ratio_js: float
    kl_rev_nats: float          # reverse direction KL(noisy||clean)
    kl_rev_calibrated: float


CSV_COLUMNS = (
    "layer_id",
    "kl_nats",
    "js_nats",
    "kl_calibrated",
    "js_calibrated",
    "ratio_kl",
    "ratio_js",
    "kl_rev_nats",
    "kl_rev_calibrated",
)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else math.nan


def divergence_report(
    model: nn.Model,
    device: DeviceInstance,
    data: Dataset,
    calibrated: bool = True,
    calib_data: Optional[Dataset] = None,
    calib_cfg: Optional[CalibrationConfig] = None,
    bins: int = DEFAULT_BINS,
    smoothing: float = DEFAULT_SMOOTHING,
    batch_size: int = 256,
) -> list[DivergenceRow]:
    """Per-BatchNorm-layer divergence between clean and noisy activations.

    Uncalibrated rows compare the clean model against the noisy one with its
    original running statistics. With ``calibrated`` true the model is also
    calibrated on ``calib_data`` (defaults to ``data``; pass the training
    split) and the comparison repeated, giving the calibrated/uncalibrated
    ratio per layer. With ``calibrated`` false those columns are NaN.
    """
    ids = model.bn_layers()
    clean, noisy = collect_histogram_pairs(model, device, data, ids, bins, batch_size)

    cal_by_layer = {}
    if calibrated:
        cal_model = model.copy()
        calibrate(cal_model, device, calib_data if calib_data is not None else data, calib_cfg or CalibrationConfig())
        ranges = {h.layer_id: (float(h.bin_edges[0]), float(h.bin_edges[-1])) for h in clean}
        cal_noisy = collect_histograms(
            cal_model, data, ids, bins, device=device, batch_size=batch_size, ranges=ranges
        )
        cal_by_layer = {h.layer_id: h for h in cal_noisy}

    rows = []
    for hc, hn in zip(clean, noisy):
        kl = kl_divergence(hc, hn, smoothing)
        js = js_divergence(hc, hn, smoothing)
        kl_rev = kl_divergence(hn, hc, smoothing)
        if calibrated:
            hcal = cal_by_layer[hc.layer_id]
            klc = kl_divergence(hc, hcal, smoothing)
            jsc = js_divergence(hc, hcal, smoothing)
            klc_rev = kl_divergence(hcal, hc, smoothing)
        else:
            klc = jsc = klc_rev = math.nan
        rows.append(
            DivergenceRow(
                layer_id=hc.layer_id,
                kl_nats=kl,
                js_nats=js,
                kl_calibrated=klc,
                js_calibrated=jsc,
                ratio_kl=_ratio(klc, kl),
                ratio_js=_ratio(jsc, js),
                kl_rev_nats=kl_rev,
                kl_rev_calibrated=klc_rev,
            )
        )
    return rows
