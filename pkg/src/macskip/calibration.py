"""One-time threshold calibration and activation-range capture.

Thresholds come from the distribution of activation-weight product
magnitudes observed on a held-out batch run *densely* in float (so the
statistics are not biased by upstream pruning).  For each prunable layer
(and each group, when output channels / input rows are partitioned), the
threshold is the nearest-rank p-th percentile of a uniform sample of
|x * w| products, zeros included - exact-zero products are real skip
opportunities and belong in the distribution.

Sampling: the product index space of a layer/group can reach tens of
millions per batch, so at most sample_cap products are drawn per group
as a seeded uniform sample without replacement (statistically identical
to reservoir sampling) and gathered in one vectorized pass.  Fixed batch
plus fixed seed gives an identical table every time.

The same sweep records activation magnitudes: the model input's max-abs
and each MAC layer's pre-activation output max-abs, which later become
the fixed-point activation scales.  Collection is separated from
percentile extraction (collect_product_stats / table_from_stats) so one
sweep can serve many percentiles.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch, EmptySamples, UsageError
from .kernels import LayerKind, ModelGraph
from .numerics import Q8_8, QFormat
from .tensor import quantize_tensor

DEFAULT_SAMPLE_CAP = 1 << 16


def percentile_nearest_rank(samples, p: float) -> float:
    """Order statistic at rank ceil(p/100 * N) of the sorted sample.

    Rank clamps to 1 when the ceiling is 0, so p=0 returns the minimum
    element; p=100 returns the maximum.
    """
    arr = np.asarray(samples, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptySamples("percentile of an empty multiset")
    if not 0.0 <= p <= 100.0:
        raise UsageError(f"percentile must be in [0, 100], got {p}")
    rank = max(1, int(np.ceil(p / 100.0 * arr.size)))
    return float(np.sort(arr)[rank - 1])


@dataclass
class LayerProductStats:
    """Sorted product-magnitude samples and ranges for one MAC layer."""

    layer_index: int
    group_samples: list[np.ndarray]  # each sorted ascending, float64
    sample_count: int                # total products sampled across groups
    out_max_abs: float               # max |pre-activation output| on the batch


@dataclass
class CalibrationStats:
    groups: int
    seed: int
    sample_cap: int
    batch_size: int
    input_max_abs: float
    layers: dict[int, LayerProductStats] = field(default_factory=dict)


@dataclass
class LayerThresholds:
    layer_index: int
    thresholds: np.ndarray  # (groups,), real product units
    sample_count: int
    act_max_abs: float


@dataclass
class ThresholdTable:
    """Per-layer calibrated thresholds plus the ranges quantization needs."""

    percentile: float
    groups: int
    seed: int
    sample_cap: int
    input_max_abs: float
    layers: dict[int, LayerThresholds] = field(default_factory=dict)


def _sample_indices(n_total: int, cap: int, seed: int) -> np.ndarray:
    """Uniform sorted draw of min(cap, n_total) distinct indices.

    random.sample over a range object selects without replacement
    without materializing the population.
    """
    k = min(cap, n_total)
    if k == n_total:
        return np.arange(n_total, dtype=np.int64)
    picks = random.Random(seed).sample(range(n_total), k)
    return np.sort(np.asarray(picks, dtype=np.int64))


def _conv_cols(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B,C,H,W) float -> (B, C*kh*kw, outH*outW)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    b, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        b, c * kh * kw, oh * ow)


def collect_product_stats(model: ModelGraph, batch: np.ndarray,
                          sample_cap: int = DEFAULT_SAMPLE_CAP,
                          groups: int = 1, seed: int = 0) -> CalibrationStats:
    """Dense float sweep over the batch, sampling |x*w| per layer/group.

    batch is (B, C, H, W) float; the model must be a float graph.
    """
    if model.is_fixed:
        raise UsageError("calibration runs on the float model")
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise EmptyBatch("calibration batch must be a nonempty (B,C,H,W) array")
    if sample_cap < 1:
        raise UsageError("sample_cap must be >= 1")
    if groups < 1:
        raise UsageError("groups must be >= 1")
    b = batch.shape[0]
    x = batch.astype(np.float32)
    stats = CalibrationStats(groups=groups, seed=seed, sample_cap=sample_cap,
                             batch_size=b, input_max_abs=float(np.max(np.abs(x))))
    for idx, layer in enumerate(model.layers):
        if layer.kind is LayerKind.CONV2D:
            oc, ic, kh, kw = layer.weights.shape.dims
            if oc % groups:
                raise UsageError(f"{layer.name}: groups {groups} does not divide "
                                 f"output channels {oc}")
            w2 = layer.weights.nd.reshape(oc, -1).astype(np.float32)
            oh, ow = x.shape[2] - kh + 1, x.shape[3] - kw + 1
            cols = _conv_cols(x, kh, kw)  # (B, K, L)
            k_dim, l_dim = cols.shape[1:]
            cb = oc // groups
            group_samples = []
            count = 0
            for g in range(groups):
                n_total = b * cb * k_dim * l_dim
                ids = _sample_indices(n_total, sample_cap, seed * 10007 + idx * 101 + g)
                bi, rem = np.divmod(ids, cb * k_dim * l_dim)
                oo, rem = np.divmod(rem, k_dim * l_dim)
                ki, li = np.divmod(rem, l_dim)
                prods = np.abs(cols[bi, ki, li].astype(np.float64)
                               * w2[g * cb + oo, ki].astype(np.float64))
                group_samples.append(np.sort(prods))
                count += prods.size
            out = np.matmul(w2[None].astype(np.float32), cols)
            if layer.bias is not None:
                out = out + layer.bias.astype(np.float32)[None, :, None]
            stats.layers[idx] = LayerProductStats(idx, group_samples, count,
                                                  float(np.max(np.abs(out))))
            x = out.reshape(b, oc, oh, ow)
        elif layer.kind is LayerKind.LINEAR:
            m, n = layer.weights.shape.dims
            if m % groups:
                raise UsageError(f"{layer.name}: groups {groups} does not divide "
                                 f"input rows {m}")
            xv = x.reshape(b, -1)
            if xv.shape[1] != m:
                raise UsageError(f"{layer.name}: input length {xv.shape[1]} != {m}")
            w = layer.weights.nd.astype(np.float32)
            mb = m // groups
            group_samples = []
            count = 0
            for g in range(groups):
                n_total = b * mb * n
                ids = _sample_indices(n_total, sample_cap, seed * 10007 + idx * 101 + g)
                bi, rem = np.divmod(ids, mb * n)
                ii, ji = np.divmod(rem, n)
                prods = np.abs(xv[bi, g * mb + ii].astype(np.float64)
                               * w[g * mb + ii, ji].astype(np.float64))
                group_samples.append(np.sort(prods))
                count += prods.size
            out = xv @ w
            if layer.bias is not None:
                out = out + layer.bias.astype(np.float32)[None, :]
            stats.layers[idx] = LayerProductStats(idx, group_samples, count,
                                                  float(np.max(np.abs(out))))
            x = out
        elif layer.kind is LayerKind.MAXPOOL:
            s = layer.pool_size
            bb, c, h, w_ = x.shape
            x = x.reshape(bb, c, h // s, s, w_ // s, s).max(axis=(3, 5))
        elif layer.kind is LayerKind.RELU:
            x = np.maximum(x, 0.0)
        elif layer.kind is LayerKind.FATRELU:
            x = np.where(x > layer.fatrelu_threshold, x, np.float32(0.0))
    return stats


def table_from_stats(stats: CalibrationStats, p: float) -> ThresholdTable:
    """Extract a threshold table at percentile p from collected samples.

    p = 0 pins every threshold to exactly 0 (prune nothing but zero
    products); otherwise the per-group nearest-rank percentile applies.
    """
    if not 0.0 <= p <= 100.0:
        raise UsageError(f"percentile must be in [0, 100], got {p}")
    table = ThresholdTable(percentile=p, groups=stats.groups, seed=stats.seed,
                           sample_cap=stats.sample_cap,
                           input_max_abs=stats.input_max_abs)
    for idx, layer_stats in stats.layers.items():
        ts = []
        for samples in layer_stats.group_samples:
            if samples.size == 0:
                raise EmptySamples(f"layer {idx}: no products sampled")
            if p == 0.0:
                ts.append(0.0)
            else:
                rank = max(1, int(np.ceil(p / 100.0 * samples.size)))
                ts.append(float(samples[rank - 1]))  # samples are pre-sorted
        table.layers[idx] = LayerThresholds(
            layer_index=idx,
            thresholds=np.asarray(ts, dtype=np.float64),
            sample_count=layer_stats.sample_count,
            act_max_abs=layer_stats.out_max_abs,
        )
    return table


def calibrate(model: ModelGraph, batch: np.ndarray, p: float,
              sample_cap: int = DEFAULT_SAMPLE_CAP, groups: int = 1,
              seed: int = 0) -> ThresholdTable:
    """collect_product_stats + table_from_stats in one call."""
    return table_from_stats(
        collect_product_stats(model, batch, sample_cap, groups, seed), p)


def quantize_model(model: ModelGraph, table: ThresholdTable,
                   fmt: QFormat = Q8_8) -> ModelGraph:
    """Deploy a float model to fixed point using calibrated ranges.

    Weights quantize per-tensor symmetric; activation scales come from
    the table's max-abs captures; biases are stored as raw integers in
    each layer's output domain; thresholds embed in real product units.
    The float model is left untouched.
    """
    if model.is_fixed:
        raise UsageError("model is already fixed point")
    from .kernels import LayerSpec  # local to avoid a cycle in type order

    input_scale = table.input_max_abs / fmt.max_value if table.input_max_abs > 0 else 1.0
    layers: list[LayerSpec] = []
    for idx, layer in enumerate(model.layers):
        if not layer.is_mac:
            layers.append(LayerSpec(kind=layer.kind, name=layer.name,
                                    pool_size=layer.pool_size,
                                    fatrelu_threshold=layer.fatrelu_threshold))
            continue
        if idx not in table.layers:
            raise UsageError(f"{layer.name}: threshold table has no entry")
        entry = table.layers[idx]
        out_scale = entry.act_max_abs / fmt.max_value if entry.act_max_abs > 0 else 1.0
        wq = quantize_tensor(layer.weights, fmt)
        bias_raw = None
        if layer.bias is not None:
            raw = np.rint(layer.bias.astype(np.float64) / out_scale
                          * (1 << fmt.fraction_bits))
            bias_raw = np.clip(raw, fmt.raw_min, fmt.raw_max).astype(np.int32)
        layers.append(LayerSpec(
            kind=layer.kind, name=layer.name, weights=wq, bias_raw=bias_raw,
            out_scale=out_scale, thresholds=entry.thresholds.copy(),
            percentile=table.percentile, sample_count=entry.sample_count,
            act_max_abs=entry.act_max_abs,
        ))
    return ModelGraph(layers=layers, input_shape=model.input_shape,
                      qformat=fmt, input_scale=input_scale)
