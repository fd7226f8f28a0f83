"""Builders for the small synthetic models the kernel tests exercise.

Fixed-point models are assembled by hand here (not via calibration) so
kernel tests control weights, scales and thresholds directly.
"""

from __future__ import annotations

import numpy as np

from macskip.kernels import LayerKind, LayerSpec, ModelGraph
from macskip.numerics import Q8_8, QFormat
from macskip.tensor import Shape, Tensor, quantize_tensor, tensor_float


def float_linear(rng: np.random.Generator, m: int, n: int,
                 bias: bool = True, zero_frac: float = 0.0) -> ModelGraph:
    w = rng.normal(0.0, 1.0, (m, n)).astype(np.float32)
    if zero_frac:
        w[rng.random((m, n)) < zero_frac] = 0.0
    layer = LayerSpec(kind=LayerKind.LINEAR, name="fc",
                      weights=tensor_float(w, (m, n)),
                      bias=rng.normal(0.0, 0.3, n).astype(np.float32) if bias else None)
    return ModelGraph([layer], input_shape=(1, 1, m))


def float_conv(rng: np.random.Generator, c: int, h: int, w: int,
               oc: int, k: int, bias: bool = True,
               zero_frac: float = 0.0) -> ModelGraph:
    wt = rng.normal(0.0, 1.0, (oc, c, k, k)).astype(np.float32)
    if zero_frac:
        wt[rng.random(wt.shape) < zero_frac] = 0.0
    layer = LayerSpec(kind=LayerKind.CONV2D, name="conv",
                      weights=tensor_float(wt, (oc, c, k, k)),
                      bias=rng.normal(0.0, 0.3, oc).astype(np.float32) if bias else None)
    return ModelGraph([layer], input_shape=(c, h, w))


def quantize_manual(model: ModelGraph, input_max_abs: float,
                    out_maxes: dict[int, float],
                    thresholds: dict[int, np.ndarray] | None = None,
                    fmt: QFormat = Q8_8) -> ModelGraph:
    """Hand-rolled deployment of a float graph, independent of calibration."""
    input_scale = input_max_abs / fmt.max_value if input_max_abs > 0 else 1.0
    layers = []
    for idx, l in enumerate(model.layers):
        if not l.is_mac:
            layers.append(LayerSpec(kind=l.kind, name=l.name, pool_size=l.pool_size,
                                    fatrelu_threshold=l.fatrelu_threshold))
            continue
        wq = quantize_tensor(l.weights, fmt)
        out_scale = out_maxes[idx] / fmt.max_value
        b_raw = None
        if l.bias is not None:
            b_raw = np.clip(
                np.rint(l.bias.astype(np.float64) / out_scale * (1 << fmt.fraction_bits)),
                fmt.raw_min, fmt.raw_max).astype(np.int32)
        t = None
        if thresholds is not None:
            t = np.asarray(thresholds.get(idx, [0.0]), dtype=np.float64)
        layers.append(LayerSpec(kind=l.kind, name=l.name, weights=wq, bias_raw=b_raw,
                                out_scale=out_scale, thresholds=t))
    return ModelGraph(layers, model.input_shape, qformat=fmt,
                      input_scale=input_scale)


def quantize_input_raw(x: np.ndarray, model: ModelGraph) -> np.ndarray:
    fmt = model.qformat
    raw = np.rint(x.astype(np.float64) / model.input_scale * (1 << fmt.fraction_bits))
    return np.clip(raw, fmt.raw_min, fmt.raw_max).astype(np.int64)


def input_tensor(x: np.ndarray, model: ModelGraph) -> Tensor:
    raw = quantize_input_raw(x, model)
    return Tensor(Shape(tuple(model.input_shape)), raw.reshape(-1).astype(np.int32),
                  scale=model.input_scale, fmt=model.qformat)
