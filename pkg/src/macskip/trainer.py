"""Minimal float reference trainer and the batch evaluation driver.

Training runs in 32-bit float (mini-batch SGD with momentum on softmax
cross-entropy) over the same layer set the fixed-point kernels support:
conv2d stride 1 / no padding, 2x2-style max pooling with argmax routing,
ReLU, linear.  Forward and backward avoid dtype coercion so the same
code paths run in float64 for finite-difference gradient checks.

Deployment stays out of here: a trained model is a float graph;
calibration.quantize_model turns it into the fixed-point artifact.

evaluate() is the shared measurement entry point: it runs dense float
models (accuracy only plus analytic dense counts) or fixed models in
any mode, batching samples for throughput and optionally sharding
batches over a thread pool (results merge in submission order, so the
report is identical for any thread count).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .costmodel import MSP430_PROFILE, CostProfile, price
from .errors import NonFiniteLoss, ShapeMismatch, UsageError
from .kernels import (
    PRUNE_OFF,
    LayerKind,
    LayerSpec,
    MacStats,
    ModelGraph,
    PruneConfig,
    RunMode,
    dense_mac_count,
    infer_shapes,
    model_forward_batch,
    prepare_model,
)
from .tensor import Shape, Tensor


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 3
    batch_size: int = 64
    seed: int = 42
    momentum: float = 0.9

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise UsageError("learning_rate must be positive")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise UsageError("momentum must be in [0, 1)")


def build_arch(name: str, input_shape: tuple[int, int, int] = (1, 28, 28),
               classes: int = 10) -> ModelGraph:
    """Named architecture skeleton (weights unset until init/train)."""
    if name != "mnist":
        raise UsageError(f"unknown architecture {name!r} (available: mnist)")
    c, h, w = input_shape
    flat = 16 * ((h - 4) // 2 - 4) // 2 * (((w - 4) // 2 - 4) // 2)
    layers = [
        LayerSpec(LayerKind.CONV2D, name="conv1",
                  weights=_empty_weights((6, c, 5, 5))),
        LayerSpec(LayerKind.RELU, name="relu1"),
        LayerSpec(LayerKind.MAXPOOL, name="pool1", pool_size=2),
        LayerSpec(LayerKind.CONV2D, name="conv2",
                  weights=_empty_weights((16, 6, 5, 5))),
        LayerSpec(LayerKind.RELU, name="relu2"),
        LayerSpec(LayerKind.MAXPOOL, name="pool2", pool_size=2),
        LayerSpec(LayerKind.LINEAR, name="fc",
                  weights=_empty_weights((flat, classes))),
    ]
    model = ModelGraph(layers=layers, input_shape=input_shape)
    infer_shapes(model)
    return model


def _empty_weights(dims: tuple[int, ...]) -> Tensor:
    return Tensor(Shape(dims), np.zeros(int(np.prod(dims)), dtype=np.float32))


def init_weights(model: ModelGraph, seed: int) -> None:
    """Seeded uniform +-sqrt(6 / (fan_in + fan_out)) init, zero biases."""
    rng = np.random.default_rng(seed)
    for layer in model.layers:
        if not layer.is_mac:
            continue
        dims = layer.weights.shape.dims
        if layer.kind is LayerKind.CONV2D:
            oc, ic, kh, kw = dims
            fan_in, fan_out = ic * kh * kw, oc * kh * kw
            bias_len = oc
        else:
            fan_in, fan_out = dims
            bias_len = dims[1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        vals = rng.uniform(-limit, limit, size=layer.weights.shape.volume)
        layer.weights = Tensor(layer.weights.shape, vals.astype(np.float32))
        layer.bias = np.zeros(bias_len, dtype=np.float32)


def _cols_batch(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    b, c = win.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(
        b, c * kh * kw, win.shape[2] * win.shape[3])


def forward_float(model: ModelGraph, x: np.ndarray, capture: bool = False
                  ) -> tuple[np.ndarray, list[dict]]:
    """Float forward over a batch; caches feed backward() when captured."""
    if model.is_fixed:
        raise UsageError("forward_float runs float models")
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeMismatch(f"batch {x.shape} != (B, {model.input_shape})")
    caches: list[dict] = []
    for layer in model.layers:
        cache: dict = {}
        if layer.kind is LayerKind.CONV2D:
            oc, ic, kh, kw = layer.weights.shape.dims
            oh, ow = x.shape[2] - kh + 1, x.shape[3] - kw + 1
            cols = _cols_batch(x, kh, kw)
            w2 = layer.weights.nd.reshape(oc, -1)
            out = np.matmul(w2[None], cols)
            if layer.bias is not None:
                out = out + layer.bias[None, :, None]
            if capture:
                cache = {"cols": cols, "in_shape": x.shape}
            x = out.reshape(x.shape[0], oc, oh, ow)
        elif layer.kind is LayerKind.LINEAR:
            xf = x.reshape(x.shape[0], -1)
            out = xf @ layer.weights.nd
            if layer.bias is not None:
                out = out + layer.bias[None, :]
            if capture:
                cache = {"x": xf}
            x = out
        elif layer.kind is LayerKind.MAXPOOL:
            s = layer.pool_size
            b, c, h, w = x.shape
            if h % s or w % s:
                raise ShapeMismatch(f"{layer.name}: {h}x{w} not divisible by {s}")
            x6 = x.reshape(b, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5)
            x6 = np.ascontiguousarray(x6).reshape(b, c, h // s, w // s, s * s)
            idx = np.argmax(x6, axis=-1)
            x = np.take_along_axis(x6, idx[..., None], axis=-1)[..., 0]
            if capture:
                cache = {"idx": idx, "in_shape": (b, c, h, w), "win_shape": x6.shape}
        elif layer.kind is LayerKind.RELU:
            if capture:
                cache = {"mask": x > 0}
            x = np.maximum(x, 0)
        elif layer.kind is LayerKind.FATRELU:
            if capture:
                cache = {"mask": x > layer.fatrelu_threshold}
            x = np.where(x > layer.fatrelu_threshold, x, x.dtype.type(0))
        caches.append(cache)
    return x, caches


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray
                          ) -> tuple[float, np.ndarray]:
    """Mean loss (float64) and dloss/dlogits in the logits dtype."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = float(np.mean(lse[np.arange(n), 0] - z[np.arange(n), labels]))
    p = np.exp(z - lse)
    p[np.arange(n), labels] -= 1.0
    return loss, (p / n).astype(logits.dtype)


def backward(model: ModelGraph, caches: list[dict], dlogits: np.ndarray
             ) -> dict[int, tuple[np.ndarray, np.ndarray | None]]:
    """Gradients {layer_index: (dW, db)} from captured caches."""
    grads: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}
    d = dlogits
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        cache = caches[idx]
        if layer.kind is LayerKind.LINEAR:
            xf = cache["x"]
            dw = xf.T @ d
            db = d.sum(axis=0) if layer.bias is not None else None
            d = d @ layer.weights.nd.T  # (B, m); a pool/conv upstream reshapes
            grads[idx] = (dw, db)
        elif layer.kind is LayerKind.CONV2D:
            oc, ic, kh, kw = layer.weights.shape.dims
            cols = cache["cols"]  # (B, K, L)
            b, _, l_dim = cols.shape
            d2 = d.reshape(b, oc, l_dim)
            dw2 = np.matmul(d2, cols.transpose(0, 2, 1)).sum(axis=0)  # (oc, K)
            db = d2.sum(axis=(0, 2)) if layer.bias is not None else None
            # dx = correlation of the padded upstream gradient with the
            # spatially flipped kernels
            in_b, in_c, in_h, in_w = cache["in_shape"]
            oh, ow = in_h - kh + 1, in_w - kw + 1
            dpad = np.zeros((b, oc, oh + 2 * (kh - 1), ow + 2 * (kw - 1)),
                            dtype=d.dtype)
            dpad[:, :, kh - 1:kh - 1 + oh, kw - 1:kw - 1 + ow] = d2.reshape(b, oc, oh, ow)
            dcols = _cols_batch(dpad, kh, kw)  # (B, oc*kh*kw, H*W)
            wflip = layer.weights.nd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            wback = np.ascontiguousarray(wflip).reshape(ic, oc * kh * kw)
            d = np.matmul(wback[None], dcols).reshape(in_b, in_c, in_h, in_w)
            grads[idx] = (dw2.reshape(oc, ic, kh, kw), db)
        elif layer.kind is LayerKind.MAXPOOL:
            b, c, h, w = cache["in_shape"]
            s = layer.pool_size
            d = d.reshape(cache["idx"].shape)
            dwin = np.zeros(cache["win_shape"], dtype=d.dtype)
            np.put_along_axis(dwin, cache["idx"][..., None], d[..., None], axis=-1)
            d = dwin.reshape(b, c, h // s, w // s, s, s).transpose(0, 1, 2, 4, 3, 5)
            d = np.ascontiguousarray(d).reshape(b, c, h, w)
        elif layer.kind in (LayerKind.RELU, LayerKind.FATRELU):
            # a linear layer downstream hands the gradient back flattened
            d = d.reshape(cache["mask"].shape) * cache["mask"]
    return grads


def train(arch: ModelGraph, data: tuple[np.ndarray, np.ndarray],
          cfg: TrainConfig = TrainConfig(), log=None) -> ModelGraph:
    """Mini-batch SGD with momentum; returns the trained float graph.

    Initializes any unset weights from cfg.seed; epoch order, batch
    slicing and init are all driven by that seed, so a fixed seed (and
    single-threaded BLAS) reproduces the run.  epochs=0 returns the
    initialized, untrained model.
    """
    if arch.is_fixed:
        raise UsageError("training runs on float models")
    x, y = data
    if x.shape[0] == 0:
        raise UsageError("training set is empty")
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"{x.shape[0]} samples vs {y.shape[0]} labels")
    model = arch  # trained in place and returned
    if all(not np.any(l.weights.data) for l in model.layers if l.is_mac):
        init_weights(model, cfg.seed)
    x = x.astype(np.float32)
    velocity: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}
    rng = np.random.default_rng(cfg.seed + 1)
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            logits, caches = forward_float(model, x[sel], capture=True)
            loss, dlg = softmax_cross_entropy(logits, y[sel])
            if not np.isfinite(loss):
                raise NonFiniteLoss(
                    f"loss {loss} at epoch {epoch} batch {start // cfg.batch_size}; "
                    f"lr {cfg.learning_rate} may be too high")
            losses.append(loss)
            grads = backward(model, caches, dlg)
            for idx, (dw, db) in grads.items():
                layer = model.layers[idx]
                vw, vb = velocity.get(idx, (np.zeros_like(dw, dtype=np.float32),
                                            None if db is None else
                                            np.zeros_like(db, dtype=np.float32)))
                vw = cfg.momentum * vw - cfg.learning_rate * dw.astype(np.float32)
                new_w = layer.weights.nd + vw
                layer.weights = Tensor(layer.weights.shape,
                                       new_w.astype(np.float32).reshape(-1))
                if db is not None:
                    vb = cfg.momentum * vb - cfg.learning_rate * db.astype(np.float32)
                    layer.bias = (layer.bias + vb).astype(np.float32)
                velocity[idx] = (vw, vb)
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs}: mean loss {np.mean(losses):.4f}")
    return model


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalResult:
    accuracy: float
    total: MacStats
    per_layer: list[MacStats]
    cycles: int
    energy: float
    load_stats: MacStats
    samples: int
    logits: np.ndarray | None = None


def _quantize_input(images: np.ndarray, model: ModelGraph) -> np.ndarray:
    fmt = model.qformat
    raw = np.rint(images.astype(np.float64) / model.input_scale
                  * (1 << fmt.fraction_bits))
    return np.clip(raw, fmt.raw_min, fmt.raw_max).astype(np.int64)


def _float_dense_stats(model: ModelGraph, images: np.ndarray) -> list[MacStats]:
    """Analytic dense counters (plus zero-operand tallies) for a float run."""
    shapes = infer_shapes(model)
    per_layer = [MacStats() for _ in model.layers]
    x = images.astype(np.float32)
    b = x.shape[0]
    for idx, layer in enumerate(model.layers):
        stats = per_layer[idx]
        if layer.kind is LayerKind.CONV2D:
            oc, ic, kh, kw = layer.weights.shape.dims
            cols = _cols_batch(x, kh, kw)
            total = b * dense_mac_count(layer, shapes[idx])
            stats.macs_total += total
            stats.macs_executed += total
            w2 = layer.weights.nd.reshape(oc, -1)
            w_nz = w2 != 0
            nnz_bk = (cols != 0).sum(axis=2)
            l_dim = cols.shape[2]
            stats.zero_operand_macs += int(
                b * (~w_nz).sum() * l_dim
                + (w_nz.sum(axis=0)[None, :] * (l_dim - nnz_bk)).sum())
            out = np.matmul(w2[None], cols)
            if layer.bias is not None:
                out = out + layer.bias[None, :, None]
            x = out.reshape(b, *shapes[idx])
        elif layer.kind is LayerKind.LINEAR:
            xf = x.reshape(b, -1)
            m, n = layer.weights.shape.dims
            total = b * m * n
            stats.macs_total += total
            stats.macs_executed += total
            w_nz = layer.weights.nd != 0
            x_nz = xf != 0
            stats.zero_operand_macs += int(
                (b * m - x_nz.sum()) * n
                + (x_nz * (n - w_nz.sum(axis=1))[None, :]).sum())
            out = xf @ layer.weights.nd
            if layer.bias is not None:
                out = out + layer.bias[None, :]
            x = out
        elif layer.kind is LayerKind.MAXPOOL:
            s = layer.pool_size
            bb, c, h, w = x.shape
            x = x.reshape(bb, c, h // s, s, w // s, s).max(axis=(3, 5))
        elif layer.kind is LayerKind.RELU:
            x = np.maximum(x, 0)
        elif layer.kind is LayerKind.FATRELU:
            x = np.where(x > layer.fatrelu_threshold, x, np.float32(0.0))
    return per_layer


def evaluate(model: ModelGraph, images: np.ndarray, labels: np.ndarray,
             mode: RunMode = RunMode.DENSE, cfg: PruneConfig = PRUNE_OFF,
             fatrelu_threshold: float = 0.0,
             profile: CostProfile = MSP430_PROFILE, threads: int = 1,
             batch_size: int = 128, keep_logits: bool = False) -> EvalResult:
    """Top-1 accuracy plus summed per-layer counters and priced cycles.

    Fixed models run in any mode; float models run dense only (quantize
    via calibration first for pruned modes).  Results are independent of
    batch_size and threads: batches merge in sample order.
    """
    if images.shape[0] == 0:
        raise UsageError("evaluation set is empty")
    if images.shape[0] != labels.shape[0]:
        raise ShapeMismatch(f"{images.shape[0]} images vs {labels.shape[0]} labels")
    if threads < 1:
        raise UsageError("threads must be >= 1")
    n = images.shape[0]

    if not model.is_fixed:
        if mode is not RunMode.DENSE:
            raise UsageError(f"mode {mode.value!r} needs a fixed-point model; "
                             "run calibrate to quantize first")
        logits, _ = forward_float(model, images.astype(np.float32))
        per_layer = _float_dense_stats(model, images)
        for s in per_layer:
            s.check()
        total = sum(per_layer, MacStats())
        cycles, energy = price(total, cfg.div_method, profile)
        acc = float(np.mean(np.argmax(logits, axis=1) == labels))
        return EvalResult(acc, total, per_layer, cycles, energy, MacStats(), n,
                          logits if keep_logits else None)

    if mode.uses_thresholds:
        for layer in model.layers:
            if layer.is_mac and layer.thresholds is None:
                raise UsageError(f"{layer.name}: mode {mode.value!r} requires "
                                 "calibrated thresholds (run calibrate)")
    prepared, load_stats = prepare_model(model, mode, cfg)
    x_raw = _quantize_input(images, model)
    starts = list(range(0, n, batch_size))

    def run_chunk(start: int):
        return model_forward_batch(model, x_raw[start:start + batch_size],
                                   mode, cfg, fatrelu_threshold, prepared)

    if threads == 1:
        results = [run_chunk(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_chunk, starts))

    per_layer = [MacStats() for _ in model.layers]
    preds = np.empty(n, dtype=np.int64)
    all_logits = np.empty((n, results[0][0].shape[1]), dtype=np.int64) if keep_logits else None
    for start, (logits, layer_stats) in zip(starts, results):
        preds[start:start + logits.shape[0]] = np.argmax(logits, axis=1)
        if keep_logits:
            all_logits[start:start + logits.shape[0]] = logits
        for i, s in enumerate(layer_stats):
            per_layer[i] = per_layer[i] + s
    for s in per_layer:
        s.check()
    total = sum(per_layer, MacStats())
    cycles, energy = price(total, cfg.div_method, profile)
    acc = float(np.mean(preds == labels))
    return EvalResult(acc, total, per_layer, cycles, energy, load_stats, n, all_logits)
