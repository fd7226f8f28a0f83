"""Dense and pruned forward kernels with exact operation accounting.

The engine runs fixed-point graphs (conv2d stride 1 / no padding, linear,
2x2-style max pooling, ReLU, thresholded ReLU) in five modes:

* dense         - every MAC executes.
* unit          - input-aware skipping: a MAC is skipped when
                  |Z| <= T / |C|, where the control term C is the operand
                  shared across many MACs (the activation in a linear
                  layer, the weight in a convolution), so one threshold
                  computation is reused across a whole row/feature map.
* fatrelu       - ReLU layers become thresholded ReLU and MAC layers skip
                  pairs whose activation is exactly zero (one zero test
                  per input element).
* unit+fatrelu  - both of the above; activations zeroed by the threshold
                  are then skipped by the zero-control-term rule with no
                  division.
* ttp           - statically pruned model: zero weights never load, their
                  MACs are skipped with no runtime checks.

Comparison direction: skip on |Z| <= T/|C|, keep on strict >; ties skip.
Zero operands (activation or weight) always skip losslessly - the product
is exactly zero - and never cost a division.

Counter semantics (analytic, not implementation-mirroring: the kernels
are vectorized, the counters reflect the scalar algorithm they model):

* linear, unit: one zero test per input element (m comparisons), then per
  nonzero input one threshold computation (a "division", priced per
  method) reused across all n outputs, and one comparison per output;
  divisions <= m per inference.
* conv, unit: per-weight thresholds are precomputed once at prepare time
  because weights are static (threshold_precomputations = nnz(W), zero
  runtime divisions); each nonzero weight costs one comparison per output
  position.
* fatrelu skipping: one comparison per input element, no divisions.
* ttp: zero weights cost nothing at runtime.
* dense: no comparisons; every MAC executes; zero-operand pairs are
  tallied in zero_operand_macs for visibility but are not "skipped".

The exponent-space methods (shift, tree) decide skip via
e(|Z|) + e(|C|) <= e(T) with e(x) the smallest n such that x < 2**n,
which for integer raws equals |Z| < 2**(e(T) - e(|C|)); the kernels
precompute that power of two per control term and pay one integer
comparison per MAC.  Estimates bracket upward, so borderline MACs are
kept, never lost: a skipped MAC always has |Z*C| < 2T.

Accumulation is exact int64; each output element is rescaled to the
working Q-format exactly once (round-half-even), then bias (stored in
the output raw domain) is added and the result saturates.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .divapprox import (
    DivMethod,
    ZERO_EXPONENT,
    approx_ratio_bitmask_vector,
    exponent_of_scalar,
    exponent_vector,
)
from .errors import ShapeMismatch, UsageError
from .numerics import QFormat
from .tensor import Shape, Tensor

# Smallest positive normal float32; thresholds quantized below this are
# treated as zero by the bit-mask method (its operands must be normal).
_FLOAT32_MIN_NORMAL = 2.0 ** -126


class LayerKind(Enum):
    CONV2D = "conv2d"
    LINEAR = "linear"
    MAXPOOL = "maxpool"
    RELU = "relu"
    FATRELU = "fatrelu"


class RunMode(Enum):
    DENSE = "dense"
    UNIT = "unit"
    FATRELU = "fatrelu"
    UNIT_FATRELU = "unit+fatrelu"
    TTP = "ttp"

    @classmethod
    def from_name(cls, name: str) -> "RunMode":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise UsageError(f"unknown mode {name!r} (choose from {valid})") from None

    @property
    def uses_thresholds(self) -> bool:
        return self in (RunMode.UNIT, RunMode.UNIT_FATRELU)

    @property
    def uses_fatrelu(self) -> bool:
        return self in (RunMode.FATRELU, RunMode.UNIT_FATRELU)


@dataclass
class LayerSpec:
    """One layer of a model graph.

    Weight layout: conv2d (out_ch, in_ch, kH, kW); linear (m inputs,
    n outputs).  For fixed-point models the bias is stored as raw
    integers in the *output* activation domain (bias_raw) and out_scale
    is the activation scale of this layer's output; float models keep a
    float bias and ignore the scales.  thresholds holds per-group T in
    real product units (length = group count), set by calibration.
    """

    kind: LayerKind
    name: str = ""
    weights: Tensor | None = None
    bias: np.ndarray | None = None
    bias_raw: np.ndarray | None = None
    pool_size: int = 2
    fatrelu_threshold: float = 0.0
    out_scale: float = 1.0
    thresholds: np.ndarray | None = None
    percentile: float = -1.0
    sample_count: int = 0
    act_max_abs: float = 0.0

    @property
    def is_mac(self) -> bool:
        return self.kind in (LayerKind.CONV2D, LayerKind.LINEAR)


@dataclass(frozen=True)
class PruneConfig:
    """Runtime pruning knobs; thresholds themselves live in the model."""

    enabled: bool = False
    div_method: DivMethod = DivMethod.EXACT
    initial_shift: int = 0
    groups: int = 1

    def __post_init__(self) -> None:
        if self.initial_shift < 0:
            raise UsageError("initial_shift must be nonnegative")
        if self.groups < 1:
            raise UsageError("groups must be >= 1")


PRUNE_OFF = PruneConfig()


@dataclass
class MacStats:
    """Operation counters for one layer invocation (or a sum of them).

    macs_total is always the analytic dense MAC count.  shifts counts
    executed shift iterations of the bit-shift estimator.
    zero_operand_macs tallies pairs where an operand is exactly zero;
    in dense mode these still execute (and the field is informational),
    in pruned modes they are part of macs_skipped.
    """

    macs_total: int = 0
    macs_executed: int = 0
    macs_skipped: int = 0
    comparisons: int = 0
    divisions: int = 0
    threshold_precomputations: int = 0
    shifts: int = 0
    zero_operand_macs: int = 0

    def __add__(self, other: "MacStats") -> "MacStats":
        return MacStats(
            self.macs_total + other.macs_total,
            self.macs_executed + other.macs_executed,
            self.macs_skipped + other.macs_skipped,
            self.comparisons + other.comparisons,
            self.divisions + other.divisions,
            self.threshold_precomputations + other.threshold_precomputations,
            self.shifts + other.shifts,
            self.zero_operand_macs + other.zero_operand_macs,
        )

    def check(self) -> None:
        for name, value in self.as_dict().items():
            if value < 0:
                raise UsageError(f"negative counter {name}")
        if self.macs_total != self.macs_executed + self.macs_skipped:
            raise UsageError(
                f"macs_total {self.macs_total} != executed {self.macs_executed}"
                f" + skipped {self.macs_skipped}"
            )

    def as_dict(self) -> dict[str, int]:
        return {
            "macs_total": self.macs_total,
            "macs_executed": self.macs_executed,
            "macs_skipped": self.macs_skipped,
            "comparisons": self.comparisons,
            "divisions": self.divisions,
            "threshold_precomputations": self.threshold_precomputations,
            "shifts": self.shifts,
            "zero_operand_macs": self.zero_operand_macs,
        }


@dataclass
class ModelGraph:
    """Ordered layers plus input geometry and quantization state.

    qformat None means float32 payload; otherwise weights/biases/
    activations are raw integers of that format and input_scale is the
    activation scale of the model input.
    """

    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    qformat: QFormat | None = None
    input_scale: float = 1.0

    @property
    def is_fixed(self) -> bool:
        return self.qformat is not None

    def weight_count(self) -> int:
        return sum(l.weights.shape.volume for l in self.layers if l.is_mac)


def infer_shapes(model: ModelGraph) -> list[tuple[int, ...]]:
    """Output shape of every layer, validating composition."""
    shape: tuple[int, ...] = model.input_shape
    out: list[tuple[int, ...]] = []
    for layer in model.layers:
        if layer.kind is LayerKind.CONV2D:
            if len(shape) != 3:
                raise ShapeMismatch(f"{layer.name}: conv2d input must be (C,H,W), got {shape}")
            oc, ic, kh, kw = layer.weights.shape.dims
            c, h, w = shape
            if ic != c:
                raise ShapeMismatch(f"{layer.name}: expects {ic} input channels, got {c}")
            if h < kh or w < kw:
                raise ShapeMismatch(f"{layer.name}: kernel {kh}x{kw} exceeds input {h}x{w}")
            shape = (oc, h - kh + 1, w - kw + 1)
        elif layer.kind is LayerKind.LINEAR:
            m, n = layer.weights.shape.dims
            flat = int(np.prod(shape))
            if flat != m:
                raise ShapeMismatch(f"{layer.name}: expects {m} inputs, got {flat}")
            shape = (n,)
        elif layer.kind is LayerKind.MAXPOOL:
            c, h, w = shape
            s = layer.pool_size
            if h % s or w % s:
                raise ShapeMismatch(f"{layer.name}: {h}x{w} not divisible by pool {s}")
            shape = (c, h // s, w // s)
        elif layer.kind in (LayerKind.RELU, LayerKind.FATRELU):
            pass
        else:  # pragma: no cover - enum is closed
            raise UsageError(f"unsupported layer kind {layer.kind}")
        out.append(shape)
    return out


def dense_mac_count(layer: LayerSpec, out_shape: tuple[int, ...]) -> int:
    """Analytic dense MAC count of a MAC layer."""
    if layer.kind is LayerKind.CONV2D:
        oc, ic, kh, kw = layer.weights.shape.dims
        _, oh, ow = out_shape
        return oc * ic * kh * kw * oh * ow
    if layer.kind is LayerKind.LINEAR:
        m, n = layer.weights.shape.dims
        return m * n
    return 0


def _group_ids(count: int, groups: int, what: str) -> np.ndarray:
    if count % groups:
        raise UsageError(f"groups {groups} does not divide {what} {count}")
    return np.arange(count) // (count // groups)


@dataclass
class _PreparedMac:
    """Per-layer tables the pruned kernels consume.

    keep_gt: keep iff |x| > keep_gt (exact and mask methods).
    keep_ge: keep iff |x| >= keep_ge (exponent methods; entries are exact
             powers of two, inf forces skip-all for zero weights).
    Exactly one of them is set for a prepared conv layer in unit mode.
    For linear layers the tables are per-group threshold scalars instead
    (thresholds are input-dependent and computed at run time).
    """

    w_mat: np.ndarray  # int64; conv (oc, K), linear (m, n)
    requant: float
    bias_raw: np.ndarray | None
    t_raw: np.ndarray | None = None      # per group, raw product units
    t_exp: np.ndarray | None = None      # per group, exponent of t_raw
    group_of: np.ndarray | None = None   # control index -> group
    keep_gt: np.ndarray | None = None
    keep_ge: np.ndarray | None = None
    nnz_w: int = 0


def _threshold_raw(layer: LayerSpec, in_scale: float, fmt: QFormat) -> np.ndarray:
    """Thresholds converted from real product units to the raw domain.

    A product of raws equals value_product * 2**(2f) / (s_in * s_w), so
    T maps the same way.
    """
    if layer.thresholds is None:
        raise UsageError(f"{layer.name}: model has no calibrated thresholds")
    t = np.asarray(layer.thresholds, dtype=np.float64)
    if np.any(t < 0):
        raise UsageError(f"{layer.name}: negative threshold")
    factor = (1 << (2 * fmt.fraction_bits)) / (in_scale * layer.weights.scale)
    return t * factor


def _prepare_conv_tables(prep: _PreparedMac, layer: LayerSpec, cfg: PruneConfig) -> None:
    """Per-weight keep thresholds, computed once because weights are static."""
    oc, k = prep.w_mat.shape
    w_abs = np.abs(prep.w_mat)
    t_row = prep.t_raw[prep.group_of]  # (oc,)
    method = cfg.div_method
    if method is DivMethod.EXACT:
        with np.errstate(divide="ignore", invalid="ignore"):
            gt = t_row[:, None] / w_abs
        prep.keep_gt = np.where(w_abs == 0, np.inf, gt)
    elif method is DivMethod.BIT_MASK:
        rows = np.empty((oc, k), dtype=np.float64)
        for o in range(oc):
            t = float(t_row[o])
            if t < _FLOAT32_MIN_NORMAL:
                rows[o] = np.where(w_abs[o] == 0, np.inf, 0.0)
            else:
                rows[o] = approx_ratio_bitmask_vector(t, w_abs[o])
        prep.keep_gt = rows
    else:  # exponent methods: keep iff |x| >= 2**(e(T) - n(w))
        n_w = exponent_vector(w_abs)
        if method is DivMethod.BIT_SHIFT and cfg.initial_shift:
            n_w = np.maximum(n_w, cfg.initial_shift)
            n_w[w_abs == 0] = ZERO_EXPONENT
        t_exp_row = prep.t_exp[prep.group_of]
        diff = np.clip(t_exp_row[:, None] - n_w, -1080, 1080)
        with np.errstate(over="ignore"):
            ge = np.ldexp(1.0, diff.astype(np.int32))
        prep.keep_ge = np.where(w_abs == 0, np.inf, ge)
    prep.nnz_w = int(np.count_nonzero(prep.w_mat))


def prepare_model(model: ModelGraph, mode: RunMode, cfg: PruneConfig) -> tuple[dict[int, _PreparedMac], MacStats]:
    """Build per-layer tables; returns them plus load-time work stats.

    threshold_precomputations counts the one-time per-weight threshold
    derivations for conv layers (= nnz(W) each); they are reported but
    never priced into runtime cycles.
    """
    if not model.is_fixed:
        raise UsageError("prepared inference requires a fixed-point model")
    fmt = model.qformat
    prepared: dict[int, _PreparedMac] = {}
    load = MacStats()
    in_scale = model.input_scale
    for idx, layer in enumerate(model.layers):
        if not layer.is_mac:
            continue
        w = layer.weights.nd.astype(np.int64)
        if layer.kind is LayerKind.CONV2D:
            oc = w.shape[0]
            w_mat = w.reshape(oc, -1)
            control = oc
        else:
            w_mat = w  # (m, n)
            control = w.shape[0]
        requant = in_scale * layer.weights.scale / (layer.out_scale * (1 << fmt.fraction_bits))
        prep = _PreparedMac(w_mat=w_mat, requant=requant, bias_raw=layer.bias_raw)
        if mode.uses_thresholds:
            t_raw = _threshold_raw(layer, in_scale, fmt)
            groups = len(t_raw)
            prep.t_raw = t_raw
            prep.t_exp = np.array([exponent_of_scalar(t) for t in t_raw], dtype=np.int64)
            prep.group_of = _group_ids(control, groups,
                                       "output channels" if layer.kind is LayerKind.CONV2D
                                       else "input rows")
            if layer.kind is LayerKind.CONV2D:
                _prepare_conv_tables(prep, layer, cfg)
                load.threshold_precomputations += prep.nnz_w
        prepared[idx] = prep
        in_scale = layer.out_scale
    return prepared, load


def _requantize(acc: np.ndarray, prep: _PreparedMac, fmt: QFormat) -> np.ndarray:
    out = np.rint(acc.astype(np.float64) * prep.requant).astype(np.int64)
    if prep.bias_raw is not None:
        bias = prep.bias_raw.astype(np.int64)
        out = out + (bias[:, None] if out.ndim == 2 else bias)
    return np.clip(out, fmt.raw_min, fmt.raw_max)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(C,H,W) -> (C*kh*kw, outH*outW), stride 1, no padding."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    c, oh, ow = windows.shape[:3]
    return windows.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow)


def conv2d_forward(x: Tensor, layer: LayerSpec, stats: MacStats,
                   mode: RunMode = RunMode.DENSE, cfg: PruneConfig = PRUNE_OFF,
                   prep: _PreparedMac | None = None, fmt: QFormat | None = None) -> Tensor:
    """Stride-1 valid convolution on a fixed-point (C,H,W) tensor."""
    fmt = fmt or x.fmt
    if fmt is None:
        raise UsageError("conv2d_forward needs a fixed-point input")
    oc, ic, kh, kw = layer.weights.shape.dims
    c, h, w_in = x.shape.dims
    if ic != c or h < kh or w_in < kw:
        raise ShapeMismatch(f"{layer.name}: input {x.shape.dims} does not fit weights "
                            f"{layer.weights.shape.dims}")
    oh, ow = h - kh + 1, w_in - kw + 1
    if prep is None:
        model = ModelGraph([layer], (c, h, w_in), qformat=fmt, input_scale=x.scale)
        prep = prepare_model(model, mode, cfg)[0][0]
    pat = _im2col(x.nd.astype(np.int64), kh, kw)  # (K, L)
    k_dim, l_dim = pat.shape
    total = oc * k_dim * l_dim
    stats.macs_total += total

    pat_abs = np.abs(pat)
    pat_nz = pat != 0
    nnz_per_row = pat_nz.sum(axis=1)  # (K,)
    w_nz_rows = prep.w_mat != 0  # (oc, K)
    zero_pairs = int(
        (~w_nz_rows).sum() * l_dim
        + (w_nz_rows * (l_dim - nnz_per_row)[None, :]).sum()
    )
    stats.zero_operand_macs += zero_pairs

    if mode.uses_thresholds:
        acc = np.empty((oc, l_dim), dtype=np.int64)
        executed = 0
        table = prep.keep_gt if prep.keep_gt is not None else prep.keep_ge
        if table is None:
            raise UsageError(f"{layer.name}: prepared tables missing for pruned mode")
        strict = prep.keep_gt is not None
        for o in range(oc):
            row = table[o][:, None]
            keep = (pat_abs > row) if strict else (pat_abs >= row)
            keep &= pat_nz  # zero activations skip losslessly
            executed += int(keep.sum())
            acc[o] = (prep.w_mat[o][:, None] * np.where(keep, pat, 0)).sum(axis=0)
        stats.macs_executed += executed
        stats.macs_skipped += total - executed
        stats.comparisons += int(w_nz_rows.sum()) * l_dim
    else:
        acc = prep.w_mat @ pat
        if mode is RunMode.TTP:
            skipped = int((~w_nz_rows).sum()) * l_dim
            stats.macs_executed += total - skipped
            stats.macs_skipped += skipped
        elif mode is RunMode.FATRELU:
            kept = oc * int(nnz_per_row.sum())
            stats.macs_executed += kept
            stats.macs_skipped += total - kept
            stats.comparisons += c * h * w_in  # one zero test per input element
        else:  # dense
            stats.macs_executed += total
    out = _requantize(acc, prep, fmt)
    return Tensor(Shape((oc, oh, ow)), out.reshape(-1).astype(np.int32),
                  scale=layer.out_scale, fmt=fmt)


def linear_forward(x: Tensor, layer: LayerSpec, stats: MacStats,
                   mode: RunMode = RunMode.DENSE, cfg: PruneConfig = PRUNE_OFF,
                   prep: _PreparedMac | None = None, fmt: QFormat | None = None) -> Tensor:
    """Fully connected layer on a flattened fixed-point input of length m."""
    fmt = fmt or x.fmt
    if fmt is None:
        raise UsageError("linear_forward needs a fixed-point input")
    m, n = layer.weights.shape.dims
    if x.shape.volume != m:
        raise ShapeMismatch(f"{layer.name}: expects {m} inputs, got {x.shape.volume}")
    if prep is None:
        model = ModelGraph([layer], (1, 1, m), qformat=fmt, input_scale=x.scale)
        prep = prepare_model(model, mode, cfg)[0][0]
    xv = x.data.astype(np.int64)
    total = m * n
    stats.macs_total += total

    x_abs = np.abs(xv)
    x_nz = xv != 0
    nnx = int(x_nz.sum())
    w_nz = prep.w_mat != 0
    zero_pairs = int((m - nnx) * n + (x_nz[:, None] & ~w_nz).sum())
    stats.zero_operand_macs += zero_pairs

    if mode.uses_thresholds:
        t_row = prep.t_raw[prep.group_of]  # (m,)
        w_abs = np.abs(prep.w_mat)
        method = cfg.div_method
        if method is DivMethod.EXACT:
            with np.errstate(divide="ignore", invalid="ignore"):
                thr = np.where(x_nz, t_row / np.where(x_nz, x_abs, 1), np.inf)
            keep = w_abs > thr[:, None]
        elif method is DivMethod.BIT_MASK:
            thr = np.empty(m, dtype=np.float64)
            for g in np.unique(prep.group_of):
                sel = prep.group_of == g
                t = float(prep.t_raw[g])
                if t < _FLOAT32_MIN_NORMAL:
                    thr[sel] = np.where(x_abs[sel] == 0, np.inf, 0.0)
                else:
                    thr[sel] = approx_ratio_bitmask_vector(t, x_abs[sel])
            keep = w_abs > thr[:, None]
        else:
            n_x = exponent_vector(x_abs)
            if method is DivMethod.BIT_SHIFT:
                shift_work = np.maximum(n_x - cfg.initial_shift, 0)
                stats.shifts += int(shift_work[x_nz].sum())
                if cfg.initial_shift:
                    n_x = np.where(x_nz, np.maximum(n_x, cfg.initial_shift), n_x)
            diff = np.clip(prep.t_exp[prep.group_of] - n_x, -1080, 1080)
            with np.errstate(over="ignore"):
                ge = np.ldexp(1.0, diff.astype(np.int32))
            ge = np.where(x_nz, ge, np.inf)
            keep = (w_abs >= ge[:, None]) & w_nz
        executed = int(keep.sum())
        stats.macs_executed += executed
        stats.macs_skipped += total - executed
        stats.comparisons += m + nnx * n
        stats.divisions += nnx  # one threshold computation per nonzero input
        acc = (xv[:, None] * np.where(keep, prep.w_mat, 0)).sum(axis=0)
    else:
        acc = xv @ prep.w_mat
        if mode is RunMode.TTP:
            nz_w = int(w_nz.sum())
            stats.macs_executed += nz_w
            stats.macs_skipped += total - nz_w
        elif mode is RunMode.FATRELU:
            stats.macs_executed += nnx * n
            stats.macs_skipped += (m - nnx) * n
            stats.comparisons += m
        else:  # dense
            stats.macs_executed += total
    out = _requantize(acc, prep, fmt)
    return Tensor(Shape((n,)), out.astype(np.int32), scale=layer.out_scale, fmt=fmt)


def maxpool_forward(x: Tensor, size: int) -> Tensor:
    """Non-overlapping channel-wise max over size x size windows."""
    c, h, w = x.shape.dims
    if h % size or w % size:
        raise ShapeMismatch(f"{h}x{w} not divisible by pool size {size}")
    nd = x.nd
    pooled = nd.reshape(c, h // size, size, w // size, size).max(axis=(2, 4))
    return Tensor(Shape(pooled.shape), pooled.reshape(-1).copy(),
                  scale=x.scale, fmt=x.fmt)


def fatrelu_forward(x: Tensor, threshold: float) -> Tensor:
    """x where x > threshold else 0; threshold 0 is plain ReLU.

    The threshold is given in real activation units and converted into
    the tensor's raw domain for fixed-point inputs.
    """
    if threshold < 0:
        raise UsageError("fatrelu threshold must be nonnegative")
    if x.is_fixed:
        thr = int(np.rint(threshold / x.scale * (1 << x.fmt.fraction_bits)))
        kept = np.where(x.data > thr, x.data, 0)
    else:
        kept = np.where(x.data > threshold, x.data, np.float32(0.0))
    return Tensor(x.shape, kept, scale=x.scale, fmt=x.fmt)


def relu_forward(x: Tensor) -> Tensor:
    return Tensor(x.shape, np.maximum(x.data, 0), scale=x.scale, fmt=x.fmt)


def model_forward(model: ModelGraph, x: Tensor, mode: RunMode = RunMode.DENSE,
                  cfg: PruneConfig = PRUNE_OFF, fatrelu_threshold: float = 0.0,
                  prepared: dict[int, _PreparedMac] | None = None,
                  ) -> tuple[Tensor, list[MacStats]]:
    """Run all layers in order on one sample; returns logits + per-layer stats.

    In fatrelu-bearing modes every ReLU layer applies fatrelu_threshold.
    Deterministic: same model, input and flags give identical outputs
    and counters.
    """
    if tuple(x.shape.dims) != tuple(model.input_shape):
        raise ShapeMismatch(f"input {x.shape.dims} != model input {model.input_shape}")
    if not model.is_fixed:
        raise UsageError("model_forward runs fixed-point models; float models "
                         "evaluate through trainer.forward_float")
    if prepared is None:
        prepared = prepare_model(model, mode, cfg)[0]
    cur = x
    per_layer: list[MacStats] = []
    for idx, layer in enumerate(model.layers):
        stats = MacStats()
        if layer.kind is LayerKind.CONV2D:
            cur = conv2d_forward(cur, layer, stats, mode, cfg, prepared[idx], model.qformat)
        elif layer.kind is LayerKind.LINEAR:
            if cur.shape.rank != 1:
                cur = Tensor(Shape((cur.shape.volume,)), cur.data, scale=cur.scale, fmt=cur.fmt)
            cur = linear_forward(cur, layer, stats, mode, cfg, prepared[idx], model.qformat)
        elif layer.kind is LayerKind.MAXPOOL:
            cur = maxpool_forward(cur, layer.pool_size)
        elif layer.kind is LayerKind.RELU:
            if mode.uses_fatrelu:
                cur = fatrelu_forward(cur, fatrelu_threshold)
            else:
                cur = relu_forward(cur)
        elif layer.kind is LayerKind.FATRELU:
            cur = fatrelu_forward(cur, layer.fatrelu_threshold)
        stats.check()
        per_layer.append(stats)
    return cur, per_layer


# ---------------------------------------------------------------------------
# Batched variant.  Semantically identical to running model_forward over each
# sample and summing the per-layer counters (the equivalence is pinned by
# tests); it exists because evaluating 10k samples one numpy call at a time
# spends more time in call dispatch than in arithmetic.


def _conv_batch(x: np.ndarray, layer: LayerSpec, prep: _PreparedMac, stats: MacStats,
                mode: RunMode, fmt: QFormat) -> np.ndarray:
    b, c, h, w_in = x.shape
    oc, ic, kh, kw = layer.weights.shape.dims
    if ic != c or h < kh or w_in < kw:
        raise ShapeMismatch(f"{layer.name}: batch input {(c, h, w_in)} does not fit")
    oh, ow = h - kh + 1, w_in - kw + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    pat = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3)).reshape(
        b, c * kh * kw, oh * ow)
    k_dim, l_dim = pat.shape[1:]
    total = b * oc * k_dim * l_dim
    stats.macs_total += total

    pat_nz = pat != 0
    nnz_bk = pat_nz.sum(axis=2)  # (B, K)
    w_nz_rows = prep.w_mat != 0
    w_nz_per_k = w_nz_rows.sum(axis=0)  # (K,)
    zero_w_rows = int((~w_nz_rows).sum())
    stats.zero_operand_macs += int(
        b * zero_w_rows * l_dim + (w_nz_per_k[None, :] * (l_dim - nnz_bk)).sum()
    )

    if mode.uses_thresholds:
        pat_abs = np.abs(pat)
        acc = np.empty((b, oc, l_dim), dtype=np.int64)
        executed = 0
        table = prep.keep_gt if prep.keep_gt is not None else prep.keep_ge
        if table is None:
            raise UsageError(f"{layer.name}: prepared tables missing for pruned mode")
        strict = prep.keep_gt is not None
        for o in range(oc):
            row = table[o][None, :, None]
            keep = (pat_abs > row) if strict else (pat_abs >= row)
            keep &= pat_nz
            executed += int(keep.sum())
            acc[:, o, :] = (prep.w_mat[o][None, :, None] * np.where(keep, pat, 0)).sum(axis=1)
        stats.macs_executed += executed
        stats.macs_skipped += total - executed
        stats.comparisons += int(w_nz_rows.sum()) * l_dim * b
    else:
        acc = prep.w_mat[None] @ pat
        if mode is RunMode.TTP:
            skipped = b * zero_w_rows * l_dim
            stats.macs_executed += total - skipped
            stats.macs_skipped += skipped
        elif mode is RunMode.FATRELU:
            kept = oc * int(nnz_bk.sum())
            stats.macs_executed += kept
            stats.macs_skipped += total - kept
            stats.comparisons += b * c * h * w_in
        else:
            stats.macs_executed += total
    out = np.rint(acc.astype(np.float64) * prep.requant).astype(np.int64)
    if prep.bias_raw is not None:
        out = out + prep.bias_raw.astype(np.int64)[None, :, None]
    out = np.clip(out, fmt.raw_min, fmt.raw_max)
    return out.reshape(b, oc, oh, ow)


def _linear_batch(x: np.ndarray, layer: LayerSpec, prep: _PreparedMac, stats: MacStats,
                  mode: RunMode, cfg: PruneConfig, fmt: QFormat) -> np.ndarray:
    b = x.shape[0]
    xv = x.reshape(b, -1)
    m, n = layer.weights.shape.dims
    if xv.shape[1] != m:
        raise ShapeMismatch(f"{layer.name}: expects {m} inputs, got {xv.shape[1]}")
    total = b * m * n
    stats.macs_total += total

    x_abs = np.abs(xv)
    x_nz = xv != 0
    nnx = int(x_nz.sum())
    w_nz = prep.w_mat != 0
    w_nnz_per_row = w_nz.sum(axis=1)  # (m,)
    stats.zero_operand_macs += int(
        (b * m - nnx) * n + (x_nz * (n - w_nnz_per_row)[None, :]).sum()
    )

    if mode.uses_thresholds:
        t_row = prep.t_raw[prep.group_of][None, :]  # (1, m)
        w_abs = np.abs(prep.w_mat)
        method = cfg.div_method
        if method is DivMethod.EXACT:
            with np.errstate(divide="ignore", invalid="ignore"):
                thr = np.where(x_nz, t_row / np.where(x_nz, x_abs, 1), np.inf)
            keep = w_abs[None] > thr[:, :, None]
        elif method is DivMethod.BIT_MASK:
            thr = np.empty((b, m), dtype=np.float64)
            for g in np.unique(prep.group_of):
                sel = prep.group_of == g
                t = float(prep.t_raw[g])
                if t < _FLOAT32_MIN_NORMAL:
                    thr[:, sel] = np.where(x_abs[:, sel] == 0, np.inf, 0.0)
                else:
                    thr[:, sel] = approx_ratio_bitmask_vector(t, x_abs[:, sel])
            keep = w_abs[None] > thr[:, :, None]
        else:
            n_x = exponent_vector(x_abs)
            if method is DivMethod.BIT_SHIFT:
                stats.shifts += int(np.maximum(n_x - cfg.initial_shift, 0)[x_nz].sum())
                if cfg.initial_shift:
                    n_x = np.where(x_nz, np.maximum(n_x, cfg.initial_shift), n_x)
            diff = np.clip(prep.t_exp[prep.group_of][None, :] - n_x, -1080, 1080)
            with np.errstate(over="ignore"):
                ge = np.ldexp(1.0, diff.astype(np.int32))
            ge = np.where(x_nz, ge, np.inf)
            keep = (w_abs[None] >= ge[:, :, None]) & w_nz[None]
        executed = int(keep.sum())
        stats.macs_executed += executed
        stats.macs_skipped += total - executed
        stats.comparisons += b * m + nnx * n
        stats.divisions += nnx
        acc = (xv[:, :, None] * np.where(keep, prep.w_mat[None], 0)).sum(axis=1)
    else:
        acc = xv @ prep.w_mat
        if mode is RunMode.TTP:
            nz_w = int(w_nz.sum())
            stats.macs_executed += b * nz_w
            stats.macs_skipped += total - b * nz_w
        elif mode is RunMode.FATRELU:
            stats.macs_executed += nnx * n
            stats.macs_skipped += total - nnx * n
            stats.comparisons += b * m
        else:
            stats.macs_executed += total
    out = np.rint(acc.astype(np.float64) * prep.requant).astype(np.int64)
    if prep.bias_raw is not None:
        out = out + prep.bias_raw.astype(np.int64)[None, :]
    return np.clip(out, fmt.raw_min, fmt.raw_max)


def model_forward_batch(model: ModelGraph, x_raw: np.ndarray,
                        mode: RunMode = RunMode.DENSE, cfg: PruneConfig = PRUNE_OFF,
                        fatrelu_threshold: float = 0.0,
                        prepared: dict[int, _PreparedMac] | None = None,
                        ) -> tuple[np.ndarray, list[MacStats]]:
    """model_forward over a whole raw batch (B, C, H, W) of int inputs.

    Returns (logits (B, classes) int64, per-layer MacStats summed over
    the batch).  Bitwise equal to per-sample inference.
    """
    if not model.is_fixed:
        raise UsageError("model_forward_batch requires a fixed-point model")
    if x_raw.ndim != 4 or tuple(x_raw.shape[1:]) != tuple(model.input_shape):
        raise ShapeMismatch(
            f"batch shape {x_raw.shape} != (B, {', '.join(map(str, model.input_shape))})")
    if prepared is None:
        prepared = prepare_model(model, mode, cfg)[0]
    fmt = model.qformat
    cur = x_raw.astype(np.int64)
    cur_scale = model.input_scale
    per_layer: list[MacStats] = []
    for idx, layer in enumerate(model.layers):
        stats = MacStats()
        if layer.kind is LayerKind.CONV2D:
            cur = _conv_batch(cur, layer, prepared[idx], stats, mode, fmt)
            cur_scale = layer.out_scale
        elif layer.kind is LayerKind.LINEAR:
            cur = _linear_batch(cur, layer, prepared[idx], stats, mode, cfg, fmt)
            cur_scale = layer.out_scale
        elif layer.kind is LayerKind.MAXPOOL:
            s = layer.pool_size
            b, c, h, w = cur.shape
            if h % s or w % s:
                raise ShapeMismatch(f"{layer.name}: {h}x{w} not divisible by pool {s}")
            cur = cur.reshape(b, c, h // s, s, w // s, s).max(axis=(3, 5))
        elif layer.kind is LayerKind.RELU:
            if mode.uses_fatrelu:
                thr = int(np.rint(fatrelu_threshold / cur_scale * (1 << fmt.fraction_bits)))
                cur = np.where(cur > thr, cur, 0)
            else:
                cur = np.maximum(cur, 0)
        elif layer.kind is LayerKind.FATRELU:
            thr = int(np.rint(layer.fatrelu_threshold / cur_scale * (1 << fmt.fraction_bits)))
            cur = np.where(cur > thr, cur, 0)
        stats.check()
        per_layer.append(stats)
    return cur, per_layer
