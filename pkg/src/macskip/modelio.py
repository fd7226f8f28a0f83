"""Model container serialization, IDX dataset loading, magnitude pruning.

Container layout (version 1, all multi-byte values little-endian unless
noted; the full table lives in docs/model_format.md):

    magic            4s    b"UNIT"
    version          u16   1
    integer_bits     u8    0xFF together with fraction_bits 0xFF = float32 payload
    fraction_bits    u8
    input_scale      f32   activation scale of the model input (1.0 for float)
    input_rank       u8    always 3 (C, H, W)
    input_dims       3*u32
    layer_count      u16
    per layer:
      kind           u8    1 conv2d, 2 linear, 3 maxpool, 4 relu, 5 fatrelu
      name_len,name  u8 + bytes (utf-8)
      conv2d/linear:
        rank         u8    4 (oc, ic, kh, kw) or 2 (m, n)
        dims         rank*u32
        weight_scale f32
        out_scale    f32
        bias_flag    u8
        threshold block:
          group_count u16   0 = uncalibrated
          percentile  f32   -1 when uncalibrated
          sample_count u32
          act_max_abs f32   pre-activation |output| bound from calibration
          thresholds  group_count*f32  (real product units)
        weights blob  volume * (i16 for 16-bit fixed, i32 for 32-bit, f32 float)
        bias blob     out_dim * same scalar (raw integers are in the
                      layer's *output* activation domain)
      maxpool:  size u8
      relu:     (no body)
      fatrelu:  threshold f32
    crc32            u32   zlib.crc32 of every preceding byte

Loading parses the whole structure first (truncation surfaces as
ShapeInconsistent, never a partial model), then verifies the checksum
(payload corruption surfaces as CrcMismatch).

IDX loading follows the standard layout: u32 big-endian magic
(0x00000803 images, 0x00000801 labels), big-endian u32 extents, unsigned
byte payload; pixels scale to [0, 1] by /255.
"""

from __future__ import annotations

import math
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    CrcMismatch,
    LengthMismatch,
    ShapeInconsistent,
    ShapeMismatch,
    UsageError,
    VersionUnsupported,
)
from .kernels import LayerKind, LayerSpec, ModelGraph, infer_shapes
from .numerics import QFormat
from .tensor import Shape, Tensor

MODEL_MAGIC = b"UNIT"
MODEL_VERSION = 1
_FLOAT_SENTINEL = 0xFF

_KIND_TAGS = {
    LayerKind.CONV2D: 1,
    LayerKind.LINEAR: 2,
    LayerKind.MAXPOOL: 3,
    LayerKind.RELU: 4,
    LayerKind.FATRELU: 5,
}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _weight_dtype(fmt: QFormat | None) -> np.dtype:
    if fmt is None:
        return np.dtype("<f4")
    return np.dtype("<i2") if fmt.word_size == 16 else np.dtype("<i4")


def save_model(model: ModelGraph, path: str | Path) -> None:
    """Serialize a graph; round-trips structurally through load_model."""
    infer_shapes(model)  # refuse to write a non-composing graph
    fmt = model.qformat
    wd = _weight_dtype(fmt)
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack("<H", MODEL_VERSION)
    if fmt is None:
        out += struct.pack("<BB", _FLOAT_SENTINEL, _FLOAT_SENTINEL)
    else:
        out += struct.pack("<BB", fmt.integer_bits, fmt.fraction_bits)
    out += struct.pack("<f", model.input_scale)
    out += struct.pack("<B", 3)
    out += struct.pack("<3I", *model.input_shape)
    out += struct.pack("<H", len(model.layers))
    for layer in model.layers:
        out += struct.pack("<B", _KIND_TAGS[layer.kind])
        name = layer.name.encode("utf-8")[:255]
        out += struct.pack("<B", len(name)) + name
        if layer.is_mac:
            dims = layer.weights.shape.dims
            out += struct.pack("<B", len(dims))
            out += struct.pack(f"<{len(dims)}I", *dims)
            out += struct.pack("<f", layer.weights.scale)
            out += struct.pack("<f", layer.out_scale)
            has_bias = (layer.bias_raw if fmt is not None else layer.bias) is not None
            out += struct.pack("<B", 1 if has_bias else 0)
            thr = layer.thresholds
            out += struct.pack("<H", 0 if thr is None else len(thr))
            out += struct.pack("<f", layer.percentile)
            out += struct.pack("<I", layer.sample_count)
            out += struct.pack("<f", layer.act_max_abs)
            if thr is not None:
                out += np.asarray(thr, dtype="<f4").tobytes()
            out += np.ascontiguousarray(layer.weights.data, dtype=wd).tobytes()
            if has_bias:
                blob = layer.bias_raw if fmt is not None else layer.bias
                out += np.ascontiguousarray(blob, dtype=wd).tobytes()
        elif layer.kind is LayerKind.MAXPOOL:
            out += struct.pack("<B", layer.pool_size)
        elif layer.kind is LayerKind.FATRELU:
            out += struct.pack("<f", layer.fatrelu_threshold)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


class _Cursor:
    """Sequential reader that turns overruns into ShapeInconsistent."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ShapeInconsistent(
                f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, spec: str):
        return struct.unpack(spec, self.take(struct.calcsize(spec)))


def load_model(path: str | Path) -> ModelGraph:
    """Parse and validate a model container; never returns a partial model."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MODEL_MAGIC:
        raise BadMagic(f"{path}: not a model file (magic mismatch)")
    cur = _Cursor(blob)
    cur.take(4)
    (version,) = cur.unpack("<H")
    if version != MODEL_VERSION:
        raise VersionUnsupported(f"{path}: container version {version}, "
                                 f"reader supports {MODEL_VERSION}")
    int_bits, frac_bits = cur.unpack("<BB")
    if int_bits == _FLOAT_SENTINEL and frac_bits == _FLOAT_SENTINEL:
        fmt = None
    else:
        try:
            fmt = QFormat(int_bits, frac_bits)
        except UsageError as exc:
            raise ShapeInconsistent(f"{path}: bad Q-format descriptor: {exc}") from exc
    (input_scale,) = cur.unpack("<f")
    if not (math.isfinite(input_scale) and input_scale > 0):
        raise ShapeInconsistent(f"{path}: input_scale must be finite positive")
    (rank,) = cur.unpack("<B")
    if rank != 3:
        raise ShapeInconsistent(f"{path}: input rank must be 3, got {rank}")
    input_shape = cur.unpack("<3I")
    (layer_count,) = cur.unpack("<H")
    wd = _weight_dtype(fmt)
    layers: list[LayerSpec] = []
    for _ in range(layer_count):
        (tag,) = cur.unpack("<B")
        kind = _TAG_KINDS.get(tag)
        if kind is None:
            raise ShapeInconsistent(f"{path}: unknown layer kind tag {tag}")
        (name_len,) = cur.unpack("<B")
        name = cur.take(name_len).decode("utf-8", errors="replace")
        layer = LayerSpec(kind=kind, name=name)
        if kind in (LayerKind.CONV2D, LayerKind.LINEAR):
            (wrank,) = cur.unpack("<B")
            expected = 4 if kind is LayerKind.CONV2D else 2
            if wrank != expected:
                raise ShapeInconsistent(f"{path}: {name}: weight rank {wrank}, expected {expected}")
            dims = cur.unpack(f"<{wrank}I")
            if any(d < 1 for d in dims):
                raise ShapeInconsistent(f"{path}: {name}: zero extent in {dims}")
            (w_scale,) = cur.unpack("<f")
            (out_scale,) = cur.unpack("<f")
            if not (math.isfinite(w_scale) and w_scale > 0
                    and math.isfinite(out_scale) and out_scale > 0):
                raise ShapeInconsistent(f"{path}: {name}: scales must be finite positive")
            (bias_flag,) = cur.unpack("<B")
            (group_count,) = cur.unpack("<H")
            (percentile,) = cur.unpack("<f")
            (sample_count,) = cur.unpack("<I")
            (act_max_abs,) = cur.unpack("<f")
            if group_count:
                thr = np.frombuffer(cur.take(4 * group_count), dtype="<f4").astype(np.float64)
                if np.any(~np.isfinite(thr)) or np.any(thr < 0):
                    raise ShapeInconsistent(f"{path}: {name}: bad threshold values")
                layer.thresholds = thr
            volume = int(np.prod(dims))
            wdata = np.frombuffer(cur.take(volume * wd.itemsize), dtype=wd)
            if fmt is None:
                weights = Tensor(Shape(dims), wdata.astype(np.float32), scale=w_scale)
            else:
                weights = Tensor(Shape(dims), wdata.astype(np.int32),
                                 scale=w_scale, fmt=fmt)
            layer.weights = weights
            layer.out_scale = out_scale
            layer.percentile = percentile
            layer.sample_count = sample_count
            layer.act_max_abs = act_max_abs
            if bias_flag:
                out_dim = dims[0] if kind is LayerKind.CONV2D else dims[1]
                bdata = np.frombuffer(cur.take(out_dim * wd.itemsize), dtype=wd)
                if fmt is None:
                    layer.bias = bdata.astype(np.float32)
                else:
                    layer.bias_raw = bdata.astype(np.int32)
        elif kind is LayerKind.MAXPOOL:
            (layer.pool_size,) = cur.unpack("<B")
            if layer.pool_size < 1:
                raise ShapeInconsistent(f"{path}: {name}: pool size 0")
        elif kind is LayerKind.FATRELU:
            (layer.fatrelu_threshold,) = cur.unpack("<f")
            if layer.fatrelu_threshold < 0:
                raise ShapeInconsistent(f"{path}: {name}: negative fatrelu threshold")
        layers.append(layer)
    (stored_crc,) = cur.unpack("<I")
    if cur.pos != len(blob):
        raise ShapeInconsistent(f"{path}: {len(blob) - cur.pos} trailing bytes")
    actual_crc = zlib.crc32(blob[:-4])
    if stored_crc != actual_crc:
        raise CrcMismatch(f"{path}: crc {stored_crc:#010x} != computed {actual_crc:#010x}")
    model = ModelGraph(layers=layers, input_shape=tuple(input_shape),
                       qformat=fmt, input_scale=input_scale)
    try:
        infer_shapes(model)
    except ShapeMismatch as exc:
        raise ShapeInconsistent(f"{path}: layers do not compose: {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# IDX datasets


def _read_idx(path: str | Path, expected_magic: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise BadMagic(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise BadMagic(f"{path}: IDX magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise LengthMismatch(f"{path}: truncated IDX dimension table")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    expected = int(np.prod(dims))
    payload = blob[header:]
    if len(payload) != expected:
        raise LengthMismatch(f"{path}: payload {len(payload)} bytes, "
                             f"dimensions require {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path
             ) -> tuple[np.ndarray, np.ndarray]:
    """Load an image/label IDX pair.

    Returns (images (N, 1, H, W) float32 in [0, 1], labels (N,) int64).
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise LengthMismatch(
            f"{images.shape[0]} images vs {labels.shape[0]} labels")
    n, h, w = images.shape
    return (images.astype(np.float32).reshape(n, 1, h, w) / 255.0,
            labels.astype(np.int64))


def write_idx_images(path: str | Path, images: np.ndarray) -> None:
    """Write (N, H, W) uint8 images in standard IDX form."""
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())


def write_idx_labels(path: str | Path, labels: np.ndarray) -> None:
    """Write (N,) uint8 labels in standard IDX form."""
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Train-time magnitude pruning (baseline)


def apply_magnitude_pruning(model: ModelGraph, sparsity: float) -> ModelGraph:
    """Zero the globally smallest-magnitude weights of a model.

    Exactly ceil(sparsity * N_w) weights are zeroed across all MAC
    layers (biases untouched), ranked by real magnitude with a
    deterministic (layer index, flat index) tie-break.  Works on float
    and fixed payloads (fixed raws are ranked by |raw| * scale); the
    input model is not modified.
    """
    if not 0.0 <= sparsity < 1.0:
        raise UsageError(f"sparsity must be in [0, 1), got {sparsity}")
    mags, layer_ids, flat_ids = [], [], []
    for idx, layer in enumerate(model.layers):
        if not layer.is_mac:
            continue
        w = layer.weights
        scale = w.scale / (1 << w.fmt.fraction_bits) if w.is_fixed else 1.0
        mags.append(np.abs(w.data.astype(np.float64)) * scale)
        layer_ids.append(np.full(w.data.size, idx, dtype=np.int64))
        flat_ids.append(np.arange(w.data.size, dtype=np.int64))
    if not mags:
        return model
    mag = np.concatenate(mags)
    lid = np.concatenate(layer_ids)
    fid = np.concatenate(flat_ids)
    n_zero = math.ceil(sparsity * mag.size)
    order = np.lexsort((fid, lid, mag))  # magnitude, then layer, then position
    to_zero = order[:n_zero]

    new_layers = []
    zero_sets: dict[int, np.ndarray] = {}
    for idx in np.unique(lid[to_zero]):
        zero_sets[int(idx)] = fid[to_zero][lid[to_zero] == idx]
    for idx, layer in enumerate(model.layers):
        if not layer.is_mac:
            new_layers.append(layer)
            continue
        w = layer.weights
        data = w.data.copy()
        if idx in zero_sets:
            data[zero_sets[idx]] = 0
        new_layers.append(LayerSpec(
            kind=layer.kind, name=layer.name,
            weights=Tensor(w.shape, data, scale=w.scale, fmt=w.fmt),
            bias=None if layer.bias is None else layer.bias.copy(),
            bias_raw=None if layer.bias_raw is None else layer.bias_raw.copy(),
            pool_size=layer.pool_size, fatrelu_threshold=layer.fatrelu_threshold,
            out_scale=layer.out_scale,
            thresholds=None if layer.thresholds is None else layer.thresholds.copy(),
            percentile=layer.percentile, sample_count=layer.sample_count,
            act_max_abs=layer.act_max_abs,
        ))
    return ModelGraph(layers=new_layers, input_shape=model.input_shape,
                      qformat=model.qformat, input_scale=model.input_scale)
