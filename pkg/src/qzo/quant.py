"""Group-wise scalar and codebook post-training quantization of linear layers.

Scalar path: per contiguous group of ``group_size`` weights along the input
dimension, ``scale = absmax(group) / (2**(bits-1) - 1)`` and the stored
integer is round-to-nearest-even of ``w / scale``, so every in-range weight
reconstructs within half a scale step. All-zero groups store scale 0 and
integers 0.

Codebook path: weights are cut into length ``group_len`` vectors, a codebook
of ``2**code_bits`` centroids is fit by k-means, and one non-negative scale
per output channel maps the reconstruction back to the row's magnitude.

The continuous scales are the only part an optimizer is allowed to mutate;
integers, codebooks and indices stay fixed after construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .rng import uniforms
from .tensor import DenseMatrix, matvec

SUPPORTED_BITS = (2, 3, 4, 8)

_MAGIC = b"QZOL"
_FORMAT_VERSION = 1
_KIND_SCALAR = 0
_KIND_CODEBOOK = 1
_FLAG_BIAS = 0x01


@dataclass
class QuantizedLinear:
    """Integer weights with per-group scales: out x in, groups along in-dim."""

    qweights: np.ndarray  # int8 (out, in)
    scales: np.ndarray  # float64, flat, row-major groups: out * (in / group_size)
    bits: int
    group_size: int
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.qweights = np.ascontiguousarray(self.qweights, dtype=np.int8)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float64)
        if self.qweights.ndim != 2:
            raise ValueError("qweights must be 2-D")
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}")
        out, inp = self.qweights.shape
        if inp % self.group_size != 0:
            raise ValueError("group_size must divide the input dimension")
        lo, hi = -(1 << (self.bits - 1)), (1 << (self.bits - 1)) - 1
        if self.qweights.min(initial=0) < lo or self.qweights.max(initial=0) > hi:
            raise ValueError(f"quantized values outside signed {self.bits}-bit range")
        if self.scales.shape != (out * (inp // self.group_size),):
            raise ValueError("scale count must be out * (in / group_size)")
        if not np.isfinite(self.scales).all() or (self.scales < 0).any():
            raise ValueError("scales must be finite and non-negative")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
            if self.bias.shape != (out,):
                raise ValueError("bias length must equal the output dimension")

    @property
    def out_features(self) -> int:
        return self.qweights.shape[0]

    @property
    def in_features(self) -> int:
        return self.qweights.shape[1]

    @property
    def groups_per_row(self) -> int:
        return self.in_features // self.group_size


@dataclass
class CodebookLinear:
    """Codebook-quantized layer: integer indices select centroid vectors,
    one non-negative scale per output channel."""

    codebook: np.ndarray  # float64 (2**code_bits, group_len)
    indices: np.ndarray  # int32 (out, in / group_len)
    channel_scales: np.ndarray  # float64 (out,)
    code_bits: int
    group_len: int
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.codebook = np.ascontiguousarray(self.codebook, dtype=np.float64)
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int32)
        self.channel_scales = np.ascontiguousarray(self.channel_scales, dtype=np.float64)
        if self.code_bits < 1:
            raise ValueError("code_bits must be >= 1")
        n_codes = 1 << self.code_bits
        if self.codebook.shape != (n_codes, self.group_len):
            raise ValueError("codebook must be (2**code_bits, group_len)")
        if not np.isfinite(self.codebook).all():
            raise ValueError("codebook entries must be finite")
        if self.indices.ndim != 2:
            raise ValueError("indices must be 2-D")
        if self.indices.min(initial=0) < 0 or self.indices.max(initial=0) >= n_codes:
            raise ValueError("indices outside the codebook range")
        out = self.indices.shape[0]
        if self.channel_scales.shape != (out,):
            raise ValueError("one channel scale per output row required")
        if not np.isfinite(self.channel_scales).all() or (self.channel_scales < 0).any():
            raise ValueError("channel scales must be finite and non-negative")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
            if self.bias.shape != (out,):
                raise ValueError("bias length must equal the output dimension")

    @property
    def out_features(self) -> int:
        return self.indices.shape[0]

    @property
    def in_features(self) -> int:
        return self.indices.shape[1] * self.group_len


QuantLayer = QuantizedLinear | CodebookLinear


def quantize_scalar(w: DenseMatrix, bits: int, group_size: int) -> QuantizedLinear:
    """Symmetric group-wise absmax quantization with round-half-to-even."""
    if bits not in SUPPORTED_BITS:
        raise ValueError(f"bits must be one of {SUPPORTED_BITS}")
    out, inp = w.rows, w.cols
    if group_size < 1 or inp % group_size != 0:
        raise ValueError("group_size must divide the input dimension")
    if not np.isfinite(w.a).all():
        raise ValueError("weights must be finite")
    qmax = (1 << (bits - 1)) - 1
    grouped = w.a.reshape(out, inp // group_size, group_size)
    scales = np.abs(grouped).max(axis=2) / qmax
    ratio = np.divide(
        grouped, scales[:, :, None], out=np.zeros_like(grouped), where=scales[:, :, None] > 0
    )
    q = np.clip(np.round(ratio), -qmax - 1, qmax).astype(np.int8)
    return QuantizedLinear(
        qweights=q.reshape(out, inp), scales=scales.ravel(), bits=bits, group_size=group_size
    )


def reconstruct(layer: QuantLayer, scale_offset: np.ndarray | None = None) -> np.ndarray:
    """Real weight matrix implied by the layer's integers and (offset) scales.

    This is the single de-quantization expression shared by every forward
    path, so routes that ought to agree agree to the last bit.
    """
    if isinstance(layer, QuantizedLinear):
        eff = layer.scales if scale_offset is None else layer.scales + scale_offset
        per_weight = np.repeat(
            eff.reshape(layer.out_features, layer.groups_per_row), layer.group_size, axis=1
        )
        return per_weight * layer.qweights
    eff = layer.channel_scales if scale_offset is None else layer.channel_scales + scale_offset
    rows = layer.codebook[layer.indices].reshape(layer.out_features, layer.in_features)
    return eff[:, None] * rows


def dequantize(layer: QuantLayer) -> DenseMatrix:
    """Real weights per the stored scales (scale * integer, elementwise)."""
    return DenseMatrix(reconstruct(layer))


def forward_quantized(
    layer: QuantLayer, x, scale_offset: np.ndarray | None = None
) -> np.ndarray:
    """((scales + offset) * integers) @ x + bias, without touching the layer.

    With no offset this equals matvec(dequantize(layer), x) + bias exactly:
    both routes share the reconstruction expression and the matvec kernel.
    """
    if scale_offset is not None:
        scale_offset = np.asarray(scale_offset, dtype=np.float64)
        want = layer.scales.shape if isinstance(layer, QuantizedLinear) else layer.channel_scales.shape
        if scale_offset.shape != want:
            raise ValueError(f"scale_offset shape {scale_offset.shape} != {want}")
    y = matvec(DenseMatrix(reconstruct(layer, scale_offset)), x)
    if layer.bias is not None:
        y = y + layer.bias
    return y


def forward_batch(
    layer: QuantLayer, x_batch: np.ndarray, scale_offset: np.ndarray | None = None
) -> np.ndarray:
    """Batched forward: rows of x_batch are inputs; returns (n, out).

    Overflow is allowed to reach inf here; callers that care check
    finiteness and report divergence with layer context.
    """
    w = reconstruct(layer, scale_offset)
    with np.errstate(over="ignore", invalid="ignore"):
        y = np.asarray(x_batch, dtype=np.float64) @ w.T
        if layer.bias is not None:
            y = y + layer.bias
    return y


def kmeans_fit(
    points: np.ndarray, n_centers: int, iters: int, seed: int
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Plain Lloyd k-means with seeded initialization.

    Returns (centers, assignment, per-iteration mean squared error). Centers
    start from a seeded sample of distinct rows; empty clusters keep their
    previous center. The error sequence is non-increasing.
    """
    n = points.shape[0]
    if n_centers > n:
        raise ValueError(f"degenerate fit: {n_centers} centers for {n} points")
    # Seeded partial Fisher-Yates over row indices for the initial centers.
    order = np.arange(n)
    u = uniforms(seed, 0, n_centers)
    for i in range(n_centers):
        j = i + int(u[i] * (n - i))
        order[i], order[j] = order[j], order[i]
    centers = points[order[:n_centers]].copy()

    assign = np.zeros(n, dtype=np.int64)
    errors: list[float] = []
    for _ in range(max(iters, 1)):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)
        errors.append(float(d2[np.arange(n), assign].mean()))
        for c in range(n_centers):
            members = assign == c
            if members.any():
                centers[c] = points[members].mean(axis=0)
    return centers, assign, errors


def quantize_codebook(
    w: DenseMatrix, code_bits: int, group_len: int, iters: int = 25, seed: int = 0
) -> CodebookLinear:
    """Fit a codebook over all length-`group_len` weight groups of `w`.

    Channel scales are set so each reconstructed row matches the original
    row's absmax (1.0 for an all-zero row).
    """
    if code_bits < 1:
        raise ValueError("code_bits must be >= 1")
    out, inp = w.rows, w.cols
    if group_len < 1 or inp % group_len != 0:
        raise ValueError("group_len must divide the input dimension")
    groups = w.a.reshape(out * (inp // group_len), group_len)
    centers, assign, _ = kmeans_fit(groups, 1 << code_bits, iters, seed)
    indices = assign.reshape(out, inp // group_len).astype(np.int32)

    raw_rows = centers[indices].reshape(out, inp)
    w_absmax = np.abs(w.a).max(axis=1)
    raw_absmax = np.abs(raw_rows).max(axis=1)
    channel_scales = np.ones(out)
    usable = (w_absmax > 0) & (raw_absmax > 0)
    channel_scales[usable] = w_absmax[usable] / raw_absmax[usable]

    return CodebookLinear(
        codebook=centers,
        indices=indices,
        channel_scales=channel_scales,
        code_bits=code_bits,
        group_len=group_len,
    )


def _pack_bits(values: np.ndarray, width: int) -> bytes:
    """Pack non-negative ints into a little-endian bitstream, `width` bits each."""
    v = values.astype(np.uint64).reshape(-1, 1)
    bits = ((v >> np.arange(width, dtype=np.uint64)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def _unpack_bits(buf: bytes, width: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    bits = bits[: count * width].reshape(count, width).astype(np.uint64)
    return (bits << np.arange(width, dtype=np.uint64)).sum(axis=1).astype(np.int64)


def save_layer(layer: QuantLayer, path) -> None:
    """Write the binary layer format (little-endian, bit-packed integers)."""
    parts = [struct.pack("<4sIBB", _MAGIC, _FORMAT_VERSION,
                         _KIND_SCALAR if isinstance(layer, QuantizedLinear) else _KIND_CODEBOOK,
                         _FLAG_BIAS if layer.bias is not None else 0)]
    if isinstance(layer, QuantizedLinear):
        parts.append(struct.pack("<IIBI", layer.out_features, layer.in_features,
                                 layer.bits, layer.group_size))
        offset = 1 << (layer.bits - 1)
        payload = _pack_bits(layer.qweights.astype(np.int64).ravel() + offset, layer.bits)
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
        parts.append(layer.scales.astype("<f8").tobytes())
    else:
        parts.append(struct.pack("<IIBI", layer.out_features, layer.in_features,
                                 layer.code_bits, layer.group_len))
        parts.append(layer.codebook.astype("<f8").tobytes())
        payload = _pack_bits(layer.indices.astype(np.int64).ravel(), layer.code_bits)
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
        parts.append(layer.channel_scales.astype("<f8").tobytes())
    if layer.bias is not None:
        parts.append(layer.bias.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_layer(path) -> QuantLayer:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, version, kind, flags = struct.unpack_from("<4sIBB", buf, 0)
    if magic != _MAGIC:
        raise ValueError(f"not a layer file: bad magic {magic!r}")
    if version != _FORMAT_VERSION:
        raise ValueError(f"unsupported layer format version {version}")
    pos = struct.calcsize("<4sIBB")
    out, inp, width, group = struct.unpack_from("<IIBI", buf, pos)
    pos += struct.calcsize("<IIBI")

    if kind == _KIND_SCALAR:
        (plen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        q = _unpack_bits(buf[pos : pos + plen], width, out * inp) - (1 << (width - 1))
        pos += plen
        n_scales = out * (inp // group)
        scales = np.frombuffer(buf, dtype="<f8", count=n_scales, offset=pos).copy()
        pos += 8 * n_scales
        bias = None
        if flags & _FLAG_BIAS:
            bias = np.frombuffer(buf, dtype="<f8", count=out, offset=pos).copy()
        return QuantizedLinear(
            qweights=q.reshape(out, inp), scales=scales, bits=width, group_size=group, bias=bias
        )

    if kind == _KIND_CODEBOOK:
        n_codes = 1 << width
        codebook = (
            np.frombuffer(buf, dtype="<f8", count=n_codes * group, offset=pos)
            .reshape(n_codes, group)
            .copy()
        )
        pos += 8 * n_codes * group
        (plen,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        n_groups = out * (inp // group)
        idx = _unpack_bits(buf[pos : pos + plen], width, n_groups)
        pos += plen
        channel_scales = np.frombuffer(buf, dtype="<f8", count=out, offset=pos).copy()
        pos += 8 * out
        bias = None
        if flags & _FLAG_BIAS:
            bias = np.frombuffer(buf, dtype="<f8", count=out, offset=pos).copy()
        return CodebookLinear(
            codebook=codebook,
            indices=idx.reshape(out, inp // group).astype(np.int32),
            channel_scales=channel_scales,
            code_bits=width,
            group_len=group,
            bias=bias,
        )

    raise ValueError(f"unknown layer kind {kind}")
