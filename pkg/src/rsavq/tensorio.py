"""Dense matrix containers and the binary file formats used by rsavq.

Three little-endian formats are defined here:

* RSQT, a single 2-D float32 tensor.
* RSQB, a bundle of RSQT records holding per-sample gradients.
* RSQQ, a quantized matrix: grouped codebooks plus bit-packed indices.

Matrices are stored as float32 on disk and promoted to float64 in memory.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import FormatError, UnsupportedVersionError, ValidationError

TENSOR_MAGIC = b"RSQT"
BUNDLE_MAGIC = b"RSQB"
QUANT_MAGIC = b"RSQQ"
TENSOR_VERSION = 1
BUNDLE_VERSION = 1
QUANT_VERSION = 1

MAX_CODEBOOK_SIZE = 1 << 16

_TENSOR_HEADER = struct.Struct("<4sIIQQ")
_BUNDLE_HEADER = struct.Struct("<4sII")
_QUANT_HEADER = struct.Struct("<4sIQQIIQI")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """Return the 64-bit FNV-1a hash of ``data``."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def round_half_up(x):
    """Round to the nearest integer with halves going up (not to even)."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def codebook_size(bits: float, vector_length: int) -> int:
    """Codebook cardinality for a group with ``bits`` per weight.

    K = 2^round(bits * v), clamped to [1, 2^16].
    """
    exponent = int(round_half_up(bits * vector_length))
    if exponent <= 0:
        return 1
    return min(1 << min(exponent, 16), MAX_CODEBOOK_SIZE)


def index_width(k: int) -> int:
    """Bits used to store one index into a codebook of size ``k``."""
    return max(1, int(k - 1).bit_length())


def check_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate a dense 2-D matrix and return it as float64.

    Raises:
        ValidationError: if ``a`` is not 2-D, is empty or holds NaN/Inf.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"{name} must have rows >= 1 and cols >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def _to_float32(a: np.ndarray, name: str) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.ascontiguousarray(a, dtype="<f4")
    if not np.all(np.isfinite(out)):
        raise ValidationError(f"{name} has entries that overflow float32")
    return out


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}: wanted {n} bytes, got {len(data)}")
    return data


# ---------------------------------------------------------------------------
# RSQT tensors
# ---------------------------------------------------------------------------


def encode_tensor(w) -> bytes:
    """Serialize a matrix into canonical RSQT bytes."""
    arr = check_matrix(w, "tensor")
    rows, cols = arr.shape
    header = _TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, 2, rows, cols)
    return header + _to_float32(arr, "tensor").tobytes()


def _decode_tensor_from(fh: BinaryIO, remaining: int | None = None) -> np.ndarray:
    header = _read_exact(fh, _TENSOR_HEADER.size, "tensor header")
    magic, version, ndims, rows, cols = _TENSOR_HEADER.unpack(header)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != TENSOR_VERSION:
        raise UnsupportedVersionError(f"unsupported tensor version {version}")
    if ndims != 2:
        raise FormatError(f"only 2-D tensors are supported, file declares ndims={ndims}")
    if rows < 1 or cols < 1:
        raise ValidationError(f"tensor dims must be >= 1, got {rows}x{cols}")
    nbytes = rows * cols * 4
    if remaining is not None and nbytes > remaining - _TENSOR_HEADER.size:
        raise ValidationError(f"tensor dims {rows}x{cols} exceed the file size")
    payload = _read_exact(fh, nbytes, "tensor payload")
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("tensor payload contains non-finite values")
    return arr


def decode_tensor(data: bytes) -> np.ndarray:
    """Parse RSQT bytes. The whole buffer must be consumed."""
    fh = io.BytesIO(data)
    arr = _decode_tensor_from(fh, len(data))
    if fh.tell() != len(data):
        raise FormatError(f"{len(data) - fh.tell()} trailing bytes after tensor payload")
    return arr


def write_tensor(w, path) -> None:
    """Write ``w`` to ``path`` as an RSQT file.

    The matrix is validated before anything touches the disk, and the file is
    replaced atomically.

    Raises:
        ValidationError: on non-finite or float32-overflowing entries.
        OSError: if the destination cannot be written; the message names the path.
    """
    _atomic_write(path, encode_tensor(w))


def read_tensor(path) -> np.ndarray:
    """Read an RSQT file and return a float64 matrix."""
    data = Path(path).read_bytes()
    try:
        return decode_tensor(data)
    except (FormatError, ValidationError) as exc:
        raise type(exc)(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Gradient bundles
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GradientBundle:
    """Per-sample gradients of the loss with respect to one weight matrix.

    Attributes:
        samples: array of shape (S, M, N); sample order is significant.
    """

    samples: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 3:
            raise ValidationError(f"bundle samples must have shape (S, M, N), got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValidationError("gradient bundle must hold at least one sample")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValidationError(f"bundle samples must be non-empty matrices, got {arr.shape[1:]}")
        bad = np.flatnonzero(~np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1))
        if bad.size:
            raise ValidationError(f"gradient sample {int(bad[0])} contains non-finite entries")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    @classmethod
    def from_matrices(cls, matrices: Iterable) -> "GradientBundle":
        mats = [np.asarray(m, dtype=np.float64) for m in matrices]
        if not mats:
            raise ValidationError("gradient bundle must hold at least one sample")
        for i, m in enumerate(mats):
            if m.shape != mats[0].shape:
                raise ValidationError(f"gradient sample {i} has shape {m.shape}, expected {mats[0].shape}")
        return cls(np.stack(mats))

    @property
    def sample_count(self) -> int:
        return self.samples.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape[1], self.samples.shape[2]

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @cached_property
    def digest(self) -> int:
        """FNV-1a 64 hash of the canonical RSQB serialization."""
        return fnv1a64(encode_bundle(self))


def encode_bundle(bundle: GradientBundle) -> bytes:
    parts = [_BUNDLE_HEADER.pack(BUNDLE_MAGIC, BUNDLE_VERSION, bundle.sample_count)]
    parts.extend(encode_tensor(s) for s in bundle.samples)
    return b"".join(parts)


def decode_bundle(data: bytes) -> GradientBundle:
    fh = io.BytesIO(data)
    magic, version, count = _BUNDLE_HEADER.unpack(_read_exact(fh, _BUNDLE_HEADER.size, "bundle header"))
    if magic != BUNDLE_MAGIC:
        raise FormatError(f"bad bundle magic {magic!r}, expected {BUNDLE_MAGIC!r}")
    if version != BUNDLE_VERSION:
        raise UnsupportedVersionError(f"unsupported bundle version {version}")
    if count < 1:
        raise ValidationError("gradient bundle must hold at least one sample")
    mats = []
    for i in range(count):
        try:
            mats.append(_decode_tensor_from(fh, len(data) - fh.tell()))
        except (FormatError, ValidationError) as exc:
            raise type(exc)(f"sample {i}: {exc}") from exc
    if fh.tell() != len(data):
        raise FormatError(f"{len(data) - fh.tell()} trailing bytes after bundle records")
    return GradientBundle.from_matrices(mats)


def write_bundle(bundle: GradientBundle, path, as_directory: bool = False) -> None:
    """Write a bundle as one RSQB file, or as a directory of RSQT files.

    The directory layout names samples ``grad_00000.rsqt``, ``grad_00001.rsqt``
    and so on.
    """
    if not as_directory:
        _atomic_write(path, encode_bundle(bundle))
        return
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(bundle.samples):
        write_tensor(sample, root / f"grad_{i:05d}.rsqt")


def read_bundle(path) -> GradientBundle:
    """Read a gradient bundle from an RSQB file or a directory of RSQT files.

    Directory entries matching ``grad_*.rsqt`` are consumed in filename order.

    Raises:
        ValidationError: if the bundle is empty or sample shapes disagree. The
            message names the offending sample.
    """
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("grad_*.rsqt"))
        if not files:
            raise ValidationError(f"{p}: no grad_*.rsqt files, bundle is empty")
        mats = []
        for f in files:
            m = read_tensor(f)
            if mats and m.shape != mats[0].shape:
                raise ValidationError(f"{f.name} has shape {m.shape}, expected {mats[0].shape}")
            mats.append(m)
        return GradientBundle.from_matrices(mats)
    data = p.read_bytes()
    try:
        return decode_bundle(data)
    except (FormatError, ValidationError) as exc:
        raise type(exc)(f"{p}: {exc}") from exc


# ---------------------------------------------------------------------------
# Quantized artifacts
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GroupBlock:
    """One channel group sharing a codebook.

    Attributes:
        channels: sorted channel ids belonging to the group.
        bits: group bit-width b_g in bits per weight.
        codebook: (K, v) centroids.
        indices: one codeword id per v-vector, ordered by channel then position.
    """

    channels: np.ndarray
    bits: float
    codebook: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.int64)
        cb = np.asarray(self.codebook, dtype=np.float64)
        idx = np.asarray(self.indices, dtype=np.int64)
        if ch.ndim != 1 or ch.size == 0:
            raise ValidationError("group must contain at least one channel")
        if np.any(np.diff(ch) <= 0) or ch[0] < 0:
            raise ValidationError("group channel ids must be sorted, unique and non-negative")
        if cb.ndim != 2 or cb.shape[0] < 1 or cb.shape[1] < 1:
            raise ValidationError(f"codebook must be a non-empty (K, v) matrix, got {cb.shape}")
        if not np.all(np.isfinite(cb)):
            raise ValidationError("codebook contains non-finite centroids")
        if not np.isfinite(self.bits):
            raise ValidationError("group bits must be finite")
        if idx.ndim != 1:
            raise ValidationError("indices must be a flat array")
        if idx.size and (idx.min() < 0 or idx.max() >= cb.shape[0]):
            raise ValidationError(f"index out of codebook range [0, {cb.shape[0]})")
        expected = codebook_size(self.bits, cb.shape[1])
        if cb.shape[0] != expected:
            raise ValidationError(
                f"codebook has {cb.shape[0]} rows but b_g={self.bits} with v={cb.shape[1]} implies K={expected}"
            )
        for name, arr in (("channels", ch), ("codebook", cb), ("indices", idx)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "bits", float(self.bits))

    @property
    def k(self) -> int:
        return self.codebook.shape[0]


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """A matrix in grouped vector-quantized form.

    Channels are rows. Each row is split into consecutive length-v vectors, the
    last one zero-padded by ``pad`` entries when ``cols`` is not a multiple of v.
    """

    rows: int
    cols: int
    vector_length: int
    pad: int
    digest: int
    groups: tuple[GroupBlock, ...]
    reshape_axis: str = field(default="row-major-within-channel")

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValidationError(f"shape must be positive, got {self.rows}x{self.cols}")
        if self.vector_length < 1:
            raise ValidationError("vector_length must be >= 1")
        if self.pad != (-self.cols) % self.vector_length:
            raise ValidationError(f"pad {self.pad} inconsistent with cols={self.cols}, v={self.vector_length}")
        if not 0 <= self.digest <= _MASK64:
            raise ValidationError("digest must fit in 64 bits")
        groups = tuple(self.groups)
        if not groups:
            raise ValidationError("quantized tensor needs at least one group")
        seen = np.concatenate([g.channels for g in groups])
        if seen.size != self.rows or not np.array_equal(np.sort(seen), np.arange(self.rows)):
            raise ValidationError("group channels must partition 0..rows-1")
        per_row = self.vectors_per_channel
        for gi, g in enumerate(groups):
            if g.codebook.shape[1] != self.vector_length:
                raise ValidationError(f"group {gi} codebook width {g.codebook.shape[1]} != v={self.vector_length}")
            if g.indices.size != g.channels.size * per_row:
                raise ValidationError(
                    f"group {gi} has {g.indices.size} indices, expected {g.channels.size * per_row}"
                )
        object.__setattr__(self, "groups", groups)

    @property
    def shape(self) -> tuple[int, int]:
        return self.rows, self.cols

    @property
    def vectors_per_channel(self) -> int:
        return (self.cols + self.pad) // self.vector_length

    def avg_bits(self) -> float:
        """Mean group bit-width weighted by channel count."""
        return sum(g.bits * g.channels.size for g in self.groups) / self.rows


def _pack_indices(indices: np.ndarray, width: int) -> bytes:
    idx = np.asarray(indices, dtype=np.uint64)
    bits = ((idx[:, None] >> np.arange(width, dtype=np.uint64)) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def _unpack_indices(data: bytes, count: int, width: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[: count * width]
    weights = np.left_shift(np.uint64(1), np.arange(width, dtype=np.uint64))
    return (bits.reshape(count, width).astype(np.uint64) * weights).sum(axis=1).astype(np.int64)


def encode_quantized(q: QuantizedTensor) -> bytes:
    parts = [
        _QUANT_HEADER.pack(
            QUANT_MAGIC, QUANT_VERSION, q.rows, q.cols, q.vector_length, q.pad, q.digest, len(q.groups)
        )
    ]
    for g in q.groups:
        parts.append(struct.pack("<I", g.channels.size))
        parts.append(g.channels.astype("<u4").tobytes())
        parts.append(struct.pack("<fI", g.bits, g.k))
        parts.append(_to_float32(g.codebook, "codebook").tobytes())
        width = index_width(g.k)
        parts.append(struct.pack("<B", width))
        parts.append(_pack_indices(g.indices, width))
    return b"".join(parts)


def decode_quantized(data: bytes) -> QuantizedTensor:
    fh = io.BytesIO(data)
    header = _read_exact(fh, _QUANT_HEADER.size, "artifact header")
    magic, version, rows, cols, v, pad, digest, group_count = _QUANT_HEADER.unpack(header)
    if magic != QUANT_MAGIC:
        raise FormatError(f"bad artifact magic {magic!r}, expected {QUANT_MAGIC!r}")
    if version != QUANT_VERSION:
        raise UnsupportedVersionError(f"unsupported artifact version {version}")
    if v < 1 or rows < 1 or cols < 1:
        raise ValidationError(f"invalid artifact geometry rows={rows} cols={cols} v={v}")
    per_row = (cols + pad) // v
    groups = []
    for gi in range(group_count):
        (n_ch,) = struct.unpack("<I", _read_exact(fh, 4, f"group {gi} channel count"))
        if n_ch > rows:
            raise ValidationError(f"group {gi} claims {n_ch} channels but the tensor has {rows}")
        channels = np.frombuffer(_read_exact(fh, 4 * n_ch, f"group {gi} channels"), dtype="<u4")
        bits, k = struct.unpack("<fI", _read_exact(fh, 8, f"group {gi} bits"))
        if k < 1 or k > MAX_CODEBOOK_SIZE:
            raise ValidationError(f"group {gi} codebook size {k} outside [1, {MAX_CODEBOOK_SIZE}]")
        codebook = np.frombuffer(_read_exact(fh, 4 * k * v, f"group {gi} codebook"), dtype="<f4")
        (width,) = struct.unpack("<B", _read_exact(fh, 1, f"group {gi} index width"))
        if width != index_width(k):
            raise FormatError(f"group {gi} index width {width} does not match K={k}")
        count = n_ch * per_row
        packed = _read_exact(fh, (count * width + 7) // 8, f"group {gi} indices")
        indices = _unpack_indices(packed, count, width)
        try:
            groups.append(
                GroupBlock(
                    channels=channels.astype(np.int64),
                    bits=float(bits),
                    codebook=codebook.astype(np.float64).reshape(k, v),
                    indices=indices,
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"group {gi}: {exc}") from exc
    if fh.tell() != len(data):
        raise FormatError(f"{len(data) - fh.tell()} trailing bytes after artifact groups")
    return QuantizedTensor(rows=rows, cols=cols, vector_length=v, pad=pad, digest=digest, groups=tuple(groups))


def write_quantized(q: QuantizedTensor, path) -> None:
    """Write a quantized artifact as an RSQQ file (atomically)."""
    _atomic_write(path, encode_quantized(q))


def read_quantized(path) -> QuantizedTensor:
    """Read an RSQQ artifact, validating every invariant of the layout."""
    data = Path(path).read_bytes()
    try:
        return decode_quantized(data)
    except (FormatError, ValidationError) as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def artifacts_equal(a: QuantizedTensor, b: QuantizedTensor) -> bool:
    """True when two artifacts match exactly, including codebook bytes and index order."""
    head = ("rows", "cols", "vector_length", "pad", "digest", "reshape_axis")
    if any(getattr(a, f) != getattr(b, f) for f in head) or len(a.groups) != len(b.groups):
        return False
    for x, y in zip(a.groups, b.groups):
        if x.bits != y.bits or not np.array_equal(x.channels, y.channels):
            return False
        if x.codebook.shape != y.codebook.shape or x.codebook.tobytes() != y.codebook.tobytes():
            return False
        if not np.array_equal(x.indices, y.indices):
            return False
    return True
