"""Bit-packed sign tensors and the XNOR-popcount kernels built on them.

A :class:`BitPlane` stores one bit per element, row-major, packed little-endian
into 64-bit words (bit ``1`` means ``+1``, bit ``0`` means ``-1``).  Trailing
bits of the last word are always zero so that equal content means equal bytes.

Float tensors are plain ``numpy`` arrays checked with :func:`check_float`;
integer accumulators are ``int32`` arrays.
"""
from __future__ import annotations

import functools
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from .exceptions import FormatError, ShapeError

WORD_BITS = 64
_MAX_REDUCTION = 2**15


def check_float(t, name: str = "tensor") -> np.ndarray:
    """Return ``t`` as a float ndarray, rejecting NaN and Inf."""
    arr = np.asarray(t)
    if arr.dtype.kind not in "fiub":
        raise ShapeError(f"{name} must be numeric, got dtype {arr.dtype}")
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def _pack_bool_rows(bits: np.ndarray) -> np.ndarray:
    """Pack the last axis of a boolean array into little-endian uint64 words."""
    n = bits.shape[-1]
    n_words = -(-n // WORD_BITS)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    pad = n_words * 8 - packed.shape[-1]
    if pad:
        widths = [(0, 0)] * (packed.ndim - 1) + [(0, pad)]
        packed = np.pad(packed, widths)
    packed = np.ascontiguousarray(packed)
    return packed.view("<u8").reshape(bits.shape[:-1] + (n_words,))


def _unpack_bool_rows(words: np.ndarray, n: int) -> np.ndarray:
    as_bytes = np.ascontiguousarray(words.astype("<u8", copy=False)).view(np.uint8)
    as_bytes = as_bytes.reshape(words.shape[:-1] + (words.shape[-1] * 8,))
    return np.unpackbits(as_bytes, axis=-1, count=n, bitorder="little").astype(bool)


@functools.lru_cache(maxsize=256)
def _tail_mask(n: int) -> np.ndarray:
    n_words = -(-n // WORD_BITS)
    mask = np.full(n_words, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    rem = n % WORD_BITS
    if n_words and rem:
        mask[-1] = np.uint64((1 << rem) - 1)
    mask.setflags(write=False)
    return mask


@dataclass(frozen=True, eq=False)
class BitPlane:
    dims: tuple
    words: np.ndarray
    valid_len: int

    def __post_init__(self):
        n = int(np.prod(self.dims, dtype=np.int64)) if len(self.dims) else 1
        if n != self.valid_len:
            raise ShapeError(f"dims {self.dims} hold {n} elements, valid_len is {self.valid_len}")
        if self.words.shape != (-(-self.valid_len // WORD_BITS),):
            raise ShapeError("word count must be ceil(valid_len / 64)")
        if self.words.size and np.any(self.words & ~_tail_mask(self.valid_len)):
            raise ShapeError("pad bits beyond valid_len must be zero")
        self.words.setflags(write=False)

    @classmethod
    def from_bools(cls, bits) -> "BitPlane":
        bits = np.asarray(bits, dtype=bool)
        words = _pack_bool_rows(bits.reshape(-1)) if bits.size else np.zeros(0, np.uint64)
        return cls(tuple(bits.shape), words.astype(np.uint64), int(bits.size))

    def to_bools(self) -> np.ndarray:
        if self.valid_len == 0:
            return np.zeros(self.dims, dtype=bool)
        return _unpack_bool_rows(self.words, self.valid_len).reshape(self.dims)

    def tobytes(self) -> bytes:
        return self.words.astype("<u8").tobytes()

    def __eq__(self, other):
        if not isinstance(other, BitPlane):
            return NotImplemented
        return self.dims == other.dims and self.tobytes() == other.tobytes()

    def __hash__(self):
        return hash((self.dims, self.tobytes()))

    def __repr__(self):
        return f"BitPlane(dims={self.dims}, valid_len={self.valid_len})"


def pack_signs(t) -> BitPlane:
    """Pack ``sign(t)`` with the convention ``sign(0) = +1``."""
    arr = check_float(t)
    return BitPlane.from_bools(arr >= 0)


def unpack(b: BitPlane, dtype=np.float64) -> np.ndarray:
    out = b.to_bools().astype(dtype)
    return out + out - 1


def xnor_popcount_dot(a: BitPlane, b: BitPlane) -> int:
    """Inner product of two ±1 vectors as ``2 * popcount(xnor(a, b)) - M``."""
    if a.valid_len != b.valid_len:
        raise ShapeError(f"length mismatch: {a.valid_len} vs {b.valid_len}")
    m = a.valid_len
    agree = ~(a.words ^ b.words) & _tail_mask(m)
    return 2 * int(np.bitwise_count(agree).sum()) - m


def xnor_popcount_matrix(a_rows: np.ndarray, b_rows: np.ndarray, m: int) -> np.ndarray:
    """All-pairs ±1 inner products between packed row sets.

    ``a_rows`` is ``(P, words)`` and ``b_rows`` is ``(Q, words)``; returns an
    ``int32`` array of shape ``(P, Q)``.
    """
    mask = _tail_mask(m)
    acc = np.zeros((a_rows.shape[0], b_rows.shape[0]), dtype=np.int32)
    for k in range(mask.shape[0]):
        agree = ~(a_rows[:, k, None] ^ b_rows[None, :, k]) & mask[k]
        acc += np.bitwise_count(agree)
    return 2 * acc - m


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def binary_conv2d(inp: BitPlane, weights: BitPlane, stride: int = 1, pad: int = 0,
                  pad_value: int = -1) -> np.ndarray:
    """±1 cross-correlation of a packed ``(C, H, W)`` input with packed ``(C_out, C, kh, kw)`` filters.

    Padding is injected as ``pad_value`` (``-1`` or ``+1``) bits.  Returns an
    ``int32`` array of shape ``(C_out, H_out, W_out)``.
    """
    if len(inp.dims) != 3 or len(weights.dims) != 4:
        raise ShapeError("expected input (C, H, W) and weights (C_out, C_in, kh, kw)")
    c, h, w = inp.dims
    c_out, c_in, kh, kw = weights.dims
    if c_in != c:
        raise ShapeError(f"input has {c} channels, filters expect {c_in}")
    if stride < 1 or pad < 0:
        raise ShapeError("stride must be positive and pad non-negative")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError("kernel larger than padded input")
    if pad_value not in (-1, 1):
        raise ShapeError("pad_value must be -1 or +1")
    red = c * kh * kw
    if red > _MAX_REDUCTION:
        raise ShapeError(f"reduction length {red} exceeds accumulator range")
    h_out = conv_output_size(h, kh, stride, pad)
    w_out = conv_output_size(w, kw, stride, pad)

    bits = np.pad(inp.to_bools(), ((0, 0), (pad, pad), (pad, pad)), constant_values=pad_value > 0)
    win = np.lib.stride_tricks.sliding_window_view(bits, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    patches = win.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, red)
    a_rows = _pack_bool_rows(patches)
    w_rows = _pack_bool_rows(weights.to_bools().reshape(c_out, red))
    acc = xnor_popcount_matrix(w_rows, a_rows, red)
    return acc.reshape(c_out, h_out, w_out)


def nn_upsample(t: Union[BitPlane, np.ndarray], factor: int):
    """Nearest-neighbour upsampling over the last two axes."""
    if factor < 1:
        raise ShapeError("factor must be >= 1")
    if isinstance(t, BitPlane):
        return BitPlane.from_bools(nn_upsample(t.to_bools(), factor))
    arr = np.asarray(t)
    if arr.ndim < 2:
        raise ShapeError("need at least two spatial axes")
    if factor == 1:
        return arr.copy()
    return arr.repeat(factor, axis=-2).repeat(factor, axis=-1)


def hadamard_scale(t: np.ndarray, scale) -> np.ndarray:
    """``out[c, ...] = scale[c] * t[c, ...]``."""
    t = np.asarray(t)
    scale = check_float(scale, "scale").reshape(-1)
    if scale.shape[0] != t.shape[0]:
        raise ShapeError(f"scale length {scale.shape[0]} != channels {t.shape[0]}")
    return scale.reshape((-1,) + (1,) * (t.ndim - 1)) * t


# -- BTF1 tensor files -------------------------------------------------------

BTF_MAGIC = b"BTF1"
DTYPE_F32, DTYPE_BITS, DTYPE_I32 = 0, 1, 2


def dump_btf(t: Union[BitPlane, np.ndarray]) -> bytes:
    """Serialize a tensor as BTF1.  Float data is stored as float32."""
    if isinstance(t, BitPlane):
        code, dims, payload = DTYPE_BITS, t.dims, t.tobytes()
    else:
        arr = np.asarray(t)
        if arr.dtype.kind == "f":
            code, payload = DTYPE_F32, arr.astype("<f4").tobytes()
        elif arr.dtype.kind in "iub":
            if arr.size and (arr.min() < -2**31 or arr.max() >= 2**31):
                raise ShapeError("integer tensor exceeds int32 range")
            code, payload = DTYPE_I32, arr.astype("<i4").tobytes()
        else:
            raise ShapeError(f"unsupported dtype {arr.dtype}")
        dims = arr.shape
    if len(dims) > 255:
        raise ShapeError("too many dimensions")
    head = BTF_MAGIC + struct.pack("<BB", code, len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    return head + payload


def load_btf(data: bytes, offset: int = 0, return_size: bool = False):
    """Parse a BTF1 blob starting at ``offset``."""
    view = memoryview(data)
    if len(view) < offset + 6 or bytes(view[offset:offset + 4]) != BTF_MAGIC:
        raise FormatError("bad BTF1 magic")
    code, ndim = struct.unpack_from("<BB", view, offset + 4)
    pos = offset + 6
    if len(view) < pos + 4 * ndim:
        raise FormatError("truncated BTF1 header")
    dims = struct.unpack_from(f"<{ndim}I", view, pos)
    pos += 4 * ndim
    n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if code == DTYPE_BITS:
        nbytes = 8 * (-(-n // WORD_BITS))
    elif code in (DTYPE_F32, DTYPE_I32):
        nbytes = 4 * n
    else:
        raise FormatError(f"unknown BTF1 dtype code {code}")
    if len(view) < pos + nbytes:
        raise FormatError("truncated BTF1 payload")
    raw = bytes(view[pos:pos + nbytes])
    if code == DTYPE_BITS:
        words = np.frombuffer(raw, dtype="<u8").astype(np.uint64)
        try:
            out = BitPlane(tuple(dims), words, n)
        except ShapeError as exc:
            raise FormatError(str(exc)) from exc
    elif code == DTYPE_F32:
        out = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    else:
        out = np.frombuffer(raw, dtype="<i4").astype(np.int32).reshape(dims)
    if return_size:
        return out, pos + nbytes - offset
    return out


def save_btf(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_btf(t))


def read_btf(path):
    with open(path, "rb") as fh:
        data = fh.read()
    out, size = load_btf(data, return_size=True)
    if size != len(data):
        raise FormatError(f"{path}: trailing bytes after tensor")
    return out
