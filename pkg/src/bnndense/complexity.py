"""Analytic cost model for binary layers, the multi-branch upsampler and binary attention."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, ContractError, ShapeError
from .tensorcore import BitPlane, _tail_mask, _unpack_bool_rows, pack_signs

PARALLELISM = (32, 64, 128)

ATTENTION_NOTE = (
    "note: the often quoted 137.90x attention speedup for this layer does not follow from "
    "the attention cost formula; evaluated verbatim with C_add = c_out*w_out*h_out it gives "
    "28.55x at K=5 (37.1x if C_add uses the pre-upsample size)"
)


@dataclass(frozen=True)
class LayerCostSpec:
    c_in: int
    c_out: int
    kh: int
    kw: int
    w_in: int
    h_in: int
    w_out: int
    h_out: int
    K: int = 1
    bitwise_parallelism: int = 64

    def __post_init__(self):
        dims = (self.c_in, self.c_out, self.kh, self.kw, self.w_in, self.h_in, self.w_out, self.h_out, self.K)
        if min(dims) < 1:
            raise ConfigError("all layer dimensions and K must be positive")
        if self.bitwise_parallelism not in PARALLELISM:
            raise ConfigError(f"bitwise_parallelism must be one of {PARALLELISM}")


def primitive_costs(s: LayerCostSpec) -> Tuple[int, int, int]:
    """``(C_conv, C_add, C_up)`` for one branch."""
    c_conv = s.c_in * s.c_out * s.kh * s.kw * s.w_in * s.h_in
    c_add = s.c_out * s.w_out * s.h_out
    c_up = s.c_in * s.w_in * s.h_in
    return c_conv, c_add, c_up


def upsample_speedup(s: LayerCostSpec) -> float:
    """Float upsample+conv cost over K binary branches with float gating additions."""
    c_conv, c_add, c_up = primitive_costs(s)
    p = s.bitwise_parallelism
    return (c_up + c_conv) / (s.K * c_up + s.K * c_conv / p + s.K * c_add)


def attention_costs(s: LayerCostSpec) -> Tuple[int, int]:
    """``(C_comp, C_allo)``: building the affinity maps and applying them."""
    m = s.h_in * s.w_in
    return s.c_in * m * m, s.c_in * s.c_in * m


def attention_speedup(s: LayerCostSpec) -> float:
    """Float attention over compute-once binary maps applied to K branches."""
    c_comp, c_allo = attention_costs(s)
    _, c_add, _ = primitive_costs(s)
    p = s.bitwise_parallelism
    return (c_comp + c_allo) / ((c_comp + s.K * c_allo) / p + s.K * c_add)


# -- fixed-point comparison --------------------------------------------------

def encode_fixedpoint(values, K: int) -> List[BitPlane]:
    """Planes ``b_0..b_{K-1}`` in {-1, +1} with ``v = sum 2^i b_i``; ``v`` odd, ``|v| <= 2^K - 1``."""
    v = np.asarray(values, dtype=np.int64).ravel()
    top = (1 << K) - 1
    if K < 1:
        raise ShapeError("K must be >= 1")
    if v.size and (np.any(np.abs(v) > top) or np.any(v % 2 == 0)):
        raise ShapeError(f"values must be odd integers within [-{top}, {top}]")
    u = (v + top) // 2
    return [pack_signs(np.where((u >> i) & 1, 1.0, -1.0)) for i in range(K)]


_POWERS = np.left_shift(1, np.arange(62, dtype=np.int64))


def decode_fixedpoint(planes: Sequence[BitPlane]) -> np.ndarray:
    """Integers ``sum_i 2^i b_i`` from sign planes of equal length."""
    if not planes:
        raise ShapeError("need at least one plane")
    m = planes[0].valid_len
    if any(b.valid_len != m for b in planes):
        raise ShapeError("all planes must share one length")
    bits = _unpack_bool_rows(np.stack([b.words for b in planes]), m).astype(np.int64)
    weights = np.left_shift(1, np.arange(len(planes), dtype=np.int64))[:, None]
    return ((2 * bits - 1) * weights).sum(axis=0).reshape(planes[0].dims)


def fixedpoint_dot(wq: Sequence[BitPlane], xq: Sequence[BitPlane]) -> Tuple[int, int]:
    """Bit-serial dot product ``sum_ij 2^(i+j) <b_i^w, b_j^x>``; returns ``(value, xnor-popcount passes)``.

    The result is checked against the product of the decoded integers.
    """
    if not wq or not xq:
        raise ShapeError("need at least one plane on each side")
    m = wq[0].valid_len
    if any(b.valid_len != m for b in list(wq) + list(xq)):
        raise ShapeError("all planes must share one length")
    if ((1 << len(wq)) - 1) * ((1 << len(xq)) - 1) * m >= 1 << 63:
        raise ShapeError("plane counts too large for a 64-bit accumulator")
    # all K_w x K_x plane pairs in one XNOR-popcount sweep; pair (i, j) carries weight 2^(i+j)
    w_words = np.stack([b.words for b in wq])
    x_words = np.stack([b.words for b in xq])
    dots = 2 * np.bitwise_count(~(w_words[:, None] ^ x_words[None]) & _tail_mask(m)).sum(axis=-1) - m
    w_pow = _POWERS[:len(wq)]
    x_pow = _POWERS[:len(xq)]
    total, passes = int(w_pow @ dots.astype(np.int64) @ x_pow), dots.size
    # independent check: decode both operands to integers and take the plain dot product
    w_int = w_pow @ (2 * _unpack_bool_rows(w_words, m).astype(np.int64) - 1)
    x_int = x_pow @ (2 * _unpack_bool_rows(x_words, m).astype(np.int64) - 1)
    want = int(w_int @ x_int)
    if total != want:
        raise ContractError(f"bit-serial sum {total} != integer product {want}")
    return total, passes


def fixedpoint_range(K: int, m: int) -> Tuple[int, int]:
    top = ((1 << K) - 1) ** 2 * m
    return -top, top


# -- whole-model report ------------------------------------------------------

@dataclass
class CostRow:
    layer: str
    float_ops: int = 0
    binary_ops: int = 0
    additions: int = 0
    param_bytes: int = 0

    def ncc(self, parallelism: int = 64) -> float:
        return (self.float_ops + self.additions + self.binary_ops / parallelism) / 1e9


@dataclass
class CostReport:
    float_ops: int
    binary_ops: int
    additions: int
    sigma: float
    ncc: float
    param_bytes: int
    rows: List[CostRow] = field(default_factory=list)
    parallelism: int = 64
    notes: List[str] = field(default_factory=list)

    def to_text(self) -> str:
        out = io.StringIO()
        width = max([len(r.layer) for r in self.rows] + [5])
        out.write(f"{'layer':<{width}} {'float_ops':>14} {'binary_ops':>14} {'additions':>12} "
                  f"{'ncc':>12} {'bytes':>10}\n")
        for r in self.rows:
            out.write(f"{r.layer:<{width}} {r.float_ops:>14d} {r.binary_ops:>14d} {r.additions:>12d} "
                      f"{r.ncc(self.parallelism):>12.6f} {r.param_bytes:>10d}\n")
        out.write(f"total float_ops={self.float_ops} binary_ops={self.binary_ops} additions={self.additions}\n")
        out.write(f"ncc={self.ncc:.6f} (1e9 ops, binary ops / {self.parallelism}) "
                  f"param_bytes={self.param_bytes} sigma={self.sigma:.4f}\n")
        for note in self.notes:
            out.write(note + "\n")
        return out.getvalue()

    def to_csv(self) -> str:
        lines = ["layer,float_ops,binary_ops,ncc,bytes"]
        for r in self.rows:
            lines.append(f"{r.layer},{r.float_ops + r.additions},{r.binary_ops},"
                         f"{r.ncc(self.parallelism):.9f},{r.param_bytes}")
        lines.append(f"total,{self.float_ops + self.additions},{self.binary_ops},{self.ncc:.9f},"
                     f"{self.param_bytes}")
        return "\n".join(lines) + "\n"


def _layer_binary(model, info) -> bool:
    cfg = model.cfg
    return info.quantizable and cfg.binary_active


def model_report(model, parallelism: int = 64) -> CostReport:
    """Walk the architecture table.

    Conv rows cost ``c_in*c_out*k*k*h_out*w_out`` multiply-accumulates per
    branch, binary when the layer is quantized.  Quantized weights take one
    bit each; every other parameter (float weights, norms, gates) four bytes.
    Each multi-branch upsampler adds ``K*c_in*h*w`` float copies and
    ``K*c_out*h_out*w_out`` float additions for gating and merging; attention
    rows cost ``C_comp + K*C_allo`` plus ``K*c*h*w`` additions.
    """
    if parallelism not in PARALLELISM:
        raise ConfigError(f"parallelism must be one of {PARALLELISM}")
    rows = []
    K = model.cfg.K
    for info in model.describe():
        binary = _layer_binary(model, info)
        row = CostRow(info.name)
        if info.kind == "conv":
            ops = info.branches * info.c_in * info.c_out * info.k * info.k * info.h * info.w
            weights = info.branches * info.c_in * info.c_out * info.k * info.k
            other = info.params - weights
            if binary:
                row.binary_ops = ops
                row.param_bytes = -(-weights // 8) + 4 * other
            else:
                row.float_ops = ops
                row.param_bytes = 4 * info.params
            if info.name.endswith(".up.conv1"):
                row.float_ops += K * info.c_out * info.h * info.w        # nearest-neighbour copies
            if info.name.endswith(".up.conv2"):
                row.additions = K * info.c_out * info.h * info.w
        else:
            m = info.h * info.w
            comp, allo = info.c_in * m * m, info.c_in * info.c_in * m
            if binary:
                row.binary_ops = comp + K * allo
            else:
                row.float_ops = comp + K * allo
            row.additions = K * info.c_in * m
            row.param_bytes = 4 * info.params
        rows.append(row)
    f = sum(r.float_ops for r in rows)
    b = sum(r.binary_ops for r in rows)
    a = sum(r.additions for r in rows)
    ncc = (f + a + b / parallelism) / 1e9
    dense = (f + a + b) / 1e9
    return CostReport(f, b, a, dense / ncc if ncc else 1.0, ncc, sum(r.param_bytes for r in rows), rows,
                      parallelism)
