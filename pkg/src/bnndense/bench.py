"""Wall-clock comparison of the packed binary conv against a direct float conv."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .complexity import LayerCostSpec, primitive_costs, upsample_speedup
from .exceptions import ContractError
from .rng import SplitMix64
from .tensorcore import binary_conv2d, pack_signs


def direct_conv(x: np.ndarray, w: np.ndarray, pad: int, pad_value: float = -1.0) -> np.ndarray:
    """Unoptimised float cross-correlation: one output pixel at a time, stride 1."""
    c, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), constant_values=pad_value)
    h_out, w_out = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    flat_w = w.reshape(c_out, -1)
    out = np.empty((c_out, h_out, w_out), dtype=x.dtype)
    for i in range(h_out):
        for j in range(w_out):
            window = xp[:, i:i + kh, j:j + kw].reshape(-1)
            out[:, i, j] = (flat_w * window).sum(axis=1)
    return out


@dataclass
class BenchReport:
    spec: LayerCostSpec
    repeats: int
    packed_seconds: Optional[float]
    float_seconds: Optional[float]
    c_conv: int
    sigma_theory: float

    @property
    def ratio(self) -> Optional[float]:
        if not self.packed_seconds or self.float_seconds is None:
            return None
        return self.float_seconds / self.packed_seconds

    def lines(self):
        s = self.spec
        out = [f"layer c_in={s.c_in} c_out={s.c_out} k={s.kh} hw={s.h_in}",
               f"c_conv={self.c_conv}",
               f"sigma_theory={self.sigma_theory:.4f}",
               f"bit_parallel_bound={s.bitwise_parallelism}",
               "correctness=identical"]
        if self.repeats > 0:
            out += [f"packed_seconds={self.packed_seconds:.6f}",
                    f"float_seconds={self.float_seconds:.6f}",
                    f"measured_ratio={self.ratio:.3f}"]
        else:
            out.append("timing=omitted (repeats=0)")
        return out


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernel(spec: LayerCostSpec, repeats: int = 3, seed: int = 0) -> BenchReport:
    """Check both paths agree exactly on one random instance, then time each (best of ``repeats``).

    Timing covers the kernels only: the packed side receives already packed
    operands, the float side already unpacked ±1 arrays.
    """
    if repeats < 0:
        raise ValueError("repeats must be non-negative")
    rng = SplitMix64(seed)
    x = np.where(rng.random(spec.c_in * spec.h_in * spec.w_in) < 0.5, -1.0, 1.0)
    x = x.reshape(spec.c_in, spec.h_in, spec.w_in).astype(np.float32)
    w = np.where(rng.random(spec.c_out * spec.c_in * spec.kh * spec.kw) < 0.5, -1.0, 1.0)
    w = w.reshape(spec.c_out, spec.c_in, spec.kh, spec.kw).astype(np.float32)
    pad = spec.kh // 2
    bx, bw = pack_signs(x), pack_signs(w)
    packed = binary_conv2d(bx, bw, pad=pad)
    reference = direct_conv(x, w, pad)
    if not np.array_equal(packed, reference.astype(np.int64)):
        raise ContractError("packed kernel disagrees with the float reference")
    c_conv = primitive_costs(spec)[0]
    up = LayerCostSpec(spec.c_in, spec.c_out, spec.kh, spec.kw, spec.w_in, spec.h_in, 2 * spec.w_in,
                       2 * spec.h_in, 1, spec.bitwise_parallelism)
    report = BenchReport(spec, repeats, None, None, c_conv, upsample_speedup(up))
    if repeats:
        report.packed_seconds = _best_of(lambda: binary_conv2d(bx, bw, pad=pad), repeats)
        report.float_seconds = _best_of(lambda: direct_conv(x, w, pad), repeats)
    return report
