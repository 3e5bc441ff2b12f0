"""Multi-branch gated upsampling and compute-once binary attention.

Two layers of API live here:

* single-sample numpy functions (``binary_branch_conv``, ``branch_mix``,
  ``multibranch_upsample_forward``, ``attention_maps``, ``attention_apply``)
  that run the packed XNOR-popcount kernels and serve as the inference path;
* tape layers (``ConvBN``, ``MultiBranchUpsample``, ``BinaryAttention``) that
  the network trains with.  In binary mode they simulate the packed kernels
  with float arithmetic on exact ±1 values, so both paths agree bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .autodiff import ParamStore, Tape, Var, bn_eval
from .exceptions import ShapeError
from .quantize import QuantizedWeights, binarize_weights, filter_scale
from .tensorcore import (binary_conv2d, check_float, hadamard_scale, nn_upsample, pack_signs,
                         xnor_popcount_matrix, _pack_bool_rows)


class Norm(NamedTuple):
    """Frozen batch-norm statistics and affine for one conv output."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return bn_eval(x[None], self.mean, self.var, self.gamma, self.beta, self.eps)[0]


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x)))


def soft_gate(theta) -> np.ndarray:
    """Gate values ``sigmoid(theta)`` in (0, 1)."""
    return sigmoid(check_float(theta, "theta"))


def _same_shapes(tensors: Sequence[np.ndarray]):
    shapes = {np.shape(t) for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"branch outputs disagree in shape: {sorted(shapes)}")


def branch_mix(i: int, outputs: Sequence[np.ndarray], alpha, exclude_self: bool = False) -> np.ndarray:
    """Gated input of branch ``i``: ``alpha_i * y_i + (1 - alpha_i) * sum_j y_j``.

    The sum runs over every branch including ``i``; it is evaluated as
    ``y_i + (1 - alpha_i) * sum_{j != i} y_j`` which is the same expression
    rearranged, and is exact for a single branch.  ``exclude_self`` drops
    ``j = i`` from the sum.
    """
    _same_shapes(outputs)
    a = float(np.asarray(alpha)[i])
    others = None
    for j, y in enumerate(outputs):
        if j == i:
            continue
        others = y if others is None else others + y
    if exclude_self:
        return a * outputs[i] if others is None else a * outputs[i] + (1 - a) * others
    return outputs[i].copy() if others is None else outputs[i] + (1 - a) * others


def merge_branches(xs: Sequence[np.ndarray], lam) -> np.ndarray:
    """Weighted sum ``sum_i lam_i * x_i``, accumulated in branch order."""
    _same_shapes(xs)
    lam = np.asarray(lam).reshape(-1)
    if lam.shape[0] != len(xs):
        raise ShapeError(f"{lam.shape[0]} merge weights for {len(xs)} branches")
    out = lam[0] * xs[0]
    for w, x in zip(lam[1:], xs[1:]):
        out = out + w * x
    return out


def binary_branch_conv(x: np.ndarray, params: QuantizedWeights, stride: int = 1,
                       pad: Optional[int] = None, pad_value: int = -1,
                       norm: Optional[Norm] = None) -> np.ndarray:
    """``filter_scale ⊙ xnor_popcount(sign(w), sign(x))`` followed by optional batch norm."""
    kh = params.shape[2]
    pad = kh // 2 if pad is None else pad
    acc = binary_conv2d(pack_signs(x), params.bits, stride=stride, pad=pad, pad_value=pad_value)
    out = hadamard_scale(acc.astype(np.float64), params.filter_scale)
    return norm(out) if norm is not None else out


@dataclass
class BranchParams:
    """K non-shared branches of (conv -> upsample -> conv) plus gate and merge logits."""

    conv1: List[QuantizedWeights]
    conv2: List[QuantizedWeights]
    gate_logits: np.ndarray
    merge_logits: np.ndarray
    norm1: List[Optional[Norm]] = field(default_factory=list)
    norm2: List[Optional[Norm]] = field(default_factory=list)
    exclude_self: bool = False

    def __post_init__(self):
        k = len(self.conv1)
        if k < 1 or len(self.conv2) != k:
            raise ShapeError("need K >= 1 branches with two convs each")
        self.gate_logits = check_float(self.gate_logits, "gate_logits").reshape(-1)
        self.merge_logits = check_float(self.merge_logits, "merge_logits").reshape(-1)
        if self.gate_logits.shape[0] != k or self.merge_logits.shape[0] != k:
            raise ShapeError("gate/merge logits must have length K")
        self.norm1 = list(self.norm1) or [None] * k
        self.norm2 = list(self.norm2) or [None] * k

    @property
    def K(self):
        return len(self.conv1)

    @property
    def gates(self):
        return soft_gate(self.gate_logits)

    @property
    def merge_weights(self):
        return soft_gate(self.merge_logits)

    def permuted(self, order) -> "BranchParams":
        pick = lambda seq: [seq[i] for i in order]
        return BranchParams(pick(self.conv1), pick(self.conv2), self.gate_logits[list(order)],
                            self.merge_logits[list(order)], pick(self.norm1), pick(self.norm2),
                            self.exclude_self)


@dataclass
class AttentionMaps:
    spatial: np.ndarray   # (M, M) in {0, 1}
    channel: np.ndarray   # (C, C) in {0, 1}
    beta: float = 0.0


def _threshold_affinity(rows_bits: np.ndarray, tau: float) -> np.ndarray:
    """Pairwise XNOR-popcount affinity of boolean rows, thresholded at ``tau``."""
    m = rows_bits.shape[1]
    packed = _pack_bool_rows(rows_bits)
    return (xnor_popcount_matrix(packed, packed, m) >= tau).astype(np.float64)


def attention_maps(a: np.ndarray, proj: QuantizedWeights, tau: float = 0.0,
                   norm: Optional[Norm] = None, beta: float = 0.0) -> AttentionMaps:
    """Binary spatial (M x M) and channel (C x C) maps from one projected feature."""
    a = check_float(a, "feature")
    x = binary_branch_conv(a, proj, norm=norm)
    c = x.shape[0]
    bits = (x >= 0).reshape(c, -1)
    return AttentionMaps(_threshold_affinity(bits.T, tau), _threshold_affinity(bits, tau), float(beta))


def _row_normalise(s: np.ndarray) -> np.ndarray:
    rs = s.sum(axis=-1, keepdims=True)
    return s / np.where(rs == 0, 1, rs).astype(s.dtype)


def attention_apply(maps: AttentionMaps, x: np.ndarray) -> np.ndarray:
    """``E = beta * (x S_p^T + S_c x) + x`` on the ``(C, M)`` view of ``x``.

    Map rows are divided by their sums (rows summing to zero are left as is).
    """
    x = np.asarray(x)
    c = x.shape[0]
    flat = x.reshape(c, -1)
    if maps.spatial.shape != (flat.shape[1],) * 2 or maps.channel.shape != (c, c):
        raise ShapeError(f"maps {maps.spatial.shape}/{maps.channel.shape} do not fit feature {x.shape}")
    if maps.beta == 0:
        return x.copy()
    spatial = flat @ _row_normalise(maps.spatial).T
    channel = _row_normalise(maps.channel) @ flat
    return (maps.beta * (spatial + channel) + flat).reshape(x.shape)


def multibranch_upsample_forward(x: np.ndarray, p: BranchParams, factor: int,
                                 maps: Optional[AttentionMaps] = None) -> np.ndarray:
    """Replicate ``x`` into K branches, conv -> (attention) -> upsample -> gated mix -> conv, then merge."""
    x = check_float(x, "feature")
    if factor < 1:
        raise ShapeError("factor must be >= 1")
    ys = []
    for i in range(p.K):
        y = binary_branch_conv(x, p.conv1[i], norm=p.norm1[i])
        if maps is not None:
            y = attention_apply(maps, y)
        ys.append(nn_upsample(y, factor))
    alpha = p.gates
    outs = [binary_branch_conv(branch_mix(i, ys, alpha, p.exclude_self), p.conv2[i], norm=p.norm2[i])
            for i in range(p.K)]
    return merge_branches(outs, p.merge_weights)


# -- tape layers -------------------------------------------------------------

@dataclass
class Context:
    """Per-forward switches shared by all layers."""

    training: bool = False
    binarize: bool = False
    pad_value: float = -1.0
    ste_clip: bool = False
    audit: list = field(default_factory=list)


def _index(tape: Tape, v: Var, i: int) -> Var:
    onehot = np.zeros(v.shape, dtype=v.value.dtype)
    onehot[i] = 1
    return tape.apply("sum", tape.apply("mul", v, onehot))


class ConvBN:
    """Conv followed by batch norm.

    ``binary=True`` marks the layer as quantizable: when the context has
    ``binarize`` set it runs ``filter_scale ⊙ conv(sign(x), sign(w))``;
    otherwise it runs a float conv on ``hardtanh(x)``.  Layers with
    ``binary=False`` are plain float convs on the raw input.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int,
                 stride: int = 1, binary: bool = True, rng=None, norm: bool = True):
        self.name, self.c_in, self.c_out, self.k, self.stride = name, c_in, c_out, k, stride
        self.binary, self.norm = binary, norm
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = c_in * k * k
        store.add(f"{name}.w", rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in))
        if norm:
            store.add(f"{name}.bn.gamma", np.ones(c_out))
            store.add(f"{name}.bn.beta", np.zeros(c_out))
            store.add(f"{name}.bn.mean", np.zeros(c_out), trainable=False)
            store.add(f"{name}.bn.var", np.ones(c_out), trainable=False)
        else:
            store.add(f"{name}.bias", np.zeros(c_out))

    @property
    def n_params(self):
        return self.c_out * self.c_in * self.k * self.k + 2 * self.c_out

    def quantized(self, store: ParamStore) -> QuantizedWeights:
        return binarize_weights(store[f"{self.name}.w"].astype(np.float64))

    def frozen_norm(self, store: ParamStore) -> Optional[Norm]:
        if not self.norm:
            return None
        n = self.name + ".bn."
        return Norm(*(store[n + s].astype(np.float64) for s in ("mean", "var", "gamma", "beta")))

    def is_binary(self, ctx: Context) -> bool:
        return self.binary and ctx.binarize

    def __call__(self, tape: Tape, store: ParamStore, ctx: Context, x: Var) -> Var:
        w = tape.param(store, f"{self.name}.w")
        pad = self.k // 2
        if self.is_binary(ctx):
            a = tape.apply("sign_poly", x)
            wb = tape.apply("sign_ste", w, clip=ctx.ste_clip)
            y = tape.apply("conv2d", a, wb, stride=self.stride, pad=pad, pad_value=ctx.pad_value)
            scale = filter_scale(w.value.astype(np.float64)).astype(y.value.dtype).reshape(1, -1, 1, 1)
            y = tape.apply("mul", y, scale)
            ctx.audit.append((self.name, "binary"))
        else:
            a = tape.apply("hardtanh", x) if self.binary else x
            y = tape.apply("conv2d", a, w, stride=self.stride, pad=pad, pad_value=0.0)
            ctx.audit.append((self.name, "float"))
        if not self.norm:
            return tape.apply("add", y, tape.apply("reshape", tape.param(store, f"{self.name}.bias"),
                                                   shape=(1, -1, 1, 1)))
        n = self.name + ".bn."
        running = (store[n + "mean"], store[n + "var"])
        if not ctx.training and y.value.dtype != running[0].dtype:
            running = tuple(r.astype(y.value.dtype) for r in running)
        return tape.apply("batchnorm", y, tape.param(store, n + "gamma"), tape.param(store, n + "beta"),
                          running=running, training=ctx.training)


class BinaryAttention:
    """Computes {0,1} spatial/channel maps once from a shared feature.

    Maps are thresholded affinities and carry no gradient; only ``beta`` and
    the branch features being attended are trained through this block.
    """

    def __init__(self, store: ParamStore, name: str, channels: int, tau: float = 0.0,
                 binary: bool = True, rng=None):
        self.name, self.channels, self.tau = name, channels, tau
        self.proj = ConvBN(store, f"{name}.proj", channels, channels, 1, binary=binary, rng=rng)
        store.add(f"{name}.beta", np.zeros(1))

    def maps(self, tape: Tape, store: ParamStore, ctx: Context, a: Var):
        xp = self.proj(tape, store, ctx, a).value
        n, c = xp.shape[:2]
        flat = xp.reshape(n, c, -1)
        if self.proj.is_binary(ctx):
            flat = np.where(flat >= 0, 1.0, -1.0).astype(flat.dtype)
        spatial = (np.matmul(flat.transpose(0, 2, 1), flat) >= self.tau).astype(flat.dtype)
        channel = (np.matmul(flat, flat.transpose(0, 2, 1)) >= self.tau).astype(flat.dtype)
        return _row_normalise(spatial), _row_normalise(channel)

    def apply(self, tape: Tape, store: ParamStore, maps, x: Var) -> Var:
        spatial_n, channel_n = maps
        n, c, h, w = x.shape
        flat = tape.apply("reshape", x, shape=(n, c, h * w))
        sp = tape.apply("matmul", flat, spatial_n.transpose(0, 2, 1))
        ch = tape.apply("matmul", channel_n, flat)
        beta = tape.param(store, f"{self.name}.beta")
        mixed = tape.apply("add", tape.apply("mul", tape.apply("add", sp, ch), beta), flat)
        return tape.apply("reshape", mixed, shape=(n, c, h, w))

    def frozen_maps(self, store: ParamStore, a: np.ndarray) -> AttentionMaps:
        """Numpy-path maps for one sample, from the packed kernels."""
        return attention_maps(a, self.proj.quantized(store), self.tau, self.proj.frozen_norm(store),
                              beta=float(store[f"{self.name}.beta"][0]))


class MultiBranchUpsample:
    """K parallel conv -> upsample -> conv branches with soft-gated cross-branch mixing."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, K: int, factor: int = 2,
                 binary: bool = True, exclude_self: bool = False, rng=None):
        if K < 1:
            raise ShapeError("K must be >= 1")
        self.name, self.K, self.factor, self.exclude_self = name, K, factor, exclude_self
        self.conv1 = [ConvBN(store, f"{name}.b{i}.conv1", c_in, c_in, 3, binary=binary, rng=rng)
                      for i in range(K)]
        self.conv2 = [ConvBN(store, f"{name}.b{i}.conv2", c_in, c_out, 3, binary=binary, rng=rng)
                      for i in range(K)]
        store.add(f"{name}.theta", np.zeros(K))
        store.add(f"{name}.phi", np.zeros(K))

    def __call__(self, tape: Tape, store: ParamStore, ctx: Context, x: Var,
                 attention: Optional[BinaryAttention] = None, maps=None) -> Var:
        ys = []
        for conv in self.conv1:
            y = conv(tape, store, ctx, x)
            if maps is not None:
                y = attention.apply(tape, store, maps, y)
            ys.append(tape.apply("upsample", y, factor=self.factor))
        alpha = tape.apply("sigmoid", tape.param(store, f"{self.name}.theta"))
        lam = tape.apply("sigmoid", tape.param(store, f"{self.name}.phi"))
        merged = None
        for i in range(self.K):
            others = None
            for j, y in enumerate(ys):
                if j != i:
                    others = y if others is None else tape.apply("add", others, y)
            a_i = _index(tape, alpha, i)
            if self.exclude_self:
                z = tape.apply("mul", ys[i], a_i)
                if others is not None:
                    z = tape.apply("add", z, tape.apply("mul", others, tape.apply("add", tape.apply("scale", a_i, factor=-1.0), 1.0)))
            elif others is None:
                z = ys[i]
            else:
                gate = tape.apply("add", tape.apply("scale", a_i, factor=-1.0), 1.0)
                z = tape.apply("add", ys[i], tape.apply("mul", others, gate))
            out = tape.apply("mul", self.conv2[i](tape, store, ctx, z), _index(tape, lam, i))
            merged = out if merged is None else tape.apply("add", merged, out)
        return merged

    def frozen_params(self, store: ParamStore) -> BranchParams:
        return BranchParams(
            [c.quantized(store) for c in self.conv1], [c.quantized(store) for c in self.conv2],
            store[f"{self.name}.theta"].astype(np.float64), store[f"{self.name}.phi"].astype(np.float64),
            [c.frozen_norm(store) for c in self.conv1], [c.frozen_norm(store) for c in self.conv2],
            self.exclude_self)
