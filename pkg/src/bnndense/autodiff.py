"""Reverse-mode differentiation over a small, fixed vocabulary of array ops.

Every op is registered with a closed-form backward.  A :class:`Tape` records
op applications in execution order; :meth:`Tape.backward` walks the records in
reverse exactly once, so gradient accumulation order (and therefore the
result, bit for bit) is fixed by the forward program.

Binarizers use surrogate backwards: ``sign_ste`` passes the upstream gradient
straight through, ``sign_poly`` multiplies it by the piecewise-linear
derivative ``2 ± 2x`` on ``[-1, 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .exceptions import ContractError, GraphError, ShapeError
from .quantize import poly_sign_derivative, sign, weight_grad_ste

BINARIZER_OPS = frozenset({"sign_ste", "sign_poly"})


@dataclass(frozen=True)
class Op:
    name: str
    forward: Callable
    backward: Callable


OPS: Dict[str, Op] = {}


def register(name):
    """Register ``forward``/``backward`` functions under ``name``.

    ``forward(*values, **attrs) -> (out, saved)``;
    ``backward(upstream, saved, needs) -> tuple of input gradients`` where
    ``needs[i]`` says whether input ``i`` wants a gradient.
    """

    def wrap(cls):
        OPS[name] = Op(name, cls.forward, cls.backward)
        return cls

    return wrap


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- op vocabulary -----------------------------------------------------------

@register("identity")
class _Identity:
    forward = staticmethod(lambda x: (x, None))
    backward = staticmethod(lambda g, saved, needs: (g,))


@register("add")
class _Add:
    @staticmethod
    def forward(a, b):
        return a + b, (np.shape(a), np.shape(b))

    @staticmethod
    def backward(g, saved, needs):
        sa, sb = saved
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)


@register("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        return a * b, (a, b)

    @staticmethod
    def backward(g, saved, needs):
        a, b = saved
        return (_unbroadcast(g * b, np.shape(a)) if needs[0] else None,
                _unbroadcast(g * a, np.shape(b)) if needs[1] else None)


@register("scale")
class _Scale:
    @staticmethod
    def forward(x, factor):
        return x * factor, factor

    @staticmethod
    def backward(g, factor, needs):
        return (g * factor,)


@register("matmul")
class _Matmul:
    @staticmethod
    def forward(a, b):
        return np.matmul(a, b), (a, b)

    @staticmethod
    def backward(g, saved, needs):
        a, b = saved
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return ga, gb


@register("sum")
class _Sum:
    @staticmethod
    def forward(x):
        return np.asarray(x.sum()), x.shape

    @staticmethod
    def backward(g, shape, needs):
        return (np.broadcast_to(g, shape).copy(),)


@register("reshape")
class _Reshape:
    @staticmethod
    def forward(x, shape):
        return x.reshape(shape), x.shape

    @staticmethod
    def backward(g, shape, needs):
        return (g.reshape(shape),)


@register("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(x):
        y = 1.0 / (1.0 + np.exp(-x))
        return y, y

    @staticmethod
    def backward(g, y, needs):
        return (g * y * (1.0 - y),)


@register("relu")
class _Relu:
    @staticmethod
    def forward(x):
        return np.maximum(x, 0), x

    @staticmethod
    def backward(g, x, needs):
        return (g * (x > 0),)


@register("hardtanh")
class _Hardtanh:
    @staticmethod
    def forward(x):
        return np.clip(x, -1, 1), x

    @staticmethod
    def backward(g, x, needs):
        return (g * ((x >= -1) & (x <= 1)),)


@register("sign_ste")
class _SignSte:
    @staticmethod
    def forward(w, clip=False):
        return sign(w), (w, clip)

    @staticmethod
    def backward(g, saved, needs):
        w, clip = saved
        return (weight_grad_ste(g, w, clip),)


@register("sign_poly")
class _SignPoly:
    @staticmethod
    def forward(x):
        return sign(x), x

    @staticmethod
    def backward(g, x, needs):
        return (g * poly_sign_derivative(x),)


@register("upsample")
class _Upsample:
    @staticmethod
    def forward(x, factor):
        if factor == 1:
            return x, factor
        return x.repeat(factor, axis=-2).repeat(factor, axis=-1), factor

    @staticmethod
    def backward(g, f, needs):
        if f == 1:
            return (g,)
        *lead, h, w = g.shape
        return (g.reshape(*lead, h // f, f, w // f, f).sum(axis=(-3, -1)),)


@register("avgpool")
class _AvgPool:
    @staticmethod
    def forward(x, k):
        n, c, h, w = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5)), k

    @staticmethod
    def backward(g, k, needs):
        return (g.repeat(k, axis=2).repeat(k, axis=3) / (k * k),)


try:  # optional fast conv kernels; the numpy path below is the reference
    import torch as _torch
except ImportError:  # pragma: no cover - exercised only without torch
    _torch = None

CONV_BACKEND = "torch" if _torch is not None else "numpy"


def _im2col(x, kh, kw, stride, pad, pad_value):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=pad_value)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _pad_input(x, pad, pad_value):
    if not pad:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=pad_value)


def conv2d_numpy(x, w, stride=1, pad=0, pad_value=0.0):
    """im2col cross-correlation; returns the output and the saved columns."""
    n = x.shape[0]
    c_out, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad, pad_value)
    out = (cols @ w.reshape(c_out, -1).T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


@register("conv2d")
class _Conv2d:
    """NCHW cross-correlation; ``pad_value`` fills the border (use -1 for sign inputs).

    The explicit border is materialized before the kernel call so both
    backends compute on the same padded input.
    """

    @staticmethod
    def forward(x, w, stride=1, pad=0, pad_value=0.0, backend=None):
        c_out, c_in, kh, kw = w.shape
        if x.shape[1] != c_in:
            raise ShapeError(f"conv input has {x.shape[1]} channels, weights expect {c_in}")
        w = w.astype(x.dtype, copy=False)
        backend = backend or CONV_BACKEND
        if backend == "torch":
            xp = np.ascontiguousarray(_pad_input(x, pad, pad_value))
            out = _torch.nn.functional.conv2d(_torch.from_numpy(xp), _torch.from_numpy(np.ascontiguousarray(w)),
                                              stride=stride).numpy()
            return out, ("torch", xp, x.shape, w, stride, pad)
        out, cols = conv2d_numpy(x, w, stride, pad, pad_value)
        return out, ("numpy", cols, x.shape, w, stride, pad)

    @staticmethod
    def backward(g, saved, needs):
        backend, data, xshape, w, stride, pad = saved
        n, c, h, wd = xshape
        c_out, _, kh, kw = w.shape
        g = np.ascontiguousarray(g, dtype=w.dtype)
        gx = gw = None
        if backend == "torch":
            gxp, gw_t, _ = _torch.ops.aten.convolution_backward(
                _torch.from_numpy(g), _torch.from_numpy(data), _torch.from_numpy(np.ascontiguousarray(w)),
                None, [stride, stride], [0, 0], [1, 1], False, [0, 0], 1, [bool(needs[0]), bool(needs[1]), False])
            if needs[1]:
                gw = gw_t.numpy()
            if needs[0]:
                gx = np.ascontiguousarray(gxp.numpy()[:, :, pad:pad + h, pad:pad + wd])
            return gx, gw
        ho, wo = g.shape[2], g.shape[3]
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        if needs[1]:
            gw = (g2.T @ data).reshape(w.shape)
        if needs[0]:
            dcols = (g2 @ w.reshape(c_out, -1)).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            gp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = np.ascontiguousarray(gp[:, :, pad:pad + h, pad:pad + wd])
        return gx, gw


def bn_eval(x, mean, var, gamma, beta, eps):
    """Frozen-statistics batch norm over axis 1; shared by training graph and reference paths."""
    shp = (1, -1) + (1,) * (x.ndim - 2)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mean.reshape(shp)) * inv.reshape(shp) * gamma.reshape(shp) + beta.reshape(shp)


@register("batchnorm")
class _BatchNorm:
    """Per-channel normalisation over (N, H, W).

    In training mode batch statistics are used and ``running`` (a
    ``(mean, var)`` pair of arrays) is updated in place with ``momentum``.
    """

    @staticmethod
    def forward(x, gamma, beta, running=None, training=True, momentum=0.9, eps=1e-5):
        shp = (1, -1, 1, 1)
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if running is not None:
                rm, rv = running
                rm *= momentum
                rm += (1 - momentum) * mean
                rv *= momentum
                rv += (1 - momentum) * var
            inv = 1.0 / np.sqrt(var + eps)
            xhat = (x - mean.reshape(shp)) * inv.reshape(shp)
            out = xhat * gamma.reshape(shp) + beta.reshape(shp)
            return out, (True, xhat, inv, gamma)
        rm, rv = running
        out = bn_eval(x, rm, rv, gamma, beta, eps)
        inv = 1.0 / np.sqrt(rv + eps)
        return out, (False, (x - rm.reshape(shp)) * inv.reshape(shp), inv, gamma)

    @staticmethod
    def backward(g, saved, needs):
        training, xhat, inv, gamma = saved
        shp = (1, -1, 1, 1)
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
        gbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
        gx = None
        if needs[0]:
            gxhat = g * gamma.reshape(shp)
            if training:
                m = g.shape[0] * g.shape[2] * g.shape[3]
                gx = (inv.reshape(shp) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=(0, 2, 3)).reshape(shp)
                    - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(shp)
                )
            else:
                gx = gxhat * inv.reshape(shp)
        return gx, ggamma, gbeta


@register("softmax_ce")
class _SoftmaxCrossEntropy:
    """Mean pixelwise cross-entropy of ``(N, K, H, W)`` logits against integer labels."""

    @staticmethod
    def forward(logits, labels):
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        picked = np.take_along_axis(logp, labels[:, None].astype(np.intp), axis=1)
        count = labels.size
        return np.asarray(-picked.sum() / count), (logp, labels, count)

    @staticmethod
    def backward(g, saved, needs):
        logp, labels, count = saved
        p = np.exp(logp)
        np.put_along_axis(p, labels[:, None].astype(np.intp),
                          np.take_along_axis(p, labels[:, None].astype(np.intp), axis=1) - 1, axis=1)
        return (g * p / count, None)


# -- tape --------------------------------------------------------------------

@dataclass
class Node:
    op: str
    inputs: tuple
    saved: object
    needs_grad: bool
    param: Optional[str] = None


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def requires_grad(self):
        return self.tape.nodes[self.index].needs_grad

    def __add__(self, other):
        return self.tape.apply("add", self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return self.tape.apply("mul", self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, other)

    def __repr__(self):
        nodes = self.tape.nodes
        op = nodes[self.index].op if 0 <= self.index < len(nodes) else "dangling"
        return f"Var(#{self.index}, {op}, shape={self.shape})"


class Tape:
    """Append-only record of one forward program."""

    def __init__(self):
        self.nodes = []
        self.values = []
        self._param_vars = {}

    def leaf(self, value, requires_grad=False, param=None) -> Var:
        node = Node("leaf", (), None, bool(requires_grad or param), param)
        # python scalars stay weakly typed so they do not promote float32 arrays
        if not isinstance(value, (int, float)) or requires_grad:
            value = np.asarray(value)
        return self._append(node, value)

    def constant(self, value) -> Var:
        return self.leaf(value)

    def param(self, store: "ParamStore", name: str) -> Var:
        """Leaf bound to a ``ParamStore`` slot; reused within one tape."""
        if name not in self._param_vars:
            self._param_vars[name] = self.leaf(store[name], requires_grad=store.trainable(name), param=name).index
        idx = self._param_vars[name]
        return Var(self, idx, self.values[idx])

    def _append(self, node, value) -> Var:
        self.nodes.append(node)
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def _ref(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self or not 0 <= x.index < len(self.nodes):
                raise GraphError(f"{x!r} is not on this tape")
            return x
        return self.constant(x)

    def record(self, op: str, inputs, value, saved) -> Var:
        """Append a node for an op whose forward was computed by the caller."""
        if op not in OPS:
            raise GraphError(f"unknown op {op!r}")
        refs = tuple(self._ref(v) for v in inputs)
        needs = any(self.nodes[r.index].needs_grad for r in refs)
        return self._append(Node(op, tuple(r.index for r in refs), saved, needs), value)

    def apply(self, op: str, *inputs, **attrs) -> Var:
        refs = [self._ref(v) for v in inputs]
        out, saved = OPS[op].forward(*[r.value for r in refs], **attrs)
        return self.record(op, refs, out, saved)

    def ops_used(self):
        return [n.op for n in self.nodes if n.op != "leaf"]

    def backward(self, loss: Var, params: Optional["ParamStore"] = None):
        """Propagate ``d loss`` back through the tape.

        Returns the list of per-node gradients (``None`` where no gradient
        flows).  When ``params`` is given, gradients of parameter leaves are
        accumulated into its slots.
        """
        loss = self._ref(loss)
        if np.size(loss.value) != 1:
            raise ContractError("backward needs a scalar loss")
        grads = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for idx in range(loss.index, -1, -1):
            node = self.nodes[idx]
            g = grads[idx]
            if g is None or not node.needs_grad or node.op == "leaf":
                continue
            needs = [self.nodes[i].needs_grad for i in node.inputs]
            in_grads = OPS[node.op].backward(g, node.saved, needs)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None or not self.nodes[i].needs_grad:
                    continue
                grads[i] = gi if grads[i] is None else grads[i] + gi
            if idx != loss.index:
                grads[idx] = None if node.op != "leaf" else grads[idx]
        if params is not None:
            for idx, node in enumerate(self.nodes):
                if node.param is not None and grads[idx] is not None and params.trainable(node.param):
                    params.accumulate(node.param, grads[idx])
        return grads


def backward(tape: Tape, loss: Var, params: Optional["ParamStore"] = None):
    return tape.backward(loss, params)


# -- parameters and optimiser ------------------------------------------------

class ParamStore:
    """Named parameter slots with gradient accumulators.

    Non-trainable slots (batch-norm running statistics) live here too so a
    checkpoint captures everything the forward pass reads.
    """

    def __init__(self):
        self._values = {}
        self._trainable = {}
        self.grads = {}

    def add(self, name, value, trainable=True):
        if name in self._values:
            raise GraphError(f"duplicate parameter {name!r}")
        self._values[name] = np.array(value, dtype=np.float32)
        self._trainable[name] = trainable
        if trainable:
            self.grads[name] = np.zeros_like(self._values[name])
        return self._values[name]

    def __getitem__(self, name):
        return self._values[name]

    def __setitem__(self, name, value):
        cur = self._values[name]
        value = np.asarray(value, dtype=cur.dtype)
        if value.shape != cur.shape:
            raise ShapeError(f"{name}: shape {value.shape} != {cur.shape}")
        cur[...] = value

    def __contains__(self, name):
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def items(self):
        return self._values.items()

    def trainable(self, name):
        return self._trainable[name]

    def trainable_names(self):
        return [n for n, t in self._trainable.items() if t]

    def accumulate(self, name, g):
        self.grads[name] += g

    def zero_grad(self):
        for g in self.grads.values():
            g[...] = 0

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self._values.items():
            out.add(name, value.copy(), self._trainable[name])
        return out


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: ParamStore):
        self.t += 1
        b1c = 1 - self.beta1 ** self.t
        b2c = 1 - self.beta2 ** self.t
        for name in params.trainable_names():
            g = params.grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.lr == 0:
                continue
            p = params[name]
            p -= (self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)).astype(p.dtype)


# -- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    mode: str
    max_error: float
    errors: dict

    def __str__(self):
        state = "PASS" if self.passed else "FAIL"
        return f"{state} [{self.mode}] max error {self.max_error:.3e}"


def grad_check(fn, inputs: dict, eps: float = 1e-3, tol: float = 1e-4,
               mode: str = "finite_difference", seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against an independent reference.

    ``fn(tape, vars)`` receives a tape and a dict of leaf ``Var`` objects built
    from ``inputs`` and must return a scalar ``Var``.

    ``finite_difference`` mode compares with central differences and refuses
    graphs containing binarizers.  ``surrogate`` mode checks each binarizer
    node's backward against its closed form on a random upstream gradient.
    """
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    def run(vals):
        tape = Tape()
        leaves = {k: tape.leaf(v, requires_grad=True) for k, v in vals.items()}
        return tape, leaves, fn(tape, leaves)

    tape, leaves, loss = run(inputs)
    used = set(tape.ops_used())
    errors = {}
    if mode == "finite_difference":
        if used & BINARIZER_OPS:
            raise ContractError("finite differences are meaningless across sign(); use surrogate mode")
        grads = tape.backward(loss)
        for name, x in inputs.items():
            analytic = grads[leaves[name].index]
            analytic = np.zeros_like(x) if analytic is None else analytic
            numeric = np.zeros_like(x)
            flat = x.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(run(inputs)[2].value)
                flat[i] = orig - eps
                down = float(run(inputs)[2].value)
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * eps)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
            errors[name] = float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
    elif mode == "surrogate":
        rng = np.random.default_rng(seed)
        for idx, node in enumerate(tape.nodes):
            if node.op not in BINARIZER_OPS:
                continue
            x = tape.values[node.inputs[0]]
            g = rng.standard_normal(np.shape(x))
            got = OPS[node.op].backward(g, node.saved, [True])[0]
            if node.op == "sign_poly":
                want = g * _poly_reference(x)
            else:
                want = g
            errors[f"{node.op}#{idx}"] = float(np.max(np.abs(got - want))) if np.size(x) else 0.0
    else:
        raise ContractError(f"unknown grad_check mode {mode!r}")
    worst = max(errors.values(), default=0.0)
    ok = worst < tol if mode == "finite_difference" else worst == 0.0
    return GradCheckReport(ok, mode, worst, errors)


def _poly_reference(x):
    """Branch-by-branch evaluation of the activation surrogate, kept apart from quantize."""
    out = np.zeros_like(x, dtype=np.float64)
    for idx, v in np.ndenumerate(x):
        if -1 <= v < 0:
            out[idx] = 2 + 2 * v
        elif 0 <= v < 1:
            out[idx] = 2 - 2 * v
    return out
