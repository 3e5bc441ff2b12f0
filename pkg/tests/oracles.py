"""Slow, obviously-correct reference implementations used only by the tests.

Nothing here imports the package: every oracle is written from the
definitions so a shared bug cannot make both sides agree.
"""
import itertools

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64_stream(seed, n):
    """Reference splitmix64: state += golden gamma, then the two xor-shift-multiply rounds."""
    out, state = [], seed & MASK64
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        out.append(z ^ (z >> 31))
    return out


def sign(x):
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def pm1_dot(a, b):
    return int(sum(int(x) * int(y) for x, y in zip(a, b)))


def naive_conv(x, w, stride=1, pad=0, pad_value=-1.0):
    """Loop-nest cross-correlation of (C, H, W) with (O, C, kh, kw)."""
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.full((c, h + 2 * pad, wd + 2 * pad), pad_value, dtype=np.float64)
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for f in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[f, ci, u, v] * xp[ci, i * stride + u, j * stride + v]
                out[f, i, j] = acc
    return out


def float_conv_nchw(x, w, stride=1, pad=0, pad_value=0.0):
    """Batched cross-correlation by explicit tap accumulation (no im2col, no torch)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.full((n, c, h + 2 * pad, wd + 2 * pad), pad_value, dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            patch = xp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, u, v])
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def poly_surrogate_sympy():
    """The activation surrogate as a sympy Piecewise, lambdified to numpy."""
    import sympy as sp

    x = sp.Symbol("x", real=True)
    d = sp.Piecewise((2 + 2 * x, (x >= -1) & (x < 0)), (2 - 2 * x, (x >= 0) & (x < 1)), (0, True))
    return x, d, sp.lambdify(x, d, "numpy")


def fixedpoint_decode(bits):
    """Planes given as lists of +-1 ints, plane i weighted 2^i."""
    return [sum((1 << i) * plane[m] for i, plane in enumerate(bits)) for m in range(len(bits[0]))]


def confusion(gt, pred, k):
    cm = np.zeros((k, k), dtype=np.int64)
    for g, p in zip(np.ravel(gt), np.ravel(pred)):
        cm[int(g), int(p)] += 1
    return cm


def miou_from_confusion(cm):
    ious = []
    for i in range(cm.shape[0]):
        inter = cm[i, i]
        union = cm[i, :].sum() + cm[:, i].sum() - inter
        if union:
            ious.append(inter / union)
    return float(np.mean(ious))


def maxf_bruteforce(probs, gt, beta2=0.3):
    probs = np.ravel(probs).astype(np.float64)
    gt = np.ravel(gt).astype(bool)
    best = 0.0
    for i in range(1, 256):
        pred = probs >= i / 255.0
        tp = np.sum(pred & gt)
        fp = np.sum(pred & ~gt)
        fn = np.sum(~pred & gt)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = (1 + beta2) * p * r / (beta2 * p + r) if beta2 * p + r else 0.0
        best = max(best, f)
    return best


def all_pm1(m):
    return [list(t) for t in itertools.product((-1, 1), repeat=m)]


class SplitMixRef:
    """Scalar splitmix64 stream with the 53-bit uniform mapping."""

    def __init__(self, seed):
        self.state = seed & MASK64

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def random(self):
        return (self.next() >> 11) / float(1 << 53)


def synthetic_sample(seed, index, size):
    """Scalar re-derivation of the documented synthetic-sample draw order."""
    gamma = 0x9E3779B97F4A7C15
    rng = SplitMixRef(seed ^ ((index * gamma) & MASK64))
    g = 5
    grid = [[[0.15 + 0.7 * rng.random() for _ in range(g)] for _ in range(g)] for _ in range(3)]

    def lerp_coords(i):
        t = i * (g - 1) / (size - 1)
        i0 = min(int(np.floor(t)), g - 2)
        return i0, t - i0

    img = np.zeros((3, size, size))
    for c in range(3):
        for y in range(size):
            y0, fy = lerp_coords(y)
            for x in range(size):
                x0, fx = lerp_coords(x)
                top = grid[c][y0][x0] * (1 - fx) + grid[c][y0][x0 + 1] * fx
                bot = grid[c][y0 + 1][x0] * (1 - fx) + grid[c][y0 + 1][x0 + 1] * fx
                img[c, y, x] = top * (1 - fy) + bot * fy
    for c in range(3):
        for y in range(size):
            for x in range(size):
                img[c, y, x] += 0.08 * (rng.random() - 0.5)
    bg = img.mean(axis=(1, 2))

    def inside(kind, cy, cx, ry, rx, py, px):
        if kind == 0:
            return abs(py - cy) <= ry and abs(px - cx) <= rx
        return ((py - cy) / ry) ** 2 + ((px - cx) / rx) ** 2 <= 1.0

    while True:
        shapes = []
        for _ in range(1 + int(rng.random() * 3)):
            kind = int(rng.random() * 2)
            cy = size * (0.15 + (0.85 - 0.15) * rng.random())
            cx = size * (0.15 + (0.85 - 0.15) * rng.random())
            ry = size * (0.08 + (0.3 - 0.08) * rng.random())
            rx = size * (0.08 + (0.3 - 0.08) * rng.random())
            while True:
                colour = np.array([rng.random() for _ in range(3)])
                if np.abs(colour - bg).mean() >= 0.3:
                    break
            shapes.append((kind, cy, cx, ry, rx, colour))
        mask = np.array([[any(inside(*s[:5], y + 0.5, x + 0.5) for s in shapes) for x in range(size)]
                         for y in range(size)])
        if 0.02 < mask.mean() < 0.6:
            break
    sub = [(k + 0.5) / 4 for k in range(4)]
    for kind, cy, cx, ry, rx, colour in shapes:
        for y in range(size):
            for x in range(size):
                cover = sum(inside(kind, cy, cx, ry, rx, y + a, x + b) for a in sub for b in sub) / 16
                img[:, y, x] = img[:, y, x] * (1 - cover) + colour * cover
    return np.clip(img, 0, 1).astype(np.float32), mask.astype(np.int32)
