"""Weight and activation binarizers with their surrogate gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ShapeError
from .tensorcore import BitPlane, check_float, pack_signs


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign in the input dtype, with ``sign(0) = +1``."""
    x = np.asarray(x)
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def filter_scale(w: np.ndarray) -> np.ndarray:
    """Mean absolute value of each output filter (axis 0)."""
    w = np.asarray(w)
    return np.abs(w).reshape(w.shape[0], -1).mean(axis=1)


@dataclass(frozen=True)
class QuantizedWeights:
    """Derived view of a shadow weight tensor: packed signs plus per-filter scale."""

    bits: BitPlane
    filter_scale: np.ndarray
    shadow: np.ndarray

    @property
    def shape(self):
        return self.shadow.shape

    def dense(self) -> np.ndarray:
        """``filter_scale[c] * sign(shadow[c])`` as a float tensor."""
        s = self.filter_scale.reshape((-1,) + (1,) * (self.shadow.ndim - 1))
        return s * sign(self.shadow)


def binarize_weights(w) -> QuantizedWeights:
    w = check_float(w, "weights")
    if w.ndim < 1:
        raise ShapeError("weights need an output-filter axis")
    return QuantizedWeights(pack_signs(w), filter_scale(w), w)


def weight_grad_ste(upstream, shadow=None, clip: bool = False) -> np.ndarray:
    """Straight-through gradient: the gradient w.r.t. the signs passes unchanged.

    With ``clip=True`` the gradient is zeroed where ``|shadow| > 1`` (off by
    default; the plain estimator does not clip).
    """
    g = np.asarray(upstream)
    if shadow is not None:
        shadow = np.asarray(shadow)
        if shadow.shape != g.shape:
            raise ShapeError(f"upstream shape {g.shape} != shadow shape {shadow.shape}")
        if clip:
            return np.where(np.abs(shadow) <= 1, g, 0).astype(g.dtype)
    elif clip:
        raise ShapeError("clipping needs the shadow weights")
    return g


def binarize_activations(x) -> BitPlane:
    return pack_signs(x)


def poly_sign_derivative(x: np.ndarray) -> np.ndarray:
    """Piecewise-linear surrogate for d sign(x)/dx.

    ``2 + 2x`` on ``[-1, 0)``, ``2 - 2x`` on ``[0, 1)`` and zero elsewhere.
    """
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    # max(0, 2 - 2|x|) equals both linear pieces and is zero outside [-1, 1)
    return np.maximum(0, 2 - 2 * np.abs(x)).astype(x.dtype, copy=False)


def activation_grad_poly(x, upstream) -> np.ndarray:
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if x.shape != upstream.shape:
        raise ShapeError(f"activation shape {x.shape} != upstream shape {upstream.shape}")
    return upstream * poly_sign_derivative(x)
