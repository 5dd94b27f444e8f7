"""Gaussian low-pass / high-pass operators for the frequency skip connections.

The low pass is a depthwise separable Gaussian blur with half-sample reflect
padding (edge pixel repeated, numpy "symmetric"), which keeps every image sum.  The
high pass is its complement, ``x - low_pass(x)``, so the two outputs always sum
back to the input.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .layers import Module
from .tensor import Function, Parameter, ShapeError, Tensor, get_default_dtype, softplus_np

__all__ = [
    "PassMode",
    "GaussianSpec",
    "gaussian_kernel_1d",
    "gaussian_kernel_tensor",
    "filter_separable",
    "low_pass",
    "high_pass",
    "effective_sigma",
    "inverse_softplus",
    "GaussianFilter",
]

ALLOWED_SIZES = (1, 3, 5, 7)


class PassMode(str, enum.Enum):
    LOW = "low"
    HIGH = "high"


@dataclass
class GaussianSpec:
    kernel_size: int = 3
    sigma: float = 1.0
    sigma_trainable: bool = False
    mode: PassMode = PassMode.LOW

    def __post_init__(self):
        self.mode = PassMode(self.mode)
        if self.kernel_size not in ALLOWED_SIZES:
            raise ValueError(f"kernel_size must be one of {ALLOWED_SIZES}, got {self.kernel_size}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    def to_dict(self) -> dict:
        return {
            "kernel_size": self.kernel_size,
            "sigma": self.sigma,
            "sigma_trainable": self.sigma_trainable,
            "mode": self.mode.value,
        }


def gaussian_kernel_1d(size: int, sigma: float, dtype=np.float64) -> np.ndarray:
    """Normalized 1-D Gaussian weights centred on ``(size - 1) / 2``."""
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    c = (size - 1) // 2
    offsets = np.arange(size, dtype=np.float64) - c
    w = np.exp(-(offsets**2) / (2.0 * float(sigma) ** 2))
    w = w / w.sum()
    return w.astype(dtype)


def gaussian_kernel_tensor(size: int, sigma: Tensor) -> Tensor:
    """Differentiable kernel built from a (1,)-shaped sigma tensor."""
    c = (size - 1) // 2
    sq = Tensor((np.arange(size, dtype=np.float64) - c) ** 2, dtype=sigma.dtype)
    w = ((sq / (sigma * sigma * 2.0)) * -1.0).exp()
    return w / w.sum()


def inverse_softplus(value: float, dtype=np.float64) -> np.ndarray:
    """Raw parameter whose softplus reproduces ``value`` (bit-exact when attainable)."""
    dtype = np.dtype(dtype)
    target = dtype.type(value)
    raw = dtype.type(math.log(math.expm1(float(value))))
    best = raw
    best_err = abs(softplus_np(np.array(raw, dtype=dtype)) - target)
    cand = raw
    for direction in (np.inf, -np.inf):
        cand = raw
        for _ in range(64):
            err = abs(softplus_np(np.array(cand, dtype=dtype)) - target)
            if err < best_err:
                best, best_err = cand, err
            if best_err == 0:
                return np.array([best], dtype=dtype)
            cand = np.nextafter(cand, dtype.type(direction))
    return np.array([best], dtype=dtype)


def _fold_symmetric(g: np.ndarray, pad: int, axis: int) -> np.ndarray:
    """Adjoint of numpy 'symmetric' padding of width ``pad`` along ``axis``."""
    g = np.moveaxis(g, axis, -1)
    n = g.shape[-1] - 2 * pad
    out = g[..., pad:pad + n].copy()
    out[..., :pad] += g[..., :pad][..., ::-1]
    out[..., n - pad:] += g[..., pad + n:][..., ::-1]
    return np.moveaxis(out, -1, axis)


class _SeparableFilter(Function):
    """Correlate along ``axis`` with a normalized 1-D kernel after half-sample reflect padding.

    Evaluated as ``x + sum_{i != c} w_i (x_i - x)`` so the centre weight is
    implied by normalization: any window of equal values is reproduced exactly.
    """

    def forward(self, x, kernel, axis):
        k = kernel.shape[0]
        pad = (k - 1) // 2
        n = x.shape[axis]
        self.axis, self.pad, self.n = axis, pad, n
        self.kernel = kernel
        if not pad:
            return x.copy()
        widths = [(0, 0)] * x.ndim
        widths[axis] = (pad, pad)
        xp = np.pad(x, widths, mode="symmetric")
        self.xp, self.x = xp, x
        out = x.copy()
        for i in range(k):
            if i != pad:
                out += kernel[i] * (xp[self._window(i, x.ndim)] - x)
        return out

    def _window(self, i, ndim):
        idx = [slice(None)] * ndim
        idx[self.axis] = slice(i, i + self.n)
        return tuple(idx)

    def backward(self, g):
        k = self.kernel.shape[0]
        want_gk = self.parents[1].requires_grad
        gk = np.zeros(k, dtype=g.dtype) if want_gk else None
        if not self.pad:
            return g, gk
        gp_shape = list(g.shape)
        gp_shape[self.axis] += 2 * self.pad
        gp = np.zeros(gp_shape, dtype=g.dtype)
        centre = np.ones((), dtype=g.dtype)
        for i in range(k):
            if i == self.pad:
                continue
            win = self._window(i, g.ndim)
            gp[win] += self.kernel[i] * g
            centre -= self.kernel[i]
            if want_gk:
                gk[i] = np.vdot(g, self.xp[win] - self.x)
        gp[self._window(self.pad, g.ndim)] += centre * g
        gx = _fold_symmetric(gp, self.pad, self.axis)
        return gx, gk


def filter_separable(x: Tensor, kernel: Tensor) -> Tensor:
    """Apply the same normalized 1-D kernel along W then H, independently per channel."""
    if x.ndim != 4:
        raise ShapeError(f"expected [N,C,H,W], got {x.shape}")
    pad = (kernel.shape[0] - 1) // 2
    if pad and min(x.shape[2:]) < pad:
        raise ShapeError(
            f"spatial dims {x.shape[2:]} too small for reflect padding {pad} (kernel {kernel.shape[0]})"
        )
    out = _SeparableFilter.apply(x, kernel, axis=3)
    return _SeparableFilter.apply(out, kernel, axis=2)


def _as_kernel(spec: GaussianSpec, dtype) -> Tensor:
    return Tensor(gaussian_kernel_1d(spec.kernel_size, spec.sigma), dtype=dtype)


def low_pass(x: Tensor, spec: GaussianSpec, kernel: Tensor | None = None) -> Tensor:
    if spec.mode is not PassMode.LOW:
        raise ValueError("low_pass needs a LowPass spec")
    kernel = kernel if kernel is not None else _as_kernel(spec, x.dtype)
    return filter_separable(x, kernel)


def high_pass(x: Tensor, spec: GaussianSpec, kernel: Tensor | None = None) -> Tensor:
    if spec.mode is not PassMode.HIGH:
        raise ValueError("high_pass needs a HighPass spec")
    kernel = kernel if kernel is not None else _as_kernel(spec, x.dtype)
    return x - filter_separable(x, kernel)


def effective_sigma(raw: Tensor) -> Tensor:
    """Positive sigma from its unconstrained raw parameter."""
    return raw.softplus()


class GaussianFilter(Module):
    """Fixed or trainable Gaussian low/high-pass filter applied in a skip path."""

    def __init__(self, spec: GaussianSpec):
        super().__init__()
        self.spec = spec
        dtype = get_default_dtype()
        if spec.sigma_trainable:
            self.sigma_raw = Parameter(inverse_softplus(spec.sigma, dtype), dtype=dtype, decay=False)
        else:
            self._kernel = Tensor(gaussian_kernel_1d(spec.kernel_size, spec.sigma), dtype=dtype)

    def sigma(self) -> float:
        if self.spec.sigma_trainable:
            return float(softplus_np(self.sigma_raw.data)[0])
        return float(self.spec.sigma)

    def kernel(self) -> Tensor:
        if self.spec.sigma_trainable:
            return gaussian_kernel_tensor(self.spec.kernel_size, effective_sigma(self.sigma_raw))
        return self._kernel

    def forward(self, x):
        k = self.kernel()
        if k.dtype != x.dtype:
            k = Tensor(k.data, dtype=x.dtype) if not k.requires_grad else k
        if self.spec.mode is PassMode.LOW:
            return low_pass(x, self.spec, k)
        return high_pass(x, self.spec, k)
