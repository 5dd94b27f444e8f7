"""Trainable layers and losses shared by the residual block variants."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Function, Parameter, ShapeError, Tensor, get_default_dtype, matmul

__all__ = [
    "Module",
    "Sequential",
    "Conv2d",
    "BatchNorm2d",
    "Linear",
    "ReLULayer",
    "pad2d",
    "conv2d",
    "batchnorm2d",
    "relu",
    "max_pool2d",
    "global_avg_pool",
    "cross_entropy",
    "init_parameters",
    "BN_EPS",
    "BN_MOMENTUM",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Module:
    """Minimal container that tracks parameters, buffers and sub-modules in declaration order."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)
        object.__setattr__(self, "name", "")

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        if key not in self._buffers:
            raise KeyError(key)
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def __call__(self, x, *args, **kwargs):
        out = self.forward(x, *args, **kwargs)
        recorder = _TAPS.get("active")
        if recorder is not None and self.name in recorder:
            recorder[self.name] = out
        return out

    def forward(self, x):  # pragma: no cover
        raise NotImplementedError

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, mod in self._modules.items():
            yield from mod.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._params.items():
            yield (f"{prefix}.{key}" if prefix else key), p
        for key, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}.{key}" if prefix else key)

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, b in self._buffers.items():
            yield (f"{prefix}.{key}" if prefix else key), b
        for key, mod in self._modules.items():
            yield from mod.named_buffers(f"{prefix}.{key}" if prefix else key)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def assign_names(self) -> None:
        for qualified, mod in self.named_modules():
            object.__setattr__(mod, "name", qualified)

    def train(self) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", True)
        return self

    def eval(self) -> "Module":
        for _, mod in self.named_modules():
            object.__setattr__(mod, "training", False)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


# Active tap recorder: a dict keyed by module name, filled during forward.
_TAPS: dict = {}


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x):
        for mod in self._modules.values():
            x = mod(x)
        return x


# -- functional primitives ------------------------------------------------------

def _fold_reflect(g: np.ndarray, pad: int, axis: int) -> np.ndarray:
    """Adjoint of numpy 'reflect' padding of width ``pad`` along ``axis``."""
    g = np.moveaxis(g, axis, -1)
    n = g.shape[-1] - 2 * pad
    out = g[..., pad:pad + n].copy()
    if pad:
        out[..., 1:pad + 1] += g[..., :pad][..., ::-1]
        out[..., n - 1 - pad:n - 1] += g[..., pad + n:][..., ::-1]
    return np.moveaxis(out, -1, axis)


class Pad2d(Function):
    def forward(self, x, pad, mode):
        self.pad, self.mode = pad, mode
        widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
        return np.pad(x, widths, mode="constant" if mode == "zeros" else "reflect")

    def backward(self, g):
        p = self.pad
        if self.mode == "zeros":
            return (np.ascontiguousarray(g[..., p:g.shape[-2] - p, p:g.shape[-1] - p]),)
        g = _fold_reflect(g, p, -1)
        g = _fold_reflect(g, p, -2)
        return (g,)


def pad2d(x: Tensor, pad: int, mode: str = "zeros") -> Tensor:
    if pad == 0:
        return x
    if mode not in ("zeros", "reflect"):
        raise ValueError(f"unknown padding mode {mode!r}")
    if mode == "reflect" and min(x.shape[-2:]) <= pad:
        raise ShapeError(f"reflect padding {pad} needs spatial dims > {pad}, got {x.shape[-2:]}")
    return Pad2d.apply(x, pad=pad, mode=mode)


class Im2Col(Function):
    """[N,C,H,W] -> [N*OH*OW, C*kh*kw] patch matrix (no padding)."""

    def forward(self, x, kh, kw, stride):
        n, c, h, w = x.shape
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        self.meta = (x.shape, kh, kw, stride, oh, ow)
        sn, sc, sh, sw = x.strides
        patches = np.lib.stride_tricks.as_strided(
            x,
            shape=(n, oh, ow, c, kh, kw),
            strides=(sn, sh * stride, sw * stride, sc, sh, sw),
            writeable=False,
        )
        return patches.reshape(n * oh * ow, c * kh * kw)

    def backward(self, g):
        (n, c, h, w), kh, kw, stride, oh, ow = self.meta
        cols = g.reshape(n, oh, ow, c, kh, kw)
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        return (dx,)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    padding_mode: str = "zeros",
) -> Tensor:
    """Cross-correlation as padding + im2col + matmul."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if c != in_c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {in_c}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output size ({oh},{ow}) is not positive for input {x.shape}")
    xp = pad2d(x, padding, padding_mode)
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.transpose(0, 2, 3, 1).reshape(n * oh * ow, c)
    else:
        cols = Im2Col.apply(xp, kh=kh, kw=kw, stride=stride)
    out = matmul(cols, weight.reshape(out_c, in_c * kh * kw).T)
    if bias is not None:
        out = out + bias
    return out.reshape(n, oh, ow, out_c).transpose(0, 3, 1, 2)


class BatchNormTrain(Function):
    def forward(self, x, gamma, beta, eps):
        axes = (0, 2, 3)
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = (x - mean) * self.inv_std
        self.gamma = gamma.reshape(1, -1, 1, 1)
        self.batch_mean = mean.reshape(-1)
        self.batch_var = var.reshape(-1)
        return self.xhat * self.gamma + beta.reshape(1, -1, 1, 1)

    def backward(self, g):
        axes = (0, 2, 3)
        m = g.size // g.shape[1]
        dbeta = g.sum(axis=axes)
        dgamma = (g * self.xhat).sum(axis=axes)
        dxhat = g * self.gamma
        dx = (self.inv_std / m) * (
            m * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - self.xhat * (dxhat * self.xhat).sum(axis=axes, keepdims=True)
        )
        return dx, dgamma, dbeta


class BatchNormEval(Function):
    def forward(self, x, gamma, beta, mean, var, eps):
        inv_std = 1.0 / np.sqrt(var + eps)
        self.scale = (gamma * inv_std).reshape(1, -1, 1, 1)
        self.xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        return self.xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)

    def backward(self, g):
        axes = (0, 2, 3)
        return g * self.scale, (g * self.xhat).sum(axis=axes), g.sum(axis=axes)


def batchnorm2d(x: Tensor, layer: "BatchNorm2d", mode: str | None = None) -> Tensor:
    """Batch normalization; ``mode`` defaults to the layer's train/eval state."""
    mode = mode or ("train" if layer.training else "eval")
    if x.ndim != 4 or x.shape[1] != layer.num_features:
        raise ShapeError(f"batchnorm2d expects [N,{layer.num_features},H,W], got {x.shape}")
    if mode == "train":
        n, _, h, w = x.shape
        if n * h * w < 2:
            raise ShapeError("train-mode batch norm needs at least 2 values per channel")
        fn = BatchNormTrain()
        out = _apply_fn(fn, (x, layer.gamma, layer.beta), eps=layer.eps)
        unbiased = fn.batch_var * (n * h * w) / (n * h * w - 1)
        mom = layer.momentum
        layer.set_buffer(
            "running_mean", ((1 - mom) * layer.running_mean + mom * fn.batch_mean).astype(x.dtype)
        )
        layer.set_buffer(
            "running_var", ((1 - mom) * layer.running_var + mom * unbiased).astype(x.dtype)
        )
        return out
    if mode != "eval":
        raise ValueError(f"unknown batch norm mode {mode!r}")
    return BatchNormEval.apply(
        x,
        layer.gamma,
        layer.beta,
        mean=layer.running_mean.astype(x.dtype),
        var=layer.running_var.astype(x.dtype),
        eps=layer.eps,
    )


def _apply_fn(fn: Function, tensors, **kwargs) -> Tensor:
    # Like Function.apply but keeps the instance so callers can read saved statistics.
    from .tensor import is_grad_enabled

    out = fn.forward(*(t.data for t in tensors), **kwargs)
    needs_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
    result = Tensor(out, requires_grad=needs_grad, dtype=out.dtype)
    if needs_grad:
        fn.parents = tuple(tensors)
        result._ctx = fn
    return result


def relu(x: Tensor) -> Tensor:
    return x.relu()


class MaxPool2d(Function):
    def forward(self, x, k, stride):
        n, c, h, w = x.shape
        oh = (h - k) // stride + 1
        ow = (w - k) // stride + 1
        sn, sc, sh, sw = x.strides
        win = np.lib.stride_tricks.as_strided(
            x, shape=(n, c, oh, ow, k, k), strides=(sn, sc, sh * stride, sw * stride, sh, sw)
        ).reshape(n, c, oh, ow, k * k)
        self.arg = win.argmax(axis=-1)
        self.meta = (x.shape, k, stride, oh, ow)
        return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        (n, c, h, w), k, stride, oh, ow = self.meta
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        di, dj = np.divmod(self.arg, k)
        rows = np.arange(oh)[None, None, :, None] * stride + di
        cols = np.arange(ow)[None, None, None, :] * stride + dj
        nn_idx = np.arange(n)[:, None, None, None]
        cc_idx = np.arange(c)[None, :, None, None]
        np.add.at(dx, (nn_idx, cc_idx, rows, cols), g)
        return (dx,)


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = stride or k
    if k > x.shape[-2] or k > x.shape[-1]:
        raise ShapeError(f"pooling window {k} larger than input {x.shape[-2:]}")
    return MaxPool2d.apply(x, k=k, stride=stride)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


class CrossEntropy(Function):
    def forward(self, logits, labels):
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - lse
        self.probs = np.exp(logp)
        self.labels = labels
        n = logits.shape[0]
        return np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.dtype)

    def backward(self, g):
        n = self.probs.shape[0]
        d = self.probs.copy()
        d[np.arange(n), self.labels] -= 1.0
        return (d * (g / n),)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits [N,K] and N labels, got {logits.shape}, {labels.shape}")
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0,{k}): {labels.min()}..{labels.max()}")
    return CrossEntropy.apply(logits, labels=labels)


# -- layers ----------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0, padding_mode="zeros", bias=False):
        super().__init__()
        if kernel_size < 1 or stride < 1 or padding < 0:
            raise ValueError("kernel_size and stride must be >= 1, padding >= 0")
        dtype = get_default_dtype()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.stride, self.padding, self.padding_mode = stride, padding, padding_mode
        self.weight = Parameter(np.zeros((out_ch, in_ch, kernel_size, kernel_size)), dtype=dtype)
        self.bias = Parameter(np.zeros(out_ch), dtype=dtype) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.padding_mode)


class BatchNorm2d(Module):
    def __init__(self, num_features, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        dtype = get_default_dtype()
        self.num_features, self.eps, self.momentum = num_features, eps, momentum
        self.gamma = Parameter(np.ones(num_features), dtype=dtype)
        self.beta = Parameter(np.zeros(num_features), dtype=dtype)
        self.register_buffer("running_mean", np.zeros(num_features, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_features, dtype=dtype))

    def forward(self, x):
        return batchnorm2d(x, self)


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        dtype = get_default_dtype()
        self.weight = Parameter(np.zeros((out_features, in_features)), dtype=dtype)
        self.bias = Parameter(np.zeros(out_features), dtype=dtype) if bias else None

    def forward(self, x):
        out = matmul(x, self.weight.T)
        return out + self.bias if self.bias is not None else out


class ReLULayer(Module):
    def forward(self, x):
        return x.relu()


def init_parameters(model: Module, seed: int) -> None:
    """He-normal conv/linear weights, zero biases, unit BN scale, zero BN shift."""
    rng = np.random.default_rng(seed)
    for _, mod in model.named_modules():
        if isinstance(mod, (Conv2d, Linear)):
            w = mod.weight
            fan_in = int(np.prod(w.shape[1:]))
            w.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
            if mod.bias is not None:
                mod.bias.data[...] = 0.0
        elif isinstance(mod, BatchNorm2d):
            mod.gamma.data[...] = 1.0
            mod.beta.data[...] = 0.0
            mod.set_buffer("running_mean", np.zeros_like(mod.running_mean))
            mod.set_buffer("running_var", np.ones_like(mod.running_var))
