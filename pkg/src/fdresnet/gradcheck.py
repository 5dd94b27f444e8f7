"""Finite-difference gradient checks over every layer type and a one-block model."""

from __future__ import annotations

import numpy as np

from .filters import GaussianFilter, GaussianSpec, PassMode
from .layers import BatchNorm2d, Conv2d, Linear, cross_entropy, init_parameters, max_pool2d
from .models import ModelConfig, build_model
from .tensor import Tensor, finite_diff_check, precision

__all__ = ["one_block_config", "model_gradcheck", "gradcheck_report"]


def one_block_config(base: ModelConfig | None = None, num_classes: int = 3) -> ModelConfig:
    """A single-bottleneck network with the filter settings of ``base``."""
    d = base.to_dict() if base is not None else ModelConfig(
        low=GaussianSpec(3, 1.0, False, PassMode.LOW),
        high=GaussianSpec(3, 1.0, False, PassMode.HIGH),
    ).to_dict()
    d.update(stage_block_counts=[1], stage_channels=[8], stem_channels=4, stem_kernel=3,
             stem_stride=1, stem_pool=False, bottleneck_ratio=4, num_classes=num_classes,
             in_channels=d.get("in_channels", 3))
    return ModelConfig(**d)


def model_gradcheck(cfg: ModelConfig, seed: int = 0, batch: int = 2, size: int = 8, eps: float = 1e-5):
    """Max relative error over every parameter of ``cfg``'s model (64-bit, train-mode BN)."""
    with precision("float64"):
        model = build_model(cfg, seed=seed)
        model.train()
        rng = np.random.default_rng(seed + 1)
        x = Tensor(rng.normal(size=(batch, cfg.in_channels, size, size)))
        y = rng.integers(0, cfg.num_classes, size=batch)
        return finite_diff_check(lambda: cross_entropy(model(x), y), model.parameters(), eps=eps)


def _layer_checks(seed: int) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    out = []
    with precision("float64"):
        conv = Conv2d(2, 3, 3, stride=1, padding=1)
        init_parameters(conv, seed)
        x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
        r = Tensor(rng.normal(size=(1, 3, 5, 5)))
        out.append(("conv2d 3x3", finite_diff_check(lambda: (conv(x) * r).sum(), [x, conv.weight])))

        conv_s = Conv2d(2, 3, 3, stride=2, padding=1, padding_mode="reflect", bias=True)
        init_parameters(conv_s, seed)
        conv_s.bias.data[...] = rng.normal(size=3)
        r2 = Tensor(rng.normal(size=(1, 3, 3, 3)))
        out.append(("conv2d stride2 reflect+bias",
                    finite_diff_check(lambda: (conv_s(x) * r2).sum(), [x, conv_s.weight, conv_s.bias])))

        bn = BatchNorm2d(3)
        bn.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
        bn.beta.data[...] = rng.normal(size=3)
        xb = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        rb = Tensor(rng.normal(size=(4, 3, 3, 3)))
        out.append(("batchnorm2d train", finite_diff_check(lambda: (bn(xb) * rb).sum(),
                                                          [xb, bn.gamma, bn.beta])))
        bn.eval()
        out.append(("batchnorm2d eval", finite_diff_check(lambda: (bn(xb) * rb).sum(),
                                                         [xb, bn.gamma, bn.beta])))

        xp = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        rp = Tensor(rng.normal(size=(2, 2, 2, 2)))
        out.append(("max_pool2d", finite_diff_check(lambda: (max_pool2d(xp, 2) * rp).sum(), [xp])))

        lin = Linear(5, 4)
        init_parameters(lin, seed)
        xl = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        yl = np.array([0, 3, 1])
        out.append(("linear+cross_entropy",
                    finite_diff_check(lambda: cross_entropy(lin(xl), yl), [xl, lin.weight, lin.bias])))

        xr = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        rr = Tensor(rng.normal(size=(2, 3)))
        out.append(("relu", finite_diff_check(lambda: (xr.relu() * rr).sum(), [xr])))

        for mode in (PassMode.LOW, PassMode.HIGH):
            f = GaussianFilter(GaussianSpec(5, 1.0, True, mode))
            xf = Tensor(rng.normal(size=(1, 2, 6, 6)), requires_grad=True)
            rf = Tensor(rng.normal(size=(1, 2, 6, 6)))
            out.append((f"gaussian {mode.value}-pass trainable",
                        finite_diff_check(lambda: (f(xf) * rf).sum(), [xf, f.sigma_raw])))
    return out


def gradcheck_report(base: ModelConfig | None = None, seed: int = 0) -> list[dict]:
    rows = [{"check": name, "max_rel_error": float(err)} for name, err in _layer_checks(seed)]
    cfg = one_block_config(base)
    rows.append({"check": f"one-block {cfg.variant} model", "max_rel_error": float(model_gradcheck(cfg, seed))})
    return rows
