"""Bottleneck ResNet / FDResNet assembly, activation taps and checkpoints."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from .filters import GaussianFilter, GaussianSpec, PassMode
from .layers import BatchNorm2d, Conv2d, Linear, Module, Sequential
from .tensor import Tensor, as_tensor

__all__ = [
    "SkipVariant",
    "BlockConfig",
    "ModelConfig",
    "Projection",
    "Bottleneck",
    "Stem",
    "ResNet",
    "build_block",
    "build_model",
    "preset",
    "PRESETS",
    "forward_with_taps",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class SkipVariant(str, enum.Enum):
    IDENTITY = "identity"
    PROJECTION = "projection"
    FREQUENCY_DUAL = "frequency_dual"
    FREQUENCY_LOW_ONLY = "frequency_low_only"
    FREQUENCY_HIGH_ONLY = "frequency_high_only"


@dataclass
class BlockConfig:
    in_ch: int
    mid_ch: int
    out_ch: int
    stride: int = 1
    skip: SkipVariant = SkipVariant.PROJECTION
    low: GaussianSpec | None = None
    high: GaussianSpec | None = None

    def __post_init__(self):
        self.skip = SkipVariant(self.skip)
        for key in ("in_ch", "mid_ch", "out_ch"):
            if getattr(self, key) < 1:
                raise ValueError(f"BlockConfig.{key} must be positive")
        if self.stride not in (1, 2):
            raise ValueError(f"BlockConfig.stride must be 1 or 2, got {self.stride}")
        if self.skip is SkipVariant.IDENTITY and (self.in_ch != self.out_ch or self.stride != 1):
            raise ValueError("BlockConfig.skip: identity needs in_ch == out_ch and stride == 1")
        needs_low = self.skip in (SkipVariant.FREQUENCY_DUAL, SkipVariant.FREQUENCY_LOW_ONLY)
        needs_high = self.skip in (SkipVariant.FREQUENCY_DUAL, SkipVariant.FREQUENCY_HIGH_ONLY)
        if needs_low and (self.low is None or self.low.mode is not PassMode.LOW):
            raise ValueError(f"BlockConfig.low: {self.skip.value} needs a LowPass GaussianSpec")
        if needs_high and (self.high is None or self.high.mode is not PassMode.HIGH):
            raise ValueError(f"BlockConfig.high: {self.skip.value} needs a HighPass GaussianSpec")


@dataclass
class ModelConfig:
    stage_block_counts: list = field(default_factory=lambda: [1, 1, 1, 1])
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    num_classes: int = 10
    variant: str = "fdresnet"
    low: GaussianSpec | None = None
    high: GaussianSpec | None = None
    single_path: str | None = None
    in_channels: int = 3
    stem_channels: int = 16
    stem_kernel: int = 3
    stem_stride: int = 1
    stem_pool: bool = False
    bottleneck_ratio: int = 4

    def __post_init__(self):
        self.stage_block_counts = [int(v) for v in self.stage_block_counts]
        self.stage_channels = [int(v) for v in self.stage_channels]
        if isinstance(self.low, dict):
            self.low = GaussianSpec(**self.low)
        if isinstance(self.high, dict):
            self.high = GaussianSpec(**self.high)
        if len(self.stage_block_counts) != len(self.stage_channels) or not self.stage_channels:
            raise ValueError("ModelConfig.stage_block_counts and stage_channels must be non-empty and equal length")
        if any(c < 1 for c in self.stage_block_counts):
            raise ValueError("ModelConfig.stage_block_counts entries must be >= 1")
        if any(c % self.bottleneck_ratio for c in self.stage_channels):
            raise ValueError("ModelConfig.stage_channels must be divisible by bottleneck_ratio")
        if self.num_classes < 1:
            raise ValueError("ModelConfig.num_classes must be positive")
        if self.variant not in ("resnet", "fdresnet"):
            raise ValueError(f"ModelConfig.variant must be 'resnet' or 'fdresnet', got {self.variant!r}")
        if self.single_path not in (None, "low", "high"):
            raise ValueError("ModelConfig.single_path must be null, 'low' or 'high'")
        if self.variant == "fdresnet":
            if self.single_path != "high" and self.low is None:
                raise ValueError("ModelConfig.low: fdresnet needs a low-pass GaussianSpec")
            if self.single_path != "low" and self.high is None:
                raise ValueError("ModelConfig.high: fdresnet needs a high-pass GaussianSpec")

    @property
    def skip_variant(self) -> SkipVariant:
        if self.variant == "resnet":
            return SkipVariant.PROJECTION
        return {
            None: SkipVariant.FREQUENCY_DUAL,
            "low": SkipVariant.FREQUENCY_LOW_ONLY,
            "high": SkipVariant.FREQUENCY_HIGH_ONLY,
        }[self.single_path]

    def to_dict(self) -> dict:
        return {
            "stage_block_counts": list(self.stage_block_counts),
            "stage_channels": list(self.stage_channels),
            "num_classes": self.num_classes,
            "variant": self.variant,
            "low": self.low.to_dict() if self.low else None,
            "high": self.high.to_dict() if self.high else None,
            "single_path": self.single_path,
            "in_channels": self.in_channels,
            "stem_channels": self.stem_channels,
            "stem_kernel": self.stem_kernel,
            "stem_stride": self.stem_stride,
            "stem_pool": self.stem_pool,
            "bottleneck_ratio": self.bottleneck_ratio,
        }

    def canonical_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def block_configs(self) -> list[list[BlockConfig]]:
        stages = []
        in_ch = self.stem_channels
        skip = self.skip_variant
        low = self.low if skip in (SkipVariant.FREQUENCY_DUAL, SkipVariant.FREQUENCY_LOW_ONLY) else None
        high = self.high if skip in (SkipVariant.FREQUENCY_DUAL, SkipVariant.FREQUENCY_HIGH_ONLY) else None
        for s, (count, out_ch) in enumerate(zip(self.stage_block_counts, self.stage_channels)):
            blocks = []
            for b in range(count):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(
                    BlockConfig(in_ch, out_ch // self.bottleneck_ratio, out_ch, stride, skip, low, high)
                )
                in_ch = out_ch
            stages.append(blocks)
        return stages


class Projection(Module):
    """Shortcut ``S(.)``: 1x1 convolution (carrying the stride) then batch norm."""

    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, 1, stride=stride)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x):
        return self.bn(self.conv(x))


class Bottleneck(Module):
    """1x1 -> 3x3 -> 1x1 bottleneck with identity, projection or frequency skips."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.conv1 = Conv2d(cfg.in_ch, cfg.mid_ch, 1)
        self.bn1 = BatchNorm2d(cfg.mid_ch)
        self.conv2 = Conv2d(cfg.mid_ch, cfg.mid_ch, 3, stride=cfg.stride, padding=1)
        self.bn2 = BatchNorm2d(cfg.mid_ch)
        self.conv3 = Conv2d(cfg.mid_ch, cfg.out_ch, 1)
        self.bn3 = BatchNorm2d(cfg.out_ch)
        v = cfg.skip
        if v is SkipVariant.PROJECTION:
            self.skip = Projection(cfg.in_ch, cfg.out_ch, cfg.stride)
        if v in (SkipVariant.FREQUENCY_DUAL, SkipVariant.FREQUENCY_LOW_ONLY):
            self.filter_low = GaussianFilter(cfg.low)
            self.skip_low = Projection(cfg.in_ch, cfg.out_ch, cfg.stride)
        if v in (SkipVariant.FREQUENCY_DUAL, SkipVariant.FREQUENCY_HIGH_ONLY):
            self.filter_high = GaussianFilter(cfg.high)
            self.skip_high = Projection(cfg.in_ch, cfg.out_ch, cfg.stride)

    def _shared_blur(self) -> bool:
        # Fixed identical kernels: the high pass reuses the low-pass blur.
        lo, hi = self.cfg.low, self.cfg.high
        return (
            not lo.sigma_trainable
            and not hi.sigma_trainable
            and lo.kernel_size == hi.kernel_size
            and lo.sigma == hi.sigma
        )

    def main(self, x):
        out = self.bn1(self.conv1(x)).relu()
        out = self.bn2(self.conv2(out)).relu()
        return self.bn3(self.conv3(out))

    def skip_outputs(self, x) -> list[Tensor]:
        v = self.cfg.skip
        if v is SkipVariant.IDENTITY:
            return [x]
        if v is SkipVariant.PROJECTION:
            return [self.skip(x)]
        if v is SkipVariant.FREQUENCY_DUAL and self._shared_blur():
            blurred = self.filter_low(x)
            return [self.skip_low(blurred), self.skip_high(x - blurred)]
        outs = []
        if v in (SkipVariant.FREQUENCY_DUAL, SkipVariant.FREQUENCY_LOW_ONLY):
            outs.append(self.skip_low(self.filter_low(x)))
        if v in (SkipVariant.FREQUENCY_DUAL, SkipVariant.FREQUENCY_HIGH_ONLY):
            outs.append(self.skip_high(self.filter_high(x)))
        return outs

    def forward(self, x):
        out = self.main(x)
        for s in self.skip_outputs(x):
            out = out + s
        return out.relu()


def build_block(cfg: BlockConfig) -> Bottleneck:
    block = Bottleneck(cfg)
    block.assign_names()
    return block


class Stem(Module):
    def __init__(self, in_ch, out_ch, kernel, stride, pool):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)
        self.bn = BatchNorm2d(out_ch)
        self.pool = pool

    def forward(self, x):
        out = self.bn(self.conv(x)).relu()
        if self.pool:
            out = L.max_pool2d(out, 3, 2)
        return out


class ResNet(Module):
    """Stem -> stacked bottleneck stages -> global average pool -> linear classifier."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = Stem(cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, cfg.stem_pool)
        self.stages = Sequential(
            *[Sequential(*[Bottleneck(b) for b in blocks]) for blocks in cfg.block_configs()]
        )
        self.fc = Linear(cfg.stage_channels[-1], cfg.num_classes)

    def features(self, x, mode: str | None = None) -> Tensor:
        if mode is not None:
            self.train() if mode == "train" else self.eval()
        x = as_tensor(x)
        return L.global_avg_pool(self.stages(self.stem(x)))

    def forward(self, x, mode: str | None = None) -> Tensor:
        return self.fc(self.features(x, mode))

    def blocks(self) -> list[Bottleneck]:
        return [m for _, m in self.named_modules() if isinstance(m, Bottleneck)]

    def sigma_values(self) -> dict[str, float]:
        return {
            name: m.sigma()
            for name, m in self.named_modules()
            if isinstance(m, GaussianFilter) and m.spec.sigma_trainable
        }


def build_model(cfg: ModelConfig, seed: int = 0) -> ResNet:
    model = ResNet(cfg)
    model.assign_names()
    L.init_parameters(model, seed)
    return model


def _spec_pair(kernel_low=3, kernel_high=3, sigma=1.0, trainable=False):
    return (
        GaussianSpec(kernel_low, sigma, trainable, PassMode.LOW),
        GaussianSpec(kernel_high, sigma, trainable, PassMode.HIGH),
    )


def _tiny(variant, num_classes=10, in_channels=3, **filter_kw):
    low, high = _spec_pair(**filter_kw) if variant == "fdresnet" else (None, None)
    return ModelConfig([1, 1, 1, 1], [16, 32, 64, 128], num_classes, variant, low, high,
                       in_channels=in_channels)


def _deep(variant, counts, num_classes=10, in_channels=3, **filter_kw):
    low, high = _spec_pair(**filter_kw) if variant == "fdresnet" else (None, None)
    return ModelConfig(counts, [256, 512, 1024, 2048], num_classes, variant, low, high,
                       in_channels=in_channels, stem_channels=64)


PRESETS = {
    "resnet_tiny": lambda **kw: _tiny("resnet", **kw),
    "fdresnet_tiny": lambda **kw: _tiny("fdresnet", **kw),
    "resnet50": lambda **kw: _deep("resnet", [3, 4, 6, 3], **kw),
    "fdresnet50": lambda **kw: _deep("fdresnet", [3, 4, 6, 3], **kw),
    "resnet101": lambda **kw: _deep("resnet", [3, 4, 23, 3], **kw),
    "fdresnet101": lambda **kw: _deep("fdresnet", [3, 4, 23, 3], **kw),
}


def preset(name: str, **kw) -> ModelConfig:
    """Named model config; keyword args: num_classes, in_channels, kernel_low, kernel_high, sigma, trainable."""
    if name not in PRESETS:
        raise KeyError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    if name.startswith("resnet"):
        for k in ("kernel_low", "kernel_high", "sigma", "trainable"):
            kw.pop(k, None)
    return PRESETS[name](**kw)


def forward_with_taps(model: Module, x, taps, mode: str | None = None):
    """Run ``model`` recording the outputs of the named sub-modules.

    Returns ``(logits, activations)``.  Tapped tensors stay on the tape, so after
    ``backward`` of any scalar their ``.grad`` holds the gradient at that point.
    The pseudo-tap ``"input"`` records the (gradient-enabled) input itself.
    """
    taps = list(taps)
    names = {name for name, _ in model.named_modules()}
    unknown = [t for t in taps if t not in names and t != "input"]
    if unknown:
        raise KeyError(f"unknown tap name(s): {unknown}")
    x = as_tensor(x)
    if "input" in taps:
        x = Tensor(x.data, requires_grad=True, dtype=x.dtype)
    recorder = {t: None for t in taps if t != "input"}
    previous = L._TAPS.get("active")
    L._TAPS["active"] = recorder
    try:
        logits = model.forward(x, mode) if mode is not None else model(x)
    finally:
        L._TAPS["active"] = previous
    acts = dict(recorder)
    if "input" in taps:
        acts["input"] = x
    return logits, acts


# -- checkpoints -------------------------------------------------------------------

MAGIC = b"FDRNCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _blobs(model: ResNet):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, b in model.named_buffers():
        yield name, b


def save_checkpoint(model: ResNet, path) -> None:
    """Write config header plus every parameter and buffer as little-endian float32."""
    cfg = model.cfg.canonical_text().encode("utf-8")
    blobs = list(_blobs(model))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<Q", arr.size))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    """Parse a checkpoint file into its model config and named float32 blobs."""
    raw = Path(path).read_bytes()
    try:
        return _parse_checkpoint(raw, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(raw: bytes, path):
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}")
    pos = 8
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (clen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    cfg = ModelConfig.from_dict(json.loads(raw[pos:pos + clen].decode("utf-8")))
    pos += clen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blobs = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (n,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        blobs[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).copy()
        pos += 4 * n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return cfg, blobs


def load_checkpoint(path, model: ResNet | None = None) -> ResNet:
    cfg, blobs = read_checkpoint(path)
    if model is None:
        model = build_model(cfg)
    elif model.cfg.canonical_text() != cfg.canonical_text():
        raise CheckpointError(f"{path}: checkpoint config does not match the model")
    expected = [name for name, _ in _blobs(model)]
    if expected != list(blobs):
        raise CheckpointError(f"{path}: parameter names/order differ from the model")
    for name, p in model.named_parameters():
        p.data[...] = blobs[name].reshape(p.shape)
    for modname, mod in model.named_modules():
        for key in list(mod._buffers):
            full = f"{modname}.{key}" if modname else key
            mod.set_buffer(key, blobs[full].reshape(mod._buffers[key].shape).astype(mod._buffers[key].dtype))
    return model
