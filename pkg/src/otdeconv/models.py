"""Network roles: deep deblurring generator, linear blur kernel, patch discriminators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class Module:
    """Minimal container: parameters are ``Tensor`` attributes, children are ``Module`` attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise ConfigError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, p in own.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv3d(Module):
    def __init__(self, cin: int, cout: int, ksize: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True):
        bound = 1.0 / math.sqrt(cin * ksize ** 3)
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin, ksize, ksize, ksize)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, cout), requires_grad=True) if bias else None
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        k = self.weight.shape[2]
        return T.conv3(x, self.weight, self.bias, padding=k // 2, stride=self.stride)


class InstanceNorm3d(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.instance_norm(x, self.weight, self.bias, self.eps)


class ConvBlock(Module):
    """Two rounds of conv -> instance norm -> ReLU."""

    def __init__(self, cin: int, cout: int, ksize: int, rng: np.random.Generator):
        self.conv1 = Conv3d(cin, cout, ksize, rng)
        self.norm1 = InstanceNorm3d(cout)
        self.conv2 = Conv3d(cout, cout, ksize, rng)
        self.norm2 = InstanceNorm3d(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = T.relu(self.norm1(self.conv1(x)))
        return T.relu(self.norm2(self.conv2(x)))


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 3
    base_channels: int = 16
    kernel_size: int = 3
    # initial head bias; a negative value starts the sigmoid near a dark background
    output_bias: float = 0.0

    def __post_init__(self):
        if self.depth < 2:
            raise ConfigError("generator depth must be at least 2")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigError("generator kernel size must be odd")

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)


class UNet3D(Module):
    """Encoder-decoder with average pooling, nearest upsampling, skip concatenation
    and a sigmoid on the final 1x1x1 projection."""

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator, in_channels: int = 1):
        self.config = config
        widths = [config.base_channels * 2 ** i for i in range(config.depth)]
        k = config.kernel_size
        self.down = [ConvBlock(in_channels if i == 0 else widths[i - 1], widths[i], k, rng)
                     for i in range(config.depth)]
        self.up = [ConvBlock(widths[i + 1] + widths[i], widths[i], k, rng)
                   for i in reversed(range(config.depth - 1))]
        self.head = Conv3d(widths[0], 1, 1, rng)
        self.head.bias.data = self.head.bias.data + config.output_bias

    def check_input(self, shape) -> None:
        div = self.config.divisor
        if len(shape) != 5 or any(n % div for n in shape[2:]):
            raise ShapeError(f"generator input extents {tuple(shape[2:])} must be divisible by {div}")

    def forward(self, x: Tensor) -> Tensor:
        self.check_input(x.shape)
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = T.avg_pool2(x)
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = block(T.concat([T.upsample2(x), skips.pop()], axis=1))
        return T.sigmoid(self.head(x))


class BlurKernel(Module):
    """Single learnable kernel ``h`` applied as a zero-padded 'same' convolution."""

    def __init__(self, extent=(9, 9, 9), rng: np.random.Generator | None = None,
                 init: np.ndarray | None = None, jitter: float | None = None, trainable: bool = True):
        extent = tuple(int(e) for e in extent)
        if len(extent) != 3 or any(e % 2 == 0 for e in extent):
            raise ConfigError(f"blur kernel extents must be odd, got {extent}")
        if init is None:
            data = np.zeros(extent)
            data[tuple(e // 2 for e in extent)] = 1.0
            sigma = 0.01 / extent[0] if jitter is None else jitter
            if rng is not None and sigma > 0:
                data = data + rng.normal(0.0, sigma, extent)
        else:
            data = np.array(init, dtype=np.float64)
            if data.shape != extent:
                raise ShapeError(f"kernel init shape {data.shape} != {extent}")
        self.h = Tensor(data, requires_grad=trainable)

    @property
    def trainable(self) -> bool:
        return self.h.requires_grad

    def forward(self, x: Tensor) -> Tensor:
        kernel = T.reshape(T.flip(self.h, axes=(0, 1, 2)), (1, 1) + self.h.shape)
        return T.conv3(x, kernel, padding="same")

    def project(self, nonneg: bool = False, unit_sum: bool = False) -> None:
        """Optional constraint projection after an optimizer step (ablation only)."""
        d = self.h.data
        if nonneg:
            d = np.clip(d, 0.0, None)
        if unit_sum and d.sum() != 0:
            d = d / d.sum()
        self.h.data = d


@dataclass(frozen=True)
class DiscriminatorConfig:
    base_channels: int = 16
    strides: tuple[int, int, int] = (2, 2, 1)
    scales: int = 3

    @property
    def divisor(self) -> int:
        return 2 ** (self.scales - 1)


class PatchDiscriminator(Module):
    """Three conv blocks ending in a linear one-channel score map."""

    def __init__(self, config: DiscriminatorConfig, rng: np.random.Generator):
        c = config.base_channels
        s1, s2, s3 = config.strides
        self.conv1 = Conv3d(1, c, 3, rng, stride=s1)
        self.conv2 = Conv3d(c, 2 * c, 3, rng, stride=s2)
        self.norm2 = InstanceNorm3d(2 * c)
        self.conv3 = Conv3d(2 * c, 1, 3, rng, stride=s3)

    def forward(self, x: Tensor) -> Tensor:
        x = T.leaky_relu(self.conv1(x), 0.2)
        x = T.leaky_relu(self.norm2(self.conv2(x)), 0.2)
        return self.conv3(x)


class DiscriminatorBank(Module):
    """Independent patch classifiers on the input at scales 1, 1/2, 1/4."""

    def __init__(self, config: DiscriminatorConfig, rng: np.random.Generator):
        self.config = config
        self.nets = [PatchDiscriminator(config, rng) for _ in range(config.scales)]

    def forward(self, v: Tensor) -> list[Tensor]:
        div = self.config.divisor
        if any(n % div for n in v.shape[2:]):
            raise ShapeError(f"discriminator input extents {tuple(v.shape[2:])} must be divisible by {div}")
        scores = []
        x = v
        for i, net in enumerate(self.nets):
            if i:
                x = T.avg_pool2(x)
            scores.append(net(x))
        return scores


def set_requires_grad(module: Module, flag: bool) -> None:
    for _, p in module.named_parameters():
        p.requires_grad = flag
