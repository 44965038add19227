"""SqueezeNet fire module: 1x1 squeeze, then parallel 1x1 / 3x3 expands."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import BatchNorm2d, Conv2d, Layer, ReLU


@dataclass(frozen=True)
class FireConfig:
    c_in: int
    s: int
    e1: int
    e3: int

    def __post_init__(self):
        if min(self.c_in, self.s, self.e1, self.e3) < 1:
            raise ConfigError(f"fire dimensions must be positive: {self}")

    @property
    def c_out(self) -> int:
        return self.e1 + self.e3


# SqueezeNet v1.0 schedule for fire2..fire9 as (s, e1, e3).
SQUEEZENET_FIRES = (
    (16, 64, 64), (16, 64, 64), (32, 128, 128), (32, 128, 128),
    (48, 192, 192), (48, 192, 192), (64, 256, 256), (64, 256, 256),
)


class ConvNormAct(Layer):
    """conv (bias-free) -> batchnorm -> optional ReLU."""

    def __init__(self, c_in, c_out, kernel, stride=1, pad=0, act=True, rng=None, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, stride, pad, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)
        self.relu = ReLU() if act else None

    def children(self):
        return [("conv", self.conv), ("bn", self.bn)]

    def forward(self, x, train=True):
        y = self.bn.forward(self.conv.forward(x, train), train)
        return self.relu.forward(y, train) if self.relu is not None else y

    def backward(self, dy):
        if self.relu is not None:
            dy = self.relu.backward(dy)
        return self.conv.backward(self.bn.backward(dy))


class FireModule(Layer):
    def __init__(self, cfg: FireConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.squeeze = ConvNormAct(cfg.c_in, cfg.s, 1, rng=rng, dtype=dtype)
        self.expand1 = ConvNormAct(cfg.s, cfg.e1, 1, rng=rng, dtype=dtype)
        self.expand3 = ConvNormAct(cfg.s, cfg.e3, 3, pad=1, rng=rng, dtype=dtype)

    def children(self):
        return [("squeeze", self.squeeze), ("expand1x1", self.expand1), ("expand3x3", self.expand3)]

    def forward(self, x, train=True):
        if x.shape[1] != self.cfg.c_in:
            raise DimensionError(f"fire expects {self.cfg.c_in} channels, got {x.shape[1]}")
        z = self.squeeze.forward(x, train)
        return np.concatenate([self.expand1.forward(z, train), self.expand3.forward(z, train)], axis=1)

    def backward(self, dy):
        e1 = self.cfg.e1
        dz = self.expand1.backward(dy[:, :e1]) + self.expand3.backward(dy[:, e1:])
        return self.squeeze.backward(dz)
