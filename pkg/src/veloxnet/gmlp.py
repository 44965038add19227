"""gMLP blocks and the spatial gating unit.

A block maps a token matrix ``X`` of shape (n, d) to
``SGU(gelu(norm(X) @ U)) @ V + X``. Two named presets are provided:

* ``paper-eq``: the gate splits ``Z`` into halves and mixes tokens with a
  dense learned ``W_g`` (n x n) plus a per-token bias ``b_g``.
* ``table-i``: no split, bias-free d x d projections and a parameter-free
  circular token shift as the gate, giving exactly ``2 d^2 + 4 d``
  parameters per block independent of the feature-map size.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import GELU, Layer, LayerNormTokens, Linear

PRESETS = MappingProxyType({
    "paper-eq": MappingProxyType(dict(split="half", spatial_mixing="dense", bias_uv=True,
                                      block_norm=True, inner_norm=True)),
    "table-i": MappingProxyType(dict(split="none", spatial_mixing="shift", bias_uv=False,
                                     block_norm=True, inner_norm=True)),
})


@dataclass(frozen=True)
class GmlpConfig:
    d_model: int = 156
    split: str = "none"
    spatial_mixing: str = "shift"
    shift_offset: int = 1
    bias_uv: bool = False
    block_norm: bool = True
    inner_norm: bool = True
    n_tokens: int | None = None
    gating: bool = True
    residual: bool = True

    def __post_init__(self):
        if self.d_model < 1:
            raise ConfigError(f"d_model must be positive, got {self.d_model}")
        if self.split not in ("half", "none"):
            raise ConfigError(f"split must be 'half' or 'none', got {self.split!r}")
        if self.spatial_mixing not in ("dense", "shift"):
            raise ConfigError(f"spatial_mixing must be 'dense' or 'shift', got {self.spatial_mixing!r}")
        if self.split == "half" and self.d_model % 2:
            raise ConfigError(f"split='half' needs an even d_model, got {self.d_model}")
        if self.n_tokens is not None and self.n_tokens < 1:
            raise ConfigError(f"n_tokens must be positive, got {self.n_tokens}")
        if self.spatial_mixing == "dense" and self.gating and self.n_tokens is None:
            raise ConfigError("dense spatial mixing needs n_tokens at construction")

    @classmethod
    def preset(cls, name: str, **overrides) -> "GmlpConfig":
        try:
            base = PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(**{**base, **overrides})

    def replace(self, **changes) -> "GmlpConfig":
        return dataclasses.replace(self, **changes)

    @property
    def gate_width(self) -> int:
        """Width of the SGU output (and of V's input)."""
        if self.gating and self.split == "half":
            return self.d_model // 2
        return self.d_model


def tokens_from_map(x: np.ndarray) -> np.ndarray:
    """NCHW map -> (N, H*W, C); token ``t = h*W + w``."""
    n, c, h, w = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1).reshape(n, h * w, c))


def map_from_tokens(t: np.ndarray, h: int, w: int) -> np.ndarray:
    n, ntok, c = t.shape
    if ntok != h * w:
        raise DimensionError(f"{ntok} tokens cannot form a {h}x{w} map")
    # a view: consecutive blocks hand tokens to each other without copying
    return t.transpose(0, 2, 1).reshape(n, c, h, w)


class SpatialGatingUnit(Layer):
    """``Z1 * g(Z2)`` (split='half') or ``Z * g(Z)`` (split='none').

    Accepts (n, w) or batched (N, n, w) input.
    """

    def __init__(self, cfg: GmlpConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        w = cfg.d_model // 2 if cfg.split == "half" else cfg.d_model
        self.inner = LayerNormTokens(w, dtype=dtype) if cfg.inner_norm else None
        if cfg.spatial_mixing == "dense":
            self.add_param("W_g", np.zeros((cfg.n_tokens, cfg.n_tokens), dtype=dtype))
            self.add_param("b_g", np.ones(cfg.n_tokens, dtype=dtype))

    def children(self):
        return [("inner_norm", self.inner)] if self.inner is not None else []

    def forward(self, z, train=True):
        squeeze = z.ndim == 2
        if squeeze:
            z = z[None]
        cfg = self.cfg
        if cfg.split == "half":
            z1, z2 = T.split_channels(z)
        else:
            z1 = z2 = z
        h = self.inner.forward(z2, train) if self.inner is not None else z2
        if cfg.spatial_mixing == "dense":
            n = h.shape[1]
            if n != cfg.n_tokens:
                raise DimensionError(f"SGU built for {cfg.n_tokens} tokens, got {n}")
            gate = np.matmul(self.params["W_g"], h) + self.params["b_g"][None, :, None]
        else:
            gate = np.roll(h, cfg.shift_offset, axis=1)
        self._stash(z1, h, gate, squeeze)
        out = z1 * gate
        return out[0] if squeeze else out

    def backward(self, dy):
        z1, h, gate, squeeze = self._pop()
        if squeeze:
            dy = dy[None]
        cfg = self.cfg
        dz1 = dy * gate
        dgate = dy * z1
        if cfg.spatial_mixing == "dense":
            self.grads["W_g"][...] = np.einsum("bic,bjc->ij", dgate, h)
            self.grads["b_g"][...] = dgate.sum(axis=(0, 2))
            dh = np.matmul(self.params["W_g"].T, dgate)
        else:
            dh = np.roll(dgate, -cfg.shift_offset, axis=1)
        dz2 = self.inner.backward(dh) if self.inner is not None else dh
        if cfg.split == "half":
            dz = T.concat_channels(dz1, dz2)
        else:
            dz = dz1 + dz2
        return dz[0] if squeeze else dz


class GmlpBlock(Layer):
    """Residual gMLP block.

    ``forward``/``backward`` work on NCHW maps; ``forward_tokens`` and
    ``backward_tokens`` on (n, d) or (N, n, d) token matrices.
    """

    def __init__(self, cfg: GmlpConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        d = cfg.d_model
        self.norm = LayerNormTokens(d, dtype=dtype) if cfg.block_norm else None
        self.U = Linear(d, d, bias=cfg.bias_uv, rng=rng, dtype=dtype)
        self.act = GELU()
        self.sgu = SpatialGatingUnit(cfg, dtype=dtype) if cfg.gating else None
        self.V = Linear(cfg.gate_width, d, bias=cfg.bias_uv, rng=rng, dtype=dtype)

    def children(self):
        out = []
        if self.norm is not None:
            out.append(("norm", self.norm))
        out.append(("U", self.U))
        if self.sgu is not None:
            out.append(("sgu", self.sgu))
        out.append(("V", self.V))
        return out

    def forward_tokens(self, x, train=True):
        if x.shape[-1] != self.cfg.d_model:
            raise DimensionError(f"block expects d={self.cfg.d_model}, got {x.shape[-1]}")
        h = self.norm.forward(x, train) if self.norm is not None else x
        z = self.act.forward(self.U.forward(h, train), train)
        if self.sgu is not None:
            z = self.sgu.forward(z, train)
        y = self.V.forward(z, train)
        if self.cfg.residual:
            y = T.elementwise("add", y, x)
        return y

    def backward_tokens(self, dy):
        g = self.V.backward(dy)
        if self.sgu is not None:
            g = self.sgu.backward(g)
        g = self.U.backward(self.act.backward(g))
        if self.norm is not None:
            g = self.norm.backward(g)
        if self.cfg.residual:
            g = g + dy
        return g

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        self._stash(h, w)
        return map_from_tokens(self.forward_tokens(tokens_from_map(x), train), h, w)

    def backward(self, dy):
        h, w = self._pop()
        return map_from_tokens(self.backward_tokens(tokens_from_map(dy)), h, w)


def init_gmlp(cfg: GmlpConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    """Freshly initialized block parameters keyed by dotted name."""
    return {name: p for name, p, _ in GmlpBlock(cfg, rng, dtype).named_params()}
