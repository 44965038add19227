"""Declarative graphs for VeloxNet and SqueezeNet, and the execution engine.

A :class:`ModelGraph` is an immutable list of :class:`LayerSpec` nodes with
their expected output shapes; :class:`Model` instantiates the layers and
runs forward/backward with a shape and finiteness check after every node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericError, StateError
from .fire import SQUEEZENET_FIRES, ConvNormAct, FireConfig, FireModule
from .gmlp import GmlpBlock, GmlpConfig
from .layers import (GELU, BatchNorm2d, Conv2d, GlobalAvgPool, GroupAffineNorm, MaxPool2d,
                     ReLU, conv_output_size, pool_output_size)

ABLATIONS = ("full", "no_sgu", "no_residual", "no_layernorm", "depth4", "depth6", "d96", "d128", "d192")
STAGE_DEPTHS = {"full": (2, 2, 4), "depth6": (2, 2, 2), "depth4": (2, 1, 1)}
WIDTHS = {"d96": 96, "d128": 128, "d192": 192}
VELOXNET_WIDTH = 156


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    config: MappingProxyType
    out_shape: tuple[int, ...]

    @classmethod
    def make(cls, name, kind, out_shape, **config):
        return cls(name, kind, MappingProxyType(config), tuple(out_shape))


@dataclass(frozen=True)
class AblationSpec:
    """One or more ablation modifications of the base VeloxNet."""

    variants: tuple[str, ...] = ("full",)

    @classmethod
    def parse(cls, value: "str | Iterable[str] | AblationSpec") -> "AblationSpec":
        if isinstance(value, AblationSpec):
            return value
        names = (value,) if isinstance(value, str) else tuple(value)
        names = tuple(v for v in names if v != "full") or ("full",)
        unknown = [v for v in names if v not in ABLATIONS]
        if unknown:
            raise ConfigError(f"unknown ablation(s) {unknown}; choose from {ABLATIONS}")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate ablation in {names}")
        if sum(v in STAGE_DEPTHS for v in names) > 1 or sum(v in WIDTHS for v in names) > 1:
            raise ConfigError(f"conflicting ablations {names}")
        return cls(names)

    def __str__(self):
        return "+".join(self.variants)

    def depths(self) -> tuple[int, int, int]:
        for v in self.variants:
            if v in STAGE_DEPTHS:
                return STAGE_DEPTHS[v]
        return STAGE_DEPTHS["full"]

    def width(self, default: int) -> int:
        for v in self.variants:
            if v in WIDTHS:
                return WIDTHS[v]
        return default

    def apply(self, cfg: GmlpConfig) -> GmlpConfig:
        if "no_sgu" in self.variants:
            cfg = cfg.replace(gating=False)
        if "no_residual" in self.variants:
            cfg = cfg.replace(residual=False)
        if "no_layernorm" in self.variants:
            cfg = cfg.replace(block_norm=False, inner_norm=False)
        return cfg


@dataclass(frozen=True)
class ModelGraph:
    name: str
    preset: str
    classes: int
    input_shape: tuple[int, int, int]
    nodes: tuple[LayerSpec, ...]
    ablation: AblationSpec = field(default_factory=AblationSpec)
    build_args: MappingProxyType = field(default_factory=lambda: MappingProxyType({}), compare=False)

    def __post_init__(self):
        heads = [n for n in self.nodes if n.kind == "softmax_head"]
        if len(heads) != 1 or self.nodes[-1].kind != "softmax_head":
            raise ConfigError("graph needs exactly one softmax head as its final node")

    @property
    def layers(self) -> tuple[LayerSpec, ...]:
        """Executable nodes (everything but the loss head)."""
        return self.nodes[:-1]

    def model_id(self) -> str:
        """JSON of the builder arguments; ``graph_from_id`` inverts it."""
        return json.dumps({"model": self.name, **self.build_args}, sort_keys=True, separators=(",", ":"))


def _largest_group_count(d: int, limit: int = 3) -> int:
    return max(g for g in range(1, limit + 1) if d % g == 0)


def build_veloxnet(classes: int = 5, preset: str = "table-i", ablation="full",
                   input_size: int = 224, d_model: int | None = None,
                   shift_offset: int = 1) -> ModelGraph:
    """conv1 -> group norm -> gelu -> pool -> gMLP stages (55/27/13 at 224) -> conv10 -> avgpool."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    abl = AblationSpec.parse(ablation)
    d = d_model if d_model is not None else abl.width(VELOXNET_WIDTH)
    GmlpConfig.preset(preset, d_model=d, n_tokens=1)  # validates preset name and width early
    nodes = []
    h = conv_output_size(input_size, 3, 2, 0)
    if h < 1:
        raise ConfigError(f"input {input_size} too small for conv1")
    nodes.append(LayerSpec.make("conv1", "conv", (d, h, h), c_in=3, c_out=d, kernel=3, stride=2, pad=0))
    groups = _largest_group_count(d)
    nodes.append(LayerSpec.make("batchnorm1", "group_norm", (d, h, h), channels=d, groups=groups))
    nodes.append(LayerSpec.make("gelu1", "gelu", (d, h, h)))
    h = _pool(h, "floor", "maxpool1")
    nodes.append(LayerSpec.make("maxpool1", "maxpool", (d, h, h), kernel=3, stride=2, rounding="floor"))
    block = 2
    for stage, depth in enumerate(abl.depths()):
        if stage:
            h = _pool(h, "floor", f"maxpool{block - 1}")
            nodes.append(LayerSpec.make(f"maxpool{block - 1}", "maxpool", (d, h, h),
                                        kernel=3, stride=2, rounding="floor"))
        cfg = abl.apply(GmlpConfig.preset(preset, d_model=d, n_tokens=h * h, shift_offset=shift_offset))
        for _ in range(depth):
            nodes.append(LayerSpec.make(f"gmlp{block}", "gmlp", (d, h, h), gmlp=cfg))
            block += 1
    nodes.append(LayerSpec.make("conv10", "conv", (classes, h, h), c_in=d, c_out=classes,
                                kernel=1, stride=1, pad=0))
    nodes.append(LayerSpec.make("avgpool10", "avgpool", (classes, 1, 1)))
    nodes.append(LayerSpec.make("softmax", "softmax_head", (classes, 1, 1)))
    args = dict(classes=classes, ablation=list(abl.variants), input_size=input_size,
                d_model=d, shift_offset=shift_offset)
    return ModelGraph("veloxnet", preset, classes, (3, input_size, input_size), tuple(nodes), abl,
                      MappingProxyType(args))


def _pool(h: int, rounding: str, name: str) -> int:
    if h < 3:
        raise ConfigError(f"{name}: 3x3 pool does not fit a {h}x{h} map; increase the input size")
    return pool_output_size(h, 3, 2, rounding)


def build_squeezenet(classes: int = 5, input_size: int = 224, conv1_channels: int = 96,
                     fires=SQUEEZENET_FIRES) -> ModelGraph:
    """SqueezeNet v1.0 with a batchnorm after every convolution."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if len(fires) != 8:
        raise ConfigError("SqueezeNet needs eight fire modules")
    c = conv1_channels
    h = conv_output_size(input_size, 7, 2, 3)
    nodes = [
        LayerSpec.make("conv1", "conv", (c, h, h), c_in=3, c_out=c, kernel=7, stride=2, pad=3),
        LayerSpec.make("batchnorm1", "batchnorm", (c, h, h), channels=c),
        LayerSpec.make("relu1", "relu", (c, h, h)),
    ]
    h = _pool(h, "ceil", "maxpool1")
    nodes.append(LayerSpec.make("maxpool1", "maxpool", (c, h, h), kernel=3, stride=2, rounding="ceil"))
    for idx, (s, e1, e3) in enumerate(fires, start=2):
        cfg = FireConfig(c, s, e1, e3)
        c = cfg.c_out
        nodes.append(LayerSpec.make(f"fire{idx}", "fire", (c, h, h), fire=cfg))
        if idx in (4, 8):
            h = _pool(h, "ceil", f"maxpool{idx}")
            nodes.append(LayerSpec.make(f"maxpool{idx}", "maxpool", (c, h, h),
                                        kernel=3, stride=2, rounding="ceil"))
    nodes.append(LayerSpec.make("conv10", "conv_norm_act", (classes, h, h), c_in=c, c_out=classes,
                                kernel=1, stride=1, pad=0))
    nodes.append(LayerSpec.make("avgpool10", "avgpool", (classes, 1, 1)))
    nodes.append(LayerSpec.make("softmax", "softmax_head", (classes, 1, 1)))
    args = dict(classes=classes, input_size=input_size, conv1_channels=conv1_channels,
                fires=[list(f) for f in fires])
    return ModelGraph("squeezenet", "-", classes, (3, input_size, input_size), tuple(nodes),
                      build_args=MappingProxyType(args))


REDUCED_VELOXNET = dict(classes=3, d_model=12, input_size=47)
REDUCED_SQUEEZENET = dict(classes=3, input_size=35, conv1_channels=8,
                          fires=((2, 4, 4), (2, 4, 4), (3, 6, 6), (3, 6, 6),
                                 (4, 8, 8), (4, 8, 8), (5, 10, 10), (5, 10, 10)))


def build_model_graph(model: str, classes: int = 5, preset: str = "table-i", ablation="full",
                      input_size: int = 224, reduced: bool = False) -> ModelGraph:
    """Dispatch by model name; ``reduced`` selects the tiny gradient-check instances."""
    if model == "veloxnet":
        if reduced:
            return build_veloxnet(preset=preset, ablation=ablation, **REDUCED_VELOXNET)
        return build_veloxnet(classes, preset, ablation, input_size)
    if model == "squeezenet":
        if reduced:
            return build_squeezenet(**REDUCED_SQUEEZENET)
        return build_squeezenet(classes, input_size)
    raise ConfigError(f"unknown model {model!r}")


def graph_from_id(model_id: str, preset: str = "table-i") -> ModelGraph:
    """Rebuild the graph a checkpoint was written from."""
    try:
        args = json.loads(model_id)
        name = args.pop("model")
    except (ValueError, KeyError, AttributeError):
        raise ConfigError(f"unreadable model id {model_id!r}") from None
    if name == "veloxnet":
        return build_veloxnet(preset=preset, **args)
    if name == "squeezenet":
        args["fires"] = tuple(tuple(f) for f in args["fires"])
        return build_squeezenet(**args)
    raise ConfigError(f"unknown model {name!r} in model id")


def _make_layer(spec: LayerSpec, rng, dtype):
    cfg = spec.config
    kind = spec.kind
    if kind == "conv":
        return Conv2d(cfg["c_in"], cfg["c_out"], cfg["kernel"], cfg["stride"], cfg["pad"],
                      bias=False, rng=rng, dtype=dtype)
    if kind == "conv_norm_act":
        return ConvNormAct(cfg["c_in"], cfg["c_out"], cfg["kernel"], cfg["stride"], cfg["pad"],
                           act=True, rng=rng, dtype=dtype)
    if kind == "group_norm":
        return GroupAffineNorm(cfg["channels"], cfg["groups"], dtype=dtype)
    if kind == "batchnorm":
        return BatchNorm2d(cfg["channels"], dtype=dtype)
    if kind == "gelu":
        return GELU()
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool2d(cfg["kernel"], cfg["stride"], cfg["rounding"])
    if kind == "gmlp":
        return GmlpBlock(cfg["gmlp"], rng=rng, dtype=dtype)
    if kind == "fire":
        return FireModule(cfg["fire"], rng=rng, dtype=dtype)
    if kind == "avgpool":
        return GlobalAvgPool()
    raise ConfigError(f"no layer for node kind {kind!r}")


class Model:
    """A built graph plus its parameters."""

    def __init__(self, graph: ModelGraph, seed: int = 0, dtype=np.float32):
        self.graph = graph
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers = [_make_layer(spec, rng, self.dtype) for spec in graph.layers]
        self._trained_forward = False

    def named_layers(self):
        return [(spec.name, layer) for spec, layer in zip(self.graph.layers, self.layers)]

    def named_params(self):
        for name, layer in self.named_layers():
            yield from layer.named_params(f"{name}.")

    def named_buffers(self):
        for name, layer in self.named_layers():
            yield from layer.named_buffers(f"{name}.")

    def num_params(self) -> int:
        return sum(layer.num_params() for layer in self.layers)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and normalization buffers by dotted name (copies)."""
        state = {name: p.copy() for name, p, _ in self.named_params()}
        state.update((name, b.copy()) for name, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise DataError(f"checkpoint entries do not match model: missing {missing[:5]}, "
                            f"unexpected {extra[:5]}")
        for lname, layer in self.named_layers():
            for prefix, mod in layer.named_modules(f"{lname}."):
                for store in (mod.params, mod.buffers):
                    for key in store:
                        value = state[prefix + key]
                        if value.shape != store[key].shape:
                            raise DataError(f"{prefix + key}: checkpoint shape {value.shape}, "
                                            f"model expects {store[key].shape}")
                        store[key] = value.astype(self.dtype, copy=True)
                for key in mod.params:
                    mod.grads[key] = np.zeros_like(mod.params[key])
                if isinstance(mod, BatchNorm2d):
                    mod.stats_ready = True

    def astype(self, dtype) -> "Model":
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def forward(self, batch: np.ndarray, mode: str = "infer") -> np.ndarray:
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        if batch.ndim != 4 or batch.shape[1:] != self.graph.input_shape:
            raise DimensionError(f"expected batch of shape N x {self.graph.input_shape}, got {batch.shape}")
        train = mode == "train"
        x = np.asarray(batch, dtype=self.dtype)
        for spec, layer in zip(self.graph.layers, self.layers):
            x = layer.forward(x, train)
            shape = x.shape[1:] if x.ndim == 4 else x.shape[1:] + (1, 1)
            if shape != spec.out_shape:
                raise DimensionError(f"{spec.name}: output {shape} but graph expects {spec.out_shape}")
            if not np.isfinite(x).all():
                raise NumericError(f"non-finite activations after {spec.name}")
        self._trained_forward = train
        return x

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Populate parameter gradients; returns them keyed by dotted name."""
        if not self._trained_forward:
            raise StateError("backward requires a preceding forward in train mode")
        self._trained_forward = False
        g = np.asarray(dlogits, dtype=self.dtype)
        for spec, layer in reversed(self.named_layers()):
            g = layer.backward(g)
        self.input_grad = g
        return {name: grad for name, _, grad in self.named_params()}
