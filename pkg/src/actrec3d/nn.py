"""Layer specs, the four model presets, and whole-model forward/backward."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor as K
from .tensor import ConvGeom, ShapeError

ACTIVATIONS = ("relu", "none")
PRESETS = (1, 2, 3, 4)

ParamSet = dict  # ordered {"<layer>.weights" | "<layer>.bias": ndarray}


@dataclass(frozen=True)
class Conv3d:
    out_channels: int
    geom: ConvGeom = field(default_factory=ConvGeom)
    activation: str = "relu"

    def __post_init__(self):
        if self.out_channels < 1:
            raise ValueError("Conv3d out_channels must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class MaxPool3d:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int
    activation: str = "none"

    def __post_init__(self):
        if self.units < 1:
            raise ValueError("Dense units must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class Dropout:
    p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout p must be in [0, 1), got {self.p}")


LayerSpec = Union[Conv3d, MaxPool3d, Flatten, Dense, Dropout]


def layer_to_dict(layer: LayerSpec) -> dict:
    if isinstance(layer, Conv3d):
        return {"kind": "conv3d", "out_channels": layer.out_channels,
                "kernel": list(layer.geom.kernel), "activation": layer.activation}
    if isinstance(layer, MaxPool3d):
        return {"kind": "maxpool3d"}
    if isinstance(layer, Flatten):
        return {"kind": "flatten"}
    if isinstance(layer, Dense):
        return {"kind": "dense", "units": layer.units, "activation": layer.activation}
    if isinstance(layer, Dropout):
        return {"kind": "dropout", "p": layer.p}
    raise TypeError(f"not a layer spec: {layer!r}")


def layer_from_dict(d: dict) -> LayerSpec:
    kind = d.get("kind")
    if kind == "conv3d":
        return Conv3d(int(d["out_channels"]), ConvGeom(tuple(d["kernel"])), d["activation"])
    if kind == "maxpool3d":
        return MaxPool3d()
    if kind == "flatten":
        return Flatten()
    if kind == "dense":
        return Dense(int(d["units"]), d["activation"])
    if kind == "dropout":
        return Dropout(float(d["p"]))
    raise ValueError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Input shape ``(C, T, H, W)``, class count and ordered layers.

    Construction validates the shape chain, so every instance is runnable.
    """

    input_shape: tuple[int, int, int, int]
    num_classes: int
    layers: tuple[LayerSpec, ...]
    preset: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be 4 positive dims, got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        dense = [i for i, l in enumerate(self.layers) if isinstance(l, Dense)]
        if not dense or dense[-1] != len(self.layers) - 1:
            raise ValueError("layers must end with the output Dense layer")
        out = self.layers[-1]
        if out.units != self.num_classes or out.activation != "none":
            raise ValueError(f"output layer must be Dense({self.num_classes}) without activation")
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-sample activation shape after each layer (index 0 = input)."""
        shape: tuple[int, ...] = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv3d):
                if len(shape) != 4:
                    raise ShapeError(f"layer {i}: Conv3d needs a 4-D input, got {shape}")
                shape = (layer.out_channels,) + shape[1:]
            elif isinstance(layer, MaxPool3d):
                if len(shape) != 4:
                    raise ShapeError(f"layer {i}: MaxPool3d needs a 4-D input, got {shape}")
                for name, n in zip("THW", shape[1:]):
                    if n < 2:
                        raise ShapeError(f"layer {i}: axis {name} has size {n} < 2 at pooling")
                shape = (shape[0],) + tuple(n // 2 for n in shape[1:])
            elif isinstance(layer, Flatten):
                shape = (math.prod(shape),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise ShapeError(f"layer {i}: Dense needs a flat input, got {shape}")
                shape = (layer.units,)
            out.append(shape)
        return out

    def flatten_dim(self) -> int:
        for layer, shape in zip(self.layers, self.shapes()[1:]):
            if isinstance(layer, Flatten):
                return shape[0]
        raise ValueError("spec has no Flatten layer")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = self.shapes()
        out = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv3d):
                cin = shapes[i][0]
                out[f"{i}.weights"] = (layer.out_channels, cin) + layer.geom.kernel
                out[f"{i}.bias"] = (layer.out_channels,)
            elif isinstance(layer, Dense):
                out[f"{i}.weights"] = (layer.units, shapes[i][0])
                out[f"{i}.bias"] = (layer.units,)
        return out

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "layers": [layer_to_dict(l) for l in self.layers], "preset": self.preset}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(d["input_shape"]), int(d["num_classes"]),
                   tuple(layer_from_dict(l) for l in d["layers"]), d.get("preset"))


def build_preset(model_id: int, input_shape, num_classes: int, *,
                 widths=(16, 32, 64), dense_units: int = 128,
                 dropout: float = 0.5, kernel=(3, 3, 3)) -> ModelSpec:
    """Build one of the four preset architectures.

    1: two conv blocks; 2: three conv blocks; 3: model 2 plus dropout before
    the output layer; 4: same layers as model 3 (its training differences live
    in the train config).
    """
    if model_id not in PRESETS:
        raise ValueError(f"model_id must be one of {PRESETS}, got {model_id}")
    n_conv = 2 if model_id == 1 else 3
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) == 3:
        input_shape = (1,) + input_shape
    need = 2 ** n_conv
    for name, n in zip("THW", input_shape[1:]):
        if n < need:
            raise ShapeError(f"input axis {name}={n} too small for {n_conv} pooling "
                             f"stages; minimum is {need}")
    geom = ConvGeom(tuple(kernel))
    layers: list[LayerSpec] = []
    for width in widths[:n_conv]:
        layers += [Conv3d(width, geom, "relu"), MaxPool3d()]
    layers += [Flatten(), Dense(dense_units, "relu")]
    if model_id >= 3:
        layers.append(Dropout(dropout))
    layers.append(Dense(num_classes, "none"))
    return ModelSpec(input_shape, num_classes, tuple(layers), preset=model_id)


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """He-normal weights for relu layers, LeCun-normal for the rest, zero biases."""
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    shapes = spec.param_shapes()
    for i, layer in enumerate(spec.layers):
        if not isinstance(layer, (Conv3d, Dense)):
            continue
        wshape = shapes[f"{i}.weights"]
        fan_in = math.prod(wshape[1:])
        gain = 2.0 if layer.activation == "relu" else 1.0
        std = math.sqrt(gain / fan_in)
        params[f"{i}.weights"] = (rng.standard_normal(wshape) * std).astype(np.float32)
        params[f"{i}.bias"] = np.zeros(shapes[f"{i}.bias"], dtype=np.float32)
    return params


def check_params(spec: ModelSpec, params: ParamSet) -> None:
    expected = spec.param_shapes()
    if list(params) != list(expected):
        raise ValueError(f"parameter names {list(params)} do not match spec {list(expected)}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"{name}: shape {params[name].shape} != spec {shape}")


@dataclass
class ForwardCache:
    spec: ModelSpec
    params: ParamSet
    mode: str
    inputs: list = field(default_factory=list)   # per-layer input activations
    aux: list = field(default_factory=list)      # pool index / dropout mask / pre-activation
    logits: np.ndarray | None = None
    consumed: bool = False


def _dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray:
    keep = rng.random(shape) >= p
    return keep.astype(np.float32) / np.float32(1.0 - p)


def model_forward(spec: ModelSpec, params: ParamSet, batch, mode: str = "eval",
                  seed: int = 0):
    """Run the network on ``batch`` [B, C, T, H, W] and return (logits, cache).

    Dropout masks in train mode come from a generator seeded with ``seed``;
    eval mode ignores the seed entirely.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(batch)
    if x.ndim != 5 or tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match [B, {spec.input_shape}]")
    rng = np.random.default_rng(seed) if mode == "train" else None
    cache = ForwardCache(spec, params, mode)

    for i, layer in enumerate(spec.layers):
        cache.inputs.append(x)
        aux = None
        if isinstance(layer, Conv3d):
            z = K.conv3d_forward(x, params[f"{i}.weights"], params[f"{i}.bias"], layer.geom)
            aux = z
            x = K.relu(z) if layer.activation == "relu" else z
        elif isinstance(layer, MaxPool3d):
            x, aux = K.maxpool3d_forward(x)
        elif isinstance(layer, Flatten):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dense):
            z = K.dense_forward(x, params[f"{i}.weights"], params[f"{i}.bias"])
            aux = z
            x = K.relu(z) if layer.activation == "relu" else z
        elif isinstance(layer, Dropout):
            if mode == "train" and layer.p > 0:
                aux = _dropout_mask(rng, x.shape, layer.p)
                x = x * aux.astype(x.dtype)
        cache.aux.append(aux)
    cache.logits = x
    return x, cache


def model_backward(spec: ModelSpec, params: ParamSet, cache: ForwardCache, targets):
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    if (not isinstance(cache, ForwardCache) or cache.consumed or cache.spec != spec
            or cache.params is not params or cache.logits is None):
        raise ValueError("stale forward cache: run model_forward with these params first")
    targets = np.asarray(targets)
    B = cache.logits.shape[0]
    losses, _, g = K.softmax_cross_entropy(cache.logits, targets)
    loss = float(np.mean(losses))
    g = (g / B).astype(cache.logits.dtype)

    grads: dict = {}
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, x, aux = spec.layers[i], cache.inputs[i], cache.aux[i]
        if isinstance(layer, Conv3d):
            if layer.activation == "relu":
                g = K.relu_backward(aux, g)
            g, gw, gb = K.conv3d_backward(x, params[f"{i}.weights"], layer.geom, g,
                                          need_input_grad=i > 0)
            grads[f"{i}.weights"], grads[f"{i}.bias"] = gw, gb
        elif isinstance(layer, MaxPool3d):
            g = K.maxpool3d_backward(aux, g)
        elif isinstance(layer, Flatten):
            g = g.reshape(x.shape)
        elif isinstance(layer, Dense):
            if layer.activation == "relu":
                g = K.relu_backward(aux, g)
            g, gw, gb = K.dense_backward(x, params[f"{i}.weights"], g)
            grads[f"{i}.weights"], grads[f"{i}.bias"] = gw, gb
        elif isinstance(layer, Dropout):
            if aux is not None:
                g = g * aux.astype(g.dtype)
    cache.consumed = True
    return loss, {name: grads[name] for name in params}
