"""Client and surrogate classifier family with first- and second-order gradients.

Models are described by a :class:`ModelSpec` and evaluated functionally from a
flat float64 parameter vector, so the same instance can be differentiated
with respect to its parameters (shared gradients) and, through the gradient
computation itself, with respect to its inputs (gradient inversion).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError, LayoutError, ShapeError, SpecError, StructureError
from .layout import GradientVector, LayerLayout
from .rng import Rng

ACTIVATIONS = {
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
    "relu": torch.relu,
}


@dataclass(frozen=True)
class Dense:
    fan_in: int
    fan_out: int
    bias: bool = True


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    bias: bool = True


@dataclass(frozen=True)
class Activation:
    name: str


Layer = Union[Dense, Conv2d, Activation]


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]  # (channels, height, width) or (features,)
    layers: tuple[Layer, ...]
    classes: int

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.trace_shapes()

    @classmethod
    def mlp(cls, input_shape, hidden: Sequence[int], classes: int,
            activation: str = "sigmoid", bias: bool = True) -> "ModelSpec":
        widths = [math.prod(input_shape), *hidden, classes]
        layers: list[Layer] = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append(Dense(a, b, bias))
            if i < len(widths) - 2:
                layers.append(Activation(activation))
        return cls(tuple(input_shape), tuple(layers), classes)

    @property
    def input_size(self) -> int:
        return math.prod(self.input_shape)

    def trace_shapes(self) -> list[tuple[int, ...]]:
        """Activation shapes after each layer; raises on incomposable specs."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if math.prod(shape) != layer.fan_in:
                    raise SpecError(f"layer {i}: dense expects {layer.fan_in} inputs, got {shape}")
                shape = (layer.fan_out,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise SpecError(f"layer {i}: conv expects {layer.in_channels} channels, got {shape}")
                h = (shape[1] - layer.kernel) // layer.stride + 1
                w = (shape[2] - layer.kernel) // layer.stride + 1
                if h < 1 or w < 1:
                    raise SpecError(f"layer {i}: kernel larger than input {shape}")
                shape = (layer.out_channels, h, w)
            elif isinstance(layer, Activation):
                if layer.name not in ACTIVATIONS:
                    raise SpecError(f"layer {i}: unknown activation {layer.name!r}")
            else:
                raise SpecError(f"layer {i}: unsupported layer {layer!r}")
            out.append(shape)
        if not out or math.prod(shape) != self.classes:
            raise SpecError(f"network output {shape} does not match {self.classes} classes")
        return out

    def layout(self) -> LayerLayout:
        return _layout_of(self)

    def _build_layout(self) -> LayerLayout:
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                shapes.append((f"layer{i}.weight", (layer.fan_in, layer.fan_out)))
                if layer.bias:
                    shapes.append((f"layer{i}.bias", (layer.fan_out,)))
            elif isinstance(layer, Conv2d):
                k = layer.kernel
                shapes.append((f"layer{i}.weight", (layer.out_channels, layer.in_channels, k, k)))
                if layer.bias:
                    shapes.append((f"layer{i}.bias", (layer.out_channels,)))
        if not shapes:
            raise SpecError("model has no parameters")
        return LayerLayout.from_shapes(shapes)

    @property
    def num_params(self) -> int:
        return self.layout().total


@functools.lru_cache(maxsize=64)
def _layout_of(spec: ModelSpec) -> LayerLayout:
    return spec._build_layout()


@dataclass
class ModelInstance:
    spec: ModelSpec
    params: np.ndarray  # float64, length spec.num_params
    layout: LayerLayout = field(init=False)

    def __post_init__(self):
        self.layout = self.spec.layout()
        self.params = np.ascontiguousarray(self.params, dtype=np.float64).reshape(-1)
        if self.params.size != self.layout.total:
            raise ShapeError(f"{self.params.size} parameters for a model of size {self.layout.total}")
        if not np.all(np.isfinite(self.params)):
            raise InputError("model parameters must be finite")

    def copy(self) -> "ModelInstance":
        return ModelInstance(self.spec, self.params.copy())

    def as_gradient_vector(self) -> GradientVector:
        return GradientVector(self.params.astype(np.float32), self.layout, "params")


def build_model(spec: ModelSpec, rng: Rng) -> ModelInstance:
    """Glorot-uniform weights, zero biases."""
    params = np.zeros(spec.num_params)
    layout = spec.layout()
    for entry in layout.entries:
        if entry.name.endswith(".bias"):
            continue
        shape = entry.shape
        if len(shape) == 2:
            fan_in, fan_out = shape
        else:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[entry.offset:entry.offset + entry.length] = (2.0 * rng.uniform(entry.length) - 1.0) * limit
    return ModelInstance(spec, params)


def _unflatten(spec: ModelSpec, flat: torch.Tensor):
    layout = spec.layout()
    tensors = {e.name: flat[e.offset:e.offset + e.length].reshape(e.shape) for e in layout.entries}
    return tensors


def forward(spec: ModelSpec, flat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Logits for a single sample ``x`` (flattened input)."""
    p = _unflatten(spec, flat)
    h = x.reshape(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            h = h.reshape(-1) @ p[f"layer{i}.weight"]
            if layer.bias:
                h = h + p[f"layer{i}.bias"]
        elif isinstance(layer, Conv2d):
            bias = p.get(f"layer{i}.bias")
            h = F.conv2d(h.unsqueeze(0), p[f"layer{i}.weight"], bias, stride=layer.stride)[0]
        else:
            h = ACTIVATIONS[layer.name](h)
    return h.reshape(-1)


def _target(spec: ModelSpec, y) -> torch.Tensor:
    if isinstance(y, (int, np.integer)):
        if not 0 <= int(y) < spec.classes:
            raise InputError(f"label {y} outside [0, {spec.classes})")
        t = torch.zeros(spec.classes, dtype=torch.float64)
        t[int(y)] = 1.0
        return t
    t = torch.as_tensor(np.asarray(y, dtype=np.float64))
    if t.shape != (spec.classes,):
        raise ShapeError(f"target vector must have {spec.classes} entries")
    return t


def _loss(logits: torch.Tensor, target: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "cross-entropy":
        return -(target * torch.log_softmax(logits, 0)).sum()
    if kind == "squared":
        return ((logits - target) ** 2).sum()
    raise SpecError(f"unknown loss {kind!r}")


def _check_input(model: ModelInstance, x) -> torch.Tensor:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != model.spec.input_size:
        raise ShapeError(f"input has {x.size} values, model expects {model.spec.input_size}")
    return torch.from_numpy(x.copy())


def loss_and_grad_params(model: ModelInstance, x, y, loss: str = "cross-entropy"):
    """Training loss and its exact parameter gradient as a GradientVector.

    ``y`` is a class index (one-hot target) or an explicit target vector.
    """
    xt = _check_input(model, x)
    target = _target(model.spec, y)
    flat = torch.from_numpy(model.params.copy()).requires_grad_(True)
    value = _loss(forward(model.spec, flat, xt), target, loss)
    (grad,) = torch.autograd.grad(value, flat)
    return float(value.detach()), GradientVector(grad.numpy().astype(np.float32), model.layout, "clean")


def loss_value(model: ModelInstance, x, y, loss: str = "cross-entropy") -> float:
    with torch.no_grad():
        xt = _check_input(model, x)
        flat = torch.from_numpy(model.params)
        return float(_loss(forward(model.spec, flat, xt), _target(model.spec, y), loss))


def soft_label(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()


def grad_match_loss_and_input_grad(model: ModelInstance, dummy_x, dummy_y, target_grad: GradientVector):
    """Squared distance between the dummy gradient and ``target_grad``.

    ``dummy_y`` holds label logits; the dummy label is their softmax. Returns
    ``(loss, d loss / d dummy_x, d loss / d dummy_y)``, obtained by
    differentiating through the parameter-gradient graph.
    """
    if target_grad.layout.shapes != model.layout.shapes:
        raise LayoutError("target gradient layout does not match the model")
    xt = _check_input(model, dummy_x).requires_grad_(True)
    yt = torch.from_numpy(np.asarray(dummy_y, dtype=np.float64).reshape(-1).copy()).requires_grad_(True)
    if yt.numel() != model.spec.classes:
        raise ShapeError("dummy label must have one logit per class")
    flat = torch.from_numpy(model.params.copy()).requires_grad_(True)
    ce = _loss(forward(model.spec, flat, xt), torch.softmax(yt, 0), "cross-entropy")
    (dummy_grad,) = torch.autograd.grad(ce, flat, create_graph=True)
    target = torch.from_numpy(target_grad.values.astype(np.float64))
    match = ((dummy_grad - target) ** 2).sum()
    dx, dy = torch.autograd.grad(match, (xt, yt))
    return float(match.detach()), dx.numpy().copy(), dy.numpy().copy()


def infer_structure(shared: GradientVector, input_shape: tuple[int, ...] | None = None,
                    activation: str = "sigmoid") -> ModelSpec:
    """Rebuild a model spec from the layer shapes visible in a shared gradient."""
    shapes = shared.layout.shapes
    layers: list[Layer] = []
    i = 0
    while i < len(shapes):
        shape = shapes[i]
        has_bias = False
        if len(shape) == 2:
            out = shape[1]
            if i + 1 < len(shapes) and shapes[i + 1] == (out,):
                has_bias = True
            layers.append(Dense(shape[0], out, has_bias))
        elif len(shape) == 4 and shape[2] == shape[3]:
            out = shape[0]
            if i + 1 < len(shapes) and shapes[i + 1] == (out,):
                has_bias = True
            layers.append(Conv2d(shape[1], out, shape[2], 1, has_bias))
        else:
            raise StructureError(f"cannot map parameter shape {shape} to a layer")
        i += 2 if has_bias else 1
        layers.append(Activation(activation))
    layers.pop()
    last = layers[-1]
    classes = last.fan_out if isinstance(last, Dense) else None
    if classes is None:
        raise StructureError("the final layer must be dense")
    if input_shape is None:
        first = layers[0]
        if isinstance(first, Dense):
            input_shape = (first.fan_in,)
        else:
            input_shape = _conv_input_shape(layers)
    try:
        return ModelSpec(tuple(input_shape), tuple(layers), classes)
    except SpecError as exc:
        raise StructureError(str(exc)) from exc


def _conv_input_shape(layers) -> tuple[int, int, int]:
    convs = []
    for layer in layers:
        if isinstance(layer, Dense):
            break
        if isinstance(layer, Conv2d):
            convs.append(layer)
    dense = next(l for l in layers if isinstance(l, Dense))
    spatial, rem = divmod(dense.fan_in, convs[-1].out_channels)
    side = math.isqrt(spatial)
    if rem or side * side != spatial:
        raise StructureError("cannot infer a square input size for the convolution stack")
    for conv in reversed(convs):
        side = side + conv.kernel - 1
    return (convs[0].in_channels, side, side)
