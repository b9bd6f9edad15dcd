"""Sequential models, the forge (activation-thresholding) layer and model files."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor
from .textio import LineReader, ParseError, format_float, write_array

logger = logging.getLogger(__name__)

MODEL_FORMAT = "lipforge-model"
MODEL_VERSION = 1

TRACKING = "tracking"
INFERENCE = "inference"


class UnsupportedLayerError(ParseError):
    pass


class EmptyInsertionError(ValueError):
    """An insertion policy selected no linear layer."""


# -- forged function -------------------------------------------------------


@dataclass
class ForgeState:
    """Tracked activation maximum ``b``, shared ratio and mode.

    The defaults (``b = 0``, ``c_ratio = 0``, inference) make the layer an
    identity map.
    """

    b: float = 0.0
    c_ratio: float = 0.0
    mode: str = INFERENCE

    @property
    def threshold(self) -> float:
        return self.c_ratio * self.b


def forge_apply(x, c_th: float):
    """Zero every element whose magnitude is at most ``c_th``.

    Accepts a :class:`Tensor` (differentiable) or anything array-like.
    """
    if not c_th >= 0:
        raise ContractError(f"forge threshold must be >= 0, got {c_th}")
    if isinstance(x, Tensor):
        return T.threshold(x, c_th)
    arr = np.asarray(x, dtype=np.float64)
    if c_th == 0:
        return arr.copy()
    return np.where(np.abs(arr) > c_th, arr, 0.0)


def forge_step(state: ForgeState, x):
    """One pass through a forge layer.

    Tracking mode updates ``b = max(b, max(x))`` and returns ``x`` untouched;
    inference mode thresholds at ``c_ratio * b``.
    """
    if state.mode == TRACKING:
        data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if data.size:
            state.b = max(state.b, float(data.max()))
        return x
    if state.mode != INFERENCE:
        raise ContractError(f"unknown forge mode {state.mode!r}")
    return forge_apply(x, state.threshold)


# -- layers ------------------------------------------------------------------


class Layer:
    tag = "layer"
    linear = False

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def params(self) -> list[Tensor]:
        return []

    def set_params(self, values: Sequence[Tensor]) -> None:
        if values:
            raise ContractError(f"{self.tag} has no parameters")

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Dense(Layer):
    tag = "dense"
    linear = True

    def __init__(self, weight, bias):
        self.weight = T.as_tensor(weight)
        self.bias = T.as_tensor(bias)
        if self.weight.data.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(f"dense: weight {self.weight.shape} / bias {self.bias.shape}")
        if not np.all(np.isfinite(self.weight.data)):
            raise ContractError("dense: non-finite weights")

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.weight.shape[1],):
            raise DimensionError(f"dense expects input ({self.weight.shape[1]},), got {tuple(in_shape)}")
        return (self.weight.shape[0],)

    def params(self):
        return [self.weight, self.bias]

    def set_params(self, values):
        self.weight, self.bias = values

    def matrix(self) -> np.ndarray:
        return self.weight.data

    def __call__(self, x):
        return T.add_bias(T.matmul(x, T.transpose(self.weight)), self.bias)

    def __repr__(self):
        return f"Dense({self.weight.shape[1]}->{self.weight.shape[0]})"


class Conv2D(Layer):
    tag = "conv2d"
    linear = True

    def __init__(self, kernels, bias, stride: int = 1, padding: int = 0):
        self.kernels = T.as_tensor(kernels)
        self.bias = T.as_tensor(bias)
        self.stride = int(stride)
        self.padding = int(padding)
        if self.kernels.data.ndim != 4 or self.bias.shape != (self.kernels.shape[0],):
            raise DimensionError(f"conv2d: kernels {self.kernels.shape} / bias {self.bias.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ContractError(f"conv2d: stride {self.stride}, padding {self.padding}")
        if not np.all(np.isfinite(self.kernels.data)):
            raise ContractError("conv2d: non-finite kernels")

    def output_shape(self, in_shape):
        f, c, kh, kw = self.kernels.shape
        if len(in_shape) != 3 or in_shape[0] != c:
            raise DimensionError(f"conv2d expects ({c}, H, W) input, got {tuple(in_shape)}")
        oh = (in_shape[1] + 2 * self.padding - kh) // self.stride + 1
        ow = (in_shape[2] + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise DimensionError(f"conv2d kernel {kh}x{kw} does not fit input {tuple(in_shape)}")
        return (f, oh, ow)

    def params(self):
        return [self.kernels, self.bias]

    def set_params(self, values):
        self.kernels, self.bias = values

    def matrix(self) -> np.ndarray:
        """Kernel matrix acting on im2col patch rows, shape (F, C*kh*kw)."""
        return self.kernels.data.reshape(self.kernels.shape[0], -1)

    def patches(self, x: np.ndarray) -> np.ndarray:
        _, _, kh, kw = self.kernels.shape
        return T.im2col(x, kh, kw, self.stride, self.padding)

    def __call__(self, x):
        return T.conv2d(x, self.kernels, self.bias, self.stride, self.padding)

    def __repr__(self):
        f, c, kh, kw = self.kernels.shape
        return f"Conv2D({c}->{f}, {kh}x{kw}, stride={self.stride}, pad={self.padding})"


class ReLU(Layer):
    tag = "relu"
    lipschitz = 1.0

    def __call__(self, x):
        return T.relu(x)


class SiLU(Layer):
    tag = "silu"
    # max |d/dx x*sigmoid(x)| ~= 1.0998, rounded up
    lipschitz = 1.1

    def __call__(self, x):
        return T.silu(x)


class GELU(Layer):
    tag = "gelu"
    # max |d/dx x*Phi(x)| ~= 1.1289, rounded up
    lipschitz = 1.13

    def __call__(self, x):
        return T.gelu(x)


class Flatten(Layer):
    tag = "flatten"

    def output_shape(self, in_shape):
        return (math.prod(in_shape),)

    def __call__(self, x):
        return T.reshape(x, (x.shape[0], -1))


class Forge(Layer):
    tag = "forge"
    lipschitz = 1.0

    def __init__(self, state: ForgeState | None = None):
        self.state = state if state is not None else ForgeState()

    def __call__(self, x):
        return forge_step(self.state, x)

    def __repr__(self):
        s = self.state
        return f"Forge(b={s.b:.6g}, c_ratio={s.c_ratio:.6g}, mode={s.mode})"


ACTIVATIONS = {"relu": ReLU, "silu": SiLU, "gelu": GELU}


# -- model -------------------------------------------------------------------


@dataclass
class Model:
    """Sequential composite of layers applied left to right."""

    layers: list
    input_shape: tuple
    classes: int
    name: str = "model"
    seed: int = 0
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        shape = self.input_shape
        self.shapes = [shape]
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except DimensionError as e:
                raise DimensionError(f"layer {i} ({layer.tag}): {e}") from None
            self.shapes.append(shape)
        if shape != (self.classes,):
            raise DimensionError(f"model output {shape} does not match {self.classes} classes")

    def forward(self, x, collect: bool = False):
        """Logits for a batch ``x`` of shape ``(N, *input_shape)``.

        A single unbatched sample is accepted too.  With ``collect`` the
        per-layer outputs are returned as a second value (index ``i`` holds
        the output of layer ``i``).
        """
        x = T.as_tensor(x)
        single = x.shape == self.input_shape
        if single:
            x = T.reshape(x, (1, *self.input_shape))
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"input {x.shape[1:]} does not match model input {self.input_shape}")
        T.counters.forward_samples += x.shape[0]
        acts = []
        for i, layer in enumerate(self.layers):
            try:
                x = layer(x)
            except DimensionError as e:
                raise DimensionError(f"layer {i} ({layer.tag}): {e}") from None
            if collect:
                acts.append(x)
        if single:
            x = T.reshape(x, (self.classes,))
        return (x, acts) if collect else x

    __call__ = forward

    def predict(self, x, batch_size: int = 4096) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        out = [self.forward(x[i : i + batch_size]).data.argmax(axis=1) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def set_params(self, values: Sequence[Tensor]) -> None:
        it = iter(values)
        for layer in self.layers:
            n = len(layer.params())
            layer.set_params([next(it) for _ in range(n)])

    def forge_layers(self) -> list[Forge]:
        return [layer for layer in self.layers if isinstance(layer, Forge)]

    def linear_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.linear]

    def set_mode(self, mode: str) -> None:
        for f in self.forge_layers():
            f.state.mode = mode

    def set_c_ratio(self, c_ratio: float) -> None:
        if not c_ratio >= 0:
            raise ContractError(f"c_ratio must be >= 0, got {c_ratio}")
        for f in self.forge_layers():
            f.state.c_ratio = float(c_ratio)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def summary(self) -> str:
        return " -> ".join(repr(layer) for layer in self.layers)


def forward(model: Model, x, collect: bool = False):
    return model.forward(x, collect=collect)


def insert_forge(model: Model, policy="all") -> Model:
    """Return a copy of ``model`` with a forge layer before selected linear layers.

    ``policy`` is ``"all"`` (every Dense/Conv2D), ``"hidden"`` (every linear
    layer except the first, i.e. only behind activations), or an iterable of
    linear-layer ordinals (0 = first linear layer).  Linear layers already
    preceded by a forge layer are left alone.
    """
    linear = model.linear_indices()
    if not linear:
        raise EmptyInsertionError("model has no Dense or Conv2D layer")
    if policy == "all":
        chosen = set(linear)
    elif policy == "hidden":
        chosen = set(linear[1:])
    else:
        ordinals = set(int(k) for k in policy)
        bad = [k for k in ordinals if not 0 <= k < len(linear)]
        if bad:
            raise ContractError(f"linear-layer ordinals {bad} out of range (model has {len(linear)})")
        chosen = {linear[k] for k in ordinals}
    chosen = {i for i in chosen if not (i > 0 and isinstance(model.layers[i - 1], Forge))}
    if not chosen:
        logger.warning("forge insertion policy %r selected no layer", policy)
        raise EmptyInsertionError(f"policy {policy!r} selected no layer")

    src = model.copy()
    layers = []
    for i, layer in enumerate(src.layers):
        if i in chosen:
            layers.append(Forge())
        layers.append(layer)
    return Model(layers, src.input_shape, src.classes, name=src.name, seed=src.seed)


# -- presets -----------------------------------------------------------------


def _he(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def mlp(input_dim, hidden: Iterable[int] = (128, 64), classes: int = 10,
        seed: int = 0, activation: str = "relu", name: str = "mlp") -> Model:
    """Fully connected net; ``mlp(784)`` is the 784-128-64-10 preset.

    ``input_dim`` may also be a shape tuple such as ``(1, 28, 28)``, in which
    case the net starts with a flatten layer.
    """
    rng = np.random.default_rng(seed)
    act = ACTIVATIONS[activation]
    shape = tuple(input_dim) if isinstance(input_dim, (tuple, list)) else (int(input_dim),)
    layers: list = [Flatten()] if len(shape) > 1 else []
    width = math.prod(shape)
    for h in hidden:
        layers += [Dense(_he(rng, width, (h, width)), np.zeros(h)), act()]
        width = h
    layers.append(Dense(_he(rng, width, (classes, width)), np.zeros(classes)))
    return Model(layers, shape, classes, name=name, seed=seed)


def cnn(input_shape=(1, 28, 28), classes: int = 10, channels=(8, 16), seed: int = 0,
        activation: str = "relu", name: str = "cnn") -> Model:
    """Two stride-2 3x3 convolutions followed by a dense classifier."""
    rng = np.random.default_rng(seed)
    act = ACTIVATIONS[activation]
    c = input_shape[0]
    layers: list = []
    for f in channels:
        fan_in = c * 9
        layers += [Conv2D(_he(rng, fan_in, (f, c, 3, 3)), np.zeros(f), stride=2, padding=1), act()]
        c = f
    shape = tuple(input_shape)
    for layer in layers:
        shape = layer.output_shape(shape)
    flat = math.prod(shape)
    layers += [Flatten(), Dense(_he(rng, flat, (classes, flat)), np.zeros(classes))]
    return Model(layers, input_shape, classes, name=name, seed=seed)


# -- serialization -----------------------------------------------------------


def dumps_model(model: Model) -> str:
    lines = [
        f"{MODEL_FORMAT} {MODEL_VERSION}",
        f"name {model.name}",
        "input_shape " + " ".join(map(str, model.input_shape)),
        f"classes {model.classes}",
        f"seed {model.seed}",
        f"layers {len(model.layers)}",
    ]
    for layer in model.layers:
        lines.append(f"layer {layer.tag}")
        if isinstance(layer, Dense):
            write_array(lines, "weight", layer.weight.data)
            write_array(lines, "bias", layer.bias.data)
        elif isinstance(layer, Conv2D):
            lines.append(f"stride {layer.stride}")
            lines.append(f"padding {layer.padding}")
            write_array(lines, "kernels", layer.kernels.data)
            write_array(lines, "bias", layer.bias.data)
        elif isinstance(layer, Forge):
            lines.append(f"b {format_float(layer.state.b)}")
            lines.append(f"c_ratio {format_float(layer.state.c_ratio)}")
            lines.append(f"mode {layer.state.mode}")
        lines.append("end")
    lines.append("end-model")
    return "\n".join(lines) + "\n"


def _read_layer(r: LineReader, tag: str, off: int) -> Layer:
    if tag == "forge":
        b = r.scalar("b", float)
        c_ratio = r.scalar("c_ratio", float)
        mode, moff = r.key("mode")
        if mode != [TRACKING] and mode != [INFERENCE]:
            raise ParseError(f"bad forge mode {' '.join(mode)!r}", moff)
        return Forge(ForgeState(b, c_ratio, mode[0]))
    if tag == "flatten":
        return Flatten()
    if tag in ACTIVATIONS:
        return ACTIVATIONS[tag]()
    try:
        if tag == "dense":
            return Dense(r.array("weight"), r.array("bias"))
        if tag == "conv2d":
            stride = r.scalar("stride", int)
            padding = r.scalar("padding", int)
            return Conv2D(r.array("kernels"), r.array("bias"), stride, padding)
    except (DimensionError, ContractError) as e:
        raise ParseError(f"invalid {tag} layer: {e}", off) from None
    raise UnsupportedLayerError(f"unsupported layer tag {tag!r}", off)


def loads_model(raw: bytes | str) -> Model:
    if isinstance(raw, str):
        raw = raw.encode("utf-8")
    r = LineReader(raw)
    r.expect_magic(MODEL_FORMAT, MODEL_VERSION)
    name = r.scalar("name")
    input_shape = r.ints("input_shape")
    classes = r.scalar("classes", int)
    seed = r.scalar("seed", int)
    count = r.scalar("layers", int)
    layers = []
    for _ in range(count):
        vals, off = r.key("layer")
        if len(vals) != 1:
            raise ParseError("layer line needs exactly one tag", off)
        tag = vals[0]
        layers.append(_read_layer(r, tag, off))
        line, eoff = r.next_line()
        if line != "end":
            raise ParseError(f"expected 'end' after {tag} layer, got {line[:40]!r}", eoff)
    line, off = r.next_line()
    if line != "end-model":
        raise ParseError(f"expected 'end-model', got {line[:40]!r}", off)
    if not r.at_end:
        raise ParseError("trailing data after end-model", r.pos)
    try:
        return Model(layers, input_shape, classes, name=name, seed=seed)
    except (DimensionError, ContractError) as e:
        raise ParseError(f"inconsistent model: {e}", len(raw)) from None


def save_model(model: Model, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def load_model(path) -> Model:
    return loads_model(Path(path).read_bytes())
