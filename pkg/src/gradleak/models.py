"""Model zoo: the attack-target CNN, a small MLP and a residual CNN.

A model is a :class:`ModelSpec` (a list of layer descriptors) plus a
:class:`Parameters` map.  The forward pass is a free function so the same
spec can be evaluated with plain arrays or with graph-tracked tensors.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

MAGIC = b"GLPARAM1"


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    bias: bool = True


@dataclass(frozen=True)
class Activation:
    kind: str = "sigmoid"

    def __post_init__(self):
        if self.kind not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}")


@dataclass(frozen=True)
class AvgPool:
    size: int


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int
    bias: bool = True


@dataclass(frozen=True)
class Residual:
    """``x + conv(act(conv(x)))`` with same-size 3x3 convolutions."""

    kernel: int = 3
    activation: str = "sigmoid"
    bias: bool = True


_ACTIVATIONS = {"sigmoid": ad.sigmoid, "tanh": ad.tanh, "relu": ad.relu}
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv, Activation, AvgPool, Flatten, Dense, Residual)}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: tuple  # (C, H, W)
    num_classes: int
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = _infer(self)
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(f"{self.name}: output shape {shapes[-1]} != ({self.num_classes},)")

    def param_shapes(self) -> list[tuple[str, tuple]]:
        """Ordered (name, shape) pairs; this order is the gradient layout."""
        out = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                out.append((f"{i}.conv.weight", (layer.out_channels, shape[0], layer.kernel, layer.kernel)))
                if layer.bias:
                    out.append((f"{i}.conv.bias", (layer.out_channels,)))
            elif isinstance(layer, Residual):
                c = shape[0]
                for j in (1, 2):
                    out.append((f"{i}.res{j}.weight", (c, c, layer.kernel, layer.kernel)))
                    if layer.bias:
                        out.append((f"{i}.res{j}.bias", (c,)))
            elif isinstance(layer, Dense):
                out.append((f"{i}.fc.weight", (shape[0], layer.out_features)))
                if layer.bias:
                    out.append((f"{i}.fc.bias", (layer.out_features,)))
            shape = _next_shape(shape, layer)
        return out

    def num_params(self) -> int:
        return int(sum(np.prod(s) for _, s in self.param_shapes()))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [{"type": type(l).__name__, **asdict(l)} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            layers.append(_LAYER_TYPES[ld.pop("type")](**ld))
        return cls(d["name"], tuple(d["input_shape"]), int(d["num_classes"]), tuple(layers))

    def digest(self) -> bytes:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).digest()

    @property
    def head(self) -> Dense | None:
        last = self.layers[-1] if self.layers else None
        return last if isinstance(last, Dense) else None


def _next_shape(shape: tuple, layer) -> tuple:
    if isinstance(layer, Conv):
        if len(shape) != 3:
            raise ShapeError(f"conv layer needs (C,H,W) input, got {shape}")
        c, h, w = shape
        ho = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
        wo = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv layer collapses spatial dims {shape}")
        return (layer.out_channels, ho, wo)
    if isinstance(layer, AvgPool):
        c, h, w = shape
        if h % layer.size or w % layer.size:
            raise ShapeError(f"pool size {layer.size} does not divide {shape}")
        return (c, h // layer.size, w // layer.size)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, Dense):
        if len(shape) != 1:
            raise ShapeError(f"dense layer needs flat input, got {shape}")
        return (layer.out_features,)
    if isinstance(layer, Residual):
        if len(shape) != 3 or layer.kernel % 2 == 0:
            raise ShapeError("residual block needs (C,H,W) input and an odd kernel")
        return shape
    return shape


def _infer(spec: ModelSpec) -> list[tuple]:
    if spec.num_classes < 2:
        raise ValueError("need at least 2 classes")
    shapes = [spec.input_shape]
    for layer in spec.layers:
        shapes.append(_next_shape(shapes[-1], layer))
    return shapes


# ------------------------------------------------------------------ builders


def build_cnn4(num_classes: int, input_shape=(3, 32, 32), width: int = 12,
               activation: str = "sigmoid", bias: bool = True) -> ModelSpec:
    """Four stride-2 5x5 conv blocks followed by one fully-connected layer."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    layers = []
    for _ in range(4):
        layers += [Conv(width, 5, 2, 2, bias), Activation(activation)]
    layers += [Flatten(), Dense(num_classes, bias)]
    return ModelSpec("cnn4", input_shape, num_classes, tuple(layers))


def build_mlp(num_classes: int, input_shape=(3, 8, 8), hidden: int = 8,
              activation: str = "sigmoid", bias: bool = True) -> ModelSpec:
    """Two-layer perceptron on the flattened image."""
    layers = (Flatten(), Dense(hidden, bias), Activation(activation), Dense(num_classes, bias))
    return ModelSpec("mlp", input_shape, num_classes, layers)


def build_rescnn(num_classes: int, input_shape=(3, 32, 32), width: int = 8,
                 activation: str = "sigmoid", bias: bool = True) -> ModelSpec:
    """Small residual CNN standing in for a ResNet-style target."""
    layers = (
        Conv(width, 3, 2, 1, bias), Activation(activation),
        Residual(3, activation, bias), Activation(activation),
        Conv(width, 3, 2, 1, bias), Activation(activation),
        Residual(3, activation, bias), Activation(activation),
        Conv(width, 3, 2, 1, bias), Activation(activation),
        Flatten(), Dense(num_classes, bias),
    )
    return ModelSpec("rescnn", input_shape, num_classes, layers)


BUILDERS = {"cnn4": build_cnn4, "mlp": build_mlp, "rescnn": build_rescnn}


def build(name: str, num_classes: int, input_shape=None, **kwargs) -> ModelSpec:
    try:
        builder = BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(BUILDERS)}") from None
    if input_shape is not None:
        kwargs["input_shape"] = tuple(input_shape)
    return builder(num_classes, **kwargs)


# ---------------------------------------------------------------- parameters


class Parameters(Mapping):
    """Ordered, read-only map from parameter name to float64 array."""

    def __init__(self, spec: ModelSpec, arrays: Mapping[str, np.ndarray] | list):
        self.spec = spec
        expected = spec.param_shapes()
        if isinstance(arrays, Mapping):
            arrays = [arrays[name] for name, _ in expected]
        if len(arrays) != len(expected):
            raise ShapeError(f"expected {len(expected)} parameter arrays, got {len(arrays)}")
        self._arrays = {}
        for (name, shape), arr in zip(expected, arrays):
            a = np.array(arr, dtype=np.float64)
            if a.shape != shape:
                raise ShapeError(f"{name}: shape {a.shape} != {shape}")
            a.setflags(write=False)
            self._arrays[name] = a

    def __getitem__(self, name):
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def arrays(self) -> list[np.ndarray]:
        return list(self._arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self._arrays.values()])

    def with_arrays(self, arrays) -> "Parameters":
        return Parameters(self.spec, arrays)

    def as_tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self._arrays.items()}

    def equals(self, other: "Parameters") -> bool:
        return list(self) == list(other) and all(np.array_equal(self[k], other[k]) for k in self)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(self.spec.digest())
        buf.write(struct.pack("<I", len(self._arrays)))
        for name, a in self._arrays.items():
            raw = name.encode()
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", a.ndim))
            buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
            buf.write(a.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, spec: ModelSpec, blob: bytes) -> "Parameters":
        if blob[:8] != MAGIC:
            raise ValueError("not a parameter file (bad magic)")
        if blob[8:40] != spec.digest():
            raise ValueError("parameter file was written for a different model spec")
        pos = 40
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            arrays[name] = np.frombuffer(blob, "<f8", size, pos).reshape(shape)
            pos += 8 * size
        return cls(spec, arrays)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, spec: ModelSpec, path) -> "Parameters":
        with open(path, "rb") as fh:
            return cls.from_bytes(spec, fh.read())


def init_params(spec: ModelSpec, seed: int = 0, scheme: str = "uniform", bound: float = 0.5) -> Parameters:
    """Draw parameters deterministically from ``seed``.

    ``uniform`` samples every entry from U(-bound, bound).  ``kaiming`` uses
    N(0, 2/fan_in) for weights and zeros for biases.
    """
    rng = np.random.default_rng(seed)
    arrays = []
    for name, shape in spec.param_shapes():
        if scheme == "uniform":
            arrays.append(rng.uniform(-bound, bound, size=shape))
        elif scheme == "kaiming":
            if name.endswith("bias"):
                arrays.append(np.zeros(shape))
            else:
                fan_in = shape[0] if name.endswith("fc.weight") else int(np.prod(shape[1:]))
                arrays.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
    return Parameters(spec, arrays)


def zero_params(spec: ModelSpec) -> Parameters:
    return Parameters(spec, [np.zeros(s) for _, s in spec.param_shapes()])


# ------------------------------------------------------------------- forward


def forward(spec: ModelSpec, params: Mapping, x) -> Tensor:
    """Logits of shape (N, K) for input (N, C, H, W) or (C, H, W)."""
    x = ad.constant(x)
    if x.shape == spec.input_shape:
        x = ad.reshape(x, (1,) + spec.input_shape)
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(f"input {x.shape} does not match model input {spec.input_shape}")
    p = {k: ad.constant(v) for k, v in params.items()}
    h = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            h = ad.conv2d(h, p[f"{i}.conv.weight"], layer.stride, layer.padding)
            if layer.bias:
                h = ad.add(h, ad.reshape(p[f"{i}.conv.bias"], (1, -1, 1, 1)))
        elif isinstance(layer, Activation):
            h = _ACTIVATIONS[layer.kind](h)
        elif isinstance(layer, AvgPool):
            h = ad.avgpool2d(h, layer.size)
        elif isinstance(layer, Flatten):
            h = ad.flatten(h, 1)
        elif isinstance(layer, Dense):
            h = ad.matmul(h, p[f"{i}.fc.weight"])
            if layer.bias:
                h = ad.add(h, p[f"{i}.fc.bias"])
        elif isinstance(layer, Residual):
            pad = layer.kernel // 2
            r = ad.conv2d(h, p[f"{i}.res1.weight"], 1, pad)
            if layer.bias:
                r = ad.add(r, ad.reshape(p[f"{i}.res1.bias"], (1, -1, 1, 1)))
            r = _ACTIVATIONS[layer.activation](r)
            r = ad.conv2d(r, p[f"{i}.res2.weight"], 1, pad)
            if layer.bias:
                r = ad.add(r, ad.reshape(p[f"{i}.res2.bias"], (1, -1, 1, 1)))
            h = ad.add(h, r)
    return h


def loss_and_grads(spec: ModelSpec, params: Parameters, x, labels) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy over a batch and its gradient in parameter order."""
    tens = params.as_tensors(requires_grad=True)
    loss = ad.softmax_cross_entropy(forward(spec, tens, x), labels)
    grads = ad.gradient(loss, list(tens.values()))
    return loss.item(), [g.data for g in grads]


def predict(spec: ModelSpec, params: Parameters, x) -> np.ndarray:
    with ad.no_grad():
        return np.argmax(forward(spec, params, x).data, axis=1)
