"""Small classifiers built from a declarative spec, with Kaiming init and softmax cross-entropy."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .data import LabeledDataset

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class Dense:
    n_in: int
    n_out: int


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class MaxPool:
    k: int


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Dense, Conv, MaxPool, Flatten]
_KINDS = {"dense": Dense, "conv": Conv, "maxpool": MaxPool, "flatten": Flatten}
_NAMES = {cls: name for name, cls in _KINDS.items()}


@dataclass(frozen=True)
class ModelSpec:
    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]
    activation: str
    n_c: int
    seed: int = 0
    tanh_gain: float = 5.0 / 3.0
    _layout: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        object.__setattr__(self, "_layout", _plan(self))

    @property
    def n_params(self) -> int:
        return self._layout[-1][1] if self._layout else 0

    def param_slices(self) -> list[tuple[int, int, tuple[int, ...], int]]:
        """(start, stop, shape, layer index) for each weight and bias block."""
        return list(self._layout)

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {"kind": _NAMES[type(layer)]}
            d.update(layer.__dict__)
            layers.append(d)
        return {
            "activation": self.activation,
            "input_shape": list(self.input_shape),
            "layers": layers,
            "n_c": self.n_c,
            "seed": self.seed,
            "tanh_gain": self.tanh_gain,
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for entry in d["layers"]:
            entry = dict(entry)
            layers.append(_KINDS[entry.pop("kind")](**entry))
        return cls(tuple(d["input_shape"]), tuple(layers), d["activation"], int(d["n_c"]),
                   int(d.get("seed", 0)), float(d.get("tanh_gain", 5.0 / 3.0)))

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


def _plan(spec: ModelSpec) -> tuple:
    shape = spec.input_shape
    blocks = []
    offset = 0
    last_param = max((i for i, l in enumerate(spec.layers) if isinstance(l, (Dense, Conv))),
                     default=None)
    if last_param is None:
        raise ValueError("model needs at least one dense or conv layer")
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            if shape != (layer.n_in,):
                raise ValueError(f"layer {i}: dense expects ({layer.n_in},), got {shape}")
            shapes = [(layer.n_in, layer.n_out), (layer.n_out,)]
            shape = (layer.n_out,)
        elif isinstance(layer, Conv):
            if len(shape) != 3 or shape[0] != layer.in_ch:
                raise ValueError(f"layer {i}: conv expects ({layer.in_ch}, H, W), got {shape}")
            oh = (shape[1] - layer.kernel) // layer.stride + 1
            ow = (shape[2] - layer.kernel) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise ValueError(f"layer {i}: kernel larger than input {shape}")
            shapes = [(layer.out_ch, layer.in_ch * layer.kernel ** 2), (layer.out_ch,)]
            shape = (layer.out_ch, oh, ow)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3 or shape[1] < layer.k or shape[2] < layer.k:
                raise ValueError(f"layer {i}: maxpool({layer.k}) on {shape}")
            shape = (shape[0], shape[1] // layer.k, shape[2] // layer.k)
            continue
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
            continue
        else:
            raise TypeError(f"unknown layer {layer!r}")
        for s in shapes:
            size = int(np.prod(s))
            blocks.append((offset, offset + size, s, i))
            offset += size
    if shape != (spec.n_c,) or last_param != len(spec.layers) - 1:
        raise ValueError(f"network must end in a parametric layer of width n_c={spec.n_c}")
    return tuple(blocks)


def tiny_mlp(input_dim: int, n_c: int, hidden=(64, 64), activation: str = "tanh",
             seed: int = 0, tanh_gain: float = 5.0 / 3.0) -> ModelSpec:
    widths = [input_dim, *hidden, n_c]
    layers = tuple(Dense(a, b) for a, b in zip(widths[:-1], widths[1:]))
    return ModelSpec((input_dim,), layers, activation, n_c, seed, tanh_gain)


def tiny_conv(input_shape=(3, 32, 32), n_c: int = 10, channels=(8, 16), kernel: int = 5,
              hidden: int = 64, activation: str = "relu", seed: int = 0,
              tanh_gain: float = 5.0 / 3.0) -> ModelSpec:
    """Two conv + max-pool stages followed by two dense layers."""
    c, h, w = input_shape
    layers: list[Layer] = []
    for out_ch in channels:
        layers += [Conv(c, out_ch, kernel), MaxPool(2)]
        c, h, w = out_ch, (h - kernel + 1) // 2, (w - kernel + 1) // 2
    layers += [Flatten(), Dense(c * h * w, hidden), Dense(hidden, n_c)]
    return ModelSpec(tuple(input_shape), tuple(layers), activation, n_c, seed, tanh_gain)


def init_kaiming(spec: ModelSpec) -> np.ndarray:
    """Kaiming-normal weights, zero biases, drawn from PCG64 seeded by ``spec.seed``.

    Weight variance is gain**2 / fan_in, with gain = sqrt(2) for relu and
    ``spec.tanh_gain`` for tanh. Blocks are filled in layer order.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    gain = math.sqrt(2.0) if spec.activation == "relu" else spec.tanh_gain
    theta = np.zeros(spec.n_params)
    for start, stop, shape, i in spec.param_slices():
        if len(shape) == 1:
            continue
        fan_in = shape[0] if isinstance(spec.layers[i], Dense) else shape[1]
        theta[start:stop] = rng.standard_normal(stop - start) * (gain / math.sqrt(fan_in))
    return theta


def _act(spec: ModelSpec, x: Tensor) -> Tensor:
    return T.relu(x) if spec.activation == "relu" else T.tanh(x)


def _maxpool(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    base = np.arange(n * c * h * w).reshape(n, c, h, w)[:, :, :oh * k, :ow * k]
    win = base.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
    vals = x.data.reshape(-1)[win]
    pick = np.take_along_axis(win, vals.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    return T.take(x, pick)


def logits(spec: ModelSpec, theta: Tensor, x: np.ndarray | Tensor) -> Tensor:
    """Batched forward pass; ``x`` has shape (N, *input_shape) or (N, prod(input_shape))."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    n = x.shape[0]
    expect = int(np.prod(spec.input_shape))
    if int(np.prod(x.shape[1:])) != expect:
        raise ValueError(f"inputs of shape {x.shape[1:]} do not match {spec.input_shape}")
    h = T.reshape(x, (n, *spec.input_shape))
    blocks = iter(spec.param_slices())
    last = len(spec.layers) - 1
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, (Dense, Conv)):
            ws, we, wshape, _ = next(blocks)
            bs, be, bshape, _ = next(blocks)
            W = T.slice_flat(theta, ws, we, wshape)
            b = T.slice_flat(theta, bs, be, bshape)
            if isinstance(layer, Dense):
                h = T.add(T.matmul(h, W), b)
            else:
                _, hh, ww = h.shape[1:]
                oh = (hh - layer.kernel) // layer.stride + 1
                ow = (ww - layer.kernel) // layer.stride + 1
                cols = T.im2col(h, layer.kernel, layer.stride)
                out = T.add(T.matmul(cols, T.transpose(W)), b)
                h = T.transpose(T.reshape(out, (n, oh, ow, layer.out_ch)), (0, 3, 1, 2))
            if i != last:
                h = _act(spec, h)
        elif isinstance(layer, MaxPool):
            h = _maxpool(h, layer.k)
        else:
            h = T.reshape(h, (n, -1))
    return h


def forward(spec: ModelSpec, theta, x) -> np.ndarray:
    """Logits for one example (1-D result) or a batch (2-D result)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.size == int(np.prod(spec.input_shape))
    batch = x.reshape(1, -1) if single else x
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ValueError(f"theta has shape {theta.shape}, spec needs ({spec.n_params},)")
    with T.no_record():
        out = logits(spec, Tensor(theta), batch).data
    return out[0] if single else out


def softmax_ce(z, label: int) -> float:
    z = np.asarray(z, dtype=np.float64)
    if not 0 <= label < z.size:
        raise ValueError(f"label {label} outside [0, {z.size})")
    m = z.max()
    return float(np.log(np.exp(z - m).sum()) + m - z[label])


def per_example_ce(z: Tensor, labels: np.ndarray) -> Tensor:
    n, c = z.shape
    picked = T.take(z, np.arange(n) * c + labels)
    return T.add(T.logsumexp_rows(z), T.neg(picked))


class ModelLoss:
    """Mean softmax cross-entropy of a model over a full dataset."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.n_params = spec.n_params

    def loss(self, theta: Tensor, data: LabeledDataset) -> Tensor:
        if data.n_c != self.spec.n_c:
            raise ValueError(f"dataset has n_c={data.n_c}, model has {self.spec.n_c}")
        losses = per_example_ce(logits(self.spec, theta, data.inputs), data.labels)
        return T.mul(T.pairwise_sum(losses), Tensor(1.0 / data.n_D))
