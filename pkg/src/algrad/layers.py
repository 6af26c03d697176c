"""Layer stack, parameter storage and the network forward/backward entry points."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class ParameterSet:
    """Ordered, uniquely named collection of trainable leaf tensors."""

    def __init__(self, items=()):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in items:
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    @property
    def total_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def merged(self, other: "ParameterSet") -> "ParameterSet":
        """A view holding the same leaf tensors as self followed by other."""
        out = ParameterSet()
        for name, t in list(self.items()) + list(other.items()):
            if name in out:
                raise ValueError(f"duplicate parameter name {name!r}")
            out._params[name] = t
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name, t in self.items():
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {v.shape} vs {t.shape}")
            t.data = v.copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Layer:
    kind = "layer"
    param_names: tuple[str, ...] = ()

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def __call__(self, x: Tensor, params: dict[str, Tensor]) -> Tensor:
        raise NotImplementedError

    def sample_grad_sq(self, x: np.ndarray, g: np.ndarray) -> dict[str, np.ndarray]:
        """Per-sample squared norms of each parameter's gradient, given the layer input and
        the gradient at its output."""
        return {}

    def describe(self) -> dict:
        return {"kind": self.kind}


@dataclass
class Dense(Layer):
    fan_in: int
    fan_out: int
    kind = "dense"
    param_names = ("weight", "bias")

    def output_shape(self, in_shape):
        if in_shape != (self.fan_in,):
            raise ValueError(f"expected input shape ({self.fan_in},), got {in_shape}")
        return (self.fan_out,)

    def init_params(self, rng):
        return {"weight": he_normal(rng, (self.fan_in, self.fan_out), self.fan_in),
                "bias": np.zeros(self.fan_out)}

    def __call__(self, x, params):
        return x @ params["weight"] + params["bias"]

    def sample_grad_sq(self, x, g):
        # The weight gradient is the outer product x_n g_n^T, whose norm factorizes.
        g_sq = (g * g).sum(axis=1)
        return {"weight": (x * x).sum(axis=1) * g_sq, "bias": g_sq}

    def describe(self):
        return {"kind": self.kind, "fan_in": self.fan_in, "fan_out": self.fan_out}


@dataclass
class Conv2d(Layer):
    in_channels: int
    out_channels: int
    kernel_size: int
    padding: str = "valid"
    kind = "conv2d"
    param_names = ("weight", "bias")

    def __post_init__(self):
        if self.padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {self.padding!r}")
        if self.padding == "same" and self.kernel_size % 2 == 0:
            raise ValueError("same padding requires an odd kernel size")

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ValueError(f"expected ({self.in_channels}, H, W) input, got {in_shape}")
        _, h, w = in_shape
        if self.padding == "same":
            return (self.out_channels, h, w)
        k = self.kernel_size
        if h < k or w < k:
            raise ValueError(f"input {h}x{w} smaller than kernel {k}x{k}")
        return (self.out_channels, h - k + 1, w - k + 1)

    def init_params(self, rng):
        k = self.kernel_size
        fan_in = self.in_channels * k * k
        return {"weight": he_normal(rng, (self.out_channels, self.in_channels, k, k), fan_in),
                "bias": np.zeros(self.out_channels)}

    def __call__(self, x, params):
        return ag.conv2d(x, params["weight"], params["bias"], self.padding)

    def sample_grad_sq(self, x, g):
        k = self.kernel_size
        cols = ag.im2col(ag.pad_input(x, k, self.padding)[0], k)
        g3 = g.reshape(g.shape[0], self.out_channels, -1)
        gw = np.matmul(g3, cols.transpose(0, 2, 1))
        gb = g3.sum(axis=2)
        return {"weight": (gw * gw).sum(axis=(1, 2)), "bias": (gb * gb).sum(axis=1)}

    def describe(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_size": self.kernel_size,
                "padding": self.padding}


class ReLU(Layer):
    kind = "relu"

    def __call__(self, x, params):
        return ag.relu(x)


class GlobalAvgPool(Layer):
    """Mean over all spatial axes; a vector input passes through unchanged."""

    kind = "global-average-pool"

    def output_shape(self, in_shape):
        return in_shape[:1]

    def __call__(self, x, params):
        if x.ndim <= 2:
            return x
        return ag.mean(x, axis=tuple(range(2, x.ndim)))


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def __call__(self, x, params):
        return ag.reshape(x, (x.shape[0], -1))


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, ReLU, GlobalAvgPool, Flatten)}


def layer_from_dict(spec: dict) -> Layer:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**spec)


class Net:
    """A sequential layer stack bound to its parameters.

    Parameter names are ``{prefix}{layer_index}.{weight|bias}`` so the
    ordering is fixed by the architecture alone.
    """

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...],
                 rng: np.random.Generator | None = None, prefix: str = "layer"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.prefix = prefix
        self.shapes = [self.input_shape]
        for i, layer in enumerate(self.layers):
            try:
                self.shapes.append(tuple(layer.output_shape(self.shapes[-1])))
            except ValueError as exc:
                raise ValueError(f"layer {i} ({layer.kind}): {exc}") from None
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = ParameterSet()
        for i, layer in enumerate(self.layers):
            for pname, value in layer.init_params(rng).items():
                self.params.add(f"{prefix}{i}.{pname}", value)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def layer_params(self, i: int) -> dict[str, Tensor]:
        layer = self.layers[i]
        return {p: self.params[f"{self.prefix}{i}.{p}"] for p in layer.param_names}

    def check_input(self, batch: Tensor) -> None:
        if tuple(batch.shape[1:]) != self.input_shape:
            raise ValueError(f"layer 0 ({self.layers[0].kind if self.layers else 'input'}): "
                             f"expected per-sample shape {self.input_shape}, "
                             f"got {tuple(batch.shape[1:])}")

    def run(self, batch, keep: frozenset[int] = frozenset()) -> tuple[Tensor, dict[int, Tensor]]:
        """Forward pass returning the output and the activations after layers in ``keep``."""
        x = ag.as_tensor(batch)
        self.check_input(x)
        kept = {}
        for i, layer in enumerate(self.layers):
            x = layer(x, self.layer_params(i))
            if i in keep:
                kept[i] = x
        return x, kept

    def sample_grad_sq_norms(self, batch, loss_fn, names=None) -> np.ndarray:
        """Squared gradient norm of ``loss_fn(output)[n]`` w.r.t. the parameters, per sample n.

        One backward pass of the summed loss serves the whole batch: samples never interact
        (no batch statistics), so the gradient reaching each layer output row is that
        sample's own. ``names`` restricts the norm to a subset of parameters.
        """
        x = ag.as_tensor(batch)
        self.check_input(x)
        inputs, outputs = {}, {}
        for i, layer in enumerate(self.layers):
            if layer.param_names:
                inputs[i] = x.data
                # Constant parameters: only gradients at layer outputs are needed here.
                frozen = {p: Tensor(t.data) for p, t in self.layer_params(i).items()}
                x = layer(x, frozen)
                if not x.requires_grad:
                    x = Tensor(x.data, requires_grad=True)
                outputs[i] = x
            else:
                x = layer(x, {})
        total = ag.tsum(loss_fn(x))
        order = list(outputs)
        grads = ag.grad(total, [outputs[i] for i in order], allow_unused=True)
        sq = np.zeros(len(x.data))
        for i, g in zip(order, grads):
            if g is None:
                continue
            for pname, value in self.layers[i].sample_grad_sq(inputs[i], g).items():
                if names is None or f"{self.prefix}{i}.{pname}" in names:
                    sq += value
        return sq

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]


def forward(net: Net, batch) -> Tensor:
    out, _ = net.run(batch)
    return out


def backward(net_or_params, loss: Tensor) -> "OrderedDict[str, np.ndarray]":
    """Gradients of a scalar loss with respect to every parameter, keyed by name."""
    params = net_or_params.params if isinstance(net_or_params, Net) else net_or_params
    grads = ag.grad(loss, params.tensors(), allow_unused=True)
    return OrderedDict(zip(params.names(), grads))
