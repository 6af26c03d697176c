"""Main classifier with feature taps, the loss-prediction head, and checkpoints."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import Conv2d, Dense, Flatten, GlobalAvgPool, Layer, Net, ParameterSet, ReLU

CHECKPOINT_MAGIC = b"ALGM"
CHECKPOINT_VERSION = 1


@dataclass
class ForwardOutput:
    logits: Tensor
    taps: list[Tensor]
    embedding: Tensor


class MainModel:
    """Sequential classifier exporting activations at ``tap_points``.

    ``embedding`` in the forward output is the input of the final layer,
    used as the feature space for coreset selection.
    """

    def __init__(self, layers: list[Layer], input_shape, num_classes: int,
                 tap_points=(), rng: np.random.Generator | None = None):
        self.net = Net(layers, input_shape, rng=rng)
        self.tap_points = [int(t) for t in tap_points]
        if any(b <= a for a, b in zip(self.tap_points, self.tap_points[1:])):
            raise ValueError("tap_points must be strictly increasing")
        if self.tap_points and (self.tap_points[0] < 0 or self.tap_points[-1] >= len(layers)):
            raise ValueError("tap_points must index existing layers")
        if self.net.output_shape != (num_classes,):
            raise ValueError(f"model output {self.net.output_shape} != ({num_classes},)")
        self.num_classes = num_classes

    @property
    def params(self) -> ParameterSet:
        return self.net.params

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.net.input_shape

    @property
    def tap_shapes(self) -> list[tuple[int, ...]]:
        return [self.net.shapes[i + 1] for i in self.tap_points]

    @property
    def last_layer_params(self) -> list[str]:
        i = len(self.net.layers) - 1
        return [f"{self.net.prefix}{i}.{p}" for p in self.net.layers[i].param_names]

    def forward(self, batch) -> ForwardOutput:
        penultimate = len(self.net.layers) - 2
        keep = frozenset(self.tap_points) | {penultimate}
        logits, kept = self.net.run(batch, keep)
        embedding = kept[penultimate] if penultimate >= 0 else ag.as_tensor(batch)
        return ForwardOutput(logits, [kept[i] for i in self.tap_points], embedding)

    __call__ = forward


def main_forward(model: MainModel, batch) -> ForwardOutput:
    return model.forward(batch)


class AuxModel:
    """Loss-prediction head: one pool-dense-relu block per tap, then a dense to one value."""

    def __init__(self, tap_shapes, hidden: int = 32, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.tap_shapes = [tuple(s) for s in tap_shapes]
        self.hidden = hidden
        self.blocks = []
        for i, shape in enumerate(self.tap_shapes):
            layers = [GlobalAvgPool(), Dense(shape[0], hidden), ReLU()]
            self.blocks.append(Net(layers, shape, rng=rng, prefix=f"aux.block{i}.layer"))
        self.head = Net([Dense(hidden * len(self.blocks), 1)], (hidden * len(self.blocks),),
                        rng=rng, prefix="aux.head.layer")
        params = ParameterSet()
        for net in self.blocks + [self.head]:
            params = params.merged(net.params)
        self.params = params

    def forward(self, taps) -> Tensor:
        if len(taps) != len(self.blocks):
            raise ValueError(f"expected {len(self.blocks)} taps, got {len(taps)}")
        if not self.blocks:
            raise ValueError("auxiliary model has no blocks")
        outs = []
        for i, (block, tap) in enumerate(zip(self.blocks, taps)):
            try:
                out, _ = block.run(tap)
            except ValueError as exc:
                raise ValueError(f"aux block {i}: {exc}") from None
            outs.append(out)
        joined = outs[0] if len(outs) == 1 else ag.concat(outs, axis=1)
        out, _ = self.head.run(joined)
        return out

    __call__ = forward


def aux_forward(aux: AuxModel, taps) -> Tensor:
    return aux.forward(taps)


@dataclass
class ModelSpec:
    """Architecture knobs; ``kind`` 'auto' picks a CNN for image input and an MLP otherwise."""

    kind: str = "auto"
    conv_channels: list[int] = field(default_factory=lambda: [8, 16])
    kernel_size: int = 7
    padding: str = "valid"
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    aux_hidden: int = 32

    @classmethod
    def from_dict(cls, d: dict | None) -> "ModelSpec":
        d = dict(d or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model fields: {sorted(unknown)}")
        return cls(**d)


def main_layers(spec: ModelSpec, input_shape, num_classes: int) -> tuple[list[Layer], list[int]]:
    input_shape = tuple(input_shape)
    kind = spec.kind
    if kind == "auto":
        if len(input_shape) == 3:
            kind = "cnn"
        elif len(input_shape) == 1:
            kind = "mlp"
        else:
            raise ValueError(f"unsupported input rank {len(input_shape)} for shape {input_shape}")
    layers: list[Layer] = []
    taps: list[int] = []
    if kind == "cnn":
        if len(input_shape) != 3:
            raise ValueError(f"cnn needs (C, H, W) input, got {input_shape}")
        channels = input_shape[0]
        for out_ch in spec.conv_channels:
            layers += [Conv2d(channels, out_ch, spec.kernel_size, spec.padding), ReLU()]
            taps.append(len(layers) - 1)
            channels = out_ch
        layers += [GlobalAvgPool(), Dense(channels, num_classes)]
    elif kind == "mlp":
        if len(input_shape) != 1:
            layers.append(Flatten())
        width = int(np.prod(input_shape))
        for h in spec.hidden:
            layers += [Dense(width, h), ReLU()]
            taps.append(len(layers) - 1)
            width = h
        layers.append(Dense(width, num_classes))
    else:
        raise ValueError(f"unknown model kind {spec.kind!r}")
    return layers, taps


def build_models(input_shape, num_classes: int, spec: ModelSpec | None = None,
                 rng: np.random.Generator | None = None) -> tuple[MainModel, AuxModel]:
    spec = spec or ModelSpec()
    rng = rng if rng is not None else np.random.default_rng(0)
    layers, taps = main_layers(spec, input_shape, num_classes)
    main = MainModel(layers, input_shape, num_classes, taps, rng=rng)
    aux = AuxModel(main.tap_shapes, spec.aux_hidden, rng=rng)
    return main, aux


def build_default_desk_model(input_shape, num_classes: int, seed: int = 0,
                             spec: ModelSpec | None = None) -> tuple[MainModel, AuxModel]:
    """Default small CNN (image input) or MLP (vector input) plus its aux head."""
    return build_models(input_shape, num_classes, spec, np.random.default_rng(seed))


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params: ParameterSet) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad magic: not an ALGM checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(blob):
                raise ValueError(f"truncated payload for {name!r} at byte {pos}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"truncated checkpoint at byte {pos}") from exc
    return out
