"""Split-model definition: layer specs, presets, and the client/server halves.

A model is an ordered layer list cut at a split index: layers before the
cut run on the client (the only place binarized convs are allowed), layers
after it on the server. Binarized convs follow the compose order
conv(sign(w)) -> batch norm -> sign, with the straight-through estimator
and weight clipping on the way back.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .binary import (
    BinaryConvPlan,
    binary_conv2d,
    fast_path_available,
    sign,
    ste_backward,
)
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    relu: bool = True


@dataclass(frozen=True)
class BConv:
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class Pool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    out_features: int
    relu: bool = False


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.25


LayerSpec = Conv | BConv | Pool | Flatten | Dense | Dropout


@dataclass(frozen=True)
class ModelSpec:
    """Layer stack plus the client/server split index."""

    name: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    layers: tuple[LayerSpec, ...]
    split: int

    def validate(self) -> list[tuple[int, ...]]:
        """Check layer chaining and the split; returns per-layer output shapes."""
        if not 1 <= self.split <= len(self.layers):
            raise ConfigError(
                f"split {self.split} out of range for {len(self.layers)} layers"
            )
        shapes = []
        shape: tuple[int, ...] = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, BConv):
                if i >= self.split:
                    raise ConfigError(
                        f"binarized conv at layer {i} is server-side (split {self.split})"
                    )
                c, h, w = shape
                if h < layer.kernel or w < layer.kernel:
                    raise DimensionError(f"layer {i}: kernel {layer.kernel} exceeds {shape}")
                shape = (
                    layer.out_channels,
                    (h - layer.kernel) // layer.stride + 1,
                    (w - layer.kernel) // layer.stride + 1,
                )
            elif isinstance(layer, Conv):
                c, h, w = shape
                hp, wp = h + 2 * layer.padding, w + 2 * layer.padding
                if hp < layer.kernel or wp < layer.kernel:
                    raise DimensionError(f"layer {i}: kernel {layer.kernel} exceeds {shape}")
                shape = (
                    layer.out_channels,
                    (hp - layer.kernel) // layer.stride + 1,
                    (wp - layer.kernel) // layer.stride + 1,
                )
            elif isinstance(layer, Pool):
                c, h, w = shape
                if h % 2 or w % 2:
                    raise DimensionError(f"layer {i}: pool needs even extents, got {shape}")
                shape = (c, h // 2, w // 2)
            elif isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
            elif isinstance(layer, Dense):
                if len(shape) != 1:
                    raise DimensionError(f"layer {i}: dense needs flat input, got {shape}")
                shape = (layer.out_features,)
            elif isinstance(layer, Dropout):
                pass
            shapes.append(shape)
        return shapes

    @property
    def split_shape(self) -> tuple[int, ...]:
        """Shape of the activations crossing the wire (no batch axis)."""
        return self.validate()[self.split - 1]

    @property
    def is_binarized(self) -> bool:
        """True when the split-layer output is {-1,+1} (last client layer binarizes)."""
        shapes = self.validate()
        del shapes
        binary = False
        for layer in self.layers[: self.split]:
            if isinstance(layer, BConv):
                binary = True
            elif isinstance(layer, Conv):
                binary = False
        return binary


def _classifier_tail(hidden: int = 128, rate: float = 0.25) -> tuple[LayerSpec, ...]:
    return (Flatten(), Dense(hidden, relu=True), Dropout(rate), Dense(10))


PRESETS: dict[str, ModelSpec] = {}


def _register(spec: ModelSpec) -> None:
    PRESETS[spec.name] = spec


_register(
    ModelSpec(
        "sl-float",
        (1, 28, 28),
        (Conv(8, 5), Pool(), Conv(16, 5), Pool()) + _classifier_tail(),
        split=1,
    )
)
_register(
    ModelSpec(
        "1b-sl",
        (1, 28, 28),
        (BConv(8, 5), Pool(), Conv(16, 5), Pool()) + _classifier_tail(),
        split=1,
    )
)
_register(replace(PRESETS["1b-sl"], name="b1-sl"))
_register(
    ModelSpec(
        "2b-sl",
        (1, 28, 28),
        (BConv(8, 5), BConv(8, 3), Pool(), Conv(16, 5)) + _classifier_tail(),
        split=2,
    )
)
_register(
    ModelSpec(
        "3b-sl",
        (1, 28, 28),
        (BConv(8, 5), BConv(8, 3), BConv(8, 3), Pool(), Conv(16, 5)) + _classifier_tail(),
        split=3,
    )
)
_register(
    ModelSpec(
        "b2-sl",
        (1, 28, 28),
        (BConv(8, 5), Pool(), BConv(16, 5), Pool()) + _classifier_tail(),
        split=3,
    )
)
_register(
    ModelSpec(
        "b3-sl",
        (1, 28, 28),
        (BConv(8, 5), Pool(), BConv(16, 5), Pool(), BConv(32, 3)) + _classifier_tail(),
        split=5,
    )
)
_register(
    ModelSpec(
        "dup64",
        (1, 28, 28),
        (BConv(64, 2, stride=2), Pool(), Flatten(), Dense(64, relu=True), Dropout(), Dense(10)),
        split=1,
    )
)


def get_preset(name: str) -> ModelSpec:
    key = name.lower()
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return PRESETS[key]


def init_layer_params(
    spec: ModelSpec, rng: np.random.Generator
) -> tuple[list[dict[str, nn.SgdParam]], list[nn.BatchNormState | None]]:
    """Initialize per-layer parameters (uniform [-k, k], k = sqrt(1/fan_in))."""
    shapes = spec.validate()
    params: list[dict[str, nn.SgdParam]] = []
    bn_states: list[nn.BatchNormState | None] = []
    shape: tuple[int, ...] = spec.input_shape
    for layer in spec.layers:
        p: dict[str, nn.SgdParam] = {}
        bn: nn.BatchNormState | None = None
        if isinstance(layer, (Conv, BConv)):
            c_in = shape[0]
            fan_in = c_in * layer.kernel * layer.kernel
            w = nn.uniform_init(rng, (layer.out_channels, c_in, layer.kernel, layer.kernel), fan_in)
            p["w"] = nn.SgdParam(w)
            if isinstance(layer, BConv):
                bn = nn.BatchNormState.create(layer.out_channels)
                p["gamma"] = nn.SgdParam(bn.gamma, decay=False)
                p["beta"] = nn.SgdParam(bn.beta, decay=False)
        elif isinstance(layer, Dense):
            d_in = shape[0] if len(shape) == 1 else int(np.prod(shape))
            p["w"] = nn.SgdParam(nn.uniform_init(rng, (d_in, layer.out_features), d_in))
            p["b"] = nn.SgdParam(nn.uniform_init(rng, (layer.out_features,), d_in), decay=False)
        params.append(p)
        bn_states.append(bn)
        shape = shapes[len(params) - 1]
    return params, bn_states


class _Half:
    """Shared parameter bookkeeping for the two model halves."""

    def __init__(
        self,
        spec: ModelSpec,
        params: list[dict[str, nn.SgdParam]],
        bn_states: list[nn.BatchNormState | None],
        layer_range: range,
        sgd: nn.SgdConfig,
    ) -> None:
        self.spec = spec
        self.params = params
        self.bn_states = bn_states
        self.layer_range = layer_range
        self.sgd = sgd

    def named_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays, keyed by absolute layer index."""
        out: dict[str, np.ndarray] = {}
        for i in self.layer_range:
            for key, param in self.params[i].items():
                out[f"layer{i}.{key}"] = param.value
            bn = self.bn_states[i]
            if bn is not None:
                out[f"layer{i}.running_mean"] = bn.running_mean
                out[f"layer{i}.running_var"] = bn.running_var
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_arrays().items()}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        """Copy saved arrays back in place so batch-norm views stay shared."""
        current = self.named_arrays()
        for key, arr in arrays.items():
            if key not in current:
                raise ConfigError(f"checkpoint key {key!r} not in model {self.spec.name!r}")
            if current[key].shape != arr.shape:
                raise DimensionError(
                    f"checkpoint {key!r} shape {arr.shape} != model {current[key].shape}"
                )
            current[key][...] = arr


class ClientHalf(_Half):
    """Layers before the split; owns every binarized conv."""

    def __init__(
        self,
        spec: ModelSpec,
        params: list[dict[str, nn.SgdParam]],
        bn_states: list[nn.BatchNormState | None],
        sgd: nn.SgdConfig,
    ) -> None:
        super().__init__(spec, params, bn_states, range(0, spec.split), sgd)
        self._plans: dict[tuple[int, int], BinaryConvPlan] = {}

    def _plan(self, idx: int, layer: BConv, x_shape: tuple[int, ...]) -> BinaryConvPlan:
        key = (idx, x_shape[0])
        plan = self._plans.get(key)
        if plan is None:
            plan = BinaryConvPlan.build(
                x_shape[0], x_shape[1], x_shape[2], x_shape[3],
                layer.out_channels, layer.kernel, layer.stride,
            )
            self._plans[key] = plan
        return plan

    def forward(self, x: np.ndarray, training: bool) -> tuple[np.ndarray, dict]:
        """Run the client half; returns (activation, context for backward).

        The context records per-layer caches, whether the output is
        {-1,+1}, and the pre-binarization activation of the final layer.
        """
        a = x.astype(np.float32, copy=False)
        binary = False
        caches: list[dict] = []
        a_pre: np.ndarray | None = None
        for i in self.layer_range:
            layer = self.spec.layers[i]
            if isinstance(layer, BConv):
                w = self.params[i]["w"].value
                wb = sign(w)
                if binary and fast_path_available():
                    plan = self._plan(i, layer, a.shape)
                    z = binary_conv2d(
                        plan.pack_input(a), plan.pack_kernels(wb), plan
                    ).astype(np.float32)
                else:
                    z = nn.conv2d_forward(a, wb, stride=layer.stride)
                bn = self.bn_states[i]
                y, bn_cache = nn.batchnorm_forward(z, bn, training)
                caches.append(
                    {"kind": "bconv", "i": i, "a_in": a, "wb": wb, "bn_pre": y,
                     "bn_cache": bn_cache, "stride": layer.stride}
                )
                a_pre = y
                a = sign(y)
                binary = True
            elif isinstance(layer, Conv):
                w = self.params[i]["w"].value
                z = nn.conv2d_forward(a, w, stride=layer.stride, padding=layer.padding)
                caches.append({"kind": "conv", "i": i, "a_in": a, "z": z,
                               "stride": layer.stride, "padding": layer.padding})
                a = nn.relu(z)
                a_pre = None
                binary = False
            elif isinstance(layer, Pool):
                out, idx = nn.maxpool2x2_forward(a)
                caches.append({"kind": "pool", "i": i, "idx": idx})
                a = out
            else:
                raise ConfigError(
                    f"layer {type(layer).__name__} is not supported client-side"
                )
        return a, {"caches": caches, "binary": binary, "a_pre": a_pre}

    def backward(self, grad_out: np.ndarray, ctx: dict) -> None:
        """Propagate the split-layer gradient and update client parameters."""
        g = grad_out.astype(np.float32, copy=False)
        for cache in reversed(ctx["caches"]):
            i = cache["i"]
            if cache["kind"] == "bconv":
                g = ste_backward(cache["bn_pre"], g)
                g, g_gamma, g_beta = nn.batchnorm_backward(
                    cache["bn_cache"], self.bn_states[i], g
                )
                g, g_w = nn.conv2d_backward(
                    cache["a_in"], cache["wb"], g, stride=cache["stride"]
                )
                nn.sgd_step(self.params[i]["gamma"], g_gamma, self.sgd)
                nn.sgd_step(self.params[i]["beta"], g_beta, self.sgd)
                w = self.params[i]["w"]
                nn.sgd_step(w, g_w, self.sgd)
                np.clip(w.value, -1.0, 1.0, out=w.value)
            elif cache["kind"] == "conv":
                g = nn.relu_backward(cache["z"], g)
                g, g_w = nn.conv2d_backward(
                    cache["a_in"], self.params[i]["w"].value, g,
                    stride=cache["stride"], padding=cache["padding"],
                )
                nn.sgd_step(self.params[i]["w"], g_w, self.sgd)
            elif cache["kind"] == "pool":
                g = nn.maxpool2x2_backward(cache["idx"], g)


class ServerHalf(_Half):
    """Layers after the split; full precision throughout."""

    def __init__(
        self,
        spec: ModelSpec,
        params: list[dict[str, nn.SgdParam]],
        bn_states: list[nn.BatchNormState | None],
        sgd: nn.SgdConfig,
    ) -> None:
        super().__init__(spec, params, bn_states, range(spec.split, len(spec.layers)), sgd)

    def forward(
        self, a: np.ndarray, training: bool, rng: np.random.Generator | None = None
    ) -> tuple[np.ndarray, list[dict]]:
        """Run the server half to logits; smashed data is treated as full precision."""
        caches: list[dict] = []
        x = a.astype(np.float32, copy=False)
        for i in self.layer_range:
            layer = self.spec.layers[i]
            if isinstance(layer, Conv):
                z = nn.conv2d_forward(x, self.params[i]["w"].value,
                                      stride=layer.stride, padding=layer.padding)
                caches.append({"kind": "conv", "i": i, "a_in": x, "z": z,
                               "stride": layer.stride, "padding": layer.padding,
                               "relu": layer.relu})
                x = nn.relu(z) if layer.relu else z
            elif isinstance(layer, Pool):
                x, idx = nn.maxpool2x2_forward(x)
                caches.append({"kind": "pool", "i": i, "idx": idx})
            elif isinstance(layer, Flatten):
                caches.append({"kind": "flatten", "i": i, "shape": x.shape})
                x = x.reshape(x.shape[0], -1)
            elif isinstance(layer, Dense):
                z = nn.dense_forward(x, self.params[i]["w"].value, self.params[i]["b"].value)
                caches.append({"kind": "dense", "i": i, "a_in": x, "z": z, "relu": layer.relu})
                x = nn.relu(z) if layer.relu else z
            elif isinstance(layer, Dropout):
                if training and rng is None:
                    raise ConfigError("dropout in training mode needs an rng")
                x, mask = nn.dropout_forward(x, layer.rate, rng, training)
                caches.append({"kind": "dropout", "i": i, "mask": mask, "rate": layer.rate})
        return x, caches

    def backward(self, grad_logits: np.ndarray, caches: list[dict]) -> np.ndarray:
        """Update server parameters; returns the gradient w.r.t. the split input."""
        g = grad_logits
        for cache in reversed(caches):
            i = cache["i"]
            if cache["kind"] == "dense":
                if cache["relu"]:
                    g = nn.relu_backward(cache["z"], g)
                g, g_w, g_b = nn.dense_backward(cache["a_in"], self.params[i]["w"].value, g)
                nn.sgd_step(self.params[i]["w"], g_w, self.sgd)
                nn.sgd_step(self.params[i]["b"], g_b, self.sgd)
            elif cache["kind"] == "conv":
                if cache["relu"]:
                    g = nn.relu_backward(cache["z"], g)
                g, g_w = nn.conv2d_backward(
                    cache["a_in"], self.params[i]["w"].value, g,
                    stride=cache["stride"], padding=cache["padding"],
                )
                nn.sgd_step(self.params[i]["w"], g_w, self.sgd)
            elif cache["kind"] == "pool":
                g = nn.maxpool2x2_backward(cache["idx"], g)
            elif cache["kind"] == "flatten":
                g = g.reshape(cache["shape"])
            elif cache["kind"] == "dropout":
                g = nn.dropout_backward(cache["mask"], cache["rate"], g)
        return g


def build_halves(
    spec: ModelSpec, seed: int | np.random.SeedSequence, sgd: nn.SgdConfig
) -> tuple[ClientHalf, ServerHalf]:
    """Initialize both halves from one seed; parameter draws are order-fixed."""
    rng = np.random.default_rng(seed)
    params, bn_states = init_layer_params(spec, rng)
    return (
        ClientHalf(spec, params, bn_states, sgd),
        ServerHalf(spec, params, bn_states, sgd),
    )
