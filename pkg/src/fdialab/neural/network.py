"""Multi-label attack locator: architecture presets, model, serialization.

The locator maps a measurement vector to one confidence per meter.  Input
standardization (per-meter mean/std of the training split) is part of the
model and of the differentiable forward map, so gradients with respect to raw
per-unit measurements chain through it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, NumericError
from .layers import BatchNorm1d, Conv1d, Flatten, LeakyReLU, Linear, sigmoid

MODEL_JSON_VERSION = 1

DEFAULT_LEAKY_SLOPE = 0.01
DEFAULT_BN_MOMENTUM = 0.1
DEFAULT_BN_EPSILON = 1e-5

# kernel sizes by grid size bracket; widths sized to train on a workstation
_PRESETS = (
    (14, (10, 5, 3, 3), (16, 32, 32, 32)),
    (30, (10, 5, 3, 3, 3), (16, 32, 32, 32, 32)),
    (10 ** 9, (5, 5, 5, 3, 3, 3), (16, 32, 32, 64, 64, 64)),
)


@dataclass(frozen=True)
class ArchitectureSpec:
    """Ordered layer descriptions; conv stacks keep the spatial length at
    n_meters (stride 1, same padding), the final linear maps to one logit per
    meter, and a sigmoid turns logits into confidences."""

    n_meters: int
    layers: tuple[dict, ...]

    def validate(self) -> None:
        channels, length = 1, self.n_meters
        flat = None
        for spec in self.layers:
            kind = spec["type"]
            if kind == "conv":
                if spec["in_channels"] != channels:
                    raise ContractError(
                        f"conv expects in_channels={channels}, spec says {spec['in_channels']}")
                channels = spec["out_channels"]
            elif kind == "batchnorm":
                if spec["channels"] != channels:
                    raise ContractError("batchnorm channel count mismatch")
            elif kind == "leaky_relu":
                pass
            elif kind == "flatten":
                flat = channels * length
            elif kind == "linear":
                if flat is None or spec["in_features"] != flat:
                    raise ContractError("linear input features do not match flattened size")
                flat = spec["out_features"]
            elif kind == "sigmoid":
                pass
            else:
                raise ContractError(f"unknown layer type {kind!r}")
        if flat != self.n_meters:
            raise ContractError(
                f"architecture must end with {self.n_meters} outputs, got {flat}")

    def to_json(self) -> dict:
        return {"n_meters": self.n_meters, "layers": list(self.layers)}

    @staticmethod
    def from_json(obj: dict) -> "ArchitectureSpec":
        spec = ArchitectureSpec(n_meters=obj["n_meters"],
                                layers=tuple(obj["layers"]))
        spec.validate()
        return spec


def default_architecture(n_meters: int, n_bus: int,
                         kernels: tuple[int, ...] | None = None,
                         widths: tuple[int, ...] | None = None) -> ArchitectureSpec:
    """Convolutional stack sized for the grid: conv/batchnorm/leaky-relu blocks,
    then flatten, one fully connected layer and a sigmoid output."""
    if kernels is None or widths is None:
        for max_bus, preset_kernels, preset_widths in _PRESETS:
            if n_bus <= max_bus:
                kernels = kernels or preset_kernels
                widths = widths or preset_widths
                break
    if len(kernels) != len(widths):
        raise ContractError("kernels and widths must have equal length")
    layers: list[dict] = []
    in_ch = 1
    for k, w in zip(kernels, widths):
        layers.append({"type": "conv", "kernel": int(k),
                       "in_channels": in_ch, "out_channels": int(w)})
        layers.append({"type": "batchnorm", "channels": int(w),
                       "momentum": DEFAULT_BN_MOMENTUM, "epsilon": DEFAULT_BN_EPSILON})
        layers.append({"type": "leaky_relu", "slope": DEFAULT_LEAKY_SLOPE})
        in_ch = int(w)
    layers.append({"type": "flatten"})
    layers.append({"type": "linear", "in_features": in_ch * n_meters,
                   "out_features": n_meters})
    layers.append({"type": "sigmoid"})
    spec = ArchitectureSpec(n_meters=n_meters, layers=tuple(layers))
    spec.validate()
    return spec


def _build_layer(spec: dict):
    kind = spec["type"]
    if kind == "conv":
        return Conv1d(spec["kernel"], spec["in_channels"], spec["out_channels"])
    if kind == "batchnorm":
        return BatchNorm1d(spec["channels"], spec.get("momentum", DEFAULT_BN_MOMENTUM),
                           spec.get("epsilon", DEFAULT_BN_EPSILON))
    if kind == "leaky_relu":
        return LeakyReLU(spec.get("slope", DEFAULT_LEAKY_SLOPE))
    if kind == "flatten":
        return Flatten()
    if kind == "linear":
        return Linear(spec["in_features"], spec["out_features"])
    if kind == "sigmoid":
        return None  # applied functionally on top of the logits
    raise ContractError(f"unknown layer type {kind!r}")


@dataclass
class NalModel:
    """A parameterized locator plus its input standardization and mode."""

    arch: ArchitectureSpec
    input_mean: np.ndarray
    input_std: np.ndarray
    case_name: str = ""
    mode: str = "eval"  # "train" | "eval"
    training_meta: dict = field(default_factory=dict)
    _layers: list = field(default_factory=list, repr=False)
    _names: list = field(default_factory=list, repr=False)

    @staticmethod
    def initialize(arch: ArchitectureSpec, input_mean: np.ndarray,
                   input_std: np.ndarray, rng: np.random.Generator,
                   case_name: str = "") -> "NalModel":
        arch.validate()
        model = NalModel(arch=arch,
                         input_mean=np.asarray(input_mean, dtype=float),
                         input_std=np.asarray(input_std, dtype=float),
                         case_name=case_name)
        model._build()
        for layer in model._layers:
            if layer is not None:
                layer.init_params(rng)
        return model

    def _build(self) -> None:
        self._layers = []
        self._names = []
        counts: dict[str, int] = {}
        for spec in self.arch.layers:
            kind = spec["type"]
            counts[kind] = counts.get(kind, 0) + 1
            self._layers.append(_build_layer(spec))
            self._names.append(f"{kind}{counts[kind]}")
        if self.input_std.shape != (self.arch.n_meters,) or \
                self.input_mean.shape != (self.arch.n_meters,):
            raise ContractError("standardization vectors must have length n_meters")
        if np.any(self.input_std <= 0):
            raise ContractError("input_std must be strictly positive")

    @property
    def n_meters(self) -> int:
        return self.arch.n_meters

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in zip(self._names, self._layers):
            if layer is None:
                continue
            for pname, value in layer.params().items():
                out[f"{name}.{pname}"] = value
        return out

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        for name, layer in zip(self._names, self._layers):
            if layer is None:
                continue
            for pname in layer.params():
                key = f"{name}.{pname}"
                setattr(layer, pname, np.array(values[key], dtype=float))

    def batchnorm_layers(self) -> dict[str, BatchNorm1d]:
        return {name: layer for name, layer in zip(self._names, self._layers)
                if isinstance(layer, BatchNorm1d)}

    # -- forward / backward ------------------------------------------------

    def forward_batch(self, z: np.ndarray, train: bool = False):
        """Logits for a (batch, m) matrix of raw measurements, plus the
        context stack the backward pass consumes."""
        z = np.asarray(z, dtype=float)
        if z.ndim != 2 or z.shape[1] != self.n_meters:
            raise ContractError(
                f"expected (batch, {self.n_meters}) input, got {z.shape}")
        x = (z - self.input_mean) / self.input_std
        x = x[:, None, :]  # single input channel
        ctxs = []
        for name, layer in zip(self._names, self._layers):
            if layer is None:
                continue
            x, ctx = layer.forward(x, train)
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite activation after layer {name}")
            ctxs.append(ctx)
        return x, ctxs

    def backward_batch(self, ctxs: list, dlogits: np.ndarray, train: bool = False):
        """Gradients of a scalar loss: (parameter grads, gradient w.r.t. raw z)."""
        grads: dict[str, np.ndarray] = {}
        dx = dlogits
        live = [(name, layer) for name, layer in zip(self._names, self._layers)
                if layer is not None]
        for (name, layer), ctx in zip(reversed(live), reversed(ctxs)):
            dx, layer_grads = layer.backward(ctx, dx)
            if not np.all(np.isfinite(dx)):
                raise NumericError(f"non-finite gradient below layer {name}")
            for pname, g in layer_grads.items():
                grads[f"{name}.{pname}"] = g
        dz = dx[:, 0, :] / self.input_std
        return grads, dz

    def forward(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(logits, confidences) for one measurement vector, honoring mode."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_meters,):
            raise ContractError(
                f"expected measurement vector of length {self.n_meters}, got {z.shape}")
        logits, _ = self.forward_batch(z[None, :], train=(self.mode == "train"))
        logits = logits[0]
        return logits, sigmoid(logits)

    def predict_labels(self, z: np.ndarray) -> np.ndarray:
        """Binary labels by thresholding confidences at 0.5 (strict)."""
        if self.mode != "eval":
            raise ContractError("predict_labels requires eval mode")
        _, conf = self.forward(z)
        return (conf > 0.5).astype(np.int8)

    def predict_labels_batch(self, z: np.ndarray) -> np.ndarray:
        if self.mode != "eval":
            raise ContractError("predict_labels_batch requires eval mode")
        logits, _ = self.forward_batch(z, train=False)
        return (sigmoid(logits) > 0.5).astype(np.int8)

    # -- serialization -------------------------------------------------------

    def to_json(self) -> dict:
        params = {name: {"shape": list(value.shape),
                         "data": [float(v) for v in value.ravel()]}
                  for name, value in self.parameters().items()}
        bn_stats = {name: {"mean": [float(v) for v in layer.running_mean],
                           "var": [float(v) for v in layer.running_var]}
                    for name, layer in self.batchnorm_layers().items()}
        return {
            "version": MODEL_JSON_VERSION,
            "case_name": self.case_name,
            "arch": self.arch.to_json(),
            "standardization": {"mean": [float(v) for v in self.input_mean],
                                "std": [float(v) for v in self.input_std]},
            "parameters": params,
            "bn_running_stats": bn_stats,
            "training": self.training_meta,
        }

    @staticmethod
    def from_json(obj: dict) -> "NalModel":
        if obj.get("version") != MODEL_JSON_VERSION:
            raise ContractError(f"unsupported model.json version {obj.get('version')!r}")
        arch = ArchitectureSpec.from_json(obj["arch"])
        model = NalModel(arch=arch,
                         input_mean=np.array(obj["standardization"]["mean"]),
                         input_std=np.array(obj["standardization"]["std"]),
                         case_name=obj.get("case_name", ""),
                         training_meta=obj.get("training", {}))
        model._build()
        values = {name: np.array(p["data"], dtype=float).reshape(p["shape"])
                  for name, p in obj["parameters"].items()}
        model.set_parameters(values)
        for name, layer in model.batchnorm_layers().items():
            stats = obj["bn_running_stats"][name]
            layer.running_mean = np.array(stats["mean"], dtype=float)
            layer.running_var = np.array(stats["var"], dtype=float)
        return model


def save_model(model: NalModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh)
        fh.write("\n")


def load_model(path) -> NalModel:
    with open(path) as fh:
        return NalModel.from_json(json.load(fh))
