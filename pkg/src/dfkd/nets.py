"""Small model zoo with feature-map taps for distillation.

Two architectures share the descriptor/parameter machinery:

- ``mlp``: linear stack with ReLU, taps on every hidden activation.
- ``tapcnn``: B blocks of [conv3x3 -> batchnorm -> relu -> maxpool2x2],
  then global-average-pool -> linear; taps on every block's ReLU output.

Quantized variants fake-quantize weights/activations from full-precision
shadow parameters; first and last layers bypass quantization by default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .quant import QuantConfig, quantize_weights, quantize_activations
from .tensor import Tensor


class IncompatibleModelError(ValueError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    kind: str  # "mlp" | "tapcnn"
    num_classes: int
    # tapcnn fields
    channels: tuple = ()
    in_channels: int = 3
    image_size: int = 32
    # mlp fields
    hidden: tuple = ()
    in_features: int = 0

    def __post_init__(self):
        if self.kind not in ("mlp", "tapcnn"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.kind == "tapcnn":
            if not self.channels:
                raise ValueError("tapcnn needs at least one block")
            if self.image_size % (2 ** len(self.channels)) != 0:
                raise ValueError(
                    f"image size {self.image_size} not divisible by 2^{len(self.channels)} pooling"
                )

    @property
    def num_taps(self):
        # feature taps, excluding the implicit final-logits tap
        return len(self.channels) if self.kind == "tapcnn" else len(self.hidden)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "ArchDescriptor":
        d = json.loads(s)
        d["channels"] = tuple(d.get("channels", ()))
        d["hidden"] = tuple(d.get("hidden", ()))
        return cls(**d)


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Model:
    """Parameter container + tapped forward pass for one architecture."""

    def __init__(self, desc: ArchDescriptor, quant: QuantConfig | None = None, seed: int = 0):
        self.desc = desc
        self.quant = quant
        self.mode = "train"
        self.params: dict[str, Tensor] = {}
        self.bn_state: dict[str, dict] = {}
        self._momentum: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)

        if desc.kind == "tapcnn":
            cin = desc.in_channels
            for i, cout in enumerate(desc.channels):
                self.params[f"conv{i}.weight"] = Tensor(
                    _he_uniform(rng, (cout, cin, 3, 3), cin * 9), requires_grad=True
                )
                self.params[f"bn{i}.gamma"] = Tensor(np.ones(cout, np.float32), requires_grad=True)
                self.params[f"bn{i}.beta"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)
                self.bn_state[f"bn{i}"] = {
                    "running_mean": np.zeros(cout, np.float32),
                    "running_var": np.ones(cout, np.float32),
                }
                cin = cout
            self.params["fc.weight"] = Tensor(
                _he_uniform(rng, (cin, desc.num_classes), cin), requires_grad=True
            )
            self.params["fc.bias"] = Tensor(np.zeros(desc.num_classes, np.float32), requires_grad=True)
            self._n_layers = len(desc.channels) + 1
        else:
            fin = desc.in_features
            for i, width in enumerate(desc.hidden):
                self.params[f"fc{i}.weight"] = Tensor(_he_uniform(rng, (fin, width), fin), requires_grad=True)
                self.params[f"fc{i}.bias"] = Tensor(np.zeros(width, np.float32), requires_grad=True)
                fin = width
            self.params["out.weight"] = Tensor(
                _he_uniform(rng, (fin, desc.num_classes), fin), requires_grad=True
            )
            self.params["out.bias"] = Tensor(np.zeros(desc.num_classes, np.float32), requires_grad=True)
            self._n_layers = len(desc.hidden) + 1

    # -- modes -------------------------------------------------------------

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "eval"
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def _layer_quantized(self, layer_idx: int) -> bool:
        if self.quant is None:
            return False
        if layer_idx == 0 and not self.quant.quantize_first_layer:
            return False
        if layer_idx == self._n_layers - 1 and not self.quant.quantize_last_layer:
            return False
        return True

    def _weight(self, name: str, layer_idx: int) -> Tensor:
        w = self.params[name]
        if self._layer_quantized(layer_idx):
            return quantize_weights(w, self.quant.n_bits)
        return w

    # -- forward -----------------------------------------------------------

    def forward_with_taps(self, batch: Tensor):
        """Return (logits, taps); taps are ordered shallow to deep and end
        with the logits tensor."""
        training = self.mode == "train"
        taps = []
        if self.desc.kind == "tapcnn":
            expect = (self.desc.in_channels, self.desc.image_size, self.desc.image_size)
            if batch.data.ndim != 4 or batch.shape[1:] != expect:
                raise T.DimensionError(f"batch shape {batch.shape} does not match descriptor {expect}")
            h = batch
            for i in range(len(self.desc.channels)):
                h = T.conv2d(h, self._weight(f"conv{i}.weight", i), stride=1, padding=1)
                h = T.batch_norm(h, self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"],
                                 self.bn_state[f"bn{i}"], training)
                h = T.relu(h)
                taps.append(h)
                if self._layer_quantized(i):
                    h = quantize_activations(h, self.quant.n_bits)
                h = T.max_pool2x2(h)
            h = T.global_avg_pool(h)
            logits = T.matmul(h, self._weight("fc.weight", self._n_layers - 1)) + self.params["fc.bias"]
        else:
            if batch.data.ndim != 2 or batch.shape[1] != self.desc.in_features:
                raise T.DimensionError(
                    f"batch shape {batch.shape} does not match in_features {self.desc.in_features}"
                )
            h = batch
            for i in range(len(self.desc.hidden)):
                h = T.matmul(h, self._weight(f"fc{i}.weight", i)) + self.params[f"fc{i}.bias"]
                h = T.relu(h)
                taps.append(h)
                if self._layer_quantized(i):
                    h = quantize_activations(h, self.quant.n_bits)
            logits = T.matmul(h, self._weight("out.weight", self._n_layers - 1)) + self.params["out.bias"]
        taps.append(logits)
        return logits, taps

    # -- parameter transfer ------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """All persistent arrays: trainable params plus batch-norm stats."""
        out = {name: p.data.copy() for name, p in self.params.items()}
        for bn, st in self.bn_state.items():
            out[f"{bn}.running_mean"] = st["running_mean"].copy()
            out[f"{bn}.running_var"] = st["running_var"].copy()
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing = expected - set(arrays)
            extra = set(arrays) - expected
            raise IncompatibleModelError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self.params.items():
            if arrays[name].shape != p.data.shape:
                raise IncompatibleModelError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.data.shape}")
            p.data = arrays[name].astype(np.float32).copy()
        for bn, st in self.bn_state.items():
            st["running_mean"] = arrays[f"{bn}.running_mean"].astype(np.float32).copy()
            st["running_var"] = arrays[f"{bn}.running_var"].astype(np.float32).copy()
        self._momentum = {}

    def copy_from(self, other: "Model"):
        """Clone parameters (bit-identical) from a same-descriptor model."""
        if other.desc != self.desc:
            raise IncompatibleModelError(_describe_mismatch(self.desc, other.desc))
        self.load_state_arrays(other.state_arrays())
        self._momentum = {}


def _describe_mismatch(a: ArchDescriptor, b: ArchDescriptor) -> str:
    diffs = [f"{k}: {va!r} != {vb!r}" for (k, va), (_, vb)
             in zip(asdict(a).items(), asdict(b).items()) if va != vb]
    return "architecture descriptors differ: " + "; ".join(diffs)


def init_from(model: Model, source_desc: ArchDescriptor, source_arrays: dict[str, np.ndarray]) -> Model:
    """Copy all shadow parameters from a checkpointed source; reset optimizer
    state. Requires an exact descriptor match."""
    if source_desc != model.desc:
        raise IncompatibleModelError(_describe_mismatch(model.desc, source_desc))
    model.load_state_arrays(source_arrays)
    return model


def sgd_step(model: Model, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
    """Nesterov-momentum SGD on the shadow parameters.

    g = grad + wd*w ; v <- mu*v + g ; w <- w - lr*(g + mu*v)
    """
    for name, p in model.params.items():
        if p.grad is None:
            raise T.UsageError(f"sgd_step before backward: parameter {name} has no gradient")
        g = p.grad.astype(np.float32) + np.float32(weight_decay) * p.data
        if momentum:
            v = model._momentum.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = momentum * v + g
            model._momentum[name] = v
            p.data = p.data - np.float32(lr) * (g + momentum * v)
        else:
            p.data = p.data - np.float32(lr) * g
