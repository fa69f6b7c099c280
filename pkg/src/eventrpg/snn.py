"""Small spiking networks: layers, traced forward inference and model files.

Linear-kind layers (``Linear``, ``Conv2d``, ``AvgPool2d``, ``Flatten``) are
stateless and applied independently at every time step.  ``Spiking`` layers
carry a membrane voltage across steps::

    v_pre[t]  = c * v_post[t-1] + d * I[t]
    spike[t]  = v_pre[t] >= v_threshold
    v_post[t] = 0 if spike[t] else v_pre[t]

with ``c = exp(-dt/tau)``, ``d = 1 - c`` for LIF and ``c = d = 1`` for IF.

All layer methods take a leading batch axis, so a whole time sequence (or a
time x sample block) goes through a linear layer in one call.
"""

from __future__ import annotations

import json
import math
import warnings
from pathlib import Path
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .events import FrameTensor

__all__ = [
    "NeuronParams",
    "Linear",
    "Conv2d",
    "AvgPool2d",
    "Flatten",
    "Spiking",
    "Network",
    "SpikingRecord",
    "ActivationTrace",
    "ModelFormatError",
    "neuron_step",
    "forward",
    "forward_batch",
    "load_model",
    "save_model",
    "load_model_files",
    "save_model_files",
]


class ModelFormatError(ValueError):
    """Invalid model descriptor or weight blob."""


@dataclass(frozen=True)
class NeuronParams:
    kind: str = "LIF"
    tau: float = 2.0
    dt: float = 1.0
    v_threshold: float = 1.0
    reset: str = "hard_zero"

    def __post_init__(self):
        if self.kind not in ("LIF", "IF"):
            raise ValueError(f"unknown neuron kind {self.kind!r}")
        if self.reset != "hard_zero":
            raise ValueError(f"unsupported reset {self.reset!r}")
        if self.kind == "LIF":
            if self.tau <= 0 or self.dt <= 0:
                raise ValueError("LIF needs tau > 0 and dt > 0")
            if self.dt / self.tau > 0.5:
                warnings.warn(
                    f"LIF dt/tau = {self.dt / self.tau:.3g} > 0.5; the dt << tau regime is assumed",
                    stacklevel=3,
                )

    @property
    def coefficients(self) -> Tuple[float, float]:
        """``(c, d)``: weights of the previous voltage and of the input current."""
        if self.kind == "IF":
            return 1.0, 1.0
        c = math.exp(-self.dt / self.tau)
        return c, 1.0 - c

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tau": self.tau, "dt": self.dt,
                "v_threshold": self.v_threshold, "reset": self.reset}


def neuron_step(v_prev, i_t, params: NeuronParams):
    """One membrane update.  Returns ``(v_post, spike, v_pre)``; works elementwise on arrays."""
    c, d = params.coefficients
    v_pre = c * np.asarray(v_prev, dtype=np.float64) + d * np.asarray(i_t, dtype=np.float64)
    spike = (v_pre >= params.v_threshold).astype(np.float64)
    v_post = np.where(spike > 0, 0.0, v_pre)
    if v_pre.ndim == 0:
        return float(v_post), int(spike), float(v_pre)
    return v_post, spike, v_pre


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class _LinearKind:
    """Mixin for layers that are linear maps of their input (up to a bias)."""

    bias: Optional[np.ndarray] = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = self.apply(x, self.weight)
        if self.bias is not None:
            y = y + self.bias.reshape((1,) + self.bias.shape + (1,) * (y.ndim - 2))
        return y

    def weight_parts(self):
        """``(positive, negative, connectivity)`` weights for relevance rules."""
        w = self.weight
        return np.maximum(w, 0.0), np.minimum(w, 0.0), np.ones_like(w)


@dataclass(eq=False)
class Linear(_LinearKind):
    weight: np.ndarray  # (out, in)
    bias: Optional[np.ndarray] = None
    kind = "linear"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError("linear weight must be 2-D (out, in)")

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.weight.shape[1],):
            raise ValueError(f"linear expects input ({self.weight.shape[1]},), got {tuple(in_shape)}")
        return (self.weight.shape[0],)

    def apply(self, x, weight):
        return x @ weight.T

    def adjoint(self, y, weight):
        return y @ weight

    def weight_grad(self, x, grad_out):
        return grad_out.reshape(-1, grad_out.shape[-1]).T @ x.reshape(-1, x.shape[-1])

    def describe(self):
        return {"kind": "linear", "in_features": self.weight.shape[1],
                "out_features": self.weight.shape[0]}


@dataclass(eq=False)
class Conv2d(_LinearKind):
    weight: np.ndarray  # (out_c, in_c, kh, kw)
    stride: int = 1
    padding: int = 0
    bias: Optional[np.ndarray] = None
    kind = "conv2d"

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ValueError("conv2d weight must be 4-D (out, in, kh, kw)")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("conv2d needs stride >= 1 and padding >= 0")
        if self.padding >= min(self.weight.shape[2:]):
            raise ValueError("conv2d padding must be smaller than the kernel")

    def output_shape(self, in_shape):
        o, i, kh, kw = self.weight.shape
        if len(in_shape) != 3 or in_shape[0] != i:
            raise ValueError(f"conv2d expects ({i}, H, W) input, got {tuple(in_shape)}")
        h = (in_shape[1] + 2 * self.padding - kh) // self.stride + 1
        w = (in_shape[2] + 2 * self.padding - kw) // self.stride + 1
        if h < 1 or w < 1:
            raise ValueError(f"conv2d kernel larger than padded input {tuple(in_shape)}")
        return (o, h, w)

    def _windows(self, x):
        p, s = self.padding, self.stride
        kh, kw = self.weight.shape[2:]
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))
        return win[:, :, ::s, ::s]  # (N, C, Ho, Wo, kh, kw)

    def apply(self, x, weight):
        return np.einsum("nchwij,ocij->nohw", self._windows(x), weight, optimize=True)

    def adjoint(self, y, weight, in_hw=None):
        n, _, ho, wo = y.shape
        _, c, kh, kw = weight.shape
        p, s = self.padding, self.stride
        if in_hw is None:
            in_hw = ((ho - 1) * s + kh - 2 * p, (wo - 1) * s + kw - 2 * p)
        hp, wp = in_hw[0] + 2 * p, in_hw[1] + 2 * p
        cols = np.einsum("nohw,ocij->nchwij", y, weight, optimize=True)
        out = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                out[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[..., i, j]
        return out[:, :, p:p + in_hw[0], p:p + in_hw[1]]

    def weight_grad(self, x, grad_out):
        return np.einsum("nchwij,nohw->ocij", self._windows(x), grad_out, optimize=True)

    def describe(self):
        o, i, kh, kw = self.weight.shape
        return {"kind": "conv2d", "in_channels": i, "out_channels": o,
                "kernel_size": [kh, kw], "stride": self.stride, "padding": self.padding}


@dataclass(eq=False)
class AvgPool2d(_LinearKind):
    kernel_size: int = 2
    stride: Optional[int] = None
    kind = "avgpool2d"

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.kernel_size
        if self.kernel_size < 1 or self.stride < 1:
            raise ValueError("avgpool2d needs kernel_size, stride >= 1")

    @property
    def weight(self) -> float:
        return 1.0 / (self.kernel_size * self.kernel_size)

    def weight_parts(self):
        return self.weight, 0.0, 1.0

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"avgpool2d expects (C, H, W) input, got {tuple(in_shape)}")
        k, s = self.kernel_size, self.stride
        h, w = (in_shape[1] - k) // s + 1, (in_shape[2] - k) // s + 1
        if h < 1 or w < 1:
            raise ValueError(f"avgpool2d kernel larger than input {tuple(in_shape)}")
        return (in_shape[0], h, w)

    def apply(self, x, weight):
        k, s = self.kernel_size, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        return win.sum(axis=(-2, -1)) * weight

    def adjoint(self, y, weight, in_hw=None):
        k, s = self.kernel_size, self.stride
        n, c, ho, wo = y.shape
        if in_hw is None:
            in_hw = ((ho - 1) * s + k, (wo - 1) * s + k)
        out = np.zeros((n, c) + tuple(in_hw))
        yw = y * weight
        for i in range(k):
            for j in range(k):
                out[:, :, i:i + s * ho:s, j:j + s * wo:s] += yw
        return out

    def describe(self):
        return {"kind": "avgpool2d", "kernel_size": self.kernel_size, "stride": self.stride}


@dataclass(eq=False)
class Flatten:
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def __call__(self, x):
        return x.reshape(x.shape[0], -1)

    def describe(self):
        return {"kind": "flatten"}


@dataclass(eq=False)
class Spiking:
    neuron: NeuronParams = field(default_factory=NeuronParams)
    kind = "spiking"

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def describe(self):
        return {"kind": "spiking", "neuron": self.neuron.to_dict()}


Layer = Union[Linear, Conv2d, AvgPool2d, Flatten, Spiking]
LINEAR_KINDS = (Linear, Conv2d, AvgPool2d)


def adjoint(layer, y, weight, in_shape):
    """Transpose of ``layer.apply(., weight)`` for inputs of per-sample shape ``in_shape``."""
    if isinstance(layer, Linear):
        return layer.adjoint(y, weight)
    return layer.adjoint(y, weight, in_hw=tuple(in_shape[1:]))


@dataclass(eq=False)
class Network:
    """Ordered layer stack.  The last layer must be a ``Linear`` producing the logits."""

    layers: List[Layer]
    input_shape: Tuple[int, int, int]
    num_classes: int
    time_steps: Optional[int] = None

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = list(self.layers)
        if not self.layers or not isinstance(self.layers[-1], Linear):
            raise ValueError("final layer must be linear")
        shapes = [self.input_shape]
        for idx, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ValueError as exc:
                raise ValueError(f"layer {idx} ({layer.kind}): {exc}") from None
        if shapes[-1] != (self.num_classes,):
            raise ValueError(f"final layer outputs {shapes[-1]}, expected ({self.num_classes},)")
        self.shapes = shapes

    def boundary_shape(self, index: int) -> tuple:
        """Per-step shape of the input to layer ``index`` (``len(layers)`` = logits)."""
        return self.shapes[index]

    def copy(self) -> "Network":
        desc, blob = save_model(self, dtype=None)
        return load_model(desc, blob, dtype=None)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class SpikingRecord:
    """Per-step state of one spiking layer, each array shaped ``(T, *shape)``."""

    current: np.ndarray
    v_pre: np.ndarray
    v_post: np.ndarray
    spikes: np.ndarray

    @property
    def v_prev(self) -> np.ndarray:
        """Post-reset voltage entering each step (zero at the first step)."""
        return np.concatenate([np.zeros_like(self.v_post[:1]), self.v_post[:-1]], axis=0)


@dataclass
class ActivationTrace:
    """Everything recorded during ``forward``.

    ``inputs[l]`` is the ``(T, *shape)`` input of layer ``l``;
    ``spiking[l]`` holds the membrane record of spiking layer ``l``.
    """

    inputs: List[np.ndarray]
    spiking: Dict[int, SpikingRecord]
    logits: np.ndarray

    @property
    def T(self) -> int:
        return self.logits.shape[0]


def _run(net: Network, x: np.ndarray, record: bool):
    """Forward over ``x`` of shape ``(T, B, C, H, W)``; returns logits ``(T, B, K)``."""
    T, B = x.shape[:2]
    inputs, spiking = [], {}
    for idx, layer in enumerate(net.layers):
        if record:
            inputs.append(x)
        if isinstance(layer, Spiking):
            c, d = layer.neuron.coefficients
            vth = layer.neuron.v_threshold
            v = np.zeros(x.shape[1:])
            v_pre_all = np.empty_like(x)
            v_post_all = np.empty_like(x)
            out = np.empty_like(x)
            for t in range(T):
                v_pre = c * v + d * x[t]
                s = (v_pre >= vth).astype(np.float64)
                v = np.where(s > 0, 0.0, v_pre)
                v_pre_all[t], v_post_all[t], out[t] = v_pre, v, s
            if record:
                spiking[idx] = SpikingRecord(x, v_pre_all, v_post_all, out)
            x = out
        else:
            flat = x.reshape((T * B,) + x.shape[2:])
            y = layer(flat)
            x = y.reshape((T, B) + y.shape[1:])
    return x, inputs, spiking


def _frames_array(frames) -> np.ndarray:
    data = frames.data if isinstance(frames, FrameTensor) else np.asarray(frames, dtype=np.float64)
    return np.asarray(data, dtype=np.float64)


def forward(net: Network, frames) -> Tuple[np.ndarray, ActivationTrace]:
    """Run ``frames`` (``(T, C, H, W)``) through ``net`` with zero initial voltages.

    Returns per-step logits ``(T, num_classes)`` and the full activation trace.
    """
    data = _frames_array(frames)
    if data.ndim != 4 or data.shape[0] < 1 or tuple(data.shape[1:]) != net.input_shape:
        raise ValueError(
            f"layer 0: frames of shape {data.shape} do not match input (T, {net.input_shape})"
        )
    logits, inputs, spiking = _run(net, data[:, None], record=True)
    inputs = [a[:, 0] for a in inputs]
    spiking = {
        k: SpikingRecord(r.current[:, 0], r.v_pre[:, 0], r.v_post[:, 0], r.spikes[:, 0])
        for k, r in spiking.items()
    }
    logits = logits[:, 0]
    return logits, ActivationTrace(inputs, spiking, logits)


def forward_batch(net: Network, frames: np.ndarray) -> np.ndarray:
    """Logits ``(B, T, K)`` for a batch of frames ``(B, T, C, H, W)`` (no trace)."""
    data = np.asarray(frames, dtype=np.float64)
    if data.ndim != 5 or tuple(data.shape[2:]) != net.input_shape:
        raise ValueError(f"batch of shape {data.shape} does not match input (B, T, {net.input_shape})")
    logits, _, _ = _run(net, np.swapaxes(data, 0, 1), record=False)
    return np.swapaxes(logits, 0, 1)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

_F32 = np.dtype("<f4")


class _Blob:
    def __init__(self, raw: bytes, dtype=_F32):
        dt = np.dtype(dtype)
        if len(raw) % dt.itemsize:
            raise ModelFormatError(f"weight blob of {len(raw)} bytes is not a whole number of {dt.str}")
        self.data = np.frombuffer(raw, dtype=dt).astype(np.float64)
        self.itemsize = dt.itemsize
        self.pos = 0

    def take(self, shape, what: str) -> np.ndarray:
        n = int(np.prod(shape))
        if self.pos + n > len(self.data):
            raise ModelFormatError(
                f"{what}: needs {n * self.itemsize} bytes at offset {self.pos * self.itemsize}, "
                f"blob has {len(self.data) * self.itemsize} bytes"
            )
        arr = self.data[self.pos:self.pos + n].reshape(shape)
        self.pos += n
        return arr


def _require(spec: dict, key: str, idx: int):
    if key not in spec:
        raise ModelFormatError(f"layer {idx} ({spec.get('kind')}): missing field {key!r}")
    return spec[key]


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (list, tuple)):
        if len(v) != 2:
            raise ModelFormatError(f"expected an int or a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _fold_batchnorm(prev, spec: dict, blob: _Blob, idx: int):
    """Fold a batch-norm into the preceding linear/conv layer (weight scale + bias shift)."""
    if not isinstance(prev, (Linear, Conv2d)):
        raise ModelFormatError(f"layer {idx} (batchnorm) must follow a linear or conv2d layer")
    n = int(_require(spec, "num_features", idx))
    if n != prev.weight.shape[0]:
        raise ModelFormatError(f"layer {idx} (batchnorm): num_features {n} != {prev.weight.shape[0]}")
    eps = float(spec.get("eps", 1e-5))
    gamma = blob.take((n,), f"layer {idx} (batchnorm) gamma")
    beta = blob.take((n,), f"layer {idx} (batchnorm) beta")
    mean = blob.take((n,), f"layer {idx} (batchnorm) running_mean")
    var = blob.take((n,), f"layer {idx} (batchnorm) running_var")
    scale = gamma / np.sqrt(var + eps)
    prev.weight = prev.weight * scale.reshape((n,) + (1,) * (prev.weight.ndim - 1))
    old_bias = prev.bias if prev.bias is not None else 0.0
    prev.bias = (old_bias - mean) * scale + beta


def load_model(descriptor, weights: bytes, dtype=_F32) -> Network:
    """Build a ``Network`` from a JSON descriptor and a little-endian f32 weight blob.

    Batch-norm layers in the descriptor are folded into the preceding
    linear/conv layer at load time.
    """
    if isinstance(descriptor, (str, bytes)):
        try:
            descriptor = json.loads(descriptor)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"descriptor is not valid JSON: {exc}") from None
    if not isinstance(descriptor, dict):
        raise ModelFormatError("descriptor must be a JSON object")
    for key in ("input_shape", "num_classes", "layers"):
        if key not in descriptor:
            raise ModelFormatError(f"descriptor missing {key!r}")
    input_shape = descriptor["input_shape"]
    if not (isinstance(input_shape, list) and len(input_shape) == 3):
        raise ModelFormatError("input_shape must be [C, H, W]")
    blob = _Blob(weights, "<f8" if dtype is None else dtype)

    layers: List[Layer] = []
    for idx, spec in enumerate(descriptor["layers"]):
        if not isinstance(spec, dict) or "kind" not in spec:
            raise ModelFormatError(f"layer {idx}: expected an object with a 'kind'")
        kind = spec["kind"]
        if kind == "linear":
            shape = (int(_require(spec, "out_features", idx)), int(_require(spec, "in_features", idx)))
            layers.append(Linear(blob.take(shape, f"layer {idx} (linear)")))
        elif kind == "conv2d":
            kh, kw = _pair(_require(spec, "kernel_size", idx))
            shape = (int(_require(spec, "out_channels", idx)), int(_require(spec, "in_channels", idx)), kh, kw)
            w = blob.take(shape, f"layer {idx} (conv2d)")
            layers.append(Conv2d(w, int(spec.get("stride", 1)), int(spec.get("padding", 0))))
        elif kind == "avgpool2d":
            k = int(_require(spec, "kernel_size", idx))
            layers.append(AvgPool2d(k, spec.get("stride")))
        elif kind == "flatten":
            layers.append(Flatten())
        elif kind == "spiking":
            try:
                layers.append(Spiking(NeuronParams(**spec.get("neuron", {}))))
            except (TypeError, ValueError) as exc:
                raise ModelFormatError(f"layer {idx} (spiking): {exc}") from None
        elif kind in ("batchnorm", "batchnorm1d", "batchnorm2d"):
            _fold_batchnorm(layers[-1] if layers else None, spec, blob, idx)
        elif kind == "bias":
            # only emitted by save_model for folded batch-norm shifts
            prev = layers[-1] if layers else None
            if not isinstance(prev, (Linear, Conv2d)):
                raise ModelFormatError(f"layer {idx} (bias) must follow a linear or conv2d layer")
            prev.bias = blob.take((prev.weight.shape[0],), f"layer {idx} (bias)").copy()
        else:
            raise ModelFormatError(f"layer {idx}: unknown layer kind {kind!r}")
    if blob.pos != len(blob.data):
        raise ModelFormatError(
            f"weight blob has {len(blob.data) * blob.itemsize} bytes, "
            f"descriptor declares {blob.pos * blob.itemsize}"
        )
    try:
        return Network(layers, tuple(input_shape), int(descriptor["num_classes"]),
                       descriptor.get("time_steps"))
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from None


def save_model(net: Network, dtype=_F32) -> Tuple[str, bytes]:
    """Inverse of ``load_model``: ``(descriptor JSON, weight blob)``."""
    layers, chunks = [], []
    for layer in net.layers:
        layers.append(layer.describe())
        if isinstance(layer, (Linear, Conv2d)):
            chunks.append(layer.weight.ravel())
            if layer.bias is not None:
                layers.append({"kind": "bias"})
                chunks.append(np.asarray(layer.bias).ravel())
    desc = {"input_shape": list(net.input_shape), "num_classes": net.num_classes, "layers": layers}
    if net.time_steps is not None:
        desc["time_steps"] = net.time_steps
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    out_dtype = "<f8" if dtype is None else dtype
    return json.dumps(desc, indent=2), flat.astype(out_dtype).tobytes()


def load_model_files(descriptor_path, weights_path=None) -> Network:
    """Load ``model.json`` plus its blob (default: same stem with ``.bin``)."""
    descriptor_path = Path(descriptor_path)
    if weights_path is None:
        weights_path = descriptor_path.with_suffix(".bin")
    return load_model(descriptor_path.read_text(), Path(weights_path).read_bytes())


def save_model_files(net: Network, descriptor_path, weights_path=None) -> None:
    descriptor_path = Path(descriptor_path)
    if weights_path is None:
        weights_path = descriptor_path.with_suffix(".bin")
    desc, blob = save_model(net)
    descriptor_path.write_text(desc)
    Path(weights_path).write_bytes(blob)
