"""Encoder layer specs, traced forward pass, reverse-mode backward, checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import functional as F
from .tensor import read_tensor, seeded_rng, write_tensor


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    has_bias: bool = False


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Linear:
    in_dim: int
    out_dim: int
    has_bias: bool = False


LayerSpec = Union[Conv, ReLU, MaxPool, GlobalAvgPool, Linear]
_LAYER_TYPES = {cls.__name__: cls for cls in (Conv, ReLU, MaxPool, GlobalAvgPool, Linear)}


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    layers: tuple
    in_ch: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        layers = self.layers
        if len(layers) < 3 or not isinstance(layers[-2], GlobalAvgPool) or not isinstance(layers[-1], Linear):
            raise SpecError("encoder must end with GlobalAvgPool followed by one Linear")
        ch = self.in_ch
        for i, layer in enumerate(layers[:-2]):
            if isinstance(layer, Conv):
                if layer.in_ch != ch:
                    raise SpecError(f"layer {i}: conv expects {layer.in_ch} channels, gets {ch}")
                ch = layer.out_ch
            elif isinstance(layer, (GlobalAvgPool, Linear)):
                raise SpecError(f"layer {i}: {type(layer).__name__} only allowed in the head")
            elif not isinstance(layer, (ReLU, MaxPool)):
                raise SpecError(f"layer {i}: unsupported layer {layer!r}")
        if layers[-1].in_dim != ch:
            raise SpecError(f"head expects {layers[-1].in_dim} features, encoder gives {ch}")

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def feature_channels(self) -> int:
        return self.layers[-1].in_dim

    @property
    def head_index(self) -> int:
        return len(self.layers) - 1

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                shapes[f"{i}.weight"] = (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)
                if layer.has_bias:
                    shapes[f"{i}.bias"] = (layer.out_ch,)
            elif isinstance(layer, Linear):
                shapes[f"{i}.weight"] = (layer.out_dim, layer.in_dim)
                if layer.has_bias:
                    shapes[f"{i}.bias"] = (layer.out_dim,)
        return shapes

    def to_json(self) -> dict:
        return {"in_ch": self.in_ch,
                "layers": [{"type": type(l).__name__, **asdict(l)} for l in self.layers]}

    @classmethod
    def from_json(cls, obj: dict) -> "EncoderSpec":
        layers = []
        for item in obj["layers"]:
            item = dict(item)
            kind = item.pop("type")
            if kind not in _LAYER_TYPES:
                raise SpecError(f"unknown layer type {kind!r}")
            layers.append(_LAYER_TYPES[kind](**item))
        return cls(tuple(layers), obj.get("in_ch", 3))


def preset(name: str, num_classes: int, width: int = 8, bias: bool = False) -> EncoderSpec:
    """Plain VGG-style encoders made of conv/ReLU/max-pool blocks.

    ``vgg-micro``: two convs, one pool.  ``vgg-mini``: three conv blocks,
    two pools.  ``vgg-deep``: VGG-like pairs of convs per level, two pools.
    """
    w1, w2, w3 = width, 2 * width, 4 * width
    C = lambda i, o: Conv(i, o, 3, 1, 1, bias)
    if name == "vgg-micro":
        body = [C(3, w1), ReLU(), MaxPool(), C(w1, w2), ReLU()]
        feat = w2
    elif name == "vgg-mini":
        body = [C(3, w1), ReLU(), MaxPool(), C(w1, w2), ReLU(), MaxPool(), C(w2, w3), ReLU()]
        feat = w3
    elif name == "vgg-deep":
        body = [C(3, w1), ReLU(), C(w1, w1), ReLU(), MaxPool(),
                C(w1, w2), ReLU(), C(w2, w2), ReLU(), MaxPool(),
                C(w2, w3), ReLU(), C(w3, w3), ReLU()]
        feat = w3
    else:
        raise SpecError(f"unknown encoder preset {name!r}")
    return EncoderSpec(tuple(body) + (GlobalAvgPool(), Linear(feat, num_classes, bias)))


PRESETS = ("vgg-micro", "vgg-mini", "vgg-deep")

Params = dict  # name -> float64 array, e.g. "0.weight"


def init_params(spec: EncoderSpec, seed: int) -> Params:
    """He (fan-in) normal initialisation; biases start at zero."""
    rng = seeded_rng(seed, 0x1A7E)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


def check_params(spec: EncoderSpec, params: Params) -> None:
    for name, shape in spec.param_shapes().items():
        if name not in params:
            raise SpecError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise SpecError(f"{name}: shape {params[name].shape}, expected {shape}")


@dataclass
class ForwardTrace:
    """Everything a forward pass leaves behind.

    ``acts[i]`` is the input of layer ``i`` and ``acts[i + 1]`` its output, so
    for a conv at ``i`` the pre-activation is ``acts[i + 1]``.
    """
    acts: list
    switches: dict = field(default_factory=dict)

    @property
    def image(self) -> np.ndarray:
        return self.acts[0]

    @property
    def scores(self) -> np.ndarray:
        return self.acts[-1]

    @property
    def apv(self) -> np.ndarray:
        return self.acts[-2]

    def z(self, i: int) -> np.ndarray:
        return self.acts[i + 1]


def _batched(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]
    if image.ndim != 4:
        raise ValueError(f"expected (C,H,W) or (N,C,H,W) image, got shape {image.shape}")
    return image


def apply_layer(layer: LayerSpec, i: int, params: Params, x: np.ndarray):
    """Run one layer; returns ``(output, switches_or_None)``."""
    if isinstance(layer, Conv):
        if x.ndim != 4 or x.shape[1] != layer.in_ch:
            raise ValueError(f"layer {i}: expected {layer.in_ch} input channels, got shape {x.shape}")
        return F.conv2d(x, params[f"{i}.weight"], params.get(f"{i}.bias"), layer.stride, layer.pad), None
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0), None
    if isinstance(layer, MaxPool):
        return F.maxpool2d(x, layer.kernel, layer.stride)
    if isinstance(layer, GlobalAvgPool):
        return x.mean(axis=(2, 3)), None
    if isinstance(layer, Linear):
        if x.shape[-1] != layer.in_dim:
            raise ValueError(f"layer {i}: expected {layer.in_dim} features, got {x.shape[-1]}")
        y = x @ params[f"{i}.weight"].T
        b = params.get(f"{i}.bias")
        return (y + b if b is not None else y), None
    raise SpecError(f"unsupported layer {layer!r}")


def forward(spec: EncoderSpec, params: Params, image) -> tuple[np.ndarray, ForwardTrace]:
    """Traced forward pass.  Returns ``(scores (N, K), trace)``."""
    x = _batched(image)
    if x.shape[1] != spec.in_ch:
        raise ValueError(f"image has {x.shape[1]} channels, spec expects {spec.in_ch}")
    trace = ForwardTrace(acts=[x])
    for i, layer in enumerate(spec.layers):
        x, sw = apply_layer(layer, i, params, x)
        if sw is not None:
            trace.switches[i] = sw
        trace.acts.append(x)
    return x, trace


@dataclass
class GradientSet:
    params: dict
    input: np.ndarray


def backward(spec: EncoderSpec, params: Params, trace: ForwardTrace, score_grad) -> GradientSet:
    """Reverse-mode gradients of ``sum(score_grad * scores)``.

    ReLU uses subgradient 0 at 0; max-pool routes to the recorded switch.
    """
    if len(trace.acts) != len(spec.layers) + 1:
        raise ValueError("trace does not belong to this spec")
    g = np.asarray(score_grad, dtype=np.float64)
    if g.ndim == 1:
        g = np.broadcast_to(g, trace.scores.shape)
    if g.shape != trace.scores.shape:
        raise ValueError(f"score_grad shape {g.shape} != scores shape {trace.scores.shape}")
    grads: dict = {}
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, x = spec.layers[i], trace.acts[i]
        if isinstance(layer, Linear):
            w = params[f"{i}.weight"]
            if w.shape != (layer.out_dim, layer.in_dim):
                raise ValueError(f"layer {i}: params do not match trace")
            grads[f"{i}.weight"] = g.T @ x
            if layer.has_bias:
                grads[f"{i}.bias"] = g.sum(axis=0)
            g = g @ w
        elif isinstance(layer, GlobalAvgPool):
            h, w_ = x.shape[2:]
            g = np.broadcast_to(g[:, :, None, None] / (h * w_), x.shape).copy()
        elif isinstance(layer, MaxPool):
            g = F.unpool2d(g, trace.switches[i], x.shape)
        elif isinstance(layer, ReLU):
            g = g * (x > 0)
        elif isinstance(layer, Conv):
            w = params[f"{i}.weight"]
            grads[f"{i}.weight"] = F.conv2d_grad_weight(x, g, w.shape, layer.stride, layer.pad)
            if layer.has_bias:
                grads[f"{i}.bias"] = g.sum(axis=(0, 2, 3))
            g = F.conv2d_grad_input(g, w, x.shape, layer.stride, layer.pad)
    return GradientSet(params=grads, input=g)


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"RNCK"


def save_checkpoint(path, header: dict, tensors: dict) -> None:
    """JSON header followed by RNT1 tensor blocks in header order."""
    header = dict(header)
    header["tensors"] = list(tensors)
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in header["tensors"]:
            write_tensor(fh, tensors[name])


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        tensors = {name: read_tensor(fh) for name in header["tensors"]}
    return header, tensors
