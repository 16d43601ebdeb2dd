"""Unrolled-LRP segmentation network and the ablation baselines.

The unrolled decoder owns no parameters.  Each forward call reads the encoder
kernels from the shared ``params`` dict (mirrored and channel-transposed on the
fly), gates with the pre-activations recorded by the same call, and unpools
with that call's max-pool switches.  Class branches run as one batch: only the
bottleneck, built from the classifier weights, differs between them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Var
from .nn import (Conv, EncoderSpec, ForwardTrace, GlobalAvgPool, Linear, MaxPool, Params, ReLU,
                 SpecError, check_params)
from .tensor import seeded_rng

MODEL_KINDS = ("unrolled_lrp", "unet", "multitask_unet", "wsae", "fcn")


@dataclass
class Encoded:
    scores: Var
    acts: list  # acts[i] is the input Var of layer i
    switches: dict

    def trace(self) -> ForwardTrace:
        return ForwardTrace(acts=[a.data for a in self.acts], switches=dict(self.switches))


def param_vars(params: Params, requires_grad: bool) -> dict:
    return {k: Var(v, requires_grad) for k, v in params.items()}


def encode(spec: EncoderSpec, pv: dict, x) -> Encoded:
    x = x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))
    if x.data.ndim != 4 or x.shape[1] != spec.in_ch:
        raise ValueError(f"expected (N, {spec.in_ch}, H, W) input, got {x.shape}")
    acts, switches = [x], {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            x = ag.conv2d(x, pv[f"{i}.weight"], pv.get(f"{i}.bias"), layer.stride, layer.pad)
        elif isinstance(layer, ReLU):
            x = ag.relu(x)
        elif isinstance(layer, MaxPool):
            x, switches[i] = ag.maxpool2d(x, layer.kernel, layer.stride)
        elif isinstance(layer, GlobalAvgPool):
            x = ag.global_avg_pool(x)
        elif isinstance(layer, Linear):
            x = ag.linear(x, pv[f"{i}.weight"], pv.get(f"{i}.bias"))
        acts.append(x)
    return Encoded(scores=x, acts=acts, switches=switches)


def tied_deconv(p: Var, kernel: Var, layer: Conv, out_hw: tuple) -> Var:
    """Correlate ``p`` with an (already tied) decoder kernel back to ``out_hw``.

    Strided layers are handled by zero-dilation; leftover rows/columns that the
    forward conv never reached are padded at the bottom/right.
    """
    k, s, pad = layer.kernel, layer.stride, layer.pad
    h, w = p.shape[2:]
    border = k - 1 - pad
    extra_h = out_hw[0] - ((h - 1) * s + k - 2 * pad)
    extra_w = out_hw[1] - ((w - 1) * s + k - 2 * pad)
    q = ag.dilate(p, s)
    q = ag.pad_or_crop(q, bottom=border + extra_h, right=border + extra_w, top=border, left=border)
    return ag.conv2d(q, kernel)


class _TiedDecoderNet:
    """Shared machinery for decoders tied to the encoder (unrolled LRP, WS-AE)."""

    uses_cls_loss = True
    mixed_batches = True

    def __init__(self, spec: EncoderSpec, params: Params, flip_kernels: bool = True):
        spec.validate()
        check_params(spec, params)
        L = spec.head_index
        if not isinstance(spec.layers[L - 2], ReLU):
            raise SpecError("tied decoders need a ReLU right before global average pooling")
        self.spec = spec
        self.params = params
        self.flip_kernels = flip_kernels

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def decoder_param_count(self) -> int:
        return 0

    def decoder_kernel(self, i: int) -> np.ndarray:
        return ag.tied_kernel(Var(self.params[f"{i}.weight"]), self.flip_kernels).data

    def _deconv(self, pv: dict, p5: Var, i: int, out_shape: tuple) -> Var:
        b, k, c, h, w = p5.shape
        layer = self.spec.layers[i]
        q = ag.reshape(p5, (b * k, c, h, w))
        out = tied_deconv(q, ag.tied_kernel(pv[f"{i}.weight"], self.flip_kernels), layer, out_shape[2:])
        return ag.reshape(out, (b, k) + out.shape[1:])

    def _unpool(self, p5: Var, switches: np.ndarray, in_shape: tuple) -> Var:
        b, k, c, h, w = p5.shape
        sw = np.repeat(switches, k, axis=0)
        out = ag.unpool2d(ag.reshape(p5, (b * k, c, h, w)), sw, (b * k,) + tuple(in_shape[1:]))
        return ag.reshape(out, (b, k) + tuple(in_shape[1:]))

    def _input_skip(self, p5: Var, x: Var) -> Var:
        b, c, h, w = x.shape
        return ag.sum_(ag.mul(p5, ag.reshape(x, (b, 1, c, h, w))), axis=2)

    def forward(self, image):
        """Numpy convenience wrapper: ``(scores, heatmaps (N, K, H, W), trace)``."""
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        scores, logits, enc = self.graph(x, param_vars(self.params, False))
        return scores.data, logits.data, enc.trace()


class UnrolledNet(_TiedDecoderNet):
    """LRP through the encoder, written out as a tied encoder-decoder.

    ``epsilon = 0`` gives LRP-0 with Heaviside gates; ``epsilon > 0`` replaces
    every gate by ``relu(z) / (z + eps)`` and adds the matching score and
    pooling-vector factors, reproducing LRP-epsilon.
    """

    kind = "unrolled_lrp"

    def __init__(self, spec: EncoderSpec, params: Params, epsilon: float = 0.0,
                 flip_kernels: bool = True):
        super().__init__(spec, params, flip_kernels)
        if not epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        self.epsilon = float(epsilon)
        self.steps = self._plan()

    def _plan(self) -> list:
        layers, L = self.spec.layers, self.spec.head_index
        steps = [("bottleneck", L)]
        for i in range(L - 2, -1, -1):
            layer = layers[i]
            if isinstance(layer, ReLU):
                steps.append(("gate", i))
            elif isinstance(layer, MaxPool):
                steps.append(("unpool", i))
            elif isinstance(layer, Conv):
                if self.epsilon > 0 or not isinstance(layers[i + 1], ReLU):
                    steps.append(("ratio", i))
                steps.append(("deconv", i))
            else:
                raise SpecError(f"cannot unroll layer {i}: {layer!r}")
        steps.append(("input", 0))
        return steps

    def graph(self, x, pv: dict, detach_gates: bool | None = None):
        """Build the differentiable graph; returns ``(scores, heatmaps, encoded)``.

        ``detach_gates`` cuts the pre-activations feeding gates and ratio
        factors out of the graph.  For ``epsilon == 0`` their local derivative is
        identically zero, so detaching (the default there) changes nothing but
        the amount of work.
        """
        if detach_gates is None:
            detach_gates = self.epsilon == 0
        enc = encode(self.spec, pv, x)
        gate_input = ag.detach if detach_gates else (lambda v: v)
        acts, L, eps = enc.acts, self.spec.head_index, self.epsilon
        b = acts[0].shape[0]
        k = self.num_classes
        p = None
        for kind, i in self.steps:
            if kind == "bottleneck":
                feat = acts[L - 1]  # input of global average pooling
                c, h, w = feat.shape[1:]
                base = ag.mul(ag.reshape(pv[f"{L}.weight"], (1, k, c, 1, 1)), 1.0 / (h * w))
                if eps > 0:
                    sf = ag.stabilized_ratio(gate_input(enc.scores), eps)
                    af = ag.stabilized_ratio(gate_input(acts[L]), eps)
                    base = ag.mul(base, ag.reshape(sf, (b, k, 1, 1, 1)))
                    base = ag.mul(base, ag.reshape(af, (b, 1, c, 1, 1)))
                p = ag.mul(base, np.ones((b, 1, c, h, w)))
            elif kind == "gate":
                z = gate_input(acts[i])
                p = ag.heaviside_gate(p, ag.reshape(z, (b, 1) + z.shape[1:]))
            elif kind == "ratio":
                z = gate_input(acts[i + 1])
                p = ag.mul(p, ag.reshape(ag.stabilized_ratio(z, eps), (b, 1) + z.shape[1:]))
            elif kind == "unpool":
                p = self._unpool(p, enc.switches[i], acts[i].shape)
            elif kind == "deconv":
                p = self._deconv(pv, p, i, acts[i].shape)
            elif kind == "input":
                p = self._input_skip(p, acts[0])
        return enc.scores, p, enc


class WSAE(_TiedDecoderNet):
    """Weight-shared autoencoder ablation.

    Same tied convolutions and switch unpooling as :class:`UnrolledNet`, but the
    bottleneck takes ``relu(z)`` instead of ``H(z)`` and decoder activations
    are ordinary ReLUs on the decoder's own values.
    """

    kind = "wsae"

    def graph(self, x, pv: dict):
        enc = encode(self.spec, pv, x)
        acts, L = enc.acts, self.spec.head_index
        b, k = acts[0].shape[0], self.num_classes
        feat = acts[L - 1]
        c, h, w = feat.shape[1:]
        base = ag.mul(ag.reshape(pv[f"{L}.weight"], (1, k, c, 1, 1)), 1.0 / (h * w))
        p = ag.mul(base, ag.reshape(feat, (b, 1, c, h, w)))
        for i in range(L - 3, -1, -1):
            layer = self.spec.layers[i]
            if isinstance(layer, ReLU):
                p = ag.relu(p)
            elif isinstance(layer, MaxPool):
                p = self._unpool(p, enc.switches[i], acts[i].shape)
            elif isinstance(layer, Conv):
                p = self._deconv(pv, p, i, acts[i].shape)
        return enc.scores, self._input_skip(p, acts[0]), enc


def build_unrolled(spec: EncoderSpec, params: Params, epsilon: float = 0.0,
                   flip_kernels: bool = True) -> UnrolledNet:
    return UnrolledNet(spec, params, epsilon=epsilon, flip_kernels=flip_kernels)


def unrolled_forward(net: UnrolledNet, image):
    return net.forward(image)


# -- free-decoder baselines ------------------------------------------------------

def _he(rng, shape) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / int(np.prod(shape[1:]))), size=shape)


def _fit(x: Var, hw: tuple) -> Var:
    dh, dw = hw[0] - x.shape[2], hw[1] - x.shape[3]
    if dh == 0 and dw == 0:
        return x
    return ag.pad_or_crop(x, bottom=dh, right=dw)


class _FreeDecoderNet:
    mixed_batches = False
    uses_cls_loss = False

    def __init__(self, spec: EncoderSpec, params: Params, seed: int = 0):
        spec.validate()
        check_params(spec, params)
        self.spec = spec
        self.params = params
        rng = seeded_rng(seed, 0xDEC0)
        for name, shape in self.decoder_shapes().items():
            if name not in params:
                params[name] = np.zeros(shape) if name.endswith(".bias") else _he(rng, shape)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def decoder_shapes(self) -> dict:
        raise NotImplementedError

    def decoder_param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.decoder_shapes().values()))

    def _conv(self, pv, name, x, relu=True):
        y = ag.conv2d(x, pv[f"{name}.weight"], pv[f"{name}.bias"], 1, pv[f"{name}.weight"].shape[-1] // 2)
        return ag.relu(y) if relu else y

    def forward(self, image):
        x = np.asarray(image, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        scores, logits, enc = self.graph(x, param_vars(self.params, False))
        return (None if scores is None else scores.data), logits.data, enc.trace()


def _pools(spec: EncoderSpec) -> list:
    """(layer index, channels entering the pool) for every max-pool."""
    out, ch = [], spec.in_ch
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            ch = layer.out_ch
        elif isinstance(layer, MaxPool):
            if layer.kernel != layer.stride:
                raise SpecError("free decoders assume non-overlapping pooling")
            out.append((i, ch))
    return out


class UNet(_FreeDecoderNet):
    """Free decoder with nearest upsampling and concatenated encoder skips."""

    kind = "unet"

    def decoder_shapes(self) -> dict:
        shapes, ch = {}, self.spec.feature_channels
        for j, (_, cs) in enumerate(reversed(_pools(self.spec))):
            shapes[f"dec.up{j}.weight"] = (cs, ch, 3, 3)
            shapes[f"dec.up{j}.bias"] = (cs,)
            shapes[f"dec.fuse{j}.weight"] = (cs, 2 * cs, 3, 3)
            shapes[f"dec.fuse{j}.bias"] = (cs,)
            ch = cs
        shapes["dec.out.weight"] = (self.num_classes, ch, 1, 1)
        shapes["dec.out.bias"] = (self.num_classes,)
        return shapes

    def graph(self, x, pv: dict):
        enc = encode(self.spec, pv, x)
        L = self.spec.head_index
        h = enc.acts[L - 1]
        for j, (i, _) in enumerate(reversed(_pools(self.spec))):
            skip = enc.acts[i]
            h = _fit(ag.upsample_nearest(h, self.spec.layers[i].stride), skip.shape[2:])
            h = self._conv(pv, f"dec.up{j}", h)
            h = self._conv(pv, f"dec.fuse{j}", ag.concat([skip, h], axis=1))
        return self._scores(enc), self._conv(pv, "dec.out", h, relu=False), enc

    def _scores(self, enc: Encoded):
        return None


class MultiTaskUNet(UNet):
    """UNet plus the encoder's GAP/linear classifier branch at the bottleneck."""

    kind = "multitask_unet"
    uses_cls_loss = True
    mixed_batches = True

    def _scores(self, enc: Encoded):
        return enc.scores


class FCN(_FreeDecoderNet):
    """Single free decoder branch mirroring the encoder, nearest upsampling."""

    kind = "fcn"

    def _convs(self) -> list:
        return [i for i, l in enumerate(self.spec.layers) if isinstance(l, Conv)]

    def decoder_shapes(self) -> dict:
        shapes, first = {}, self._convs()[0]
        for i in self._convs():
            layer = self.spec.layers[i]
            out = self.num_classes if i == first else layer.in_ch
            shapes[f"dec.c{i}.weight"] = (out, layer.out_ch, layer.kernel, layer.kernel)
            shapes[f"dec.c{i}.bias"] = (out,)
        return shapes

    def graph(self, x, pv: dict):
        enc = encode(self.spec, pv, x)
        L = self.spec.head_index
        h = enc.acts[L - 1]
        for i in range(L - 2, -1, -1):
            layer = self.spec.layers[i]
            if isinstance(layer, ReLU):
                h = ag.relu(h)
            elif isinstance(layer, MaxPool):
                h = _fit(ag.upsample_nearest(h, layer.stride), enc.acts[i].shape[2:])
            elif isinstance(layer, Conv):
                h = self._conv(pv, f"dec.c{i}", h, relu=False)
        return None, h, enc


def baseline_forward(net, image):
    scores, logits, _ = net.forward(image)
    return scores, logits


def make_model(kind: str, spec: EncoderSpec, params: Params, seed: int = 0, epsilon: float = 0.0):
    """Instantiate a model around ``params`` (the dict is used, not copied)."""
    if kind == "unrolled_lrp":
        return UnrolledNet(spec, params, epsilon=epsilon)
    if kind == "wsae":
        return WSAE(spec, params)
    if kind == "unet":
        return UNet(spec, params, seed)
    if kind == "multitask_unet":
        return MultiTaskUNet(spec, params, seed)
    if kind == "fcn":
        return FCN(spec, params, seed)
    raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
