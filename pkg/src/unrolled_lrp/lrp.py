"""Reference recursive LRP-0 / LRP-epsilon on a recorded forward trace.

Every linear map (dense layer, global average pooling, convolution) is handled
the same way: divide the output relevance by the stabilised pre-activation,
redistribute the quotient through the transposed weights, multiply by the
input activation.  ReLUs pass relevance through unchanged and max-pooling
routes each window's relevance to its argmax.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .nn import Conv, EncoderSpec, ForwardTrace, GlobalAvgPool, Linear, MaxPool, Params, ReLU
from .tensor import heaviside, reduce_sum, stabilized_div

STABLE_EPSILON = 1e-9


@dataclass(frozen=True)
class LrpConfig:
    epsilon: float = STABLE_EPSILON

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")


EXACT = LrpConfig(0.0)


@dataclass
class RelevanceMap:
    class_id: int
    relevance: np.ndarray
    layer_totals: list = field(default_factory=list)
    """Total relevance per sample after each backward step, from the score down."""

    @property
    def heatmap(self) -> np.ndarray:
        return self.relevance.sum(axis=1)


def lrp_linear(R_out, a_in, z_out, weights, cfg: LrpConfig = EXACT) -> np.ndarray:
    """Relevance through ``z = a @ weights.T`` (weights shaped ``(out, in)``)."""
    q = stabilized_div(R_out, z_out, cfg.epsilon)
    p = q @ np.asarray(weights)
    return np.asarray(a_in) * p


def lrp_conv(R_out, a_in, z_out, kernel, stride: int = 1, pad: int = 0, cfg: LrpConfig = EXACT) -> np.ndarray:
    q = stabilized_div(R_out, z_out, cfg.epsilon)
    p = F.conv2d_grad_input(q, kernel, a_in.shape, stride, pad)
    return a_in * p


def lrp_maxpool(R_out, switches, in_shape) -> np.ndarray:
    return F.unpool2d(R_out, switches, in_shape)


def lrp_avgpool(R_apv, a, cfg: LrpConfig = EXACT) -> np.ndarray:
    """Global average pooling seen as a linear layer with weights ``1/npix``."""
    npix = a.shape[2] * a.shape[3]
    apv = a.mean(axis=(2, 3))
    q = stabilized_div(R_apv, apv, cfg.epsilon)
    return a * (q[:, :, None, None] / npix)


def _check_class(spec: EncoderSpec, class_id: int) -> None:
    if not 0 <= class_id < spec.num_classes:
        raise IndexError(f"class_id {class_id} out of range [0, {spec.num_classes})")


def lrp_head(spec: EncoderSpec, params: Params, trace: ForwardTrace, class_id: int,
             cfg: LrpConfig = EXACT) -> np.ndarray:
    """Condensed classifier head: relevance-over-z at the last conv output.

    For LRP-0 this is a Heaviside mask of the last pre-activation times the
    constant ``w[class_id, k] / npix`` per channel.  Requires the tail
    ``Conv -> ReLU -> GlobalAvgPool -> Linear``.
    """
    _check_class(spec, class_id)
    L = spec.head_index
    if not (isinstance(spec.layers[L - 2], ReLU) and isinstance(spec.layers[L - 3], Conv)):
        raise ValueError("lrp_head needs a Conv -> ReLU -> GlobalAvgPool -> Linear tail")
    z = trace.z(L - 3)
    w = params[f"{L}.weight"][class_id]
    npix = z.shape[2] * z.shape[3]
    if cfg.epsilon == 0:
        const = np.broadcast_to(w, (z.shape[0], w.size))
        gate = heaviside(z)
    else:
        s = trace.scores[:, class_id]
        score_factor = stabilized_div(s, s, cfg.epsilon)
        apv_factor = stabilized_div(trace.apv, trace.apv, cfg.epsilon)
        const = w[None, :] * score_factor[:, None] * apv_factor
        gate = stabilized_div(np.maximum(z, 0.0), z, cfg.epsilon)
    return gate * (const[:, :, None, None] / npix)


def _totals(R) -> np.ndarray:
    return reduce_sum(R, range(1, R.ndim))


def lrp_full(spec: EncoderSpec, params: Params, trace: ForwardTrace, class_id: int,
             cfg: LrpConfig = EXACT) -> RelevanceMap:
    """Input relevance for ``class_id``, propagated layer by layer."""
    _check_class(spec, class_id)
    acts = trace.acts
    L = spec.head_index
    scores = trace.scores
    R = np.zeros_like(scores)
    R[:, class_id] = scores[:, class_id]
    totals = [_totals(R)]
    R = lrp_linear(R, acts[L], scores, params[f"{L}.weight"], cfg)
    totals.append(_totals(R))
    for i in range(L - 1, -1, -1):
        layer = spec.layers[i]
        if isinstance(layer, GlobalAvgPool):
            R = lrp_avgpool(R, acts[i], cfg)
        elif isinstance(layer, ReLU):
            continue
        elif isinstance(layer, MaxPool):
            R = lrp_maxpool(R, trace.switches[i], acts[i].shape)
        elif isinstance(layer, Conv):
            R = lrp_conv(R, acts[i], acts[i + 1], params[f"{i}.weight"], layer.stride, layer.pad, cfg)
        elif isinstance(layer, Linear):
            raise ValueError("only a single Linear head is supported")
        totals.append(_totals(R))
    return RelevanceMap(class_id=class_id, relevance=R, layer_totals=totals)
