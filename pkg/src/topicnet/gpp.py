"""Group-to-pixel propagation: pixel self-attention, channel gate,
recalibration.

Attention runs over every pixel of every image in the group at once, so
consensus information keeps flowing across images.  The distilled gate
e is one (0,1)^D vector per group and layer, broadcast over all images
and pixels when recalibrating the full-resolution features.
"""

from __future__ import annotations

import math

from .conv import conv2d_bias
from .errors import ShapeError
from .tensor import Tensor


def _tokens(x: Tensor) -> Tensor:
    n, d, s1, s2 = x.shape
    return x.transpose((0, 2, 3, 1)).reshape((n * s1 * s2, d))


def _spatial(tokens: Tensor, n: int, d: int, s1: int, s2: int) -> Tensor:
    return tokens.reshape((n, s1, s2, d)).transpose((0, 3, 1, 2))


def pixel_self_attention(r: Tensor, params: dict) -> Tensor:
    """Scaled dot-product attention over all N*S*S group pixels.

    Q and K project to D' = D/2, V and the output projection keep D; the
    attended values are added residually to r.
    """
    n, d, s1, s2 = r.shape
    dp = params["gpp.q.w"].shape[0]
    q = _tokens(conv2d_bias(r, params["gpp.q.w"], params["gpp.q.b"]))
    k = _tokens(conv2d_bias(r, params["gpp.k.w"], params["gpp.k.b"]))
    v = _tokens(conv2d_bias(r, params["gpp.v.w"], params["gpp.v.b"]))
    scores = (q @ k.transpose((1, 0))) * (1.0 / math.sqrt(dp))
    attended = scores.softmax(axis=1) @ v
    proj = conv2d_bias(_spatial(attended, n, d, s1, s2), params["gpp.o.w"], params["gpp.o.b"])
    return r + proj


def distill_channel_gate(attended: Tensor, params: dict) -> Tensor:
    """[N,D,S,S] -> e in (0,1)^D: average pool, linear D->D, sigmoid."""
    pooled = attended.mean(axis=(0, 2, 3))
    return (params["gate.fc.w"] @ pooled + params["gate.fc.b"]).sigmoid()


def recalibrate(x: Tensor, e: Tensor) -> Tensor:
    """z = x * e with the gate broadcast over images and pixels."""
    if x.ndim != 4 or e.ndim != 1 or x.shape[1] != e.shape[0]:
        raise ShapeError(f"recalibrate: channel mismatch between {x.shape} and {e.shape}")
    return x * e.reshape((1, e.shape[0], 1, 1))


def gpp_block(r: Tensor, params: dict):
    """(attended, e) for one group's consensus features at one layer."""
    attended = pixel_self_attention(r, params)
    return attended, distill_channel_gate(attended, params)
