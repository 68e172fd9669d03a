"""Weight-shared 5-stage encoder, FPN-style decoder, and checkpoints.

The encoder halves resolution entering stages 2-5, so stages 3/4/5 sit
at strides 4/8/16; 1x1 laterals project them to a common channel dim D
for the propagation and contrastive modules.  Stages 1 and 2 get their
own contrast laterals, used only when shallow layers join the positive
set.  The decoder merges top-down, fuses the stage-1/2 skips, and ends
in a 1-channel sigmoid head at input resolution.
"""

from __future__ import annotations

import struct

import numpy as np

from .conv import conv2d_bias, upsample_nearest2
from .errors import FormatError, IoError, ShapeError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"TOPICNETv1"

DEFAULT_CHANNELS = (16, 32, 64, 64, 64)
DEFAULT_DIM = 64


def _conv_shapes(channels, dim):
    """name -> weight shape for every parameter tensor."""
    c1, c2, c3, c4, c5 = channels
    dp = dim // 2
    shapes = {}
    prev = 3
    for i, c in enumerate(channels, start=1):
        shapes[f"enc.s{i}.c1.w"] = (c, prev, 3, 3)
        shapes[f"enc.s{i}.c2.w"] = (c, c, 3, 3)
        prev = c
    for i, c in ((3, c3), (4, c4), (5, c5)):
        shapes[f"enc.lat{i}.w"] = (dim, c, 1, 1)
    shapes["enc.lat1c.w"] = (dim, c1, 1, 1)
    shapes["enc.lat2c.w"] = (dim, c2, 1, 1)
    for name in ("g", "theta", "phi"):
        shapes[f"igp.{name}.w"] = (dp, dim, 1, 1)
    shapes["gpp.q.w"] = (dp, dim, 1, 1)
    shapes["gpp.k.w"] = (dp, dim, 1, 1)
    shapes["gpp.v.w"] = (dim, dim, 1, 1)
    shapes["gpp.o.w"] = (dim, dim, 1, 1)
    shapes["gate.fc.w"] = (dim, dim)
    shapes["dec.a.conv.w"] = (c2, dim, 3, 3)
    shapes["dec.b.conv.w"] = (c1, c2, 3, 3)
    shapes["dec.lat2.w"] = (c2, c2, 1, 1)
    shapes["dec.lat1.w"] = (c1, c1, 1, 1)
    shapes["dec.head.w"] = (1, c1, 3, 3)
    return shapes


def init_params(seed: int, channels=DEFAULT_CHANNELS, dim: int = DEFAULT_DIM) -> dict:
    """Fan-in-scaled uniform weights and zero biases, one Tensor each.

    Weights draw from U(-b, b) with b = min(1, sqrt(6/fan_in)); a single
    counter-based stream filled in sorted name order keeps the result a
    pure function of the seed.
    """
    if len(channels) != 5:
        raise ShapeError(f"expected 5 stage channels, got {len(channels)}")
    if dim % 2 != 0:
        raise ShapeError(f"feature dim {dim} must be even for the D/2 projections")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    params = {}
    for name, shape in sorted(_conv_shapes(channels, dim).items()):
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        bound = min(1.0, float(np.sqrt(6.0 / fan_in)))
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        bias = name[:-2] + ".b"
        params[bias] = Tensor(np.zeros(shape[0]), requires_grad=True)
    return params


def _stage(x, params, idx: int, stride: int):
    x = conv2d_bias(x, params[f"enc.s{idx}.c1.w"], params[f"enc.s{idx}.c1.b"], stride=stride, pad=1).relu()
    return conv2d_bias(x, params[f"enc.s{idx}.c2.w"], params[f"enc.s{idx}.c2.b"], pad=1).relu()


def encode(images: Tensor, params: dict, contrast_layers: tuple = ()) -> dict:
    """Five conv stages plus lateral projections.

    Returns {"x": [x1..x5], "lat": {i: x-tilde}} with laterals for
    layers 3-5 always and for any requested contrast layer in {1, 2}.
    """
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"encode: expected [N,3,H,W], got {images.shape}")
    h, w = images.shape[2], images.shape[3]
    if h % 16 != 0 or w % 16 != 0:
        raise ShapeError(f"encode: spatial size {h}x{w} is not a multiple of 16")
    x = [None] * 6
    x[1] = _stage(images, params, 1, stride=1)
    for i in range(2, 6):
        x[i] = _stage(x[i - 1], params, i, stride=2)
    lat = {}
    for i in (3, 4, 5):
        lat[i] = conv2d_bias(x[i], params[f"enc.lat{i}.w"], params[f"enc.lat{i}.b"])
    for i in contrast_layers:
        if i in (1, 2):
            lat[i] = conv2d_bias(x[i], params[f"enc.lat{i}c.w"], params[f"enc.lat{i}c.b"])
    return {"x": x[1:], "lat": lat}


def decode(z3: Tensor, z4: Tensor, z5: Tensor, x2: Tensor, x1: Tensor, params: dict) -> Tensor:
    """Top-down merge of the recalibrated pyramid into a saliency map."""
    if z3.shape[1] != z4.shape[1] or z4.shape[1] != z5.shape[1]:
        raise ShapeError("decode: pyramid inputs disagree on channel dim")
    p5 = z5
    p4 = upsample_nearest2(p5) + z4
    p3 = upsample_nearest2(p4) + z3
    a = (
        conv2d_bias(upsample_nearest2(p3), params["dec.a.conv.w"], params["dec.a.conv.b"], pad=1)
        + conv2d_bias(x2, params["dec.lat2.w"], params["dec.lat2.b"])
    ).relu()
    b = (
        conv2d_bias(upsample_nearest2(a), params["dec.b.conv.w"], params["dec.b.conv.b"], pad=1)
        + conv2d_bias(x1, params["dec.lat1.w"], params["dec.lat1.b"])
    ).relu()
    return conv2d_bias(b, params["dec.head.w"], params["dec.head.b"], pad=1).sigmoid()


# ---------------------------------------------------------------------------
# Checkpoints: flat binary container, bit-exact round-trip.


def save_checkpoint(path, params: dict) -> None:
    """Records sorted by name: u32 name length, name, u32 rank, u32
    extents, then raw little-endian float64 values."""
    chunks = [CHECKPOINT_MAGIC]
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(chunks))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> dict:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    pos = len(CHECKPOINT_MAGIC)

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint: missing {what}", len(blob))
        piece = blob[pos : pos + n]
        pos += n
        return piece

    params = {}
    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * count, f"values of {name}"), dtype="<f8")
        params[name] = Tensor(values.reshape(shape).copy(), requires_grad=True)
    return params
