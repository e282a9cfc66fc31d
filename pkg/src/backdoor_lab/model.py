"""Fixed desk-scale CNN with final-conv activation capture and pruning mask.

Architecture::

    conv1(8, 3x3, pad 1) -> ReLU -> pool
    conv2(16, 3x3, pad 1) -> ReLU -> pool
    conv3(32, 3x3, pad 1) -> ReLU -> channel mask -> flatten -> fc

conv3 is the final convolutional layer; its masked post-ReLU maps are the
per-neuron activation maps used by Grad-CAM, the norm analysis and pruning.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor_ops as ops
from .errors import DimensionError, FormatError

FINAL_CHANNELS = 32
LAYERS = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "fc_w", "fc_b")
MAGIC = b"BDF1"
VERSION = 1


@dataclass
class ModelParams:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    conv3_w: np.ndarray
    conv3_b: np.ndarray
    fc_w: np.ndarray
    fc_b: np.ndarray
    num_classes: int
    input_shape: tuple[int, int, int]
    prune_mask: np.ndarray = field(default_factory=lambda: np.ones(FINAL_CHANNELS, dtype=bool))

    def __post_init__(self):
        c, h, w = self.input_shape
        if h % 4 or w % 4:
            raise DimensionError(f"input H,W must be divisible by 4, got {h}x{w}")
        expected = expected_shapes(self.num_classes, self.input_shape)
        for name in LAYERS:
            got = getattr(self, name).shape
            if got != expected[name]:
                raise DimensionError(f"{name} has shape {got}, expected {expected[name]}")
        self.prune_mask = np.asarray(self.prune_mask, dtype=bool)
        if self.prune_mask.shape != (FINAL_CHANNELS,):
            raise DimensionError(f"prune_mask must have length {FINAL_CHANNELS}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in LAYERS}

    def copy(self) -> "ModelParams":
        return replace(
            self,
            **{name: arr.copy() for name, arr in self.arrays().items()},
            prune_mask=self.prune_mask.copy(),
        )

    def with_mask(self, mask) -> "ModelParams":
        out = self.copy()
        out.prune_mask = np.asarray(mask, dtype=bool).copy()
        return out

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.num_classes == other.num_classes
            and tuple(self.input_shape) == tuple(other.input_shape)
            and np.array_equal(self.prune_mask, other.prune_mask)
            and all(
                a.dtype == b.dtype and a.tobytes() == b.tobytes()
                for a, b in zip(self.arrays().values(), other.arrays().values())
            )
        )


def expected_shapes(num_classes: int, input_shape) -> dict[str, tuple]:
    c, h, w = input_shape
    return {
        "conv1_w": (8, c, 3, 3),
        "conv1_b": (8,),
        "conv2_w": (16, 8, 3, 3),
        "conv2_b": (16,),
        "conv3_w": (FINAL_CHANNELS, 16, 3, 3),
        "conv3_b": (FINAL_CHANNELS,),
        "fc_w": (num_classes, FINAL_CHANNELS * (h // 4) * (w // 4)),
        "fc_b": (num_classes,),
    }


def init_params(num_classes: int, input_shape, seed: int) -> ModelParams:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in expected_shapes(num_classes, input_shape).items():
        if name.endswith("_b"):
            arrays[name] = np.zeros(shape, dtype=np.float32)
            continue
        if len(shape) == 4:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        else:
            fan_in, fan_out = shape[1], shape[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return ModelParams(**arrays, num_classes=num_classes, input_shape=tuple(input_shape))


@dataclass
class ForwardTrace:
    logits: np.ndarray
    final_conv_maps: np.ndarray
    cache: dict


def forward(params: ModelParams, image: np.ndarray) -> ForwardTrace:
    """Run the network on one image ``[C,H,W]`` or a batch ``[N,C,H,W]``."""
    if image.shape[-3:] != tuple(params.input_shape) or image.ndim not in (3, 4):
        raise DimensionError(
            f"image shape {image.shape} does not match model input {tuple(params.input_shape)}"
        )
    single = image.ndim == 3
    x = image[None] if single else image
    x = x.astype(params.conv1_w.dtype, copy=False)

    z1 = ops.conv2d_forward(x, params.conv1_w, params.conv1_b, 1, 1)
    p1, i1 = ops.maxpool2_forward(ops.relu_forward(z1))
    z2 = ops.conv2d_forward(p1, params.conv2_w, params.conv2_b, 1, 1)
    p2, i2 = ops.maxpool2_forward(ops.relu_forward(z2))
    z3 = ops.conv2d_forward(p2, params.conv3_w, params.conv3_b, 1, 1)
    mask = params.prune_mask.astype(z3.dtype)[None, :, None, None]
    a3 = ops.relu_forward(z3) * mask
    flat = a3.reshape(a3.shape[0], -1)
    logits = ops.dense_forward(flat, params.fc_w, params.fc_b)

    cache = dict(x=x, z1=z1, i1=i1, p1=p1, z2=z2, i2=i2, p2=p2, z3=z3, mask=mask, flat=flat, single=single)
    if single:
        return ForwardTrace(logits[0], a3[0], cache)
    return ForwardTrace(logits, a3, cache)


def _batched_d_logits(trace: ForwardTrace, d_logits: np.ndarray) -> np.ndarray:
    d = np.asarray(d_logits, dtype=trace.logits.dtype)
    if d.shape != trace.logits.shape:
        raise DimensionError(f"d_logits shape {d.shape} != logits shape {trace.logits.shape}")
    return d[None] if trace.cache["single"] else d


def _to_final_conv(params, trace, d_logits):
    d = _batched_d_logits(trace, d_logits)
    d_flat = d @ params.fc_w
    return d, d_flat.reshape(trace.cache["z3"].shape)


def backward_to_final_conv(params: ModelParams, trace: ForwardTrace, d_logits) -> np.ndarray:
    """Gradient of ``sum(d_logits * logits)`` with respect to the final conv maps."""
    _, d_a3 = _to_final_conv(params, trace, d_logits)
    return d_a3[0] if trace.cache["single"] else d_a3


def _backward(params, trace, d_logits, want_params: bool):
    c = trace.cache
    d, d_a3 = _to_final_conv(params, trace, d_logits)
    grads = {}
    if want_params:
        fc = ops.dense_backward(c["flat"], params.fc_w, d)
        grads["fc_w"], grads["fc_b"] = fc.d_weights, fc.d_bias
    d_z3 = ops.relu_backward(c["z3"], d_a3 * c["mask"])
    g3 = ops.conv2d_backward(c["p2"], params.conv3_w, 1, 1, d_z3)
    d_a2 = ops.maxpool2_backward(c["i2"], g3.d_input, c["z2"].shape)
    d_z2 = ops.relu_backward(c["z2"], d_a2)
    g2 = ops.conv2d_backward(c["p1"], params.conv2_w, 1, 1, d_z2)
    d_a1 = ops.maxpool2_backward(c["i1"], g2.d_input, c["z1"].shape)
    d_z1 = ops.relu_backward(c["z1"], d_a1)
    g1 = ops.conv2d_backward(c["x"], params.conv1_w, 1, 1, d_z1)
    if want_params:
        grads.update(
            conv3_w=g3.d_weights, conv3_b=g3.d_bias,
            conv2_w=g2.d_weights, conv2_b=g2.d_bias,
            conv1_w=g1.d_weights, conv1_b=g1.d_bias,
        )
    d_x = g1.d_input
    return (d_x[0] if c["single"] else d_x), grads


def backward_params(params: ModelParams, trace: ForwardTrace, d_logits) -> dict[str, np.ndarray]:
    """Gradients of every layer array, summed over the batch if there is one."""
    _, grads = _backward(params, trace, d_logits, want_params=True)
    return {name: grads[name] for name in LAYERS}


def backward_to_input(params: ModelParams, trace: ForwardTrace, d_logits) -> np.ndarray:
    d_x, _ = _backward(params, trace, d_logits, want_params=False)
    return d_x


def zero_channels(params: ModelParams, channels) -> ModelParams:
    """Return a copy whose conv3 filters and biases for ``channels`` are zero.

    With the mask all-true this is output-equivalent to masking those channels.
    """
    out = params.copy()
    idx = np.asarray(list(channels), dtype=int)
    out.conv3_w[idx] = 0
    out.conv3_b[idx] = 0
    return out


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image; ``np.argmax`` already breaks ties toward the lower index."""
    preds = []
    for start in range(0, len(images), batch_size):
        preds.append(forward(params, images[start:start + batch_size]).logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def final_conv_maps(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    maps = [forward(params, images[s:s + batch_size]).final_conv_maps for s in range(0, len(images), batch_size)]
    return np.concatenate(maps)


# -- serialization -----------------------------------------------------------

def model_to_bytes(params: ModelParams) -> bytes:
    c, h, w = params.input_shape
    buf = bytearray(MAGIC)
    buf += bytes([VERSION])
    buf += struct.pack("<4I", params.num_classes, c, h, w)
    for name in LAYERS:
        arr = np.ascontiguousarray(getattr(params, name), dtype="<f4")
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += params.prune_mask.astype(np.uint8).tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated model file while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def model_from_bytes(data: bytes) -> ModelParams:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, expected b'BDF1'", 0)
    version = r.take(1, "version")[0]
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}", 4)
    num_classes = r.u32("num_classes")
    input_shape = (r.u32("C"), r.u32("H"), r.u32("W"))
    if input_shape[1] % 4 or input_shape[2] % 4 or min(input_shape) == 0 or num_classes == 0:
        raise FormatError(f"invalid header num_classes={num_classes} input={input_shape}", 5)
    expected = expected_shapes(num_classes, input_shape)
    arrays = {}
    for name in LAYERS:
        start = r.pos
        rank = r.u32(f"{name} rank")
        dims = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims")))
        if dims != expected[name]:
            raise FormatError(f"{name} has shape {dims}, expected {expected[name]}", start)
        count = int(np.prod(dims))
        raw = r.take(4 * count, f"{name} data")
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    mask_pos = r.pos
    mask_raw = r.take(FINAL_CHANNELS, "prune mask")
    if any(b > 1 for b in mask_raw):
        raise FormatError("prune mask bytes must be 0 or 1", mask_pos)
    crc_pos = r.pos
    stored = r.u32("CRC32")
    if stored != zlib.crc32(data[:crc_pos]):
        raise FormatError("CRC32 mismatch", crc_pos)
    if r.pos != len(data):
        raise FormatError("trailing bytes after CRC32", r.pos)
    mask = np.frombuffer(mask_raw, dtype=np.uint8).astype(bool)
    return ModelParams(**arrays, num_classes=num_classes, input_shape=input_shape, prune_mask=mask)


def save_model(params: ModelParams, path) -> None:
    Path(path).write_bytes(model_to_bytes(params))


def load_model(path) -> ModelParams:
    return model_from_bytes(Path(path).read_bytes())
