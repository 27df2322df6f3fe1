"""Layer specs, parameterized layers, weight init, and the LEMOW1 container."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_KINDS = ("conv2d", "deconv2d", "maxpool2d", "leaky_relu")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: int = 1
    slope: float = 0.01

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "deconv2d") and tuple(self.kernel) != (3, 3):
            raise ValueError(f"{self.kind} kernel must be 3x3, got {self.kernel}")


def init_weight(rng, shape, fan_in):
    """Uniform in +-sqrt(1/fan_in); float32; deterministic per rng state."""
    lim = np.sqrt(1.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape).astype(np.float32)


class Conv2d:
    kind = "conv2d"

    def __init__(self, spec: LayerSpec, rng):
        self.spec = spec
        self.weight = Tensor(init_weight(
            rng, (spec.out_channels, spec.in_channels, 3, 3),
            fan_in=spec.in_channels * 9), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=np.float32),
                           requires_grad=True)

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias,
                         stride=self.spec.stride, padding=self.spec.padding)

    def parameters(self):
        return [self.weight, self.bias]


class Deconv2d:
    kind = "deconv2d"

    def __init__(self, spec: LayerSpec, rng):
        self.spec = spec
        self.weight = Tensor(init_weight(
            rng, (spec.in_channels, spec.out_channels, 3, 3),
            fan_in=spec.in_channels * 9), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels, dtype=np.float32),
                           requires_grad=True)

    def forward(self, x, out_hw=None):
        return ad.deconv2d(x, self.weight, self.bias, stride=self.spec.stride,
                           padding=self.spec.padding, out_hw=out_hw)

    def parameters(self):
        return [self.weight, self.bias]


class MaxPool2d:
    kind = "maxpool2d"

    def __init__(self, spec: LayerSpec = LayerSpec("maxpool2d")):
        self.spec = spec

    def forward(self, x):
        out, _ = ad.maxpool2d(x)
        return out

    def parameters(self):
        return []


class LeakyReLU:
    kind = "leaky_relu"

    def __init__(self, spec: LayerSpec = LayerSpec("leaky_relu")):
        self.spec = spec

    def forward(self, x):
        return ad.leaky_relu(x, slope=self.spec.slope)

    def parameters(self):
        return []


def build_layer(spec: LayerSpec, rng):
    cls = {"conv2d": Conv2d, "deconv2d": Deconv2d,
           "maxpool2d": MaxPool2d, "leaky_relu": LeakyReLU}[spec.kind]
    if spec.kind in ("conv2d", "deconv2d"):
        return cls(spec, rng)
    return cls(spec)


def conv_block(cin, cout):
    """Encoder block pattern: conv3x3, LeakyReLU, conv3x3, LeakyReLU."""
    return [LayerSpec("conv2d", cin, cout), LayerSpec("leaky_relu"),
            LayerSpec("conv2d", cout, cout), LayerSpec("leaky_relu")]


def mirror_decoder(encoder_specs, final_channels=1):
    """Reverse a pool-free encoder into stride-1 deconv specs.

    Channel transitions are reversed and swapped; the last deconv maps to
    final_channels and carries no trailing activation.  Anything but
    conv2d/leaky_relu in the encoder is not mirrorable here.
    """
    convs = []
    for s in encoder_specs:
        if s.kind == "conv2d":
            convs.append(s)
        elif s.kind != "leaky_relu":
            raise ValueError(f"cannot mirror encoder layer kind {s.kind!r}")
    out = []
    for i, s in enumerate(reversed(convs)):
        cout = final_channels if i == len(convs) - 1 else s.in_channels
        out.append(LayerSpec("deconv2d", s.out_channels, cout,
                             stride=1, padding=1))
        if i != len(convs) - 1:
            out.append(LayerSpec("leaky_relu"))
    return out


# --- LEMOW1 weights container -------------------------------------------------
#
# magic "LEMOW1" | uint32 entry count | per entry:
#   uint16 kind-string length, utf-8 kind | uint8 ndim | uint32*ndim extents |
#   float32 little-endian payload (row-major)

_MAGIC = b"LEMOW1"


def save_weights(path, entries):
    """entries: iterable of (kind string, float array); arrays stored float32."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        entries = list(entries)
        f.write(struct.pack("<I", len(entries)))
        for kind, arr in entries:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            name = kind.encode("utf-8")
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:6] != _MAGIC:
        raise ValueError(f"{path}: not a LEMOW1 weights file")
    off = 6
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    entries = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        kind = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
        entries.append((kind, arr.copy()))
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes after last entry")
    return entries


def pack_layers(layers):
    """Parameter entries for save_weights, one per weight/bias, in order."""
    out = []
    for i, layer in enumerate(layers):
        for pname in ("weight", "bias"):
            if hasattr(layer, pname):
                out.append((f"{i:02d}.{layer.kind}.{pname}",
                            getattr(layer, pname).data))
    return out


def unpack_layers(layers, entries):
    """Load parameter entries back into layers; shapes must match exactly."""
    want = [(i, layer, pname) for i, layer in enumerate(layers)
            for pname in ("weight", "bias") if hasattr(layer, pname)]
    params = [e for e in entries if not e[0].startswith("meta.")]
    if len(params) != len(want):
        raise ValueError(f"weights file has {len(params)} parameter entries, "
                         f"model needs {len(want)}")
    for (i, layer, pname), (kind, arr) in zip(want, params):
        expect = f"{i:02d}.{layer.kind}.{pname}"
        if kind != expect:
            raise ValueError(f"weights entry {kind!r} does not match {expect!r}")
        cur = getattr(layer, pname)
        if tuple(arr.shape) != cur.data.shape:
            raise ValueError(f"{kind}: extents {arr.shape} != {cur.data.shape}")
        cur.data = arr.astype(np.float32)


def set_trainable(layers, flag):
    """Toggle requires_grad on every parameter; frozen layers skip their
    weight-gradient work in backward, which matters in the fitting loops."""
    for layer in layers:
        for p in layer.parameters():
            p.requires_grad = bool(flag)
