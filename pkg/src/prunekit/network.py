"""Small feedforward CNNs: definition, execution, masking, materialization, file I/O.

A network is an ordered chain of layers (conv / relu / maxpool / flatten /
dense) with a parameter store keyed by layer index. Channel masks zero whole
output planes of a conv layer without touching its weights; ``materialize``
later removes the weights for real, shrinking the next layer's input slices to
match. The on-disk format is documented in docs/format.md.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tape, Tensor

_MAGIC = b"PRNK"
_FORMAT_VERSION = 1
_KIND_CODES = {"conv": 0, "relu": 1, "maxpool": 2, "flatten": 3, "dense": 4}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class FormatError(ValueError):
    """Model file is truncated, corrupt, or from an unknown format version."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the chain. Unused fields stay at 0 for the other kinds."""
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    in_features: int = 0
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and self.out_channels < 1:
            raise ShapeError("conv layer needs out_channels >= 1")


def conv(in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
         pad: int = 1) -> LayerSpec:
    return LayerSpec("conv", in_channels=in_channels, out_channels=out_channels,
                     kernel=kernel, stride=stride, pad=pad)


def relu_layer() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(kernel: int = 2, stride: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", kernel=kernel, stride=stride)


def flatten_layer() -> LayerSpec:
    return LayerSpec("flatten")


def dense_layer(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", in_features=in_features, out_features=out_features)


@dataclass
class ChannelMask:
    """Retained-channel pattern for one conv layer (True = keep)."""
    layer: int
    keep: np.ndarray

    def __post_init__(self):
        self.keep = np.asarray(self.keep, dtype=bool)
        if self.keep.ndim != 1:
            raise ShapeError(f"mask for layer {self.layer} must be 1-d")
        if not self.keep.any():
            raise ShapeError(f"mask for layer {self.layer} removes every channel")


class Network:
    """Ordered layer chain with named parameters and optional channel masks."""

    def __init__(self, specs: Sequence[LayerSpec], input_shape: tuple, num_classes: int,
                 params: Optional[dict] = None, masks: Optional[dict] = None,
                 meta: Optional[dict] = None):
        self.specs = list(specs)
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)
        self.params = params if params is not None else {}
        self.masks = masks if masks is not None else {}
        self.meta = meta if meta is not None else {"trained": False}
        self._validate()

    @classmethod
    def initialize(cls, specs: Sequence[LayerSpec], input_shape: tuple, num_classes: int,
                   rng: np.random.Generator) -> "Network":
        """He-initialized weights, zero biases."""
        net = cls(specs, input_shape, num_classes)
        for idx, spec in enumerate(net.specs):
            if spec.kind == "conv":
                fan_in = spec.in_channels * spec.kernel * spec.kernel
                w = rng.standard_normal((spec.out_channels, spec.in_channels,
                                         spec.kernel, spec.kernel)) * np.sqrt(2.0 / fan_in)
                net.params[idx] = {"w": Tensor(w, requires_grad=True),
                                   "b": Tensor(np.zeros(spec.out_channels), requires_grad=True)}
            elif spec.kind == "dense":
                w = rng.standard_normal((spec.in_features, spec.out_features)) \
                    * np.sqrt(2.0 / spec.in_features)
                net.params[idx] = {"w": Tensor(w, requires_grad=True),
                                   "b": Tensor(np.zeros(spec.out_features), requires_grad=True)}
        return net

    def _validate(self) -> None:
        self.layer_shapes()  # raises on incompatible adjacent layers

    def layer_shapes(self) -> list[tuple]:
        """Output shape (without batch dim) after each layer."""
        shape = self.input_shape
        shapes = []
        for idx, spec in enumerate(self.specs):
            if spec.kind == "conv":
                if len(shape) != 3 or shape[0] != spec.in_channels:
                    raise ShapeError(
                        f"layer {idx} (conv): expects {spec.in_channels} input channels, "
                        f"upstream provides {shape}")
                c, h, w = shape
                span_h = h + 2 * spec.pad - spec.kernel
                span_w = w + 2 * spec.pad - spec.kernel
                if span_h < 0 or span_w < 0 or span_h % spec.stride or span_w % spec.stride:
                    raise ShapeError(f"layer {idx} (conv): non-integral output size from {shape}")
                shape = (spec.out_channels,
                         span_h // spec.stride + 1, span_w // spec.stride + 1)
            elif spec.kind == "maxpool":
                if len(shape) != 3:
                    raise ShapeError(f"layer {idx} (maxpool): needs [C,H,W] input, got {shape}")
                c, h, w = shape
                if (h - spec.kernel) % spec.stride or (w - spec.kernel) % spec.stride:
                    raise ShapeError(f"layer {idx} (maxpool): non-integral output size from {shape}")
                shape = (c, (h - spec.kernel) // spec.stride + 1,
                         (w - spec.kernel) // spec.stride + 1)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind == "dense":
                if len(shape) != 1 or shape[0] != spec.in_features:
                    raise ShapeError(
                        f"layer {idx} (dense): expects {spec.in_features} features, "
                        f"upstream provides {shape}")
                shape = (spec.out_features,)
            shapes.append(shape)
        # classifier networks must end in logits of the declared class count;
        # headless (conv-only) chains are allowed for feature extraction
        if shapes and len(shapes[-1]) == 1 and shapes[-1] != (self.num_classes,):
            raise ShapeError(
                f"network output {shapes[-1]} does not match class count {self.num_classes}")
        return shapes

    def conv_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.specs) if s.kind == "conv"]

    def parameters(self):
        for idx in sorted(self.params):
            for name in ("w", "b"):
                yield idx, name, self.params[idx][name]

    def copy(self, deep: bool = True) -> "Network":
        params = {}
        for idx, entry in self.params.items():
            if deep:
                params[idx] = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                               for k, t in entry.items()}
            else:
                params[idx] = dict(entry)
        return Network(list(self.specs), self.input_shape, self.num_classes,
                       params=params, masks={k: v.copy() for k, v in self.masks.items()},
                       meta=dict(self.meta))


def forward(net: Network, x: Tensor, tape: Optional[Tape] = None,
            upto_layer: Optional[int] = None, capture: Sequence[int] = ()):
    """Run the chain on a [B,C,H,W] batch.

    Returns the logits, or the (masked) post-conv feature map of ``upto_layer``
    when given. With a non-empty ``capture`` the return value is a
    ``(result, {layer: feature})`` pair; captured features are taken right
    after the convolution (and mask), before the nonlinearity.
    """
    if x.data.ndim != 4 or x.shape[1:] != net.input_shape:
        raise ShapeError(
            f"forward: input shape {x.shape} does not match declared {net.input_shape}")
    if upto_layer is not None and not (0 <= upto_layer < len(net.specs)):
        raise ShapeError(f"forward: layer index {upto_layer} out of range")

    h = x
    feats: dict[int, Tensor] = {}
    for idx, spec in enumerate(net.specs):
        if spec.kind == "conv":
            p = net.params[idx]
            h = T.conv2d(h, p["w"], stride=spec.stride, pad=spec.pad, bias=p["b"], tape=tape)
            mask = net.masks.get(idx)
            if mask is not None and not mask.all():
                h = T.mul(h, Tensor(mask.astype(np.float64).reshape(1, -1, 1, 1)), tape)
            if idx in capture or idx == upto_layer:
                feats[idx] = h
        elif spec.kind == "relu":
            h = T.relu(h, tape)
        elif spec.kind == "maxpool":
            h = T.max_pool2d(h, spec.kernel, spec.stride, tape)
        elif spec.kind == "flatten":
            h = T.flatten(h, tape)
        elif spec.kind == "dense":
            p = net.params[idx]
            h = T.dense(h, p["w"], p["b"], tape)
        if idx == upto_layer:
            return (h, feats) if capture else h
    return (h, feats) if capture else h


def apply_mask(net: Network, mask: ChannelMask) -> Network:
    """Logically zero the masked output channels of one conv layer.

    Parameters are shared with ``net``; only the mask table is copied.
    """
    if net.specs[mask.layer].kind != "conv":
        raise ShapeError(f"layer {mask.layer} is not a conv layer")
    m = net.specs[mask.layer].out_channels
    if mask.keep.shape != (m,):
        raise ShapeError(
            f"mask length {mask.keep.shape[0]} != {m} channels of layer {mask.layer}")
    out = Network(list(net.specs), net.input_shape, net.num_classes,
                  params=net.params, masks={k: v.copy() for k, v in net.masks.items()},
                  meta=dict(net.meta))
    out.masks[mask.layer] = mask.keep.copy()
    return out


def materialize(net: Network, masks: Sequence[ChannelMask]) -> Network:
    """Physically remove masked channels: shrink layer l's output side and the
    matching input slices of the next conv (or dense columns fed through a
    flatten)."""
    by_layer = {m.layer: m for m in masks}
    convs = net.conv_layers()
    if sorted(by_layer) != convs:
        raise ShapeError(
            f"need exactly one mask per conv layer {convs}, got {sorted(by_layer)}")
    shapes = net.layer_shapes()

    specs = list(net.specs)
    params = {idx: {k: Tensor(t.data.copy(), requires_grad=t.requires_grad)
                    for k, t in entry.items()}
              for idx, entry in net.params.items()}

    for l in convs:
        keep = by_layer[l].keep
        if keep.shape != (specs[l].out_channels,):
            raise ShapeError(f"mask length mismatch on layer {l}")
        kidx = np.flatnonzero(keep)
        params[l]["w"] = Tensor(params[l]["w"].data[kidx], requires_grad=True)
        params[l]["b"] = Tensor(params[l]["b"].data[kidx], requires_grad=True)
        specs[l] = replace(specs[l], out_channels=len(kidx))

        for nxt in range(l + 1, len(specs)):
            spec = specs[nxt]
            if spec.kind == "conv":
                params[nxt]["w"] = Tensor(params[nxt]["w"].data[:, kidx], requires_grad=True)
                specs[nxt] = replace(spec, in_channels=len(kidx))
                break
            if spec.kind == "dense":
                # flatten groups columns per channel, hw entries each
                c, hf, wf = shapes[l][0], None, None
                for back in range(nxt - 1, l, -1):
                    if specs[back].kind == "flatten":
                        _, hf, wf = (shapes[back - 1] if back else net.input_shape)
                        break
                if hf is None:
                    raise ShapeError(f"dense layer {nxt} consumes conv output without flatten")
                w = params[nxt]["w"].data
                w = w.reshape(c, hf * wf, -1)[kidx].reshape(len(kidx) * hf * wf, -1)
                params[nxt]["w"] = Tensor(w, requires_grad=True)
                specs[nxt] = replace(spec, in_features=len(kidx) * hf * wf)
                break

    return Network(specs, net.input_shape, net.num_classes, params=params,
                   masks={}, meta=dict(net.meta))


# ---------------------------------------------------------------------------
# serialization (see docs/format.md)


def _pack_array(a: np.ndarray) -> bytes:
    out = struct.pack("<B", a.ndim)
    out += struct.pack(f"<{a.ndim}I", *a.shape)
    out += np.ascontiguousarray(a, dtype="<f8").tobytes()
    return out


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("model file is truncated")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save(net: Network, path) -> None:
    body = _MAGIC + struct.pack("<H", _FORMAT_VERSION)
    body += struct.pack("<B", 1 if net.meta.get("trained") else 0)
    body += struct.pack("<I", net.num_classes)
    body += struct.pack("<B", len(net.input_shape))
    body += struct.pack(f"<{len(net.input_shape)}I", *net.input_shape)
    body += struct.pack("<I", len(net.specs))
    for spec in net.specs:
        body += struct.pack("<B7I", _KIND_CODES[spec.kind], spec.in_channels,
                            spec.out_channels, spec.kernel, spec.stride, spec.pad,
                            spec.in_features, spec.out_features)
    for idx in sorted(net.params):
        for name in ("w", "b"):
            body += _pack_array(net.params[idx][name].data)
    body += struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as fh:
        fh.write(body)


def load(path) -> Network:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 10:
        raise FormatError("model file is truncated")
    if blob[:4] != _MAGIC:
        raise FormatError("bad magic: not a model file")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise FormatError("checksum failure: file is corrupted")

    r = _Reader(blob[:-4])
    r.take(4)
    (version,) = r.unpack("<H")
    if version != _FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    (flags,) = r.unpack("<B")
    (num_classes,) = r.unpack("<I")
    (ndim,) = r.unpack("<B")
    input_shape = r.unpack(f"<{ndim}I")
    (n_layers,) = r.unpack("<I")
    specs = []
    for _ in range(n_layers):
        code, cin, cout, k, s, p, fin, fout = r.unpack("<B7I")
        if code not in _KIND_NAMES:
            raise FormatError(f"unknown layer kind code {code}")
        specs.append(LayerSpec(_KIND_NAMES[code], in_channels=cin, out_channels=cout,
                               kernel=k, stride=s, pad=p, in_features=fin, out_features=fout))
    params = {}
    for idx, spec in enumerate(specs):
        if spec.kind not in ("conv", "dense"):
            continue
        entry = {}
        for name in ("w", "b"):
            (nd,) = r.unpack("<B")
            shape = r.unpack(f"<{nd}I")
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(r.take(count * 8), dtype="<f8").reshape(shape)
            entry[name] = Tensor(data.copy(), requires_grad=True)
        params[idx] = entry
    if r.pos != len(r.blob):
        raise FormatError("trailing bytes after parameter payload")
    return Network(specs, input_shape, num_classes, params=params,
                   meta={"trained": bool(flags & 1)})


def reference_specs(in_channels: int = 3, image_size: int = 12,
                    num_classes: int = 3) -> list[LayerSpec]:
    """Desk-scale 4-conv benchmark network: 16-32-32-64 channels, two pools."""
    if image_size % 4:
        raise ShapeError("reference network needs an image size divisible by 4")
    tail = image_size // 4
    return [
        conv(in_channels, 16), relu_layer(), maxpool(),
        conv(16, 32), relu_layer(),
        conv(32, 32), relu_layer(), maxpool(),
        conv(32, 64), relu_layer(),
        flatten_layer(), dense_layer(64 * tail * tail, num_classes),
    ]
