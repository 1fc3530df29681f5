"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TTCK" | u32 version | u32 layer_count
    per layer: u8 kind | u32 name_len | name (utf-8) | u32 tensor_count
               per tensor: u8 rank | u32 extents[rank] | f32 payload
    optional:  b"THTE" | u32 count | f32 importance[count]

Tensors per kind: Conv3d -> weight, bias; BatchNorm -> scale, shift,
running_mean, running_var; Concat -> a single f32 holding the skip-source
layer index. Every other layer consumes the output of its predecessor.
"""

import io
import struct

import numpy as np

from ..exceptions import FileFormatError, TruncatedFileError, UnknownLayerError, VersionError
from .network import LAYER_KINDS, Layer, Network

MAGIC = b"TTCK"
IMPORTANCE_MAGIC = b"THTE"
VERSION = 1

_KIND_TAGS = {kind: i for i, kind in enumerate(LAYER_KINDS)}


def _layer_tensors(layer, index):
    if layer.kind == "Conv3d":
        return [layer.params["weight"], layer.params["bias"]]
    if layer.kind == "BatchNorm":
        return [layer.params["scale"], layer.params["shift"],
                layer.buffers["running_mean"], layer.buffers["running_var"]]
    if layer.kind == "Concat":
        skip = [j for j in layer.inputs if j != index - 1]
        return [np.array([skip[0]], dtype=np.float32)]
    return []


def dumps_checkpoint(net):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(net.layers)))
    for i, layer in enumerate(net.layers):
        name = layer.name.encode("utf-8")
        tensors = _layer_tensors(layer, i)
        buf.write(struct.pack("<BI", _KIND_TAGS[layer.kind], len(name)))
        buf.write(name)
        buf.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            buf.write(struct.pack("<B", t.ndim))
            buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
            buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    if net.source_importance is not None:
        imp = np.asarray(net.source_importance, dtype="<f4")
        if imp.shape != (len(net.layers),):
            raise ValueError("cached importance must have one entry per layer")
        buf.write(IMPORTANCE_MAGIC)
        buf.write(struct.pack("<I", imp.size))
        buf.write(imp.tobytes())
    return buf.getvalue()


def save_checkpoint(net, path):
    data = dumps_checkpoint(net)
    with open(path, "wb") as fh:
        fh.write(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"truncated checkpoint while reading {what} "
                                     f"(need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def remaining(self):
        return len(self.data) - self.pos


def loads_checkpoint(data):
    r = _Reader(data)
    if len(data) < 4 or r.take(4, "magic") != MAGIC:
        raise FileFormatError("not a checkpoint file (bad magic)")
    version, n_layers = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    layers = []
    for i in range(n_layers):
        tag, name_len = r.unpack("<BI", "layer header")
        if tag >= len(LAYER_KINDS):
            raise UnknownLayerError(f"unknown layer kind tag {tag} at layer {i}")
        kind = LAYER_KINDS[tag]
        try:
            name = r.take(name_len, "layer name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FileFormatError(f"layer {i}: name is not valid UTF-8") from exc
        (n_tensors,) = r.unpack("<I", "tensor count")
        tensors = []
        for _ in range(n_tensors):
            (rank,) = r.unpack("<B", "tensor rank")
            if rank > 5:
                raise FileFormatError(f"layer {name}: tensor rank {rank} > 5")
            shape = r.unpack(f"<{rank}I", "tensor extents")
            count = int(np.prod(shape, dtype=np.int64))
            payload = r.take(4 * count, f"tensor payload of {name}")
            tensors.append(np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape))
        layers.append(_make_layer(kind, name, tensors, i))
    importance = None
    if r.remaining:
        if r.take(4, "trailer magic") != IMPORTANCE_MAGIC:
            raise FileFormatError("unexpected trailing bytes after layer table")
        (count,) = r.unpack("<I", "importance count")
        if count != n_layers:
            raise FileFormatError(f"importance block has {count} entries for {n_layers} layers")
        importance = np.frombuffer(r.take(4 * count, "importance payload"), dtype="<f4").astype(np.float32)
        if r.remaining:
            raise FileFormatError("unexpected trailing bytes after importance block")
    try:
        net = Network(layers, dtype=np.float32)
    except ValueError as exc:
        raise FileFormatError(f"inconsistent layer table: {exc}") from exc
    net.source_importance = importance
    return net


def _make_layer(kind, name, tensors, index):
    expected = {"Conv3d": 2, "BatchNorm": 4, "Concat": 1}.get(kind, 0)
    if len(tensors) != expected:
        raise FileFormatError(f"layer {name} ({kind}) carries {len(tensors)} tensors, expected {expected}")
    prev = (index - 1,)
    if kind == "Conv3d":
        return Layer(kind, name, {"weight": tensors[0], "bias": tensors[1]}, inputs=prev)
    if kind == "BatchNorm":
        return Layer(kind, name, {"scale": tensors[0], "shift": tensors[1]},
                     {"running_mean": tensors[2], "running_var": tensors[3]}, inputs=prev)
    if kind == "Concat":
        return Layer(kind, name, inputs=(index - 1, int(tensors[0][0])))
    return Layer(kind, name, inputs=prev)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
