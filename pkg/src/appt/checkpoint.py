"""Named-tensor checkpoints: a text manifest plus one raw float32 blob.

Manifest layout (one statement per line, ``#`` starts a comment)::

    format = 1
    blob = backbone.bin
    meta.<key> = <value>
    tensor <name> f32 <d0>x<d1>... <offset> <length>

Offsets and lengths are in bytes; the blob holds little-endian IEEE-754
float32 values. ``blob`` is resolved relative to the manifest directory.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, BackboneConfig
from .errors import CheckpointError, ParseError
from .fileio import atomic_write
from .numerics import Tensor

F32 = np.dtype("<f4")


@dataclass
class ManifestEntry:
    name: str
    dtype: str
    shape: tuple
    offset: int
    length: int


@dataclass
class Checkpoint:
    entries: list
    metadata: dict
    blob_path: str

    def entry(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        return None

    def read(self, name):
        """One tensor, widened to float64."""
        e = self.entry(name)
        if e is None:
            raise CheckpointError("not present in checkpoint", tensor=name)
        size = os.path.getsize(self.blob_path)
        if e.offset + e.length > size:
            raise CheckpointError(f"extends to byte {e.offset + e.length} but blob has {size} bytes", tensor=name)
        with open(self.blob_path, "rb") as fh:
            fh.seek(e.offset)
            raw = fh.read(e.length)
        arr = np.frombuffer(raw, dtype=F32).astype(np.float64)
        return arr.reshape(e.shape)

    def read_all(self):
        return {e.name: self.read(e.name) for e in self.entries}


def _shape_str(shape):
    return "x".join(str(n) for n in shape) if shape else "scalar"


def _parse_shape(text):
    if text == "scalar":
        return ()
    return tuple(int(n) for n in text.split("x"))


def save_checkpoint(tensors, path, metadata=None):
    """Write ``tensors`` (name -> Tensor or array) to ``path`` and its blob."""
    path = os.fspath(path)
    blob_name = os.path.basename(path) + ".bin"
    chunks, lines, offset = [], ["format = 1", f"blob = {blob_name}"], 0
    for key, value in (metadata or {}).items():
        lines.append(f"meta.{key} = {value}")
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        raw = np.ascontiguousarray(arr, dtype=F32).tobytes()
        lines.append(f"tensor {name} f32 {_shape_str(arr.shape)} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    atomic_write(os.path.join(os.path.dirname(os.path.abspath(path)), blob_name), b"".join(chunks))
    atomic_write(path, "\n".join(lines) + "\n")


def read_manifest(path):
    path = os.fspath(path)
    with open(path) as fh:
        text = fh.read()
    entries, metadata, blob, seen_format = [], {}, None, False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("tensor "):
            parts = line.split()
            if len(parts) != 6:
                raise ParseError("tensor line needs: tensor NAME DTYPE SHAPE OFFSET LENGTH", lineno, path)
            _, name, dtype, shape, offset, length = parts
            if dtype != "f32":
                raise ParseError(f"unsupported dtype {dtype!r} for {name}", lineno, path)
            try:
                entry = ManifestEntry(name, dtype, _parse_shape(shape), int(offset), int(length))
            except ValueError:
                raise ParseError(f"bad shape/offset/length for {name}", lineno, path) from None
            entries.append(entry)
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ParseError(f"unrecognised line {line!r}", lineno, path)
        key, value = key.strip(), value.strip()
        if key == "format":
            if value != "1":
                raise ParseError(f"unsupported format {value!r}", lineno, path)
            seen_format = True
        elif key == "blob":
            blob = value
        elif key.startswith("meta."):
            metadata[key[5:]] = value
        else:
            raise ParseError(f"unknown key {key!r}", lineno, path)
    if not seen_format or blob is None:
        raise ParseError("manifest lacks 'format' or 'blob' header", None, path)
    blob_path = os.path.join(os.path.dirname(os.path.abspath(path)), blob)
    if not os.path.exists(blob_path):
        raise CheckpointError(f"blob file {blob_path} not found")
    _validate(entries, os.path.getsize(blob_path))
    return Checkpoint(entries, metadata, blob_path)


def _validate(entries, blob_size):
    names = set()
    spans = []
    for e in entries:
        if e.name in names:
            raise CheckpointError("listed twice", tensor=e.name)
        names.add(e.name)
        if e.length != int(np.prod(e.shape, dtype=np.int64)) * 4:
            raise CheckpointError(f"length {e.length} does not match shape {e.shape}", tensor=e.name)
        if e.offset < 0 or e.offset + e.length > blob_size:
            raise CheckpointError(
                f"bytes [{e.offset}, {e.offset + e.length}) outside blob of {blob_size} bytes", tensor=e.name)
        spans.append((e.offset, e.offset + e.length, e.name))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CheckpointError(f"overlaps {n0!r}", tensor=n1)


def config_from_metadata(metadata):
    keys = {"L": int, "d": int, "n_heads": int, "mlp_hidden": int}
    flags = ("has_cls_token", "prenorm", "final_norm")
    kwargs = {}
    for k, conv in keys.items():
        if f"backbone.{k}" in metadata:
            kwargs[k] = conv(metadata[f"backbone.{k}"])
    for k in flags:
        if f"backbone.{k}" in metadata:
            kwargs[k] = metadata[f"backbone.{k}"].lower() == "true"
    if not {"L", "d", "n_heads"} <= kwargs.keys():
        raise CheckpointError("manifest metadata does not describe a backbone config")
    return BackboneConfig(**kwargs)


def backbone_metadata(backbone):
    meta = {"kind": "backbone"}
    if backbone.seed is not None:
        meta["seed"] = backbone.seed
    for k, v in backbone.config.to_dict().items():
        meta[f"backbone.{k}"] = v
    return meta


def save_backbone(backbone, path):
    save_checkpoint(backbone.tensors, path, backbone_metadata(backbone))


def load_backbone(path, config=None):
    """Load and validate a backbone checkpoint against ``config``.

    Without ``config`` the one echoed in the manifest metadata is used.
    Extra tensors are ignored with a warning; manifest order is irrelevant.
    """
    ckpt = read_manifest(path)
    if config is None:
        config = config_from_metadata(ckpt.metadata)
    expected = config.tensor_shapes()
    for name, shape in expected.items():
        e = ckpt.entry(name)
        if e is None:
            raise CheckpointError("missing from checkpoint", tensor=name)
        if e.shape != shape:
            raise CheckpointError(f"shape {e.shape} does not match expected {shape}", tensor=name)
    extra = [e.name for e in ckpt.entries if e.name not in expected]
    if extra:
        warnings.warn(f"ignoring {len(extra)} unknown tensor(s): {', '.join(extra[:5])}", stacklevel=2)
    tensors = {name: Tensor(ckpt.read(name)) for name in expected}
    seed = ckpt.metadata.get("seed")
    return Backbone(config, tensors, seed=int(seed) if seed is not None else None)


def load_trainable(path, model):
    """Copy a trainable-parameter checkpoint into ``model`` (names and shapes must match)."""
    ckpt = read_manifest(path)
    targets = model.trainable()
    for name, t in targets.items():
        e = ckpt.entry(name)
        if e is None:
            raise CheckpointError("missing from trainable checkpoint", tensor=name)
        if e.shape != tuple(t.shape):
            raise CheckpointError(f"shape {e.shape} does not match model shape {tuple(t.shape)}", tensor=name)
    for name, t in targets.items():
        t.data[...] = ckpt.read(name)
    return ckpt
