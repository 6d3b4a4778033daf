"""Binary checkpoints of masked networks.

A checkpoint is laid out as follows, all integers little-endian:

==========  ==============================================
4 bytes     magic ``SPNN``
4 bytes     format version (1)
8 bytes     header length
header      UTF-8 JSON: model spec, seeds, dtype tag,
            parameter and mask manifests in declaration
            order
payload     parameters as 64-bit floats, then masks as
            one byte per element
==========  ==============================================

"""

import json
import logging
import struct

import numpy as np

from .models import ModelSpec, Network

logger = logging.getLogger(__name__)

MAGIC = b"SPNN"
VERSION = 1

_PREAMBLE = struct.Struct("<4sIQ")


class CheckpointError(Exception):
    """The base class of all checkpoint exceptions."""

    pass


class MagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    pass


class MaskError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class TrailingBytesError(CheckpointError):
    pass


def checkpoint_write(model, seeds=()):
    """Serialize `model` with its masks."""
    header = {
        "model": model.spec.to_dict(),
        "seeds": [int(s) for s in seeds],
        "dtype": "<f8",
        "epochs_trained": model.epochs_trained,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
        "masks": [{"name": k, "shape": list(v.shape)} for k, v in model.masks.items()],
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_PREAMBLE.pack(MAGIC, VERSION, len(raw)), raw]
    chunks += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in model.params.values()]
    chunks += [np.ascontiguousarray(v != 0, dtype=np.uint8).tobytes() for v in model.masks.values()]
    return b"".join(chunks)


def _manifest(header, key, expected):
    entries = [(e["name"], tuple(e["shape"])) for e in header[key]]
    if [name for name, _ in entries] != list(expected):
        raise ShapeError("%s manifest does not match the model" % key)
    for name, shape in entries:
        if shape != expected[name].shape:
            raise ShapeError("%s has shape %s, model expects %s" % (name, shape, expected[name].shape))
    return entries


def checkpoint_read(buf):
    """Parse checkpoint bytes into ``(model, header)``."""
    buf = bytes(buf)
    if len(buf) < _PREAMBLE.size:
        raise TruncatedError("Checkpoint shorter than its preamble")
    magic, version, length = _PREAMBLE.unpack_from(buf)
    if magic != MAGIC:
        raise MagicError("Bad magic %r" % magic)
    if version != VERSION:
        raise VersionError("Unsupported version %d" % version)
    start = _PREAMBLE.size + length
    if len(buf) < start:
        raise TruncatedError("Header truncated")
    try:
        header = json.loads(buf[_PREAMBLE.size : start].decode("utf-8"))
        model = Network(ModelSpec.from_dict(header["model"]))
    except (UnicodeDecodeError, ValueError, KeyError) as e:
        raise CheckpointError("Invalid header: %s" % e)
    if header.get("dtype") != "<f8":
        raise CheckpointError("Unsupported dtype %r" % header.get("dtype"))
    try:
        params = _manifest(header, "params", model.params)
        masks = _manifest(header, "masks", model.masks)
    except (KeyError, TypeError) as e:
        raise CheckpointError("Invalid manifest: %s" % e)
    sizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in params]
    msizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in masks]
    end = start + 8 * sum(sizes) + sum(msizes)
    if len(buf) < end:
        raise TruncatedError("Payload truncated")
    if len(buf) > end:
        raise TrailingBytesError("%d trailing bytes" % (len(buf) - end))
    offset = start
    for (name, shape), size in zip(params, sizes):
        model.params[name] = np.frombuffer(buf, "<f8", size, offset).astype(np.float64).reshape(shape)
        offset += 8 * size
    for (name, shape), size in zip(masks, msizes):
        m = np.frombuffer(buf, np.uint8, size, offset).reshape(shape)
        if m.size and m.max() > 1:
            raise MaskError("Mask %s is not binary" % name)
        model.masks[name] = m.astype(np.float64)
        offset += size
    model.epochs_trained = int(header.get("epochs_trained", 0))
    return model, header


def save(model, path, seeds=()):
    buf = checkpoint_write(model, seeds)
    with open(path, "wb") as f:
        f.write(buf)
    logger.info("Wrote checkpoint %s (%d bytes)", path, len(buf))
    return path


def load(path):
    with open(path, "rb") as f:
        return checkpoint_read(f.read())
