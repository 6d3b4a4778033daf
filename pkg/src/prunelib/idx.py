"""IDX binary file format.

An IDX file starts with two zero bytes, a type byte and a dimension
count, followed by one big-endian 32-bit size per dimension and the
big-endian payload in row-major order.

"""

import gzip
import logging
import struct

import numpy as np

logger = logging.getLogger(__name__)

_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

UBYTE = 0x08
DOUBLE = 0x0E


class ParseError(ValueError):
    """The base class of all IDX parse errors."""

    def __init__(self, message, offset):
        ValueError.__init__(self, "%s at offset %d" % (message, offset))
        self.offset = offset


class BadMagicError(ParseError):
    """Raised when the leading bytes are not zero."""

    pass


class TruncatedError(ParseError):
    """Raised when the buffer ends before the declared payload."""

    pass


class UnsupportedTypeError(ParseError):
    """Raised for unknown type bytes."""

    pass


class TrailingBytesError(ParseError):
    """Raised when bytes follow the declared payload."""

    pass


def parse_idx(buf, rescale=True):
    """Parse an IDX buffer into a float64 array.

    Unsigned byte payloads are divided by 255 unless `rescale` is false.

    """
    buf = bytes(buf)
    if len(buf) < 4:
        raise TruncatedError("Header truncated", len(buf))
    if buf[0] != 0 or buf[1] != 0:
        raise BadMagicError("Bad magic", 0)
    if buf[2] not in _TYPES:
        raise UnsupportedTypeError("Unsupported type 0x%02x" % buf[2], 2)
    dtype = _TYPES[buf[2]]
    ndim = buf[3]
    start = 4 + 4 * ndim
    if len(buf) < start:
        raise TruncatedError("Dimensions truncated", len(buf))
    dims = struct.unpack_from(">%dI" % ndim, buf, 4)
    count = int(np.prod(dims, dtype=np.int64))
    end = start + count * dtype.itemsize
    if len(buf) < end:
        raise TruncatedError("Payload truncated", len(buf))
    if len(buf) > end:
        raise TrailingBytesError("Trailing bytes", end)
    data = np.frombuffer(buf, dtype, count, start).astype(np.float64)
    if buf[2] == UBYTE and rescale:
        data /= 255.0
    logger.debug("Parsed IDX type 0x%02x with dimensions %s", buf[2], dims)
    return data.reshape(dims)


def write_idx(array, type_byte=DOUBLE, rescale=True):
    """Serialize `array` as IDX bytes."""
    if type_byte not in _TYPES:
        raise ValueError("Unsupported type 0x%02x" % type_byte)
    array = np.asarray(array, dtype=np.float64)
    if array.ndim < 1 or array.ndim > 255:
        raise ValueError("Value out of range")
    if type_byte == UBYTE and rescale:
        array = np.rint(array * 255.0)
    dtype = _TYPES[type_byte]
    if dtype.kind in "ui":
        info = np.iinfo(dtype)
        if array.size and (array.min() < info.min or array.max() > info.max):
            raise ValueError("Value out of range")
    header = struct.pack(">BBBB", 0, 0, type_byte, array.ndim)
    header += struct.pack(">%dI" % array.ndim, *array.shape)
    return header + array.astype(dtype).tobytes()


def load_idx(path, rescale=True):
    """Read an IDX file, transparently decompressing gzip."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:2] == b"\x1f\x8b":
        buf = gzip.decompress(buf)
    logger.info("Loading %s", path)
    return parse_idx(buf, rescale)
