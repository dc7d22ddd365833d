"""Little-endian record encoding shared by the weight and checkpoint files."""
import struct

import numpy as np

from .errors import TruncatedFileError


class Reader:
    """Sequential reader over a bytes buffer; short reads raise TruncatedFileError."""

    def __init__(self, buf, what="file"):
        self.buf = memoryview(buf)
        self.pos = 0
        self.what = what

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"{self.what} truncated: needed {n} bytes at offset {self.pos}, "
                f"{len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(chunk)

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def at_end(self):
        return self.pos == len(self.buf)

    def array(self):
        rank = self.u32()
        extents = struct.unpack(f"<{rank}I", self.take(4 * rank)) if rank else ()
        count = int(np.prod(extents, dtype=np.int64)) if rank else 1
        values = np.frombuffer(self.take(4 * count), dtype="<f4")
        return values.astype(np.float32).reshape(extents)

    def name(self):
        return self.take(self.u32()).decode("utf-8")


def u32(v):
    return struct.pack("<I", v)


def u64(v):
    return struct.pack("<Q", v)


def pack_array(arr):
    arr = np.asarray(arr, dtype="<f4")
    return (u32(arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
            + np.ascontiguousarray(arr).tobytes())


def pack_name(name):
    raw = name.encode("utf-8")
    return u32(len(raw)) + raw
