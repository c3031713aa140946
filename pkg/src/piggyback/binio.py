"""Little-endian record encoding shared by the PGDS, PGBB and PGBM formats.

Every file is ``magic | u16 version | body | sha256(preceding bytes)``.
Readers report truncation and garbage with the name of the section being
decoded.
"""

import hashlib
import json
import struct

import numpy as np

from piggyback.errors import FormatError

DIGEST_SIZE = 32


def sha256(data):
    return hashlib.sha256(data).digest()


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


class Writer:
    def __init__(self, magic, version):
        self.buf = bytearray(magic)
        self.u16(version)

    def raw(self, b):
        self.buf += b

    def u8(self, v):
        self.buf += struct.pack("<B", v)

    def u16(self, v):
        self.buf += struct.pack("<H", v)

    def u32(self, v):
        self.buf += struct.pack("<I", v)

    def u64(self, v):
        self.buf += struct.pack("<Q", v)

    def f64(self, v):
        self.buf += struct.pack("<d", v)

    def blob(self, b):
        self.u32(len(b))
        self.buf += b

    def text(self, s):
        b = s.encode("utf-8")
        self.u16(len(b))
        self.buf += b

    def json(self, obj):
        self.blob(canonical_json(obj))

    def array(self, a, dtype):
        a = np.asarray(a)
        self.u8(a.ndim)
        for d in a.shape:
            self.u32(d)
        self.buf += np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()

    def body(self):
        return bytes(self.buf)

    def finish(self):
        body = bytes(self.buf)
        return body + sha256(body)


class Reader:
    def __init__(self, data, magic, versions, what):
        self.data = bytes(data)
        self.pos = 0
        self.what = what
        if len(self.data) < len(magic) + 2 + DIGEST_SIZE:
            raise FormatError(f"{what} file too short ({len(self.data)} bytes)", "header")
        if self.data[: len(magic)] != magic:
            raise FormatError(f"bad magic {self.data[:len(magic)]!r}, expected {magic!r}", "header")
        self.pos = len(magic)
        self.version = self.u16("header")
        if self.version not in versions:
            raise FormatError(f"unsupported {what} version {self.version}", "header")
        self.end = len(self.data) - DIGEST_SIZE

    def take(self, n, section):
        if n < 0 or self.pos + n > self.end:
            raise FormatError(f"truncated {self.what} file", section)
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u8(self, section):
        return struct.unpack("<B", self.take(1, section))[0]

    def u16(self, section):
        if self.pos + 2 > len(self.data):
            raise FormatError(f"truncated {self.what} file", section)
        v = struct.unpack("<H", self.data[self.pos:self.pos + 2])[0]
        self.pos += 2
        return v

    def u32(self, section):
        return struct.unpack("<I", self.take(4, section))[0]

    def u64(self, section):
        return struct.unpack("<Q", self.take(8, section))[0]

    def f64(self, section):
        return struct.unpack("<d", self.take(8, section))[0]

    def blob(self, section):
        return self.take(self.u32(section), section)

    def text(self, section):
        try:
            return self.take(self.u16(section), section).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid utf-8 in {self.what} file", section) from e

    def json(self, section):
        try:
            return json.loads(self.blob(section))
        except ValueError as e:
            raise FormatError(f"invalid JSON record in {self.what} file", section) from e

    def array(self, dtype, section):
        ndim = self.u8(section)
        shape = tuple(self.u32(section) for _ in range(ndim))
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * dt.itemsize, section)
        return np.frombuffer(raw, dtype=dt).reshape(shape)

    def finish(self):
        if self.pos != self.end:
            raise FormatError(f"{self.end - self.pos} unexpected bytes before checksum", "trailer")
        digest = self.data[self.end:]
        if sha256(self.data[:self.end]) != digest:
            raise FormatError(f"{self.what} checksum mismatch", "trailer")
        return digest
