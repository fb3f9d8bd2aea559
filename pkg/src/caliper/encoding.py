"""Length-prefixed big-endian field packing.

Every canonical encoding in the package is a sequence of fields, each a
4-byte big-endian length followed by the raw bytes.  Integers are packed
into fixed widths by the caller before they become fields.
"""

import hashlib
import struct

from .errors import EncodingError

FORMAT_VERSION = 0x01
DIGEST_LEN = 32


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def u8(value: int) -> bytes:
    if not 0 <= value <= 0xFF:
        raise EncodingError(f"value {value} does not fit in one byte")
    return bytes([value])


def u32(value: int) -> bytes:
    return struct.pack(">I", value)


def u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def pack_fields(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        out += struct.pack(">I", len(f))
        out += f
    return bytes(out)


def unpack_fields(data: bytes, count: int | None = None) -> list[bytes]:
    """Split ``data`` into its length-prefixed fields.

    When ``count`` is given the buffer must hold exactly that many fields.
    """
    fields = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise EncodingError("truncated length prefix")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise EncodingError("field overruns buffer")
        fields.append(bytes(data[pos:pos + n]))
        pos += n
    if count is not None and len(fields) != count:
        raise EncodingError(f"expected {count} fields, found {len(fields)}")
    return fields


def as_int(field: bytes) -> int:
    return int.from_bytes(field, "big")


def versioned(body: bytes) -> bytes:
    return bytes([FORMAT_VERSION]) + body


def strip_version(data: bytes) -> bytes:
    if not data:
        raise EncodingError("empty encoding")
    if data[0] != FORMAT_VERSION:
        raise EncodingError(f"unsupported format version {data[0]}")
    return data[1:]
