"""Key-personalized segment layout for a toy program container.

Container::

    "ASLP" | version:1 | S:4 | checksum:32 | S x (length:4 | segment)

The checksum covers the length-prefixed segments in canonical order, so a
loader holding the wrong key reassembles an order that fails the check.
"""

import hashlib
import struct
from dataclasses import dataclass

from .encoding import digest, pack_fields
from .entropy import as_entropy
from .errors import FormatError, LoadFailure

MAGIC = b"ASLP"
VERSION = 0x01
_HEAD = struct.Struct(">4sBI32s")
_LEN = struct.Struct(">I")
DOMAIN = b"aslp-v1"


def image_checksum(segments) -> bytes:
    return digest(pack_fields(*segments))


@dataclass(frozen=True)
class SegmentedImage:
    segments: tuple

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(bytes(s) for s in self.segments))
        if not self.segments:
            raise ValueError("an image needs at least one segment")

    @property
    def S(self) -> int:
        return len(self.segments)

    @property
    def checksum(self) -> bytes:
        return image_checksum(self.segments)

    def to_bytes(self) -> bytes:
        return _container(self.segments, self.checksum)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SegmentedImage":
        segments, checksum = parse_container(data)
        if image_checksum(segments) != checksum:
            raise LoadFailure("canonical image checksum mismatch")
        return cls(segments)


def _container(segments, checksum: bytes) -> bytes:
    body = b"".join(_LEN.pack(len(s)) + s for s in segments)
    return _HEAD.pack(MAGIC, VERSION, len(segments), checksum) + body


def parse_container(data: bytes):
    if len(data) < _HEAD.size:
        raise FormatError("truncated header")
    magic, version, count, checksum = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if count == 0:
        raise FormatError("zero segments")
    pos = _HEAD.size
    segments = []
    for _ in range(count):
        if pos + _LEN.size > len(data):
            raise FormatError("truncated segment length")
        (n,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        if pos + n > len(data):
            raise FormatError("truncated segment")
        segments.append(bytes(data[pos:pos + n]))
        pos += n
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes")
    return segments, checksum


def permutation(key: bytes, S: int) -> list[int]:
    """Fisher-Yates shuffle of range(S) driven by an extendable-output stream.

    Output position ``j`` of the personalized image holds canonical segment
    ``perm[j]``.
    """
    if not key:
        raise ValueError("personalization key must be non-empty")
    seed = hashlib.sha256(bytes(key) + DOMAIN).digest()
    shake = hashlib.shake_256(seed)
    need = 64 * max(S, 1)
    stream = shake.digest(need)
    pos = 0
    perm = list(range(S))
    for i in range(S - 1, 0, -1):
        bound = i + 1
        limit = (1 << 32) - (1 << 32) % bound  # rejection keeps j uniform
        while True:
            if pos + 4 > len(stream):
                need *= 2
                stream = shake.digest(need)
            r = int.from_bytes(stream[pos:pos + 4], "big")
            pos += 4
            if r < limit:
                break
        j = r % bound
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def personalize(image: SegmentedImage, key: bytes) -> bytes:
    perm = permutation(key, image.S)
    return _container([image.segments[p] for p in perm], image.checksum)


def redeploy(image: SegmentedImage, new_key: bytes) -> bytes:
    return personalize(image, new_key)


def load(data: bytes, key: bytes) -> SegmentedImage:
    """Undo the key's permutation and verify; nothing is returned on mismatch."""
    shuffled, checksum = parse_container(data)
    perm = permutation(key, len(shuffled))
    canonical = [b""] * len(shuffled)
    for j, p in enumerate(perm):
        canonical[p] = shuffled[j]
    if image_checksum(canonical) != checksum:
        raise LoadFailure("segment order does not match the image checksum")
    return SegmentedImage(canonical)


def synthetic_image(S: int, rng, seg_len=(64, 256)) -> SegmentedImage:
    """Distinct random segments, handy for demos and tests."""
    rng = as_entropy(rng)
    lo, hi = seg_len
    segs = []
    while len(segs) < S:
        s = rng.bytes(lo + rng.randbelow(hi - lo + 1))
        if s not in segs:
            segs.append(s)
    return SegmentedImage(segs)
