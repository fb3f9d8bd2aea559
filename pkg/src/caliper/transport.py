"""Wire format, sealed envelopes, nonces and the two transport backends.

Frame layout (all integers big-endian)::

    "CLPR" | version:1 | type:1 | length:4 | payload

Envelopes are X25519 + HKDF-SHA256 + AES-256-GCM.  The header (version,
recipient key id, ephemeral public key) is bound as associated data.
"""

import queue
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .encoding import digest
from .entropy import as_entropy
from .errors import NeedMoreData, OpenFailure, ProtocolError

MAGIC = b"CLPR"
WIRE_VERSION = 0x01
HEADER = struct.Struct(">4sBBI")
NONCE_LEN = 16
MAX_PAYLOAD = 2**32 - 1


class MsgType(IntEnum):
    ENROLL_REQUEST = 0x01
    ENROLL_RECEIPT = 0x02
    ACCESS_REQUEST = 0x03
    CHALLENGE = 0x04
    RESPONSE = 0x05
    VERDICT = 0x06
    ERROR = 0x07


@dataclass(frozen=True)
class Message:
    type: MsgType
    payload: bytes = b""
    version: int = WIRE_VERSION


def frame(message: Message) -> bytes:
    if len(message.payload) > MAX_PAYLOAD:
        raise ProtocolError("payload too large for a 4-byte length")
    return HEADER.pack(MAGIC, message.version, message.type, len(message.payload)) + message.payload


def _parse_header(data) -> tuple[MsgType, int]:
    magic, version, mtype, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise ProtocolError(f"unsupported wire version {version}")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type {mtype:#x}") from None
    return mtype, length


def deframe(data: bytes) -> Message:
    """Parse exactly one complete frame; any length disagreement is an error."""
    if len(data) < HEADER.size:
        raise NeedMoreData(f"{len(data)} bytes, header needs {HEADER.size}")
    mtype, length = _parse_header(data)
    if length != len(data) - HEADER.size:
        raise ProtocolError(f"declared payload {length} bytes, frame carries {len(data) - HEADER.size}")
    return Message(mtype, bytes(data[HEADER.size:]))


class FrameReader:
    """Incremental deframer for a byte stream; partial reads resume."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Message]:
        self._buf += data
        out = []
        while True:
            try:
                out.append(self.next_message())
            except NeedMoreData:
                return out

    def next_message(self) -> Message:
        if len(self._buf) < HEADER.size:
            raise NeedMoreData("incomplete header")
        mtype, length = _parse_header(self._buf)
        end = HEADER.size + length
        if len(self._buf) < end:
            raise NeedMoreData(f"need {end - len(self._buf)} more bytes")
        msg = Message(mtype, bytes(self._buf[HEADER.size:end]))
        del self._buf[:end]
        return msg

    def extend(self, data: bytes):
        self._buf += data

    @property
    def pending(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------------------
# envelopes

ENVELOPE_VERSION = 0x01
_ENV_HEAD = struct.Struct(">B8s32s12s")


def key_id(public: bytes) -> bytes:
    return digest(public)[:8]


@dataclass(frozen=True)
class Envelope:
    recipient: bytes   # 8-byte key id
    ephemeral: bytes   # X25519 public key
    nonce: bytes
    ciphertext: bytes  # includes the GCM tag

    def header(self) -> bytes:
        return _ENV_HEAD.pack(ENVELOPE_VERSION, self.recipient, self.ephemeral, self.nonce)

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "Envelope":
        if len(data) < _ENV_HEAD.size + 16:
            raise OpenFailure("envelope truncated")
        version, rid, eph, nonce = _ENV_HEAD.unpack_from(data)
        if version != ENVELOPE_VERSION:
            raise OpenFailure(f"unsupported envelope version {version}")
        return cls(rid, eph, nonce, bytes(data[_ENV_HEAD.size:]))


def _wrap_key(shared: bytes, ephemeral: bytes, recipient: bytes) -> bytes:
    return HKDF(hashes.SHA256(), 32, salt=ephemeral + recipient,
                info=b"caliper-envelope-v1").derive(shared)


def seal(recipient_public: bytes, plaintext: bytes, rng=None) -> bytes:
    rng = as_entropy(rng)
    eph = x25519.X25519PrivateKey.from_private_bytes(rng.bytes(32))
    eph_pub = eph.public_key().public_bytes_raw()
    shared = eph.exchange(x25519.X25519PublicKey.from_public_bytes(recipient_public))
    env = Envelope(key_id(recipient_public), eph_pub, rng.bytes(12), b"")
    key = _wrap_key(shared, eph_pub, recipient_public)
    ct = AESGCM(key).encrypt(env.nonce, plaintext, env.header())
    return env.header() + ct


def open_envelope(box, sealed: bytes) -> bytes:
    """Open with a ``BoxKey``; wrong key or any tampering raises OpenFailure."""
    env = Envelope.from_bytes(sealed)
    if env.recipient != key_id(box.public):
        raise OpenFailure("envelope is addressed to a different key")
    try:
        shared = box.private.exchange(x25519.X25519PublicKey.from_public_bytes(env.ephemeral))
        key = _wrap_key(shared, env.ephemeral, box.public)
        return AESGCM(key).decrypt(env.nonce, env.ciphertext, env.header())
    except (InvalidTag, ValueError) as exc:
        raise OpenFailure("envelope authentication failed") from exc


# ---------------------------------------------------------------------------
# nonces


class NonceRegistry:
    """Live and spent nonces with expiry.

    Every issue/use is reported to ``journal`` (anything with ``append``)
    so the registry can be rebuilt after a restart with ``apply``.
    """

    def __init__(self, ttl: float = 120.0, journal=None):
        self.ttl = ttl
        self.journal = journal
        self.live: dict[bytes, float] = {}
        self.spent: dict[bytes, float] = {}
        self._lock = threading.Lock()

    def fresh(self, rng, now: float) -> bytes:
        rng = as_entropy(rng)
        with self._lock:
            while True:
                n = rng.bytes(NONCE_LEN)
                if len(n) != NONCE_LEN:
                    raise RuntimeError("entropy source failure")
                if n not in self.live and n not in self.spent:
                    break
            exp = now + self.ttl
            self.live[n] = exp
            self._log({"op": "nonce_issue", "nonce": n.hex(), "exp": exp})
            return n

    def consume(self, nonce: bytes, now: float) -> str:
        """Spend a nonce: ``ok``, ``replay`` (already spent), ``expired`` or ``unknown``."""
        with self._lock:
            if nonce in self.spent:
                return "replay"
            exp = self.live.pop(nonce, None)
            if exp is None:
                return "unknown"
            self.spent[nonce] = exp
            self._log({"op": "nonce_use", "nonce": nonce.hex(), "exp": exp})
            return "ok" if now <= exp else "expired"

    def is_live(self, nonce: bytes, now: float) -> bool:
        exp = self.live.get(nonce)
        return exp is not None and now <= exp

    def purge(self, now: float):
        # spent nonces are kept past expiry for one extra ttl so late replays still hit
        with self._lock:
            for d, slack in ((self.live, 0.0), (self.spent, self.ttl)):
                for n in [n for n, exp in d.items() if exp + slack < now]:
                    del d[n]

    def apply(self, event: dict):
        n = bytes.fromhex(event["nonce"])
        if event["op"] == "nonce_issue":
            self.live[n] = event["exp"]
        elif event["op"] == "nonce_use":
            self.live.pop(n, None)
            self.spent[n] = event["exp"]

    def snapshot(self) -> list[dict]:
        events = [{"op": "nonce_issue", "nonce": n.hex(), "exp": e} for n, e in self.live.items()]
        events += [{"op": "nonce_use", "nonce": n.hex(), "exp": e} for n, e in self.spent.items()]
        return events

    def _log(self, event):
        if self.journal is not None:
            self.journal.append(event)


# ---------------------------------------------------------------------------
# backends


class LoopbackTransport:
    """In-process device-TCM channel.

    Frames travel through bounded queues exactly as they would over a
    socket; ``handler`` is the CAVE's message dispatcher.
    """

    def __init__(self, handler, maxsize: int = 16, tap=None):
        self.handler = handler
        self.tap = tap
        self._up = queue.Queue(maxsize)
        self._down = queue.Queue(maxsize)
        self._reader = FrameReader()

    def request(self, message: Message) -> Message:
        data = frame(message)
        if self.tap:
            self.tap(">", data)
        self._up.put_nowait(data)
        for msg in self._reader.feed(self._up.get_nowait()):
            self._down.put_nowait(frame(self.handler(msg)))
        reply = self._down.get_nowait()
        if self.tap:
            self.tap("<", reply)
        return deframe(reply)

    def send_raw(self, data: bytes) -> Message:
        """Push already-framed bytes (used to replay captured traffic)."""
        if self.tap:
            self.tap(">", data)
        replies = [frame(self.handler(m)) for m in FrameReader().feed(data)]
        if not replies:
            raise NeedMoreData("no complete frame to deliver")
        if self.tap:
            self.tap("<", replies[-1])
        return deframe(replies[-1])

    def close(self):
        pass


class SocketTransport:
    """Device-server client: one TCP connection, one session."""

    def __init__(self, host: str, port: int, timeout: float = 30.0, tap=None):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.tap = tap
        self._reader = FrameReader()

    def _recv(self) -> Message:
        while True:
            try:
                return self._reader.next_message()
            except NeedMoreData:
                chunk = self.sock.recv(65536)
                if not chunk:
                    raise
                self._reader.extend(chunk)

    def send_raw(self, data: bytes) -> Message:
        if self.tap:
            self.tap(">", data)
        self.sock.sendall(data)
        reply = self._recv()
        if self.tap:
            self.tap("<", frame(reply))
        return reply

    def request(self, message: Message) -> Message:
        return self.send_raw(frame(message))

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self):
        reader = FrameReader()
        while True:
            try:
                chunk = self.request.recv(65536)
            except OSError:
                return
            if not chunk:
                return
            try:
                msgs = reader.feed(chunk)
            except ProtocolError as exc:
                err = Message(MsgType.ERROR, f"ProtocolError:{exc}".encode())
                self.request.sendall(frame(err))
                return
            for msg in msgs:
                self.request.sendall(frame(self.server.dispatch(msg)))


class FrameServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, dispatch):
        self.dispatch = dispatch
        super().__init__(address, _FrameHandler)


def serve_socket(dispatch, host: str = "127.0.0.1", port: int = 0) -> FrameServer:
    """Bind a threaded frame server; call ``serve_forever`` (or run it in a thread)."""
    return FrameServer((host, port), dispatch)
