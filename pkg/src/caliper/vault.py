"""Index tables binding classifiers to masked key fragments.

Three tables are linked only by content hashes:

* the model table maps ``h1 = digest(model_blob)`` to the serialized model;
* the client table maps ``h2 = digest(row)`` to ``(h1, i, khat_fragment, mid, slot)``;
* the server table holds M rows of N ``(h2, i, pad_fragment)`` entries.

Nothing in any table records which column of a row is the real one.
"""

from dataclasses import dataclass, field
from types import MappingProxyType

from . import ecc
from .encoding import (DIGEST_LEN, as_int, digest, pack_fields, strip_version, u8, u32,
                       unpack_fields, versioned)
from .entropy import as_entropy
from .errors import EncodingError

MAX_CHOICES = 256


def hash_model(model_blob: bytes) -> bytes:
    if not model_blob:
        raise ValueError("empty model blob")
    return digest(model_blob)


@dataclass(frozen=True)
class ModelEntry:
    h1: bytes
    model_blob: bytes

    def __post_init__(self):
        if self.h1 != hash_model(self.model_blob):
            raise ValueError("h1 does not match the model blob")

    @classmethod
    def of(cls, model_blob: bytes) -> "ModelEntry":
        return cls(hash_model(model_blob), model_blob)

    def to_bytes(self) -> bytes:
        return versioned(pack_fields(self.h1, self.model_blob))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelEntry":
        h1, blob = unpack_fields(strip_version(data), 2)
        return cls(h1, blob)


@dataclass(frozen=True)
class ModelTable:
    entries: MappingProxyType

    def __init__(self, entries):
        entries = dict(entries)
        for key, entry in entries.items():
            if key != entry.h1:
                raise ValueError("model table key differs from stored h1")
        object.__setattr__(self, "entries", MappingProxyType(entries))

    def __len__(self):
        return len(self.entries)

    def __contains__(self, h1):
        return h1 in self.entries

    def blob(self, h1: bytes) -> bytes:
        return self.entries[h1].model_blob

    def to_bytes(self) -> bytes:
        body = [self.entries[k].to_bytes() for k in sorted(self.entries)]
        return versioned(b"M" + pack_fields(u32(len(body)), *body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelTable":
        body = _table_body(data, b"M")
        count, *rows = unpack_fields(body)
        if as_int(count) != len(rows):
            raise EncodingError("model table count mismatch")
        entries = [ModelEntry.from_bytes(r) for r in rows]
        return cls({e.h1: e for e in entries})


@dataclass(frozen=True)
class ClientRow:
    h1: bytes
    choice_index: int
    khat_fragment: bytes
    mid: int
    # fragment position in the codeword; shared by every column of a row
    slot: int = 0

    def __post_init__(self):
        if len(self.h1) != DIGEST_LEN:
            raise ValueError("h1 must be a 32-byte digest")
        if not 0 <= self.choice_index < MAX_CHOICES:
            raise ValueError("choice index out of range")

    @property
    def h2(self) -> bytes:
        return hash_client_row(self)

    def to_bytes(self) -> bytes:
        return versioned(pack_fields(self.h1, u8(self.choice_index), self.khat_fragment,
                                     u8(self.mid), u32(self.slot)))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClientRow":
        h1, i, khat, mid, slot = unpack_fields(strip_version(data), 5)
        return cls(h1, as_int(i), khat, as_int(mid), as_int(slot))


def hash_client_row(row: ClientRow) -> bytes:
    return digest(row.to_bytes())


@dataclass(frozen=True)
class ClientTable:
    rows: MappingProxyType

    def __init__(self, rows):
        rows = dict(rows)
        for key, row in rows.items():
            if key != hash_client_row(row):
                raise ValueError("client table key differs from recomputed h2")
        object.__setattr__(self, "rows", MappingProxyType(rows))

    def __len__(self):
        return len(self.rows)

    def __contains__(self, h2):
        return h2 in self.rows

    def __getitem__(self, h2) -> ClientRow:
        return self.rows[h2]

    def to_bytes(self) -> bytes:
        body = [self.rows[k].to_bytes() for k in sorted(self.rows)]
        return versioned(b"C" + pack_fields(u32(len(body)), *body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ClientTable":
        body = _table_body(data, b"C")
        count, *rows = unpack_fields(body)
        if as_int(count) != len(rows):
            raise EncodingError("client table count mismatch")
        parsed = [ClientRow.from_bytes(r) for r in rows]
        return cls({r.h2: r for r in parsed})


@dataclass(frozen=True)
class ServerEntry:
    h2: bytes
    choice_index: int
    pad_fragment: bytes
    mid: int | None = None

    def to_bytes(self) -> bytes:
        fields = [self.h2, u8(self.choice_index), self.pad_fragment]
        if self.mid is not None:
            fields.append(u8(self.mid))
        return versioned(pack_fields(*fields))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ServerEntry":
        fields = unpack_fields(strip_version(data))
        if len(fields) not in (3, 4):
            raise EncodingError("server entry must have 3 or 4 fields")
        mid = as_int(fields[3]) if len(fields) == 4 else None
        return cls(fields[0], as_int(fields[1]), fields[2], mid)


@dataclass(frozen=True)
class ServerTable:
    rows: tuple

    def __init__(self, rows):
        rows = tuple(tuple(r) for r in rows)
        if not rows:
            raise ValueError("server table needs at least one row")
        n = len(rows[0])
        if n < 2 or n > MAX_CHOICES:
            raise ValueError(f"rows need between 2 and {MAX_CHOICES} choices")
        frag = len(rows[0][0].pad_fragment)
        for r in rows:
            if len(r) != n:
                raise ValueError("variable-length rows are not supported")
            for e in r:
                if len(e.pad_fragment) != frag or not 0 <= e.choice_index < n:
                    raise ValueError("inconsistent server entry")
        object.__setattr__(self, "rows", rows)

    @property
    def M(self) -> int:
        return len(self.rows)

    @property
    def N(self) -> int:
        return len(self.rows[0])

    @property
    def fragment_len(self) -> int:
        return len(self.rows[0][0].pad_fragment)

    def to_bytes(self) -> bytes:
        body = [e.to_bytes() for row in self.rows for e in row]
        return versioned(b"S" + pack_fields(u32(self.M), u32(self.N), *body))

    @classmethod
    def from_bytes(cls, data: bytes) -> "ServerTable":
        body = _table_body(data, b"S")
        m, n, *entries = unpack_fields(body)
        m, n = as_int(m), as_int(n)
        if m * n != len(entries):
            raise EncodingError("server table shape mismatch")
        parsed = [ServerEntry.from_bytes(e) for e in entries]
        return cls([parsed[r * n:(r + 1) * n] for r in range(m)])


def _table_body(data: bytes, kind: bytes) -> bytes:
    body = strip_version(data)
    if body[:1] != kind:
        raise EncodingError(f"expected table kind {kind!r}, found {body[:1]!r}")
    return body[1:]


def canonical_encode(obj) -> bytes:
    """Versioned, length-prefixed byte encoding of any table or row type."""
    return obj.to_bytes()


@dataclass
class KeyMaterial:
    """A key pair, its codeword, the pad, and the masked codeword.

    ``codeword`` is the row-aligned form (see ``ecc.row_codeword``), so it
    splits into exactly one fragment per row.

    Secret buffers are bytearrays so ``wipe`` can overwrite them in place.
    """

    k_pu: bytes
    k_pr: bytearray
    codeword: bytearray
    pad: bytearray
    masked: bytearray

    def __post_init__(self):
        if not len(self.pad) == len(self.codeword) == len(self.masked):
            raise ValueError("pad, codeword and masked key lengths differ")

    @classmethod
    def create(cls, k_pu: bytes, k_pr: bytes, params: ecc.CodecParams, rng) -> "KeyMaterial":
        rng = as_entropy(rng)
        codeword = ecc.row_codeword(bytes(k_pr), params)
        pad = rng.bytes(len(codeword))
        return cls(k_pu, bytearray(k_pr), bytearray(codeword), bytearray(pad),
                   bytearray(ecc.mask(codeword, pad)))

    def wipe(self):
        for buf in (self.k_pr, self.codeword, self.pad, self.masked):
            buf[:] = bytes(len(buf))


@dataclass(frozen=True)
class UserContext:
    uid: str
    uid_digest: bytes = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "uid_digest", digest(self.uid.encode()))


@dataclass(frozen=True)
class RowSpec:
    """One server-table row: a real model, its chaff, and the modality id.

    Models are anything with ``to_bytes()``.
    """

    real: object
    chaff: tuple
    mid: int


@dataclass(frozen=True)
class VaultTables:
    model_table: ModelTable
    client_table: ClientTable
    server_table: ServerTable
    # only populated under insecure_test=True
    ground_truth: tuple | None = None


def build_tables(ensemble, key_material: KeyMaterial, rng, include_mid=False,
                 insecure_test=False) -> VaultTables:
    """Bind an ensemble of real/chaff models to the masked key and its pad.

    Row ``m`` carries fragment ``m`` of the masked key in the client row of
    its real model and fragment ``m`` of the pad in the matching server
    entry; every other column gets random bytes of the same length.  The
    real column position is drawn from ``rng``.
    """
    rng = as_entropy(rng)
    ensemble = list(ensemble)
    M = len(ensemble)
    if M < 1:
        raise ValueError("ensemble is empty")
    N = len(ensemble[0].chaff) + 1
    if N < 2:
        raise ValueError("each row needs at least one chaff model")
    if N > MAX_CHOICES:
        raise ValueError(f"at most {MAX_CHOICES} choices per row")
    if any(len(spec.chaff) + 1 != N for spec in ensemble):
        raise ValueError("every row must have the same number of choices")
    length = len(key_material.masked)
    L = -(-length // M)
    if L == 0:
        raise ValueError("empty key material")

    models = {}
    client_rows = {}
    server_rows = []
    truth = []
    for m, spec in enumerate(ensemble):
        real_col = rng.randbelow(N)
        truth.append(real_col)
        khat_frag = _fragment(key_material.masked, m, L, rng)
        pad_frag = _fragment(key_material.pad, m, L, rng)
        chaff = iter(spec.chaff)
        row = []
        for col in range(N):
            real = col == real_col
            model = spec.real if real else next(chaff)
            entry = ModelEntry.of(model.to_bytes())
            models[entry.h1] = entry
            crow = ClientRow(entry.h1, col, khat_frag if real else rng.bytes(L), spec.mid, m)
            h2 = crow.h2
            client_rows[h2] = crow
            row.append(ServerEntry(h2, col, pad_frag if real else rng.bytes(L),
                                   spec.mid if include_mid else None))
        server_rows.append(row)
    tables = VaultTables(ModelTable(models), ClientTable(client_rows), ServerTable(server_rows),
                         tuple(truth) if insecure_test else None)
    truth.clear()
    return tables


def _fragment(buf, m, L, rng) -> bytes:
    # only reached when the caller's buffer is shorter than M * L
    chunk = bytes(buf[m * L:(m + 1) * L])
    if len(chunk) < L:
        chunk += rng.bytes(L - len(chunk))
    return chunk
