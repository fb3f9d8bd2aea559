"""Enrollment and verification logic for the CAS and the CAVE.

Everything here is transport-agnostic: CAS functions talk through any
object with ``request(Message) -> Message``; CAVE functions are pure steps
that ``caliper.cave.CaveService`` strings together with its store.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from math import ceil

from . import keys
from .blocks import MatcherModel, classify_row
from .ecc import CodecParams, DecodeFailure, FragmentSet, ecc_decode, mask, row_codeword
from .encoding import as_int, digest, pack_fields, u8, u32, unpack_fields
from .entropy import as_entropy
from .errors import EncodingError, ModalityUnavailable, OpenFailure, ProtocolError, Rejected
from .transport import Message, MsgType, open_envelope, seal
from .vault import KeyMaterial, ServerTable, UserContext, build_tables

NO_GUESS = 0xFFFF
STATUS_OK = 0
STATUS_DECODE_FAILURE = 1


class Reason(str, Enum):
    ACCEPT = "Accept"
    DECODE_FAILURE = "DecodeFailure"
    BAD_SIGNATURE = "BadSignature"
    REPLAY = "Replay"
    NO_SESSION = "NoSession"
    INTRUSION = "IntrusionFlag"
    TAMPER = "TamperDetected"
    KEY_CONSUMED = "KeyConsumed"
    ROTATION_EXHAUSTED = "RotationExhausted"
    BUDGET_EXCEEDED = "BudgetExceeded"
    DUPLICATE = "DuplicateEnrollment"
    UNKNOWN_USER = "UnknownUser"
    REVOKED = "Revoked"
    OPEN_FAILURE = "OpenFailure"
    PROTOCOL_ERROR = "ProtocolError"


# ---------------------------------------------------------------------------
# policy


@dataclass(frozen=True)
class PolicyLimits:
    min_rows: int
    max_rows: int
    interval_min: float = 5.0
    interval_max: float = 300.0

    def __post_init__(self):
        if not 1 <= self.min_rows <= self.max_rows:
            raise ValueError("need 1 <= min_rows <= max_rows")
        if not 0 < self.interval_min <= self.interval_max:
            raise ValueError("need 0 < interval_min <= interval_max")


@dataclass(frozen=True)
class PolicyState:
    challenge_rows_next: int
    interval_next: float
    failure_streak: int = 0

    @classmethod
    def initial(cls, limits: PolicyLimits, interval: float = 30.0) -> "PolicyState":
        return _clamp(cls(limits.max_rows, interval), limits)

    def to_dict(self) -> dict:
        return {"rows": self.challenge_rows_next, "interval": self.interval_next,
                "streak": self.failure_streak}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyState":
        return cls(d["rows"], d["interval"], d.get("streak", 0))


def _clamp(state: PolicyState, limits: PolicyLimits) -> PolicyState:
    rows = min(max(state.challenge_rows_next, limits.min_rows), limits.max_rows)
    interval = min(max(state.interval_next, limits.interval_min), limits.interval_max)
    return replace(state, challenge_rows_next=rows, interval_next=interval)


def update_policy(state: PolicyState, guesses_correct: int, guesses_total: int,
                  limits: PolicyLimits) -> PolicyState:
    """Relax after mostly-correct guesses, tighten after mostly-wrong ones.

    ratio >= 0.9 doubles the interval and halves the challenged rows;
    ratio < 0.5 drops to the shortest interval and challenges every row;
    anything in between leaves the state alone.
    """
    if not 0 <= guesses_correct <= guesses_total:
        raise ValueError("guesses_correct must be within [0, guesses_total]")
    ratio = guesses_correct / guesses_total if guesses_total else 0.0
    if ratio >= 0.9:
        state = replace(state, interval_next=state.interval_next * 2,
                        challenge_rows_next=ceil(state.challenge_rows_next / 2))
    elif ratio < 0.5:
        state = replace(state, interval_next=limits.interval_min,
                        challenge_rows_next=limits.max_rows)
    return _clamp(state, limits)


def policy_limits(codec: CodecParams, interval_min=5.0, interval_max=300.0) -> PolicyLimits:
    # never challenge so few rows that the unchallenged ones exceed the erasure budget
    min_rows = max(1, codec.rows - codec.max_erased_rows())
    return PolicyLimits(min_rows, codec.rows, interval_min, interval_max)


# ---------------------------------------------------------------------------
# wire payloads


def _opt_u16s(values) -> bytes:
    return b"" if values is None else b"".join(v.to_bytes(2, "big") for v in values)


def _parse_u16s(data: bytes):
    if len(data) % 2:
        raise EncodingError("odd-length shift vector")
    return tuple(int.from_bytes(data[i:i + 2], "big") for i in range(0, len(data), 2))


@dataclass(frozen=True)
class PermKey:
    """Per-row circular shifts, in challenge order."""

    shifts: tuple

    def to_bytes(self) -> bytes:
        return u32(len(self.shifts)) + _opt_u16s(self.shifts)


def response_digest(perm: PermKey, n2: bytes) -> bytes:
    return digest(b"caliper-h3" + perm.to_bytes() + n2)


def session_key(perm: PermKey, n2: bytes) -> bytes:
    """Secret shared by both sides after a successful round (used by ASLP)."""
    return digest(b"caliper-session" + perm.to_bytes() + n2)


@dataclass(frozen=True)
class EnrollPayload:
    server_table: bytes
    k_pu: bytes
    uid_digest: bytes
    n1: bytes
    reply_key: bytes
    codec: bytes

    def to_bytes(self) -> bytes:
        return pack_fields(self.server_table, self.k_pu, self.uid_digest, self.n1,
                           self.reply_key, self.codec)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EnrollPayload":
        return cls(*unpack_fields(data, 6))


@dataclass(frozen=True)
class EnrollReceipt:
    sealed_blob: bytes
    n1: bytes

    def to_bytes(self) -> bytes:
        return pack_fields(self.sealed_blob, self.n1)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EnrollReceipt":
        return cls(*unpack_fields(data, 2))


@dataclass(frozen=True)
class AccessRequest:
    uid_digest: bytes
    sealed_blob: bytes
    reply_key: bytes

    def to_bytes(self) -> bytes:
        return pack_fields(self.uid_digest, self.sealed_blob, self.reply_key)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AccessRequest":
        return cls(*unpack_fields(data, 3))


@dataclass(frozen=True)
class Challenge:
    challenge_id: bytes
    n2: bytes
    rows: tuple  # rows of (h2, pad_fragment) pairs, already rotated
    decoy: bool = field(default=False, compare=False)  # CAVE-side only

    def __post_init__(self):
        if not self.rows:
            raise ValueError("challenge has no rows")
        n = len(self.rows[0])
        if any(len(r) != n for r in self.rows):
            raise ValueError("every challenged row must have N entries")

    @property
    def N(self) -> int:
        return len(self.rows[0])

    def to_bytes(self) -> bytes:
        entries = [pack_fields(h2, pad) for row in self.rows for h2, pad in row]
        return pack_fields(self.challenge_id, self.n2, u32(len(self.rows)), u32(self.N), *entries)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Challenge":
        cid, n2, count, n, *entries = unpack_fields(data)
        count, n = as_int(count), as_int(n)
        if count * n != len(entries) or count == 0:
            raise EncodingError("challenge shape mismatch")
        pairs = [tuple(unpack_fields(e, 2)) for e in entries]
        return cls(cid, n2, tuple(tuple(pairs[r * n:(r + 1) * n]) for r in range(count)))


@dataclass(frozen=True)
class Response:
    challenge_id: bytes
    n2: bytes
    status: int
    signature: bytes = b""
    guess_vector: tuple | None = None

    @property
    def ok(self) -> bool:
        return self.status == STATUS_OK

    def to_bytes(self) -> bytes:
        return pack_fields(self.challenge_id, self.n2, u8(self.status), self.signature,
                           _opt_u16s(self.guess_vector))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Response":
        cid, n2, status, sig, guesses = unpack_fields(data, 5)
        return cls(cid, n2, as_int(status), sig, _parse_u16s(guesses) if guesses else None)


@dataclass(frozen=True)
class Verdict:
    reason: Reason
    detail: str = ""
    rows_next: int = 0
    interval_next: float = 0.0

    @property
    def accepted(self) -> bool:
        return self.reason == Reason.ACCEPT

    def to_bytes(self) -> bytes:
        return pack_fields(self.reason.value.encode(), self.detail.encode(),
                           u32(self.rows_next), u32(round(self.interval_next * 1000)))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Verdict":
        reason, detail, rows, interval = unpack_fields(data, 4)
        return cls(Reason(reason.decode()), detail.decode(), as_int(rows), as_int(interval) / 1000)


def error_message(reason: Reason, detail: str = "") -> Message:
    return Message(MsgType.ERROR, pack_fields(reason.value.encode(), detail.encode()))


def parse_error(msg: Message) -> Rejected:
    try:
        reason, detail = unpack_fields(msg.payload, 2)
    except EncodingError:
        # the framing layer answers with a bare "Reason:detail" string
        reason, _, detail = msg.payload.partition(b":")
    try:
        return Rejected(Reason(reason.decode()), detail.decode(errors="replace"))
    except (UnicodeDecodeError, ValueError):
        return Rejected(Reason.PROTOCOL_ERROR, "unparseable error message")


# ---------------------------------------------------------------------------
# CAVE-side records


@dataclass
class EnrollmentRecord:
    uid_digest: bytes
    k_pu: bytes
    stored_hash: bytes
    codec: CodecParams
    N: int
    policy: PolicyState
    record_id: int = -1
    consumed: bool = False
    archived: bool = False
    revoked: bool = False

    @property
    def M(self) -> int:
        return self.codec.rows

    @property
    def fragment_len(self) -> int:
        return self.codec.fragment_len

    @property
    def limits(self) -> PolicyLimits:
        return policy_limits(self.codec)

    def to_dict(self) -> dict:
        return {"id": self.record_id, "uid": self.uid_digest.hex(), "k_pu": self.k_pu.hex(),
                "H": self.stored_hash.hex(), "codec": self.codec.to_bytes().hex(), "N": self.N,
                "policy": self.policy.to_dict(), "consumed": self.consumed,
                "archived": self.archived, "revoked": self.revoked}

    @classmethod
    def from_dict(cls, d: dict) -> "EnrollmentRecord":
        return cls(bytes.fromhex(d["uid"]), bytes.fromhex(d["k_pu"]), bytes.fromhex(d["H"]),
                   CodecParams.from_bytes(bytes.fromhex(d["codec"])), d["N"],
                   PolicyState.from_dict(d["policy"]), d["id"], d["consumed"], d["archived"],
                   d["revoked"])


@dataclass
class Session:
    challenge_id: bytes
    uid_digest: bytes
    record_id: int
    perm: PermKey
    n2: bytes
    decoy: bool
    expires: float
    reply_key: bytes


@dataclass(frozen=True)
class CaveEnrollment:
    record: EnrollmentRecord
    sealed_blob: bytes
    n1: bytes
    reply_key: bytes


def enroll_cave(sealed_request: bytes, cave_box, rng, interval: float = 30.0) -> CaveEnrollment:
    """Open an enrollment request, re-seal the server table to ourselves, keep only its hash."""
    rng = as_entropy(rng)
    try:
        payload = EnrollPayload.from_bytes(open_envelope(cave_box, sealed_request))
        table = ServerTable.from_bytes(payload.server_table)
        codec = CodecParams.from_bytes(payload.codec)
        keys.load_public(payload.k_pu)
    except OpenFailure as exc:
        raise Rejected(Reason.OPEN_FAILURE, str(exc)) from exc
    except ValueError as exc:
        raise Rejected(Reason.PROTOCOL_ERROR, str(exc)) from exc
    if codec.rows != table.M or codec.fragment_len != table.fragment_len:
        raise Rejected(Reason.PROTOCOL_ERROR, "codec params do not match the server table")
    sealed_blob = seal(cave_box.public, pack_fields(payload.server_table, payload.n1), rng)
    record = EnrollmentRecord(payload.uid_digest, payload.k_pu, digest(sealed_blob), codec,
                              table.N, PolicyState.initial(policy_limits(codec), interval))
    out = CaveEnrollment(record, sealed_blob, payload.n1, payload.reply_key)
    del table, payload
    return out


def open_server_table(record: EnrollmentRecord, sealed_blob: bytes, cave_box) -> ServerTable:
    """Hash check first; the blob is only decrypted if it is the one we stored."""
    if digest(sealed_blob) != record.stored_hash:
        raise Rejected(Reason.TAMPER, "sealed server table does not match stored hash")
    table_bytes, _n1 = unpack_fields(open_envelope(cave_box, sealed_blob), 2)
    return ServerTable.from_bytes(table_bytes)


def rotate_row(row, shift: int):
    """Rotate right: the entry at column p moves to column (p + shift) mod N."""
    n = len(row)
    return [row[(c - shift) % n] for c in range(n)]


def _build_challenge(table: ServerTable, rows: int, rng, n2: bytes, decoy: bool):
    k = min(max(rows, 1), table.M)
    order = rng.sample(table.M, k)
    shifts = []
    out = []
    for m in order:
        s = rng.randbelow(table.N)
        shifts.append(s)
        rotated = rotate_row(table.rows[m], s)
        if decoy:
            out.append(tuple((e.h2, rng.bytes(len(e.pad_fragment))) for e in rotated))
        else:
            out.append(tuple((e.h2, e.pad_fragment) for e in rotated))
    return Challenge(rng.bytes(16), n2, tuple(out), decoy), PermKey(tuple(shifts))


def make_challenge(record: EnrollmentRecord, sealed_blob: bytes, cave_box, rows: int, rng,
                   n2: bytes):
    if record.consumed:
        raise Rejected(Reason.KEY_CONSUMED, "key already used; rotate")
    table = open_server_table(record, sealed_blob, cave_box)
    return _build_challenge(table, rows, as_entropy(rng), n2, decoy=False)


def make_decoy_challenge(record: EnrollmentRecord, sealed_blob: bytes, cave_box, rows: int, rng,
                         n2: bytes):
    """Same shape as a real challenge, but every pad is fresh noise.

    No key can be recovered from it, so any validly signed answer means the
    responder already held the private key.
    """
    if record.consumed:
        raise Rejected(Reason.KEY_CONSUMED, "key already used; rotate")
    table = open_server_table(record, sealed_blob, cave_box)
    return _build_challenge(table, rows, as_entropy(rng), n2, decoy=True)


@dataclass(frozen=True)
class VerifyOutcome:
    reason: Reason
    guesses_correct: int = 0
    guesses_total: int = 0
    session_key: bytes | None = None


def verify_response(record: EnrollmentRecord, session: Session, response: Response) -> VerifyOutcome:
    """Check a response against the retained permutation key.

    Replay and session bookkeeping happen in the service before this is
    called; this function only judges the content.
    """
    if response.n2 != session.n2 or response.challenge_id != session.challenge_id:
        return VerifyOutcome(Reason.REPLAY)
    perm = session.perm
    total = len(perm.shifts)
    correct = 0
    if response.guess_vector is not None:
        if len(response.guess_vector) != total:
            return VerifyOutcome(Reason.PROTOCOL_ERROR)
        correct = sum(g == s for g, s in zip(response.guess_vector, perm.shifts))
    if not response.ok:
        return VerifyOutcome(Reason.DECODE_FAILURE, correct, total)
    valid = keys.verify(record.k_pu, response.signature, response_digest(perm, session.n2))
    if session.decoy:
        if not valid and response.guess_vector is not None:
            claimed = PermKey(tuple(response.guess_vector))
            valid = keys.verify(record.k_pu, response.signature,
                                response_digest(claimed, session.n2))
        return VerifyOutcome(Reason.INTRUSION if valid else Reason.BAD_SIGNATURE, correct, total)
    if not valid:
        return VerifyOutcome(Reason.BAD_SIGNATURE, correct, total)
    if response.guess_vector is None:
        correct = total
    return VerifyOutcome(Reason.ACCEPT, correct, total, session_key(perm, session.n2))


# ---------------------------------------------------------------------------
# CAS side


@dataclass
class CasKey:
    """Everything the CAS keeps for one enrolled key pair."""

    model_table: object
    client_table: object
    sealed_blob: bytes
    k_pu: bytes
    codec: CodecParams
    _models: dict = field(default_factory=dict, repr=False, compare=False)

    def model(self, h1: bytes) -> MatcherModel:
        m = self._models.get(h1)
        if m is None:
            if h1 not in self.model_table:
                raise ProtocolError("client row points at a missing model")
            m = self._models[h1] = MatcherModel.from_bytes(self.model_table.blob(h1))
        return m


@dataclass(frozen=True)
class EnrollmentSecrets:
    """Snapshot taken before wiping; only produced for insecure test hooks."""

    k_pr: bytes
    codeword: bytes
    pad: bytes
    masked: bytes
    ground_truth: tuple


def enroll_cas(user: UserContext, ensemble, codec: CodecParams, cave_public: bytes, channel,
               box, rng, key_bits: int = 2048, include_mid: bool = False,
               insecure_test_hook=None) -> CasKey:
    rng = as_entropy(rng)
    if codec.data_len != key_bits // 8 or codec.rows != len(ensemble):
        raise ValueError("codec params do not match key size and ensemble rows")
    signer = keys.generate_signing_key(rng, key_bits)
    k_pu = keys.public_bytes(signer)
    d = keys.private_exponent_bytes(signer)
    del signer
    km = KeyMaterial.create(k_pu, bytes(d), codec, rng)
    d[:] = bytes(len(d))
    tables = build_tables(ensemble, km, rng, include_mid=include_mid,
                          insecure_test=insecure_test_hook is not None)
    if insecure_test_hook is not None:
        insecure_test_hook(EnrollmentSecrets(bytes(km.k_pr), bytes(km.codeword), bytes(km.pad),
                                             bytes(km.masked), tables.ground_truth))
    km.wipe()

    n1 = rng.bytes(16)
    payload = EnrollPayload(tables.server_table.to_bytes(), k_pu, user.uid_digest, n1,
                            box.public, codec.to_bytes())
    reply = channel.request(Message(MsgType.ENROLL_REQUEST,
                                    seal(cave_public, payload.to_bytes(), rng)))
    del payload
    if reply.type == MsgType.ERROR:
        raise parse_error(reply)
    if reply.type != MsgType.ENROLL_RECEIPT:
        raise ProtocolError(f"expected an enroll receipt, got {reply.type.name}")
    receipt = EnrollReceipt.from_bytes(open_envelope(box, reply.payload))
    if receipt.n1 != n1:
        raise ProtocolError("n1 echo mismatch; enrollment aborted")
    return CasKey(tables.model_table, tables.client_table, receipt.sealed_blob, k_pu, codec)


@dataclass(frozen=True)
class Answer:
    response: Response
    guesses: tuple
    recovered: bool
    session_key: bytes | None = None


def _row_lookup(key: CasKey, row):
    try:
        crows = [key.client_table[h2] for h2, _ in row]
    except KeyError:
        raise ProtocolError("challenge references an unknown h2") from None
    if len({c.slot for c in crows}) != 1:
        raise ProtocolError("challenge row mixes fragment slots")
    return crows


def _unmasked(crow, pad):
    return mask(crow.khat_fragment, pad)


def _shift_from_codeword(crows, row, codeword_frag: bytes, preferred: int):
    """Column whose unmasked fragment agrees with the decoded codeword."""
    n = len(codeword_frag)
    hits = [c for c, (cr, (_, pad)) in enumerate(zip(crows, row))
            if _unmasked(cr, pad)[:n] == codeword_frag]
    if not hits:
        return None
    col = preferred if preferred in hits else hits[0]
    return (col - crows[col].choice_index) % len(row)


def answer_challenge(challenge: Challenge, key: CasKey, live, include_guesses: bool = True,
                     override=None) -> Answer:
    """Classify every challenged row with live samples and try to recover the key.

    ``live`` maps modality id to a list of samples.  Rows whose modality
    has no samples become erasures.  ``override`` (position -> column) forces
    a classification and exists for error-correction sweeps.
    """
    codec = key.codec
    L = codec.fragment_len
    fragments = [None] * codec.rows
    guesses, columns, rows_meta = [], [], []
    for pos, row in enumerate(challenge.rows):
        crows = _row_lookup(key, row)
        rows_meta.append(crows)
        try:
            col, _ = classify_row([key.model(c.h1) for c in crows], live.get(crows[0].mid))
        except ModalityUnavailable:
            guesses.append(NO_GUESS)
            columns.append(None)
            continue
        if override and pos in override:
            col = override[pos]
        columns.append(col)
        guesses.append((col - crows[col].choice_index) % len(row))
        slot = crows[0].slot
        if slot >= codec.rows:
            raise ProtocolError("fragment slot out of range")
        fragments[slot] = _unmasked(crows[col], row[col][1])

    try:
        k_pr = bytearray(ecc_decode(FragmentSet(fragments, L), codec))
    except DecodeFailure:
        resp = Response(challenge.challenge_id, challenge.n2, STATUS_DECODE_FAILURE,
                        guess_vector=tuple(guesses) if include_guesses else None)
        return Answer(resp, tuple(guesses), False)

    codeword = row_codeword(bytes(k_pr), codec)
    shifts = []
    for pos, row in enumerate(challenge.rows):
        crows = rows_meta[pos]
        slot = crows[0].slot
        frag = codeword[slot * L:(slot + 1) * L]
        s = _shift_from_codeword(crows, row, frag, columns[pos])
        if s is None:
            s = guesses[pos] if guesses[pos] != NO_GUESS else 0
        shifts.append(s)
    perm = PermKey(tuple(shifts))
    signer = keys.signer_from_exponent(key.k_pu, bytes(k_pr))
    signature = keys.sign(signer, response_digest(perm, challenge.n2))
    k_pr[:] = bytes(len(k_pr))
    del signer, codeword
    resp = Response(challenge.challenge_id, challenge.n2, STATUS_OK, signature,
                    tuple(guesses) if include_guesses else None)
    return Answer(resp, tuple(guesses), True, session_key(perm, challenge.n2))


def answer_with_cached_key(challenge: Challenge, key: CasKey, k_pr: bytes) -> Answer:
    """Adversary path: sign with a stolen private key, no classification at all."""
    codec = key.codec
    L = codec.fragment_len
    codeword = row_codeword(bytes(k_pr), codec)
    shifts = []
    for row in challenge.rows:
        crows = _row_lookup(key, row)
        slot = crows[0].slot
        s = _shift_from_codeword(crows, row, codeword[slot * L:(slot + 1) * L], 0)
        shifts.append(0 if s is None else s)
    perm = PermKey(tuple(shifts))
    signer = keys.signer_from_exponent(key.k_pu, bytes(k_pr))
    sig = keys.sign(signer, response_digest(perm, challenge.n2))
    resp = Response(challenge.challenge_id, challenge.n2, STATUS_OK, sig, tuple(shifts))
    return Answer(resp, tuple(shifts), True, session_key(perm, challenge.n2))
