"""The verifier daemon: records, sessions, decoys, policy, rotation and sizing."""

import logging
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from . import keys
from .encoding import DIGEST_LEN, digest
from .entropy import as_entropy
from .errors import EncodingError, OpenFailure, Rejected
from .protocol import (AccessRequest, EnrollReceipt, Reason, Response, Session, Verdict,
                       enroll_cave, error_message, make_challenge, make_decoy_challenge,
                       update_policy, verify_response)
from .store import AUDIT, AuditLog, RecordStore
from .transport import Message, MsgType, NonceRegistry, open_envelope, seal, serve_socket

log = logging.getLogger(__name__)

KEY_FILE = "cave.key"
SESSION_KEY_FILE = "session.key"


class SimClock:
    def __init__(self, start: float = 0.0):
        self.t = float(start)

    def now(self) -> float:
        return self.t

    def advance(self, dt: float):
        self.t += dt

    sleep = advance


class WallClock:
    def now(self) -> float:
        return time.time()

    def sleep(self, dt: float):
        time.sleep(dt)


@dataclass(frozen=True)
class SizingParams:
    N: int = 4
    M: int = 128
    pad_len: int = 2
    index_len: int = 1
    digest_len: int = DIGEST_LEN
    key_len: int = 256
    uid_len: int = DIGEST_LEN
    budget: int = 131072

    def __post_init__(self):
        if self.N < 1 or self.M < 1 or self.budget < 0:
            raise ValueError("N and M must be positive, budget non-negative")
        if min(self.pad_len, self.index_len, self.digest_len, self.key_len, self.uid_len) < 0:
            raise ValueError("lengths must be non-negative")


def sizing_report(p: SizingParams) -> dict:
    row = p.N * (p.pad_len + p.index_len + p.digest_len)
    key = p.key_len + p.uid_len + p.M * row
    return {"row_bytes": row, "key_bytes": key, "keys_in_budget": p.budget // key if key else 0}


def record_bytes(record) -> int:
    """TCM footprint of one record under the sizing arithmetic."""
    p = SizingParams(record.N, record.M, record.fragment_len, 1, DIGEST_LEN,
                     keys.modulus_len(record.k_pu), len(record.uid_digest), 0)
    return sizing_report(p)["key_bytes"]


class TcmBudget:
    def __init__(self, budget: int, usage: int = 0):
        if usage > budget:
            raise ValueError("usage already exceeds budget")
        self.budget = budget
        self.usage = usage

    def fits(self, nbytes: int) -> bool:
        return self.usage + nbytes <= self.budget

    def charge(self, nbytes: int):
        if not self.fits(nbytes):
            raise Rejected(Reason.BUDGET_EXCEEDED,
                           f"{nbytes} B would exceed {self.budget - self.usage} B remaining")
        self.usage += nbytes


class CaveService:
    """Message dispatcher over a persistent record store.

    ``handle`` takes and returns transport ``Message`` objects, so the same
    instance backs the loopback channel and the socket server.
    """

    def __init__(self, store_dir, rng=None, clock=None, decoy_prob: float = 0.1,
                 tcm_budget: int | None = None, session_ttl: float = 120.0,
                 fsync: bool = False, export_session_keys: bool = False):
        if not 0.0 <= decoy_prob <= 1.0:
            raise ValueError("decoy probability must be in [0, 1]")
        self.dir = Path(store_dir)
        self.rng = as_entropy(rng)
        self.clock = clock or WallClock()
        self.decoy_prob = decoy_prob
        self.session_ttl = session_ttl
        self.export_session_keys = export_session_keys
        self.store = RecordStore(self.dir, fsync=fsync)
        self.audit = AuditLog(self.dir / AUDIT, fsync=fsync)
        self.box = self._load_box()
        self.nonces = NonceRegistry(session_ttl, journal=self.store)
        for ev in self.store.nonce_events:
            self.nonces.apply(ev)
        self.sessions: dict[bytes, Session] = {}
        self.session_keys: dict[bytes, bytes] = {}
        self.budget = None
        if tcm_budget is not None:
            self.budget = TcmBudget(tcm_budget,
                                    sum(record_bytes(r) for r in self.store.live()))
        self._lock = threading.RLock()
        self._challenge_rng = self.rng.spawn("challenge")
        self._decoy_rng = self.rng.spawn("decoy")
        self._seal_rng = self.rng.spawn("seal")

    def _load_box(self) -> keys.BoxKey:
        path = self.dir / KEY_FILE
        if path.exists():
            raw = path.read_bytes()
            if len(raw) != 32:
                raise Rejected(Reason.PROTOCOL_ERROR, "cave.key is damaged")
            return keys.BoxKey.from_private_bytes(raw)
        box = keys.BoxKey.generate(self.rng.spawn("box"))
        path.write_bytes(box.private_bytes())
        path.chmod(0o600)
        return box

    @property
    def public_key(self) -> bytes:
        return self.box.public

    def close(self):
        self.store.close()
        self.audit.close()

    # -- dispatch -----------------------------------------------------------

    def handle(self, msg: Message) -> Message:
        handlers = {MsgType.ENROLL_REQUEST: self._enroll,
                    MsgType.ACCESS_REQUEST: self._access,
                    MsgType.RESPONSE: self._response}
        fn = handlers.get(msg.type)
        if fn is None:
            return error_message(Reason.PROTOCOL_ERROR, f"unexpected {msg.type.name}")
        with self._lock:
            try:
                return fn(msg.payload)
            except Rejected as exc:
                self._log("reject", reason=exc.reason.value, detail=exc.detail)
                return error_message(exc.reason, exc.detail)
            except OpenFailure as exc:
                self._log("reject", reason=Reason.OPEN_FAILURE.value, detail=str(exc))
                return error_message(Reason.OPEN_FAILURE, str(exc))
            except (EncodingError, ValueError) as exc:
                self._log("reject", reason=Reason.PROTOCOL_ERROR.value, detail=str(exc))
                return error_message(Reason.PROTOCOL_ERROR, str(exc))

    def _log(self, event, **fields):
        self.audit.append(event, self.clock.now(), **fields)

    def _reply(self, mtype: MsgType, reply_key: bytes, payload: bytes) -> Message:
        return Message(mtype, seal(reply_key, payload, self._seal_rng))

    def _verdict(self, reply_key, reason: Reason, detail="", record=None) -> Message:
        rows = record.policy.challenge_rows_next if record else 0
        interval = record.policy.interval_next if record else 0.0
        return self._reply(MsgType.VERDICT, reply_key,
                           Verdict(reason, detail, rows, interval).to_bytes())

    # -- enrollment ---------------------------------------------------------

    def _enroll(self, payload: bytes) -> Message:
        got = enroll_cave(payload, self.box, self._seal_rng)
        rec = got.record
        for other in self.store.for_uid(rec.uid_digest):
            if other.k_pu == rec.k_pu:
                raise Rejected(Reason.DUPLICATE, "key already enrolled for this user")
        if self.budget is not None:
            self.budget.charge(record_bytes(rec))
        self.store.add(rec)
        self._log("enroll", record=rec.record_id, uid=rec.uid_digest.hex()[:16],
                  rows=rec.M, choices=rec.N)
        return self._reply(MsgType.ENROLL_RECEIPT, got.reply_key,
                           EnrollReceipt(got.sealed_blob, got.n1).to_bytes())

    # -- access -------------------------------------------------------------

    def _find_record(self, req: AccessRequest):
        records = self.store.for_uid(req.uid_digest)
        if not records:
            raise Rejected(Reason.UNKNOWN_USER, "no enrollment for this user")
        usable = [r for r in records if not r.consumed and not r.revoked]
        if not usable:
            if all(r.revoked for r in records):
                raise Rejected(Reason.REVOKED, "all keys for this user are revoked")
            raise Rejected(Reason.ROTATION_EXHAUSTED, "no unconsumed keys left; re-enroll")
        h = digest(req.sealed_blob)
        match = [r for r in records if r.stored_hash == h]
        if not match:
            raise Rejected(Reason.TAMPER, "sealed server table does not match any stored hash")
        rec = match[0]
        if rec.revoked:
            raise Rejected(Reason.REVOKED, "key revoked")
        if rec.consumed:
            raise Rejected(Reason.KEY_CONSUMED, "key already used; rotate")
        return rec

    def _access(self, payload: bytes) -> Message:
        req = AccessRequest.from_bytes(open_envelope(self.box, payload))
        now = self.clock.now()
        self._expire(now)
        try:
            rec = self._find_record(req)
        except Rejected as exc:
            self._log("reject", reason=exc.reason.value, detail=exc.detail)
            return self._verdict(req.reply_key, exc.reason, exc.detail)
        decoy = self._decoy_rng.random() < self.decoy_prob
        n2 = self.nonces.fresh(self._challenge_rng, now)
        build = make_decoy_challenge if decoy else make_challenge
        try:
            challenge, perm = build(rec, req.sealed_blob, self.box,
                                    rec.policy.challenge_rows_next, self._challenge_rng, n2)
        except Rejected as exc:
            self._log("reject", reason=exc.reason.value, detail=exc.detail, record=rec.record_id)
            return self._verdict(req.reply_key, exc.reason, exc.detail, rec)
        self.sessions[challenge.challenge_id] = Session(
            challenge.challenge_id, rec.uid_digest, rec.record_id, perm, n2, decoy,
            now + self.session_ttl, req.reply_key)
        self._log("challenge", record=rec.record_id, rows=len(perm.shifts), decoy=decoy)
        return self._reply(MsgType.CHALLENGE, req.reply_key, challenge.to_bytes())

    def _expire(self, now):
        for cid in [c for c, s in self.sessions.items() if s.expires < now]:
            del self.sessions[cid]
        self.nonces.purge(now)

    # -- response -----------------------------------------------------------

    def _response(self, payload: bytes) -> Message:
        resp = Response.from_bytes(open_envelope(self.box, payload))
        now = self.clock.now()
        session = self.sessions.pop(resp.challenge_id, None)
        if session is None:
            if resp.n2 in self.nonces.spent:
                raise Rejected(Reason.REPLAY, "nonce already used")
            raise Rejected(Reason.NO_SESSION, "unknown challenge id")
        state = self.nonces.consume(resp.n2, now)
        if state != "ok" or resp.n2 != session.n2:
            self._log("reject", reason=Reason.REPLAY.value, detail=state,
                      record=session.record_id)
            return self._verdict(session.reply_key, Reason.REPLAY, f"nonce {state}")
        rec = self.store.records[session.record_id]
        if rec.consumed:
            return self._verdict(session.reply_key, Reason.KEY_CONSUMED, "", rec)

        out = verify_response(rec, session, resp)
        reason = out.reason
        if session.decoy:
            if reason == Reason.INTRUSION:
                rec.revoked = True
                self.store.update(rec)
                self._log("intrusion", record=rec.record_id)
            else:
                self._log("decoy_healthy", record=rec.record_id, outcome=reason.value)
            # an honest client cannot tell a decoy from a bad round
            shown = Reason.INTRUSION if reason == Reason.INTRUSION else Reason.DECODE_FAILURE
            return self._verdict(session.reply_key, shown, "", rec)

        limits = rec.limits
        policy = update_policy(rec.policy, out.guesses_correct, out.guesses_total, limits)
        if reason == Reason.ACCEPT:
            rec.consumed = True
            rec.policy = policy.__class__(policy.challenge_rows_next, policy.interval_next, 0)
            self.store.update(rec)
            self._log("accept", record=rec.record_id, correct=out.guesses_correct,
                      total=out.guesses_total, rows_next=rec.policy.challenge_rows_next,
                      interval_next=rec.policy.interval_next)
            self._remember_session_key(rec.uid_digest, out.session_key)
            verdict = self._verdict(session.reply_key, reason, "", rec)
            self._rotate_after_accept(rec.uid_digest)
            return verdict
        rec.policy = policy.__class__(policy.challenge_rows_next, policy.interval_next,
                                      rec.policy.failure_streak + 1)
        self.store.update(rec)
        self._log("reject", reason=reason.value, record=rec.record_id,
                  correct=out.guesses_correct, total=out.guesses_total,
                  streak=rec.policy.failure_streak)
        return self._verdict(session.reply_key, reason, "", rec)

    def _remember_session_key(self, uid, key):
        self.session_keys[uid] = key
        if self.export_session_keys:
            (self.dir / SESSION_KEY_FILE).write_text(key.hex() + "\n")

    def _rotate_after_accept(self, uid):
        try:
            self.rotate_key(uid)
        except Rejected:
            pass  # reported when the next access request arrives

    def rotate_key(self, uid_digest: bytes):
        """Archive consumed records and return the next usable one."""
        with self._lock:
            records = self.store.for_uid(uid_digest)
            for r in records:
                if r.consumed and not r.archived:
                    r.archived = True
                    self.store.update(r)
                    if self.budget is not None:
                        self.budget.usage -= record_bytes(r)
                    self._log("archive", record=r.record_id)
            nxt = [r for r in records if not r.consumed and not r.revoked]
            if not nxt:
                self._log("rotation_exhausted", uid=uid_digest.hex()[:16])
                raise Rejected(Reason.ROTATION_EXHAUSTED, "no unconsumed keys left")
            self._log("rotate", record=nxt[0].record_id)
            return nxt[0]

    def compact(self):
        with self._lock:
            self.nonces.purge(self.clock.now())
            self.store.compact(self.nonces.snapshot())


def serve(store_dir, listen=("127.0.0.1", 0), **kwargs):
    """Start a threaded socket server; returns (server, service)."""
    service = CaveService(store_dir, **kwargs)
    server = serve_socket(service.handle, *listen)
    log.info("cave listening on %s:%d", *server.server_address[:2])
    return server, service
