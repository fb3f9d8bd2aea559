"""Client side: synthetic sensors, on-disk key store, and the verification loop."""

import json
import logging
import math
import shutil
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import keys
from .blocks import (MODALITIES, BlockHashModel, PopulationParams, UserProfile, generate_chaff,
                     read_block, train_feature_matcher)
from .ecc import CodecParams
from .encoding import DIGEST_LEN, digest
from .entropy import Entropy, as_entropy
from .errors import ProtocolError, Rejected
from .protocol import (AccessRequest, CasKey, Challenge, Reason, Verdict, answer_challenge,
                       answer_with_cached_key, enroll_cas, parse_error)
from .transport import Message, MsgType, frame, open_envelope, seal
from .vault import ClientTable, ModelTable, RowSpec, UserContext

log = logging.getLogger(__name__)

FEATURE_MODALITIES = ("face", "voice", "keystroke")
DEVICE = MODALITIES["device"]
CONFIG = "cas.json"
BOX_FILE = "box.key"
IMAGE_FILE = "device.img"
TRANSCRIPT = "transcript.jsonl"
SESSION_KEY_FILE = "session.key"


# ---------------------------------------------------------------------------
# sensors


def parse_drop(spec: str):
    """``voice`` (always absent) or ``voice:10-40`` (absent for 10 <= t < 40)."""
    name, _, window = spec.partition(":")
    if name not in MODALITIES:
        raise ValueError(f"unknown modality {name!r}")
    if not window:
        return name, (-math.inf, math.inf)
    lo, _, hi = window.partition("-")
    return name, (float(lo), float(hi) if hi else math.inf)


class SensorStream:
    """Per-modality rolling buffers of the most recent ``window`` samples."""

    def __init__(self, profile: UserProfile, device_image: bytes, rng, window: int = 8,
                 rate: float = 1.0, drops=()):
        self.profile = profile
        self.device_image = device_image
        self.rng = as_entropy(rng)
        self.window = window
        self.rate = rate
        self.drops: dict[str, list] = {}
        for name, span in drops:
            self.drops.setdefault(name, []).append(span)
        self.buffers = {MODALITIES[m].mid: deque(maxlen=window) for m in profile.means}
        self._last = None
        self._prompted = False

    def available(self, name: str, t: float) -> bool:
        return not any(lo <= t < hi for lo, hi in self.drops.get(name, ()))

    def poll(self, now: float):
        if self._last is None:
            fresh = self.window
        else:
            fresh = min(self.window, int((now - self._last) * self.rate))
        self._last = now
        if self._prompted:
            # the prompt answer is what the next challenge should see
            self._prompted = False
            fresh = 0
        for name in self.profile.means:
            buf = self.buffers[MODALITIES[name].mid]
            if not self.available(name, now):
                buf.clear()
            elif fresh:
                buf.extend(self.profile.sample(name, self.rng, fresh))

    def inject(self, profile: UserProfile):
        """Active authentication: refill every buffer from an explicit prompt."""
        for name in profile.means:
            buf = self.buffers.get(MODALITIES[name].mid)
            if buf is not None:
                buf.clear()
                buf.extend(profile.sample(name, self.rng, self.window))
        self._prompted = True

    def live(self, now: float) -> dict:
        out = {mid: list(buf) for mid, buf in self.buffers.items() if buf}
        if self.available("device", now):
            out[DEVICE.mid] = [self.device_image]
        return out


# ---------------------------------------------------------------------------
# ensembles


def row_modalities(rows: int, rng, mix=FEATURE_MODALITIES, device_rows=None) -> list[str]:
    """Device comparator rows plus feature rows cycled over ``mix``, shuffled."""
    if device_rows is None:
        device_rows = max(2, rows // 8)
    device_rows = min(device_rows, rows)
    names = ["device"] * device_rows
    if rows > device_rows and not mix:
        raise ValueError("no feature modalities to fill the remaining rows")
    names += [mix[i % len(mix)] for i in range(rows - device_rows)]
    return [names[i] for i in as_entropy(rng).sample(rows, rows)]


def build_ensemble(profile: UserProfile, device_image: bytes, names, choices: int, rng,
                   training: int = 16, dither: float = 0.05, block_size: int = 512,
                   population: PopulationParams | None = None) -> list[RowSpec]:
    """Train one real model per row and draw ``choices - 1`` chaff for it.

    Each feature row is trained on fresh samples plus a small per-row offset
    so that no two rows share a model digest.
    """
    rng = as_entropy(rng)
    population = population or PopulationParams.default()
    n_blocks = len(device_image) // block_size
    lbas = iter(rng.sample(n_blocks, sum(n == "device" for n in names)))
    out = []
    for name in names:
        mod = MODALITIES[name]
        if name == "device":
            lba = next(lbas)
            real = BlockHashModel(lba, block_size,
                                  digest(read_block(device_image, lba, block_size))).to_model(mod.mid)
            chaff = tuple(BlockHashModel(rng.randbelow(n_blocks), block_size,
                                         rng.bytes(DIGEST_LEN)).to_model(mod.mid)
                          for _ in range(choices - 1))
        else:
            samples = profile.sample(name, rng, training)
            samples = samples + rng.normal(0.0, dither, samples.shape[1])
            real = train_feature_matcher(samples, mod.mid)
            chaff = tuple(generate_chaff(population, mod.mid, rng) for _ in range(choices - 1))
        out.append(RowSpec(real, chaff, mod.mid))
    return out


# ---------------------------------------------------------------------------
# persistence


class CasStore:
    """Directory holding the client's tables, sealed blobs and config."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.config: dict = {}

    @property
    def exists(self) -> bool:
        return (self.dir / CONFIG).exists()

    def create(self, config: dict, rng, force: bool = False, image_size: int = 1 << 16):
        if self.exists and not force:
            raise FileExistsError(f"{self.dir} already holds an enrollment (use --force)")
        if self.dir.exists() and force:
            shutil.rmtree(self.dir)
        self.dir.mkdir(parents=True)
        rng = as_entropy(rng)
        box = keys.BoxKey.generate(rng.spawn("box"))
        (self.dir / BOX_FILE).write_bytes(box.private_bytes())
        (self.dir / IMAGE_FILE).write_bytes(rng.spawn("image").bytes(image_size))
        self.config = dict(config, keys=[], cursor=0)
        self.save()

    def load(self):
        if not self.exists:
            raise FileNotFoundError(f"no enrollment at {self.dir}")
        self.config = json.loads((self.dir / CONFIG).read_text())
        return self

    def save(self):
        tmp = self.dir / (CONFIG + ".tmp")
        tmp.write_text(json.dumps(self.config, indent=1, sort_keys=True) + "\n")
        tmp.replace(self.dir / CONFIG)

    @property
    def box(self) -> keys.BoxKey:
        return keys.BoxKey.from_private_bytes((self.dir / BOX_FILE).read_bytes())

    @property
    def device_image(self) -> bytes:
        return (self.dir / IMAGE_FILE).read_bytes()

    def add_key(self, key: CasKey) -> str:
        name = f"k{self.issued:03d}"
        d = self.dir / "keys" / name
        d.mkdir(parents=True)
        (d / "model_table.bin").write_bytes(key.model_table.to_bytes())
        (d / "client_table.bin").write_bytes(key.client_table.to_bytes())
        (d / "sealed.bin").write_bytes(key.sealed_blob)
        (d / "k_pu.der").write_bytes(key.k_pu)
        (d / "codec.bin").write_bytes(key.codec.to_bytes())
        self.config["keys"].append(name)
        self.save()
        return name

    @property
    def issued(self) -> int:
        return len(self.config["keys"]) + len(self.config.get("quarantined", ()))

    def load_key(self, name: str) -> CasKey:
        d = self.dir / "keys" / name
        return CasKey(ModelTable.from_bytes((d / "model_table.bin").read_bytes()),
                      ClientTable.from_bytes((d / "client_table.bin").read_bytes()),
                      (d / "sealed.bin").read_bytes(), (d / "k_pu.der").read_bytes(),
                      CodecParams.from_bytes((d / "codec.bin").read_bytes()))

    def current_key(self) -> str | None:
        ks = self.config["keys"]
        if not ks:
            return None
        return ks[min(self.config["cursor"], len(ks) - 1)]

    def advance(self):
        self.config["cursor"] += 1
        self.save()

    @property
    def remaining(self) -> int:
        return max(0, len(self.config["keys"]) - self.config["cursor"])


class Transcript:
    """Line-delimited log of frames (by digest) and loop events."""

    def __init__(self, path=None, clock=None):
        self.path = Path(path) if path else None
        self.clock = clock
        self.events: list[dict] = []

    def _t(self):
        return round(self.clock.now(), 6) if self.clock else None

    def record(self, event: str, **fields):
        entry = {"event": event, "t": self._t(), **fields}
        self.events.append(entry)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n")

    def tap(self, direction: str, data: bytes):
        try:
            mtype = MsgType(data[5]).name
        except (IndexError, ValueError):
            mtype = "?"
        self.record("frame", dir=direction, type=mtype, len=len(data),
                    sha256=digest(bytes(data)).hex())


def chain_taps(*taps):
    taps = [t for t in taps if t]

    def tap(direction, data):
        for t in taps:
            t(direction, data)
    return tap if taps else None


# ---------------------------------------------------------------------------
# client


@dataclass
class RoundResult:
    reason: Reason
    verdict: Verdict | None = None
    answer: object = None
    key_name: str | None = None
    detail: str = ""

    @property
    def accepted(self) -> bool:
        return self.reason == Reason.ACCEPT


@dataclass
class SessionLoopState:
    next_challenge_time: float = 0.0
    failures: int = 0
    active_auth_pending: bool = False
    accepts: int = 0
    rejects: dict = field(default_factory=dict)


def profile_for(seed: int, sigma: float) -> UserProfile:
    return UserProfile.generate(seed, sigma)


class CasClient:
    """Drives enrollment and verification over any ``request``-capable channel."""

    def __init__(self, store: CasStore, channel, cave_public: bytes, rng=None, clock=None,
                 transcript: Transcript | None = None):
        self.store = store
        self.channel = channel
        self.cave_public = cave_public
        self.rng = as_entropy(rng)
        self.clock = clock
        self.transcript = transcript or Transcript(clock=clock)
        self.box = store.box
        self._seal_rng = self.rng.spawn("seal")

    @property
    def cfg(self) -> dict:
        return self.store.config

    @property
    def user(self) -> UserContext:
        return UserContext(self.cfg["uid"])

    def codec(self) -> CodecParams:
        c = self.cfg
        return CodecParams(c["key_bits"] // 8, c["rows"], c["parity"])

    # -- enrollment ---------------------------------------------------------

    def enroll_one(self, insecure_test_hook=None) -> str:
        c = self.cfg
        idx = self.store.issued
        rng = self.rng.spawn(f"enroll/{idx}")
        profile = profile_for(c["profile_seed"], c["sigma"])
        names = row_modalities(c["rows"], rng.spawn("layout"), tuple(c["mix"]),
                               c.get("device_rows"))
        ensemble = build_ensemble(profile, self.store.device_image, names, c["choices"],
                                  rng.spawn("ensemble"), dither=c.get("dither", 0.05))
        try:
            key = enroll_cas(self.user, ensemble, self.codec(), self.cave_public, self.channel,
                             self.box, rng.spawn("key"), c["key_bits"],
                             insecure_test_hook=insecure_test_hook)
        except Rejected as exc:
            self.transcript.record("enroll_rejected", reason=exc.reason.value, detail=exc.detail)
            raise
        name = self.store.add_key(key)
        self.transcript.record("enrolled", key=name, sealed=len(key.sealed_blob),
                               model_table=len(key.model_table.to_bytes()),
                               client_table=len(key.client_table.to_bytes()))
        return name

    def enroll(self, count: int) -> list[str]:
        return [self.enroll_one() for _ in range(count)]

    # -- verification -------------------------------------------------------

    def _open_reply(self, reply: Message):
        if reply.type == MsgType.ERROR:
            raise parse_error(reply)
        return reply.type, open_envelope(self.box, reply.payload)

    def access(self, key: CasKey, sealed_blob: bytes | None = None):
        """Send an AccessRequest; returns a Challenge or raises Rejected."""
        req = AccessRequest(self.user.uid_digest, sealed_blob or key.sealed_blob, self.box.public)
        reply = self.channel.request(Message(MsgType.ACCESS_REQUEST,
                                             seal(self.cave_public, req.to_bytes(), self._seal_rng)))
        mtype, body = self._open_reply(reply)
        if mtype == MsgType.VERDICT:
            v = Verdict.from_bytes(body)
            raise Rejected(v.reason, v.detail)
        if mtype != MsgType.CHALLENGE:
            raise ProtocolError(f"expected a challenge, got {mtype.name}")
        return Challenge.from_bytes(body)

    def respond(self, response) -> Verdict:
        reply = self.channel.request(Message(MsgType.RESPONSE,
                                             seal(self.cave_public, response.to_bytes(),
                                                  self._seal_rng)))
        mtype, body = self._open_reply(reply)
        if mtype != MsgType.VERDICT:
            raise ProtocolError(f"expected a verdict, got {mtype.name}")
        return Verdict.from_bytes(body)

    def verify_once(self, live: dict, override=None, include_guesses=True) -> RoundResult:
        name = self.store.current_key()
        if name is None:
            return RoundResult(Reason.ROTATION_EXHAUSTED, detail="no keys enrolled")
        key = self.store.load_key(name)
        try:
            challenge = self.access(key)
            answer = answer_challenge(challenge, key, live, include_guesses, override)
            verdict = self.respond(answer.response)
        except Rejected as exc:
            if exc.reason in (Reason.KEY_CONSUMED, Reason.REVOKED) and self.store.remaining:
                self.store.advance()
            self.transcript.record("verdict", key=name, reason=exc.reason.value)
            return RoundResult(exc.reason, key_name=name, detail=exc.detail)
        self.transcript.record("verdict", key=name, reason=verdict.reason.value,
                               recovered=answer.recovered, rows_next=verdict.rows_next,
                               interval_next=verdict.interval_next)
        if verdict.accepted:
            self.store.advance()
            if self.cfg.get("export_session_key"):
                (self.store.dir / SESSION_KEY_FILE).write_text(answer.session_key.hex() + "\n")
        return RoundResult(verdict.reason, verdict, answer, name)

    def run(self, stream: SensorStream, rounds: int | None, renew: bool = False, prompt=None,
            active_auth_after: int = 3, default_interval: float = 30.0):
        """Continuous loop; returns the loop state once ``rounds`` are done or keys run out.

        ``prompt`` is called with the loop state after ``active_auth_after``
        consecutive failures; returning a profile injects its samples.
        """
        state = SessionLoopState(self.clock.now() if self.clock else 0.0)
        done = 0
        while rounds is None or done < rounds:
            if self.clock:
                wait = state.next_challenge_time - self.clock.now()
                if wait > 0:
                    self.clock.sleep(wait)
                now = self.clock.now()
            else:
                now = 0.0
            stream.poll(now)
            res = self.verify_once(stream.live(now))
            done += 1
            interval = res.verdict.interval_next if res.verdict and res.verdict.interval_next \
                else default_interval
            state.next_challenge_time = now + interval
            if res.accepted:
                state.accepts += 1
                state.failures = 0
                state.active_auth_pending = False
                if renew:
                    self.enroll_one()
                continue
            state.rejects[res.reason.value] = state.rejects.get(res.reason.value, 0) + 1
            if res.reason == Reason.ROTATION_EXHAUSTED:
                self.transcript.record("exhausted")
                break
            state.failures += 1
            if state.failures >= active_auth_after:
                state.active_auth_pending = True
                self.transcript.record("active_auth_prompt", failures=state.failures)
                injected = prompt(state) if prompt else None
                if injected is not None:
                    stream.inject(injected)
                    state.failures = 0
                    state.active_auth_pending = False
        return state

    # -- adversary simulations ----------------------------------------------

    def attack_replay(self, live: dict, send_raw) -> Reason:
        """Capture an accepted response frame and push it again verbatim."""
        captured = {}
        key = self.store.load_key(self.store.current_key())
        challenge = self.access(key)
        answer = answer_challenge(challenge, key, live)
        msg = Message(MsgType.RESPONSE, seal(self.cave_public, answer.response.to_bytes(),
                                             self._seal_rng))
        captured["frame"] = frame(msg)
        first = self._verdict_from(send_raw(captured["frame"]))
        self.transcript.record("attack", mode="replay", step="original", reason=first.value)
        if first == Reason.ACCEPT:
            self.store.advance()
        second = self._verdict_from(send_raw(captured["frame"]))
        self.transcript.record("attack", mode="replay", step="replay", reason=second.value)
        return second

    def _verdict_from(self, reply: Message) -> Reason:
        try:
            mtype, body = self._open_reply(reply)
        except Rejected as exc:
            return exc.reason
        return Verdict.from_bytes(body).reason

    def attack_tamper(self, bit: int = 0) -> Reason:
        key = self.store.load_key(self.store.current_key())
        blob = bytearray(key.sealed_blob)
        blob[len(blob) // 2] ^= 1 << (bit % 8)
        try:
            self.access(key, bytes(blob))
        except Rejected as exc:
            self.transcript.record("attack", mode="tamper", reason=exc.reason.value)
            return exc.reason
        return Reason.ACCEPT

    def attack_cached_key(self, attempts: int = 1) -> list[Reason]:
        """Enroll a key while snooping its private half, then answer without classifying."""
        stolen = {}
        name = self.enroll_one(insecure_test_hook=lambda s: stolen.update(k_pr=s.k_pr))
        # the stolen key sits after the honest ones; park it out of the normal rotation
        keys_list = self.store.config["keys"]
        keys_list.remove(name)
        self.store.config.setdefault("quarantined", []).append(name)
        self.store.save()
        key = self.store.load_key(name)
        out = []
        for _ in range(attempts):
            try:
                challenge = self.access(key)
                answer = answer_with_cached_key(challenge, key, stolen["k_pr"])
                reason = self.respond(answer.response).reason
            except Rejected as exc:
                reason = exc.reason
            self.transcript.record("attack", mode="cached-key", reason=reason.value)
            out.append(reason)
            if reason in (Reason.INTRUSION, Reason.ACCEPT, Reason.REVOKED):
                break
        stolen.clear()
        return out


def new_store_config(uid: str, rows: int, choices: int, key_bits: int = 2048, parity: int = 32,
                     profile_seed: int = 1, sigma: float = 0.5, mix=FEATURE_MODALITIES,
                     device_rows=None, dither: float = 0.05, export_session_key: bool = False):
    return {"uid": uid, "rows": rows, "choices": choices, "key_bits": key_bits, "parity": parity,
            "profile_seed": profile_seed, "sigma": sigma, "mix": list(mix),
            "device_rows": device_rows, "dither": dither,
            "export_session_key": export_session_key}


def sensor_rng(seed) -> Entropy:
    return as_entropy(seed).spawn("sensor")


def feature_bytes(profile: UserProfile) -> list[bytes]:
    """Raw float64 bytes of a profile's means (for privacy scans)."""
    return [np.asarray(v, dtype=np.float64).tobytes() for v in profile.means.values()]
