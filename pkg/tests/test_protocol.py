import pytest
from hypothesis import given, strategies as st

from caliper import keys
from caliper.ecc import CodecParams
from caliper.encoding import digest
from caliper.entropy import Entropy
from caliper.errors import ProtocolError, Rejected
from caliper.protocol import (Challenge, EnrollReceipt, EnrollmentRecord, PermKey, PolicyLimits,
                              PolicyState, Reason, Response, Verdict, answer_challenge,
                              answer_with_cached_key, make_challenge, make_decoy_challenge,
                              open_server_table, response_digest, rotate_row, update_policy,
                              verify_response)
from caliper.transport import Message, MsgType, frame, open_envelope, seal


def test_rotation_examples():
    row = ["e0", "e1", "e2", "e3"]
    assert rotate_row(row, 1) == ["e3", "e0", "e1", "e2"]
    assert rotate_row(row, 0) == row == rotate_row(row, 4)


@pytest.mark.parametrize("N", [2, 3, 4])
def test_shift_recovered_from_stored_index(N):
    # entry i sits at column i before rotation; after rotating by s the CAS
    # sees it at column c and recovers s = (c - i) mod N
    row = list(range(N))
    for s in range(N):
        rotated = rotate_row(row, s)
        for c, i in enumerate(rotated):
            assert (c - i) % N == s


LIMITS = PolicyLimits(min_rows=8, max_rows=64, interval_min=5, interval_max=300)


def test_policy_examples():
    s = PolicyState(32, 30.0)
    assert update_policy(s, 10, 10, LIMITS) == PolicyState(16, 60.0)
    assert update_policy(s, 0, 10, LIMITS) == PolicyState(64, 5.0)
    assert update_policy(s, 7, 10, LIMITS) == s


@given(st.integers(8, 64), st.floats(5, 300), st.integers(0, 50), st.integers(1, 50))
def test_policy_stays_in_bounds(rows, interval, correct, total):
    correct = min(correct, total)
    s = update_policy(PolicyState(rows, interval), correct, total, LIMITS)
    assert LIMITS.min_rows <= s.challenge_rows_next <= LIMITS.max_rows
    assert LIMITS.interval_min <= s.interval_next <= LIMITS.interval_max


def test_policy_rejects_bad_counts():
    with pytest.raises(ValueError):
        update_policy(PolicyState(8, 30), 3, 2, LIMITS)


def test_policy_min_rows_keeps_decodable():
    codec = CodecParams(256, 16, 32)
    rec = EnrollmentRecord(b"u" * 32, b"k", b"h" * 32, codec, 4, PolicyState(16, 30))
    assert rec.limits.min_rows == 16 - codec.max_erased_rows() == 14


def test_payload_round_trips():
    ch = Challenge(b"c" * 16, b"n" * 16, (((b"a" * 32, b"pp"), (b"b" * 32, b"qq")),))
    assert Challenge.from_bytes(ch.to_bytes()) == ch
    r = Response(b"c" * 16, b"n" * 16, 0, b"sig", (1, 2, 0xFFFF))
    assert Response.from_bytes(r.to_bytes()) == r
    r = Response(b"c" * 16, b"n" * 16, 1)
    assert Response.from_bytes(r.to_bytes()).guess_vector is None
    v = Verdict(Reason.ACCEPT, "", 8, 60.0)
    assert Verdict.from_bytes(v.to_bytes()) == v
    with pytest.raises(ValueError):
        Challenge(b"c", b"n", (((b"a", b"p"),), ((b"a", b"p"), (b"b", b"q"))))


def test_record_round_trip(make_sim):
    sim = make_sim(rows=4, choices=2)
    [rec] = sim.cave.store.records.values()
    assert EnrollmentRecord.from_dict(rec.to_dict()) == rec


def test_toy_enrollment_then_verification(make_sim):
    sim = make_sim(rows=4, choices=2)
    res = sim.client.verify_once(sim.live())
    assert res.accepted and res.answer.recovered


def test_distinct_seeds_distinct_enrollments(make_sim):
    a = make_sim("a", seed=1, rows=4, choices=2)
    b = make_sim("b", seed=2, rows=4, choices=2)
    ka = a.store.load_key(a.store.current_key())
    kb = b.store.load_key(b.store.current_key())
    assert ka.k_pu != kb.k_pu and ka.sealed_blob != kb.sealed_blob


def _session(sim, decoy=False, rows=None):
    rec = next(r for r in sim.cave.store.records.values() if not r.consumed)
    key = sim.store.load_key(sim.store.current_key())
    build = make_decoy_challenge if decoy else make_challenge
    ch, perm = build(rec, key.sealed_blob, sim.cave.box, rows or rec.M, Entropy(3), b"n" * 16)
    from caliper.protocol import Session
    return rec, key, ch, perm, Session(ch.challenge_id, rec.uid_digest, rec.record_id, perm,
                                       ch.n2, decoy, 1e9, b"")


def _stolen_key(sim):
    got = {}
    sim.client.enroll_one(insecure_test_hook=lambda s: got.update(k_pr=s.k_pr, truth=s))
    return got


def test_honest_answer_reconstructs_perm(make_sim):
    sim = make_sim(rows=8, choices=4)
    rec, key, ch, perm, session = _session(sim)
    ans = answer_challenge(ch, key, sim.live())
    assert ans.guesses == perm.shifts
    assert verify_response(rec, session, ans.response).reason == Reason.ACCEPT


def test_subset_challenge_still_decodes(make_sim):
    sim = make_sim(rows=16, choices=4)
    rec, key, ch, perm, session = _session(sim, rows=14)
    assert len(ch.rows) == 14
    ans = answer_challenge(ch, key, sim.live())
    assert verify_response(rec, session, ans.response).reason == Reason.ACCEPT


def test_one_shift_off_is_bad_signature(make_sim):
    sim = make_sim(rows=8, choices=4, keys=0)
    k_pr = _stolen_key(sim)["k_pr"]
    rec, key, ch, perm, session = _session(sim)
    wrong = list(perm.shifts)
    wrong[0] = (wrong[0] + 1) % 4
    signer = keys.signer_from_exponent(key.k_pu, k_pr)
    sig = keys.sign(signer, response_digest(PermKey(tuple(wrong)), ch.n2))
    resp = Response(ch.challenge_id, ch.n2, 0, sig)
    assert verify_response(rec, session, resp).reason == Reason.BAD_SIGNATURE
    good = keys.sign(signer, response_digest(perm, ch.n2))
    assert verify_response(rec, session, Response(ch.challenge_id, ch.n2, 0, good)).reason \
        == Reason.ACCEPT


def test_decoy_shape_and_outcomes(make_sim):
    sim = make_sim(rows=8, choices=4, keys=0)
    k_pr = _stolen_key(sim)["k_pr"]
    rec, key, real, _, _ = _session(sim)
    rec, key, decoy, perm, session = _session(sim, decoy=True)
    assert len(real.to_bytes()) == len(decoy.to_bytes())
    assert Challenge.from_bytes(decoy.to_bytes()) == decoy
    honest = answer_challenge(decoy, key, sim.live())
    assert not honest.recovered
    assert verify_response(rec, session, honest.response).reason == Reason.DECODE_FAILURE
    cached = answer_with_cached_key(decoy, key, k_pr)
    assert verify_response(rec, session, cached.response).reason == Reason.INTRUSION


def test_cached_key_accepts_on_real_challenge(make_sim):
    sim = make_sim(rows=8, choices=4, keys=0)
    k_pr = _stolen_key(sim)["k_pr"]
    rec, key, ch, perm, session = _session(sim)
    ans = answer_with_cached_key(ch, key, k_pr)
    assert verify_response(rec, session, ans.response).reason == Reason.ACCEPT


def test_guess_vector_length_checked(make_sim):
    sim = make_sim(rows=4, choices=2)
    rec, key, ch, perm, session = _session(sim)
    resp = Response(ch.challenge_id, ch.n2, 1, b"", (0,))
    assert verify_response(rec, session, resp).reason == Reason.PROTOCOL_ERROR


def test_unknown_h2_is_protocol_error(make_sim):
    sim = make_sim(rows=4, choices=2)
    key = sim.store.load_key(sim.store.current_key())
    ch = Challenge(b"c" * 16, b"n" * 16, (((b"x" * 32, b"p" * 3), (b"y" * 32, b"q" * 3)),))
    with pytest.raises(ProtocolError):
        answer_challenge(ch, key, sim.live())


def test_any_bit_flip_rejected_before_decrypt(make_sim):
    sim = make_sim(rows=4, choices=2)
    [rec] = sim.cave.store.records.values()
    blob = sim.store.load_key(sim.store.current_key()).sealed_blob

    class NoBox:
        public = b""

        def __getattr__(self, name):
            raise AssertionError("decrypt attempted on a tampered blob")
    for i in range(len(blob) * 8):
        bad = bytearray(blob)
        bad[i // 8] ^= 1 << (i % 8)
        with pytest.raises(Rejected) as exc:
            open_server_table(rec, bytes(bad), NoBox())
        assert exc.value.reason == Reason.TAMPER


def test_consumed_record_refuses_challenge(make_sim):
    sim = make_sim(rows=4, choices=2)
    [rec] = sim.cave.store.records.values()
    rec.consumed = True
    blob = sim.store.load_key(sim.store.current_key()).sealed_blob
    with pytest.raises(Rejected) as exc:
        make_challenge(rec, blob, sim.cave.box, 4, Entropy(1), b"n" * 16)
    assert exc.value.reason == Reason.KEY_CONSUMED


class Tampering:
    """Channel that rewrites the n1 echo in the enrollment receipt."""

    def __init__(self, inner, box):
        self.inner = inner
        self.box = box

    def request(self, msg):
        reply = self.inner.request(msg)
        if reply.type != MsgType.ENROLL_RECEIPT:
            return reply
        r = EnrollReceipt.from_bytes(open_envelope(self.box, reply.payload))
        forged = EnrollReceipt(r.sealed_blob, bytes(16))
        return Message(reply.type, seal(self.box.public, forged.to_bytes()))


class Broken:
    def request(self, msg):
        raise OSError("link down")


def test_n1_mismatch_aborts_without_persisting(make_sim):
    sim = make_sim(rows=4, choices=2, keys=0)
    sim.client.channel = Tampering(sim.channel, sim.store.box)
    with pytest.raises(ProtocolError):
        sim.client.enroll_one()
    assert sim.store.config["keys"] == []
    assert not (sim.store.dir / "keys").exists()


def test_channel_failure_leaves_no_partial_state(make_sim):
    sim = make_sim(rows=4, choices=2, keys=0)
    sim.client.channel = Broken()
    with pytest.raises(OSError):
        sim.client.enroll_one()
    assert sim.store.config["keys"] == [] and not (sim.store.dir / "keys").exists()


def test_duplicate_enrollment_rejected(make_sim):
    sim = make_sim(rows=4, choices=2, keys=0, capture=True)
    sim.client.enroll_one()
    enroll_frame = next(f for f in sim.frames if f[5] == MsgType.ENROLL_REQUEST)
    reply = sim.channel.send_raw(enroll_frame)
    assert reply.type == MsgType.ERROR and reply.payload.find(b"DuplicateEnrollment") >= 0


def test_n1_echo_matches(make_sim):
    from caliper.protocol import EnrollPayload
    from caliper.transport import deframe
    sim = make_sim(rows=4, choices=2, keys=0, capture=True)
    sim.client.enroll_one()
    req, rec = (deframe(f) for f in sim.frames[:2])
    sent = EnrollPayload.from_bytes(open_envelope(sim.cave.box, req.payload))
    echoed = EnrollReceipt.from_bytes(open_envelope(sim.store.box, rec.payload))
    assert sent.n1 == echoed.n1 and len(sent.n1) == 16


def test_uid_digest_is_stored_not_uid(make_sim):
    sim = make_sim(rows=4, choices=2)
    [rec] = sim.cave.store.records.values()
    assert rec.uid_digest == digest(b"alice")
    assert b"alice" not in (sim.cave.dir / "records.jsonl").read_bytes()
