import json
import math

import numpy as np
import pytest

from caliper.cas import CasStore, SensorStream, parse_drop, profile_for, row_modalities, \
    sensor_rng
from caliper.protocol import Reason
from caliper.transport import deframe

# 14 feature rows cycled over this mix carry exactly two voice rows
SPARSE_VOICE = ["face", "face", "face", "voice", "keystroke", "keystroke", "keystroke"]


def test_parse_drop():
    assert parse_drop("voice") == ("voice", (-math.inf, math.inf))
    assert parse_drop("face:10-40") == ("face", (10.0, 40.0))
    assert parse_drop("face:10") == ("face", (10.0, math.inf))
    with pytest.raises(ValueError):
        parse_drop("smell")


def test_row_modalities_layout():
    names = row_modalities(16, 1, tuple(SPARSE_VOICE), device_rows=2)
    assert len(names) == 16
    assert names.count("device") == 2 and names.count("voice") == 2
    assert row_modalities(16, 1) == row_modalities(16, 1)


def test_sensor_window_and_drop():
    s = SensorStream(profile_for(1, 0.0), b"img", 1, window=4, drops=[("voice", (5, 10))])
    s.poll(0.0)
    assert all(len(v) == 4 for mid, v in s.live(0.0).items() if mid != 16)
    s.poll(6.0)
    assert 2 not in s.live(6.0)
    s.poll(11.0)
    assert len(s.live(11.0)[2]) == 4


def test_drop_within_tolerance_still_accepts(make_sim):
    sim = make_sim(rows=16, choices=4, keys=3, mix=SPARSE_VOICE, device_rows=2)
    stream = sim.genuine_stream(drops=[parse_drop("voice")])
    for _ in range(3):
        stream.poll(sim.clock.now())
        res = sim.client.verify_once(stream.live(sim.clock.now()))
        assert res.accepted
        assert res.answer.guesses.count(0xFFFF) <= 2


def test_drop_beyond_tolerance_fails(make_sim):
    sim = make_sim(rows=16, choices=4, keys=1, mix=SPARSE_VOICE, device_rows=2)
    stream = sim.genuine_stream(drops=[parse_drop("face")])
    stream.poll(0.0)
    assert sim.client.verify_once(stream.live(0.0)).reason == Reason.DECODE_FAILURE


def test_run_loop_renews_and_relaxes(make_sim):
    sim = make_sim(rows=16, choices=4, keys=1)
    state = sim.client.run(sim.genuine_stream(), rounds=4, renew=True)
    assert state.accepts == 4 and not state.rejects
    assert sim.clock.now() > 0


def test_active_auth_prompt_after_failures(make_sim):
    sim = make_sim(rows=8, choices=4, keys=2)
    calls = []

    def prompt(state):
        calls.append(state.failures)
        return profile_for(1, 0.0)  # the genuine user answers the prompt

    stream = sim.impostor_stream()
    state = sim.client.run(stream, rounds=4, prompt=prompt)
    assert calls == [3]
    assert state.rejects == {"DecodeFailure": 3} and state.accepts == 1
    events = [e["event"] for e in sim.transcript.events]
    assert "active_auth_prompt" in events


def test_prompt_without_answer_stays_pending(make_sim):
    sim = make_sim(rows=8, choices=4)
    state = sim.client.run(sim.impostor_stream(), rounds=3, prompt=lambda s: None)
    assert state.active_auth_pending and state.failures == 3


def test_exhaustion_ends_loop(make_sim):
    sim = make_sim(rows=8, choices=4, keys=2)
    state = sim.client.run(sim.genuine_stream(), rounds=10)
    assert state.accepts == 2 and state.rejects == {"RotationExhausted": 1}


def test_store_force_guard(tmp_path):
    s = CasStore(tmp_path / "cas")
    s.create({"uid": "a"}, rng=1)
    with pytest.raises(FileExistsError):
        CasStore(tmp_path / "cas").create({"uid": "a"}, rng=1)
    CasStore(tmp_path / "cas").create({"uid": "b"}, rng=1, force=True)
    assert CasStore(tmp_path / "cas").load().config["uid"] == "b"


def test_store_reload_roundtrip(make_sim):
    sim = make_sim(rows=4, choices=2, keys=2)
    again = CasStore(sim.store.dir).load()
    assert again.config == sim.store.config
    name = again.current_key()
    assert again.load_key(name).sealed_blob == sim.store.load_key(name).sealed_blob


def test_transcript_structured(make_sim):
    sim = make_sim(rows=4, choices=2)
    sim.client.verify_once(sim.live())
    lines = (sim.store.dir / "transcript.jsonl").read_text().splitlines()
    events = [json.loads(l) for l in lines]
    frames = [e for e in events if e["event"] == "frame"]
    assert {f["type"] for f in frames} >= {"ENROLL_REQUEST", "CHALLENGE", "VERDICT"}
    assert all(len(f["sha256"]) == 64 for f in frames)
    assert events[-1]["event"] == "verdict" and events[-1]["reason"] == "Accept"


def test_attacks(make_sim):
    sim = make_sim(rows=8, choices=4, keys=3)

    def sent(raw):
        return sim.cave.handle(deframe(raw))

    assert sim.client.attack_replay(sim.live(), sent) == Reason.REPLAY
    assert sim.client.attack_tamper() == Reason.TAMPER
    sim.cave.decoy_prob = 1.0
    assert sim.client.attack_cached_key(attempts=5) == [Reason.INTRUSION]
    assert sim.store.config["quarantined"] and sim.store.remaining == 2


def test_sensor_rng_is_deterministic():
    a = SensorStream(profile_for(1, 0.5), b"", sensor_rng(3))
    b = SensorStream(profile_for(1, 0.5), b"", sensor_rng(3))
    a.poll(0.0)
    b.poll(0.0)
    la, lb = a.live(0.0), b.live(0.0)
    assert la.keys() == lb.keys()
    for mid in la:
        assert all(np.array_equal(x, y) for x, y in zip(la[mid], lb[mid]))
