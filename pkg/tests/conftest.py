import sys

import pytest

from caliper.cas import CasClient, CasStore, SensorStream, Transcript, new_store_config, \
    profile_for, sensor_rng
from caliper.cave import CaveService, SimClock
from caliper.transport import LoopbackTransport


class Sim:
    """A CAS and an in-process CAVE wired together over loopback."""

    def __init__(self, root, seed=7, rows=16, choices=4, keys=1, sigma=0.0, decoy_prob=0.0,
                 tcm_budget=None, key_bits=2048, parity=32, capture=False, **cfg):
        self.root = root
        self.clock = SimClock()
        self.frames = []
        self.cave = CaveService(root / "cave", rng=seed * 1000 + 1, clock=self.clock,
                                decoy_prob=decoy_prob, tcm_budget=tcm_budget)
        self.store = CasStore(root / "cas")
        self.store.create(new_store_config("alice", rows, choices, key_bits, parity,
                                           profile_seed=1, sigma=sigma, **cfg), rng=seed)
        self.transcript = Transcript(root / "cas" / "transcript.jsonl", self.clock)
        tap = self._tap if capture else None
        self.channel = LoopbackTransport(self.cave.handle, tap=self._both(tap))
        self.client = CasClient(self.store, self.channel, self.cave.public_key, rng=seed,
                                clock=self.clock, transcript=self.transcript)
        self.seed = seed
        if keys:
            self.client.enroll(keys)

    def _tap(self, direction, data):
        self.frames.append(bytes(data))

    def _both(self, extra):
        def tap(direction, data):
            self.transcript.tap(direction, data)
            if extra:
                extra(direction, data)
        return tap

    def genuine_stream(self, **kw):
        cfg = self.store.config
        return SensorStream(profile_for(cfg["profile_seed"], cfg["sigma"]),
                            self.store.device_image, sensor_rng(self.seed), **kw)

    def impostor_stream(self, seed=99, sigma=0.5, **kw):
        return SensorStream(profile_for(seed, sigma), self.store.device_image,
                            sensor_rng(self.seed + 1), **kw)

    def live(self, stream=None):
        stream = stream or self.genuine_stream()
        stream.poll(self.clock.now())
        return stream.live(self.clock.now())

    def close(self):
        self.cave.close()


@pytest.fixture
def make_sim(tmp_path):
    sims = []

    def factory(name="sim", **kw):
        s = Sim(tmp_path / name, **kw)
        sims.append(s)
        return s
    yield factory
    for s in sims:
        s.close()


def windows(data: bytes, w: int = 32) -> set:
    return {data[i:i + w] for i in range(len(data) - w + 1)}


def leaks(haystack: bytes, needles: set, w: int = 32) -> bool:
    return any(haystack[i:i + w] in needles for i in range(len(haystack) - w + 1))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
