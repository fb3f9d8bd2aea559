"""Command-line entry points: ``cave``, ``cas`` and ``aslp``."""

import argparse
import logging
import shutil
import sys
import time
from pathlib import Path

from . import aslp
from .cas import (CasClient, CasStore, SensorStream, Transcript, TRANSCRIPT, FEATURE_MODALITIES,
                  new_store_config, parse_drop, profile_for, sensor_rng)
from .cave import CaveService, SimClock, SizingParams, WallClock, serve, sizing_report
from .ecc import CodecParams
from .entropy import Entropy
from .errors import CaliperError, Rejected
from .protocol import Reason
from .transport import LoopbackTransport, SocketTransport, parse_address

PUB_FILE = "cave.pub"


# ---------------------------------------------------------------------------
# sizing (shared by both daemons)


def add_sizing_args(p):
    p.add_argument("--n", type=int, default=4, help="choices per row")
    p.add_argument("--m", type=int, default=128, help="rows")
    p.add_argument("--key-bits", type=int, default=2048)
    p.add_argument("--budget", type=int, default=131072, help="TCM bytes")
    p.add_argument("--pad", type=int, default=2, help="pad fragment bytes")
    p.add_argument("--index-len", type=int, default=1)
    p.add_argument("--digest-len", type=int, default=32)
    p.add_argument("--uid-len", type=int, default=32)
    p.add_argument("--derive-pad", action="store_true",
                   help="use the fragment length the RS codec actually needs")
    p.add_argument("--parity", type=int, default=32, help="RS parity symbols (with --derive-pad)")


def cmd_sizing(args) -> int:
    pad = args.pad
    if args.derive_pad:
        pad = CodecParams(args.key_bits // 8, args.m, args.parity).fragment_len
    p = SizingParams(args.n, args.m, pad, args.index_len, args.digest_len, args.key_bits // 8,
                     args.uid_len, args.budget)
    rep = sizing_report(p)
    print(f"row_bytes={rep['row_bytes']}")
    print(f"key_bytes={rep['key_bytes']}")
    print(f"keys_in_budget={rep['keys_in_budget']}")
    return 0


# ---------------------------------------------------------------------------
# cave


def cmd_serve(args) -> int:
    host, port = parse_address(args.listen)
    server, service = serve(args.store, (host, port), rng=Entropy(args.seed),
                            decoy_prob=args.decoy_prob, tcm_budget=args.tcm_budget,
                            session_ttl=args.session_ttl, fsync=True,
                            export_session_keys=args.export_session_keys)
    (Path(args.store) / PUB_FILE).write_text(service.public_key.hex() + "\n")
    addr = "%s:%d" % server.server_address[:2]
    print(f"listening on {addr}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        service.close()
    return 0


def cave_parser():
    ap = argparse.ArgumentParser(prog="cave", description="Continuous access verification daemon")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)
    s = sub.add_parser("serve", help="run the verifier on a TCP port")
    s.add_argument("--listen", default="127.0.0.1:7420")
    s.add_argument("--store", required=True)
    s.add_argument("--decoy-prob", type=float, default=0.1)
    s.add_argument("--tcm-budget", type=int, default=None)
    s.add_argument("--session-ttl", type=float, default=120.0)
    s.add_argument("--seed", type=int, default=None, help="deterministic randomness (testing)")
    s.add_argument("--export-session-keys", action="store_true")
    s.set_defaults(fn=cmd_serve)
    z = sub.add_parser("sizing", help="record-storage arithmetic for a TCM budget")
    add_sizing_args(z)
    z.set_defaults(fn=cmd_sizing)
    return ap


# ---------------------------------------------------------------------------
# cas


class Setup:
    """Opens the store and the channel to the CAVE for one CLI invocation."""

    def __init__(self, args, clock):
        self.args = args
        self.clock = clock
        self.rng = Entropy(args.seed)
        self.store = CasStore(args.store)
        self.service = None
        self.channel = None

    def connect(self, transcript):
        a = self.args
        if a.connect:
            host, port = parse_address(a.connect)
            self.channel = SocketTransport(host, port, tap=transcript.tap)
            pub = a.cave_pub
            if pub is None:
                raise SystemExit("--connect needs --cave-pub (hex or path to cave.pub)")
            cave_public = _read_pub(pub)
        else:
            self.service = CaveService(_cave_dir(a), rng=self.rng.spawn("cave"), clock=self.clock,
                                       decoy_prob=a.decoy_prob, tcm_budget=a.tcm_budget)
            self.channel = LoopbackTransport(self.service.handle, tap=transcript.tap)
            cave_public = self.service.public_key
        return cave_public

    def close(self):
        if self.channel:
            self.channel.close()
        if self.service:
            self.service.close()


def _cave_dir(args) -> str:
    return args.cave_store or str(Path(args.store)) + ".cave"


def _read_pub(value: str) -> bytes:
    p = Path(value)
    text = p.read_text().strip() if p.exists() else value
    return bytes.fromhex(text)


def _client(args, setup: Setup):
    transcript = Transcript(setup.store.dir / TRANSCRIPT, setup.clock)
    cave_public = setup.connect(transcript)
    return CasClient(setup.store, setup.channel, cave_public, setup.rng.spawn("cas"),
                     setup.clock, transcript)


def _clock(args):
    return SimClock() if args.clock == "sim" else WallClock()


def cmd_enroll(args) -> int:
    clock = _clock(args)
    setup = Setup(args, clock)
    cfg = new_store_config(args.uid, args.rows, args.choices, args.key_bits, args.parity,
                           args.profile_seed, args.sigma, args.mix.split(","), args.device_rows,
                           export_session_key=args.export_session_key)
    try:
        setup.store.create(cfg, setup.rng.spawn("store"), force=args.force)
    except FileExistsError as exc:
        print(f"cas: {exc}", file=sys.stderr)
        return 2
    if args.force and not args.connect:
        # the in-process CAVE belongs to this simulated device; start it over too
        shutil.rmtree(_cave_dir(args), ignore_errors=True)
    client = _client(args, setup)
    try:
        t0 = time.perf_counter()
        names = client.enroll(args.keys)
        dt = time.perf_counter() - t0
    except Rejected as exc:
        print(f"enrollment rejected: {exc.reason.value} {exc.detail}", file=sys.stderr)
        return 1
    finally:
        setup.close()
    key = setup.store.load_key(names[-1])
    codec = key.codec
    rep = sizing_report(SizingParams(args.choices, args.rows, codec.fragment_len, 1, 32,
                                     args.key_bits // 8, 32, args.tcm_budget or 131072))
    print(f"enrolled {len(names)} key(s) in {dt:.2f}s")
    print(f"model_table={len(key.model_table.to_bytes())}B client_table="
          f"{len(key.client_table.to_bytes())}B sealed_blob={len(key.sealed_blob)}B")
    print(f"cave footprint per key: row_bytes={rep['row_bytes']} key_bytes={rep['key_bytes']}")
    return 0


def _prompt_from(answers: str | None, genuine):
    if not answers:
        return None
    script = [a.strip().lower() for a in answers.split(",")]

    def prompt(state):
        ans = script.pop(0) if script else "no"
        return genuine if ans in ("y", "yes") else None
    return prompt


def cmd_run(args) -> int:
    clock = _clock(args)
    setup = Setup(args, clock)
    try:
        setup.store.load()
    except FileNotFoundError as exc:
        print(f"cas: {exc}", file=sys.stderr)
        return 2
    cfg = setup.store.config
    client = _client(args, setup)
    genuine = profile_for(cfg["profile_seed"], cfg["sigma"])
    profile = profile_for(args.impostor_seed, cfg["sigma"]) if args.impostor_seed is not None \
        else genuine
    drops = [parse_drop(d) for d in args.drop_modality]
    stream = SensorStream(profile, setup.store.device_image, sensor_rng(args.seed),
                          window=args.window, rate=args.rate, drops=drops)
    try:
        state = client.run(stream, args.rounds, renew=args.renew,
                           prompt=_prompt_from(args.prompt_answers, genuine))
    finally:
        setup.close()
    rejects = " ".join(f"{k}={v}" for k, v in sorted(state.rejects.items()))
    print(f"accepts={state.accepts} {rejects}".strip())
    if state.rejects.get(Reason.ROTATION_EXHAUSTED.value):
        print("no unused keys remain; run `cas enroll --force` to re-enroll")
    return 0


EXPECTED = {"replay": Reason.REPLAY, "tamper": Reason.TAMPER, "cached-key": Reason.INTRUSION}


def cmd_attack(args) -> int:
    clock = _clock(args)
    setup = Setup(args, clock)
    try:
        setup.store.load()
    except FileNotFoundError as exc:
        print(f"cas: {exc}", file=sys.stderr)
        return 2
    client = _client(args, setup)
    cfg = setup.store.config
    try:
        if args.mode == "replay":
            stream = SensorStream(profile_for(cfg["profile_seed"], cfg["sigma"]),
                                  setup.store.device_image, sensor_rng(args.seed))
            stream.poll(clock.now())
            got = client.attack_replay(stream.live(clock.now()), setup.channel.send_raw)
        elif args.mode == "tamper":
            got = client.attack_tamper()
        else:
            got = client.attack_cached_key(args.attempts)[-1]
    except Rejected as exc:
        got = exc.reason
    finally:
        setup.close()
    want = EXPECTED[args.mode]
    print(f"attack {args.mode}: {got.value} (expected {want.value})")
    return 0 if got == want else 1


def _common_cas(p):
    p.add_argument("--store", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--clock", choices=("sim", "wall"), default="sim",
                   help="sim advances virtual time instead of sleeping")
    where = p.add_mutually_exclusive_group()
    where.add_argument("--tcm", action="store_true", default=True,
                       help="run the CAVE in-process (default)")
    where.add_argument("--connect", metavar="HOST:PORT")
    p.add_argument("--cave-pub", help="CAVE public key (hex or file) for --connect")
    p.add_argument("--cave-store", help="in-process CAVE store (default STORE.cave)")
    p.add_argument("--decoy-prob", type=float, default=0.1)
    p.add_argument("--tcm-budget", type=int, default=None)


def cas_parser():
    ap = argparse.ArgumentParser(prog="cas", description="Continuous authentication client")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    e = sub.add_parser("enroll", help="create keys and register them with the CAVE")
    _common_cas(e)
    e.add_argument("--uid", default="user")
    e.add_argument("--rows", type=int, default=16)
    e.add_argument("--choices", type=int, default=4)
    e.add_argument("--keys", type=int, default=1)
    e.add_argument("--key-bits", type=int, default=2048)
    e.add_argument("--parity", type=int, default=32)
    e.add_argument("--profile-seed", type=int, default=1)
    e.add_argument("--sigma", type=float, default=0.5)
    e.add_argument("--mix", default=",".join(FEATURE_MODALITIES))
    e.add_argument("--device-rows", type=int, default=None)
    e.add_argument("--export-session-key", action="store_true")
    e.add_argument("--force", action="store_true")
    e.set_defaults(fn=cmd_enroll)

    r = sub.add_parser("run", help="continuous verification loop")
    _common_cas(r)
    r.add_argument("--rounds", type=int, default=None, help="stop after this many rounds")
    r.add_argument("--renew", action="store_true", help="enroll a fresh key after each Accept")
    r.add_argument("--impostor-seed", type=int, default=None)
    r.add_argument("--drop-modality", action="append", default=[],
                   metavar="NAME[:START-END]")
    r.add_argument("--window", type=int, default=8)
    r.add_argument("--rate", type=float, default=1.0)
    r.add_argument("--prompt-answers", help="scripted active-auth answers, e.g. yes,no")
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("attack", help="adversary simulations")
    _common_cas(a)
    a.add_argument("mode", choices=sorted(EXPECTED))
    a.add_argument("--attempts", type=int, default=1)
    a.set_defaults(fn=cmd_attack)

    z = sub.add_parser("sizing", help="record-storage arithmetic for a TCM budget")
    add_sizing_args(z)
    z.set_defaults(fn=cmd_sizing)
    return ap


# ---------------------------------------------------------------------------
# aslp


def _key_from(args) -> bytes:
    if args.key_hex:
        return bytes.fromhex(args.key_hex)
    path = Path(args.from_protocol) / "session.key"
    if not path.exists():
        raise SystemExit(f"{path} not found; run a verification round with session-key export")
    return bytes.fromhex(path.read_text().strip())


def cmd_pack(args) -> int:
    if args.inputs:
        img = aslp.SegmentedImage([Path(f).read_bytes() for f in args.inputs])
    else:
        img = aslp.synthetic_image(args.segments, Entropy(args.seed))
    Path(args.out).write_bytes(img.to_bytes())
    print(f"packed {img.S} segments, checksum {img.checksum.hex()[:16]}")
    return 0


def cmd_personalize(args) -> int:
    img = aslp.SegmentedImage.from_bytes(Path(args.image).read_bytes())
    Path(args.out).write_bytes(aslp.personalize(img, _key_from(args)))
    print(f"personalized {img.S} segments")
    return 0


def cmd_load(args) -> int:
    try:
        img = aslp.load(Path(args.image).read_bytes(), _key_from(args))
    except CaliperError as exc:
        print(f"load failed: {exc}", file=sys.stderr)
        return 1
    if args.out:
        Path(args.out).write_bytes(img.to_bytes())
    print(f"loaded {img.S} segments")
    return 0


def aslp_parser():
    ap = argparse.ArgumentParser(prog="aslp", description="Key-personalized segment layout")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("pack", help="build a canonical image")
    p.add_argument("inputs", nargs="*", help="segment files (omit for synthetic segments)")
    p.add_argument("--segments", type=int, default=8)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pack)
    for name, fn in (("personalize", cmd_personalize), ("load", cmd_load)):
        s = sub.add_parser(name)
        s.add_argument("image")
        k = s.add_mutually_exclusive_group(required=True)
        k.add_argument("--key-hex")
        k.add_argument("--from-protocol", metavar="STORE",
                       help="use the session key from the last accepted round in STORE")
        s.add_argument("--out", required=(name == "personalize"))
        s.set_defaults(fn=fn)
    return ap


def _main(parser, argv):
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (CaliperError, ValueError, OSError) as exc:
        print(f"{parser.prog}: {exc}", file=sys.stderr)
        return 1


def cave_main(argv=None):
    return _main(cave_parser(), argv)


def cas_main(argv=None):
    return _main(cas_parser(), argv)


def aslp_main(argv=None):
    return _main(aslp_parser(), argv)
