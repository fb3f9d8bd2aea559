import socket
import subprocess
import sys
import time

import pytest

from caliper.cli import aslp_main, cas_main, cave_main


def test_cave_sizing(capsys):
    assert cave_main(["sizing"]) == 0
    assert capsys.readouterr().out.split() == ["row_bytes=140", "key_bytes=18208",
                                               "keys_in_budget=7"]


def test_sizing_derived_pad(capsys):
    assert cas_main(["sizing", "--derive-pad"]) == 0
    assert "keys_in_budget=7" in capsys.readouterr().out


def _enroll(store, *extra):
    return cas_main(["enroll", "--store", str(store), "--seed", "5", "--rows", "8",
                     "--sigma", "0", *extra])


def test_enroll_run_and_force_guard(tmp_path, capsys):
    store = tmp_path / "cas"
    assert _enroll(store, "--keys", "2") == 0
    assert _enroll(store) == 2
    assert "--force" in capsys.readouterr().err
    assert cas_main(["run", "--store", str(store), "--seed", "5", "--rounds", "3",
                     "--decoy-prob", "0"]) == 0
    out = capsys.readouterr().out
    assert "accepts=2" in out and "RotationExhausted=1" in out
    assert _enroll(store, "--force") == 0


def test_run_without_store(tmp_path, capsys):
    assert cas_main(["run", "--store", str(tmp_path / "none")]) == 2


def test_impostor_run_with_prompts(tmp_path, capsys):
    store = tmp_path / "cas"
    assert _enroll(store, "--keys", "2") == 0
    assert cas_main(["run", "--store", str(store), "--seed", "5", "--rounds", "4",
                     "--decoy-prob", "0", "--impostor-seed", "42",
                     "--prompt-answers", "yes"]) == 0
    assert "accepts=1 DecodeFailure=3" in capsys.readouterr().out


@pytest.mark.parametrize("mode", ["replay", "tamper", "cached-key"])
def test_attacks(tmp_path, capsys, mode):
    store = tmp_path / "cas"
    assert _enroll(store, "--keys", "2") == 0
    extra = ["--decoy-prob", "1.0"] if mode == "cached-key" else ["--decoy-prob", "0"]
    assert cas_main(["attack", mode, "--store", str(store), "--seed", "5", *extra]) == 0
    assert "expected" in capsys.readouterr().out


def test_aslp_cli_with_protocol_key(tmp_path, capsys):
    store = tmp_path / "cas"
    assert _enroll(store, "--export-session-key") == 0
    assert cas_main(["run", "--store", str(store), "--seed", "5", "--rounds", "1",
                     "--decoy-prob", "0"]) == 0
    assert (store / "session.key").exists()
    img, per = tmp_path / "img", tmp_path / "per"
    assert aslp_main(["pack", "--segments", "6", "--seed", "1", "--out", str(img)]) == 0
    assert aslp_main(["personalize", str(img), "--from-protocol", str(store),
                      "--out", str(per)]) == 0
    back = tmp_path / "back"
    assert aslp_main(["load", str(per), "--from-protocol", str(store), "--out", str(back)]) == 0
    assert back.read_bytes() == img.read_bytes()
    assert aslp_main(["load", str(per), "--key-hex", "00ff"]) == 1
    assert "load failed" in capsys.readouterr().err


def test_aslp_pack_files(tmp_path):
    parts = []
    for i in range(3):
        p = tmp_path / f"seg{i}"
        p.write_bytes(bytes([i]) * 10)
        parts.append(str(p))
    out = tmp_path / "img"
    assert aslp_main(["pack", *parts, "--out", str(out)]) == 0
    assert out.read_bytes().startswith(b"ASLP")


DAEMON = "import sys; from caliper.cli import cave_main; sys.exit(cave_main(sys.argv[1:]))"


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_cave_daemon_over_tcp(tmp_path, capsys):
    port = _free_port()
    cave_dir = tmp_path / "cave"
    proc = subprocess.Popen([sys.executable, "-c", DAEMON, "serve", "--listen",
                             f"127.0.0.1:{port}", "--store", str(cave_dir), "--seed", "3",
                             "--decoy-prob", "0"], stdout=subprocess.PIPE, text=True)
    try:
        assert "listening" in proc.stdout.readline()
        pub = cave_dir / "cave.pub"
        for _ in range(50):
            if pub.exists():
                break
            time.sleep(0.1)
        common = ["--connect", f"127.0.0.1:{port}", "--cave-pub", str(pub)]
        assert _enroll(tmp_path / "cas", *common) == 0
        assert cas_main(["run", "--store", str(tmp_path / "cas"), "--seed", "5", "--rounds",
                         "2", *common]) == 0
        assert "accepts=1 RotationExhausted=1" in capsys.readouterr().out
    finally:
        proc.terminate()
        proc.wait(10)
