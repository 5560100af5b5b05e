import socket
import subprocess
import sys

import pytest

from decoyqkd.cli import main
from decoyqkd.model import SessionTally, format_config, SessionConfig


def run(*args, cwd=None):
    return subprocess.run([sys.executable, "-m", "decoyqkd", *args], capture_output=True,
                          text=True, cwd=cwd, timeout=300)


def parse(out):
    return {k: float(v) for k, v in (line.split(",") for line in out.strip().splitlines())}


@pytest.fixture
def default_cfg(tmp_path):
    path = tmp_path / "default.cfg"
    path.write_text(format_config(SessionConfig()))
    return path


def test_validate_ok(default_cfg):
    r = run("validate", "--config", str(default_cfg))
    assert r.returncode == 0
    assert "source.mu = 0.55" in r.stdout


def test_validate_invalid(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("source.mu = 0.1\nsource.nu1 = 0.06\nsource.nu2 = 0.05\n")
    r = run("validate", "--config", str(p))
    assert r.returncode == 2
    assert "nu1 + nu2" in r.stderr


def test_validate_missing_file(tmp_path):
    assert run("validate", "--config", str(tmp_path / "none.cfg")).returncode == 3


def test_analyze_builtin_preset():
    r = run("analyze", "--from-table1")
    assert r.returncode == 0
    v = parse(r.stdout)
    assert list(v) == ["y0_lower", "q1_lower", "eps1_upper", "secure_rate_bps", "raw_rate_bps"]
    assert 0.95e6 <= v["secure_rate_bps"] <= 1.07e6


def test_analyze_gains_file(tmp_path):
    g = tmp_path / "g.txt"
    g.write_text("q_mu = 8.680e-3\nq_nu1 = 1.970e-3\nq_nu2 = 4.470e-4\neps_mu = 0.0253\n")
    v = parse(run("analyze", "--gains", str(g)).stdout)
    assert v["q1_lower"] == pytest.approx(4.88e-3, rel=0.01)
    g.write_text("q_mu = 8.680e-3\nq_nu1 = 0\nq_nu2 = 0\neps_mu = 0.0253\n")
    r = run("analyze", "--gains", str(g))
    assert r.returncode == 0 and parse(r.stdout)["secure_rate_bps"] == 0.0
    g.write_text("q_mu = lots\n")
    assert run("analyze", "--gains", str(g)).returncode == 2


def test_sweep(tmp_path):
    out = tmp_path / "s.csv"
    r = run("sweep", "--from", "0", "--to", "120", "--step", "5", "--out", str(out))
    assert r.returncode == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "distance_km,raw_bps,secure_bps,qber"
    rows = {float(l.split(",")[0]): [float(x) for x in l.split(",")[1:]] for l in lines[1:]}
    assert rows[100.0][1] > 0 and rows[120.0][1] == 0
    assert rows[40.0][1] == pytest.approx(446e3, rel=0.25)
    assert rows[60.0][1] == pytest.approx(166e3, rel=0.25)
    assert 105 <= parse(r.stdout)["cutoff_km"] <= 120
    assert run("sweep", "--from", "50", "--to", "40", "--out", str(out)).returncode == 2


def test_simulate_deterministic_and_errors(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert run("simulate", "--pulses", "2000000", "--seed", "1", "--out", str(a)).returncode == 0
    assert run("simulate", "--pulses", "2000000", "--seed", "1", "--out", str(b)).returncode == 0
    assert a.read_bytes() == b.read_bytes()
    assert SessionTally.from_text(a.read_text()).is_consistent()
    assert run("simulate", "--pulses", "0", "--out", str(a)).returncode == 2


def test_simulate_blind_receiver(tmp_path):
    cfg = tmp_path / "blind.cfg"
    cfg.write_text("detector.efficiency = 0\ndetector.dark_prob_per_gate = 0\n")
    out = tmp_path / "t.txt"
    assert run("simulate", "--config", str(cfg), "--pulses", "100000", "--out", str(out)).returncode == 0
    assert SessionTally.from_text(out.read_text()).clicks == (0, 0, 0)


def _sift_pair(tmp_path, bob_extra=(), alice_extra=()):
    tags, pulses = tmp_path / "t.qkdt", tmp_path / "p.qkdp"
    if not tags.exists():
        r = run("simulate", "--pulses", "1000000", "--seed", "5", "--out", str(tmp_path / "sim.txt"),
                "--tags", str(tags), "--pulses-out", str(pulses))
        assert r.returncode == 0
    bob = subprocess.Popen([sys.executable, "-m", "decoyqkd", "sift", "--role", "bob", "--listen",
                            "127.0.0.1:0", "--tags", str(tags), "--out", str(tmp_path / "bob.txt"),
                            *bob_extra], stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    port = bob.stdout.readline().strip().rsplit(":", 1)[1]
    alice = run("sift", "--role", "alice", "--connect", f"127.0.0.1:{port}", "--pulses", str(pulses),
                "--out", str(tmp_path / "alice.txt"), *alice_extra)
    bob_out, bob_err = bob.communicate(timeout=60)
    return alice, bob.returncode, bob_err


def test_sift_pair_agrees(tmp_path):
    alice, bob_rc, _ = _sift_pair(tmp_path)
    assert alice.returncode == 0 and bob_rc == 0
    a = (tmp_path / "alice.txt").read_bytes()
    assert a == (tmp_path / "bob.txt").read_bytes()
    assert a == (tmp_path / "sim.txt").read_bytes()


def test_sift_version_mismatch(tmp_path):
    alice, bob_rc, bob_err = _sift_pair(tmp_path, bob_extra=("--protocol-version", "2"))
    assert alice.returncode == 4 and bob_rc == 4
    assert "HELLO" in alice.stderr and "HELLO" in bob_err


def test_sift_connection_refused(tmp_path):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    p = tmp_path / "p.qkdp"
    from decoyqkd.pulsesim import alice_pulses, write_pulses
    write_pulses(p, alice_pulses(SessionConfig(), 0, 10))
    r = run("sift", "--role", "alice", "--connect", f"127.0.0.1:{port}", "--pulses", str(p),
            "--out", str(tmp_path / "a.txt"))
    assert r.returncode == 3


def test_optimize_cli():
    r = run("optimize")
    assert r.returncode == 0
    v = parse(r.stdout)
    assert list(v) == ["mu", "nu1", "nu2", "predicted_rate"]
    assert 0.4 <= v["mu"] <= 0.7


def test_optimize_infeasible(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("source.extinction_db = 0\n")
    assert run("optimize", "--config", str(p)).returncode == 2


def test_main_in_process(capsys):
    assert main(["analyze", "--from-table1", "--no-deviations"]) == 0
    out = capsys.readouterr().out
    assert parse(out)["q1_lower"] == pytest.approx(4.8806e-3, rel=1e-4)
