"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 I/O failure, 4 protocol failure.
Results go to stdout as ``name,value`` lines; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import socket
import sys
import time
from pathlib import Path

from .channel import find_cutoff_distance, rate_vs_distance
from .decoy import analyze
from .errors import ConfigError, NoKeyError, ProtocolError
from .model import (
    TABLE1_CONFIG, TABLE1_GAINS, SessionConfig, SessionTally, format_config, load_config,
    parse_gains, tallies_to_gains, validate_config,
)
from .optimizer import nu2_for, optimize_intensities
from .pulsesim import alice_pulses, read_pulses, read_tags, simulate_session, write_pulses, write_tags
from .sifting import PROTOCOL_VERSION, FramedChannel, MessageType, run_alice_endpoint, run_bob_endpoint

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_IO = 3
EXIT_PROTOCOL = 4

log = logging.getLogger("decoyqkd")


class InvalidInput(Exception):
    pass


def _fmt(v) -> str:
    return f"{v:.10g}" if isinstance(v, float) else str(v)


def _emit(pairs, out=None) -> None:
    out = out or sys.stdout
    for name, value in pairs:
        out.write(f"{name},{_fmt(value)}\n")


def _config(path: str | None) -> SessionConfig:
    cfg = SessionConfig() if path is None else load_config(path)
    return validate_config(cfg)


def _addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


# --- commands ---------------------------------------------------------------

def cmd_validate(args) -> int:
    sys.stdout.write(format_config(_config(args.config)))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = TABLE1_CONFIG if args.config is None else _config(args.config)
    n_signal = duration = None
    if args.from_table1:
        gains = TABLE1_GAINS
    elif args.gains:
        gains = parse_gains(Path(args.gains).read_text())
    else:
        tally = SessionTally.from_text(Path(args.tally).read_text())
        if not tally.is_consistent():
            raise InvalidInput("tally counts are not ordered sent >= clicks >= sifted >= errors")
        gains = tallies_to_gains(tally, cfg.k_sigma)
        n_signal, duration = tally.pulses_sent[0], tally.duration_s
    if args.no_deviations:
        gains = gains.without_deviations()
    b = analyze(gains, cfg, n_signal=n_signal, duration_s=duration)
    _emit([("y0_lower", b.y0_lower), ("q1_lower", b.q1_lower), ("eps1_upper", b.eps1_upper),
           ("secure_rate_bps", b.secure_rate_bps), ("raw_rate_bps", b.raw_rate_bps)])
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args.config)
    if not args.finite_key:
        cfg = SessionConfig(cfg.source, cfg.channel, cfg.detector, cfg.duration_s, 0.0, cfg.f_ec)
    try:
        points = rate_vs_distance(cfg, args.from_km, args.to_km, args.step_km)
    except ValueError as exc:
        raise InvalidInput(str(exc)) from None
    lines = ["distance_km,raw_bps,secure_bps,qber"]
    lines += [",".join(_fmt(float(v)) for v in (p.distance_km, p.raw_bps, p.secure_bps, p.qber))
              for p in points]
    Path(args.out).write_text("\n".join(lines) + "\n")
    try:
        cutoff = find_cutoff_distance(cfg)
    except NoKeyError:
        cutoff = 0.0
    _emit([("cutoff_km", cutoff)])
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args.config)
    if args.pulses < 1:
        raise InvalidInput("--pulses must be at least 1")
    t0 = time.perf_counter()
    result = simulate_session(cfg, args.seed, args.pulses, keep_stream=args.tags is not None)
    log.info("simulated %d gates in %.2f s", args.pulses, time.perf_counter() - t0)
    Path(args.out).write_text(result.tally.to_text())
    if args.tags:
        write_tags(args.tags, result.stream)
    if args.pulses_out:
        write_pulses(args.pulses_out, alice_pulses(cfg, args.seed, args.pulses))
    return EXIT_OK


def _open_channel(args) -> tuple[FramedChannel, socket.socket]:
    if args.listen:
        server = socket.create_server(args.listen)
        host, port = server.getsockname()[:2]
        print(f"listening,{host}:{port}", flush=True)
        server.settimeout(args.timeout)
        try:
            conn, _ = server.accept()
        finally:
            server.close()
    else:
        deadline = time.monotonic() + args.retry_s
        while True:
            try:
                conn = socket.create_connection(args.connect, timeout=args.timeout)
                break
            except ConnectionRefusedError:
                if time.monotonic() >= deadline:
                    raise
                time.sleep(0.05)
    conn.settimeout(args.timeout)
    return FramedChannel.from_socket(conn), conn


def cmd_sift(args) -> int:
    cfg = _config(args.config)
    if not 0.0 <= args.sample_fraction <= 1.0:
        raise InvalidInput("--sample-fraction must be in [0, 1]")
    if args.role == "alice":
        if not args.pulses:
            raise InvalidInput("alice needs --pulses")
        data = read_pulses(args.pulses)
    else:
        if not args.tags:
            raise InvalidInput("bob needs --tags")
        data = read_tags(args.tags)
    channel, conn = _open_channel(args)
    try:
        if args.role == "alice":
            tally = run_alice_endpoint(data, channel, cfg.source, version=args.protocol_version)
        else:
            tally = run_bob_endpoint(data, channel, cfg.source, sample_fraction=args.sample_fraction,
                                     sample_seed=args.sample_seed, version=args.protocol_version)
    finally:
        channel.close()
        conn.close()
    Path(args.out).write_text(tally.to_text())
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = _config(args.config)
    try:
        best = optimize_intensities(cfg)
    except ValueError as exc:
        raise InvalidInput(str(exc)) from None
    _emit([("mu", best.mu), ("nu1", best.nu1), ("nu2", nu2_for(cfg, best.mu)),
           ("predicted_rate", best.predicted_rate)])
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decoyqkd", description="Decoy-state BB84 analysis and simulation")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check a config file and print it normalised")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("analyze", help="security bounds from measured gains")
    s.add_argument("--config", help="session config (default: built-in 20.06 km setup)")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--gains", help="file of 'name = value' gain lines")
    src.add_argument("--from-table1", action="store_true", help="use the built-in 20.06 km measurement")
    src.add_argument("--tally", help="tally file written by 'simulate' or 'sift'")
    s.add_argument("--no-deviations", action="store_true", help="drop all deviations before analysis")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("sweep", help="model rates against fibre length")
    s.add_argument("--config")
    s.add_argument("--from", dest="from_km", type=float, default=0.0)
    s.add_argument("--to", dest="to_km", type=float, default=120.0)
    s.add_argument("--step", dest="step_km", type=float, default=5.0)
    s.add_argument("--out", required=True)
    s.add_argument("--finite-key", action="store_true",
                   help="apply the config's k_sigma deviations (default: asymptotic)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("simulate", help="gate-level Monte Carlo session")
    s.add_argument("--config")
    s.add_argument("--pulses", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="tally output")
    s.add_argument("--tags", help="time-tag output for the receiver")
    s.add_argument("--pulses-out", help="pulse-table output for the sender")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sift", help="one endpoint of a sifting session")
    s.add_argument("--role", choices=("alice", "bob"), required=True)
    where = s.add_mutually_exclusive_group(required=True)
    where.add_argument("--listen", type=_addr, metavar="HOST:PORT")
    where.add_argument("--connect", type=_addr, metavar="HOST:PORT")
    s.add_argument("--pulses", help="pulse table (alice)")
    s.add_argument("--tags", help="time tags (bob)")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--sample-fraction", type=float, default=1.0)
    s.add_argument("--sample-seed", type=int, default=0)
    s.add_argument("--protocol-version", type=int, default=PROTOCOL_VERSION)
    s.add_argument("--timeout", type=float, default=60.0)
    s.add_argument("--retry-s", type=float, default=0.0, help="keep retrying a refused connect")
    s.set_defaults(func=cmd_sift)

    s = sub.add_parser("optimize", help="search signal and decoy intensities")
    s.add_argument("--config")
    s.set_defaults(func=cmd_optimize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ProtocolError as exc:
        name = ""
        if exc.message_type is not None:
            try:
                name = f" [{MessageType(exc.message_type).name}]"
            except ValueError:
                name = f" [0x{exc.message_type:02x}]"
        print(f"protocol error{name}: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (ConfigError, InvalidInput, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
