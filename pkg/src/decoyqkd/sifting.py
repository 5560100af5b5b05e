"""Two-party sifting over a reliable byte stream.

Frames are ``type (1 byte) | length (4 bytes, little-endian) | payload``.
Bob announces his detected gates and bases, Alice answers with her bases and
intensity classes for exactly those gates, Bob discloses bit values for the
checked subset of sifted bits, and both sides agree on a :class:`SessionTally`.

Message order::

    Alice -> HELLO           Bob -> HELLO
    Bob   -> DETECTIONS
    Alice -> BASIS_REVEAL, INTENSITY_REVEAL
    Bob   -> ERROR_SAMPLE
    Alice -> TALLY_REPORT    Bob -> TALLY_REPORT (echo)
    Alice -> BYE             Bob -> BYE
"""

from __future__ import annotations

import socket
import struct
import threading
from enum import IntEnum

import numpy as np

from .errors import ConfigError, ProtocolError
from .model import SessionTally, SourceConfig, validate_source
from .pulsesim import DetectionStream, PulseTable

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 1 << 30
_HEADER = struct.Struct("<BI")
_HELLO = struct.Struct("<B8d")
_COUNT = struct.Struct("<Q")


class MessageType(IntEnum):
    HELLO = 0x01
    DETECTIONS = 0x02
    BASIS_REVEAL = 0x03
    INTENSITY_REVEAL = 0x04
    ERROR_SAMPLE = 0x05
    TALLY_REPORT = 0x06
    BYE = 0x07


class FramedChannel:
    """Frame reader/writer over a pair of binary file objects."""

    def __init__(self, rfile, wfile, sock: socket.socket | None = None):
        self.rfile = rfile
        self.wfile = wfile
        self.sock = sock

    @classmethod
    def from_socket(cls, sock: socket.socket) -> FramedChannel:
        return cls(sock.makefile("rb"), sock.makefile("wb"), sock)

    def send(self, mtype: MessageType, payload: bytes = b"") -> None:
        try:
            self.wfile.write(_HEADER.pack(int(mtype), len(payload)))
            self.wfile.write(payload)
            self.wfile.flush()
        except (OSError, ValueError) as exc:
            raise ProtocolError(f"connection lost while sending {mtype.name}: {exc}", mtype) from None

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self.rfile.read(remaining)
            if not chunk:
                break
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv(self, expected: MessageType) -> bytes:
        header = self._read_exact(_HEADER.size)
        if len(header) < _HEADER.size:
            raise ProtocolError(f"connection closed while waiting for {expected.name}")
        code, length = _HEADER.unpack(header)
        try:
            mtype = MessageType(code)
        except ValueError:
            raise ProtocolError(f"unknown message type 0x{code:02x}", code) from None
        if mtype != expected:
            raise ProtocolError(f"expected {expected.name}, got {mtype.name}", code)
        if length > MAX_PAYLOAD:
            raise ProtocolError(f"{mtype.name} frame length {length} exceeds limit", code)
        payload = self._read_exact(length)
        if len(payload) != length:
            raise ProtocolError(f"{mtype.name} frame truncated: {len(payload)} of {length} bytes", code)
        return payload

    def close(self) -> None:
        for f in (self.wfile, self.rfile):
            try:
                f.close()
            except OSError:
                pass
        if self.sock is not None:
            # the peer must see EOF even while the caller still holds the socket
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


# --- payload codecs ----------------------------------------------------------

def encode_hello(source: SourceConfig, version: int = PROTOCOL_VERSION) -> bytes:
    return _HELLO.pack(version, source.clock_rate, source.mu, source.nu1, source.nu2,
                       *source.duty, source.extinction_db)


def decode_hello(payload: bytes) -> tuple[int, SourceConfig]:
    if len(payload) != _HELLO.size:
        raise ProtocolError(f"HELLO payload must be {_HELLO.size} bytes, got {len(payload)}",
                            MessageType.HELLO)
    v = _HELLO.unpack(payload)
    return v[0], SourceConfig(clock_rate=v[1], mu=v[2], nu1=v[3], nu2=v[4],
                              duty=(v[5], v[6], v[7]), extinction_db=v[8])


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(np.asarray(bits, dtype=np.uint8), bitorder="little").tobytes()


def _unpack_bits(data: bytes, n: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n, bitorder="little")


def _packed_len(n: int) -> int:
    return (n + 7) // 8


def _read_count(payload: bytes, mtype: MessageType, offset: int = 0) -> int:
    if len(payload) < offset + _COUNT.size:
        raise ProtocolError(f"{mtype.name} payload too short for count prefix", mtype)
    return _COUNT.unpack_from(payload, offset)[0]


def encode_bits(bits) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    return _COUNT.pack(bits.shape[0]) + _pack_bits(bits)


def decode_bits(payload: bytes, mtype: MessageType, expect: int | None = None) -> np.ndarray:
    n = _read_count(payload, mtype)
    if expect is not None and n != expect:
        raise ProtocolError(f"{mtype.name} carries {n} entries, expected {expect}", mtype)
    if len(payload) != _COUNT.size + _packed_len(n):
        raise ProtocolError(f"{mtype.name} payload length does not match count {n}", mtype)
    return _unpack_bits(payload[_COUNT.size:], n)


def encode_detections(gates: np.ndarray, bases: np.ndarray) -> bytes:
    gates = np.asarray(gates, dtype="<u8")
    return _COUNT.pack(gates.shape[0]) + gates.tobytes() + _pack_bits(bases)


def decode_detections(payload: bytes) -> tuple[np.ndarray, np.ndarray]:
    mt = MessageType.DETECTIONS
    n = _read_count(payload, mt)
    if len(payload) != _COUNT.size + 8 * n + _packed_len(n):
        raise ProtocolError(f"DETECTIONS payload length does not match count {n}", mt)
    gates = np.frombuffer(payload, dtype="<u8", count=n, offset=_COUNT.size)
    bases = _unpack_bits(payload[_COUNT.size + 8 * n:], n)
    return gates, bases


def encode_intensities(classes) -> bytes:
    classes = np.asarray(classes, dtype=np.uint8)
    return _COUNT.pack(classes.shape[0]) + classes.tobytes()


def decode_intensities(payload: bytes, expect: int) -> np.ndarray:
    mt = MessageType.INTENSITY_REVEAL
    n = _read_count(payload, mt)
    if n != expect or len(payload) != _COUNT.size + n:
        raise ProtocolError(f"INTENSITY_REVEAL carries {n} entries, expected {expect}", mt)
    classes = np.frombuffer(payload, dtype=np.uint8, offset=_COUNT.size)
    if np.any(classes > 2):
        raise ProtocolError("INTENSITY_REVEAL contains an unknown intensity class", mt)
    return classes


def encode_error_sample(mask: np.ndarray, disclosed_bits: np.ndarray) -> bytes:
    """Sifted-position mask followed by the bit values at masked positions only."""
    return encode_bits(mask) + encode_bits(disclosed_bits)


def decode_error_sample(payload: bytes, n_sifted: int) -> tuple[np.ndarray, np.ndarray]:
    mt = MessageType.ERROR_SAMPLE
    n = _read_count(payload, mt)
    if n != n_sifted:
        raise ProtocolError(f"ERROR_SAMPLE covers {n} sifted bits, expected {n_sifted}", mt)
    split = _COUNT.size + _packed_len(n)
    mask = decode_bits(payload[:split], mt)
    bits = decode_bits(payload[split:], mt, expect=int(mask.sum()))
    return mask, bits


# --- session logic -----------------------------------------------------------

def _check_hello(payload: bytes, own: SourceConfig, version: int) -> None:
    peer_version, peer = decode_hello(payload)
    if peer_version != version:
        raise ProtocolError(f"protocol version mismatch: peer {peer_version}, local {version}",
                            MessageType.HELLO)
    try:
        validate_source(peer)
    except ConfigError as exc:
        raise ProtocolError(f"peer session parameters invalid: {exc}", MessageType.HELLO) from None
    if min(peer.duty) <= 0:
        raise ProtocolError("every intensity class needs a non-zero duty cycle", MessageType.HELLO)
    if encode_hello(peer, version) != encode_hello(own, version):
        raise ProtocolError("session parameters differ between peers", MessageType.HELLO)


def _counts_by_class(classes: np.ndarray, mask: np.ndarray | None = None) -> tuple[int, int, int]:
    sel = classes if mask is None else classes[mask.astype(bool)]
    return tuple(int(v) for v in np.bincount(sel, minlength=3)[:3])


def run_bob_endpoint(stream: DetectionStream, channel: FramedChannel, source: SourceConfig,
                     sample_fraction: float = 1.0, sample_seed: int = 0,
                     version: int = PROTOCOL_VERSION) -> SessionTally:
    """Bob's side of a sifting session; returns the agreed tally.

    All sifted decoy bits are disclosed for error estimation, plus a random
    ``sample_fraction`` of the sifted signal bits.
    """
    if not 0.0 <= sample_fraction <= 1.0:
        raise ValueError("sample_fraction must be in [0, 1]")
    try:
        _check_hello(channel.recv(MessageType.HELLO), source, version)
        channel.send(MessageType.HELLO, encode_hello(source, version))

        order = np.argsort(stream.gate, kind="stable")
        gates = stream.gate[order]
        if gates.shape[0] > 1 and np.any(np.diff(gates.astype(np.int64)) <= 0):
            raise ValueError("detection stream has repeated gate indices")
        bases = stream.basis[order]
        bits = stream.detector[order]
        channel.send(MessageType.DETECTIONS, encode_detections(gates, bases))

        alice_bases = decode_bits(channel.recv(MessageType.BASIS_REVEAL),
                                  MessageType.BASIS_REVEAL, expect=gates.shape[0])
        classes = decode_intensities(channel.recv(MessageType.INTENSITY_REVEAL), gates.shape[0])

        sifted = alice_bases == bases
        sifted_classes = classes[sifted]
        disclose = sifted_classes != 0
        signal = ~disclose
        if sample_fraction >= 1.0:
            disclose |= signal
        elif sample_fraction > 0.0:
            pick = np.random.default_rng(sample_seed).random(int(signal.sum())) < sample_fraction
            disclose[np.flatnonzero(signal)[pick]] = True
        channel.send(MessageType.ERROR_SAMPLE,
                     encode_error_sample(disclose, bits[sifted][disclose]))

        reported = _decode_tally(channel.recv(MessageType.TALLY_REPORT))
        own_clicks = _counts_by_class(classes)
        own_sifted = _counts_by_class(classes, sifted)
        own_checked = _counts_by_class(sifted_classes, disclose)
        for name, mine, theirs in (("clicks", own_clicks, reported.clicks),
                                   ("sifted", own_sifted, reported.sifted),
                                   ("checked", own_checked, reported.checked)):
            if tuple(mine) != tuple(theirs):
                raise ProtocolError(f"tally mismatch in {name}: local {mine}, peer {theirs}",
                                    MessageType.TALLY_REPORT)
        channel.send(MessageType.TALLY_REPORT, reported.to_bytes())
        channel.recv(MessageType.BYE)
        channel.send(MessageType.BYE)
        return reported
    except ProtocolError:
        channel.close()
        raise


def run_alice_endpoint(pulses: PulseTable, channel: FramedChannel, source: SourceConfig,
                       version: int = PROTOCOL_VERSION) -> SessionTally:
    """Alice's side of a sifting session; returns the agreed tally.

    Alice reveals bases and intensities only for the gates Bob reports and
    counts errors among the bits Bob discloses.
    """
    try:
        channel.send(MessageType.HELLO, encode_hello(source, version))
        _check_hello(channel.recv(MessageType.HELLO), source, version)

        gates, bob_bases = decode_detections(channel.recv(MessageType.DETECTIONS))
        n_sent = len(pulses)
        if gates.shape[0]:
            if np.any(np.diff(gates.astype(np.int64)) <= 0):
                raise ProtocolError("DETECTIONS gate indices not strictly increasing",
                                    MessageType.DETECTIONS)
            if int(gates[-1]) >= n_sent:
                raise ProtocolError(f"gate {int(gates[-1])} was never sent ({n_sent} pulses)",
                                    MessageType.DETECTIONS)
        idx = gates.astype(np.int64)
        classes = pulses.intensity[idx].astype(np.uint8)
        a_bases = pulses.basis[idx].astype(np.uint8)
        a_bits = pulses.bit[idx].astype(np.uint8)
        channel.send(MessageType.BASIS_REVEAL, encode_bits(a_bases))
        channel.send(MessageType.INTENSITY_REVEAL, encode_intensities(classes))

        sifted = a_bases == bob_bases
        n_sifted = int(sifted.sum())
        mask, bob_bits = decode_error_sample(channel.recv(MessageType.ERROR_SAMPLE), n_sifted)
        mask = mask.astype(bool)
        sifted_classes = classes[sifted]
        if np.any(~mask & (sifted_classes != 0)):
            raise ProtocolError("decoy bits must all be disclosed", MessageType.ERROR_SAMPLE)
        wrong = a_bits[sifted][mask] != bob_bits
        checked_classes = sifted_classes[mask]

        tally = SessionTally(
            pulses_sent=_counts_by_class(pulses.intensity.astype(np.int64)),
            clicks=_counts_by_class(classes),
            sifted=_counts_by_class(sifted_classes),
            errors=_counts_by_class(checked_classes, wrong),
            duration_s=n_sent / source.clock_rate,
            checked=_counts_by_class(checked_classes),
        )
        channel.send(MessageType.TALLY_REPORT, tally.to_bytes())
        echo = channel.recv(MessageType.TALLY_REPORT)
        if echo != tally.to_bytes():
            raise ProtocolError("peer echoed a different tally", MessageType.TALLY_REPORT)
        channel.send(MessageType.BYE)
        channel.recv(MessageType.BYE)
        return tally
    except ProtocolError:
        channel.close()
        raise


def _decode_tally(payload: bytes) -> SessionTally:
    try:
        tally = SessionTally.from_bytes(payload)
    except ValueError as exc:
        raise ProtocolError(str(exc), MessageType.TALLY_REPORT) from None
    if not tally.is_consistent():
        raise ProtocolError("reported tally violates count ordering", MessageType.TALLY_REPORT)
    return tally


def loopback_session(pulses: PulseTable, stream: DetectionStream, source: SourceConfig,
                     **bob_kwargs) -> tuple[SessionTally, SessionTally]:
    """Run both endpoints in-process over a socket pair; returns (alice, bob) tallies."""
    a_sock, b_sock = socket.socketpair()
    result: dict[str, object] = {}

    def alice():
        try:
            result["alice"] = run_alice_endpoint(pulses, FramedChannel.from_socket(a_sock), source)
        except Exception as exc:  # surfaced to the caller below
            result["alice_error"] = exc
        finally:
            a_sock.close()

    worker = threading.Thread(target=alice, name="alice-endpoint")
    worker.start()
    try:
        bob = run_bob_endpoint(stream, FramedChannel.from_socket(b_sock), source, **bob_kwargs)
    finally:
        b_sock.close()
        worker.join()
    if "alice_error" in result:
        raise result["alice_error"]
    return result["alice"], bob
