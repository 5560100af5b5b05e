"""Gate-level Monte Carlo of the sender, fibre and two-detector receiver.

Simulation runs in chunks of gates. For each chunk a stateless pass (parallel
over blocks) decides which detectors see a photon or dark count in each gate.
A sequential pass then walks the chunk applying dead time and afterpulsing,
which carry state from gate to gate. All randomness comes from
:mod:`decoyqkd.rng` keyed by gate index, so results do not depend on the
chunking or on the number of threads.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numba as nb
import numpy as np

from . import rng
from .channel import system_efficiency
from .model import CLASSES, IntensityClass, SessionConfig, SessionTally, validate_config

# numba probes TBB before falling back to another threading layer; the probe is noise here
warnings.filterwarnings("ignore", message="The TBB threading layer", category=nb.NumbaWarning)

AFTERPULSE_SPAN = 32
_MAX_PENDING = 64
_FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
CHUNK_GATES = 1 << 22

# cause codes per detector (2 bits each in the cause byte)
_PHOTON = 1
_DARK = 2


class PulseRecord(NamedTuple):
    gate_index: int
    intensity: IntensityClass
    alice_basis: int
    alice_bit: int


class DetectionRecord(NamedTuple):
    gate_index: int
    detector_id: int
    bob_basis: int
    arrival_offset_s: float


@dataclass
class DetectionStream:
    """Bob's time-tag stream, one entry per gate with a registered click.

    ``detector`` holds the detector credited with the click; for double
    clicks this is the randomly assigned bit value.
    """

    gate: np.ndarray
    detector: np.ndarray
    basis: np.ndarray
    arrival_ps: np.ndarray

    def __len__(self) -> int:
        return int(self.gate.shape[0])

    def __iter__(self) -> Iterator[DetectionRecord]:
        for g, d, b, a in zip(self.gate, self.detector, self.basis, self.arrival_ps):
            yield DetectionRecord(int(g), int(d), int(b), float(a) * 1e-12)

    @classmethod
    def empty(cls) -> DetectionStream:
        return cls(np.zeros(0, np.uint64), np.zeros(0, np.uint8),
                   np.zeros(0, np.uint8), np.zeros(0, np.uint16))


@dataclass
class PulseTable:
    """Alice's per-gate choices for gates ``0 .. n-1``."""

    intensity: np.ndarray
    basis: np.ndarray
    bit: np.ndarray

    def __len__(self) -> int:
        return int(self.intensity.shape[0])

    def __getitem__(self, gate: int) -> PulseRecord:
        return PulseRecord(gate, IntensityClass(int(self.intensity[gate])),
                           int(self.basis[gate]), int(self.bit[gate]))


@dataclass
class SimulationResult:
    tally: SessionTally
    stream: DetectionStream | None


# --- numba kernels -----------------------------------------------------------

@nb.njit(cache=True, inline="always")
def _intensity(u, c0, c01):
    if u < c0:
        return 0
    if u < c01:
        return 1
    return 2


@nb.njit(cache=True, inline="always")
def _jitter_offset(keys, g, centre, sigma):
    if sigma == 0.0:
        return centre
    u1 = rng.uniform(keys[rng.JITTER_A], g)
    u2 = rng.uniform(keys[rng.JITTER_B], g)
    z = math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)
    return centre + sigma * z


@nb.njit(cache=True)
def _gate_cause(keys, g, lam, emis, dark, gw_ps, centre_ps, sigma_ps):
    """Cause byte for one gate: detector 0 in bits 0-1, detector 1 in bits 2-3."""
    u0 = rng.uniform(keys[rng.DET0], g)
    u1 = rng.uniform(keys[rng.DET1], g)
    # cheap rejection: the per-detector photon mean never exceeds lam
    p_max = -math.expm1(-lam)
    floor = p_max + (1.0 - p_max) * dark
    if u0 >= floor and u1 >= floor:
        return 0
    ab = rng.uniform(keys[rng.ALICE_BASIS], g) < 0.5
    abit = rng.uniform(keys[rng.ALICE_BIT], g) < 0.5
    bb = rng.uniform(keys[rng.BOB_BASIS], g) < 0.5
    if ab == bb:
        right = lam * (1.0 - emis)
        wrong = lam * emis
    else:
        right = 0.5 * lam
        wrong = 0.5 * lam
    if abit:
        lam0, lam1 = wrong, right
    else:
        lam0, lam1 = right, wrong
    p0 = -math.expm1(-lam0)
    p1 = -math.expm1(-lam1)
    code0 = 0
    if u0 < p0:
        code0 = _PHOTON
    elif u0 < p0 + (1.0 - p0) * dark:
        code0 = _DARK
    code1 = 0
    if u1 < p1:
        code1 = _PHOTON
    elif u1 < p1 + (1.0 - p1) * dark:
        code1 = _DARK
    if code0 == _PHOTON or code1 == _PHOTON:
        t = _jitter_offset(keys, g, centre_ps, sigma_ps)
        if t < 0.0 or t >= gw_ps:
            # photon missed the gate; fall back to an independent dark trial
            if code0 == _PHOTON:
                code0 = _DARK if rng.uniform(keys[rng.DARK_RETRY0], g) < dark else 0
            if code1 == _PHOTON:
                code1 = _DARK if rng.uniform(keys[rng.DARK_RETRY1], g) < dark else 0
    return code0 | (code1 << 2)


@nb.njit(cache=True, parallel=True)
def _scan_chunk(keys, start, count, c0, c01, lam_by_class, emis, dark,
                gw_ps, centre_ps, sigma_ps, cause, class_counts):
    nblocks = class_counts.shape[0]
    per = (count + nblocks - 1) // nblocks
    for b in nb.prange(nblocks):
        lo = b * per
        hi = min(count, lo + per)
        n0 = 0
        n1 = 0
        n2 = 0
        for i in range(lo, hi):
            g = start + i
            cls = _intensity(rng.uniform(keys[rng.CLASS], g), c0, c01)
            if cls == 0:
                n0 += 1
            elif cls == 1:
                n1 += 1
            else:
                n2 += 1
            cause[i] = _gate_cause(keys, g, lam_by_class[cls], emis, dark,
                                   gw_ps, centre_ps, sigma_ps)
        class_counts[b, 0] = n0
        class_counts[b, 1] = n1
        class_counts[b, 2] = n2


@nb.njit(cache=True)
def _next_pending(pend, npend, d):
    best = -1
    for i in range(npend[d]):
        if best < 0 or pend[d, i] < best:
            best = pend[d, i]
    return best


@nb.njit(cache=True)
def _take_pending(pend, npend, d, g):
    """Remove every pending afterpulse of detector ``d`` at gate ``g``."""
    found = False
    i = 0
    while i < npend[d]:
        if pend[d, i] == g:
            npend[d] -= 1
            pend[d, i] = pend[d, npend[d]]
            found = True
        else:
            i += 1
    return found


@nb.njit(cache=True)
def _register_chunk(keys, start, count, cause, c0, c01, pa, dead, gw_ps, centre_ps, sigma_ps,
                    dead_until, pend, npend, next_ap, tally,
                    out_gate, out_det, out_basis, out_arrival):
    """Apply dead time and afterpulsing to one chunk; returns records written.

    ``tally`` rows are clicks, sifted, errors; columns are intensity classes.
    """
    n_out = 0
    span_norm = 1.0 - 0.5 ** 32
    for i in range(count):
        g = start + i
        c = cause[i]
        ap0 = next_ap[0] == g
        ap1 = next_ap[1] == g
        if c == 0 and not ap0 and not ap1:
            continue
        if ap0:
            _take_pending(pend, npend, 0, g)
            next_ap[0] = _next_pending(pend, npend, 0)
        if ap1:
            _take_pending(pend, npend, 1, g)
            next_ap[1] = _next_pending(pend, npend, 1)
        code0 = c & 3
        code1 = (c >> 2) & 3
        f0 = (code0 != 0 or ap0) and g >= dead_until[0]
        f1 = (code1 != 0 or ap1) and g >= dead_until[1]
        if not (f0 or f1):
            continue
        for d in range(2):
            if (d == 0 and f0) or (d == 1 and f1):
                dead_until[d] = g + dead
                u = rng.uniform(keys[rng.AFTERPULSE0 + d], g)
                if u < pa and npend[d] < pend.shape[1]:
                    v = (u / pa) * span_norm
                    j = int(math.floor(-math.log2(1.0 - v)))
                    if j > 31:
                        j = 31
                    at = g + dead + j
                    pend[d, npend[d]] = at
                    npend[d] += 1
                    if next_ap[d] < 0 or at < next_ap[d]:
                        next_ap[d] = at
        cls = _intensity(rng.uniform(keys[rng.CLASS], g), c0, c01)
        ab = rng.uniform(keys[rng.ALICE_BASIS], g) < 0.5
        abit = rng.uniform(keys[rng.ALICE_BIT], g) < 0.5
        bb = rng.uniform(keys[rng.BOB_BASIS], g) < 0.5
        if f0 and f1:
            bit = rng.uniform(keys[rng.DOUBLE_CLICK], g) < 0.5
        else:
            bit = f1
        if (f0 and code0 == _PHOTON) or (f1 and code1 == _PHOTON):
            t = _jitter_offset(keys, g, centre_ps, sigma_ps)
        else:
            t = rng.uniform(keys[rng.ARRIVAL], g) * gw_ps
        tally[0, cls] += 1
        if ab == bb:
            tally[1, cls] += 1
            if bit != abit:
                tally[2, cls] += 1
        out_gate[n_out] = g
        out_det[n_out] = 1 if bit else 0
        out_basis[n_out] = 1 if bb else 0
        ps = int(math.floor(t))
        out_arrival[n_out] = min(max(ps, 0), 65535)
        n_out += 1
    return n_out


@nb.njit(cache=True)
def _alice_choices(keys, gates, c0, c01, out_cls, out_basis, out_bit):
    for i in range(gates.shape[0]):
        g = gates[i]
        out_cls[i] = _intensity(rng.uniform(keys[rng.CLASS], g), c0, c01)
        out_basis[i] = 1 if rng.uniform(keys[rng.ALICE_BASIS], g) < 0.5 else 0
        out_bit[i] = 1 if rng.uniform(keys[rng.ALICE_BIT], g) < 0.5 else 0


# --- public API --------------------------------------------------------------

def _class_thresholds(cfg: SessionConfig) -> tuple[float, float]:
    d = cfg.source.duty
    return d[0], d[0] + d[1]


def simulate_session(cfg: SessionConfig, seed: int, n_pulses: int,
                     keep_stream: bool = True, chunk_gates: int = CHUNK_GATES) -> SimulationResult:
    """Simulate ``n_pulses`` gates and tally clicks, sifted bits and errors.

    Errors are ground truth over every sifted bit, so ``checked == sifted``.
    The session duration is ``n_pulses / clock_rate``.
    """
    if n_pulses < 1:
        raise ValueError("n_pulses must be at least 1")
    validate_config(cfg)
    det = cfg.detector
    keys = rng.stream_keys(seed)
    c0, c01 = _class_thresholds(cfg)
    eta = system_efficiency(cfg.channel, det)
    lam = np.array([eta * x for x in cfg.source.fluxes], dtype=np.float64)
    gw_ps = det.gate_width_s * 1e12
    centre_ps = 0.5 * gw_ps
    sigma_ps = det.jitter_fwhm_s * 1e12 / _FWHM_PER_SIGMA
    dead = int(det.dead_time_gates)

    chunk = max(1, min(chunk_gates, n_pulses))
    nblocks = max(1, 4 * nb.get_num_threads())
    cause = np.empty(chunk, dtype=np.uint8)
    class_counts = np.zeros((nblocks, 3), dtype=np.int64)
    sent = np.zeros(3, dtype=np.int64)
    tally = np.zeros((3, 3), dtype=np.int64)
    dead_until = np.zeros(2, dtype=np.int64)
    pend = np.zeros((2, _MAX_PENDING), dtype=np.int64)
    npend = np.zeros(2, dtype=np.int64)
    next_ap = np.full(2, -1, dtype=np.int64)
    buf_gate = np.empty(chunk, dtype=np.uint64)
    buf_det = np.empty(chunk, dtype=np.uint8)
    buf_basis = np.empty(chunk, dtype=np.uint8)
    buf_arrival = np.empty(chunk, dtype=np.uint16)
    parts: list[tuple[np.ndarray, ...]] = []

    for start in range(0, n_pulses, chunk):
        count = min(chunk, n_pulses - start)
        _scan_chunk(keys, start, count, c0, c01, lam, det.misalignment_error,
                    det.dark_prob_per_gate, gw_ps, centre_ps, sigma_ps, cause, class_counts)
        sent += class_counts.sum(axis=0)
        n_out = _register_chunk(keys, start, count, cause, c0, c01, det.afterpulse_prob, dead,
                                gw_ps, centre_ps, sigma_ps, dead_until, pend, npend, next_ap,
                                tally, buf_gate, buf_det, buf_basis, buf_arrival)
        if keep_stream and n_out:
            parts.append((buf_gate[:n_out].copy(), buf_det[:n_out].copy(),
                          buf_basis[:n_out].copy(), buf_arrival[:n_out].copy()))

    result_tally = SessionTally(
        pulses_sent=tuple(int(v) for v in sent),
        clicks=tuple(int(v) for v in tally[0]),
        sifted=tuple(int(v) for v in tally[1]),
        errors=tuple(int(v) for v in tally[2]),
        duration_s=n_pulses / cfg.source.clock_rate,
    )
    stream = None
    if keep_stream:
        if parts:
            stream = DetectionStream(*(np.concatenate(col) for col in zip(*parts)))
        else:
            stream = DetectionStream.empty()
    return SimulationResult(result_tally, stream)


def alice_pulses(cfg: SessionConfig, seed: int, n_pulses: int) -> PulseTable:
    """Alice's choices for the gates of :func:`simulate_session` with the same seed."""
    gates = np.arange(n_pulses, dtype=np.uint64)
    out = PulseTable(np.empty(n_pulses, np.uint8), np.empty(n_pulses, np.uint8),
                     np.empty(n_pulses, np.uint8))
    c0, c01 = _class_thresholds(cfg)
    _alice_choices(rng.stream_keys(seed), gates, c0, c01, out.intensity, out.basis, out.bit)
    return out


def min_click_separation(stream) -> int | None:
    """Smallest gate gap between consecutive clicks credited to the same detector.

    Accepts a :class:`DetectionStream` or an iterable of ``DetectionRecord``.
    Returns None when no detector has two clicks.
    """
    if isinstance(stream, DetectionStream):
        gate = stream.gate.astype(np.int64)
        det = stream.detector
    else:
        records = list(stream)
        gate = np.array([r.gate_index for r in records], dtype=np.int64)
        det = np.array([r.detector_id for r in records], dtype=np.uint8)
    best = None
    for d in (0, 1):
        g = np.sort(gate[det == d])
        if g.shape[0] >= 2:
            m = int(np.diff(g).min())
            best = m if best is None else min(best, m)
    return best


# --- arrival-time histograms -------------------------------------------------

@dataclass
class ArrivalHistogram:
    edges_s: np.ndarray
    counts: np.ndarray
    drop_fraction: float
    overlap_fraction: float
    period_s: float
    gate_width_s: float

    @property
    def centres_s(self) -> np.ndarray:
        return 0.5 * (self.edges_s[1:] + self.edges_s[:-1])


HISTOGRAM_BIN_S = 10e-12


def simulate_arrival_histogram(det, clock_rate: float, n_photons: int, seed: int,
                               n_periods: int = 4) -> ArrivalHistogram:
    """Histogram of detected photon arrival times over ``n_periods`` clock cycles.

    Each photon belongs to a uniformly chosen gate and arrives with Gaussian
    jitter about that gate's centre. Photons outside every active gate window
    are dropped. ``overlap_fraction`` is the share of detected photons that
    land in a gate other than their own, i.e. get the wrong clock cycle.
    """
    period = 1.0 / clock_rate
    gw = det.gate_width_s
    sigma = det.jitter_fwhm_s / _FWHM_PER_SIGMA
    edges = np.arange(0.0, n_periods * period + HISTOGRAM_BIN_S / 2, HISTOGRAM_BIN_S)
    if n_photons == 0:
        return ArrivalHistogram(edges, np.zeros(edges.shape[0] - 1, np.int64), 0.0, 0.0, period, gw)
    gen = np.random.default_rng(seed)
    own = gen.integers(0, n_periods, size=n_photons)
    t = own * period + 0.5 * gw + sigma * gen.standard_normal(n_photons)
    slot = np.floor(t / period).astype(np.int64)
    in_window = (t - slot * period < gw) & (slot >= 0) & (slot < n_periods)
    detected = t[in_window]
    counts, _ = np.histogram(detected, bins=edges)
    n_det = detected.shape[0]
    misassigned = int(np.count_nonzero(slot[in_window] != own[in_window]))
    return ArrivalHistogram(
        edges, counts,
        drop_fraction=1.0 - n_det / n_photons,
        overlap_fraction=misassigned / n_det if n_det else 0.0,
        period_s=period, gate_width_s=gw,
    )


def fit_fwhm(hist: ArrivalHistogram) -> float:
    """FWHM of a Gaussian fitted to the histogram folded onto one clock period.

    The model integrates the Gaussian over each bin so the bin width does not
    broaden the estimate.
    """
    from scipy.optimize import curve_fit
    from scipy.special import erf

    width = hist.edges_s[1] - hist.edges_s[0]
    # fold each bin onto the offset from its gate centre
    offsets = (hist.centres_s - 0.5 * hist.gate_width_s + 0.5 * hist.period_s) % hist.period_s \
        - 0.5 * hist.period_s
    grid = np.round(offsets / width).astype(np.int64)
    keys, inverse = np.unique(grid, return_inverse=True)
    folded = np.bincount(inverse, weights=hist.counts).astype(float)
    x = keys * width

    def model(xc, amp, mean, sig):
        s = np.sqrt(2.0) * abs(sig)
        return amp * 0.5 * (erf((xc + width / 2 - mean) / s) - erf((xc - width / 2 - mean) / s))

    peak = folded.max()
    guess_sigma = max(width, math.sqrt(np.average(x ** 2, weights=folded)))
    popt, _ = curve_fit(model, x, folded, p0=(folded.sum(), 0.0, guess_sigma))
    return abs(popt[2]) * _FWHM_PER_SIGMA if peak > 0 else float("nan")


def midpoint_density(hist: ArrivalHistogram) -> float:
    """Counts per bin at the midpoint between the first two gate centres."""
    mid = 0.5 * hist.gate_width_s + 0.5 * hist.period_s
    idx = int(np.searchsorted(hist.edges_s, mid, side="right") - 1)
    return float(hist.counts[idx])


# --- file formats ------------------------------------------------------------

TAG_MAGIC = b"QKDT"
TAG_VERSION = 1
TAG_DTYPE = np.dtype([("gate", "<u8"), ("detector", "u1"), ("basis", "u1"),
                      ("arrival_ps", "<u2"), ("reserved", "<u4")])
PULSE_MAGIC = b"QKDP"
PULSE_VERSION = 1


def write_tags(path, stream: DetectionStream) -> None:
    rec = np.zeros(len(stream), dtype=TAG_DTYPE)
    rec["gate"] = stream.gate
    rec["detector"] = stream.detector
    rec["basis"] = stream.basis
    rec["arrival_ps"] = stream.arrival_ps
    with open(path, "wb") as fh:
        fh.write(TAG_MAGIC + bytes([TAG_VERSION, 0, 0, 0]))
        fh.write(rec.tobytes())


def read_tags(path) -> DetectionStream:
    data = Path(path).read_bytes()
    if data[:4] != TAG_MAGIC or len(data) < 8:
        raise ValueError(f"{path}: not a time-tag file")
    if data[4] != TAG_VERSION:
        raise ValueError(f"{path}: unsupported tag file version {data[4]}")
    body = data[8:]
    if len(body) % TAG_DTYPE.itemsize:
        raise ValueError(f"{path}: truncated record")
    rec = np.frombuffer(body, dtype=TAG_DTYPE)
    return DetectionStream(rec["gate"].copy(), rec["detector"].copy(),
                           rec["basis"].copy(), rec["arrival_ps"].copy())


def write_pulses(path, table: PulseTable) -> None:
    """One byte per gate: intensity in bits 0-1, basis in bit 2, bit value in bit 3."""
    packed = (table.intensity.astype(np.uint8)
              | (table.basis.astype(np.uint8) << 2)
              | (table.bit.astype(np.uint8) << 3))
    with open(path, "wb") as fh:
        fh.write(PULSE_MAGIC + bytes([PULSE_VERSION, 0, 0, 0]))
        fh.write(struct.pack("<Q", len(table)))
        fh.write(packed.tobytes())


def read_pulses(path) -> PulseTable:
    data = Path(path).read_bytes()
    if data[:4] != PULSE_MAGIC or len(data) < 16:
        raise ValueError(f"{path}: not a pulse file")
    if data[4] != PULSE_VERSION:
        raise ValueError(f"{path}: unsupported pulse file version {data[4]}")
    (n,) = struct.unpack("<Q", data[8:16])
    packed = np.frombuffer(data, dtype=np.uint8, offset=16)
    if packed.shape[0] != n:
        raise ValueError(f"{path}: expected {n} gates, found {packed.shape[0]}")
    return PulseTable(packed & 3, (packed >> 2) & 1, (packed >> 3) & 1)


__all__ = [
    "CLASSES", "AFTERPULSE_SPAN", "DetectionRecord", "DetectionStream", "PulseRecord",
    "PulseTable", "SimulationResult", "simulate_session", "alice_pulses",
    "min_click_separation", "simulate_arrival_histogram", "fit_fwhm", "midpoint_density",
    "write_tags", "read_tags", "write_pulses", "read_pulses",
]
