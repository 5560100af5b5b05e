"""Closed-form channel and threshold-detector model for distance sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .decoy import analyze
from .errors import NoKeyError
from .model import ChannelConfig, DetectorConfig, GainStatistics, SessionConfig


def system_efficiency(channel: ChannelConfig, det: DetectorConfig) -> float:
    """Probability that a photon leaving the sender produces a detection."""
    receiver = det.detector_efficiency / det.receiver_loss_factor
    return receiver * 10.0 ** (-channel.length_km * channel.loss_db_per_km / 10.0)


@dataclass(frozen=True)
class ExpectedStatistics:
    gain_mu: float
    gain_nu1: float
    gain_nu2: float
    qber_mu: float
    y0_background: float

    @property
    def gains(self) -> tuple[float, float, float]:
        return (self.gain_mu, self.gain_nu1, self.gain_nu2)


def expected_statistics(cfg: SessionConfig) -> ExpectedStatistics:
    """Expected per-class gains and signal QBER at ``cfg.channel.length_km``.

    Background yield is two detectors' worth of dark counts. Afterpulsing
    scales every gain by (1 + p_a) and adds random-bit clicks to the QBER.
    """
    det = cfg.detector
    eta = system_efficiency(cfg.channel, det)
    y0 = 2.0 * det.dark_prob_per_gate
    pa = det.afterpulse_prob

    def no_click(x: float) -> float:
        return (1.0 - y0) * math.exp(-eta * x)

    src = cfg.source
    gain_mu, gain_nu1, gain_nu2 = (min(1.0, (1.0 - no_click(x)) * (1.0 + pa)) for x in src.fluxes)
    if gain_mu > 0:
        wrong = (
            0.5 * y0
            + det.misalignment_error * (1.0 - math.exp(-eta * src.mu))
            + 0.5 * pa * (1.0 - no_click(src.mu))
        )
        qber = min(1.0, wrong / gain_mu)
    else:
        qber = 0.0
    return ExpectedStatistics(gain_mu, gain_nu1, gain_nu2, qber, y0)


def expected_gain_statistics(cfg: SessionConfig) -> GainStatistics:
    """Model gains with the binomial deviations a session of ``cfg`` would carry."""
    stats = expected_statistics(cfg)
    src = cfg.source
    k = cfg.k_sigma
    n = [src.clock_rate * cfg.duration_s * d for d in src.duty]

    def dev(p, count):
        if k == 0 or count <= 0:
            return 0.0
        return k * math.sqrt(p * (1.0 - p) / count)

    n_sifted = 0.5 * stats.gain_mu * n[0]
    return GainStatistics(
        q_mu=stats.gain_mu, q_nu1=stats.gain_nu1, q_nu2=stats.gain_nu2, eps_mu=stats.qber_mu,
        dev_q_mu=dev(stats.gain_mu, n[0]),
        dev_q_nu1=dev(stats.gain_nu1, n[1]),
        dev_q_nu2=dev(stats.gain_nu2, n[2]),
        dev_eps_mu=dev(stats.qber_mu, n_sifted),
    )


@dataclass(frozen=True)
class SweepPoint:
    distance_km: float
    raw_bps: float
    secure_bps: float
    qber: float


def rate_at(cfg: SessionConfig) -> SweepPoint:
    stats = expected_statistics(cfg)
    bounds = analyze(expected_gain_statistics(cfg), cfg)
    return SweepPoint(cfg.channel.length_km, bounds.raw_rate_bps, bounds.secure_rate_bps, stats.qber_mu)


def distance_grid(from_km: float, to_km: float, step_km: float) -> list[float]:
    if not 0 <= from_km <= to_km:
        raise ValueError(f"need 0 <= from <= to, got {from_km}..{to_km}")
    if not step_km > 0:
        raise ValueError("step must be positive")
    count = int(math.floor((to_km - from_km) / step_km + 1e-9)) + 1
    return [from_km + i * step_km for i in range(count)]


def rate_vs_distance(cfg: SessionConfig, from_km: float, to_km: float,
                     step_km: float) -> list[SweepPoint]:
    return [rate_at(cfg.at_distance(d)) for d in distance_grid(from_km, to_km, step_km)]


def find_cutoff_distance(cfg: SessionConfig, max_km: float = 400.0, tol_km: float = 0.1) -> float:
    """Largest fibre length (to within ``tol_km``) that still yields a secure key.

    Returns ``max_km`` when the rate is still positive there.

    Raises
    ------
    NoKeyError
        If no key can be formed even at zero distance.
    """
    if rate_at(cfg.at_distance(0.0)).secure_bps <= 0:
        raise NoKeyError("secure rate is zero at 0 km")
    if rate_at(cfg.at_distance(max_km)).secure_bps > 0:
        return max_km
    lo, hi = 0.0, max_km
    while hi - lo > tol_km:
        mid = 0.5 * (lo + hi)
        if rate_at(cfg.at_distance(mid)).secure_bps > 0:
            lo = mid
        else:
            hi = mid
    return lo


def expected_gated_statistics(cfg: SessionConfig, span: int = 32) -> ExpectedStatistics:
    """Steady-state expectations for the gate-level receiver dynamics.

    Unlike :func:`expected_statistics`, afterpulses here are triggered by any
    earlier avalanche and so land on gates of every intensity class, and a
    detector misses gates while it is dead. This matches the behaviour of
    :func:`decoyqkd.pulsesim.simulate_session` to first order in the
    per-gate click probability, which is what the Monte Carlo is checked against.
    """
    det = cfg.detector
    src = cfg.source
    eta = system_efficiency(cfg.channel, det)
    dark = det.dark_prob_per_gate
    pa = det.afterpulse_prob
    dead = int(det.dead_time_gates)
    emis = det.misalignment_error
    if det.jitter_fwhm_s > 0:
        sigma = det.jitter_fwhm_s / (2.0 * math.sqrt(2.0 * math.log(2.0)))
        in_gate = math.erf(det.gate_width_s / (2.0 * math.sqrt(2.0) * sigma))
    else:
        in_gate = 1.0
    norm = 1.0 - 0.5 ** span
    weights = [0.5 ** (j + 1) / norm for j in range(span)]

    def cause(lam):
        return 1.0 - (1.0 - (-math.expm1(-lam)) * in_gate) * (1.0 - dark)

    # per-class cause probabilities: (right, wrong) for matched bases, half otherwise
    causes = [(cause(eta * x * (1 - emis)), cause(eta * x * emis), cause(eta * x / 2))
              for x in src.fluxes]

    def receiver_state(rate):
        live = 1.0 - (dead - 1) * rate
        lost = sum(w * min(dead - 1, j) * rate for j, w in enumerate(weights))
        return live, pa * rate * (1.0 - lost)

    def fire(c, live, landing):
        return live * c + landing * (1.0 - c)

    # fixed point for the mean per-detector firing probability per gate
    rate = 0.0
    for _ in range(200):
        live, landing = receiver_state(rate)
        new = sum(d * 0.25 * (fire(r, live, landing) + fire(w, live, landing)
                              + 2.0 * fire(h, live, landing))
                  for d, (r, w, h) in zip(src.duty, causes))
        converged = abs(new - rate) < 1e-16
        rate = new
        if converged:
            break
    live, landing = receiver_state(rate)

    gains = []
    qber = 0.0
    for i, (r, w, h) in enumerate(causes):
        fr, fw, fh = (fire(c, live, landing) for c in (r, w, h))
        matched = 1.0 - (1.0 - fr) * (1.0 - fw)
        gains.append(0.5 * matched + 0.5 * (1.0 - (1.0 - fh) ** 2))
        if i == 0 and matched > 0:
            qber = (fw * (1.0 - fr) + 0.5 * fr * fw) / matched
    return ExpectedStatistics(gains[0], gains[1], gains[2], qber, 2.0 * dark)
