"""Three-intensity decoy-state bounds and finite-key worst-casing.

The bound functions take scalar floats and return clamped probabilities.
:func:`analyze` evaluates the whole chain at every sign corner of the
measured statistics and keeps the most pessimistic result.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

from .errors import BoundValidityError, NoSinglePhotonError, TruncationError
from .model import GainStatistics, SessionConfig

POISSON_TAIL = 1e-12


def binary_entropy(x: float) -> float:
    """Binary Shannon entropy in bits, with 0*log2(0) taken as 0."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy undefined for {x!r}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def y0_lower(nu1: float, nu2: float, q_nu1: float, q_nu2: float) -> float:
    """Lower bound on the vacuum yield from the two decoy gains."""
    if nu1 == nu2:
        raise ZeroDivisionError("nu1 == nu2: decoy intensities must differ")
    if not nu1 > nu2 >= 0:
        raise BoundValidityError(f"need nu1 > nu2 >= 0, got nu1={nu1}, nu2={nu2}")
    y0 = (nu1 * q_nu2 * math.exp(nu2) - nu2 * q_nu1 * math.exp(nu1)) / (nu1 - nu2)
    return max(0.0, y0)


def q1_lower(mu: float, nu1: float, nu2: float,
             q_mu: float, q_nu1: float, q_nu2: float, y0_l: float) -> float:
    """Lower bound on the single-photon gain of signal pulses."""
    if not nu1 > nu2 >= 0:
        raise BoundValidityError(f"need nu1 > nu2 >= 0, got nu1={nu1}, nu2={nu2}")
    if not mu > nu1 + nu2:
        raise BoundValidityError(f"need mu > nu1 + nu2, got mu={mu}, nu1+nu2={nu1 + nu2}")
    prefactor = mu * mu * math.exp(-mu) / (mu * nu1 - mu * nu2 - nu1 * nu1 + nu2 * nu2)
    bracket = (
        q_nu1 * math.exp(nu1)
        - q_nu2 * math.exp(nu2)
        - (nu1 * nu1 - nu2 * nu2) / (mu * mu) * (q_mu * math.exp(mu) - y0_l)
    )
    return min(1.0, max(0.0, prefactor * bracket))


def eps1_upper(mu: float, eps_mu: float, q_mu: float, y0_l: float, q1_l: float) -> float:
    """Upper bound on the single-photon QBER, clamped to [0, 1/2].

    Raises
    ------
    NoSinglePhotonError
        If ``q1_l`` is not positive; the secure rate is then zero.
    """
    if not q1_l > 0:
        raise NoSinglePhotonError("single-photon gain bound is zero")
    e1 = (eps_mu * q_mu * math.exp(mu) - 0.5 * y0_l) / (q1_l * math.exp(mu))
    return min(0.5, max(0.0, e1))


def secure_rate(q1_l: float, eps1_u: float, gains: GainStatistics, cfg: SessionConfig,
                n_signal: float | None = None, duration_s: float | None = None) -> float:
    """Secure key rate in bit/s, clamped at zero.

    ``n_signal`` and ``duration_s`` default to the values implied by ``cfg``
    (clock rate x duration x signal duty cycle); pass them from a tally to
    use the counted pulses instead.
    """
    n_mu, t = _signal_budget(cfg, n_signal, duration_s)
    leak = gains.q_mu * cfg.f_ec * binary_entropy(min(1.0, max(0.0, gains.eps_mu)))
    gain = q1_l * (1.0 - binary_entropy(min(0.5, max(0.0, eps1_u))))
    return max(0.0, 0.5 * n_mu * (gain - leak) / t)


def raw_rate(gains: GainStatistics, cfg: SessionConfig,
             n_signal: float | None = None, duration_s: float | None = None) -> float:
    """Sifted signal bit rate: half the signal clicks per second."""
    n_mu, t = _signal_budget(cfg, n_signal, duration_s)
    return 0.5 * n_mu * gains.q_mu / t


def _signal_budget(cfg, n_signal, duration_s):
    t = cfg.duration_s if duration_s is None else duration_s
    if n_signal is None:
        n_signal = cfg.source.clock_rate * t * cfg.source.duty[0]
    return n_signal, t


@dataclass(frozen=True)
class SecurityBounds:
    y0_lower: float
    q1_lower: float
    eps1_upper: float
    secure_rate_bps: float
    raw_rate_bps: float
    corner: tuple[int, int, int, int] = (0, 0, 0, 0)


def _evaluate(gains: GainStatistics, cfg: SessionConfig, n_signal, duration_s) -> SecurityBounds:
    src = cfg.source
    y0 = y0_lower(src.nu1, src.nu2, gains.q_nu1, gains.q_nu2)
    q1 = q1_lower(src.mu, src.nu1, src.nu2, gains.q_mu, gains.q_nu1, gains.q_nu2, y0)
    try:
        e1 = eps1_upper(src.mu, gains.eps_mu, gains.q_mu, y0, q1)
    except NoSinglePhotonError:
        rate = 0.0
        e1 = 0.5
    else:
        rate = secure_rate(q1, e1, gains, cfg, n_signal, duration_s)
    raw = raw_rate(gains, cfg, n_signal, duration_s)
    return SecurityBounds(y0, q1, e1, rate, raw)


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def analyze(gains: GainStatistics, cfg: SessionConfig,
            n_signal: float | None = None, duration_s: float | None = None) -> SecurityBounds:
    """Worst-cased security bounds over the 16 deviation sign corners.

    Each of Q_mu, Q_nu1, Q_nu2 and eps_mu is shifted by +/- its deviation
    (clamped to [0, 1]) and the full bound chain is evaluated; the corner with
    the lowest secure rate is returned. Ties keep the first corner in
    lexicographic (-1 before +1) order, so with zero deviations the result is
    the central-value evaluation.
    """
    central = gains.central
    devs = gains.deviations
    worst: SecurityBounds | None = None
    for signs in itertools.product((-1, 1), repeat=4):
        shifted = [_clamp01(c + s * d) for c, s, d in zip(central, signs, devs)]
        bounds = _evaluate(GainStatistics(*shifted), cfg, n_signal, duration_s)
        if worst is None or bounds.secure_rate_bps < worst.secure_rate_bps:
            worst = SecurityBounds(
                bounds.y0_lower, bounds.q1_lower, bounds.eps1_upper,
                bounds.secure_rate_bps, bounds.raw_rate_bps, signs,
            )
        if not any(devs):
            break
    # Report the raw rate at the measured central gain, not at a corner.
    raw = raw_rate(gains, cfg, n_signal, duration_s)
    return SecurityBounds(worst.y0_lower, worst.q1_lower, worst.eps1_upper,
                          worst.secure_rate_bps, raw, worst.corner)


# --- exact Poisson-mixture oracle -------------------------------------------

@dataclass(frozen=True)
class YieldModel:
    """Photon-number resolved yields Y_n and error rates e_n, n = 0..nmax."""

    yields: Sequence[float]
    error_rates: Sequence[float]

    def __post_init__(self):
        if len(self.yields) != len(self.error_rates):
            raise ValueError("yields and error_rates must have equal length")
        if len(self.yields) < 3:
            raise ValueError("need at least Y_0..Y_2")
        for v in (*self.yields, *self.error_rates):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{v!r} is not a probability")

    @property
    def nmax(self) -> int:
        return len(self.yields) - 1


def poisson_tail(n: int, flux: float) -> float:
    """P(N > n) for N ~ Poisson(flux), summed term by term from n + 1.

    Summing the tail directly avoids the cancellation in 1 - cdf.
    """
    if flux == 0.0:
        return 0.0
    k = n + 1
    term = math.exp(-flux + k * math.log(flux) - math.lgamma(k + 1))
    total = 0.0
    while term > 0.0 and (k <= flux or term > 1e-17 * total):
        total += term
        k += 1
        term *= flux / k
    return total


def poisson_cutoff(flux: float, tail: float = POISSON_TAIL) -> int:
    """Smallest nmax >= 2 whose Poisson tail P(N > nmax) is below ``tail``."""
    n = 2
    while poisson_tail(n, flux) >= tail:
        n += 1
    return n


def exact_gains(model: YieldModel, flux: float) -> tuple[float, float]:
    """Gain and error-weighted gain of a Poisson source with mean ``flux``.

    Returns ``(sum p_n Y_n, sum p_n Y_n e_n)`` with ``p_n`` the Poisson weights.
    """
    if flux < 0:
        raise ValueError("flux must be non-negative")
    tail = poisson_tail(model.nmax, flux)
    if tail >= POISSON_TAIL:
        raise TruncationError(
            f"nmax={model.nmax} leaves Poisson tail {tail:.3g} at flux {flux}"
        )
    gain = 0.0
    err = 0.0
    weight = math.exp(-flux)
    for n, (y, e) in enumerate(zip(model.yields, model.error_rates)):
        if n > 0:
            weight *= flux / n
        gain += weight * y
        err += weight * y * e
    return gain, err
