"""Domain types, configuration handling and tally-to-gain conversion.

Units are fixed throughout: seconds, hertz, kilometres, decibels, and
dimensionless probabilities / mean photon numbers.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields, replace
from enum import IntEnum
from pathlib import Path

from .errors import ConfigError


class IntensityClass(IntEnum):
    SIGNAL = 0
    DECOY1 = 1
    DECOY2 = 2

    @property
    def label(self) -> str:
        return self.name.lower()


CLASSES = tuple(IntensityClass)


@dataclass(frozen=True)
class SourceConfig:
    clock_rate: float = 1.036e9
    mu: float = 0.55
    nu1: float = 0.10
    nu2: float = 7.5e-4
    duty: tuple[float, float, float] = (0.80, 0.16, 0.04)
    extinction_db: float = 29.0

    @property
    def fluxes(self) -> tuple[float, float, float]:
        return (self.mu, self.nu1, self.nu2)


@dataclass(frozen=True)
class ChannelConfig:
    length_km: float = 20.06
    loss_db_per_km: float = 0.20


@dataclass(frozen=True)
class DetectorConfig:
    detector_efficiency: float = 0.10
    receiver_loss_factor: float = 2.0
    dark_prob_per_gate: float = 6.8e-6
    afterpulse_prob: float = 0.047
    dead_time_gates: int = 2
    gate_width_s: float = 0.48e-9
    jitter_fwhm_s: float = 50e-12
    misalignment_error: float = 0.003


@dataclass(frozen=True)
class SessionConfig:
    source: SourceConfig = field(default_factory=SourceConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    duration_s: float = 2.3
    k_sigma: float = 10.0
    f_ec: float = 1.10

    @property
    def signal_pulses(self) -> float:
        """Expected number of signal pulses sent during ``duration_s``."""
        return self.source.clock_rate * self.duration_s * self.source.duty[0]

    def at_distance(self, length_km: float) -> SessionConfig:
        return replace(self, channel=replace(self.channel, length_km=length_km))

    def with_source(self, **changes) -> SessionConfig:
        return replace(self, source=replace(self.source, **changes))

    def with_detector(self, **changes) -> SessionConfig:
        return replace(self, detector=replace(self.detector, **changes))


def _check_prob(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise ConfigError(name, f"{value!r} is not a probability in [0, 1]")


def validate_source(src: SourceConfig) -> SourceConfig:
    if not src.clock_rate > 0:
        raise ConfigError("source.clock_rate_hz", "must be positive")
    if not src.mu > src.nu1:
        raise ConfigError("source.mu", "mu <= nu1 violates mu > nu1 > nu2")
    if not src.nu1 > src.nu2:
        raise ConfigError("source.nu1", "nu1 <= nu2 violates mu > nu1 > nu2")
    if not src.nu2 >= 0:
        raise ConfigError("source.nu2", "must be non-negative")
    if not src.mu > src.nu1 + src.nu2:
        raise ConfigError("source.mu", "mu <= nu1 + nu2 violates decoy bound validity")
    if len(src.duty) != 3:
        raise ConfigError("source.duty", "exactly three intensity classes are required")
    for cls, d in zip(CLASSES, src.duty):
        _check_prob(f"source.duty_{cls.label}", d)
    if abs(sum(src.duty) - 1.0) > 1e-12:
        raise ConfigError("source.duty", f"duty cycles sum to {sum(src.duty)!r}, not 1")
    return src


def validate_config(cfg: SessionConfig) -> SessionConfig:
    """Check every configuration invariant, raising on the first violation.

    Returns ``cfg`` unchanged when it is valid.

    Raises
    ------
    ConfigError
        Carries the offending field name in ``.field``.
    """
    validate_source(cfg.source)
    ch = cfg.channel
    if not ch.length_km >= 0:
        raise ConfigError("channel.length_km", "must be non-negative")
    if not ch.loss_db_per_km >= 0:
        raise ConfigError("channel.loss_db_per_km", "must be non-negative")

    det = cfg.detector
    _check_prob("detector.efficiency", det.detector_efficiency)
    if not det.receiver_loss_factor >= 1:
        raise ConfigError("detector.receiver_loss_factor", "must be >= 1")
    _check_prob("detector.dark_prob_per_gate", det.dark_prob_per_gate)
    _check_prob("detector.afterpulse_prob", det.afterpulse_prob)
    if int(det.dead_time_gates) != det.dead_time_gates or det.dead_time_gates < 1:
        raise ConfigError("detector.dead_time_gates", "must be an integer >= 1")
    if not det.gate_width_s > 0:
        raise ConfigError("detector.gate_width_s", "must be positive")
    if det.gate_width_s > 1.0 / cfg.source.clock_rate:
        raise ConfigError("detector.gate_width_s", "gate is longer than the clock period")
    if not det.jitter_fwhm_s >= 0:
        raise ConfigError("detector.jitter_fwhm_s", "must be non-negative")
    _check_prob("detector.misalignment_error", det.misalignment_error)

    if not cfg.duration_s > 0:
        raise ConfigError("session.duration_s", "must be positive")
    if not cfg.k_sigma >= 0:
        raise ConfigError("session.k_sigma", "must be non-negative")
    if not cfg.f_ec >= 1:
        raise ConfigError("session.f_ec", "must be >= 1")
    return cfg


# --- flat key/value configuration files -------------------------------------

# (file key, dataclass path) in canonical output order
_CONFIG_KEYS: list[tuple[str, tuple[str, ...]]] = [
    ("source.clock_rate_hz", ("source", "clock_rate")),
    ("source.mu", ("source", "mu")),
    ("source.nu1", ("source", "nu1")),
    ("source.nu2", ("source", "nu2")),
    ("source.duty_signal", ("source", "duty", "0")),
    ("source.duty_decoy1", ("source", "duty", "1")),
    ("source.duty_decoy2", ("source", "duty", "2")),
    ("source.extinction_db", ("source", "extinction_db")),
    ("channel.length_km", ("channel", "length_km")),
    ("channel.loss_db_per_km", ("channel", "loss_db_per_km")),
    ("detector.efficiency", ("detector", "detector_efficiency")),
    ("detector.receiver_loss_factor", ("detector", "receiver_loss_factor")),
    ("detector.dark_prob_per_gate", ("detector", "dark_prob_per_gate")),
    ("detector.afterpulse_prob", ("detector", "afterpulse_prob")),
    ("detector.dead_time_gates", ("detector", "dead_time_gates")),
    ("detector.gate_width_s", ("detector", "gate_width_s")),
    ("detector.jitter_fwhm_s", ("detector", "jitter_fwhm_s")),
    ("detector.misalignment_error", ("detector", "misalignment_error")),
    ("session.duration_s", ("session", "duration_s")),
    ("session.k_sigma", ("session", "k_sigma")),
    ("session.f_ec", ("session", "f_ec")),
]
CONFIG_KEYS = tuple(k for k, _ in _CONFIG_KEYS)


def _parse_kv_lines(text: str, sep: str, source: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if sep not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key {sep} value', got {raw!r}")
        key, value = (s.strip() for s in line.split(sep, 1))
        if key in out:
            raise ConfigError(key, f"duplicate key at line {lineno}")
        out[key] = value
    return out


def _to_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(key, f"not a number: {value!r}") from None


def parse_config(text: str) -> SessionConfig:
    """Parse ``section.key = value`` text; unspecified keys keep their defaults.

    The result is not validated; pass it through :func:`validate_config`.
    """
    items = _parse_kv_lines(text, "=", "config")
    known = dict(_CONFIG_KEYS)
    for key in items:
        if key not in known:
            raise ConfigError(key, "unknown configuration key")

    default = SessionConfig()
    parts = {
        "source": {f.name: getattr(default.source, f.name) for f in fields(SourceConfig)},
        "channel": {f.name: getattr(default.channel, f.name) for f in fields(ChannelConfig)},
        "detector": {f.name: getattr(default.detector, f.name) for f in fields(DetectorConfig)},
        "session": {"duration_s": default.duration_s, "k_sigma": default.k_sigma, "f_ec": default.f_ec},
    }
    duty = list(parts["source"]["duty"])
    for key, value in items.items():
        path = known[key]
        v = _to_float(key, value)
        if path[1] == "duty":
            duty[int(path[2])] = v
        elif path[1] == "dead_time_gates":
            if v != int(v):
                raise ConfigError(key, "must be an integer")
            parts["detector"]["dead_time_gates"] = int(v)
        else:
            parts[path[0]][path[1]] = v
    parts["source"]["duty"] = tuple(duty)
    return SessionConfig(
        source=SourceConfig(**parts["source"]),
        channel=ChannelConfig(**parts["channel"]),
        detector=DetectorConfig(**parts["detector"]),
        **parts["session"],
    )


def load_config(path: str | Path) -> SessionConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: SessionConfig) -> str:
    """Render every key in canonical order; round-trips through parse_config."""
    lines = []
    for key, path in _CONFIG_KEYS:
        if path[0] == "session":
            value = getattr(cfg, path[1])
        else:
            value = getattr(getattr(cfg, path[0]), path[1])
            if path[1] == "duty":
                value = value[int(path[2])]
        lines.append(f"{key} = {value!r}")
    return "\n".join(lines) + "\n"


# --- tallies and gains -------------------------------------------------------

_TALLY_STRUCT = struct.Struct("<12Qd")


@dataclass(frozen=True)
class SessionTally:
    """Raw session counts, each a triple indexed by :class:`IntensityClass`.

    ``checked`` counts sifted bits whose values were compared between the
    parties; it equals ``sifted`` under full disclosure. Errors are counted
    among checked bits only.
    """

    pulses_sent: tuple[int, int, int]
    clicks: tuple[int, int, int]
    sifted: tuple[int, int, int]
    errors: tuple[int, int, int]
    duration_s: float
    checked: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.checked is None:
            object.__setattr__(self, "checked", tuple(self.sifted))
        for name in ("pulses_sent", "clicks", "sifted", "errors", "checked"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))

    def is_consistent(self) -> bool:
        return all(
            0 <= e <= c <= s <= k <= n
            for n, k, s, c, e in zip(self.pulses_sent, self.clicks, self.sifted, self.checked, self.errors)
        )

    def to_bytes(self) -> bytes:
        return _TALLY_STRUCT.pack(
            *self.pulses_sent, *self.clicks, *self.sifted, *self.errors, self.duration_s
        ) + struct.pack("<3Q", *self.checked)

    @classmethod
    def from_bytes(cls, data: bytes) -> SessionTally:
        if len(data) != _TALLY_STRUCT.size + 24:
            raise ValueError(f"tally record must be {_TALLY_STRUCT.size + 24} bytes, got {len(data)}")
        v = _TALLY_STRUCT.unpack(data[: _TALLY_STRUCT.size])
        checked = struct.unpack("<3Q", data[_TALLY_STRUCT.size:])
        return cls(v[0:3], v[3:6], v[6:9], v[9:12], v[12], checked)

    def to_text(self) -> str:
        lines = []
        for name in ("pulses_sent", "clicks", "sifted", "checked", "errors"):
            for cls, v in zip(CLASSES, getattr(self, name)):
                lines.append(f"{name}_{cls.label},{v}")
        lines.append(f"duration_s,{self.duration_s!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> SessionTally:
        items = _parse_kv_lines(text, ",", "tally")
        try:
            counts = {
                name: tuple(int(items[f"{name}_{c.label}"]) for c in CLASSES)
                for name in ("pulses_sent", "clicks", "sifted", "errors")
            }
            checked = None
            if all(f"checked_{c.label}" in items for c in CLASSES):
                checked = tuple(int(items[f"checked_{c.label}"]) for c in CLASSES)
            return cls(duration_s=float(items["duration_s"]), checked=checked, **counts)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0]), "missing from tally") from None
        except ValueError as exc:
            raise ConfigError("tally", str(exc)) from None


@dataclass(frozen=True)
class GainStatistics:
    q_mu: float
    q_nu1: float
    q_nu2: float
    eps_mu: float
    dev_q_mu: float = 0.0
    dev_q_nu1: float = 0.0
    dev_q_nu2: float = 0.0
    dev_eps_mu: float = 0.0

    @property
    def central(self) -> tuple[float, float, float, float]:
        return (self.q_mu, self.q_nu1, self.q_nu2, self.eps_mu)

    @property
    def deviations(self) -> tuple[float, float, float, float]:
        return (self.dev_q_mu, self.dev_q_nu1, self.dev_q_nu2, self.dev_eps_mu)

    def without_deviations(self) -> GainStatistics:
        return GainStatistics(*self.central)


GAIN_KEYS = ("q_mu", "q_nu1", "q_nu2", "eps_mu", "dev_q_mu", "dev_q_nu1", "dev_q_nu2", "dev_eps_mu")


def parse_gains(text: str) -> GainStatistics:
    """Read ``name = value`` lines; deviations default to zero."""
    items = _parse_kv_lines(text, "=", "gains")
    for key in items:
        if key not in GAIN_KEYS:
            raise ConfigError(key, "unknown gains key")
    for key in GAIN_KEYS[:4]:
        if key not in items:
            raise ConfigError(key, "missing from gains file")
    values = {k: _to_float(k, v) for k, v in items.items()}
    for k, v in values.items():
        if not 0 <= v <= 1:
            raise ConfigError(k, f"{v!r} outside [0, 1]")
    return GainStatistics(**values)


def _binomial_dev(k_sigma: float, p: float, n: float) -> float:
    return k_sigma * math.sqrt(max(p * (1.0 - p), 0.0) / n)


def tallies_to_gains(t: SessionTally, k_sigma: float = 10.0) -> GainStatistics:
    """Measured gains and signal QBER with binomial ``k_sigma`` deviations.

    Gains are clicks per emitted pulse of each class, counted before basis
    sifting. The signal QBER is taken over the checked signal bits.
    """
    for cls, n in zip(CLASSES, t.pulses_sent):
        if n <= 0:
            raise ValueError(f"no {cls.label} pulses were sent")
    n_checked = t.checked[IntensityClass.SIGNAL]
    if n_checked <= 0:
        raise ValueError("no sifted signal bits were checked")
    q = [c / n for c, n in zip(t.clicks, t.pulses_sent)]
    eps = t.errors[IntensityClass.SIGNAL] / n_checked
    return GainStatistics(
        q_mu=q[0], q_nu1=q[1], q_nu2=q[2], eps_mu=eps,
        dev_q_mu=_binomial_dev(k_sigma, q[0], t.pulses_sent[0]),
        dev_q_nu1=_binomial_dev(k_sigma, q[1], t.pulses_sent[1]),
        dev_q_nu2=_binomial_dev(k_sigma, q[2], t.pulses_sent[2]),
        dev_eps_mu=_binomial_dev(k_sigma, eps, n_checked),
    )


# Measured values and ten-sigma deviations of the 20.06 km experiment.
TABLE1_CONFIG = SessionConfig()
TABLE1_GAINS = GainStatistics(
    q_mu=8.680e-3, q_nu1=1.970e-3, q_nu2=4.470e-4, eps_mu=0.02530,
    dev_q_mu=0.025e-3, dev_q_nu1=0.025e-3, dev_q_nu2=0.225e-4, dev_eps_mu=0.00009,
)
