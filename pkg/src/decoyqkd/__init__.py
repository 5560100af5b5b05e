"""Decoy-state BB84 key-rate analysis, channel modelling and pulse-level simulation."""

from .channel import expected_statistics, find_cutoff_distance, rate_at, rate_vs_distance
from .decoy import SecurityBounds, analyze, binary_entropy
from .errors import (
    BoundValidityError, ConfigError, NoKeyError, NoSinglePhotonError, ProtocolError, TruncationError,
)
from .model import (
    ChannelConfig, DetectorConfig, GainStatistics, IntensityClass, SessionConfig, SessionTally,
    SourceConfig, tallies_to_gains, validate_config,
)
from .optimizer import optimize_intensities

__version__ = "0.1.0"
