import math

import numpy as np
import pytest

from decoyqkd.channel import (
    distance_grid, expected_gated_statistics, expected_statistics, find_cutoff_distance, rate_at,
    rate_vs_distance, system_efficiency,
)
from decoyqkd.decoy import analyze, q1_lower, y0_lower
from decoyqkd.errors import NoKeyError
from decoyqkd.model import ChannelConfig, DetectorConfig, GainStatistics, SessionConfig

# 0.05 * 10**(-20.06 * 0.2 / 10) with mpmath at 30 digits
ETA_20KM = 0.0198504339056092

DEFAULT = SessionConfig()
ASYMPTOTIC = SessionConfig(k_sigma=0.0)
QUIET = ASYMPTOTIC.with_detector(dark_prob_per_gate=0.0, afterpulse_prob=0.0, misalignment_error=0.0)


def test_system_efficiency_examples():
    det = DetectorConfig()
    assert system_efficiency(ChannelConfig(length_km=0.0), det) == pytest.approx(0.05, rel=1e-15)
    assert system_efficiency(ChannelConfig(), det) == pytest.approx(ETA_20KM, rel=1e-13)
    ideal = DetectorConfig(detector_efficiency=1.0, receiver_loss_factor=1.0)
    assert system_efficiency(ChannelConfig(loss_db_per_km=0.0), ideal) == 1.0


def test_default_statistics():
    s = expected_statistics(DEFAULT)
    assert s.gain_mu == pytest.approx(1.138e-2, rel=1e-3)
    assert s.qber_mu == pytest.approx(2.6e-2, rel=0.01)
    assert s.y0_background == 2 * 6.8e-6


def test_dark_efficiency_zero_gives_no_gain():
    cfg = SessionConfig().with_detector(detector_efficiency=0.0, dark_prob_per_gate=0.0, afterpulse_prob=0.0)
    s = expected_statistics(cfg)
    assert s.gains == (0.0, 0.0, 0.0)
    assert s.qber_mu == 0.0


def test_dark_dominated_qber_is_half():
    cfg = SessionConfig().with_detector(detector_efficiency=0.0)
    assert expected_statistics(cfg).qber_mu == pytest.approx(0.5, rel=1e-9)


def test_gain_increasing_in_flux_and_efficiency():
    lengths = np.linspace(0, 150, 16)
    prev = None
    for L in lengths[::-1]:
        s = expected_statistics(DEFAULT.at_distance(float(L)))
        assert s.gain_mu > s.gain_nu1 > s.gain_nu2
        if prev is not None:
            assert s.gain_mu > prev.gain_mu
            assert s.qber_mu <= prev.qber_mu
        prev = s


def test_rate_at_20km_near_one_megabit():
    assert rate_at(DEFAULT).secure_bps == pytest.approx(1.0e6, rel=0.20)


def test_qber_at_100km():
    assert rate_at(DEFAULT.at_distance(100.8)).qber == pytest.approx(0.046, abs=0.01)


def test_quiet_channel_slope():
    pts = rate_vs_distance(QUIET, 20.0, 80.0, 10.0)
    d = np.array([p.distance_km for p in pts])
    r = np.array([p.secure_bps for p in pts])
    slope = np.polyfit(d, 10 * np.log10(r), 1)[0]
    assert slope == pytest.approx(-0.20, abs=2e-3)


def test_cutoff_asymptotic_defaults():
    assert 105.0 <= find_cutoff_distance(ASYMPTOTIC) <= 120.0


def test_cutoff_without_dark_counts_hits_search_bound():
    cfg = ASYMPTOTIC.with_detector(dark_prob_per_gate=0.0)
    assert find_cutoff_distance(cfg, max_km=400.0) == 400.0


def test_cutoff_shrinks_with_dark_counts():
    base = find_cutoff_distance(DEFAULT)
    doubled = find_cutoff_distance(DEFAULT.with_detector(dark_prob_per_gate=2 * 6.8e-6))
    assert doubled < base


def test_cutoff_requires_key_at_zero():
    with pytest.raises(NoKeyError):
        find_cutoff_distance(DEFAULT.with_detector(misalignment_error=0.2))


def test_q1_never_exceeds_model_single_photon_gain():
    src = DEFAULT.source
    for L in distance_grid(0.0, 120.0, 10.0):
        cfg = DEFAULT.at_distance(L)
        s = expected_statistics(cfg)
        eta = system_efficiency(cfg.channel, cfg.detector)
        pa = cfg.detector.afterpulse_prob
        true_q1 = src.mu * math.exp(-src.mu) * (1 - (1 - s.y0_background) * (1 - eta)) * (1 + pa)
        y0 = y0_lower(src.nu1, src.nu2, s.gain_nu1, s.gain_nu2)
        q1 = q1_lower(src.mu, src.nu1, src.nu2, *s.gains, y0)
        assert q1 <= true_q1 + 1e-9


def test_sweep_deterministic():
    assert rate_vs_distance(DEFAULT, 0, 40, 10) == rate_vs_distance(DEFAULT, 0, 40, 10)


def test_sweep_matches_direct_analysis():
    s = expected_statistics(DEFAULT)
    b = analyze(GainStatistics(*s.gains, s.qber_mu), ASYMPTOTIC)
    assert rate_at(ASYMPTOTIC).secure_bps == b.secure_rate_bps


@pytest.mark.parametrize("args", [(50, 40, 5), (-1, 10, 1), (0, 10, 0)])
def test_bad_grid(args):
    with pytest.raises(ValueError):
        distance_grid(*args)


def test_grid_includes_end():
    assert distance_grid(0, 120, 5)[-1] == 120
    assert len(distance_grid(0, 120, 5)) == 25


def test_gated_model_reduces_to_closed_form():
    # single live gate, no afterpulses, no jitter loss: only the dark-count cross term differs
    cfg = DEFAULT.with_detector(afterpulse_prob=0.0, dead_time_gates=1, jitter_fwhm_s=0.0)
    a = expected_statistics(cfg)
    b = expected_gated_statistics(cfg)
    for x, y in zip(a.gains, b.gains):
        assert y == pytest.approx(x, rel=1e-3)
    assert b.qber_mu == pytest.approx(a.qber_mu, rel=2e-3)
