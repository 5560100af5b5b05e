import pytest

from decoyqkd.channel import rate_vs_distance
from decoyqkd.model import SessionConfig, SourceConfig
from decoyqkd.optimizer import feasible, grid_scores, nu2_for, objective, optimize_intensities

DEFAULT = SessionConfig()


@pytest.fixture(scope="module")
def best():
    return optimize_intensities(DEFAULT)


def test_default_optimum_brackets_operating_point(best):
    assert 0.4 <= best.mu <= 0.7
    assert 0.05 <= best.nu1 <= 0.15


def test_beats_published_point(best):
    assert best.predicted_rate >= objective(DEFAULT, 0.55, 0.10)


def test_feasible_and_dominates_grid(best):
    assert feasible(DEFAULT, best.mu, best.nu1)
    assert best.predicted_rate >= max(score for _, _, score in grid_scores(DEFAULT))


def test_deterministic(best):
    assert optimize_intensities(DEFAULT) == best


def test_zero_distance_beats_any_distance():
    quiet = SessionConfig(k_sigma=0.0).with_detector(
        dark_prob_per_gate=0.0, afterpulse_prob=0.0, misalignment_error=0.0)
    at_zero = optimize_intensities(quiet.at_distance(0.0)).predicted_rate
    for km in (1.0, 20.0, 80.0):
        assert at_zero > optimize_intensities(quiet.at_distance(km)).predicted_rate


def test_objective_matches_sweep():
    cfg = DEFAULT.with_source(nu2=nu2_for(DEFAULT, 0.55))
    swept = rate_vs_distance(cfg, 20.06, 20.06, 1.0)[0].secure_bps
    assert objective(cfg, 0.55, 0.10) == swept


def test_weak_decoy_tracks_extinction():
    assert nu2_for(DEFAULT, 0.55) == pytest.approx(0.55 * 10 ** -2.9)


def test_empty_feasible_set():
    cfg = SessionConfig(source=SourceConfig(extinction_db=0.0))
    with pytest.raises(ValueError, match="feasible"):
        optimize_intensities(cfg)
