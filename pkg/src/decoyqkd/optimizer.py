"""Search for signal and decoy intensities that maximise the secure key rate.

The objective is the worst-cased analytic rate from :mod:`decoyqkd.channel`.
The weakest decoy is tied to the signal by the modulator extinction ratio,
and duty cycles stay as configured.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from .channel import rate_at
from .errors import BoundValidityError
from .model import SessionConfig

log = logging.getLogger(__name__)

MU_GRID = np.round(np.arange(0.05, 1.0 + 1e-9, 0.05), 10)
NU1_STEP = 0.01
MIN_STEP = 1e-4


class OptimumIntensities(NamedTuple):
    mu: float
    nu1: float
    predicted_rate: float


def nu2_for(cfg: SessionConfig, mu: float) -> float:
    return mu * 10.0 ** (-cfg.source.extinction_db / 10.0)


def feasible(cfg: SessionConfig, mu: float, nu1: float) -> bool:
    nu2 = nu2_for(cfg, mu)
    return 0 < mu and nu2 < nu1 < mu and mu > nu1 + nu2


def objective(cfg: SessionConfig, mu: float, nu1: float) -> float:
    """Worst-cased secure rate (bit/s) at (mu, nu1), or -inf when infeasible."""
    if not feasible(cfg, mu, nu1):
        return float("-inf")
    trial = cfg.with_source(mu=mu, nu1=nu1, nu2=nu2_for(cfg, mu))
    try:
        return rate_at(trial).secure_bps
    except BoundValidityError:
        return float("-inf")


def _better(score, mu, best_score, best_mu):
    return score > best_score or (score == best_score and mu < best_mu)


def grid_scores(cfg: SessionConfig) -> list[tuple[float, float, float]]:
    """(mu, nu1, score) for every feasible coarse-grid point."""
    out = []
    for mu in MU_GRID:
        for nu1 in np.round(np.arange(0.01, 0.5 * mu + 1e-9, NU1_STEP), 10):
            if feasible(cfg, float(mu), float(nu1)):
                out.append((float(mu), float(nu1), objective(cfg, float(mu), float(nu1))))
    return out


def optimize_intensities(cfg: SessionConfig) -> OptimumIntensities:
    """Coarse grid over (mu, nu1) followed by coordinate descent with step halving.

    Ties on the grid go to the smaller mu; refinement only moves on strict
    improvement. The weak decoy follows mu through the extinction ratio.

    Raises
    ------
    ValueError
        If no grid point is feasible.
    """
    grid = grid_scores(cfg)
    if not grid:
        raise ValueError("no feasible (mu, nu1) on the search grid")
    best_mu, best_nu1, best = grid[0]
    for mu, nu1, score in grid[1:]:
        if _better(score, mu, best, best_mu):
            best_mu, best_nu1, best = mu, nu1, score
    log.debug("grid optimum mu=%g nu1=%g rate=%g", best_mu, best_nu1, best)

    steps = [0.05, NU1_STEP]
    while max(steps) >= MIN_STEP:
        improved = False
        for axis in (0, 1):
            for direction in (-1.0, 1.0):
                cand = [best_mu, best_nu1]
                cand[axis] += direction * steps[axis]
                score = objective(cfg, cand[0], cand[1])
                if score > best:
                    best_mu, best_nu1, best = cand[0], cand[1], score
                    improved = True
        if not improved:
            steps = [s / 2 for s in steps]
    return OptimumIntensities(best_mu, best_nu1, best)
