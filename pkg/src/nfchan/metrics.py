"""Reconstruction and localization metrics.

NMSE compares channel vectors; localization error is the mean L1 coordinate
distance (|dz| + |dx|, reported in carrier wavelengths) over a min-cost
bipartite assignment between estimated and true positions, gated so that
pairs farther than a cutoff stay unmatched and instead show up in recall
and precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .channel import Point, as_cartesian

NMSE_FLOOR_DB = -300.0


def nmse(h_hat: np.ndarray, h: np.ndarray) -> float:
    """||h_hat - h||^2 / ||h||^2 for one realization."""
    h_hat = np.asarray(h_hat)
    h = np.asarray(h)
    if h_hat.shape != h.shape:
        raise ValueError("channel vectors must have equal length")
    denom = float(np.vdot(h, h).real)
    if denom == 0.0:
        raise ValueError("true channel is identically zero")
    diff = h_hat - h
    return float(np.vdot(diff, diff).real) / denom


def nmse_db(value: float) -> float:
    """10 log10 with a -300 dB floor for exact reconstructions."""
    if value <= 10.0 ** (NMSE_FLOOR_DB / 10.0):
        return NMSE_FLOOR_DB
    return 10.0 * math.log10(value)


def wing_loss(error_norm: float, w: float = 10.0, eps: float = 5.0) -> float:
    """Log-barrel regression loss: w ln(1 + |e|/eps) inside |e| < w, linear
    with offset c = w - w ln(1 + w/eps) outside (continuous at the knee)."""
    e = abs(error_norm)
    c = w - w * math.log(1.0 + w / eps)
    if e < w:
        return w * math.log(1.0 + e / eps)
    return e - c


@dataclass(frozen=True)
class Matching:
    pairs: list[tuple[int, int]]  # (estimate index, truth index)
    n_est: int
    n_true: int

    @property
    def recall(self) -> float:
        return len(self.pairs) / self.n_true if self.n_true else 0.0

    @property
    def precision(self) -> float:
        return len(self.pairs) / self.n_est if self.n_est else 0.0


def match_paths(est_positions, true_positions, gate_m: float) -> Matching:
    """Min-cost assignment on Euclidean distance with a match gate."""
    est = [as_cartesian(p) for p in est_positions]
    true = [as_cartesian(p) for p in true_positions]
    if not est or not true:
        return Matching(pairs=[], n_est=len(est), n_true=len(true))
    cost = np.empty((len(est), len(true)))
    for i, a in enumerate(est):
        for j, b in enumerate(true):
            cost[i, j] = math.hypot(a.z - b.z, a.x - b.x)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols)
             if cost[i, j] <= gate_m]
    return Matching(pairs=pairs, n_est=len(est), n_true=len(true))


def l1_distance(est_positions, true_positions, wavelength_m: float,
                gate_lambda: float = 100.0) -> tuple[float, Matching]:
    """Mean matched-pair L1 coordinate error in wavelengths.

    Returns (l1, matching); l1 is NaN when nothing matches (missing value).
    Positions in polar form are converted to Cartesian first.
    """
    m = match_paths(est_positions, true_positions,
                    gate_m=gate_lambda * wavelength_m)
    if not m.pairs:
        return math.nan, m
    est = [as_cartesian(p) for p in est_positions]
    true = [as_cartesian(p) for p in true_positions]
    total = 0.0
    for i, j in m.pairs:
        total += abs(est[i].z - true[j].z) + abs(est[i].x - true[j].x)
    return total / (len(m.pairs) * wavelength_m), m
