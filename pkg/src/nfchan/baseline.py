"""Exhaustive near-field NOMP baseline (NNOMP).

While the residual power stays above the stop threshold: scan the full
codebook for the best-correlated grid point, fit all gains jointly, then run
R_C cyclic rounds in which every detected path receives R_s Newton
refinements followed by a joint LS re-fit. The codebook is built at twice
the per-axis density of the imaging codebook. Codeword evaluations are
counted exactly (detections x rows).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .channel import ArrayConfig, model_steering
from .codebook import Codebook
from .refine import (
    EstimateSet,
    OperationCount,
    PathEstimate,
    ls_gains,
    newton_refine,
    _model,
    _to_coords,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NNOMPConfig:
    codebook: Codebook
    r_c: int = 3
    r_s: int = 3
    tau: float = 0.0
    max_paths: int = 8

    def __post_init__(self):
        if self.r_c < 0 or self.r_s < 0:
            raise ValueError("refinement round counts must be nonnegative")
        if self.max_paths < 1:
            raise ValueError("max_paths must be >= 1")


def nnomp(cfg: ArrayConfig, y: np.ndarray, nc: NNOMPConfig,
          counters: OperationCount | None = None,
          residual_history: list | None = None
          ) -> tuple[EstimateSet, OperationCount]:
    """Full NNOMP: exhaustive detection plus cyclic Newton refinement.

    residual_history, when given, collects ||y_r||^2 after every detection
    iteration (for monotonicity audits).
    """
    if counters is None:
        counters = OperationCount()
    domain = nc.codebook.domain
    region = nc.codebook.region
    positions: list = []
    gains = np.zeros(0, dtype=complex)
    y_r = y.copy()
    norms = math.sqrt(cfg.n_antennas)
    incomplete = False

    while float(np.vdot(y_r, y_r).real) >= nc.tau:
        if len(positions) >= nc.max_paths:
            incomplete = True
            log.warning("nnomp reached the max-path cap with residual above "
                        "threshold; result flagged incomplete")
            break
        # detection: exhaustive scan of the whole codebook
        mags = np.abs(nc.codebook.codewords @ y_r) / norms
        counters.codeword_evals += nc.codebook.n_rows
        new_p = nc.codebook.grid_point(int(np.argmax(mags)))
        if any(_to_coords(domain, new_p) == _to_coords(domain, q)
               for q in positions):
            incomplete = True
            log.warning("nnomp re-detected an existing grid point; stopping")
            break
        positions.append(new_p)
        gains = ls_gains(cfg, positions, y)
        y_r = y - _model(cfg, positions, gains)

        # cyclic refinement: every path gets R_s Newton rounds, joint re-fit
        for _ in range(nc.r_c):
            for k in range(len(positions)):
                y_work = y_r + gains[k] * model_steering(cfg, positions[k])
                p2, _, aborted = newton_refine(cfg, positions[k], y_work,
                                               nc.r_s, domain, region, counters)
                if aborted:
                    log.warning("nnomp newton refinement aborted")
                    continue
                positions[k] = p2
                gains = ls_gains(cfg, positions, y)
                y_r = y - _model(cfg, positions, gains)
        if residual_history is not None:
            residual_history.append(float(np.vdot(y_r, y_r).real))

    entries = [PathEstimate(position=p, gain=complex(g), provenance="detected")
               for p, g in zip(positions, gains)]
    est = EstimateSet(entries=entries, residual=y_r, incomplete=incomplete)
    return est, counters
