"""Small-scale Newtonized OMP refinement and the flexible residual-power refiner.

Stage 1 sorts the coarse paths by their correlation against the joint-LS
residual (weakest first), then per path: add its own modeled contribution
back into the residual, grid-search a (2*delta1 x 2*delta2) box around the
coarse position, run a few rounds of Newton ascent on the continuous
correlation objective, and re-fit all gains jointly. The flexible variant
first detects extra paths by scanning the full codebook while the residual
power stays above tau_p = sigma^2 sqrt(N) Q^-1(P_fa) + sigma^2 N.

All correlations use the conjugate inner product against the model-form
(Cartesian, e^{-jk_cD}/D) steering of the physical point; polar estimates
are parameterized in (r, theta) but evaluate the same physical model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfc

from .channel import (
    ArrayConfig,
    CartesianPoint,
    Point,
    PolarPoint,
    as_cartesian,
    as_polar,
    model_steering,
)
from .codebook import Codebook, Region

log = logging.getLogger(__name__)

_MIN_RADIUS = 1e-9


class DegenerateGeometryError(ValueError):
    """LS steering matrix is rank deficient (e.g. duplicate positions)."""


@dataclass
class OperationCount:
    """Exact work counters for cost accounting."""

    codeword_evals: int = 0
    newton_steps: int = 0
    transform_rows: int = 0

    def __iadd__(self, other: "OperationCount") -> "OperationCount":
        self.codeword_evals += other.codeword_evals
        self.newton_steps += other.newton_steps
        self.transform_rows += other.transform_rows
        return self


@dataclass(frozen=True)
class RefinerConfig:
    delta1: float
    delta2: float
    local_step: float
    r_s: int = 3
    p_fa: float = 1e-2
    noise_var: float = 0.0
    max_detect: int = 8
    local_step2: float | None = None
    ascending: bool = True
    passes: int = 2

    def __post_init__(self):
        if self.delta1 < 0 or self.delta2 < 0:
            raise ValueError("deltas must be nonnegative")
        if self.local_step <= 0:
            raise ValueError("local_step must be positive")
        if not (0.0 < self.p_fa < 1.0):
            raise ValueError("p_fa must be in (0, 1)")

    @property
    def step1(self) -> float:
        return self.local_step

    @property
    def step2(self) -> float:
        return self.local_step2 if self.local_step2 is not None else self.local_step


@dataclass(frozen=True)
class PathEstimate:
    position: Point
    gain: complex
    provenance: str  # coarse | detected | grid-refined | newton-refined


@dataclass
class EstimateSet:
    entries: list[PathEstimate] = field(default_factory=list)
    residual: np.ndarray | None = None
    incomplete: bool = False

    @property
    def positions(self) -> list[Point]:
        return [e.position for e in self.entries]

    @property
    def gains(self) -> np.ndarray:
        return np.array([e.gain for e in self.entries], dtype=complex)

    def residual_identity_error(self, cfg: ArrayConfig, y: np.ndarray) -> float:
        """||(y - sum g a(p)) - stored residual||; must stay ~0."""
        model = np.zeros_like(y)
        for e in self.entries:
            model += e.gain * model_steering(cfg, e.position)
        return float(np.linalg.norm((y - model) - self.residual))


# --- Gaussian Q function -----------------------------------------------------

def q_function(x: float) -> float:
    """Gaussian tail probability Q(x) = P(N(0,1) > x)."""
    return 0.5 * erfc(x / math.sqrt(2.0))


def q_inverse(p: float) -> float:
    """Monotone root-finding inverse of Q to ~1e-12."""
    if not (0.0 < p < 1.0):
        raise ValueError("q_inverse requires p in (0, 1)")
    return brentq(lambda x: q_function(x) - p, -40.0, 40.0, xtol=1e-12)


def residual_power_threshold(noise_var: float, n_antennas: int, p_fa: float) -> float:
    """tau_p = sigma^2 sqrt(N) Q^-1(P_fa) + sigma^2 N."""
    return noise_var * math.sqrt(n_antennas) * q_inverse(p_fa) + noise_var * n_antennas


# --- correlation and LS ------------------------------------------------------

def correlation_coeff(cfg: ArrayConfig, p: Point, y_r: np.ndarray,
                      counters: OperationCount | None = None) -> float:
    """|<a(p), y_r>| / ||a(p)|| with the conjugate inner product."""
    a = model_steering(cfg, p)
    if counters is not None:
        counters.codeword_evals += 1
    return float(abs(np.vdot(a, y_r)) / np.linalg.norm(a))


def ls_gains(cfg: ArrayConfig, positions, y: np.ndarray) -> np.ndarray:
    """Least-squares complex gains for the given positions."""
    positions = list(positions)
    if not positions:
        return np.zeros(0, dtype=complex)
    a_mat = np.column_stack([model_steering(cfg, p) for p in positions])
    gains, _, rank, _ = np.linalg.lstsq(a_mat, y, rcond=None)
    if rank < len(positions):
        raise DegenerateGeometryError(
            f"steering matrix rank {rank} < {len(positions)} paths")
    return gains


def _model(cfg: ArrayConfig, positions, gains) -> np.ndarray:
    out = np.zeros(cfg.n_antennas, dtype=complex)
    for p, g in zip(positions, gains):
        out += g * model_steering(cfg, p)
    return out


# --- coordinate helpers ------------------------------------------------------

def _to_coords(domain: str, p: Point) -> tuple[float, float]:
    if domain == "cartesian":
        c = as_cartesian(p)
        return (c.z, c.x)
    q = as_polar(p)
    return (q.r, q.theta)


def _from_coords(domain: str, u1: float, u2: float) -> Point:
    if domain == "cartesian":
        return CartesianPoint(z=u1, x=u2)
    return PolarPoint(r=max(u1, _MIN_RADIUS), theta=u2)


def _clip_coords(domain: str, u1: float, u2: float,
                 region: Region | None) -> tuple[float, float]:
    if region is not None:
        lo1, hi1, lo2, hi2 = region.bounds()
        u1 = min(max(u1, lo1), hi1)
        u2 = min(max(u2, lo2), hi2)
    if domain == "polar":
        u1 = max(u1, _MIN_RADIUS)
    return (u1, u2)


def _batch_correlation(cfg: ArrayConfig, domain: str, u1: np.ndarray,
                       u2: np.ndarray, y_r: np.ndarray) -> np.ndarray:
    """Correlation coefficients for a batch of coordinate pairs."""
    if domain == "cartesian":
        z, x = u1, u2
    else:
        z, x = u1 * np.cos(u2), u1 * np.sin(u2)
    pos = cfg.element_positions
    d = np.sqrt(z[:, None] ** 2 + (x[:, None] - pos) ** 2)
    d = np.maximum(d, 1e-30)
    a = np.exp(-1j * cfg.wavenumber * d) / d
    num = np.abs(np.conj(a) @ y_r)
    return num / np.linalg.norm(a, axis=1)


# --- local grid search -------------------------------------------------------

def local_grid_refine(cfg: ArrayConfig, domain: str, p: Point, y_r: np.ndarray,
                      rc: RefinerConfig, region: Region | None = None,
                      counters: OperationCount | None = None) -> Point:
    """Argmax of the correlation over a (2*delta1 x 2*delta2) box around p.

    The box is sampled at the local step pitch, clipped to the region bounds,
    and always contains the center; ties resolve to the candidate nearest p.
    """
    u1c, u2c = _to_coords(domain, p)
    k1 = int(math.floor(rc.delta1 / rc.step1 + 1e-12)) if rc.delta1 > 0 else 0
    k2 = int(math.floor(rc.delta2 / rc.step2 + 1e-12)) if rc.delta2 > 0 else 0
    if k1 == 0 and k2 == 0:
        return p
    g1 = u1c + np.arange(-k1, k1 + 1) * rc.step1
    g2 = u2c + np.arange(-k2, k2 + 1) * rc.step2
    if region is not None:
        lo1, hi1, lo2, hi2 = region.bounds()
        g1 = np.unique(np.clip(g1, lo1, hi1))
        g2 = np.unique(np.clip(g2, lo2, hi2))
    if domain == "polar":
        g1 = np.unique(np.maximum(g1, _MIN_RADIUS))
    u1, u2 = np.meshgrid(g1, g2, indexing="ij")
    u1, u2 = u1.ravel(), u2.ravel()
    vals = _batch_correlation(cfg, domain, u1, u2, y_r)
    if counters is not None:
        counters.codeword_evals += u1.size
    best = vals.max()
    tie = np.flatnonzero(vals == best)
    if tie.size > 1:
        d2 = ((u1[tie] - u1c) / rc.step1) ** 2 + ((u2[tie] - u2c) / rc.step2) ** 2
        idx = tie[int(np.argmin(d2))]
    else:
        idx = int(tie[0])
    return _from_coords(domain, float(u1[idx]), float(u2[idx]))


# --- Newton refinement -------------------------------------------------------

def _objective(cfg: ArrayConfig, domain: str, u1: float, u2: float,
               y_r: np.ndarray) -> float:
    val = _batch_correlation(cfg, domain, np.array([u1]), np.array([u2]), y_r)[0]
    return float(val * val)


def newton_refine(cfg: ArrayConfig, p: Point, y_r: np.ndarray, rounds: int,
                  domain: str = "cartesian", region: Region | None = None,
                  counters: OperationCount | None = None,
                  fd_steps: tuple[float, float] | None = None) -> tuple[Point, int, bool]:
    """Ascend the squared correlation objective over continuous coordinates.

    Per round: central finite-difference gradient and Hessian; a Newton step
    when the Hessian is negative definite, otherwise backtracking gradient
    ascent. Steps that do not improve the objective are rejected. Returns
    (position, accepted round count, aborted flag); a non-finite objective
    aborts and returns the input position flagged.
    """
    if fd_steps is None:
        lam = cfg.wavelength_m
        fd_steps = (lam / 100.0, lam / 100.0) if domain == "cartesian" \
            else (lam / 100.0, 1e-4)
    h1, h2 = fd_steps
    u1, u2 = _to_coords(domain, p)
    accepted = 0

    def j(a: float, b: float) -> float:
        return _objective(cfg, domain, a, b, y_r)

    j0 = j(u1, u2)
    if not math.isfinite(j0):
        return p, 0, True

    for _ in range(rounds):
        jp1, jm1 = j(u1 + h1, u2), j(u1 - h1, u2)
        jp2, jm2 = j(u1, u2 + h2), j(u1, u2 - h2)
        jpp, jpm = j(u1 + h1, u2 + h2), j(u1 + h1, u2 - h2)
        jmp, jmm = j(u1 - h1, u2 + h2), j(u1 - h1, u2 - h2)
        vals = (jp1, jm1, jp2, jm2, jpp, jpm, jmp, jmm)
        if not all(math.isfinite(v) for v in vals):
            return _from_coords(domain, u1, u2), accepted, True
        g1 = (jp1 - jm1) / (2 * h1)
        g2 = (jp2 - jm2) / (2 * h2)
        h11 = (jp1 - 2 * j0 + jm1) / (h1 * h1)
        h22 = (jp2 - 2 * j0 + jm2) / (h2 * h2)
        h12 = (jpp - jpm - jmp + jmm) / (4 * h1 * h2)

        candidates = []
        det = h11 * h22 - h12 * h12
        if h11 < 0 and det > 0:
            s1 = -(h22 * g1 - h12 * g2) / det
            s2 = -(-h12 * g1 + h11 * g2) / det
            candidates.append((s1, s2))
        # scaled-gradient fallback: a few finite-difference units long
        gn = math.hypot(g1 * h1, g2 * h2)
        if gn > 0:
            scale = 8.0 / gn
            candidates.append((g1 * h1 * h1 * scale, g2 * h2 * h2 * scale))

        moved = False
        for s1, s2 in candidates:
            t = 1.0
            for _ in range(25):
                c1, c2 = _clip_coords(domain, u1 + t * s1, u2 + t * s2, region)
                jn = j(c1, c2)
                if math.isfinite(jn) and jn > j0:
                    u1, u2, j0 = c1, c2, jn
                    moved = True
                    break
                t *= 0.5
            if moved:
                break
        if not moved:
            break
        accepted += 1
        if counters is not None:
            counters.newton_steps += 1
    return _from_coords(domain, u1, u2), accepted, False


# --- Algorithm 1: small-scale refiner ---------------------------------------

def refine_all(cfg: ArrayConfig, coarse, y: np.ndarray, rc: RefinerConfig,
               domain: str = "cartesian", region: Region | None = None,
               counters: OperationCount | None = None,
               labels: list[str] | None = None) -> EstimateSet:
    """Refine every coarse position and re-fit gains (Algorithm-1 behavior).

    Gains are initialized by joint LS over all coarse positions; paths are
    processed in ascending order of their correlation against that residual;
    after every structural change the gains are re-fit jointly. The per-path
    sweep repeats up to rc.passes times (later sweeps see residuals cleaned
    of the other paths' initial position errors) and stops early once the
    residual power stops improving.
    """
    positions = list(coarse)
    if not positions:
        raise ValueError("refine_all needs at least one coarse position")
    if labels is None:
        labels = ["coarse"] * len(positions)
    labels = list(labels)

    gains = ls_gains(cfg, positions, y)
    y_r = y - _model(cfg, positions, gains)

    corr = [correlation_coeff(cfg, p, y_r, counters) for p in positions]
    order = np.argsort(corr)
    if not rc.ascending:
        order = order[::-1]

    def upgrade(label: str, to: str) -> str:
        if label == "detected":
            return label
        if to == "newton-refined" or label == "coarse":
            return to
        return label

    prev_power = float(np.vdot(y_r, y_r).real)
    for sweep in range(max(rc.passes, 1)):
        for k in order:
            y_work = y_r + gains[k] * model_steering(cfg, positions[k])
            p0 = positions[k]
            p1 = local_grid_refine(cfg, domain, p0, y_work, rc, region, counters)
            p2, steps, aborted = newton_refine(cfg, p1, y_work, rc.r_s, domain,
                                               region, counters)
            if aborted:
                log.warning("newton refinement aborted on a non-finite objective")
            if steps > 0:
                labels[k] = upgrade(labels[k], "newton-refined")
            elif _to_coords(domain, p1) != _to_coords(domain, p0):
                labels[k] = upgrade(labels[k], "grid-refined")
            positions[k] = p2
            gains = ls_gains(cfg, positions, y)
            y_r = y - _model(cfg, positions, gains)
        power = float(np.vdot(y_r, y_r).real)
        if power >= prev_power * (1 - 1e-9):
            break
        prev_power = power

    entries = [PathEstimate(position=positions[i], gain=complex(gains[i]),
                            provenance=labels[i])
               for i in order]
    return EstimateSet(entries=entries, residual=y_r)


# --- Algorithm 2: flexible refiner -------------------------------------------

def flexible_refine(cfg: ArrayConfig, coarse, y: np.ndarray, codebook: Codebook,
                    rc: RefinerConfig, region: Region | None = None,
                    counters: OperationCount | None = None) -> EstimateSet:
    """Detect missed paths by residual power, then refine everything.

    The coarse set is refined first so the residual-power test compares
    against the noise floor rather than against coarse-position mismatch
    (a grid-precision-only fit leaves mismatch power far above tau_p at
    high SNR and would over-detect). While ||y_r||^2 >= tau_p and fewer
    than max_detect new paths were added: scan the full codebook for the
    best-correlated grid point, add it, and re-run the refiner on the
    union, which also re-fits all gains.
    """
    domain = codebook.domain
    search_region = region if region is not None else codebook.region
    positions = list(coarse)
    labels = ["coarse"] * len(positions)

    est: EstimateSet
    if positions:
        est = refine_all(cfg, positions, y, rc, domain=domain,
                         region=search_region, counters=counters, labels=labels)
        positions = est.positions
        labels = [e.provenance for e in est.entries]
        y_r = est.residual
    else:
        est = EstimateSet(entries=[], residual=y.copy())
        y_r = est.residual

    tau = residual_power_threshold(rc.noise_var, cfg.n_antennas, rc.p_fa)
    detected = 0
    norms = math.sqrt(cfg.n_antennas)
    while float(np.vdot(y_r, y_r).real) >= tau:
        if detected >= rc.max_detect:
            est.incomplete = True
            log.warning("flexible refiner hit max_detect with residual above "
                        "threshold; result flagged incomplete")
            break
        mags = np.abs(codebook.codewords @ y_r) / norms
        if counters is not None:
            counters.codeword_evals += codebook.n_rows
        new_p = codebook.grid_point(int(np.argmax(mags)))
        if any(_to_coords(domain, new_p) == _to_coords(domain, q)
               for q in positions):
            est.incomplete = True
            log.warning("flexible refiner re-detected an existing grid point; "
                        "stopping detection loop")
            break
        positions.append(new_p)
        labels.append("detected")
        detected += 1
        est = refine_all(cfg, positions, y, rc, domain=domain,
                         region=search_region, counters=counters, labels=labels)
        positions = est.positions
        labels = [e.provenance for e in est.entries]
        y_r = est.residual

    return est
