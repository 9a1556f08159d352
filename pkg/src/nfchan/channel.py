"""Near-field ULA geometry, steering vectors and multipath channel synthesis.

Geometry: a uniform linear array of N elements lies on the x axis, centred at
the origin, with element n at x = n * spacing_m for the symmetric unit-step
index range n = (1-N)/2 ... (N-1)/2 (half-integers when N is even). A source
at (z, x) with z >= 0 sees per-element distances D_n and the array responds
with amplitude 1/D_n and phase -k_c*D_n (Cartesian form) or +k_c*D_n (polar
form; the two forms agree in magnitude entrywise).
"""

from __future__ import annotations

import cmath
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299792458.0

COMPLEX_VEC_MAGIC = b"NFCV0001"


class DegeneratePointError(ValueError):
    """Coordinate transform requested at a degenerate point (the origin)."""


class OnArrayError(ValueError):
    """Steering vector requested at a point coincident with an array element."""


@dataclass(frozen=True)
class ArrayConfig:
    """Uniform linear array: element count, carrier and inter-element pitch."""

    n_antennas: int
    carrier_hz: float
    spacing_m: float

    def __post_init__(self):
        if self.n_antennas < 2:
            raise ValueError(f"n_antennas must be >= 2, got {self.n_antennas}")
        if self.carrier_hz <= 0:
            raise ValueError("carrier_hz must be positive")
        if self.spacing_m <= 0:
            raise ValueError("spacing_m must be positive")

    @property
    def wavelength_m(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.wavelength_m

    @property
    def rayleigh_m(self) -> float:
        aperture = (self.n_antennas - 1) * self.spacing_m
        return 2.0 * aperture * aperture / self.wavelength_m

    @property
    def element_indices(self) -> np.ndarray:
        """Symmetric unit-step indices (1-N)/2 ... (N-1)/2."""
        n = self.n_antennas
        return np.arange(n, dtype=float) - (n - 1) / 2.0

    @property
    def element_positions(self) -> np.ndarray:
        """x coordinates of the elements in meters."""
        return self.element_indices * self.spacing_m

    @classmethod
    def half_wavelength(cls, n_antennas: int, carrier_hz: float) -> "ArrayConfig":
        """Array with the effective pitch set to half the carrier wavelength."""
        lam = SPEED_OF_LIGHT / carrier_hz
        return cls(n_antennas=n_antennas, carrier_hz=carrier_hz, spacing_m=lam / 2.0)


def rayleigh_distance(cfg: ArrayConfig) -> float:
    """2 * aperture^2 / lambda, the near/far-field boundary."""
    return cfg.rayleigh_m


@dataclass(frozen=True)
class CartesianPoint:
    z: float
    x: float


@dataclass(frozen=True)
class PolarPoint:
    r: float
    theta: float

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError(f"polar radius must be positive, got {self.r}")
        if not (-math.pi / 2 - 1e-12 <= self.theta <= math.pi / 2 + 1e-12):
            raise ValueError(f"theta {self.theta} outside [-pi/2, pi/2]")


Point = CartesianPoint | PolarPoint


def cart_to_polar(p: CartesianPoint) -> PolarPoint:
    """(z, x) -> (r, theta) with r = sqrt(x^2 + z^2), theta = atan(x / z)."""
    if p.z == 0.0 and p.x == 0.0:
        raise DegeneratePointError("cannot convert the origin to polar coordinates")
    r = math.hypot(p.x, p.z)
    theta = math.atan2(p.x, p.z)
    return PolarPoint(r=r, theta=theta)


def polar_to_cart(p: PolarPoint) -> CartesianPoint:
    """(r, theta) -> (z, x) = (r cos theta, r sin theta)."""
    return CartesianPoint(z=p.r * math.cos(p.theta), x=p.r * math.sin(p.theta))


def as_cartesian(p: Point) -> CartesianPoint:
    return p if isinstance(p, CartesianPoint) else polar_to_cart(p)


def as_polar(p: Point) -> PolarPoint:
    return p if isinstance(p, PolarPoint) else cart_to_polar(p)


def element_distances(cfg: ArrayConfig, p: Point) -> np.ndarray:
    """Distances from a point to every array element (length N)."""
    c = as_cartesian(p)
    return np.hypot(c.z, c.x - cfg.element_positions)


def element_distance_cart(cfg: ArrayConfig, n: float, p: CartesianPoint) -> float:
    """Distance from point p to element n (symmetric unit-step index)."""
    return math.hypot(p.z, p.x - n * cfg.spacing_m)


def steering_vector(cfg: ArrayConfig, p: Point) -> np.ndarray:
    """Array response at a point: entry n = exp(-+j k_c D_n) / D_n.

    Cartesian input uses the -j phase convention, polar input the +j one
    (both conventions appear in the near-field literature); magnitudes are
    identical since the underlying distances are the same geometry.
    """
    d = element_distances(cfg, p)
    if np.any(d <= 0.0):
        raise OnArrayError("point coincides with an array element (zero distance)")
    sign = +1.0 if isinstance(p, PolarPoint) else -1.0
    return np.exp(1j * sign * cfg.wavenumber * d) / d


def model_steering(cfg: ArrayConfig, p: Point) -> np.ndarray:
    """Steering vector in the reconstruction model's fixed (Cartesian) form.

    Refinement, LS gain fitting and channel reconstruction always evaluate
    this form at the physical location, whatever coordinate parameterization
    the estimate carries.
    """
    return steering_vector(cfg, as_cartesian(p))


@dataclass(frozen=True)
class PathParam:
    position: Point
    gain: complex
    is_los: bool = False

    def __post_init__(self):
        if not (cmath.isfinite(self.gain) and self.gain != 0):
            raise ValueError("path gain must be finite and nonzero")


@dataclass(frozen=True)
class Scene:
    """Ground-truth multipath scene: paths, SNR and the implied noise power."""

    paths: tuple[PathParam, ...]
    snr_db: float
    tx_power: float = 1.0
    noise_var: float = 0.0

    def __post_init__(self):
        if len(self.paths) < 1:
            raise ValueError("a scene needs at least one path")
        if self.tx_power <= 0:
            raise ValueError("tx_power must be positive")
        if self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")
        object.__setattr__(self, "paths", tuple(self.paths))

    @classmethod
    def from_snr(cls, cfg: ArrayConfig, paths, snr_db: float,
                 tx_power: float = 1.0) -> "Scene":
        """Derive noise_var from the array-averaged post-channel SNR.

        snr_db = 10 log10(P ||h||^2 / (N sigma^2)) for a unit pilot.
        """
        paths = tuple(paths)
        h = _synthesize(cfg, paths)
        sig = tx_power * float(np.vdot(h, h).real)
        noise_var = sig / (cfg.n_antennas * 10.0 ** (snr_db / 10.0))
        return cls(paths=paths, snr_db=snr_db, tx_power=tx_power, noise_var=noise_var)


def _synthesize(cfg: ArrayConfig, paths) -> np.ndarray:
    h = np.zeros(cfg.n_antennas, dtype=complex)
    for p in paths:
        h += p.gain * steering_vector(cfg, p.position)
    return h


def synthesize_channel(cfg: ArrayConfig, scene: Scene) -> np.ndarray:
    """h = sum_s g_s a(p_s)."""
    return _synthesize(cfg, scene.paths)


def reconstruct_channel(cfg: ArrayConfig, positions, gains) -> np.ndarray:
    """Channel implied by estimated (position, gain) pairs, model form."""
    h = np.zeros(cfg.n_antennas, dtype=complex)
    for p, g in zip(positions, gains):
        h += g * model_steering(cfg, p)
    return h


def received_signal(cfg: ArrayConfig, scene: Scene, rng_seed: int) -> np.ndarray:
    """y = sqrt(P) h + n with circularly-symmetric complex Gaussian noise.

    Per-entry complex variance is scene.noise_var (sigma^2/2 per real
    component); deterministic for a given rng_seed.
    """
    h = synthesize_channel(cfg, scene)
    y = math.sqrt(scene.tx_power) * h
    if scene.noise_var > 0:
        rng = np.random.default_rng(rng_seed)
        s = math.sqrt(scene.noise_var / 2.0)
        n = cfg.n_antennas
        y = y + s * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return y


# --- serialization ---------------------------------------------------------

def scene_to_json(scene: Scene, seed: int) -> str:
    obj = {
        "paths": [
            {
                "z": as_cartesian(p.position).z,
                "x": as_cartesian(p.position).x,
                "gain_re": p.gain.real,
                "gain_im": p.gain.imag,
            }
            for p in scene.paths
        ],
        "snr_db": scene.snr_db,
        "seed": seed,
    }
    return json.dumps(obj)


def scene_from_json(cfg: ArrayConfig, text: str) -> tuple[Scene, int]:
    """Load a scene; unit pilot power assumed, LoS = largest-|gain| path."""
    obj = json.loads(text)
    raw = [
        (CartesianPoint(z=e["z"], x=e["x"]), complex(e["gain_re"], e["gain_im"]))
        for e in obj["paths"]
    ]
    los_idx = max(range(len(raw)), key=lambda i: abs(raw[i][1]))
    paths = [
        PathParam(position=pos, gain=g, is_los=(i == los_idx))
        for i, (pos, g) in enumerate(raw)
    ]
    scene = Scene.from_snr(cfg, paths, snr_db=obj["snr_db"])
    return scene, int(obj["seed"])


def write_complex_vector(path, v: np.ndarray) -> None:
    """Binary vector file: magic, u32 LE length, interleaved (re, im) f64 LE."""
    v = np.asarray(v, dtype=complex).ravel()
    inter = np.empty(2 * v.size, dtype="<f8")
    inter[0::2] = v.real
    inter[1::2] = v.imag
    with open(path, "wb") as f:
        f.write(COMPLEX_VEC_MAGIC)
        f.write(struct.pack("<I", v.size))
        f.write(inter.tobytes())


def read_complex_vector(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != COMPLEX_VEC_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {COMPLEX_VEC_MAGIC!r}")
        (n,) = struct.unpack("<I", f.read(4))
        inter = np.frombuffer(f.read(16 * n), dtype="<f8")
    if inter.size != 2 * n:
        raise ValueError("truncated complex vector file")
    return (inter[0::2] + 1j * inter[1::2]).astype(complex)
