"""Cartesian and polar codebooks and the transformed-domain projection.

Codewords are phase-only: entry n of the codeword at grid point p is
exp(+j k_c d_n(p)) where d_n is the element distance. The transform is the
plain matrix product y_T = U_T y (no conjugation); conjugation lives in the
refiner's correlation coefficient. Grids store their realized point counts:
an axis with count K spans [min, max) with step (max - min) / K, so a 512
count at 10-lambda step covers [0, 5120 lambda) with exactly 512 samples.
The polar distance axis is sampled logarithmically (constant ratio).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .channel import ArrayConfig, CartesianPoint, PolarPoint, Point

CODEBOOK_MAGIC = b"NFCB0001"
_DOMAIN_TAGS = {"cartesian": 0, "polar": 1}
_TAG_DOMAINS = {v: k for k, v in _DOMAIN_TAGS.items()}


class InvalidRegionError(ValueError):
    pass


@dataclass(frozen=True)
class CartesianRegion:
    """Observed region [z_min, z_max) x [x_min, x_max) with grid counts."""

    z_min: float
    z_max: float
    x_min: float
    x_max: float
    n_z: int
    n_x: int

    def __post_init__(self):
        if not (self.z_max > self.z_min and self.x_max > self.x_min):
            raise InvalidRegionError("region max must exceed min on every axis")
        if self.n_z < 2 or self.n_x < 2:
            raise InvalidRegionError("grid counts must be >= 2")

    @property
    def domain(self) -> str:
        return "cartesian"

    @property
    def step_z(self) -> float:
        return (self.z_max - self.z_min) / self.n_z

    @property
    def step_x(self) -> float:
        return (self.x_max - self.x_min) / self.n_x

    def axis1_values(self) -> np.ndarray:
        return self.z_min + np.arange(self.n_z) * self.step_z

    def axis2_values(self) -> np.ndarray:
        return self.x_min + np.arange(self.n_x) * self.step_x

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_z, self.n_x)

    def bounds(self) -> tuple[float, float, float, float]:
        return (self.z_min, self.z_max, self.x_min, self.x_max)

    def to_dict(self) -> dict:
        return {
            "z_min": self.z_min, "z_max": self.z_max,
            "x_min": self.x_min, "x_max": self.x_max,
            "n_z": self.n_z, "n_x": self.n_x,
        }


@dataclass(frozen=True)
class PolarRegion:
    """Region [r_min, r_max) x [theta_min, theta_max); r sampled in log scale."""

    r_min: float
    r_max: float
    theta_min: float
    theta_max: float
    n_r: int
    n_theta: int

    def __post_init__(self):
        if self.r_min <= 0:
            raise InvalidRegionError("r_min must be positive")
        if not (self.r_max > self.r_min and self.theta_max > self.theta_min):
            raise InvalidRegionError("region max must exceed min on every axis")
        if self.n_r < 2 or self.n_theta < 2:
            raise InvalidRegionError("grid counts must be >= 2")

    @property
    def domain(self) -> str:
        return "polar"

    @property
    def step_log_r(self) -> float:
        return (math.log10(self.r_max) - math.log10(self.r_min)) / self.n_r

    @property
    def step_theta(self) -> float:
        return (self.theta_max - self.theta_min) / self.n_theta

    def axis1_values(self) -> np.ndarray:
        return 10.0 ** (math.log10(self.r_min) + np.arange(self.n_r) * self.step_log_r)

    def axis2_values(self) -> np.ndarray:
        return self.theta_min + np.arange(self.n_theta) * self.step_theta

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_r, self.n_theta)

    def bounds(self) -> tuple[float, float, float, float]:
        return (self.r_min, self.r_max, self.theta_min, self.theta_max)

    def to_dict(self) -> dict:
        return {
            "r_min": self.r_min, "r_max": self.r_max,
            "theta_min": self.theta_min, "theta_max": self.theta_max,
            "n_r": self.n_r, "n_theta": self.n_theta,
        }


Region = CartesianRegion | PolarRegion


def region_from_dict(d: dict) -> Region:
    if "z_min" in d:
        return CartesianRegion(**d)
    return PolarRegion(**d)


@dataclass(frozen=True)
class Codebook:
    """Phase-only codeword matrix with its grid geometry.

    codewords has one row per grid point, row index i = i1 * n2 + i2 with
    axis 1 (z or r) slow and axis 2 (x or theta) fast.
    """

    domain: str
    region: Region
    codewords: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.region.shape

    @property
    def n_rows(self) -> int:
        return self.codewords.shape[0]

    def grid_point(self, row: int) -> Point:
        n1, n2 = self.region.shape
        i1, i2 = divmod(row, n2)
        a1 = self.region.axis1_values()[i1]
        a2 = self.region.axis2_values()[i2]
        if self.domain == "cartesian":
            return CartesianPoint(z=float(a1), x=float(a2))
        return PolarPoint(r=float(a1), theta=float(a2))


@dataclass(frozen=True)
class TransformedSignal:
    """Reshaped transformed-domain signal Y_T with its grid metadata."""

    values: np.ndarray
    domain: str
    region: Region

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _grid_cartesian_coords(region: Region) -> tuple[np.ndarray, np.ndarray]:
    """Per-grid-point (z, x) arrays of shape (n1, n2)."""
    a1 = region.axis1_values()
    a2 = region.axis2_values()
    if region.domain == "cartesian":
        z = np.broadcast_to(a1[:, None], region.shape)
        x = np.broadcast_to(a2[None, :], region.shape)
    else:
        z = a1[:, None] * np.cos(a2)[None, :]
        x = a1[:, None] * np.sin(a2)[None, :]
    return z, x


def _build(cfg: ArrayConfig, region: Region) -> Codebook:
    z, x = _grid_cartesian_coords(region)
    pos = cfg.element_positions
    # distances per (grid point, element): (n1, n2, N)
    d = np.sqrt(z[..., None] ** 2 + (x[..., None] - pos) ** 2)
    words = np.exp(1j * cfg.wavenumber * d).reshape(-1, cfg.n_antennas)
    return Codebook(domain=region.domain, region=region, codewords=words)


def build_cartesian_codebook(cfg: ArrayConfig, region: CartesianRegion) -> Codebook:
    """Uniform z/x grid, codeword entry n = exp(+j k_c d_n(z, x))."""
    return _build(cfg, region)


def build_polar_codebook(cfg: ArrayConfig, region: PolarRegion) -> Codebook:
    """Uniform theta grid, logarithmic r grid; same phase-only codewords."""
    return _build(cfg, region)


def transform(codebook: Codebook, y: np.ndarray) -> TransformedSignal:
    """y_T = U_T y, reshaped with axis 1 (z or r) slow, axis 2 fast."""
    y = np.asarray(y)
    if y.shape != (codebook.codewords.shape[1],):
        raise ValueError(
            f"signal length {y.shape} does not match codebook columns "
            f"{codebook.codewords.shape[1]}")
    vals = (codebook.codewords @ y).reshape(codebook.shape)
    return TransformedSignal(values=vals, domain=codebook.domain,
                             region=codebook.region)


def property1_argmax(codebook: Codebook, y: np.ndarray) -> Point:
    """Physical coordinates of the codebook row maximizing |U_T y|.

    Ties break toward the lowest row index. For a single noiseless path this
    lands within one grid cell of the true position (intersection-point
    property of the transformed-domain image).
    """
    y = np.asarray(y)
    if not np.any(y):
        raise ValueError("property1_argmax needs a nonzero signal")
    mags = np.abs(codebook.codewords @ y)
    return codebook.grid_point(int(np.argmax(mags)))


# --- cache file -------------------------------------------------------------

def write_codebook(path, cb: Codebook) -> None:
    """Cache: magic, domain tag u8, 4 region f64, 2 counts u32, rows f64 pairs."""
    bounds = cb.region.bounds()
    n1, n2 = cb.region.shape
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<B", _DOMAIN_TAGS[cb.domain]))
        f.write(struct.pack("<4d", *bounds))
        f.write(struct.pack("<2I", n1, n2))
        inter = np.empty(cb.codewords.size * 2, dtype="<f8")
        flat = cb.codewords.ravel()
        inter[0::2] = flat.real
        inter[1::2] = flat.imag
        f.write(inter.tobytes())


def read_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CODEBOOK_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {CODEBOOK_MAGIC!r}")
        (tag,) = struct.unpack("<B", f.read(1))
        bounds = struct.unpack("<4d", f.read(32))
        n1, n2 = struct.unpack("<2I", f.read(8))
        payload = f.read()
    domain = _TAG_DOMAINS[tag]
    if domain == "cartesian":
        region = CartesianRegion(z_min=bounds[0], z_max=bounds[1],
                                 x_min=bounds[2], x_max=bounds[3],
                                 n_z=n1, n_x=n2)
    else:
        region = PolarRegion(r_min=bounds[0], r_max=bounds[1],
                             theta_min=bounds[2], theta_max=bounds[3],
                             n_r=n1, n_theta=n2)
    inter = np.frombuffer(payload, dtype="<f8")
    rows = n1 * n2
    if inter.size % (2 * rows) != 0:
        raise ValueError("codeword payload size inconsistent with grid counts")
    n_antennas = inter.size // (2 * rows)
    words = (inter[0::2] + 1j * inter[1::2]).reshape(rows, n_antennas)
    return Codebook(domain=domain, region=region, codewords=words)
