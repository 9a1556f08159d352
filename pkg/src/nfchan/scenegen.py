"""Stratified random scene generation and dataset emission.

The x span of the observed region is split into S vertical strips; path s is
drawn uniformly from strip s shrunk on each side by the guard margin
((1/h_ratio - 1)/2) * H_interval, where H_interval = strip_width * h_ratio,
so the usable width of every strip is exactly H_interval. Depths are drawn
uniformly from [0.2, 0.8] * z_max. The LoS path has unit gain magnitude and
is assigned to a uniformly random strip index; NLoS magnitudes are uniform
in a configurable band with i.i.d. uniform phases. Flexible mode first draws
the path count S uniformly from {1..s_max} and then occupies S of the s_max
strips.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import ArrayConfig, CartesianPoint, PathParam, Scene, received_signal
from .codebook import CartesianRegion, Codebook, transform
from .imaging import physical_to_pixel, to_image, write_labels, write_pgm

MANIFEST_SCHEMA = "nfds-1"


@dataclass(frozen=True)
class SceneGenConfig:
    array: ArrayConfig
    region: CartesianRegion
    mode: str = "fixed"  # fixed | flexible
    s_fixed: int = 3
    s_max: int = 4
    h_ratio: float = 0.5
    snr_range_db: tuple[float, float] = (10.0, 26.0)
    count: int = 1
    seed: int = 0
    los_gain: float = 1.0
    nlos_gain_range: tuple[float, float] = (0.3, 0.9)

    def __post_init__(self):
        if self.mode not in ("fixed", "flexible"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (0.0 < self.h_ratio <= 1.0):
            raise ValueError("h_ratio must be in (0, 1]")
        if self.mode == "fixed" and self.s_fixed < 1:
            raise ValueError("s_fixed must be >= 1")
        if self.mode == "flexible" and self.s_max < 1:
            raise ValueError("s_max must be >= 1")

    @property
    def n_strips(self) -> int:
        return self.s_fixed if self.mode == "fixed" else self.s_max


def strip_bounds(region: CartesianRegion, n_strips: int, h_ratio: float,
                 strip: int) -> tuple[float, float]:
    """Usable [lo, hi] of a strip after removing the guard margins."""
    width = (region.x_max - region.x_min) / n_strips
    h_interval = width * h_ratio
    margin = 0.5 * (1.0 / h_ratio - 1.0) * h_interval
    lo = region.x_min + strip * width + margin
    hi = region.x_min + (strip + 1) * width - margin
    return lo, hi


def _sample(cfg: SceneGenConfig, index: int) -> tuple[Scene, list[int]]:
    rng = np.random.default_rng([cfg.seed, index])
    if cfg.mode == "fixed":
        n_paths = cfg.s_fixed
        strips = list(range(n_paths))
    else:
        n_paths = int(rng.integers(1, cfg.s_max + 1))
        strips = sorted(rng.choice(cfg.s_max, size=n_paths, replace=False).tolist())
    los_at = int(rng.integers(n_paths))

    paths = []
    for i, strip in enumerate(strips):
        lo, hi = strip_bounds(cfg.region, cfg.n_strips, cfg.h_ratio, strip)
        x = rng.uniform(lo, hi)
        z = rng.uniform(0.2 * cfg.region.z_max, 0.8 * cfg.region.z_max)
        if i == los_at:
            mag = cfg.los_gain
        else:
            mag = rng.uniform(*cfg.nlos_gain_range)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        paths.append(PathParam(position=CartesianPoint(z=z, x=x),
                               gain=mag * complex(math.cos(phase), math.sin(phase)),
                               is_los=(i == los_at)))
    snr = rng.uniform(*cfg.snr_range_db)
    scene = Scene.from_snr(cfg.array, paths, snr_db=snr)
    return scene, strips


def sample_scene(cfg: SceneGenConfig, index: int) -> Scene:
    """Deterministic stratified scene for a dataset index."""
    return _sample(cfg, index)[0]


def signal_seed(seed: int, index: int) -> int:
    """Deterministic per-sample noise seed for received_signal."""
    return int(np.random.SeedSequence([seed, index, 0xA5]).generate_state(1)[0])


def emit_dataset(cfg: SceneGenConfig, codebook: Codebook, out_dir,
                 splits: dict[str, int] | None = None) -> dict:
    """Write PGM images, a JSONL label sidecar and a manifest; returns the manifest.

    Label slots follow strips: fixed mode has s_fixed slots (all present),
    flexible mode s_max slots with absent strips recorded as null keypoints.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if splits is None:
        splits = {"train": cfg.count}
    if sum(splits.values()) != cfg.count:
        raise ValueError("split sizes must sum to the sample count")

    records = []
    files = []
    snrs = []
    for index in range(cfg.count):
        scene, strips = _sample(cfg, index)
        y = received_signal(cfg.array, scene, rng_seed=signal_seed(cfg.seed, index))
        img = to_image(transform(codebook, y))
        name = f"img_{index:05d}.pgm"
        write_pgm(out / name, img)
        files.append(name)
        snrs.append(scene.snr_db)

        n_slots = cfg.n_strips
        keypoints = [None] * n_slots
        positions = [None] * n_slots
        present = [False] * n_slots
        for path, strip in zip(scene.paths, strips):
            row, col = physical_to_pixel(img, path.position)
            keypoints[strip] = [row, col]
            positions[strip] = [path.position.z, path.position.x]
            present[strip] = True
        records.append({
            "image": name,
            "keypoints_px": keypoints,
            "positions": positions,
            "present": present,
            "snr_db": scene.snr_db,
        })

    write_labels(out / "labels.jsonl", records)

    split_files = {}
    start = 0
    for split_name, n in splits.items():
        split_files[split_name] = files[start:start + n]
        start += n

    manifest = {
        "schema": MANIFEST_SCHEMA,
        "mode": cfg.mode,
        "count": cfg.count,
        "seed": cfg.seed,
        "n_slots": cfg.n_strips,
        "image_size": [codebook.region.shape[0], codebook.region.shape[1]],
        "domain": codebook.domain,
        "region": codebook.region.to_dict(),
        "array": {
            "n_antennas": cfg.array.n_antennas,
            "carrier_hz": cfg.array.carrier_hz,
            "spacing_m": cfg.array.spacing_m,
        },
        "snr_range_db": list(cfg.snr_range_db),
        "snr_db": snrs,
        "splits": split_files,
        "labels": "labels.jsonl",
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    return manifest
