"""Grayscale channel images and pixel <-> physical coordinate maps.

Pixel value = round((1 - |Y_T| / max|Y_T|) * 255): 0 (black) marks the
strongest transformed-domain energy, 255 (white) marks zero energy. Image
rows follow the first transform axis (z or r, slow), columns the second
(x or theta). Pixel row v in [0, I_H] maps affinely onto the first axis
span and column u in [0, I_W] onto the second; the polar radius uses the
same affine map (linear in r) even though the codebook samples r
logarithmically, matching the detector's de-normalization convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .channel import CartesianPoint, PolarPoint, Point
from .codebook import Region, TransformedSignal, region_from_dict


class DegenerateImageError(ValueError):
    """All-zero transformed signal cannot be normalized into an image."""


class PixelRangeError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelImage:
    pixels: np.ndarray  # uint8, (I_H, I_W)
    domain: str
    region: Region

    @property
    def i_h(self) -> int:
        return self.pixels.shape[0]

    @property
    def i_w(self) -> int:
        return self.pixels.shape[1]


def _round_half_up(a: np.ndarray) -> np.ndarray:
    return np.floor(a + 0.5)


def to_image(t: TransformedSignal) -> ChannelImage:
    """Normalize |Y_T| and invert to a grayscale image."""
    mag = np.abs(t.values)
    peak = mag.max()
    if peak == 0.0:
        raise DegenerateImageError("transformed signal is identically zero")
    pix = _round_half_up((1.0 - mag / peak) * 255.0)
    pix = np.clip(pix, 0, 255).astype(np.uint8)
    return ChannelImage(pixels=pix, domain=t.domain, region=t.region)


def resample(img: ChannelImage, i_w: int, i_h: int) -> ChannelImage:
    """Bilinear resample to (i_h, i_w); identity when sizes already match."""
    if i_w < 2 or i_h < 2:
        raise ValueError("target dims must be >= 2x2")
    if (img.i_h, img.i_w) == (i_h, i_w):
        return ChannelImage(pixels=img.pixels.copy(), domain=img.domain,
                            region=img.region)
    src = img.pixels.astype(np.float64)
    h, w = src.shape
    # align corners: first/last samples map onto first/last source samples
    rr = np.arange(i_h) * (h - 1) / (i_h - 1)
    cc = np.arange(i_w) * (w - 1) / (i_w - 1)
    r0 = np.clip(np.floor(rr).astype(int), 0, h - 2)
    c0 = np.clip(np.floor(cc).astype(int), 0, w - 2)
    fr = (rr - r0)[:, None]
    fc = (cc - c0)[None, :]
    a = src[np.ix_(r0, c0)]
    b = src[np.ix_(r0, c0 + 1)]
    c = src[np.ix_(r0 + 1, c0)]
    d = src[np.ix_(r0 + 1, c0 + 1)]
    out = (a * (1 - fr) * (1 - fc) + b * (1 - fr) * fc
           + c * fr * (1 - fc) + d * fr * fc)
    pix = np.clip(_round_half_up(out), 0, 255).astype(np.uint8)
    return ChannelImage(pixels=pix, domain=img.domain, region=img.region)


def pixel_to_physical(img: ChannelImage, px: tuple[float, float]) -> Point:
    """Map a (row, col) pixel coordinate to physical coordinates."""
    row, col = px
    if not (0.0 <= row <= img.i_h and 0.0 <= col <= img.i_w):
        raise PixelRangeError(f"pixel {px} outside [0,{img.i_h}]x[0,{img.i_w}]")
    lo1, hi1, lo2, hi2 = img.region.bounds()
    a1 = row / img.i_h * (hi1 - lo1) + lo1
    a2 = col / img.i_w * (hi2 - lo2) + lo2
    if img.domain == "cartesian":
        return CartesianPoint(z=a1, x=a2)
    return PolarPoint(r=a1, theta=a2)


def physical_to_pixel(img: ChannelImage, p: Point) -> tuple[float, float]:
    """Inverse of pixel_to_physical, used for label generation."""
    lo1, hi1, lo2, hi2 = img.region.bounds()
    if img.domain == "cartesian":
        a1, a2 = p.z, p.x
    else:
        a1, a2 = p.r, p.theta
    row = (a1 - lo1) / (hi1 - lo1) * img.i_h
    col = (a2 - lo2) / (hi2 - lo2) * img.i_w
    return (row, col)


# --- PGM files with a JSON metadata comment ---------------------------------

def write_pgm(path, img: ChannelImage) -> None:
    meta = {
        "domain": img.domain,
        "region": img.region.to_dict(),
        "i_w": img.i_w,
        "i_h": img.i_h,
    }
    header = (b"P5\n# " + json.dumps(meta, sort_keys=True).encode()
              + b"\n" + f"{img.i_w} {img.i_h}\n255\n".encode())
    with open(path, "wb") as f:
        f.write(header)
        f.write(img.pixels.tobytes())


def read_pgm(path) -> ChannelImage:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ValueError("not a binary PGM file")
    # tokenize the header; the single comment line carries the JSON metadata
    meta = None
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comment = data[pos + 1:end].strip()
            if comment:
                meta = json.loads(comment.decode())
            pos = end + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("expected maxval 255")
    pix = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)
    if meta is None:
        raise ValueError("PGM is missing the channel-image metadata comment")
    region = region_from_dict(meta["region"])
    return ChannelImage(pixels=pix.copy(), domain=meta["domain"], region=region)


# --- label sidecars ----------------------------------------------------------

def write_labels(path, records: list[dict]) -> None:
    """JSON-lines sidecar: one record per scene."""
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True))
            f.write("\n")


def read_labels(path) -> list[dict]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
