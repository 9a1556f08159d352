"""Coarse keypoint extraction from channel images.

Two detectors share one output type: a classical non-maximum-suppression
peak picker, and a forward-only inference engine for the keypoint CNN
(stacked conv blocks and inverted residual blocks, global average pooling,
two fully connected heads). Weights arrive batch-norm-folded in the CKW1
binary format together with a ckarch-1 JSON architecture description, so
the engine only needs conv / add / ReLU / average-pool / matmul / logistic.

Input convention: pixels are scaled to [0, 1] (value / 255) as a single
channel. Fixed mode emits 2S normalized (row, col) pairs scaled by
(I_H, I_W); flexible mode emits 3*S_max values per image whose third slot
is a confidence logit passed through the logistic function and thresholded.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter

from .imaging import ChannelImage, pixel_to_physical

log = logging.getLogger(__name__)

ARCH_SCHEMA = "ckarch-1"
WEIGHT_MAGIC = b"CKW1"


class ArchError(ValueError):
    pass


class WeightError(ValueError):
    pass


class CorruptedWeightsError(ValueError):
    """Non-finite activations during the forward pass."""


@dataclass(frozen=True)
class KeypointPrediction:
    points_px: list[tuple[float, float]]
    scores: list[float] | None = None


# --- architecture -------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str  # cb | irb | irbu | avgpool | fc
    out: int = 0
    stride: int = 1
    t: int = 1
    repeat: int = 1

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("cb", "irb", "irbu", "fc"):
            d["out"] = self.out
        if self.kind in ("cb", "irb", "irbu"):
            d["stride"] = self.stride
        if self.kind in ("irb", "irbu"):
            d["t"] = self.t
        if self.kind == "irbu":
            d["repeat"] = self.repeat
        return d


@dataclass(frozen=True)
class NetArch:
    mode: str  # fixed | flexible
    n_keypoints: int  # S (fixed) or S_max (flexible)
    input_shape: tuple[int, int, int]  # (C, H, W)
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if self.mode not in ("fixed", "flexible"):
            raise ArchError(f"unknown mode {self.mode!r}")
        expected = (2 if self.mode == "fixed" else 3) * self.n_keypoints
        final = self.layers[-1]
        if final.kind != "fc" or final.out != expected:
            raise ArchError(
                f"final layer must be fc with out={expected}, got {final}")
        self.layer_dims()  # validates the whole chain

    @property
    def out_width(self) -> int:
        return self.layers[-1].out

    def layer_dims(self) -> list[tuple]:
        """Shape after every layer; raises ArchError on an inconsistent chain."""
        shape: tuple = self.input_shape
        dims = []
        flat = False
        for spec in self.layers:
            if spec.kind in ("cb", "irb", "irbu"):
                if flat:
                    raise ArchError("conv layer after flattening")
                c, h, w = shape
                reps = spec.repeat if spec.kind == "irbu" else 1
                for r in range(reps):
                    s = spec.stride if r == 0 else 1
                    h = (h + 2 - 3) // s + 1  # 3x3, pad 1
                    w = (w + 2 - 3) // s + 1
                shape = (spec.out, h, w)
            elif spec.kind == "avgpool":
                if flat:
                    raise ArchError("avgpool after flattening")
                shape = (shape[0],)
                flat = True
            elif spec.kind == "fc":
                if not flat:
                    raise ArchError("fc before pooling/flattening")
                shape = (spec.out,)
            else:
                raise ArchError(f"unknown layer kind {spec.kind!r}")
            dims.append(shape)
        return dims

    def to_json(self) -> str:
        return json.dumps({
            "schema": ARCH_SCHEMA,
            "mode": self.mode,
            "n_keypoints": self.n_keypoints,
            "input": list(self.input_shape),
            "layers": [s.to_dict() for s in self.layers],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "NetArch":
        obj = json.loads(text)
        if obj.get("schema") != ARCH_SCHEMA:
            raise ArchError(f"expected schema {ARCH_SCHEMA}, got {obj.get('schema')}")
        layers = tuple(LayerSpec(**d) for d in obj["layers"])
        return cls(mode=obj["mode"], n_keypoints=obj["n_keypoints"],
                   input_shape=tuple(obj["input"]), layers=layers)


def desk_arch(mode: str, n_keypoints: int, input_hw: int = 128) -> NetArch:
    """Desk-scale preset: two conv blocks, inverted-residual backbone,
    global average pool and a two-layer head."""
    out = (2 if mode == "fixed" else 3) * n_keypoints
    layers = (
        LayerSpec("cb", out=64, stride=2),
        LayerSpec("cb", out=64, stride=1),
        LayerSpec("irb", out=64, stride=2, t=2),
        LayerSpec("irbu", out=64, stride=2, t=2, repeat=2),
        LayerSpec("irb", out=128, stride=1, t=4),
        LayerSpec("irbu", out=128, stride=1, t=4, repeat=2),
        LayerSpec("avgpool"),
        LayerSpec("fc", out=256),
        LayerSpec("fc", out=out),
    )
    return NetArch(mode=mode, n_keypoints=n_keypoints,
                   input_shape=(1, input_hw, input_hw), layers=layers)


# --- weight slots and the CKW1 format ------------------------------------------

def expected_weight_slots(arch: NetArch) -> dict[str, tuple[int, ...]]:
    """name -> shape for every parameter the engine needs (BN folded)."""
    slots: dict[str, tuple[int, ...]] = {}
    shape = arch.input_shape
    flat_dim = None
    for i, spec in enumerate(arch.layers):
        base = f"layers.{i}"
        if spec.kind == "cb":
            slots[f"{base}.conv.weight"] = (spec.out, shape[0], 3, 3)
            slots[f"{base}.conv.bias"] = (spec.out,)
            shape = (spec.out,) + _conv_hw(shape[1:], spec.stride)
        elif spec.kind in ("irb", "irbu"):
            reps = spec.repeat if spec.kind == "irbu" else 1
            for r in range(reps):
                prefix = f"{base}.{r}" if spec.kind == "irbu" else base
                c_in = shape[0]
                hidden = spec.t * c_in
                s = spec.stride if r == 0 else 1
                slots[f"{prefix}.expand.weight"] = (hidden, c_in, 1, 1)
                slots[f"{prefix}.expand.bias"] = (hidden,)
                slots[f"{prefix}.dw.weight"] = (hidden, 1, 3, 3)
                slots[f"{prefix}.dw.bias"] = (hidden,)
                slots[f"{prefix}.project.weight"] = (spec.out, hidden, 1, 1)
                slots[f"{prefix}.project.bias"] = (spec.out,)
                shape = (spec.out,) + _conv_hw(shape[1:], s)
        elif spec.kind == "avgpool":
            flat_dim = shape[0]
        elif spec.kind == "fc":
            slots[f"{base}.weight"] = (spec.out, flat_dim)
            slots[f"{base}.bias"] = (spec.out,)
            flat_dim = spec.out
    return slots


def _conv_hw(hw: tuple[int, int], stride: int) -> tuple[int, int]:
    h, w = hw
    return ((h + 2 - 3) // stride + 1, (w + 2 - 3) // stride + 1)


@dataclass
class WeightBundle:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def validate(self, arch: NetArch) -> None:
        slots = expected_weight_slots(arch)
        missing = sorted(set(slots) - set(self.tensors))
        extra = sorted(set(self.tensors) - set(slots))
        if missing or extra:
            raise WeightError(f"weight bundle mismatch: missing={missing}, "
                              f"extra={extra}")
        for name, shape in slots.items():
            got = self.tensors[name].shape
            if tuple(got) != tuple(shape):
                raise WeightError(f"{name}: expected shape {shape}, got {got}")


def write_ckw(path, bundle: WeightBundle) -> None:
    """CKW1: magic, u32 count; per tensor u16 name len, name, u8 rank,
    rank u32 dims, f32 row-major data (all little-endian)."""
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack("<I", len(bundle.tensors)))
        for name, arr in bundle.tensors.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_ckw(path) -> WeightBundle:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHT_MAGIC:
            raise WeightError(f"bad magic {magic!r}, expected {WEIGHT_MAGIC!r}")
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims)
            tensors[name] = data.astype(np.float32)
    return WeightBundle(tensors=tensors)


def fold_conv_bn(weight: np.ndarray, bias: np.ndarray | None, gamma: np.ndarray,
                 beta: np.ndarray, mean: np.ndarray, var: np.ndarray,
                 eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Fold a trailing batch-norm into conv weight and bias (the CKW1
    convention: exported weights are already folded)."""
    scale = gamma / np.sqrt(var + eps)
    w = weight * scale.reshape(-1, *([1] * (weight.ndim - 1)))
    b = bias if bias is not None else np.zeros_like(beta)
    return w.astype(weight.dtype), ((b - mean) * scale + beta).astype(weight.dtype)


# --- forward pass ---------------------------------------------------------------

def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """3x3 or 1x1 conv, padding (k-1)//2, float32 via im2col matmul."""
    o, c, kh, kw = w.shape
    pad = (kh - 1) // 2
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    _, hs, ws, _, _ = win.shape
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, hs * ws)
    out = w.reshape(o, c * kh * kw).astype(np.float32) @ cols.astype(np.float32)
    return out.reshape(o, hs, ws) + b.reshape(-1, 1, 1)


def _dwconv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    """Depthwise 3x3 conv, padding 1."""
    c, _, kh, kw = w.shape
    x = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    out = np.einsum("chwkl,ckl->chw", win.astype(np.float32),
                    w[:, 0].astype(np.float32))
    return out + b.reshape(-1, 1, 1)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def logistic(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _irb_forward(x, weights, prefix: str, stride: int) -> np.ndarray:
    """Inverted residual: PW expand -> ReLU -> DW 3x3 -> ReLU -> PW project,
    with the skip connection when stride is 1 and channels match."""
    h = _relu(_conv2d(x, weights[f"{prefix}.expand.weight"],
                      weights[f"{prefix}.expand.bias"], 1))
    h = _relu(_dwconv2d(h, weights[f"{prefix}.dw.weight"],
                        weights[f"{prefix}.dw.bias"], stride))
    h = _conv2d(h, weights[f"{prefix}.project.weight"],
                weights[f"{prefix}.project.bias"], 1)
    if stride == 1 and h.shape == x.shape:
        h = h + x
    return h


def forward_raw(arch: NetArch, bundle: WeightBundle, pixels: np.ndarray) -> np.ndarray:
    """Raw final-layer outputs for a [0,255] uint8 (or [0,1] float) image."""
    bundle.validate(arch)
    x = pixels.astype(np.float32)
    if pixels.dtype == np.uint8:
        x = x / np.float32(255.0)
    if x.ndim == 2:
        x = x[None, :, :]
    if x.shape != arch.input_shape:
        raise ArchError(f"input shape {x.shape} does not match arch "
                        f"{arch.input_shape}")
    w = bundle.tensors
    n_layers = len(arch.layers)
    for i, spec in enumerate(arch.layers):
        base = f"layers.{i}"
        if spec.kind == "cb":
            x = _relu(_conv2d(x, w[f"{base}.conv.weight"],
                              w[f"{base}.conv.bias"], spec.stride))
        elif spec.kind == "irb":
            x = _irb_forward(x, w, base, spec.stride)
        elif spec.kind == "irbu":
            for r in range(spec.repeat):
                s = spec.stride if r == 0 else 1
                x = _irb_forward(x, w, f"{base}.{r}", s)
        elif spec.kind == "avgpool":
            x = x.mean(axis=(1, 2))
        elif spec.kind == "fc":
            x = w[f"{base}.weight"].astype(np.float32) @ x \
                + w[f"{base}.bias"].astype(np.float32)
            if i < n_layers - 1:
                x = _relu(x)
        if not np.all(np.isfinite(x)):
            raise CorruptedWeightsError(f"non-finite activation after layer {i}")
    return x


def infer(arch: NetArch, bundle: WeightBundle, img: ChannelImage, mode: str,
          tau: float = 0.3) -> KeypointPrediction:
    """Run the CNN on a channel image and decode keypoints.

    Fixed mode: 2S outputs as S normalized (row, col) pairs scaled by
    (I_H, I_W). Flexible mode: 3*S_max outputs; scores pass through the
    logistic and predictions below tau are dropped.
    """
    if mode != arch.mode:
        raise ArchError(f"arch is {arch.mode!r}, inference requested {mode!r}")
    out = forward_raw(arch, bundle, img.pixels)
    s = arch.n_keypoints
    if mode == "fixed":
        pts = out.reshape(s, 2)
        points = [(float(r) * img.i_h, float(c) * img.i_w) for r, c in pts]
        return KeypointPrediction(points_px=points)
    vals = out.reshape(s, 3)
    scores = logistic(vals[:, 2])
    keep = scores >= tau
    points = [(float(vals[i, 0]) * img.i_h, float(vals[i, 1]) * img.i_w)
              for i in range(s) if keep[i]]
    return KeypointPrediction(points_px=points,
                              scores=[float(v) for v in scores[keep]])


# --- classical detector -----------------------------------------------------------

def _pixel_angle(img: ChannelImage, row: int, col: int) -> float:
    """Bearing of a pixel as seen from the array center."""
    p = pixel_to_physical(img, (float(row), float(col)))
    if hasattr(p, "theta"):
        return float(p.theta)
    return math.atan2(p.x, p.z)


def detect_classical(img: ChannelImage, s: int, nms_radius: int | None = None,
                     angle_sep: float = 0.08) -> KeypointPrediction:
    """S strongest image energy peaks under angular non-maximum suppression.

    Pixels are inverted to intensity (dark keypoints become maxima) and
    thinned to windowed local maxima (ties prefer lower row, then lower
    column). Because a path's energy ridge runs radially (constant bearing
    from the array), survivors are then suppressed by bearing: a candidate
    within angle_sep radians of an already accepted peak belongs to the same
    ridge and is dropped. The S strongest survivors are returned sorted by
    column (strip order). If fewer than S peaks exist, the global intensity
    ranking pads the list and a warning is logged.
    """
    intensity = 255 - img.pixels.astype(np.int32)
    h, w = intensity.shape
    rho = nms_radius if nms_radius is not None else max(3, max(h, w) // 32)

    peaks: list[tuple[int, int, int]] = []  # (intensity, row, col)
    if intensity.max() > intensity.min():
        maxf = maximum_filter(intensity, size=2 * rho + 1, mode="nearest")
        rows, cols = np.nonzero(intensity == maxf)
        order = np.lexsort((cols, rows, -intensity[rows, cols]))
        angles: list[float] = []
        for k in order:
            r, c = int(rows[k]), int(cols[k])
            ang = _pixel_angle(img, r, c)
            if all(abs(ang - a) > angle_sep for a in angles):
                angles.append(ang)
                peaks.append((int(intensity[r, c]), r, c))
            if len(peaks) >= s:
                break
    if len(peaks) < s:
        log.warning("classical detector found %d/%d peaks; padding from the "
                    "global ranking (low confidence)", len(peaks), s)
        flat = np.argsort(intensity, axis=None, kind="stable")[::-1]
        have = {(r, c) for _, r, c in peaks}
        for idx in flat:
            r, c = divmod(int(idx), w)
            if (r, c) not in have:
                peaks.append((int(intensity[r, c]), r, c))
                have.add((r, c))
            if len(peaks) >= s:
                break
    strongest = sorted(peaks, key=lambda t: (-t[0], t[1], t[2]))[:s]
    strongest.sort(key=lambda t: t[2])  # strip order: by column
    return KeypointPrediction(points_px=[(float(r), float(c))
                                         for _, r, c in strongest])


def coarse_params(pred: KeypointPrediction, img: ChannelImage) -> list:
    """Map predicted pixels to physical coordinates (scores pass through)."""
    return [pixel_to_physical(img, p) for p in pred.points_px]


def clamp_prediction(pred: KeypointPrediction, img: ChannelImage) -> KeypointPrediction:
    """Clamp predicted pixels into the image bounds (for raw CNN outputs)."""
    pts = [(min(max(r, 0.0), float(img.i_h)), min(max(c, 0.0), float(img.i_w)))
           for r, c in pred.points_px]
    return KeypointPrediction(points_px=pts, scores=pred.scores)
