"""Per-stream input construction.

A stream is a (modality, channel) pair: the modality picks the spatial region
(whole frame, a hand or the face), the channel picks the representation
(RGB, 3-band depth, or 3-band optical flow of either).  ``StreamBuilder``
turns a clip plus a proxy plan and augmentation into a (3, T, P, P) float
sample.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from proxysign.clipstore import JOINT_INDEX, SKEL_CONF, SKEL_PX, SKEL_PY, ClipRecord
from proxysign.errors import DataError
from proxysign.sampler import AugmentSpec, ProxyIndexPlan, augment_clip, resample, resize_short_side

MODALITIES = ("body", "left-hand", "right-hand", "face")
CHANNELS = ("rgb", "depth", "rgbflow", "depthflow")
REGION_JOINTS = {"left-hand": "wrist-left", "right-hand": "wrist-right", "face": "head"}
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, order=True)
class StreamKind:
    modality: str
    channel: str

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.channel not in CHANNELS:
            raise ValueError(f"unknown channel {self.channel!r}")

    @property
    def name(self) -> str:
        return f"{self.modality}-{self.channel}"

    @classmethod
    def parse(cls, name: str) -> "StreamKind":
        modality, sep, channel = name.strip().rpartition("-")
        if not sep:
            raise ValueError(f"stream name {name!r} is not <modality>-<channel>")
        return cls(modality, channel)

    @property
    def source(self) -> str:
        return "depth" if self.channel in ("depth", "depthflow") else "rgb"

    @property
    def is_flow(self) -> bool:
        return self.channel.endswith("flow")

    def __str__(self):
        return self.name


ASL_STREAMS = tuple(StreamKind.parse(n) for n in (
    "body-rgb", "body-depth", "body-rgbflow", "left-hand-rgb", "right-hand-rgb", "face-rgb"))
GRID_STREAMS = tuple(StreamKind(m, c) for m in ("body", "left-hand", "right-hand") for c in CHANNELS)


def _round_half_up(x):
    return np.floor(x + 0.5)


def encode_depth_3band(depth: np.ndarray, dmin=500.0, dmax=4500.0) -> np.ndarray:
    """Map millimetre depth linearly onto 0..255 in three identical bands.

    Depth is clamped to [dmin, dmax]; untracked zeros therefore map to 0.
    """
    if not dmin < dmax:
        raise ValueError(f"invalid depth range ({dmin}, {dmax})")
    d = np.clip(np.asarray(depth, dtype=np.float64), dmin, dmax)
    band = _round_half_up(255.0 * (d - dmin) / (dmax - dmin)).astype(np.uint8)
    return np.repeat(band[..., None], 3, axis=-1)


def to_gray(frame: np.ndarray) -> np.ndarray:
    """Rec.601 luma of an (..., 3) frame as float64; 2-D input passes through."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim >= 3 and frame.shape[-1] == 3:
        return frame @ LUMA
    return frame


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    energies: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise ValueError("u and v must have the same shape")


# Smoothness neighbourhood weights; they sum to 1 for interior pixels.
_NEIGHBOURS = [(-1, -1, 1 / 12), (-1, 0, 1 / 6), (-1, 1, 1 / 12), (0, -1, 1 / 6),
               (0, 1, 1 / 6), (1, -1, 1 / 12), (1, 0, 1 / 6), (1, 1, 1 / 12)]


def _derivatives(a, b):
    gy_a, gx_a = np.gradient(a)
    gy_b, gx_b = np.gradient(b)
    return 0.5 * (gx_a + gx_b), 0.5 * (gy_a + gy_b), b - a


def horn_schunck_energy(a, b, u, v, alpha) -> float:
    """Brightness-constancy residual plus weighted pairwise smoothness."""
    ix, iy, it = _derivatives(np.asarray(a, np.float64), np.asarray(b, np.float64))
    data = np.sum((ix * u + iy * v + it) ** 2)
    smooth = 0.0
    for f in (u, v):
        smooth += np.sum((f[:, 1:] - f[:, :-1]) ** 2) / 6
        smooth += np.sum((f[1:] - f[:-1]) ** 2) / 6
        smooth += np.sum((f[1:, 1:] - f[:-1, :-1]) ** 2) / 12
        smooth += np.sum((f[1:, :-1] - f[:-1, 1:]) ** 2) / 12
    return float(data + alpha ** 2 * smooth)


def compute_flow_horn_schunck(a, b, alpha=15.0, iters=100, track_energy=False) -> FlowField:
    """Dense Horn-Schunck optical flow from frame ``a`` to frame ``b``.

    Colour frames are reduced to Rec.601 luma.  Each iteration updates the
    four pixel-parity classes in turn with the closed-form Horn-Schunck step;
    no two pixels of one class are neighbours, so every class update exactly
    minimises the energy over those pixels and the energy never increases.
    """
    a, b = to_gray(a), to_gray(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"frames must be matching 2-D images, got {a.shape} and {b.shape}")
    if alpha <= 0 or iters < 1:
        raise ValueError("alpha must be positive and iters >= 1")
    h, w = a.shape
    ix, iy, it = _derivatives(a, b)
    up = np.zeros((h + 2, w + 2))
    vp = np.zeros((h + 2, w + 2))
    mask = np.zeros((h + 2, w + 2))
    mask[1:-1, 1:-1] = 1.0
    classes = []
    for py in (0, 1):
        for px in (0, 1):
            sl = (slice(1 + py, 1 + h, 2), slice(1 + px, 1 + w, 2))
            shifts = [(slice(1 + py + dy, 1 + h + dy, 2), slice(1 + px + dx, 1 + w + dx, 2), wt)
                      for dy, dx, wt in _NEIGHBOURS]
            weight = sum(wt * mask[sy, sx] for sy, sx, wt in shifts)
            gx, gy, gt = ix[py::2, px::2], iy[py::2, px::2], it[py::2, px::2]
            denom = alpha ** 2 * weight + gx ** 2 + gy ** 2
            classes.append((sl, shifts, weight, gx, gy, gt, denom))
    energies = []
    if track_energy:
        energies.append(horn_schunck_energy(a, b, up[1:-1, 1:-1], vp[1:-1, 1:-1], alpha))
    for _ in range(iters):
        for sl, shifts, weight, gx, gy, gt, denom in classes:
            ubar = sum(wt * up[sy, sx] for sy, sx, wt in shifts) / weight
            vbar = sum(wt * vp[sy, sx] for sy, sx, wt in shifts) / weight
            step = (gx * ubar + gy * vbar + gt) / denom
            up[sl] = ubar - gx * step
            vp[sl] = vbar - gy * step
        if track_energy:
            energies.append(horn_schunck_energy(a, b, up[1:-1, 1:-1], vp[1:-1, 1:-1], alpha))
    return FlowField(up[1:-1, 1:-1].copy(), vp[1:-1, 1:-1].copy(), energies)


def encode_flow_3band(flow: FlowField, bound=20.0) -> np.ndarray:
    """(x, y, magnitude) of the flow as an 8-bit 3-band image.

    Components are clamped to [-bound, bound] and the magnitude to
    [0, bound] before the linear map onto 0..255.
    """
    if not bound > 0:
        raise ValueError(f"flow bound must be positive, got {bound}")
    u = np.clip(flow.u, -bound, bound)
    v = np.clip(flow.v, -bound, bound)
    mag = np.clip(np.hypot(flow.u, flow.v), 0, bound)
    bands = [
        _round_half_up(255.0 * (u + bound) / (2 * bound)),
        _round_half_up(255.0 * (v + bound) / (2 * bound)),
        _round_half_up(255.0 * mag / bound),
    ]
    return np.stack(bands, axis=-1).astype(np.uint8)


# --- skeleton-guided regions ----------------------------------------------

@dataclass(frozen=True)
class RegionBox:
    center: tuple[float, float]  # (cx, cy) pixels
    side: int
    bounds: tuple[int, int, int, int]  # (top, left, bottom, right), clamped, exclusive end

    @property
    def origin(self) -> tuple[int, int]:
        """Unclamped top-left corner (y, x) of the square."""
        cx, cy = self.center
        return int(np.floor(cy - self.side / 2 + 0.5)), int(np.floor(cx - self.side / 2 + 0.5))


def box_at(center, side, frame_hw) -> RegionBox:
    h, w = frame_hw
    box = RegionBox((float(center[0]), float(center[1])), int(side), (0, 0, 0, 0))
    top, left = box.origin
    bounds = (max(0, top), max(0, left), min(h, top + side), min(w, left + side))
    return RegionBox(box.center, box.side, bounds)


def region_box(joints: np.ndarray, joint: str, scale: float, frame_hw, coord_scale=(1.0, 1.0)) -> RegionBox:
    """Square box centred on a tracked joint, side = scale * frame height.

    ``joints`` is one (25, 6) skeleton frame; ``coord_scale`` (sx, sy) maps
    skeleton pixel coordinates into the frame being cropped.
    """
    if not 0 < scale <= 1:
        raise ValueError(f"scale must lie in (0, 1], got {scale}")
    j = JOINT_INDEX[joint]
    if joints[j, SKEL_CONF] <= 0:
        raise DataError(f"joint {joint} is not tracked")
    side = max(1, int(np.floor(scale * frame_hw[0] + 0.5)))
    center = (joints[j, SKEL_PX] * coord_scale[0], joints[j, SKEL_PY] * coord_scale[1])
    return box_at(center, side, frame_hw)


def region_boxes(skeleton: np.ndarray, joint: str, scale: float, frame_hw,
                 coord_scale=(1.0, 1.0), smooth=5) -> list[RegionBox]:
    """Per-frame boxes for a clip.

    Untracked frames hold the previous tracked centre (leading ones take the
    first tracked centre); centres are then smoothed with a ``smooth``-frame
    moving average, truncated at the clip ends.
    """
    j = JOINT_INDEX[joint]
    tracked = skeleton[:, j, SKEL_CONF] > 0
    if not tracked.any():
        raise DataError(f"joint {joint} untracked in every frame")
    centers = skeleton[:, j, [SKEL_PX, SKEL_PY]].astype(np.float64) * np.asarray(coord_scale)
    first = int(np.argmax(tracked))
    last = centers[first]
    filled = np.empty_like(centers)
    for i in range(len(centers)):
        if tracked[i]:
            last = centers[i]
        filled[i] = last
    if smooth > 1:
        half = smooth // 2
        csum = np.concatenate([[[0.0, 0.0]], np.cumsum(filled, axis=0)])
        lo = np.clip(np.arange(len(filled)) - half, 0, len(filled))
        hi = np.clip(np.arange(len(filled)) + half + 1, 0, len(filled))
        filled = (csum[hi] - csum[lo]) / (hi - lo)[:, None]
    if not 0 < scale <= 1:
        raise ValueError(f"scale must lie in (0, 1], got {scale}")
    side = max(1, int(np.floor(scale * frame_hw[0] + 0.5)))
    return [box_at(c, side, frame_hw) for c in filled]


def crop_region(frames: np.ndarray, boxes, out=112) -> np.ndarray:
    """Crop each frame to its box (edge-padded where clamped), resampled to out x out."""
    if len(frames) != len(boxes):
        raise ValueError(f"{len(frames)} frames but {len(boxes)} boxes")
    crops = []
    for f, box in zip(frames, boxes):
        top, left = box.origin
        crops.append(resample(f, top, left, box.side, box.side, out, out))
    return np.stack(crops)


def clip_flow(frames: np.ndarray, source: str, cfg: "StreamConfig") -> np.ndarray:
    """(N-1, H, W, 2) float32 Horn-Schunck fields between consecutive frames."""
    if source == "depth":
        gray = [encode_depth_3band(f, cfg.depth_min, cfg.depth_max)[..., 0].astype(np.float64) for f in frames]
    else:
        gray = [to_gray(f) for f in frames]
    out = np.zeros((max(len(frames) - 1, 0),) + gray[0].shape + (2,), np.float32)
    for i in range(len(frames) - 1):
        f = compute_flow_horn_schunck(gray[i], gray[i + 1], cfg.flow_alpha, cfg.flow_iters)
        out[i, ..., 0], out[i, ..., 1] = f.u, f.v
    return out


# --- stream assembly --------------------------------------------------------

@dataclass(frozen=True)
class StreamConfig:
    patch: int = 112
    resize_short: int = 128
    max_angle: float = 10.0
    depth_min: float = 500.0
    depth_max: float = 4500.0
    flow_alpha: float = 15.0
    flow_iters: int = 100
    flow_bound: float = 20.0
    hand_scale: float = 0.25
    face_scale: float = 0.30

    def __post_init__(self):
        if self.patch > self.resize_short:
            raise ValueError("patch must not exceed resize_short")


class StreamBuilder:
    """Builds network inputs for any stream kind, caching per-clip work.

    Spatial preprocessing (resize or region crop) and flow fields depend only
    on the clip and frame indices, never on the augmentation, so they are
    memoised; augmentation (rotate, then crop) is applied last.

    ``precomputed_flow`` maps (clip_id, source) to (N-1, H, W, 2) adjacent-frame
    fields at the source resolution (see ``clip_flow``); fields between two
    proxy frames are summed over the gap, then resized or cropped like pixels.
    """

    def __init__(self, cfg: StreamConfig | None = None, precomputed_flow=None, cache_items=4096):
        self.cfg = cfg or StreamConfig()
        self.precomputed_flow = precomputed_flow or {}
        self._spatial = OrderedDict()
        self._flow = OrderedDict()
        self._cache_items = cache_items

    def _remember(self, cache, key, value):
        cache[key] = value
        if len(cache) > self._cache_items:
            cache.popitem(last=False)
        return value

    def _spatial_op(self, clip: ClipRecord, modality: str, source: str):
        """Resize (body) or region-crop function for one source, plus the (sx, sy) pixel scale it applies."""
        frames = clip.rgb if source == "rgb" else clip.depth
        h, w = frames.shape[1:3]
        s = self.cfg.resize_short
        if modality == "body":
            out_h, out_w = resize_short_side(np.zeros((h, w), np.uint8), s).shape
            return (lambda x, idx=None: np.stack([resize_short_side(f, s) for f in x])), (out_w / w, out_h / h)
        rgb_h, rgb_w = clip.rgb.shape[1:3]
        scale = self.cfg.face_scale if modality == "face" else self.cfg.hand_scale
        boxes = region_boxes(clip.skeleton, REGION_JOINTS[modality], scale, (h, w),
                             coord_scale=(w / rgb_w, h / rgb_h))
        def crop(x, idx=None):
            return crop_region(x, boxes if idx is None else [boxes[i] for i in idx], s)
        return crop, (s / boxes[0].side, s / boxes[0].side)

    def spatial_frames(self, clip: ClipRecord, modality: str, source: str) -> np.ndarray:
        """All N frames of one source after resize (body) or region crop."""
        key = (clip.clip_id, modality, source)
        if key in self._spatial:
            return self._spatial[key]
        op, _ = self._spatial_op(clip, modality, source)
        return self._remember(self._spatial, key, op(clip.rgb if source == "rgb" else clip.depth))

    def frame_hw(self, clip: ClipRecord, kind: StreamKind) -> tuple[int, int]:
        return self.spatial_frames(clip, kind.modality, kind.source).shape[1:3]

    def _gray(self, frame, source):
        if source == "depth":
            return encode_depth_3band(frame, self.cfg.depth_min, self.cfg.depth_max)[..., 0].astype(np.float64)
        return to_gray(frame)

    def _flow_image(self, clip, kind, frames, i, j):
        key = (clip.clip_id, kind.modality, kind.source, int(i), int(j))
        if key in self._flow:
            return self._flow[key]
        pre = self.precomputed_flow.get((clip.clip_id, kind.source))
        if pre is not None:
            flow = self._precomputed_pair(clip, kind, pre, i, j)
        elif i == j:
            h, w = frames.shape[1:3]
            flow = FlowField(np.zeros((h, w)), np.zeros((h, w)))
        else:
            flow = compute_flow_horn_schunck(self._gray(frames[i], kind.source), self._gray(frames[j], kind.source),
                                             self.cfg.flow_alpha, self.cfg.flow_iters)
        return self._remember(self._flow, key, encode_flow_3band(flow, self.cfg.flow_bound))

    def _precomputed_pair(self, clip, kind, fields, i, j):
        # adjacent-frame fields at source resolution, summed over [i, j)
        if len(fields) < clip.length - 1 or fields.shape[1:3] != self._source(clip, kind.source).shape[1:3]:
            raise DataError(f"precomputed flow for {clip.clip_id} does not match its {kind.source} frames")
        total = fields[i:j].astype(np.float64).sum(axis=0) if j > i else np.zeros(fields.shape[1:])
        op, (sx, sy) = self._spatial_op(clip, kind.modality, kind.source)
        uv = op(total[None], [i])[0]
        return FlowField(uv[..., 0] * sx, uv[..., 1] * sy)

    @staticmethod
    def _source(clip, source):
        return clip.rgb if source == "rgb" else clip.depth

    def encoded_frames(self, clip: ClipRecord, kind: StreamKind, plan: ProxyIndexPlan) -> np.ndarray:
        """(T, H, W, 3) u8 channel images for the plan, before augmentation."""
        if plan.n_frames != clip.length:
            raise ValueError(f"plan drawn for {plan.n_frames} frames, clip has {clip.length}")
        frames = self.spatial_frames(clip, kind.modality, kind.source)
        idx = plan.full_indices()
        if kind.channel == "rgb":
            return frames[idx]
        if kind.channel == "depth":
            return encode_depth_3band(frames[idx], self.cfg.depth_min, self.cfg.depth_max)
        if len(idx) == 1:
            return np.stack([self._flow_image(clip, kind, frames, idx[0], idx[0])])
        imgs = [self._flow_image(clip, kind, frames, a, b) for a, b in zip(idx[:-1], idx[1:])]
        # T-1 pairwise fields; the first is repeated to restore length T
        return np.stack([imgs[0]] + imgs)

    def build(self, clip: ClipRecord, kind: StreamKind, plan: ProxyIndexPlan, aug: AugmentSpec) -> np.ndarray:
        """(3, T, P, P) float32 sample in [0, 1]."""
        imgs = augment_clip(self.encoded_frames(clip, kind, plan), aug)
        return (imgs.astype(np.float32) / 255.0).transpose(3, 0, 1, 2).copy()
