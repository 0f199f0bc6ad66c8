"""Proxy-video temporal sampling and clip-consistent spatial augmentation."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

MAX_ANGLE = 10.0


@dataclass(frozen=True)
class ProxyIndexPlan:
    """Frame indices of one proxy video drawn from a clip of ``n_frames``."""

    T: int
    indices: tuple[int, ...]
    pad_count: int
    n_frames: int

    def full_indices(self) -> np.ndarray:
        """Indices of all T output frames, padding included."""
        idx = np.asarray(self.indices, dtype=np.int64)
        if self.pad_count:
            idx = np.concatenate([idx, np.full(self.pad_count, self.n_frames - 1)])
        return idx


def sample_proxy_indices(N: int, T: int, rng=None, draws=None) -> ProxyIndexPlan:
    """Pick one frame uniformly at random from each of T equal intervals.

    Index i is ``offset_i + (N // T) * i`` with ``offset_i`` uniform in
    ``[0, N // T)``; the trailing ``N % T`` frames are never chosen.  Clips
    shorter than T use every frame and are padded with the last one.
    ``draws`` may supply the offsets directly.
    """
    if N < 1 or T < 1:
        raise ValueError(f"need N >= 1 and T >= 1, got N={N}, T={T}")
    if N < T:
        return ProxyIndexPlan(T, tuple(range(N)), T - N, N)
    step = N // T
    if draws is None:
        if rng is None:
            raise ValueError("either rng or draws is required")
        draws = rng.integers(0, step, size=T)
    draws = np.asarray(draws, dtype=np.int64)
    if draws.shape != (T,) or np.any((draws < 0) | (draws >= step)):
        raise ValueError(f"draws must be {T} integers in [0, {step})")
    idx = draws + step * np.arange(T)
    return ProxyIndexPlan(T, tuple(int(i) for i in idx), 0, N)


def center_proxy_indices(N: int, T: int) -> ProxyIndexPlan:
    """Deterministic plan taking the middle frame of every interval (evaluation)."""
    if N < T:
        return sample_proxy_indices(N, T, draws=())
    step = N // T
    return sample_proxy_indices(N, T, draws=np.full(T, step // 2))


def apply_proxy(frames, plan: ProxyIndexPlan) -> np.ndarray:
    if len(frames) != plan.n_frames:
        raise ValueError(f"plan was drawn for {plan.n_frames} frames, got {len(frames)}")
    return np.asarray(frames)[plan.full_indices()]


@dataclass(frozen=True)
class AugmentSpec:
    crop_top: int
    crop_left: int
    patch: int = 112
    angle: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if abs(self.angle) > MAX_ANGLE:
            raise ValueError(f"rotation angle {self.angle} outside [-{MAX_ANGLE}, {MAX_ANGLE}]")
        if self.crop_top < 0 or self.crop_left < 0 or self.patch < 1:
            raise ValueError("invalid crop window")


def draw_augment(rng, frame_hw, patch=112, max_angle=MAX_ANGLE) -> AugmentSpec:
    """Random crop offsets and rotation angle, shared by all frames of a sample."""
    h, w = frame_hw
    if h < patch or w < patch:
        raise ValueError(f"frame {h}x{w} smaller than patch {patch}")
    top = int(rng.integers(0, h - patch + 1))
    left = int(rng.integers(0, w - patch + 1))
    angle = float(rng.uniform(-max_angle, max_angle)) if max_angle > 0 else 0.0
    return AugmentSpec(top, left, patch, angle)


def center_augment(frame_hw, patch=112) -> AugmentSpec:
    h, w = frame_hw
    if h < patch or w < patch:
        raise ValueError(f"frame {h}x{w} smaller than patch {patch}")
    return AugmentSpec((h - patch) // 2, (w - patch) // 2, patch, 0.0)


def random_crop(frame: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Crop the patch x patch window of an (H, W[, C]) frame."""
    h, w = frame.shape[:2]
    p = spec.patch
    if h < p or w < p:
        raise ValueError(f"frame {h}x{w} smaller than patch {p}")
    if spec.crop_top + p > h or spec.crop_left + p > w:
        raise ValueError("crop window exceeds frame")
    return frame[spec.crop_top:spec.crop_top + p, spec.crop_left:spec.crop_left + p].copy()


def random_rotation(frame: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Bilinear rotation about the frame centre with edge replication.

    Integer frames are rounded back to their dtype.  Angle 0 is an exact copy.
    """
    if abs(spec.angle) > MAX_ANGLE:
        raise ValueError(f"rotation angle {spec.angle} outside [-{MAX_ANGLE}, {MAX_ANGLE}]")
    if spec.angle == 0:
        return frame.copy()
    theta = np.deg2rad(spec.angle)
    c, s = np.cos(theta), np.sin(theta)
    # output (y, x) samples input at R^-1 about the centre
    mat = np.array([[c, s], [-s, c]])
    h, w = frame.shape[:2]
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - mat @ center
    src = frame.astype(np.float64)
    if frame.ndim == 2:
        out = ndimage.affine_transform(src, mat, offset, order=1, mode="nearest")
    else:
        out = np.stack([
            ndimage.affine_transform(src[..., ch], mat, offset, order=1, mode="nearest")
            for ch in range(frame.shape[2])
        ], axis=-1)
    if np.issubdtype(frame.dtype, np.integer):
        info = np.iinfo(frame.dtype)
        out = np.clip(np.floor(out + 0.5), info.min, info.max)
    return out.astype(frame.dtype)


def augment_clip(frames: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Rotate then crop every frame of a (T, H, W[, C]) clip with one spec."""
    return np.stack([random_crop(random_rotation(f, spec), spec) for f in frames])


def resize_short_side(frame: np.ndarray, short: int) -> np.ndarray:
    """Bilinear resize so min(H, W) == short, keeping aspect ratio."""
    h, w = frame.shape[:2]
    if min(h, w) == short:
        return frame.copy()
    scale = short / min(h, w)
    out_h, out_w = (short, max(short, round(w * scale))) if h <= w else (max(short, round(h * scale)), short)
    return resample(frame, 0.0, 0.0, h, w, out_h, out_w)


def resample(frame, y0, x0, box_h, box_w, out_h, out_w):
    """Bilinearly sample the box [y0, y0+box_h) x [x0, x0+box_w) onto out_h x out_w.

    Pixel centres are aligned; samples outside the frame replicate the edge.
    """
    ys = y0 + (np.arange(out_h) + 0.5) * (box_h / out_h) - 0.5
    xs = x0 + (np.arange(out_w) + 0.5) * (box_w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    src = frame.astype(np.float64)
    if frame.ndim == 2:
        out = ndimage.map_coordinates(src, [yy, xx], order=1, mode="nearest")
    else:
        out = np.stack([ndimage.map_coordinates(src[..., ch], [yy, xx], order=1, mode="nearest")
                        for ch in range(frame.shape[2])], axis=-1)
    if np.issubdtype(frame.dtype, np.integer):
        info = np.iinfo(frame.dtype)
        out = np.clip(np.floor(out + 0.5), info.min, info.max)
    return out.astype(frame.dtype)


def sample_rng(seed: int, epoch: int, clip_id: str) -> np.random.Generator:
    """Independent stream per (seed, epoch, clip); order of evaluation does not matter."""
    return np.random.default_rng([seed, epoch, zlib.crc32(clip_id.encode())])
