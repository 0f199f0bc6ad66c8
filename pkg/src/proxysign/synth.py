"""Synthetic RGB-D "signing" videos of moving shapes.

Each class combines a hand trajectory, a hand shape and a face mark, so body,
hand and face streams all carry label information.  Every signer records one
continuous video with several annotated signs separated by rest frames,
mirroring the layout of real recordings.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from proxysign.clipstore import (
    JOINT_INDEX,
    NUM_JOINTS,
    Annotation,
    VideoManifest,
    save_tensor,
)

# (gloss, category) per motion pattern
PATTERNS = (
    ("NOT", "Negative"),
    ("WHO", "WH"),
    ("TODAY", "Time"),
    ("NEVER", "Negative"),
    ("WHAT", "WH"),
    ("YESTERDAY", "Time"),
)
SHAPES = ("square", "disk", "diamond", "bar")


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 3
    clips_per_class: int = 20
    num_signers: int = 4
    rgb_hw: tuple[int, int] = (48, 64)
    depth_hw: tuple[int, int] = (40, 48)
    min_len: int = 18
    max_len: int = 40
    rest_len: int = 4
    style: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(PATTERNS):
            raise ValueError(f"num_classes must lie in [2, {len(PATTERNS)}]")
        if self.num_signers < 1 or self.clips_per_class < 1:
            raise ValueError("need at least one signer and one clip per class")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ValueError("invalid clip length range")


def _trajectory(pattern, s, amp):
    """Right-hand position in body units (x right, y down) for phase s in [0, 1]."""
    if pattern == 0:  # horizontal sweep
        return np.array([-0.6 + 1.2 * s, 0.1]) * amp
    if pattern == 1:  # rise
        return np.array([0.35, 0.6 - 1.2 * s]) * amp
    if pattern == 2:  # circle
        t = 2 * np.pi * s
        return np.array([0.3 + 0.35 * np.cos(t), 0.1 + 0.35 * np.sin(t)]) * amp
    if pattern == 3:  # fall
        return np.array([0.6 - 0.5 * s, -0.5 + 1.1 * s]) * amp
    if pattern == 4:  # zig-zag
        return np.array([-0.5 + s, 0.1 + 0.35 * np.sin(6 * np.pi * s)]) * amp
    return np.array([0.4 * np.cos(np.pi * s), 0.5 - s]) * amp


def _shape_mask(shape, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if shape == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= 1.3 * r
    return (np.abs(dy) <= 0.45 * r) & (np.abs(dx) <= 1.4 * r)


class _Signer:
    def __init__(self, rng, style):
        self.dx = rng.uniform(-0.05, 0.05)
        self.dy = rng.uniform(-0.04, 0.04)
        self.scale = rng.uniform(0.92, 1.08)
        base = np.array([[70, 90, 120], [120, 80, 60]][style % 2], float)
        self.background = base + rng.uniform(-15, 15, 3)
        self.shirt = np.array([[40, 60, 160], [150, 150, 40]][style % 2], float) + rng.uniform(-20, 20, 3)
        self.skin = np.array([210, 170, 140], float) + rng.uniform(-30, 30, 3)
        self.hand_colour = np.array([[240, 200, 60], [60, 220, 220]][style % 2], float)
        self.bg_depth = rng.uniform(3300, 3700)
        self.body_depth = rng.uniform(1900, 2200)


def _pose(signer, pattern, s, amp, rest):
    """Pixel-space joints in normalised [0,1] frame coordinates (x, y)."""
    cx, cy = 0.5 + signer.dx, 0.5 + signer.dy
    k = 0.35 * signer.scale
    joints = {
        "head": (cx, cy - 0.9 * k), "neck": (cx, cy - 0.6 * k),
        "spine-shoulder": (cx, cy - 0.5 * k), "spine-mid": (cx, cy), "spine-base": (cx, cy + 0.6 * k),
        "shoulder-left": (cx + 0.35 * k, cy - 0.5 * k), "shoulder-right": (cx - 0.35 * k, cy - 0.5 * k),
        "hip-left": (cx + 0.2 * k, cy + 0.6 * k), "hip-right": (cx - 0.2 * k, cy + 0.6 * k),
    }
    if rest:
        r = np.array([0.3, 0.75])
    else:
        r = _trajectory(pattern, s, amp)
    # right hand on image-left (the signer faces the camera); left hand mirrored
    rh = (cx - r[0] * k * 1.2 - 0.1 * k, cy + r[1] * k * 1.2)
    lh = (cx + r[0] * k * 1.2 + 0.1 * k, cy + r[1] * k * 1.2)
    joints["wrist-right"] = joints["hand-right"] = joints["handtip-right"] = joints["thumb-right"] = rh
    joints["wrist-left"] = joints["hand-left"] = joints["handtip-left"] = joints["thumb-left"] = lh
    for side in ("left", "right"):
        sx, sy = joints[f"shoulder-{side}"]
        hx, hy = joints[f"wrist-{side}"]
        joints[f"elbow-{side}"] = ((sx + hx) / 2, (sy + hy) / 2 + 0.05)
    for side, (hx, hy) in (("left", joints["hip-left"]), ("right", joints["hip-right"])):
        joints[f"knee-{side}"] = (hx, min(0.99, hy + 0.3 * k))
        joints[f"ankle-{side}"] = joints[f"foot-{side}"] = (hx, min(0.99, hy + 0.55 * k))
    return joints


def _render(signer, joints, pattern, shape, hw, depth_hw, face_on):
    h, w = hw
    k = 0.35 * signer.scale
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    dyy, dxx = np.mgrid[0:depth_hw[0], 0:depth_hw[1]].astype(float)
    rgb = np.empty((h, w, 3))
    rgb[:] = signer.background
    depth = np.full(depth_hw, signer.bg_depth)

    def px(j, dims):
        x, y = joints[j]
        return y * (dims[0] - 1), x * (dims[1] - 1)

    # torso
    for grid_y, grid_x, dims, target, value in (
        (yy, xx, hw, rgb, signer.shirt), (dyy, dxx, depth_hw, depth, signer.body_depth)):
        ty, tx = px("spine-mid", dims)
        half_w, half_h = 0.35 * k * dims[1], 0.65 * k * dims[0]
        mask = (np.abs(grid_x - tx) <= half_w) & (grid_y >= ty - half_h) & (grid_y <= ty + 0.9 * half_h)
        target[mask] = value
        hy, hx = px("head", dims)
        rad = 0.25 * k * dims[0]
        mask = (grid_y - hy) ** 2 + (grid_x - hx) ** 2 <= rad ** 2
        target[mask] = signer.skin if target is rgb else signer.body_depth - 50
    # face mark
    hy, hx = px("head", hw)
    rad = 0.25 * k * h
    if face_on and pattern % 3 == 0:
        rgb[(np.abs(yy - (hy - 0.35 * rad)) <= 0.12 * rad + 0.5) & (np.abs(xx - hx) <= 0.6 * rad)] = (20, 20, 20)
    elif face_on and pattern % 3 == 1:
        rgb[(yy - (hy + 0.4 * rad)) ** 2 + (xx - hx) ** 2 <= (0.3 * rad) ** 2 + 0.5] = (150, 20, 20)
    elif face_on:
        rgb[(np.abs(yy - hy) <= 0.6 * rad) & (np.abs(xx - (hx + 0.5 * rad)) <= 0.12 * rad + 0.5)] = (20, 120, 20)
    # hands
    for j in ("wrist-left", "wrist-right"):
        cy_, cx_ = px(j, hw)
        rgb[_shape_mask(shape, yy, xx, cy_, cx_, 0.2 * k * h)] = signer.hand_colour
        dcy, dcx = px(j, depth_hw)
        depth[_shape_mask(shape, dyy, dxx, dcy, dcx, 0.2 * k * depth_hw[0])] = signer.body_depth - 500 - 250 * (pattern % 3)
    return rgb, depth


def _skeleton_frame(joints, hw, depth_mm):
    out = np.zeros((NUM_JOINTS, 6), np.float32)
    h, w = hw
    for name, (x, y) in joints.items():
        i = JOINT_INDEX[name]
        px_, py_ = np.clip(x * (w - 1), 0, w - 1), np.clip(y * (h - 1), 0, h - 1)
        z = depth_mm / 1000.0
        out[i] = ((x - 0.5) * z, (0.5 - y) * z, z, px_, py_, 1.0)
    return out


def generate(cfg: SynthConfig = SynthConfig()):
    """Return a list of (VideoManifest, frames) with frames = {"rgb", "depth", "skeleton"} arrays."""
    rng = np.random.default_rng([cfg.seed, cfg.style])
    total = cfg.num_classes * cfg.clips_per_class
    labels = np.repeat(np.arange(cfg.num_classes), cfg.clips_per_class)
    rng.shuffle(labels)
    per_signer = np.array_split(labels, cfg.num_signers)
    videos = []
    shape_offset = cfg.style
    for s_idx, signer_labels in enumerate(per_signer):
        signer = _Signer(rng, cfg.style)
        signer_id = f"s{s_idx:02d}"
        video_id = f"synth{cfg.style}_v{s_idx:02d}"
        rgb_frames, depth_frames, skel_frames, anns = [], [], [], []

        def emit(joints, pattern, shape, face_on):
            rgb, depth = _render(signer, joints, pattern, shape, cfg.rgb_hw, cfg.depth_hw, face_on)
            rgb += rng.normal(0, 4, rgb.shape)
            depth += rng.normal(0, 8, depth.shape)
            rgb_frames.append(np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8))
            depth_frames.append(np.clip(np.floor(depth + 0.5), 0, 65535).astype(np.uint16))
            skel_frames.append(_skeleton_frame(joints, cfg.rgb_hw, signer.body_depth))

        for _ in range(cfg.rest_len):
            emit(_pose(signer, 0, 0.0, 1.0, rest=True), 0, "square", False)
        for label in signer_labels:
            label = int(label)
            n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            amp = rng.uniform(0.85, 1.15)
            shape = SHAPES[(label + shape_offset) % len(SHAPES)]
            start = len(rgb_frames)
            for f in range(n):
                s = f / max(1, n - 1)
                emit(_pose(signer, label, s, amp, rest=False), label, shape, True)
            gloss, category = PATTERNS[label]
            anns.append(Annotation(gloss, label, category, start, start + n, signer_id))
            for _ in range(cfg.rest_len):
                emit(_pose(signer, 0, 0.0, 1.0, rest=True), 0, shape, False)
        frames = {
            "rgb": np.stack(rgb_frames),
            "depth": np.stack(depth_frames),
            "skeleton": np.stack(skel_frames),
        }
        manifest = VideoManifest(video_id, signer_id, 30.0, cfg.rgb_hw, cfg.depth_hw, len(rgb_frames), anns,
                                 {"rgb": f"{video_id}.rgb.sgst", "depth": f"{video_id}.depth.sgst",
                                  "skeleton": f"{video_id}.skel.sgst"})
        videos.append((manifest, frames))
    assert sum(len(m.annotations) for m, _ in videos) == total
    return videos


def write_dataset(videos, root: str | os.PathLike) -> list[Path]:
    """Write manifests and packed channel files; returns the manifest paths."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for manifest, frames in videos:
        for name, loc in manifest.channel_paths.items():
            save_tensor(root / loc, frames[name])
        p = root / f"{manifest.video_id}.manifest"
        p.write_text(manifest.to_text())
        paths.append(p)
    return paths


def synth_clips(cfg: SynthConfig = SynthConfig()):
    """Generate and cut a dataset straight to ClipRecords."""
    from proxysign.clipstore import extract_clips

    clips = []
    for manifest, frames in generate(cfg):
        clips.extend(extract_clips(manifest, frames))
    return clips
