"""Video manifests, clip extraction and the binary clip tensor format.

Manifest text format (UTF-8, tab separated, ``#`` starts a comment line)::

    video_id  signer_id  fps  HxW(rgb)  HxW(depth)  frame_count
    @channel  rgb       v01.rgb.sgst
    @channel  depth     v01.depth.sgst
    @channel  skeleton  v01.skel.sgst
    NEVER  12  Negative  10  42

The first non-comment line is the header.  ``@channel`` lines map a channel
name to a storage location relative to the manifest.  Every other line is an
annotation ``gloss, class_id, category, start, end`` with a half-open frame
interval ``[start, end)``.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from proxysign.errors import ClipFormatError, DataError, ManifestError

CATEGORIES = ("Conditional", "Negative", "Pointing", "WH", "Y/N", "Time", "Other")
NUM_JOINTS = 25

# Kinect v2 joint order
JOINT_NAMES = (
    "spine-base", "spine-mid", "neck", "head",
    "shoulder-left", "elbow-left", "wrist-left", "hand-left",
    "shoulder-right", "elbow-right", "wrist-right", "hand-right",
    "hip-left", "knee-left", "ankle-left", "foot-left",
    "hip-right", "knee-right", "ankle-right", "foot-right",
    "spine-shoulder", "handtip-left", "thumb-left", "handtip-right", "thumb-right",
)
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}

# Skeleton array columns: camera-space x, y, z (m), pixel px, py, confidence.
SKEL_X, SKEL_Y, SKEL_Z, SKEL_PX, SKEL_PY, SKEL_CONF = range(6)

# Channels that may appear in a manifest but are not consumed downstream.
IGNORED_CHANNELS = ("hdface", "face5")


@dataclass(frozen=True)
class Annotation:
    gloss: str
    class_id: int
    category: str
    start_frame: int
    end_frame: int
    signer_id: str

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame


@dataclass
class VideoManifest:
    video_id: str
    signer_id: str
    fps: float
    rgb_dims: tuple[int, int]
    depth_dims: tuple[int, int]
    frame_count: int
    annotations: list[Annotation] = field(default_factory=list)
    channel_paths: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            "\t".join([
                self.video_id, self.signer_id, _fmt_num(self.fps),
                f"{self.rgb_dims[0]}x{self.rgb_dims[1]}",
                f"{self.depth_dims[0]}x{self.depth_dims[1]}",
                str(self.frame_count),
            ])
        ]
        for name, path in self.channel_paths.items():
            lines.append(f"@channel\t{name}\t{path}")
        for a in self.annotations:
            lines.append(f"{a.gloss}\t{a.class_id}\t{a.category}\t{a.start_frame}\t{a.end_frame}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SkeletonFrame:
    """One frame of 25 tracked joints; ``joints`` is a (25, 6) array."""

    joints: np.ndarray

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=np.float32)
        if j.shape != (NUM_JOINTS, 6):
            raise DataError(f"skeleton frame must be ({NUM_JOINTS}, 6), got {j.shape}")
        object.__setattr__(self, "joints", j)

    def pixel(self, joint: str | int) -> tuple[float, float]:
        i = JOINT_INDEX[joint] if isinstance(joint, str) else joint
        return float(self.joints[i, SKEL_PX]), float(self.joints[i, SKEL_PY])

    def tracked(self, joint: str | int) -> bool:
        i = JOINT_INDEX[joint] if isinstance(joint, str) else joint
        return bool(self.joints[i, SKEL_CONF] > 0)


def validate_skeleton(skeleton: np.ndarray, frame_hw: tuple[int, int]) -> None:
    """Check shape and that tracked joints lie within the frame."""
    if skeleton.ndim != 3 or skeleton.shape[1:] != (NUM_JOINTS, 6):
        raise DataError(f"skeleton must be (N, {NUM_JOINTS}, 6), got {skeleton.shape}")
    conf = skeleton[..., SKEL_CONF]
    if np.any((conf < 0) | (conf > 1)):
        raise DataError("joint confidence outside [0, 1]")
    h, w = frame_hw
    px, py = skeleton[..., SKEL_PX], skeleton[..., SKEL_PY]
    outside = (px < 0) | (px > w - 1) | (py < 0) | (py > h - 1)
    if np.any(outside & (conf > 0)):
        raise DataError("tracked joint outside frame bounds")


@dataclass
class ClipRecord:
    """One annotated sign.  rgb is (N,H,W,3) u8, depth (N,H,W) u16 in mm,
    skeleton (N,25,6) f32 in RGB pixel coordinates."""

    clip_id: str
    label: int
    category: str
    signer_id: str
    rgb: np.ndarray
    depth: np.ndarray
    skeleton: np.ndarray

    def __post_init__(self):
        n = len(self.rgb)
        if n < 1:
            raise DataError(f"clip {self.clip_id}: empty")
        if len(self.depth) != n or len(self.skeleton) != n:
            raise DataError(
                f"clip {self.clip_id}: channel lengths differ "
                f"(rgb {n}, depth {len(self.depth)}, skeleton {len(self.skeleton)})"
            )
        if self.label < 0:
            raise DataError(f"clip {self.clip_id}: invalid label {self.label}")

    @property
    def length(self) -> int:
        return len(self.rgb)


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _parse_int(text, line, name):
    try:
        return int(text)
    except ValueError:
        raise ManifestError(f"expected integer, got {text!r}", line, name) from None


def _parse_dims(text, line, name):
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ManifestError(f"expected HxW, got {text!r}", line, name)
    h, w = (_parse_int(p, line, name) for p in parts)
    if h <= 0 or w <= 0:
        raise ManifestError(f"dimensions must be positive, got {text!r}", line, name)
    return h, w


def parse_manifest(data: bytes | str, num_classes: int | None = None) -> VideoManifest:
    """Parse manifest text.  Never raises anything but ManifestError."""
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ManifestError(f"not valid UTF-8 ({exc.reason})") from None
    else:
        text = data

    header = None
    channels: dict[str, str] = {}
    raw: list[tuple[int, Annotation]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        cols = [c.strip() for c in line.rstrip("\r\n").split("\t")]
        if header is None:
            if len(cols) != 6:
                raise ManifestError(f"header needs 6 fields, got {len(cols)}", lineno)
            video_id, signer_id, fps_s, rgb_s, depth_s, count_s = cols
            if not video_id:
                raise ManifestError("empty video id", lineno, "video_id")
            if not signer_id:
                raise ManifestError("empty signer id", lineno, "signer_id")
            try:
                fps = float(fps_s)
            except ValueError:
                raise ManifestError(f"expected number, got {fps_s!r}", lineno, "fps") from None
            if not np.isfinite(fps) or fps <= 0:
                raise ManifestError("fps must be positive", lineno, "fps")
            rgb_dims = _parse_dims(rgb_s, lineno, "rgb_dims")
            depth_dims = _parse_dims(depth_s, lineno, "depth_dims")
            frame_count = _parse_int(count_s, lineno, "frame_count")
            if frame_count <= 0:
                raise ManifestError("frame_count must be positive", lineno, "frame_count")
            header = (video_id, signer_id, fps, rgb_dims, depth_dims, frame_count)
            continue
        if cols[0] == "@channel":
            if len(cols) != 3 or not cols[1] or not cols[2]:
                raise ManifestError("channel line needs name and location", lineno)
            channels[cols[1]] = cols[2]
            continue
        if len(cols) != 5:
            raise ManifestError(f"annotation needs 5 fields, got {len(cols)}", lineno)
        gloss, cid_s, category, start_s, end_s = cols
        if not gloss:
            raise ManifestError("empty gloss", lineno, "gloss")
        class_id = _parse_int(cid_s, lineno, "class_id")
        if class_id < 0 or (num_classes is not None and class_id >= num_classes):
            raise ManifestError(f"class id {class_id} out of range", lineno, "class_id")
        if category not in CATEGORIES:
            raise ManifestError(f"unknown category {category!r}", lineno, "category")
        start = _parse_int(start_s, lineno, "start")
        end = _parse_int(end_s, lineno, "end")
        if start < 0:
            raise ManifestError("negative start frame", lineno, "start")
        if end <= start:
            raise ManifestError(f"empty interval [{start}, {end})", lineno, "end")
        if end > header[5]:
            raise ManifestError(f"end frame {end} exceeds frame_count {header[5]}", lineno, "end")
        raw.append((lineno, Annotation(gloss, class_id, category, start, end, header[1])))

    if header is None:
        raise ManifestError("missing header line")
    raw.sort(key=lambda item: (item[1].start_frame, item[1].end_frame))
    for (_, prev), (lineno, cur) in zip(raw, raw[1:]):
        if cur.start_frame < prev.end_frame:
            raise ManifestError(
                f"overlap between [{prev.start_frame}, {prev.end_frame}) and "
                f"[{cur.start_frame}, {cur.end_frame})", lineno, "start")
    video_id, signer_id, fps, rgb_dims, depth_dims, frame_count = header
    return VideoManifest(video_id, signer_id, fps, rgb_dims, depth_dims, frame_count,
                         [a for _, a in raw], channels)


def clip_id_for(manifest: VideoManifest, index: int, ann: Annotation) -> str:
    safe = "".join(ch if ch.isalnum() else "_" for ch in ann.gloss)
    return f"{manifest.video_id}_{index:03d}_{safe}"


def extract_clips(manifest: VideoManifest, frames: Mapping[str, Sequence]) -> list[ClipRecord]:
    """Cut one ClipRecord per annotation from frame-aligned channel arrays.

    ``frames`` maps "rgb", "depth" and "skeleton" to indexable sequences of
    per-frame data (numpy arrays or memmaps work).
    """
    for name in ("rgb", "depth", "skeleton"):
        if name not in frames:
            raise DataError(f"video {manifest.video_id}: missing channel '{name}'")
    clips = []
    for i, ann in enumerate(manifest.annotations):
        for name in ("rgb", "depth", "skeleton"):
            available = len(frames[name])
            if ann.end_frame > available:
                raise DataError(
                    f"video {manifest.video_id}: annotation {ann.gloss} [{ann.start_frame}, "
                    f"{ann.end_frame}) exceeds {available} frames of channel '{name}'")
        sl = slice(ann.start_frame, ann.end_frame)
        clips.append(ClipRecord(
            clip_id=clip_id_for(manifest, i, ann),
            label=ann.class_id,
            category=ann.category,
            signer_id=ann.signer_id,
            rgb=np.asarray(frames["rgb"][sl]),
            depth=np.asarray(frames["depth"][sl]),
            skeleton=np.asarray(frames["skeleton"][sl], dtype=np.float32),
        ))
    return clips


# --- binary tensor container ---------------------------------------------

MAGIC = b"SGST"
VERSION = 1
_DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("u1"), 3: np.dtype("<u2")}
_TAG_OF = {("f", 4): 1, ("u", 1): 2, ("u", 2): 3}
_HEADER = struct.Struct("<4sHBB")


def write_clip(x: np.ndarray) -> bytes:
    """Serialize an f32/u8/u16 array to ClipTensorFile bytes."""
    x = np.asarray(x)
    tag = _TAG_OF.get((x.dtype.kind, x.dtype.itemsize))
    if tag is None:
        raise ClipFormatError(f"unsupported dtype {x.dtype}")
    if x.ndim == 0 or x.ndim > 255:
        raise ClipFormatError(f"unsupported rank {x.ndim}")
    if any(d == 0 for d in x.shape):
        raise ClipFormatError(f"empty dimension in shape {x.shape}")
    if any(d >= 2**32 for d in x.shape):
        raise ClipFormatError("dimension exceeds u32")
    body = (_HEADER.pack(MAGIC, VERSION, tag, x.ndim)
            + struct.pack(f"<{x.ndim}I", *x.shape)
            + np.ascontiguousarray(x, dtype=_DTYPE_TAGS[tag]).tobytes())
    return body + struct.pack("<I", zlib.crc32(body))


def read_clip(data: bytes) -> np.ndarray:
    """Parse ClipTensorFile bytes, validating header, length and CRC32."""
    data = memoryview(data).cast("B")
    if len(data) < _HEADER.size + 4:
        raise ClipFormatError("truncated header")
    magic, version, tag, ndim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ClipFormatError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise ClipFormatError(f"unsupported version {version}")
    if tag not in _DTYPE_TAGS:
        raise ClipFormatError(f"unknown dtype tag {tag}")
    off = _HEADER.size
    if len(data) < off + 4 * ndim + 4:
        raise ClipFormatError("truncated dimension list")
    dims = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    dtype = _DTYPE_TAGS[tag]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) != off + nbytes + 4:
        raise ClipFormatError(f"payload size mismatch: expected {nbytes} bytes, "
                              f"file has {len(data) - off - 4}")
    (crc,) = struct.unpack_from("<I", data, off + nbytes)
    if zlib.crc32(data[: off + nbytes]) != crc:
        raise ClipFormatError("checksum mismatch")
    arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=off)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path: str | os.PathLike, x: np.ndarray) -> None:
    Path(path).write_bytes(write_clip(x))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return read_clip(data)
    except ClipFormatError as exc:
        raise ClipFormatError(f"{path}: {exc}") from None


def load_frame_dir(path: str | os.PathLike) -> np.ndarray:
    """Stack per-frame image files (sorted by name) into one array."""
    from PIL import Image

    if not Path(path).is_dir():
        raise DataError(f"{path} is not a frame directory")
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff"))
    if not files:
        raise DataError(f"no frame images in {path}")
    return np.stack([np.asarray(Image.open(f)) for f in files])


def load_channel(base: str | os.PathLike, location: str) -> np.ndarray:
    p = Path(base) / location
    if p.is_dir():
        return load_frame_dir(p)
    return load_tensor(p)


def load_video(manifest_path: str | os.PathLike, num_classes: int | None = None):
    """Read a manifest file and the channel data it references."""
    manifest_path = Path(manifest_path)
    manifest = parse_manifest(manifest_path.read_bytes(), num_classes)
    frames = {}
    for name in ("rgb", "depth", "skeleton"):
        if name not in manifest.channel_paths:
            raise DataError(f"{manifest_path}: no '@channel {name}' line")
        frames[name] = load_channel(manifest_path.parent, manifest.channel_paths[name])
    return manifest, frames


# --- clip directory -------------------------------------------------------

INDEX_NAME = "clips.tsv"


def save_clips(clips: Sequence[ClipRecord], out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["clip_id\tlabel\tcategory\tsigner_id\tlength"]
    for c in clips:
        save_tensor(out / f"{c.clip_id}.rgb.sgst", c.rgb)
        save_tensor(out / f"{c.clip_id}.depth.sgst", c.depth)
        save_tensor(out / f"{c.clip_id}.skel.sgst", c.skeleton)
        lines.append(f"{c.clip_id}\t{c.label}\t{c.category}\t{c.signer_id}\t{c.length}")
    (out / INDEX_NAME).write_text("\n".join(lines) + "\n")


def load_clips(clip_dir: str | os.PathLike) -> list[ClipRecord]:
    d = Path(clip_dir)
    index = d / INDEX_NAME
    if not index.exists():
        raise DataError(f"no clip index at {index}")
    clips = []
    for row in index.read_text().splitlines()[1:]:
        if not row.strip():
            continue
        clip_id, label, category, signer, _ = row.split("\t")
        clips.append(ClipRecord(
            clip_id, int(label), category, signer,
            rgb=load_tensor(d / f"{clip_id}.rgb.sgst"),
            depth=load_tensor(d / f"{clip_id}.depth.sgst"),
            skeleton=load_tensor(d / f"{clip_id}.skel.sgst"),
        ))
    return clips


def load_gloss_categories(path: str | os.PathLike | None = None) -> dict[str, str]:
    """Read a ``gloss<TAB>category`` table; defaults to the bundled one."""
    if path is None:
        text = resources.files("proxysign").joinpath("data/gloss_categories.tsv").read_text()
    else:
        text = Path(path).read_text()
    table = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        gloss, category = line.split("\t")
        if category not in CATEGORIES:
            raise DataError(f"unknown category {category!r} for gloss {gloss}")
        table[gloss] = category
    return table
