"""3-D residual networks, attention maps and checkpoint files."""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from proxysign import __version__
from proxysign.clipstore import read_clip, write_clip
from proxysign.errors import ClipFormatError, DataError
from proxysign.tensornet import Tensor, no_grad, ops

STAGE_BLOCKS = {18: (2, 2, 2, 2), 34: (3, 4, 6, 3), 50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}
TEMPORAL_DURATIONS = (16, 32, 64)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NetConfig:
    depth: int = 34
    num_classes: int = 100
    T: int = 16
    width: int = 64
    input_size: int = 112
    in_channels: int = 3

    def __post_init__(self):
        if self.depth not in STAGE_BLOCKS:
            raise ValueError(f"depth must be one of {sorted(STAGE_BLOCKS)}, got {self.depth}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.T < 1 or self.width < 1 or self.input_size < 1:
            raise ValueError("T, width and input_size must be positive")

    @property
    def bottleneck(self) -> bool:
        return self.depth >= 50

    @property
    def expansion(self) -> int:
        return 4 if self.bottleneck else 1

    @property
    def blocks(self) -> tuple[int, ...]:
        return STAGE_BLOCKS[self.depth]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.width * m for m in (1, 2, 4, 8))

    @property
    def feature_dim(self) -> int:
        return self.widths[-1] * self.expansion


class Conv:
    def __init__(self, cin, cout, kernel, stride, pad, rng):
        k = (kernel,) * 3 if isinstance(kernel, int) else kernel
        fan_in = cin * int(np.prod(k))
        self.weight = Tensor((rng.standard_normal((cout, cin, *k)) * np.sqrt(2.0 / fan_in)).astype(np.float32),
                             requires_grad=True)
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        return ops.conv3d(x, self.weight, self.stride, self.pad)

    def params(self, prefix):
        yield f"{prefix}.weight", self.weight


class BatchNorm:
    def __init__(self, c):
        self.gamma = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.running_mean = np.zeros(c, np.float32)
        self.running_var = np.ones(c, np.float32)

    def __call__(self, x, training):
        return ops.batchnorm3d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               training, BN_EPS, BN_MOMENTUM)

    def params(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def buffers(self, prefix):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class BasicBlock:
    def __init__(self, cin, planes, stride, rng):
        self.conv1 = Conv(cin, planes, 3, stride, 1, rng)
        self.bn1 = BatchNorm(planes)
        self.conv2 = Conv(planes, planes, 3, 1, 1, rng)
        self.bn2 = BatchNorm(planes)
        self.shortcut = None
        if stride != 1 or cin != planes:
            self.shortcut = (Conv(cin, planes, 1, stride, 0, rng), BatchNorm(planes))

    def __call__(self, x, training):
        y = ops.relu(self.bn1(self.conv1(x), training))
        y = self.bn2(self.conv2(y), training)
        s = x if self.shortcut is None else self.shortcut[1](self.shortcut[0](x), training)
        return ops.relu(ops.add(y, s))

    def layers(self):
        out = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.shortcut is not None:
            out += [("shortcut.conv", self.shortcut[0]), ("shortcut.bn", self.shortcut[1])]
        return out


class Bottleneck:
    def __init__(self, cin, planes, stride, rng):
        self.conv1 = Conv(cin, planes, 1, 1, 0, rng)
        self.bn1 = BatchNorm(planes)
        self.conv2 = Conv(planes, planes, 3, stride, 1, rng)
        self.bn2 = BatchNorm(planes)
        self.conv3 = Conv(planes, planes * 4, 1, 1, 0, rng)
        self.bn3 = BatchNorm(planes * 4)
        self.shortcut = None
        if stride != 1 or cin != planes * 4:
            self.shortcut = (Conv(cin, planes * 4, 1, stride, 0, rng), BatchNorm(planes * 4))

    def __call__(self, x, training):
        y = ops.relu(self.bn1(self.conv1(x), training))
        y = ops.relu(self.bn2(self.conv2(y), training))
        y = self.bn3(self.conv3(y), training)
        s = x if self.shortcut is None else self.shortcut[1](self.shortcut[0](x), training)
        return ops.relu(ops.add(y, s))

    def layers(self):
        out = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2),
               ("conv3", self.conv3), ("bn3", self.bn3)]
        if self.shortcut is not None:
            out += [("shortcut.conv", self.shortcut[0]), ("shortcut.bn", self.shortcut[1])]
        return out


class ResNet3D:
    """Stem (7x7x7 conv, stride (1,2,2)) + BN + ReLU + 3x3x3/2 max pool, four
    residual stages with strides 1, 2, 2, 2, global average pool, linear head."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stem = Conv(cfg.in_channels, cfg.width, 7, (1, 2, 2), 3, rng)
        self.stem_bn = BatchNorm(cfg.width)
        block = Bottleneck if cfg.bottleneck else BasicBlock
        self.stages = []
        cin = cfg.width
        for i, (n, planes) in enumerate(zip(cfg.blocks, cfg.widths)):
            stage = []
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                stage.append(block(cin, planes, stride, rng))
                cin = planes * cfg.expansion
            self.stages.append(stage)
        self.head_w = Tensor((rng.standard_normal((cfg.num_classes, cfg.feature_dim)) * 0.01).astype(np.float32),
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(cfg.num_classes, np.float32), requires_grad=True)

    # -- parameter access --------------------------------------------------
    def _layers(self):
        yield "stem", self.stem
        yield "stem_bn", self.stem_bn
        for i, stage in enumerate(self.stages, start=1):
            for j, blk in enumerate(stage):
                for name, layer in blk.layers():
                    yield f"stage{i}.{j}.{name}", layer

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for prefix, layer in self._layers():
            out.update(layer.params(prefix))
        out["head.weight"] = self.head_w
        out["head.bias"] = self.head_b
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, layer in self._layers():
            if isinstance(layer, BatchNorm):
                out.update(layer.buffers(prefix))
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def reset_head(self, num_classes: int, rng: np.random.Generator):
        self.cfg = NetConfig(**{**asdict(self.cfg), "num_classes": num_classes})
        self.head_w = Tensor((rng.standard_normal((num_classes, self.cfg.feature_dim)) * 0.01).astype(np.float32),
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(num_classes, np.float32), requires_grad=True)

    # -- evaluation --------------------------------------------------------
    def _check_input(self, x):
        c = self.cfg
        expected = (c.in_channels, c.T, c.input_size, c.input_size)
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input (N, {', '.join(map(str, expected))}), got {tuple(x.shape)}")

    def features(self, x, training=False) -> list[Tensor]:
        """Outputs of the stem (before pooling) and of each residual stage."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        self._check_input(x.data)
        y = ops.relu(self.stem_bn(self.stem(x), training))
        outs = [y]
        y = ops.maxpool3d(y, 3, 2, 1)
        for stage in self.stages:
            for blk in stage:
                y = blk(y, training)
            outs.append(y)
        return outs

    def forward(self, x, training=False) -> Tensor:
        feats = self.features(x, training)
        pooled = ops.global_avg_pool(feats[-1])
        return ops.linear(pooled, self.head_w, self.head_b)

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Eval-mode softmax probabilities."""
        with no_grad():
            return ops.softmax(self.forward(x, training=False).data.astype(np.float64))


def build_resnet3d(cfg: NetConfig, rng: np.random.Generator | int = 0) -> ResNet3D:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return ResNet3D(cfg, rng)


def attention_map(model: ResNet3D, clip, stage=5) -> np.ndarray:
    """Channel-mean absolute activation at ``stage`` (1 = stem, 5 = last),
    min-max normalised to [0, 1].  ``clip`` is (3, T, H, W) or (1, 3, T, H, W)."""
    if stage not in (1, 2, 3, 4, 5):
        raise ValueError(f"stage must be in 1..5, got {stage}")
    x = np.asarray(clip, dtype=np.float32)
    if x.ndim == 4:
        x = x[None]
    with no_grad():
        act = model.features(x, training=False)[stage - 1].data[0]
    m = np.abs(act).mean(axis=0).astype(np.float64)
    spread = m.max() - m.min()
    if spread <= 0:
        return np.zeros_like(m)
    return (m - m.min()) / spread


# --- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"SGCK"
CKPT_VERSION = 1
MANIFEST_CHUNK = "__manifest__"


@dataclass
class Checkpoint:
    config: NetConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ResNet3D, epoch=0, rng_state=None, meta=None) -> "Checkpoint":
        return cls(model.cfg,
                   {k: v.data.copy() for k, v in model.named_parameters().items()},
                   {k: v.copy() for k, v in model.named_buffers().items()},
                   epoch, rng_state, dict(meta or {}))

    def to_model(self) -> ResNet3D:
        model = ResNet3D(self.config, np.random.default_rng(0))
        load_state(model, self.params, self.buffers)
        return model


def load_state(model: ResNet3D, params, buffers, skip=()):
    own_p, own_b = model.named_parameters(), model.named_buffers()
    for name, t in own_p.items():
        if name in skip:
            continue
        if name not in params:
            raise DataError(f"checkpoint lacks parameter {name}")
        if params[name].shape != t.shape:
            raise DataError(f"parameter {name}: checkpoint shape {params[name].shape}, model {t.shape}")
        t.data = params[name].astype(np.float32).copy()
    for name, buf in own_b.items():
        if name not in buffers:
            raise DataError(f"checkpoint lacks buffer {name}")
        if buffers[name].shape != buf.shape:
            raise DataError(f"buffer {name}: checkpoint shape {buffers[name].shape}, model {buf.shape}")
        buf[...] = buffers[name]
    extra = set(params) - set(own_p) - set(skip)
    if extra:
        raise DataError(f"checkpoint has unknown parameters: {sorted(extra)[:3]}")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    manifest = {
        "config": asdict(ckpt.config),
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "meta": {"tool_version": __version__, **ckpt.meta},
        "params": list(ckpt.params),
        "buffers": list(ckpt.buffers),
    }
    text = json.dumps(manifest, sort_keys=True).encode()
    chunks = [(MANIFEST_CHUNK, np.frombuffer(text, dtype=np.uint8))]
    chunks += [(f"p:{k}", v) for k, v in ckpt.params.items()]
    chunks += [(f"b:{k}", v) for k, v in ckpt.buffers.items()]
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(chunks))]
    for name, arr in chunks:
        payload = write_clip(np.asarray(arr))
        key = name.encode()
        parts += [struct.pack("<H", len(key)), key, struct.pack("<Q", len(payload)), payload]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if len(data) < 14:
        raise ClipFormatError("truncated checkpoint")
    if data[:4] != CKPT_MAGIC:
        raise ClipFormatError("not a checkpoint file")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ClipFormatError("checkpoint checksum mismatch")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise ClipFormatError(f"checkpoint version {version}, expected {CKPT_VERSION}")
    off = 10
    chunks = {}
    end = len(data) - 4
    for _ in range(count):
        if off + 2 > end:
            raise ClipFormatError("truncated checkpoint chunk table")
        (klen,) = struct.unpack_from("<H", data, off)
        key = data[off + 2:off + 2 + klen].decode()
        off += 2 + klen
        (plen,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + plen > end:
            raise ClipFormatError(f"truncated chunk {key}")
        chunks[key] = read_clip(data[off:off + plen])
        off += plen
    if off != end:
        raise ClipFormatError("trailing bytes after checkpoint chunks")
    if MANIFEST_CHUNK not in chunks:
        raise ClipFormatError("checkpoint lacks manifest")
    manifest = json.loads(chunks[MANIFEST_CHUNK].tobytes().decode())
    cfg = NetConfig(**manifest["config"])
    params = {k: chunks[f"p:{k}"] for k in manifest["params"]}
    buffers = {k: chunks[f"b:{k}"] for k in manifest["buffers"]}
    return Checkpoint(cfg, params, buffers, manifest["epoch"], manifest["rng_state"], manifest["meta"])


def save_checkpoint(model_or_ckpt, path: str | os.PathLike, **kwargs) -> Checkpoint:
    ckpt = model_or_ckpt if isinstance(model_or_ckpt, Checkpoint) else Checkpoint.from_model(model_or_ckpt, **kwargs)
    Path(path).write_bytes(checkpoint_bytes(ckpt))
    return ckpt


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    return checkpoint_from_bytes(data)


def load_checkpoint(path, num_classes=None, reset_head=False, rng=None) -> ResNet3D:
    """Load a model; a different ``num_classes`` needs ``reset_head``."""
    ckpt = read_checkpoint(path) if not isinstance(path, Checkpoint) else path
    model = ckpt.to_model()
    if num_classes is not None and num_classes != ckpt.config.num_classes:
        if not reset_head:
            raise DataError(f"checkpoint has {ckpt.config.num_classes} classes, task has {num_classes}; "
                            "pass reset_head to reinitialise the classifier")
        model.reset_head(num_classes, rng if rng is not None else np.random.default_rng(0))
    return model
