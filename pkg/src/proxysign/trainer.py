"""Signer-disjoint splits, step learning-rate schedule and per-stream training."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from proxysign.channels import StreamBuilder, StreamConfig, StreamKind
from proxysign.clipstore import ClipRecord
from proxysign.errors import DataError, NumericalError
from proxysign.model import Checkpoint, NetConfig, ResNet3D, build_resnet3d, load_state
from proxysign.sampler import (
    center_augment,
    center_proxy_indices,
    draw_augment,
    sample_proxy_indices,
    sample_rng,
)
from proxysign.tensornet import ParamSet, sgd_update, softmax_crossentropy

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,lr,loss,train_acc,test_acc"


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 3e-3
    decay: float = 0.1
    decay_period: int = 25
    epochs: int = 50
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    T: int = 16
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.decay_period < 1:
            raise ValueError("epochs, batch_size and decay_period must be >= 1")


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    train_signers: tuple[str, ...]
    test_signers: tuple[str, ...]

    @property
    def train_fraction(self) -> float:
        return len(self.train_ids) / (len(self.train_ids) + len(self.test_ids))


def make_split(clips, fraction=0.75, seed=0) -> SplitSpec:
    """Assign whole signers to train or test, approximating ``fraction`` of clips.

    Signers are visited largest first (ties in seeded random order) and each
    goes to whichever side leaves the train share closer to the target; both
    sides always receive at least one signer.
    """
    counts: dict[str, int] = {}
    for c in clips:
        counts[c.signer_id] = counts.get(c.signer_id, 0) + 1
    if len(counts) < 2:
        raise DataError("a signer-disjoint split needs at least two signers")
    rng = np.random.default_rng(seed)
    signers = sorted(counts)
    tiebreak = dict(zip(signers, rng.permutation(len(signers))))
    order = sorted(signers, key=lambda s: (-counts[s], tiebreak[s]))
    total = sum(counts.values())
    target = fraction * total
    train, test = [], []
    n_train = 0
    for i, s in enumerate(order):
        remaining = len(order) - i
        if not test and remaining == 1:
            test.append(s)
            continue
        if not train and remaining == 1:
            train.append(s)
            n_train += counts[s]
            continue
        if abs(n_train + counts[s] - target) <= abs(n_train - target):
            train.append(s)
            n_train += counts[s]
        else:
            test.append(s)
    train_set = set(train)
    train_ids = tuple(c.clip_id for c in clips if c.signer_id in train_set)
    test_ids = tuple(c.clip_id for c in clips if c.signer_id not in train_set)
    return SplitSpec(train_ids, test_ids, tuple(sorted(train)), tuple(sorted(test)))


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr0 * decay ** floor(epoch / decay_period)."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    # rounding drops the ulp noise of repeated multiplication (3e-3 * 0.1 -> 3e-4)
    return float(f"{cfg.lr0 * cfg.decay ** (epoch // cfg.decay_period):.12g}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    train_acc: float
    test_acc: float

    def csv(self) -> str:
        return f"{self.epoch},{self.lr!r},{self.loss:.6f},{self.train_acc:.6f},{self.test_acc:.6f}"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: ResNet3D
    history: list[EpochRecord]
    initial_test_acc: float | None = None
    flags: list[str] = field(default_factory=list)

    def log_lines(self) -> list[str]:
        return [LOG_HEADER] + [r.csv() for r in self.history]


def _batches(order, size):
    batches = [order[i:i + size] for i in range(0, len(order), size)]
    # Batch norm needs >1 value per channel; fold a trailing singleton back in.
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


class StreamData:
    """Clips plus the sample construction for one stream."""

    def __init__(self, clips, stream: StreamKind, T: int, stream_cfg: StreamConfig | None = None,
                 builder: StreamBuilder | None = None):
        self.clips = {c.clip_id: c for c in clips}
        self.stream = stream
        self.T = T
        self.builder = builder or StreamBuilder(stream_cfg)
        self.cfg = self.builder.cfg

    def train_sample(self, clip_id, seed, epoch):
        clip = self.clips[clip_id]
        rng = sample_rng(seed, epoch, clip_id)
        plan = sample_proxy_indices(clip.length, self.T, rng)
        aug = draw_augment(rng, self.builder.frame_hw(clip, self.stream), self.cfg.patch, self.cfg.max_angle)
        return self.builder.build(clip, self.stream, plan, aug), plan

    def eval_sample(self, clip_id):
        clip = self.clips[clip_id]
        plan = center_proxy_indices(clip.length, self.T)
        aug = center_augment(self.builder.frame_hw(clip, self.stream), self.cfg.patch)
        return self.builder.build(clip, self.stream, plan, aug)


def predict_scores(model: ResNet3D, data: StreamData, clip_ids, batch_size=8) -> np.ndarray:
    """Eval-mode softmax scores (M, K) for the given clips."""
    out = []
    for i in range(0, len(clip_ids), batch_size):
        x = np.stack([data.eval_sample(c) for c in clip_ids[i:i + batch_size]])
        out.append(model.predict(x))
    if not out:
        return np.zeros((0, model.cfg.num_classes))
    return np.concatenate(out)


def _accuracy(model, data, ids):
    if not ids:
        return float("nan")
    scores = predict_scores(model, data, list(ids))
    labels = np.array([data.clips[c].label for c in ids])
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def _check_channels(data: StreamData, ids):
    for cid in ids:
        if cid not in data.clips:
            raise DataError(f"clip {cid} missing from dataset")
        c = data.clips[cid]
        if data.stream.source == "depth" and c.depth is None:
            raise DataError(f"clip {cid} has no depth channel")
        if data.stream.modality != "body" and c.skeleton is None:
            raise DataError(f"clip {cid} has no skeleton for region stream")


def train_stream(cfg: TrainConfig, net_cfg: NetConfig, data: StreamData, split: SplitSpec,
                 init: Checkpoint | None = None, reset_head=False, log_file=None,
                 meta=None) -> TrainResult:
    """Minibatch SGD for one stream with a fresh proxy plan per clip and epoch.

    When ``init`` is given, training starts from its parameters (fine-tuning);
    a different class count requires ``reset_head``.  ``log_file`` receives
    one CSV row per epoch as soon as it completes.
    """
    if net_cfg.T != cfg.T:
        raise ValueError(f"network T={net_cfg.T} but training T={cfg.T}")
    if net_cfg.input_size != data.cfg.patch:
        raise ValueError(f"network input {net_cfg.input_size} but patch {data.cfg.patch}")
    train_ids = list(split.train_ids)
    if not train_ids:
        raise DataError("empty training split")
    _check_channels(data, train_ids + list(split.test_ids))
    labels = {cid: data.clips[cid].label for cid in train_ids + list(split.test_ids)}
    if max(labels.values()) >= net_cfg.num_classes:
        raise DataError(f"label {max(labels.values())} exceeds num_classes={net_cfg.num_classes}")

    rng = np.random.default_rng(cfg.seed)
    model = build_resnet3d(net_cfg, rng)
    initial_test_acc = None
    if init is not None:
        _load_init(model, init, net_cfg, reset_head, rng)
        initial_test_acc = _accuracy(model, data, split.test_ids)

    params = ParamSet(model.named_parameters())
    history: list[EpochRecord] = []
    flags: list[str] = []
    if log_file is not None:
        log_file.write(LOG_HEADER + "\n")
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = np.random.default_rng([cfg.seed, epoch, 0x5EED]).permutation(len(train_ids))
            losses, correct, seen = [], 0, 0
            for batch in _batches(order, cfg.batch_size):
                ids = [train_ids[i] for i in batch]
                job = lambda cid: data.train_sample(cid, cfg.seed, epoch)[0]  # noqa: E731
                samples = list(pool.map(job, ids)) if pool else [job(c) for c in ids]
                x = np.stack(samples)
                y = np.array([labels[c] for c in ids])
                loss, probs = softmax_crossentropy(model.forward(x, training=True), y)
                if not np.isfinite(loss.data):
                    raise NumericalError(f"non-finite loss at epoch {epoch} in batch {ids}")
                loss.backward()
                sgd_update(params, params.grads(), lr, cfg.momentum, cfg.weight_decay)
                params.zero_grad()
                losses.append(float(loss.data) * len(ids))
                correct += int(np.sum(np.argmax(probs, axis=1) == y))
                seen += len(ids)
            rec = EpochRecord(epoch, lr, sum(losses) / seen, correct / seen,
                              _accuracy(model, data, split.test_ids))
            history.append(rec)
            log.info("%s epoch %d lr %.2e loss %.4f train %.3f test %.3f", data.stream, epoch, lr,
                     rec.loss, rec.train_acc, rec.test_acc)
            if log_file is not None:
                log_file.write(rec.csv() + "\n")
                log_file.flush()
            if epoch == 19 and rec.train_acc < 2 / net_cfg.num_classes:
                msg = f"not converging: train accuracy {rec.train_acc:.3f} after 20 epochs"
                flags.append(msg)
                log.warning("%s: %s", data.stream, msg)
    finally:
        if pool:
            pool.shutdown()

    ckpt = Checkpoint.from_model(model, epoch=cfg.epochs, rng_state=rng.bit_generator.state,
                                 meta={"stream": data.stream.name, "seed": cfg.seed, **(meta or {})})
    return TrainResult(ckpt, model, history, initial_test_acc, flags)


def _load_init(model, init: Checkpoint, net_cfg: NetConfig, reset_head, rng):
    base = init.config
    for attr in ("depth", "width", "in_channels"):
        if getattr(base, attr) != getattr(net_cfg, attr):
            raise DataError(f"pretrained {attr}={getattr(base, attr)} incompatible with {getattr(net_cfg, attr)}")
    head = ("head.weight", "head.bias")
    if base.num_classes != net_cfg.num_classes:
        if not reset_head:
            raise DataError(f"pretrained head has {base.num_classes} classes, task has "
                            f"{net_cfg.num_classes}; enable reset_head")
        load_state(model, init.params, init.buffers, skip=head)
    else:
        load_state(model, init.params, init.buffers)


def finetune(base: Checkpoint, cfg: TrainConfig, data: StreamData, split: SplitSpec,
             num_classes: int | None = None, reset_head=False, **kwargs) -> TrainResult:
    """Continue training from ``base`` with the same loop semantics."""
    net_cfg = replace(base.config, T=cfg.T, input_size=data.cfg.patch,
                      num_classes=num_classes or base.config.num_classes)
    if net_cfg.in_channels != base.config.in_channels:
        raise DataError("stem channel mismatch")
    return train_stream(cfg, net_cfg, data, split, init=base, reset_head=reset_head, **kwargs)


def distinct_rates(cfg: TrainConfig) -> int:
    return math.ceil(cfg.epochs / cfg.decay_period)
