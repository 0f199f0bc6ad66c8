import io
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxysign.channels import GRID_STREAMS, StreamBuilder, StreamConfig, StreamKind, clip_flow
from proxysign.errors import DataError
from proxysign.model import Checkpoint, NetConfig, build_resnet3d
from proxysign.sampler import sample_proxy_indices, sample_rng
from proxysign.synth import SynthConfig, synth_clips
from proxysign.trainer import (
    LOG_HEADER,
    SplitSpec,
    StreamData,
    TrainConfig,
    distinct_rates,
    finetune,
    lr_at,
    make_split,
    train_stream,
)

TINY = StreamConfig(patch=16, resize_short=20, flow_bound=4.0, flow_iters=10)
TINY_NET = NetConfig(depth=18, num_classes=3, T=4, width=2, input_size=16)
SMALL = StreamConfig(patch=32, resize_short=40, flow_bound=4.0, flow_iters=30)


def fake_clips(counts):
    out = []
    for s, n in counts.items():
        out += [SimpleNamespace(clip_id=f"{s}_{i:03d}", signer_id=s) for i in range(n)]
    return out


@pytest.fixture(scope="module")
def few_clips():
    return synth_clips(SynthConfig(clips_per_class=4))


# --- splits ----------------------------------------------------------------

def test_split_equal_signers():
    split = make_split(fake_clips({f"s{i}": 25 for i in range(4)}), 0.75, seed=0)
    assert len(split.train_ids) == 75 and len(split.test_ids) == 25
    assert len(split.train_signers) == 3 and len(split.test_signers) == 1


@pytest.mark.parametrize("fraction", [0.1, 0.75, 0.99])
def test_two_signers_one_per_side(fraction):
    split = make_split(fake_clips({"a": 30, "b": 5}), fraction, seed=1)
    assert len(split.train_signers) == 1 and len(split.test_signers) == 1


def test_single_signer_rejected():
    with pytest.raises(DataError):
        make_split(fake_clips({"a": 10}))


def test_split_deterministic():
    clips = fake_clips({f"s{i}": 3 for i in range(15)})
    assert make_split(clips, seed=4) == make_split(clips, seed=4)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=2, max_size=16), st.integers(0, 2**32 - 1))
def test_split_signer_disjoint(sizes, seed):
    clips = fake_clips({f"s{i:02d}": n for i, n in enumerate(sizes)})
    split = make_split(clips, 0.75, seed)
    assert not set(split.train_signers) & set(split.test_signers)
    assert not set(split.train_ids) & set(split.test_ids)
    assert len(split.train_ids) + len(split.test_ids) == len(clips)
    assert split.train_ids and split.test_ids
    by_id = {c.clip_id: c.signer_id for c in clips}
    assert {by_id[c] for c in split.train_ids} == set(split.train_signers)


def test_split_close_to_target():
    clips = fake_clips({f"s{i:02d}": 3 + i % 2 for i in range(15)})
    assert abs(make_split(clips, 0.75, 0).train_fraction - 0.75) < 0.05


# --- learning rate ---------------------------------------------------------

def test_lr_examples():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 3e-3
    assert lr_at(25, cfg) == 3e-4
    assert lr_at(49, cfg) == lr_at(25, cfg)
    for bad in (-1, 50):
        with pytest.raises(ValueError):
            lr_at(bad, cfg)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 120), st.integers(1, 40))
def test_lr_piecewise_constant(epochs, period):
    cfg = TrainConfig(epochs=epochs, decay_period=period)
    rates = [lr_at(e, cfg) for e in range(epochs)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))
    assert len(set(rates)) == distinct_rates(cfg) == math.ceil(epochs / period)
    assert all(rates[e] == rates[e - e % period] for e in range(epochs))
    assert all(r == pytest.approx(3e-3 * 0.1 ** (e // period), rel=1e-11) for e, r in enumerate(rates))


def test_train_config_validation():
    for kwargs in ({"lr0": 0}, {"epochs": 0}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


# --- per-epoch resampling --------------------------------------------------

def test_proxy_plans_change_between_epochs(clips):
    differ = 0
    for epoch in range(100):
        plans = [sorted(sample_proxy_indices(c.length, 16, sample_rng(0, e, c.clip_id)).indices
                        for c in clips) for e in (epoch, epoch + 1)]
        differ += sorted(map(tuple, plans[0])) != sorted(map(tuple, plans[1]))
    assert differ / 100 >= 0.99


def test_training_sample_uses_epoch_plan(few_clips):
    data = StreamData(few_clips, StreamKind("body", "rgb"), 4, TINY)
    cid = few_clips[0].clip_id
    x0, p0 = data.train_sample(cid, 0, 0)
    x0b, p0b = data.train_sample(cid, 0, 0)
    assert x0.tobytes() == x0b.tobytes() and p0 == p0b
    assert x0.shape == (3, 4, 16, 16)


# --- training loop ---------------------------------------------------------

def quick_run(clips, seed=0, epochs=2, threads=1, log_file=None, stream="body-rgb"):
    data = StreamData(clips, StreamKind.parse(stream), 4, TINY)
    split = make_split(clips, 0.75, 0)
    cfg = TrainConfig(epochs=epochs, batch_size=4, T=4, seed=seed, threads=threads)
    return train_stream(cfg, TINY_NET, data, split, log_file=log_file), data, split


def test_training_deterministic(few_clips):
    buf1, buf2 = io.StringIO(), io.StringIO()
    r1, _, _ = quick_run(few_clips, log_file=buf1)
    r2, _, _ = quick_run(few_clips, log_file=buf2)
    assert buf1.getvalue() == buf2.getvalue()
    assert buf1.getvalue().splitlines()[0] == LOG_HEADER
    assert r1.log_lines() == buf1.getvalue().splitlines()
    for name, value in r1.checkpoint.params.items():
        assert value.tobytes() == r2.checkpoint.params[name].tobytes()


def test_threads_do_not_change_results(few_clips):
    r1, _, _ = quick_run(few_clips, epochs=1)
    r2, _, _ = quick_run(few_clips, epochs=1, threads=2)
    assert r1.log_lines() == r2.log_lines()


def test_log_records(few_clips):
    r, _, split = quick_run(few_clips, epochs=3)
    assert [h.epoch for h in r.history] == [0, 1, 2]
    assert all(0 <= h.train_acc <= 1 and 0 <= h.test_acc <= 1 for h in r.history)
    assert all(np.isfinite(h.loss) for h in r.history)
    assert r.checkpoint.epoch == 3 and r.checkpoint.meta["stream"] == "body-rgb"


def test_not_converging_flag(few_clips):
    data = StreamData(few_clips, StreamKind("body", "rgb"), 4, TINY)
    split = make_split(few_clips, 0.75, 0)
    cfg = TrainConfig(lr0=1e-12, epochs=20, batch_size=9, T=4)
    r = train_stream(cfg, TINY_NET, data, split)
    assert r.history[19].train_acc < 2 / 3
    assert any("not converging" in f for f in r.flags)


def test_training_input_checks(few_clips):
    data = StreamData(few_clips, StreamKind("body", "rgb"), 4, TINY)
    split = make_split(few_clips, 0.75, 0)
    with pytest.raises(ValueError):
        train_stream(TrainConfig(T=8, epochs=1), TINY_NET, data, split)
    with pytest.raises(DataError):
        train_stream(TrainConfig(T=4, epochs=1), TINY_NET, data,
                     SplitSpec(split.train_ids + ("nope",), split.test_ids, (), ()))
    with pytest.raises(DataError):
        train_stream(TrainConfig(T=4, epochs=1), NetConfig(**{**TINY_NET.__dict__, "num_classes": 2}), data, split)


@pytest.mark.slow
def test_loss_falls_for_every_stream_kind(clips):
    flows = {(c.clip_id, src): clip_flow(getattr(c, src), src, SMALL) for c in clips for src in ("rgb", "depth")}
    split = make_split(clips, 0.75, 0)
    cfg = TrainConfig(epochs=11, batch_size=8, T=8)
    net = NetConfig(depth=18, num_classes=3, T=8, width=8, input_size=32)
    for kind in GRID_STREAMS + (StreamKind("face", "rgb"),):
        data = StreamData(clips, kind, 8, builder=StreamBuilder(SMALL, precomputed_flow=flows))
        hist = train_stream(cfg, net, data, split).history
        assert abs(hist[0].loss - math.log(3)) < 0.2, kind
        assert hist[10].loss < hist[0].loss, kind


# --- fine-tuning -----------------------------------------------------------

def test_finetune_warm_start(few_clips):
    base, data, split = quick_run(few_clips, epochs=2)
    r = finetune(base.checkpoint, TrainConfig(epochs=1, batch_size=4, T=4), data, split)
    assert r.initial_test_acc == base.history[-1].test_acc


def test_finetune_head_reset(few_clips):
    four = synth_clips(SynthConfig(num_classes=4, clips_per_class=3))
    base, _, _ = quick_run(few_clips, epochs=1)
    data = StreamData(four, StreamKind("body", "rgb"), 4, TINY)
    split = make_split(four, 0.75, 0)
    cfg = TrainConfig(epochs=1, batch_size=4, T=4)
    with pytest.raises(DataError, match="reset_head"):
        finetune(base.checkpoint, cfg, data, split, num_classes=4)
    r = finetune(base.checkpoint, cfg, data, split, num_classes=4, reset_head=True)
    assert r.checkpoint.config.num_classes == 4


def test_stem_channel_mismatch(few_clips):
    one_channel = Checkpoint.from_model(build_resnet3d(NetConfig(**{**TINY_NET.__dict__, "in_channels": 1}), 0))
    data = StreamData(few_clips, StreamKind("body", "rgb"), 4, TINY)
    split = make_split(few_clips, 0.75, 0)
    with pytest.raises(DataError, match="in_channels"):
        train_stream(TrainConfig(epochs=1, T=4), TINY_NET, data, split, init=one_channel)
    wider = Checkpoint.from_model(build_resnet3d(NetConfig(**{**TINY_NET.__dict__, "width": 4}), 0))
    with pytest.raises(DataError, match="width"):
        train_stream(TrainConfig(epochs=1, T=4), TINY_NET, data, split, init=wider)


@pytest.mark.slow
def test_pretraining_helps_related_task():
    # Task A: four classes in one visual style.  Task B: three of the same
    # motions in another palette with re-paired hand shapes.
    kind = StreamKind("body", "rgb")
    task_a = synth_clips(SynthConfig(num_classes=4, style=0))
    task_b = synth_clips(SynthConfig(num_classes=3, style=1))
    net = NetConfig(depth=18, num_classes=4, T=8, width=8, input_size=32)
    cfg = TrainConfig(epochs=20, decay_period=10, T=8)
    pre = train_stream(cfg, net, StreamData(task_a, kind, 8, SMALL), make_split(task_a, 0.75, 0))
    split_b = make_split(task_b, 0.75, 0)
    tuned = finetune(pre.checkpoint, cfg, StreamData(task_b, kind, 8, SMALL), split_b, num_classes=3,
                     reset_head=True)
    scratch = train_stream(cfg, NetConfig(**{**net.__dict__, "num_classes": 3}),
                           StreamData(task_b, kind, 8, SMALL), split_b)
    assert tuned.history[-1].test_acc >= scratch.history[-1].test_acc
