"""Command-line entry point: ``proxysign <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from proxysign import __version__
from proxysign.channels import StreamBuilder, StreamKind, clip_flow
from proxysign.clipstore import INDEX_NAME, extract_clips, load_clips, load_tensor, load_video, save_clips, save_tensor
from proxysign.config import RunConfig
from proxysign.errors import DataError, NumericalError
from proxysign.fusion import FusionSpec, ScoreMatrix, ablation_report, accuracy, fuse, grid_search_weights
from proxysign.model import read_checkpoint, save_checkpoint
from proxysign.sampler import center_augment, center_proxy_indices
from proxysign.trainer import StreamData, make_split, predict_scores, train_stream

log = logging.getLogger("proxysign")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
PROVENANCE_NAME = "provenance.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- helpers ----------------------------------------------------------------

def _dir(path, what, create=False) -> Path:
    p = Path(path)
    if create:
        p.mkdir(parents=True, exist_ok=True)
    elif not p.is_dir():
        raise DataError(f"{what} directory {p} does not exist")
    return p


def _write_provenance(out: Path, cfg: RunConfig, command: str, extra=None):
    record = {"command": command, **cfg.provenance(), **(extra or {})}
    (out / PROVENANCE_NAME).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _flow_name(clip_id, source):
    return f"{clip_id}.flow" if source == "rgb" else f"{clip_id}.depth.flow"


def _load_flows(cfg: RunConfig, clips) -> dict:
    flow_dir = cfg.paths.flow_dir
    if not flow_dir or not Path(flow_dir).is_dir():
        return {}
    flows = {}
    for c in clips:
        for source in ("rgb", "depth"):
            p = Path(flow_dir) / _flow_name(c.clip_id, source)
            if p.exists():
                flows[(c.clip_id, source)] = load_tensor(p)
    if flows:
        log.info("using %d precomputed flow files from %s", len(flows), flow_dir)
    return flows


def _stream_data(cfg: RunConfig, stream: StreamKind, clips) -> StreamData:
    builder = StreamBuilder(cfg.stream_config(), precomputed_flow=_load_flows(cfg, clips))
    return StreamData(clips, stream, cfg.sampler.T, builder=builder)


def _parse_stream(name) -> StreamKind:
    try:
        return StreamKind.parse(name)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _split_names(text):
    return [s.strip() for s in text.split(",") if s.strip()]


# --- commands ---------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig):
    from proxysign.synth import SynthConfig, generate, write_dataset

    s = cfg.synth
    out = _dir(args.out or cfg.paths.data_root, "output", create=True)
    paths = write_dataset(generate(SynthConfig(num_classes=s.num_classes, clips_per_class=s.clips_per_class,
                                               num_signers=s.num_signers, style=s.style, seed=cfg.run.seed)), out)
    _write_provenance(out, cfg, "synth-data")
    print(f"wrote {len(paths)} videos to {out}")


def cmd_extract_clips(args, cfg: RunConfig):
    data = _dir(args.data or cfg.paths.data_root, "dataset")
    manifests = sorted(data.glob("*.manifest"))
    if not manifests:
        raise DataError(f"no .manifest files in {data}")
    out = _dir(args.out or cfg.paths.clip_dir, "output", create=True)
    clips = []
    for m in manifests:
        manifest, frames = load_video(m, cfg.model.num_classes)
        clips.extend(extract_clips(manifest, frames))
    save_clips(clips, out)
    _write_provenance(out, cfg, "extract-clips")
    print(f"extracted {len(clips)} clips from {len(manifests)} videos to {out}")


def cmd_compute_flow(args, cfg: RunConfig):
    clip_dir = _dir(args.clips or cfg.paths.clip_dir, "clip")
    out = _dir(args.out or cfg.paths.flow_dir or clip_dir / "flow", "output", create=True)
    sources = _split_names(args.sources)
    if not set(sources) <= {"rgb", "depth"}:
        raise DataError(f"flow sources must be rgb and/or depth, got {sources}")
    clips = load_clips(clip_dir)
    scfg = cfg.stream_config()
    for c in clips:
        for source in sources:
            save_tensor(out / _flow_name(c.clip_id, source), clip_flow(c.rgb if source == "rgb" else c.depth,
                                                                         source, scfg))
    _write_provenance(out, cfg, "compute-flow", {"sources": sources})
    print(f"wrote flow for {len(clips)} clips to {out}")


def cmd_make_streams(args, cfg: RunConfig):
    clip_dir = _dir(args.clips or cfg.paths.clip_dir, "clip")
    streams = [_parse_stream(s) for s in (_split_names(args.streams) if args.streams else cfg.channels.streams)]
    out = _dir(args.out or Path(cfg.paths.out_dir) / "streams", "output", create=True)
    clips = load_clips(clip_dir)
    for kind in streams:
        data = _stream_data(cfg, kind, clips)
        for c in clips:
            plan = center_proxy_indices(c.length, cfg.sampler.T)
            aug = center_augment(data.builder.frame_hw(c, kind), cfg.sampler.patch)
            sample = data.builder.build(c, kind, plan, aug)
            img = np.floor(sample.transpose(1, 2, 3, 0) * 255 + 0.5).astype(np.uint8)
            save_tensor(out / f"{c.clip_id}.{kind.name}.sgst", img)
    _write_provenance(out, cfg, "make-streams", {"streams": [k.name for k in streams]})
    print(f"wrote {len(streams)} stream(s) for {len(clips)} clips to {out}")


def _split_for(cfg: RunConfig, clips):
    return make_split(clips, cfg.trainer.split_fraction, cfg.run.seed)


def cmd_train(args, cfg: RunConfig):
    stream = _parse_stream(args.stream)
    clips = load_clips(_dir(args.clips or cfg.paths.clip_dir, "clip"))
    out = _dir(args.out or cfg.paths.out_dir, "output", create=True)
    split = _split_for(cfg, clips)
    data = _stream_data(cfg, stream, clips)
    init = None
    pretrained = args.pretrained or cfg.model.pretrained
    if pretrained:
        init = read_checkpoint(pretrained)
    meta = {"config_hash": cfg.config_hash(), "train_signers": list(split.train_signers)}
    log_path = out / f"{stream.name}.log.csv"
    with open(log_path, "w") as fh:
        fh.write(f"# {cfg.header()} stream={stream.name}\n")
        result = train_stream(cfg.train_config(), cfg.net_config(), data, split, init=init,
                              reset_head=args.reset_head or cfg.model.reset_head, log_file=fh, meta=meta)
    ckpt_path = out / f"{stream.name}.ckpt"
    save_checkpoint(result.checkpoint, ckpt_path)
    last = result.history[-1]
    for flag in result.flags:
        print(f"warning: {flag}", file=sys.stderr)
    if result.initial_test_acc is not None:
        print(f"initial test accuracy {result.initial_test_acc:.4f}")
    print(f"{stream.name}: epoch {last.epoch} loss {last.loss:.4f} train_acc {last.train_acc:.4f} "
          f"test_acc {last.test_acc:.4f}; checkpoint {ckpt_path}")


def cmd_evaluate(args, cfg: RunConfig):
    stream = _parse_stream(args.stream)
    clips = load_clips(_dir(args.clips or cfg.paths.clip_dir, "clip"))
    out = _dir(args.out or cfg.paths.out_dir, "output", create=True)
    ckpt = read_checkpoint(args.checkpoint or out / f"{stream.name}.ckpt")
    model = ckpt.to_model()
    if model.cfg.input_size != cfg.sampler.patch or model.cfg.T != cfg.sampler.T:
        raise DataError(f"checkpoint expects T={model.cfg.T}, patch={model.cfg.input_size}; "
                        f"configuration has T={cfg.sampler.T}, patch={cfg.sampler.patch}")
    ids = [c.clip_id for c in clips] if args.all else list(_split_for(cfg, clips).test_ids)
    data = _stream_data(cfg, stream, clips)
    scores = predict_scores(model, data, ids)
    labels = np.array([data.clips[c].label for c in ids])
    mat = ScoreMatrix(ids, scores, stream.name, labels)
    path = out / f"{stream.name}.scores.csv"
    mat.save(path, f"{cfg.header()} stream={stream.name}")
    print(f"{stream.name}: accuracy {accuracy(mat):.4f} on {len(ids)} clips; scores {path}")


def _load_scores(directory: Path, streams):
    return [ScoreMatrix.load(directory / f"{s}.scores.csv", s) for s in streams]


def cmd_fuse(args, cfg: RunConfig):
    streams = _split_names(args.streams) if args.streams else cfg.fusion.streams
    if not streams:
        raise DataError("no streams to fuse; pass --streams or set [fusion] streams")
    for s in streams:
        _parse_stream(s)
    score_dir = _dir(args.scores or cfg.paths.out_dir, "score")
    mats = _load_scores(score_dir, streams)
    if args.grid_search or cfg.fusion.grid_search:
        spec, _ = grid_search_weights(mats, mats[0].labels)
        print("grid-search weights " + ",".join(f"{s}={w:g}" for s, w in spec.weights))
    else:
        raw = _split_names(args.weights) if args.weights else cfg.fusion.weights
        try:
            weights = [float(w) for w in raw] if raw else [1.0] * len(streams)
        except ValueError:
            raise DataError(f"weights must be numbers, got {raw}") from None
        if len(weights) != len(streams):
            raise DataError(f"{len(weights)} weights for {len(streams)} streams")
        spec = FusionSpec(tuple(zip(streams, weights)))
    fused = fuse(mats, spec)
    path = Path(args.output) if args.output else score_dir / "fused.scores.csv"
    fused.save(path, f"{cfg.header()} fusion={spec.label} weights={','.join(f'{w:g}' for _, w in spec.weights)}")
    if fused.labels is not None:
        print(f"fused {spec.label}: accuracy {accuracy(fused):.4f}; scores {path}")
    else:
        print(f"fused {spec.label}: scores {path}")


def _parse_specs(text, streams):
    if not text:
        singles = [FusionSpec.uniform([s]) for s in streams]
        return singles + ([FusionSpec.uniform(streams)] if len(streams) > 1 else [])
    return [FusionSpec.uniform([s.strip() for s in part.split("+")]) for part in text.split(";") if part.strip()]


def cmd_report(args, cfg: RunConfig):
    streams = _split_names(args.streams) if args.streams else (cfg.fusion.streams or cfg.channels.streams)
    score_dir = _dir(args.scores or cfg.paths.out_dir, "score")
    specs = _parse_specs(args.specs, streams)
    needed = list(dict.fromkeys(s for spec in specs for s in spec.streams))
    mats = dict(zip(needed, _load_scores(score_dir, needed)))
    categories = None
    clip_dir = Path(args.clips or cfg.paths.clip_dir)
    if (clip_dir / INDEX_NAME).exists():
        index = {}
        for row in (clip_dir / INDEX_NAME).read_text().splitlines()[1:]:
            if row.strip():
                cols = row.split("\t")
                index[cols[0]] = cols[2]
        ids = mats[needed[0]].clip_ids
        if all(c in index for c in ids):
            categories = [index[c] for c in ids]
    report = ablation_report(mats, specs, categories=categories)
    out = _dir(args.out or score_dir, "output", create=True)
    (out / "report.csv").write_text(report.to_csv(cfg.header()))
    (out / "report.txt").write_text(f"# {cfg.header()}\n" + report.to_text())
    print(report.to_text(), end="")


def cmd_selftest(args, cfg: RunConfig):
    from proxysign.selftest import run_selftest

    results = run_selftest(conv_cases=args.cases, seed=cfg.run.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"selftest: {len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise NumericalError(f"{len(failed)} self-test check(s) failed")


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
    common.add_argument("--threads", type=int, help="worker cap (results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="proxysign", description="Multi-stream 3-D CNN sign recognition toolkit.")
    parser.add_argument("--version", action="version", version=f"proxysign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND", parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("synth-data", cmd_synth_data, "generate a synthetic moving-shape dataset")
    p.add_argument("--out", help="output directory (default [paths] data_root)")

    p = add("extract-clips", cmd_extract_clips, "cut annotated clips out of manifest-described videos")
    p.add_argument("--data", help="directory of .manifest files (default [paths] data_root)")
    p.add_argument("--out", help="clip directory (default [paths] clip_dir)")

    p = add("compute-flow", cmd_compute_flow, "precompute Horn-Schunck flow between consecutive frames")
    p.add_argument("--clips", help="clip directory")
    p.add_argument("--out", help="flow directory (default [paths] flow_dir)")
    p.add_argument("--sources", default="rgb,depth", help="comma list of rgb, depth")

    p = add("make-streams", cmd_make_streams, "write centre-sampled network inputs for inspection")
    p.add_argument("--clips", help="clip directory")
    p.add_argument("--streams", help="comma list of stream kinds (default [channels] streams)")
    p.add_argument("--out", help="output directory")

    p = add("train", cmd_train, "train one stream network")
    p.add_argument("--stream", required=True, help="stream kind, e.g. body-rgb")
    p.add_argument("--clips", help="clip directory")
    p.add_argument("--out", help="run directory (default [paths] out_dir)")
    p.add_argument("--pretrained", help="checkpoint to fine-tune from")
    p.add_argument("--reset-head", action="store_true", help="reinitialise the classifier of --pretrained")

    p = add("evaluate", cmd_evaluate, "score the test split with a trained stream network")
    p.add_argument("--stream", required=True)
    p.add_argument("--clips", help="clip directory")
    p.add_argument("--checkpoint", help="default <out>/<stream>.ckpt")
    p.add_argument("--out", help="run directory")
    p.add_argument("--all", action="store_true", help="score every clip instead of the test split")

    p = add("fuse", cmd_fuse, "late-fuse per-stream score files")
    p.add_argument("--streams", help="comma list of streams")
    p.add_argument("--weights", help="comma list of weights (default uniform)")
    p.add_argument("--scores", help="directory holding <stream>.scores.csv")
    p.add_argument("--output", help="fused score file (default <scores>/fused.scores.csv)")
    p.add_argument("--grid-search", action="store_true", help="choose weights by grid search on these scores")

    p = add("report", cmd_report, "ablation table over fusion combinations")
    p.add_argument("--streams", help="comma list of streams")
    p.add_argument("--specs", help="';'-separated fusions of '+'-joined streams")
    p.add_argument("--scores", help="directory holding <stream>.scores.csv")
    p.add_argument("--clips", help="clip directory, for per-category accuracy")
    p.add_argument("--out", help="report directory")

    p = add("selftest", cmd_selftest, "run the convolution oracle and gradient checks")
    p.add_argument("--cases", type=int, default=200, help="random conv3d configurations")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if args.threads is not None:
            overrides.append(f"run.threads={args.threads}")
        cfg = RunConfig.load(args.config, overrides)
        args.func(args, cfg)
    except (DataError, ValueError) as exc:
        print(f"proxysign: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"proxysign: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
