"""INI run configuration with dotted ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from proxysign import __version__
from proxysign.channels import ASL_STREAMS, StreamConfig, StreamKind
from proxysign.errors import DataError
from proxysign.model import NetConfig
from proxysign.trainer import TrainConfig


def _split_list(text):
    return [s.strip() for s in str(text).split(",") if s.strip()]


@dataclass
class PathsSection:
    data_root: str = "data"
    clip_dir: str = "clips"
    flow_dir: str = ""
    out_dir: str = "runs"


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1


@dataclass
class SamplerSection:
    T: int = 16
    patch: int = 112
    resize_short: int = 128
    max_angle: float = 10.0


@dataclass
class ChannelsSection:
    streams: list = field(default_factory=lambda: [k.name for k in ASL_STREAMS])
    depth_min: float = 500.0
    depth_max: float = 4500.0
    flow_alpha: float = 15.0
    flow_iters: int = 100
    flow_bound: float = 20.0
    hand_scale: float = 0.25
    face_scale: float = 0.30


@dataclass
class ModelSection:
    depth: int = 34
    width: int = 64
    num_classes: int = 100
    pretrained: str = ""
    reset_head: bool = False


@dataclass
class TrainerSection:
    lr0: float = 3e-3
    decay: float = 0.1
    decay_period: int = 25
    epochs: int = 50
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    split_fraction: float = 0.75


@dataclass
class FusionSection:
    streams: list = field(default_factory=list)
    weights: list = field(default_factory=list)
    grid_search: bool = False


@dataclass
class SynthSection:
    num_classes: int = 3
    clips_per_class: int = 20
    num_signers: int = 4
    style: int = 0


SECTIONS = {
    "paths": PathsSection, "run": RunSection, "sampler": SamplerSection, "channels": ChannelsSection,
    "model": ModelSection, "trainer": TrainerSection, "fusion": FusionSection, "synth": SynthSection,
}
# Paths and thread counts do not affect results and stay out of the hash.
UNHASHED = ("paths",)


def _coerce(section, f, raw):
    kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str,
                                                   "list": list}[f.type]
    try:
        if kind is bool:
            low = str(raw).strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        if kind is list:
            return _split_list(raw)
        return kind(raw)
    except ValueError:
        raise DataError(f"config [{section}] {f.name}: cannot parse {raw!r} as {kind.__name__}") from None


@dataclass
class RunConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    run: RunSection = field(default_factory=RunSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    channels: ChannelsSection = field(default_factory=ChannelsSection)
    model: ModelSection = field(default_factory=ModelSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    synth: SynthSection = field(default_factory=SynthSection)

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        """Defaults, then the INI file (paths relative to it), then overrides."""
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                with open(path) as fh:
                    parser.read_file(fh)
            except OSError as exc:
                raise DataError(f"cannot read config {path}: {exc.strerror}") from None
            except configparser.Error as exc:
                raise DataError(f"malformed config {path}: {exc}") from None
            base = Path(path).resolve().parent
            for section in parser.sections():
                for key, value in parser[section].items():
                    cfg.set(section, key, value)
            for f in fields(PathsSection):
                value = getattr(cfg.paths, f.name)
                if value and not Path(value).is_absolute():
                    setattr(cfg.paths, f.name, str(base / value))
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.partition(".")
            if not sep or not dot:
                raise DataError(f"override {item!r} is not section.key=value")
            cfg.set(section.strip(), name.strip(), value.strip())
        cfg.validate()
        return cfg

    def set(self, section, key, value):
        if section not in SECTIONS:
            raise DataError(f"unknown config section [{section}]")
        sec = getattr(self, section)
        match = [f for f in fields(sec) if f.name == key]
        if not match:
            raise DataError(f"unknown config key {key!r} in [{section}]")
        setattr(sec, key, _coerce(section, match[0], value))

    def validate(self):
        try:
            self.stream_config()
            self.train_config()
            self.net_config()
            for s in self.channels.streams + self.fusion.streams:
                StreamKind.parse(s)
        except ValueError as exc:
            raise DataError(f"invalid configuration: {exc}") from None
        if self.fusion.weights and len(self.fusion.weights) != len(self.fusion.streams):
            raise DataError("[fusion] weights and streams differ in length")

    def to_dict(self, hashed_only=False) -> dict:
        out = dataclasses.asdict(self)
        if hashed_only:
            for s in UNHASHED:
                out.pop(s)
            out["run"].pop("threads")
        return out

    def to_ini(self) -> str:
        lines = []
        for name, sec in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in sec.items():
                lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(hashed_only=True), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"tool_version": __version__, "seed": self.run.seed, "config_hash": self.config_hash()}

    def header(self) -> str:
        p = self.provenance()
        return f"proxysign {p['tool_version']} seed={p['seed']} config={p['config_hash']}"

    # --- module configs ---------------------------------------------------

    def stream_config(self) -> StreamConfig:
        c, s = self.channels, self.sampler
        return StreamConfig(patch=s.patch, resize_short=s.resize_short, max_angle=s.max_angle,
                            depth_min=c.depth_min, depth_max=c.depth_max, flow_alpha=c.flow_alpha,
                            flow_iters=c.flow_iters, flow_bound=c.flow_bound, hand_scale=c.hand_scale,
                            face_scale=c.face_scale)

    def train_config(self) -> TrainConfig:
        t = self.trainer
        return TrainConfig(lr0=t.lr0, decay=t.decay, decay_period=t.decay_period, epochs=t.epochs,
                           batch_size=t.batch_size, momentum=t.momentum, weight_decay=t.weight_decay,
                           T=self.sampler.T, seed=self.run.seed, threads=self.run.threads)

    def net_config(self, num_classes=None) -> NetConfig:
        m = self.model
        return NetConfig(depth=m.depth, num_classes=num_classes or m.num_classes, T=self.sampler.T,
                         width=m.width, input_size=self.sampler.patch)
