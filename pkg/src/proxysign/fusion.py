"""Weighted late fusion of per-stream softmax scores, accuracy metrics and
ablation tables."""

from __future__ import annotations

import io
import itertools
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from proxysign.clipstore import CATEGORIES
from proxysign.errors import DataError

ROW_SUM_TOL = 1e-5


@dataclass
class ScoreMatrix:
    clip_ids: list[str]
    scores: np.ndarray  # (M, K)
    stream: str = ""
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] == 0:
            raise DataError(f"score matrix must be non-empty (M, K), got {self.scores.shape}")
        if len(self.clip_ids) != self.scores.shape[0]:
            raise DataError(f"{len(self.clip_ids)} clip ids for {self.scores.shape[0]} rows")
        if not np.allclose(self.scores.sum(axis=1), 1.0, atol=ROW_SUM_TOL, rtol=0):
            raise DataError(f"stream {self.stream!r}: score rows must sum to 1")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.clip_ids),):
                raise DataError("labels do not align with clip ids")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        buf.write("clip_id,label," + ",".join(f"c{k}" for k in range(self.num_classes)) + "\n")
        for i, cid in enumerate(self.clip_ids):
            label = "" if self.labels is None else str(int(self.labels[i]))
            buf.write(f"{cid},{label}," + ",".join(repr(float(v)) for v in self.scores[i]) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, stream: str = "") -> "ScoreMatrix":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if not lines:
            raise DataError("empty score file")
        header = lines[0].split(",")
        if header[:2] != ["clip_id", "label"] or header[2:] != [f"c{k}" for k in range(len(header) - 2)]:
            raise DataError(f"bad score header {lines[0]!r}")
        ids, labels, rows = [], [], []
        for n, ln in enumerate(lines[1:], start=2):
            cols = ln.split(",")
            if len(cols) != len(header):
                raise DataError(f"score row {n}: expected {len(header)} fields")
            ids.append(cols[0])
            labels.append(cols[1])
            try:
                rows.append([float(v) for v in cols[2:]])
            except ValueError:
                raise DataError(f"score row {n}: non-numeric score") from None
        lab = None if all(v == "" for v in labels) else np.array([int(v) for v in labels])
        return cls(ids, np.array(rows), stream, lab)

    def save(self, path: str | os.PathLike, header_comment: str | None = None):
        Path(path).write_text(self.to_csv(header_comment))

    @classmethod
    def load(cls, path: str | os.PathLike, stream: str = "") -> "ScoreMatrix":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc.strerror}") from None
        return cls.from_csv(text, stream or Path(path).name.split(".")[0])


@dataclass(frozen=True)
class FusionSpec:
    weights: tuple[tuple[str, float], ...]

    def __post_init__(self):
        names = [s for s, _ in self.weights]
        if not names:
            raise DataError("fusion spec is empty")
        if len(set(names)) != len(names):
            raise DataError(f"duplicate streams in fusion spec: {names}")
        ws = np.array([w for _, w in self.weights], dtype=np.float64)
        if not np.all(np.isfinite(ws)) or np.any(ws < 0):
            raise DataError("fusion weights must be finite and non-negative")
        if not np.any(ws > 0):
            raise DataError("at least one fusion weight must be positive")

    @classmethod
    def uniform(cls, streams) -> "FusionSpec":
        return cls(tuple((s, 1.0) for s in streams))

    @property
    def streams(self) -> tuple[str, ...]:
        return tuple(s for s, _ in self.weights)

    @property
    def label(self) -> str:
        return "+".join(self.streams)


def fuse(mats, spec: FusionSpec) -> ScoreMatrix:
    """Weighted average of score rows: sum_s w_s * row_s / sum_s w_s."""
    by_name = {m.stream: m for m in mats}
    if len(by_name) != len(mats):
        raise DataError("score matrices must carry distinct stream tags")
    if set(by_name) != set(spec.streams):
        raise DataError(f"fusion spec streams {sorted(spec.streams)} do not match matrices {sorted(by_name)}")
    first = by_name[spec.streams[0]]
    acc = np.zeros_like(first.scores)
    total = 0.0
    for name, w in spec.weights:
        m = by_name[name]
        if m.clip_ids != first.clip_ids:
            raise DataError(f"clip ids of stream {name} differ from {first.stream}")
        if m.num_classes != first.num_classes:
            raise DataError(f"stream {name} has {m.num_classes} classes, expected {first.num_classes}")
        acc += w * m.scores
        total += w
    return ScoreMatrix(list(first.clip_ids), acc / total, spec.label, first.labels)


def predictions(scores) -> np.ndarray:
    """Row argmax; np.argmax already breaks ties toward the lowest class id."""
    s = scores.scores if isinstance(scores, ScoreMatrix) else np.asarray(scores)
    return np.argmax(s, axis=1)


def accuracy(scores, labels=None) -> float:
    if labels is None:
        labels = scores.labels
    if labels is None:
        raise DataError("no labels to score against")
    labels = np.asarray(labels)
    pred = predictions(scores)
    if len(labels) != len(pred):
        raise DataError(f"{len(pred)} score rows but {len(labels)} labels")
    return float(np.mean(pred == labels))


def per_category_accuracy(scores, labels, categories) -> dict[str, float]:
    """Accuracy within each category present; absent categories are omitted."""
    labels = np.asarray(labels)
    categories = list(categories)
    pred = predictions(scores)
    if not len(labels) == len(pred) == len(categories):
        raise DataError("scores, labels and categories must have equal length")
    unknown = set(categories) - set(CATEGORIES)
    if unknown:
        raise DataError(f"unknown categories {sorted(unknown)}")
    cats = np.array(categories)
    return {c: float(np.mean(pred[cats == c] == labels[cats == c])) for c in CATEGORIES if np.any(cats == c)}


def grid_search_weights(mats, labels, grid=(0.0, 0.5, 1.0, 2.0)) -> tuple[FusionSpec, float]:
    """Exhaustive search of per-stream weights on a validation set.

    Returns the best spec and its accuracy; earlier grid points win ties.
    """
    names = [m.stream for m in mats]
    best, best_acc = None, -1.0
    for ws in itertools.product(grid, repeat=len(names)):
        if not any(w > 0 for w in ws):
            continue
        spec = FusionSpec(tuple(zip(names, ws)))
        acc = accuracy(fuse(mats, spec), labels)
        if acc > best_acc:
            best, best_acc = spec, acc
    return best, best_acc


@dataclass
class Report:
    streams: list[str]
    rows: list[tuple[FusionSpec, float, dict[str, float]]]

    def to_csv(self, header_comment: str | None = None) -> str:
        cats = self._categories()
        lines = [f"# {header_comment}"] if header_comment else []
        lines.append(",".join(["fusion", *self.streams, "accuracy", *cats]))
        for spec, acc, per_cat in self.rows:
            marks = ["1" if s in spec.streams else "0" for s in self.streams]
            extra = [f"{per_cat[c]:.4f}" if c in per_cat else "" for c in cats]
            lines.append(",".join([spec.label, *marks, f"{acc:.4f}", *extra]))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        cats = self._categories()
        table = [[*self.streams, "acc%", *cats]]
        for spec, acc, per_cat in self.rows:
            cells = ["x" if s in spec.streams else "" for s in self.streams]
            cells.append(f"{100 * acc:.2f}")
            cells += [f"{100 * per_cat[c]:.1f}" if c in per_cat else "-" for c in cats]
            table.append(cells)
        widths = [max(5, *(len(r[i]) for r in table)) for i in range(len(table[0]))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in table) + "\n"

    def _categories(self):
        present = set()
        for _, _, per_cat in self.rows:
            present.update(per_cat)
        return [c for c in CATEGORIES if c in present]


def ablation_report(score_sets, specs, labels=None, categories=None) -> Report:
    """One row per fusion spec with stream indicators and accuracy.

    ``score_sets`` maps stream name -> ScoreMatrix.  With ``categories`` the
    rows also carry per-category accuracy.  Duplicate specs give duplicate rows.
    """
    score_sets = dict(score_sets)
    streams = sorted({s for spec in specs for s in spec.streams}, key=lambda s: (list(score_sets).index(s)
                                                                                 if s in score_sets else 1e9, s))
    rows = []
    for spec in specs:
        missing = [s for s in spec.streams if s not in score_sets]
        if missing:
            raise DataError(f"fusion {spec.label} references missing streams {missing}")
        fused = fuse([score_sets[s] for s in spec.streams], spec)
        lab = labels if labels is not None else fused.labels
        acc = accuracy(fused, lab)
        per_cat = per_category_accuracy(fused, lab, categories) if categories is not None else {}
        rows.append((spec, acc, per_cat))
    return Report(streams, rows)
