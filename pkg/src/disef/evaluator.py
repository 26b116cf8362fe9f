"""Top-1 accuracy, base/new harmonic mean, multi-seed reports and their file formats."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import InputError, ProtocolError
from .vlm_core import DualEncoder, build_zero_shot_classifier, l2_normalize

REPORT_SCHEMA = "disef.report/1"
SERIES_HEADER = ("k_shots", "method", "seed", "accuracy")


def top1(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise InputError("predictions and labels differ in length")
    if p.size == 0:
        raise InputError("cannot score an empty prediction set")
    return float(np.mean(p == y))


def harmonic_mean(base: float, new: float) -> float:
    if base < 0 or new < 0:
        raise InputError("accuracies must be nonnegative")
    if base == 0 or new == 0:
        return 0.0
    return 2.0 * base * new / (base + new)


@torch.no_grad()
def predict(model: DualEncoder, images, class_names: Sequence[str], template: str, batch_size: int = 256) -> np.ndarray:
    """Zero-shot style prediction: cosine argmax over the given class subset only."""
    clf = build_zero_shot_classifier(model, class_names, template)
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    preds = []
    for start in range(0, len(images), batch_size):
        feats = l2_normalize(model.encode_images(images[start : start + batch_size]))
        preds.append((feats @ clf.weights.T).argmax(dim=-1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


@dataclass
class EvalReport:
    protocol: str  # "default" | "base_new"
    per_seed: dict[int, dict[str, float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def metrics(self) -> list[str]:
        return ["accuracy"] if self.protocol == "default" else ["base", "new", "h"]

    @property
    def seeds(self) -> list[int]:
        return sorted(self.per_seed)

    @property
    def mean(self) -> dict[str, float]:
        # H is averaged from per-seed values, never recomputed from averaged base/new.
        return {m: float(np.mean([self.per_seed[s][m] for s in self.seeds])) for m in self.metrics}

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA,
            "protocol": self.protocol,
            "per_seed": {str(s): self.per_seed[s] for s in self.seeds},
            "mean": self.mean,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA:
            raise InputError(f"unsupported report schema {d.get('schema_version')!r}")
        per_seed = {int(s): {k: float(v) for k, v in m.items()} for s, m in d["per_seed"].items()}
        return cls(d["protocol"], per_seed, d.get("meta", {}))


def evaluate_default(models: Mapping[int, DualEncoder], images, labels, class_names, template) -> EvalReport:
    """Top-1 (percent) over all classes for each seed's model."""
    report = EvalReport("default")
    for seed, model in models.items():
        report.per_seed[int(seed)] = {"accuracy": 100.0 * top1(predict(model, images, class_names, template), labels)}
    return report


def evaluate_base_new(models: Mapping[int, DualEncoder], images, labels, class_names, base, new, template) -> EvalReport:
    """Base/new protocol: each half is scored with logits over its own classes only.

    ``labels`` index ``class_names``; ``base``/``new`` are lists of class names.
    """
    if set(base) & set(new):
        raise ProtocolError(f"base and new classes overlap: {sorted(set(base) & set(new))}")
    labels = np.asarray(labels)
    names = np.asarray(class_names)[labels]
    images = np.asarray(images)
    report = EvalReport("base_new")
    for seed, model in models.items():
        scores = {}
        for key, subset in (("base", list(base)), ("new", list(new))):
            mask = np.isin(names, subset)
            if not mask.any():
                raise ProtocolError(f"no {key}-class items to evaluate")
            local = np.array([subset.index(n) for n in names[mask]])
            scores[key] = 100.0 * top1(predict(model, images[mask], subset, template), local)
        scores["h"] = harmonic_mean(scores["base"], scores["new"])
        report.per_seed[int(seed)] = scores
    return report


# ------------------------------------------------------------------ output


def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["protocol", "seed", *report.metrics])
    for s in report.seeds:
        w.writerow([report.protocol, s, *(repr(report.per_seed[s][m]) for m in report.metrics)])
    return buf.getvalue()


def report_from_csv(text: str) -> EvalReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise InputError("empty report CSV")
    report = EvalReport(rows[0]["protocol"])
    for r in rows:
        report.per_seed[int(r["seed"])] = {m: float(r[m]) for m in report.metrics}
    return report


def shots_series(rows: Sequence[tuple[int, str, int, float]]) -> str:
    """Plot-ready CSV of accuracy vs. shots, one row per (k, method, seed)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SERIES_HEADER)
    for k, method, seed, acc in sorted(rows, key=lambda r: (r[1], r[2], r[0])):
        w.writerow([k, method, seed, repr(float(acc))])
    return buf.getvalue()


def emit_report(report, path: str | Path, fmt: str = "json") -> Path:
    """Write a report as ``json`` (canonical) or ``csv``; ``series`` takes shots rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    elif fmt == "csv":
        path.write_text(report_to_csv(report))
    elif fmt == "series":
        path.write_text(shots_series(report))
    else:
        raise InputError(f"unknown report format {fmt!r}")
    return path


def load_report(path: str | Path) -> EvalReport:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".csv":
        return report_from_csv(text)
    return EvalReport.from_dict(json.loads(text))
