"""SIN-level scoring: a serial number counts only when all nine characters are right."""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field


@dataclass
class MatchCounts:
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0
    per_scene: list = field(default_factory=list)

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(self.true_positives + other.true_positives,
                           self.false_positives + other.false_positives,
                           self.false_negatives + other.false_negatives,
                           self.per_scene + other.per_scene)

    def as_tuple(self):
        return self.true_positives, self.false_positives, self.false_negatives


def _text(x) -> str:
    if isinstance(x, str):
        return x
    return getattr(x, "text", None) or x.sin


def match_sins(predicted, truth) -> MatchCounts:
    """Multiset matching on exact 9-character strings for one scene."""
    pred = Counter(_text(p) for p in predicted)
    true = Counter(_text(t) for t in truth)
    tp = sum((pred & true).values())
    fp = sum(pred.values()) - tp
    fn = sum(true.values()) - tp
    return MatchCounts(tp, fp, fn, per_scene=[(tp, fp, fn)])


def match_corpus(predicted_per_scene, truth_per_scene) -> MatchCounts:
    total = MatchCounts()
    for p, t in zip(predicted_per_scene, truth_per_scene, strict=True):
        total = total + match_sins(p, t)
    return total


def f1_score(sensitivity: float, precision: float) -> float:
    s = sensitivity + precision
    return 2.0 * sensitivity * precision / s if s > 0 else 0.0


@dataclass(frozen=True)
class Metrics:
    sensitivity: float
    precision: float
    f1: float
    flags: tuple = ()

    @classmethod
    def from_rates(cls, sensitivity: float, precision: float) -> "Metrics":
        return cls(sensitivity, precision, f1_score(sensitivity, precision))

    @property
    def empty(self) -> bool:
        return "empty" in self.flags


def metrics(counts: MatchCounts) -> Metrics:
    """Corpus-level sensitivity, precision and F1; zero denominators give 0 plus a flag."""
    tp, fp, fn = counts.as_tuple()
    flags = []
    if tp + fn == 0 and tp + fp == 0:
        flags.append("empty")
    if tp + fn == 0:
        flags.append("no_truth")
    if tp + fp == 0:
        flags.append("no_predictions")
    s = tp / (tp + fn) if tp + fn else 0.0
    p = tp / (tp + fp) if tp + fp else 0.0
    return Metrics(s, p, f1_score(s, p), tuple(flags))


REPORT_FIELDS = ["split", "sensitivity", "precision", "f1", "tp", "fp", "fn"]


def report_rows(results: dict) -> list[dict]:
    """``results`` maps split name to (MatchCounts, Metrics)."""
    rows = []
    for split, (counts, m) in results.items():
        tp, fp, fn = counts.as_tuple()
        rows.append({"split": split, "sensitivity": m.sensitivity, "precision": m.precision,
                     "f1": m.f1, "tp": tp, "fp": fp, "fn": fn})
    return rows


def write_report(csv_path, json_path, results: dict):
    rows = report_rows(results)
    with open(csv_path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=REPORT_FIELDS, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    doc = {r["split"]: {**{k: r[k] for k in REPORT_FIELDS[1:]},
                        "flags": list(results[r["split"]][1].flags)} for r in rows}
    with open(json_path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def write_curves(path, curves):
    """``curves``: iterable of (epoch, split, f1)."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["epoch", "split", "f1"])
        for epoch, split, f1 in curves:
            wr.writerow([epoch, split, repr(float(f1))])
