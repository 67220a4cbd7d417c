"""Selective distillation of weakly annotated ground truth.

An initial network is trained on the disk labels.  At a chosen epoch its
prediction maps for the training scenes are checked by post-processing;
a scene whose serial numbers are all read back exactly has its labels
replaced by the prediction map, other scenes keep their initial labels.
A fresh network is then trained on the modified labels.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation, net, postproc
from .gtd import region_areas

log = logging.getLogger(__name__)

DEFAULT_CANDIDATES = (5, 10, 15, 20, 30, 40, 50)


@dataclass(frozen=True)
class DistillConfig:
    distillation_epochs: tuple = DEFAULT_CANDIDATES
    main_epochs: int = 50
    selection: bool = True
    seed: int = 0  # k-means restarts
    root_distance: bool = False
    min_cluster_px: int = 1

    def __post_init__(self):
        eps = tuple(int(e) for e in self.distillation_epochs)
        object.__setattr__(self, "distillation_epochs", eps)
        if not eps or any(e <= 0 for e in eps) or list(eps) != sorted(set(eps)):
            raise ValueError("distillation_epochs: need positive, strictly increasing epoch counts")
        if self.main_epochs <= 0:
            raise ValueError("main_epochs: must be positive")


@dataclass
class SplitData:
    images: list
    annotations: list
    truth: list  # true SIN strings per scene
    gtd: list
    names: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)


@dataclass
class DistillResult:
    modified_gtd: list
    selected: list
    distillation_ratio: float
    d_avg: float | None
    a_avg: float | None
    n_chars: int = 0
    records: list = field(default_factory=list)


def recognize_scene(params, spec, image, seed=0, min_cluster_px=1):
    pred = net.predict(params, spec, image)
    return pred, postproc.recognize(pred, seed=seed, min_cluster_px=min_cluster_px)


def drift_metrics(records_per_scene, annotations_per_scene, areas_per_scene, root: bool = False):
    """Mean squared center shift and mean absolute area difference.

    Only serial numbers read back exactly (against the annotation) count;
    predicted cluster i is paired with annotated character i left to right.
    Returns (None, None, 0) when no character qualifies.
    """
    dist, area, n = 0.0, 0.0, 0
    for records, ann, areas in zip(records_per_scene, annotations_per_scene, areas_per_scene):
        unused = list(range(len(ann.slabs)))
        for rec in records:
            matches = [k for k in unused if ann.slabs[k].sin == rec.text]
            if not matches:
                continue
            row = np.mean([c[1][0] for c in rec.clusters])
            k = min(matches, key=lambda j: (abs(float(np.mean(ann.slabs[j].points[:, 0])) - row), j))
            unused.remove(k)
            order = np.argsort(ann.slabs[k].points[:, 1], kind="stable")
            for (cls, centroid, size), idx in zip(rec.clusters, order):
                y = ann.slabs[k].points[idx]
                sq = (y[0] - centroid[0]) ** 2 + (y[1] - centroid[1]) ** 2
                dist += math.sqrt(sq) if root else sq
                area += abs(areas[k][idx] - size)
                n += 1
    if n == 0:
        return None, None, 0
    return dist / n, area / n, n


def select_and_distill(params, spec, images, initial_gtd, annotations, seed: int = 0,
                       selection: bool = True, root_distance: bool = False,
                       min_cluster_px: int = 1) -> DistillResult:
    """Replace a scene's labels by its prediction map when its SINs are read back exactly."""
    modified, selected, records, areas = [], [], [], []
    for i, (image, gtd, ann) in enumerate(zip(images, initial_gtd, annotations, strict=True)):
        h, w = np.shape(gtd)
        areas.append(region_areas(ann, h, w))
        try:
            pred, recs = recognize_scene(params, spec, image, seed, min_cluster_px)
        except Exception as e:  # noqa: BLE001 - one bad scene must not stop the sweep
            log.warning("scene %d: inference failed (%s); keeping initial labels", i, e)
            modified.append(gtd)
            selected.append(False)
            records.append([])
            continue
        ok = Counter(r.text for r in recs) == Counter(ann.sins)
        take = ok or not selection
        modified.append(pred if take else gtd)
        selected.append(bool(take))
        records.append(recs)
    d_avg, a_avg, n = drift_metrics(records, annotations, areas, root=root_distance)
    ratio = sum(selected) / len(selected) if selected else 0.0
    return DistillResult(modified, selected, ratio, d_avg, a_avg, n, records)


def evaluate_split(params, spec, split: SplitData, seed=0, min_cluster_px=1):
    preds = [recognize_scene(params, spec, im, seed, min_cluster_px)[1] for im in split.images]
    counts = evaluation.match_corpus(preds, split.truth)
    return counts, evaluation.metrics(counts)


def _metrics_dict(counts, m):
    tp, fp, fn = counts.as_tuple()
    return {"sensitivity": m.sensitivity, "precision": m.precision, "f1": m.f1,
            "tp": tp, "fp": fp, "fn": fn, "flags": list(m.flags)}


@dataclass
class RunSummary:
    """One training run scored on the validation split every epoch."""

    val_curve: list
    best_epoch: int
    val_f1: float
    test: dict
    losses: list
    failed: bool = False
    error: str = ""


def train_and_score(images, labels, spec, schedule, val, test, kseed=0, min_cluster_px=1,
                    select_upto=None, keep_epochs=()):
    """Train, pick the epoch with maximal validation F1 (earliest on ties), score it on test.

    Returns the summary and the kept checkpoints {epoch: params}.
    """
    select_upto = select_upto or schedule.epochs
    curve, losses = [], []
    best = {"epoch": 0, "f1": -1.0, "params": None}
    kept = {}

    def on_epoch(ck):
        if ck.epoch in keep_epochs:
            kept[ck.epoch] = ck.state.params
        if ck.epoch == 0:
            return
        losses.append(ck.loss)
        _, m = evaluate_split(ck.state.params, spec, val, kseed, min_cluster_px)
        curve.append(m.f1)
        if ck.epoch <= select_upto and m.f1 > best["f1"]:
            best.update(epoch=ck.epoch, f1=m.f1, params=ck.state.params)

    try:
        net.train(images, labels, spec, schedule, on_epoch=on_epoch, keep=lambda e: False)
    except net.TrainingError as e:
        log.warning("training diverged: %s", e)
        return RunSummary(curve, best["epoch"], max(best["f1"], 0.0), {}, losses, True, str(e)), kept
    counts, m = evaluate_split(best["params"], spec, test, kseed, min_cluster_px)
    return RunSummary(curve, best["epoch"], best["f1"], _metrics_dict(counts, m), losses), kept


@dataclass
class ExperimentReport:
    config: dict
    manual: dict
    drift: list
    arms: dict

    def to_json(self) -> dict:
        return {"version": 1, "config": self.config, "manual": self.manual,
                "drift": self.drift, "arms": self.arms}

    def test_f1(self, arm: str) -> float | None:
        if arm == "manual":
            return self.manual["test"].get("f1")
        chosen = self.arms[arm].get("test")
        return chosen.get("f1") if chosen else None

    def candidate(self, arm: str, epoch: int) -> dict:
        for c in self.arms[arm]["candidates"]:
            if c["distillation_epoch"] == epoch:
                return c
        raise KeyError(epoch)

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "report.json"
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        with open(out / "candidates.csv", "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["arm", "distillation_epoch", "ratio", "d_avg", "a_avg", "best_epoch", "val_f1",
                         "test_sensitivity", "test_precision", "test_f1", "failed"])
            wr.writerow(["manual", 0, "", "", "", self.manual["best_epoch"], repr(self.manual["val_f1"]),
                         *(repr(self.manual["test"].get(k, float("nan"))) for k in ("sensitivity", "precision", "f1")),
                         0])
            for arm, data in self.arms.items():
                for c in data["candidates"]:
                    t = c["test"]
                    wr.writerow([arm, c["distillation_epoch"], repr(c["ratio"]), _num(c["d_avg"]), _num(c["a_avg"]),
                                 c["best_epoch"], repr(c["val_f1"]),
                                 *(repr(t.get(k, float("nan"))) for k in ("sensitivity", "precision", "f1")),
                                 int(c["failed"])])
        with open(out / "drift.csv", "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["distillation_epoch", "d_avg", "a_avg", "n_chars"])
            for d in self.drift:
                wr.writerow([d["distillation_epoch"], _num(d["d_avg"]), _num(d["a_avg"]), d["n_chars"]])
        evaluation.write_curves(out / "curves_manual.csv",
                                [(i + 1, "val", f) for i, f in enumerate(self.manual["val_curve"])])
        for arm, data in self.arms.items():
            for c in data["candidates"]:
                evaluation.write_curves(out / f"curves_{arm}_e{c['distillation_epoch']}.csv",
                                        [(i + 1, "val", f) for i, f in enumerate(c["val_curve"])])
        return path


def _num(x):
    return "" if x is None else repr(float(x))


def run_pipeline(corpus: dict, spec: net.NetworkSpec, config: DistillConfig,
                 schedule: net.Schedule) -> ExperimentReport:
    """Initial training, per-candidate distillation + main training, baselines, test scores.

    ``schedule.epochs`` is ignored: the initial run lasts as long as the
    largest candidate (or ``main_epochs`` if longer) and every main run lasts
    ``main_epochs``.  With equal seeds the first ``main_epochs`` epochs of the
    initial run are exactly the manual-label baseline, so it is reused.
    """
    train, val, test = corpus["train"], corpus["val"], corpus["test"]
    cands = config.distillation_epochs
    kseed, mcp = config.seed, config.min_cluster_px
    init_sched = net.Schedule(epochs=max(max(cands), config.main_epochs), lr0=schedule.lr0,
                              decay=schedule.decay, seed=schedule.seed, dtype=schedule.dtype)
    main_sched = net.Schedule(epochs=config.main_epochs, lr0=schedule.lr0, decay=schedule.decay,
                              seed=schedule.seed, dtype=schedule.dtype)

    log.info("initial training on weak labels for %d epochs", init_sched.epochs)
    manual_run, snapshots = train_and_score(train.images, train.gtd, spec, init_sched, val, test, kseed, mcp,
                                            select_upto=config.main_epochs, keep_epochs=set(cands))
    if manual_run.failed:
        raise net.TrainingError(f"initial training failed: {manual_run.error}")
    manual = asdict(manual_run)
    manual["val_curve"] = manual["val_curve"][:config.main_epochs]
    manual["losses"] = manual["losses"][:config.main_epochs]

    arms = ["selective", "no_selection"] if config.selection else ["no_selection"]
    results = {arm: [] for arm in arms}
    drift = []
    for e in cands:
        params = snapshots[e]
        for arm in arms:
            res = select_and_distill(params, spec, train.images, train.gtd, train.annotations, kseed,
                                     selection=(arm == "selective"), root_distance=config.root_distance,
                                     min_cluster_px=mcp)
            if arm == arms[0]:
                drift.append({"distillation_epoch": e, "d_avg": res.d_avg, "a_avg": res.a_avg,
                              "n_chars": res.n_chars})
            log.info("epoch %d %s: distillation ratio %.3f", e, arm, res.distillation_ratio)
            run, _ = train_and_score(train.images, res.modified_gtd, spec, main_sched, val, test, kseed, mcp)
            entry = {"distillation_epoch": e, "ratio": res.distillation_ratio,
                     "d_avg": res.d_avg, "a_avg": res.a_avg, **asdict(run)}
            results[arm].append(entry)
            log.info("epoch %d %s: val F1 %.4f at epoch %d, test F1 %s", e, arm, run.val_f1, run.best_epoch,
                     run.test.get("f1"))

    arm_reports = {}
    for arm, entries in results.items():
        ok = [c for c in entries if not c["failed"]]
        chosen = max(ok, key=lambda c: (c["val_f1"], -c["distillation_epoch"])) if ok else None
        arm_reports[arm] = {
            "candidates": entries,
            "chosen_epoch": chosen["distillation_epoch"] if chosen else None,
            "val_f1": chosen["val_f1"] if chosen else None,
            "test": chosen["test"] if chosen else {},
        }
    cfg = {"distill": {**asdict(config), "distillation_epochs": list(cands)},
           "network": spec.to_dict(),
           "schedule": {"lr0": schedule.lr0, "decay": schedule.decay, "seed": schedule.seed,
                        "dtype": schedule.dtype}}
    return ExperimentReport(config=cfg, manual=manual, drift=drift, arms=arm_reports)


def split_from_scenes(pairs, names=None) -> SplitData:
    """SplitData from (Scene, AnnotationSet) pairs, rasterizing the disk labels."""
    from .gtd import rasterize_gtd
    images, anns, truth, gtd = [], [], [], []
    for scene, ann in pairs:
        h, w = scene.image.shape
        images.append(scene.image)
        anns.append(ann)
        truth.append(scene.sins)
        gtd.append(rasterize_gtd(ann, h, w))
    return SplitData(images, anns, truth, gtd, list(names or []))


def load_split(manifest, split: str) -> SplitData:
    """Scenes of one split from a corpus manifest; stored ``.gtd.pgm`` labels are used when present."""
    from .gtd import gtd_path, rasterize_gtd, read_gtd
    from .scenegen import read_scene
    images, anns, truth, gtd, names = [], [], [], [], []
    for path in manifest.paths(split):
        scene, ann = read_scene(path)
        h, w = scene.image.shape
        g = gtd_path(path)
        images.append(scene.image)
        anns.append(ann)
        truth.append(scene.sins)
        gtd.append(read_gtd(g) if g.exists() else rasterize_gtd(ann, h, w))
        names.append(str(path.relative_to(manifest.root)))
    return SplitData(images, anns, truth, gtd, names)


def load_corpus(manifest) -> dict:
    from .scenegen import SPLITS
    return {s: load_split(manifest, s) for s in SPLITS}
