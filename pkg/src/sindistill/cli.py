"""Command-line entry point: ``sindistill <command> --config run.json --out DIR``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

from . import distill, evaluation, net
from .config import RunConfig, load_config
from .gtd import gtd_path, rasterize_gtd, write_gtd
from .scenegen import SPLITS, ConfigError, gen_corpus, load_manifest, read_scene

log = logging.getLogger("sindistill")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _manifest_path(args, cfg: RunConfig) -> Path:
    if getattr(args, "manifest", None):
        p = Path(args.manifest)
    elif cfg.path("manifest") is not None:
        p = cfg.path("manifest")
    elif cfg.path("corpus") is not None:
        p = cfg.path("corpus") / "manifest.json"
    else:
        raise UsageError("paths.manifest: no corpus manifest given (use --manifest or paths.manifest)")
    if not p.exists():
        raise UsageError(f"paths.manifest: {p} does not exist")
    return p


def _out_dir(args, default=None) -> Path:
    out = Path(args.out) if args.out else default
    if out is None:
        raise UsageError("--out: an output directory is required")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}.ckpt"


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, args) -> Path:
    out = _out_dir(args, cfg.path("corpus"))
    manifest = gen_corpus(cfg.scene, cfg.atlas(), cfg.annotator, cfg.counts, cfg.seeds["corpus_seed"], out)
    _make_gtd(manifest)
    path = out / "manifest.json"
    print(path)
    return path


def _make_gtd(manifest) -> int:
    n = 0
    for split in SPLITS:
        for path in manifest.paths(split):
            scene, ann = read_scene(path)
            h, w = scene.image.shape
            write_gtd(gtd_path(path), rasterize_gtd(ann, h, w))
            n += 1
    return n


def cmd_make_gtd(cfg: RunConfig, args) -> int:
    manifest = load_manifest(_manifest_path(args, cfg))
    n = _make_gtd(manifest)
    print(f"wrote {n} label maps")
    return n


def cmd_train(cfg: RunConfig, args) -> Path:
    manifest = load_manifest(_manifest_path(args, cfg))
    out = _out_dir(args)
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    train = distill.load_split(manifest, "train")
    val = distill.load_split(manifest, "val")
    spec = cfg.network
    schedule = cfg.train_schedule()
    kseed, mcp = cfg.seeds["kmeans_seed"], cfg.distill.min_cluster_px
    resume = None
    history = []
    log_path = out / "train_log.csv"
    if args.resume:
        resume = net.load_checkpoint(args.resume, spec)
        if resume.state.params["conv1_1.w"].dtype != schedule.dtype:
            raise UsageError(f"--resume: checkpoint dtype differs from schedule.dtype {schedule.dtype}")
        history = _read_log(log_path, upto=resume.epoch)

    def on_epoch(ck):
        net.save_checkpoint(ckdir / _checkpoint_name(ck.epoch), ck, spec)
        if ck.epoch == 0:
            return
        f1 = None
        if len(val):
            f1 = distill.evaluate_split(ck.state.params, spec, val, kseed, mcp)[1].f1
        history.append([ck.epoch, repr(ck.loss), repr(ck.lr),
                        "0" if args.deterministic else f"{ck.seconds:.3f}", "" if f1 is None else repr(f1)])
        _write_log(log_path, history)
        log.info("epoch %d loss %.5f val F1 %s", ck.epoch, ck.loss, f1)

    try:
        net.train(train.images, train.gtd, spec, schedule, resume=resume, on_epoch=on_epoch, keep=lambda e: False)
    except net.TrainingError as e:
        raise RuntimeError(f"training diverged: {e}; last good checkpoint kept in {ckdir}") from e
    if not history and resume is None:
        _write_log(log_path, history)
    print(ckdir)
    return ckdir


_LOG_FIELDS = ["epoch", "loss", "lr", "seconds", "val_f1"]


def _write_log(path, rows):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(_LOG_FIELDS)
        wr.writerows(rows)


def _read_log(path, upto):
    if not Path(path).exists():
        return []
    with open(path, newline="") as f:
        rows = list(csv.reader(f))[1:]
    return [r for r in rows if int(r[0]) <= upto]


def cmd_distill(cfg: RunConfig, args) -> Path:
    manifest = load_manifest(_manifest_path(args, cfg))
    out = _out_dir(args)
    corpus = distill.load_corpus(manifest)
    report = distill.run_pipeline(corpus, cfg.network, cfg.distill_config(), cfg.train_schedule())
    path = report.write(out)
    print(path)
    return path


def cmd_eval(cfg: RunConfig, args) -> Path:
    manifest = load_manifest(_manifest_path(args, cfg))
    out = _out_dir(args)
    from . import postproc
    splits = args.split or list(SPLITS)
    kseed, mcp = cfg.seeds["kmeans_seed"], cfg.distill.min_cluster_px
    params = None
    if not args.oracle:
        if not args.checkpoint:
            raise UsageError("--checkpoint: required unless --oracle is given")
        params = net.load_checkpoint(args.checkpoint, cfg.network).state.params
    results = {}
    for split in splits:
        if split not in SPLITS:
            raise UsageError(f"--split: unknown split {split!r}")
        data = distill.load_split(manifest, split)
        if args.oracle:
            preds = [postproc.recognize(g, seed=kseed, min_cluster_px=mcp) for g in data.gtd]
        else:
            preds = [distill.recognize_scene(params, cfg.network, im, kseed, mcp)[1] for im in data.images]
        counts = evaluation.match_corpus(preds, data.truth)
        results[split] = (counts, evaluation.metrics(counts))
    evaluation.write_report(out / "metrics.csv", out / "metrics.json", results)
    print(out / "metrics.csv")
    return out / "metrics.csv"


def cmd_report(cfg: RunConfig | None, args) -> Path:
    src = Path(args.report) if args.report else _out_dir(args) / "report.json"
    if not src.exists():
        raise UsageError(f"--report: {src} does not exist")
    doc = json.loads(src.read_text())
    out = _out_dir(args, src.parent)
    rows = [("manual", doc["manual"]["best_epoch"], None, doc["manual"]["test"])]
    for arm in ("no_selection", "selective"):
        if arm in doc["arms"]:
            a = doc["arms"][arm]
            rows.append((arm, a["chosen_epoch"], a["val_f1"], a["test"]))
    with open(out / "summary.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["method", "chosen_epoch", "val_f1", "sensitivity", "precision", "f1"])
        for name, ep, vf1, t in rows:
            wr.writerow([name, "" if ep is None else ep, "" if vf1 is None else repr(vf1),
                         *(repr(t[k]) if k in t else "" for k in ("sensitivity", "precision", "f1"))])
    # selection effect per candidate (F1 against distillation epoch, with the ratio)
    with open(out / "selection_effect.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        arms = [a for a in ("selective", "no_selection") if a in doc["arms"]]
        wr.writerow(["distillation_epoch", *(f"test_f1_{a}" for a in arms), *(f"ratio_{a}" for a in arms)])
        by_epoch = {}
        for a in arms:
            for c in doc["arms"][a]["candidates"]:
                by_epoch.setdefault(c["distillation_epoch"], {})[a] = c
        for e in sorted(by_epoch):
            cs = by_epoch[e]
            wr.writerow([e, *(repr(cs[a]["test"]["f1"]) if a in cs and cs[a]["test"] else "" for a in arms),
                         *(repr(cs[a]["ratio"]) if a in cs else "" for a in arms)])
    for name, ep, vf1, t in rows:
        f1 = t.get("f1")
        print(f"{name:>13s}  epoch {ep!s:>4s}  test F1 {'n/a' if f1 is None else f'{100 * f1:.2f}%'}")
    return out / "summary.csv"


COMMANDS = {
    "gen": cmd_gen,
    "make-gtd": cmd_make_gtd,
    "train": cmd_train,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# argument handling


def _seed_override(text: str):
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected name=int, got {text!r}")
    try:
        return name.strip(), int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed {name!r}: {value!r} is not an integer") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed-override", action="append", type=_seed_override, default=[],
                        metavar="NAME=INT", help="replace a named seed (corpus_seed, train_seed, kmeans_seed)")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded 64-bit mode with timing-free logs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sindistill", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="render a synthetic corpus with label maps")
    s = sub.add_parser("make-gtd", parents=[common], help="rasterize disk label maps for a corpus")
    s.add_argument("--manifest")
    s = sub.add_parser("train", parents=[common], help="train a network on the disk labels")
    s.add_argument("--manifest")
    s.add_argument("--resume", help="checkpoint to continue from")
    s = sub.add_parser("distill", parents=[common], help="distillation sweep with baselines")
    s.add_argument("--manifest")
    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on corpus splits")
    s.add_argument("--manifest")
    s.add_argument("--checkpoint")
    s.add_argument("--oracle", action="store_true", help="score the label maps themselves")
    s.add_argument("--split", action="append", choices=SPLITS)
    s = sub.add_parser("report", parents=[common], help="summary tables from a distillation report")
    s.add_argument("--report", help="report.json (default: OUT/report.json)")
    return p


def _load(args) -> RunConfig | None:
    if args.config is None:
        if args.command == "report":
            return None
        raise UsageError("--config: a run configuration is required")
    cfg = load_config(args.config)
    for name, value in args.seed_override:
        cfg = cfg.with_seed(name, value)
    if args.deterministic:
        cfg = cfg.with_dtype("float64")
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse uses 2 for usage errors already
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    limits = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits
        limits = threadpool_limits(limits=1)
    try:
        with limits:
            COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError, ValueError, KeyError, net.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
