import csv
import json
import time

import pytest

from sindistill import net
from sindistill.cli import main

SCENE = {"height": 64, "width": 128, "slabs_min": 1, "slabs_max": 2, "glyph_scale_range": [0.9, 1.05],
         "rotation_range": 3.0}


def write_config(tmp_path, name="run.json", **over):
    doc = {"version": 1, "scene": SCENE, "glyph_height": 12, "counts": [5, 2, 2],
           "network": {"blocks": [[1, 2], [1, 3]]},
           "schedule": {"epochs": 2, "lr0": 1e-3, "decay": 0.95, "dtype": "float32"},
           "distill": {"distillation_epochs": [1, 2], "main_epochs": 2},
           "seeds": {"corpus_seed": 1, "train_seed": 0, "kmeans_seed": 0},
           "paths": {"corpus": "corpus"}}
    doc.update(over)
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


@pytest.fixture
def corpus(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["gen", "--config", str(cfg)]) == 0
    return cfg


def test_gen_writes_scenes_and_labels(corpus, tmp_path, capsys):
    root = tmp_path / "corpus"
    man = json.loads((root / "manifest.json").read_text())
    assert [len(man[s]) for s in ("train", "val", "test")] == [5, 2, 2]
    assert len(list(root.rglob("*.gtd.pgm"))) == 9
    assert len(list(root.rglob("*.truth.json"))) == len(list(root.rglob("*.ann.json"))) == 9


def test_gen_is_idempotent(corpus, tmp_path):
    root = tmp_path / "corpus"
    before = {p: p.read_bytes() for p in root.rglob("*") if p.is_file()}
    assert main(["gen", "--config", str(corpus)]) == 0
    assert before == {p: p.read_bytes() for p in root.rglob("*") if p.is_file()}


def test_gen_creates_missing_out_dir(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "a" / "b"
    assert main(["gen", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "manifest.json").exists()


def test_make_gtd_rewrites_labels(corpus, tmp_path):
    labels = sorted((tmp_path / "corpus").rglob("*.gtd.pgm"))
    ref = labels[0].read_bytes()
    labels[0].unlink()
    assert main(["make-gtd", "--config", str(corpus)]) == 0
    assert labels[0].read_bytes() == ref


def test_nine_character_constraint_is_a_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, scene={**SCENE, "chars_per_sin": 8})
    assert main(["gen", "--config", str(cfg)]) == 2
    assert "9 characters" in capsys.readouterr().err


def test_unknown_key_is_a_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, schedule={"epochs": 2, "learning_rate": 0.1})
    assert main(["gen", "--config", str(cfg)]) == 2
    assert "schedule.learning_rate" in capsys.readouterr().err


def test_missing_seed_and_bad_version(tmp_path):
    assert main(["gen", "--config", str(write_config(tmp_path, seeds={"corpus_seed": 1}))]) == 2
    assert main(["gen", "--config", str(write_config(tmp_path, version=7))]) == 2
    assert main(["gen", "--config", str(tmp_path / "nope.json")]) == 2
    (tmp_path / "bad.json").write_text("{")
    assert main(["gen", "--config", str(tmp_path / "bad.json")]) == 2


def test_seed_override(tmp_path, capsys):
    cfg = write_config(tmp_path)
    main(["gen", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["gen", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed-override", "corpus_seed=5"])
    a = (tmp_path / "a" / "scenes" / "train_0000.pgm").read_bytes()
    b = (tmp_path / "b" / "scenes" / "train_0000.pgm").read_bytes()
    assert a != b
    assert main(["gen", "--config", str(cfg), "--seed-override", "colour_seed=5"]) == 2
    assert main(["gen", "--config", str(cfg), "--seed-override", "corpus_seed=x"]) == 2


def test_train_smoke_and_resume(corpus, tmp_path):
    t0 = time.perf_counter()
    assert main(["train", "--config", str(corpus), "--out", str(tmp_path / "t"), "--deterministic"]) == 0
    assert time.perf_counter() - t0 < 60
    ck = tmp_path / "t" / "checkpoints"
    assert sorted(p.name for p in ck.iterdir()) == ["epoch_0000.ckpt", "epoch_0001.ckpt", "epoch_0002.ckpt"]
    rows = list(csv.DictReader(open(tmp_path / "t" / "train_log.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert all(r["seconds"] == "0" and r["val_f1"] != "" for r in rows)
    full_log = (tmp_path / "t" / "train_log.csv").read_bytes()
    full_ck = (ck / "epoch_0002.ckpt").read_bytes()

    (ck / "epoch_0002.ckpt").unlink()
    assert main(["train", "--config", str(corpus), "--out", str(tmp_path / "t"), "--deterministic",
                 "--resume", str(ck / "epoch_0001.ckpt")]) == 0
    assert (ck / "epoch_0002.ckpt").read_bytes() == full_ck
    assert (tmp_path / "t" / "train_log.csv").read_bytes() == full_log


def test_corrupt_checkpoint_exits_with_integrity_error(corpus, tmp_path, capsys):
    assert main(["train", "--config", str(corpus), "--out", str(tmp_path / "t")]) == 0
    p = tmp_path / "t" / "checkpoints" / "epoch_0001.ckpt"
    raw = bytearray(p.read_bytes())
    raw[-1] ^= 1
    p.write_bytes(bytes(raw))
    assert main(["train", "--config", str(corpus), "--out", str(tmp_path / "t"), "--resume", str(p)]) == 1
    assert "integrity" in capsys.readouterr().err
    assert main(["eval", "--config", str(corpus), "--out", str(tmp_path / "e"), "--checkpoint", str(p)]) == 1


def test_eval_checkpoint(corpus, tmp_path):
    main(["train", "--config", str(corpus), "--out", str(tmp_path / "t")])
    ck = tmp_path / "t" / "checkpoints" / "epoch_0002.ckpt"
    assert main(["eval", "--config", str(corpus), "--out", str(tmp_path / "e"), "--checkpoint", str(ck),
                 "--split", "val"]) == 0
    doc = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert list(doc) == ["val"]
    assert set(doc["val"]) >= {"sensitivity", "precision", "f1", "tp", "fp", "fn", "flags"}


def test_eval_oracle_is_perfect(corpus, tmp_path):
    assert main(["eval", "--config", str(corpus), "--out", str(tmp_path / "e"), "--oracle"]) == 0
    doc = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert all(doc[s]["f1"] == 1.0 for s in ("train", "val", "test"))
    header = (tmp_path / "e" / "metrics.csv").read_text().splitlines()[0]
    assert header == "split,sensitivity,precision,f1,tp,fp,fn"


def test_eval_empty_split_is_flagged(tmp_path):
    cfg = write_config(tmp_path, counts=[2, 0, 1])
    main(["gen", "--config", str(cfg)])
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "e"), "--oracle", "--split", "val"]) == 0
    assert "empty" in json.loads((tmp_path / "e" / "metrics.json").read_text())["val"]["flags"]


def test_eval_needs_checkpoint_or_oracle(corpus, tmp_path):
    assert main(["eval", "--config", str(corpus), "--out", str(tmp_path / "e")]) == 2


def test_missing_manifest_is_a_config_error(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 2


def test_divergence_exits_1(tmp_path, capsys):
    cfg = write_config(tmp_path, schedule={"epochs": 2, "lr0": 1e30, "decay": 1.0, "dtype": "float32"})
    main(["gen", "--config", str(cfg)])
    with pytest.warns(RuntimeWarning):
        code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")])
    assert code == 1
    assert "last good checkpoint" in capsys.readouterr().err
    assert (tmp_path / "t" / "checkpoints" / "epoch_0000.ckpt").exists()


def test_distill_without_selection(tmp_path):
    cfg = write_config(tmp_path, distill={"distillation_epochs": [1], "main_epochs": 1, "selection": False})
    main(["gen", "--config", str(cfg)])
    assert main(["distill", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    doc = json.loads((tmp_path / "d" / "report.json").read_text())
    assert list(doc["arms"]) == ["no_selection"]
    assert [c["distillation_epoch"] for c in doc["arms"]["no_selection"]["candidates"]] == [1]


def test_distill_deterministic_and_report(corpus, tmp_path, capsys):
    for d in ("d1", "d2"):
        assert main(["distill", "--config", str(corpus), "--out", str(tmp_path / d), "--deterministic"]) == 0
    files = sorted(p.name for p in (tmp_path / "d1").iterdir())
    assert "report.json" in files and "curves_selective_e2.csv" in files
    for name in files:
        assert (tmp_path / "d1" / name).read_bytes() == (tmp_path / "d2" / name).read_bytes(), name
    assert json.loads((tmp_path / "d1" / "report.json").read_text())["config"]["schedule"]["dtype"] == "float64"

    capsys.readouterr()
    assert main(["report", "--out", str(tmp_path / "d1")]) == 0
    out = capsys.readouterr().out
    assert "manual" in out and "selective" in out
    rows = list(csv.DictReader(open(tmp_path / "d1" / "summary.csv")))
    assert [r["method"] for r in rows] == ["manual", "no_selection", "selective"]
    eff = (tmp_path / "d1" / "selection_effect.csv").read_text().splitlines()
    assert eff[0] == "distillation_epoch,test_f1_selective,test_f1_no_selection,ratio_selective,ratio_no_selection"
    assert len(eff) == 3


def test_report_missing_file(tmp_path):
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_bad_subcommand():
    assert main(["frobnicate"]) == 2
