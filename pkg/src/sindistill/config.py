"""Run configuration: one JSON document holding every knob and every seed."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .distill import DistillConfig
from .net import NetworkSpec, Schedule
from .scenegen import AnnotatorModel, ConfigError, GlyphAtlas, SceneSpec

CONFIG_VERSION = 1
SEED_NAMES = ("corpus_seed", "train_seed", "kmeans_seed")
_TOP_KEYS = {"version", "scene", "glyph_height", "annotator", "counts", "network", "schedule", "distill",
             "seeds", "paths"}
_SCHEDULE_KEYS = {"epochs", "lr0", "decay", "dtype"}
_PATH_KEYS = {"corpus", "manifest"}


def _reject_unknown(section: str, d: dict, allowed):
    if not isinstance(d, dict):
        raise ConfigError(f"{section}: expected an object")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{section}.{unknown[0]}: unknown key")


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    glyph_height: int = 12
    annotator: AnnotatorModel = field(default_factory=AnnotatorModel)
    counts: tuple = (120, 20, 60)
    network: NetworkSpec = None
    schedule: dict = field(default_factory=lambda: {"epochs": 50, "lr0": 1e-4, "decay": 0.95, "dtype": "float32"})
    distill: DistillConfig = field(default_factory=DistillConfig)
    seeds: dict = field(default_factory=lambda: {k: 0 for k in SEED_NAMES})
    paths: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __post_init__(self):
        if self.network is None:
            from .net import preset
            self.network = preset("base")

    # -- derived objects
    def atlas(self) -> GlyphAtlas:
        return GlyphAtlas.build(self.glyph_height)

    def train_schedule(self, epochs: int | None = None) -> Schedule:
        s = self.schedule
        return Schedule(epochs=s["epochs"] if epochs is None else epochs, lr0=s["lr0"], decay=s["decay"],
                        seed=self.seeds["train_seed"], dtype=s["dtype"])

    def distill_config(self) -> DistillConfig:
        return replace(self.distill, seed=self.seeds["kmeans_seed"])

    def path(self, key: str) -> Path | None:
        p = self.paths.get(key)
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def with_seed(self, name: str, value: int) -> "RunConfig":
        if name not in SEED_NAMES:
            raise ConfigError(f"seeds.{name}: unknown seed name; choose from {', '.join(SEED_NAMES)}")
        return replace(self, seeds={**self.seeds, name: int(value)})

    def with_dtype(self, dtype: str) -> "RunConfig":
        return replace(self, schedule={**self.schedule, "dtype": dtype})

    def validate(self):
        self.scene.validate(self.atlas())
        if len(self.counts) != 3 or any(int(c) < 0 for c in self.counts):
            raise ConfigError("counts: need three non-negative split sizes (train, val, test)")
        s = self.schedule
        if not isinstance(s["epochs"], int) or s["epochs"] < 0:
            raise ConfigError("schedule.epochs: must be a non-negative integer")
        if not s["lr0"] > 0:
            raise ConfigError("schedule.lr0: must be positive")
        if not 0 < s["decay"] <= 1:
            raise ConfigError("schedule.decay: must lie in (0, 1]")
        if s["dtype"] not in ("float32", "float64"):
            raise ConfigError("schedule.dtype: float32 or float64")
        for k in SEED_NAMES:
            if not isinstance(self.seeds.get(k), int) or self.seeds[k] < 0:
                raise ConfigError(f"seeds.{k}: every seed must be an explicit non-negative integer")
        for key in self.paths:
            p = self.path(key)
            if key == "manifest" and not p.exists():
                raise ConfigError(f"paths.manifest: {p} does not exist")
        return self

    # -- (de)serialization
    def to_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "scene": self.scene.to_dict(),
            "glyph_height": self.glyph_height,
            "annotator": self.annotator.to_dict(),
            "counts": list(self.counts),
            "network": self.network.to_dict(),
            "schedule": dict(self.schedule),
            "distill": {k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in asdict(self.distill).items() if k != "seed"},
            "seeds": dict(self.seeds),
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "RunConfig":
        _reject_unknown("config", d, _TOP_KEYS)
        if d.get("version") != CONFIG_VERSION:
            raise ConfigError(f"version: expected {CONFIG_VERSION}, got {d.get('version')!r}")
        cfg = cls(base_dir=Path(base_dir))
        try:
            if "scene" in d:
                cfg.scene = SceneSpec.from_dict(d["scene"])
            if "glyph_height" in d:
                cfg.glyph_height = int(d["glyph_height"])
            if "annotator" in d:
                _reject_unknown("annotator", d["annotator"], {"bias", "jitter_sigma", "mislabel_prob"})
                cfg.annotator = AnnotatorModel.from_dict(d["annotator"])
            if "counts" in d:
                cfg.counts = tuple(int(c) for c in d["counts"])
            if "network" in d:
                cfg.network = NetworkSpec.from_dict(d["network"])
            if "schedule" in d:
                _reject_unknown("schedule", d["schedule"], _SCHEDULE_KEYS)
                cfg.schedule = {**cfg.schedule, **d["schedule"]}
            if "distill" in d:
                allowed = set(DistillConfig.__dataclass_fields__) - {"seed"}
                _reject_unknown("distill", d["distill"], allowed)
                cfg.distill = DistillConfig(**d["distill"])
            if "seeds" in d:
                _reject_unknown("seeds", d["seeds"], SEED_NAMES)
                missing = [k for k in SEED_NAMES if k not in d["seeds"]]
                if missing:
                    raise ConfigError(f"seeds.{missing[0]}: every seed must be given explicitly")
                cfg.seeds = dict(d["seeds"])
            if "paths" in d:
                _reject_unknown("paths", d["paths"], _PATH_KEYS)
                cfg.paths = dict(d["paths"])
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e
        return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config: {p} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: {p} is not valid JSON ({e})") from None
    return RunConfig.from_dict(doc, base_dir=p.parent)
