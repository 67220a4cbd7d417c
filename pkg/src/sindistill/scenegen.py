"""Synthetic factory scenes with 9-character serial numbers and a noisy annotator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .pgm import read_pgm, write_pgm

CLASS_CHARS = "B0123456789"
NUM_CLASSES = len(CLASS_CHARS)
CHARS_PER_SIN = 9

# 5x7 cell patterns
_PATTERNS = {
    "B": ["11110", "10001", "10001", "11110", "10001", "10001", "11110"],
    "0": ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    "1": ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    "2": ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    "3": ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    "4": ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    "5": ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    "6": ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    "7": ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    "8": ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    "9": ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}


class ConfigError(ValueError):
    """An infeasible or malformed configuration; the message names the field."""


def char_to_code(ch: str) -> int:
    return CLASS_CHARS.index(ch) + 1


def code_to_char(code: int) -> str:
    return CLASS_CHARS[code - 1]


def sin_to_codes(sin: str) -> list[int]:
    return [char_to_code(c) for c in sin]


def codes_to_sin(codes) -> str:
    return "".join(code_to_char(int(c)) for c in codes)


def _resize_area(mask, h, w):
    """Exact area resampling: each output pixel is the mean coverage of its footprint."""
    m = np.asarray(mask, dtype=float)
    H, W = m.shape
    fine = np.kron(m, np.ones((h, w)))
    return fine.reshape(h, H, w, W).mean(axis=(1, 3))


@dataclass(frozen=True)
class GlyphAtlas:
    """Ink-coverage bitmaps in [0, 1] for class codes 1..K (1 is 'B', 2..11 are '0'..'9')."""

    glyphs: dict

    def __post_init__(self):
        if sorted(self.glyphs) != list(range(1, NUM_CLASSES + 1)):
            raise ConfigError(f"glyphs: atlas needs exactly codes 1..{NUM_CLASSES}")
        for code, g in self.glyphs.items():
            if not np.any(g):
                raise ConfigError(f"glyphs: glyph {code} has no foreground pixel")

    @classmethod
    def build(cls, height: int = 12) -> "GlyphAtlas":
        """Area-resample the 5x7 patterns to ``height`` rows; empty columns are trimmed."""
        if height < 7:
            raise ConfigError("glyph_height: must be at least 7 px")
        width = max(5, round(height * 5 / 7))
        glyphs = {}
        for ch, rows in _PATTERNS.items():
            cells = np.array([[c == "1" for c in r] for r in rows])
            big = _resize_area(cells, height, width)
            used = np.flatnonzero(big.max(axis=0) > 0.05)
            glyphs[char_to_code(ch)] = big[:, used[0]:used[-1] + 1].copy()
        return cls(glyphs)

    @property
    def height(self) -> int:
        return max(g.shape[0] for g in self.glyphs.values())

    @property
    def max_width(self) -> int:
        return max(g.shape[1] for g in self.glyphs.values())


@dataclass(frozen=True)
class SceneSpec:
    height: int = 128
    width: int = 192
    slabs_min: int = 1
    slabs_max: int = 3
    chars_per_sin: int = CHARS_PER_SIN
    glyph_scale_range: tuple = (0.9, 1.2)
    char_gap: float = 3.0
    spacing_jitter: float = 1.0
    background_noise_sigma: float = 0.05
    rotation_range: float = 5.0
    band_gap: int = 6
    contrast_range: tuple = (0.25, 0.6)
    distractors: int = 6

    def validate(self, atlas: GlyphAtlas | None = None) -> None:
        if self.chars_per_sin != CHARS_PER_SIN:
            raise ConfigError(
                f"chars_per_sin: a serial number has exactly {CHARS_PER_SIN} characters, got {self.chars_per_sin}")
        if self.height < 64:
            raise ConfigError(f"height: must be >= 64, got {self.height}")
        if self.width < 96:
            raise ConfigError(f"width: must be >= 96, got {self.width}")
        if self.slabs_min < 1 or self.slabs_max < self.slabs_min:
            raise ConfigError("slabs_min/slabs_max: need 1 <= slabs_min <= slabs_max")
        lo, hi = self.glyph_scale_range
        if not 0 < lo <= hi:
            raise ConfigError("glyph_scale_range: need 0 < low <= high")
        if self.spacing_jitter < 0 or self.background_noise_sigma < 0 or self.rotation_range < 0:
            raise ConfigError("spacing_jitter/background_noise_sigma/rotation_range: must be >= 0")
        if self.char_gap < 1:
            raise ConfigError("char_gap: must be >= 1")
        c0, c1 = self.contrast_range
        if not 0 < c0 <= c1:
            raise ConfigError("contrast_range: need 0 < low <= high")
        if self.distractors < 0:
            raise ConfigError("distractors: must be >= 0")
        if atlas is not None:
            gh, gw = self._max_glyph_box(atlas)
            if self.slabs_max * (gh + 2 + self.band_gap) > self.height:
                raise ConfigError(
                    f"slabs_max: {self.slabs_max} bands of {gh + 2} px plus gap {self.band_gap} "
                    f"do not fit in height {self.height}")
            if CHARS_PER_SIN * gw + (CHARS_PER_SIN - 1) + 2 > self.width:
                raise ConfigError(f"width: {CHARS_PER_SIN} glyphs of up to {gw} px do not fit in {self.width}")

    def _max_glyph_box(self, atlas):
        s = self.glyph_scale_range[1]
        h = math.ceil(atlas.height * s)
        w = math.ceil(atlas.max_width * s)
        a = math.radians(self.rotation_range)
        rh = math.ceil(h * math.cos(a) + w * math.sin(a)) + 1
        rw = math.ceil(w * math.cos(a) + h * math.sin(a)) + 1
        return rh, rw

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["glyph_scale_range"] = list(self.glyph_scale_range)
        d["contrast_range"] = list(self.contrast_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown scene key")
        kw = dict(d)
        for k in ("glyph_scale_range", "contrast_range"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw)


@dataclass
class TruthSlab:
    sin: str
    centroids: np.ndarray  # (9, 2) row, col
    band: tuple

    def to_json(self):
        return {"sin": self.sin, "centroids": [[float(r), float(c)] for r, c in self.centroids],
                "band": [int(self.band[0]), int(self.band[1])]}

    @classmethod
    def from_json(cls, d):
        return cls(sin=d["sin"], centroids=np.array(d["centroids"], dtype=float), band=tuple(d["band"]))


@dataclass
class Scene:
    image: np.ndarray  # (H, W) float, values k/255
    truth: list = field(default_factory=list)

    @property
    def sins(self) -> list[str]:
        return [t.sin for t in self.truth]


@dataclass(frozen=True)
class AnnotatorModel:
    bias: tuple = (0.0, 0.0)
    jitter_sigma: float = 0.0
    mislabel_prob: float = 0.0

    def __post_init__(self):
        if self.jitter_sigma < 0:
            raise ConfigError("jitter_sigma: must be >= 0")
        if not 0 <= self.mislabel_prob < 1:
            raise ConfigError("mislabel_prob: must lie in [0, 1)")

    def to_dict(self):
        return {"bias": list(self.bias), "jitter_sigma": self.jitter_sigma, "mislabel_prob": self.mislabel_prob}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"bias", "jitter_sigma", "mislabel_prob"}
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown annotator key")
        return cls(bias=tuple(d.get("bias", (0.0, 0.0))), jitter_sigma=float(d.get("jitter_sigma", 0.0)),
                   mislabel_prob=float(d.get("mislabel_prob", 0.0)))


@dataclass
class AnnotatedSlab:
    points: np.ndarray  # (9, 2)
    classes: list

    @property
    def sin(self) -> str:
        return codes_to_sin(self.classes)


@dataclass
class AnnotationSet:
    slabs: list = field(default_factory=list)

    @property
    def sins(self) -> list[str]:
        return [s.sin for s in self.slabs]

    def to_json(self):
        return {"slabs": [{"points": [[float(r), float(c)] for r, c in s.points],
                           "classes": [int(c) for c in s.classes]} for s in self.slabs]}

    @classmethod
    def from_json(cls, d):
        return cls([AnnotatedSlab(np.array(s["points"], dtype=float).reshape(-1, 2), [int(c) for c in s["classes"]])
                    for s in d["slabs"]])


def _glyph_mask(atlas, code, scale, angle, rng):
    """Ink coverage in [0, 1] of one scaled, rotated glyph, cropped to its support."""
    g = atlas.glyphs[code]
    h = max(3, round(g.shape[0] * scale))
    w = max(1, round(g.shape[1] * scale))
    m = _resize_area(g, h, w)
    if angle:
        m = np.clip(ndimage.rotate(m, angle, order=1, reshape=True, prefilter=False), 0.0, 1.0)
        m[m < 0.1] = 0.0
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        m = m[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return m


def _draw_distractor(canvas, rng, bands, level):
    h, w = canvas.shape
    for _ in range(20):
        kind = rng.integers(3)
        r0, c0 = int(rng.integers(h)), int(rng.integers(w))
        if kind == 0:  # line segment
            length = rng.uniform(6, 30)
            ang = rng.uniform(0, math.pi)
            n = int(length * 2)
            rr = np.clip(np.round(r0 + np.linspace(0, length * math.sin(ang), n)).astype(int), 0, h - 1)
            cc = np.clip(np.round(c0 + np.linspace(0, length * math.cos(ang), n)).astype(int), 0, w - 1)
        elif kind == 1:  # filled blob
            rad = rng.uniform(1.5, 4)
            yy, xx = np.mgrid[-5:6, -5:6]
            keep = yy ** 2 + xx ** 2 <= rad ** 2
            rr = np.clip(r0 + yy[keep], 0, h - 1)
            cc = np.clip(c0 + xx[keep], 0, w - 1)
        else:  # rectangle outline
            bh, bw = int(rng.integers(4, 12)), int(rng.integers(4, 12))
            rr = np.r_[np.full(bw, r0), np.full(bw, r0 + bh), r0 + np.arange(bh), r0 + np.arange(bh)]
            cc = np.r_[c0 + np.arange(bw), c0 + np.arange(bw), np.full(bh, c0), np.full(bh, c0 + bw)]
            rr = np.clip(rr, 0, h - 1)
            cc = np.clip(cc, 0, w - 1)
        if any(np.any((rr >= t - 2) & (rr <= b + 2)) for t, b in bands):
            continue
        canvas[rr, cc] = np.maximum(canvas[rr, cc], level)
        return


def render_scene(spec: SceneSpec, atlas: GlyphAtlas, seed) -> Scene:
    """Render one scene; a pure function of (spec, atlas, seed)."""
    spec.validate(atlas)
    rng = np.random.default_rng(seed)
    H, W = spec.height, spec.width
    n_slabs = int(rng.integers(spec.slabs_min, spec.slabs_max + 1))
    strip = H // n_slabs

    base = rng.uniform(0.12, 0.28)
    # smooth illumination gradient
    gy, gx = rng.uniform(-0.08, 0.08, size=2)
    yy, xx = np.mgrid[0:H, 0:W]
    img = base + gy * (yy / H - 0.5) + gx * (xx / W - 0.5)
    glyph_layer = np.zeros((H, W))
    truth = []
    bands = []

    for s in range(n_slabs):
        digits = rng.integers(0, 10, size=CHARS_PER_SIN - 1)
        sin = "B" + "".join(str(int(d)) for d in digits)
        scale = rng.uniform(*spec.glyph_scale_range)
        masks = []
        for ch in sin:
            ang = rng.uniform(-spec.rotation_range, spec.rotation_range) if spec.rotation_range else 0.0
            masks.append(_glyph_mask(atlas, char_to_code(ch), scale * rng.uniform(0.95, 1.05), ang, rng))
        gh = max(m.shape[0] for m in masks)
        band_h = gh + 2
        gaps = [max(1, int(round(spec.char_gap + rng.uniform(-spec.spacing_jitter, spec.spacing_jitter))))
                for _ in range(CHARS_PER_SIN - 1)]
        widths = [m.shape[1] for m in masks]
        total = sum(widths) + sum(gaps)
        if total > W - 2:
            gaps = [1] * (CHARS_PER_SIN - 1)
            total = sum(widths) + sum(gaps)
            if total > W - 2:
                raise ConfigError(f"width: SIN of {total} px does not fit in {W}")
        lo = s * strip + spec.band_gap // 2
        hi = (s + 1) * strip - spec.band_gap // 2 - band_h
        if hi < lo:
            raise ConfigError(f"slabs_max: band of {band_h} px does not fit in a {strip} px strip")
        top = int(rng.integers(lo, hi + 1))
        left = int(rng.integers(1, W - total))

        contrast = rng.uniform(*spec.contrast_range)
        face = rng.uniform(0.05, 0.15)
        f_top, f_bot = max(0, top - 3), min(H, top + band_h + 3)
        f_left, f_right = max(0, left - 4), min(W, left + total + 4)
        img[f_top:f_bot, f_left:f_right] += face

        cents = []
        col = left
        rows_used = []
        for i, m in enumerate(masks):
            r0 = top + int(rng.integers(0, band_h - m.shape[0] + 1))
            level = contrast * rng.uniform(0.85, 1.15)
            win = glyph_layer[r0:r0 + m.shape[0], col:col + m.shape[1]]
            np.maximum(win, m * level, out=win)
            rr, cc = np.nonzero(m >= 0.5)  # ink pixels define the true centre
            rr = rr + r0
            cc = cc + col
            cents.append((rr.mean(), cc.mean()))
            rows_used.append((rr.min(), rr.max()))
            col += m.shape[1] + (gaps[i] if i < len(gaps) else 0)
        band = (int(min(r[0] for r in rows_used)), int(max(r[1] for r in rows_used)))
        bands.append(band)
        truth.append(TruthSlab(sin=sin, centroids=np.array(cents), band=band))

    img = img + ndimage.gaussian_filter(glyph_layer, 0.6)
    clutter = np.zeros((H, W))
    for _ in range(spec.distractors):
        _draw_distractor(clutter, rng, bands, rng.uniform(*spec.contrast_range))
    img = img + ndimage.gaussian_filter(clutter, 0.6)
    img = img + rng.normal(0.0, spec.background_noise_sigma, size=(H, W)) if spec.background_noise_sigma else img
    q = np.clip(np.round(img * 255), 0, 255)
    return Scene(image=q / 255.0, truth=truth)


def simulate_annotation(scene: Scene, annotator: AnnotatorModel, seed) -> AnnotationSet:
    """Click points = true centroid + bias + Gaussian jitter (clamped); classes flip at random."""
    if not scene.truth:
        raise ValueError("scene has no ground-truth slabs to annotate")
    rng = np.random.default_rng(seed)
    H, W = scene.image.shape
    slabs = []
    for t in scene.truth:
        pts = t.centroids + np.asarray(annotator.bias, dtype=float)
        if annotator.jitter_sigma > 0:
            pts = pts + rng.normal(0.0, annotator.jitter_sigma, size=pts.shape)
        pts = np.column_stack([np.clip(pts[:, 0], 0, H - 1), np.clip(pts[:, 1], 0, W - 1)])
        classes = []
        for ch in t.sin:
            code = char_to_code(ch)
            if annotator.mislabel_prob > 0 and rng.random() < annotator.mislabel_prob:
                wrong = [c for c in range(1, NUM_CLASSES + 1) if c != code]
                code = int(wrong[rng.integers(len(wrong))])
            classes.append(code)
        slabs.append(AnnotatedSlab(points=pts, classes=classes))
    return AnnotationSet(slabs)


# ---------------------------------------------------------------------------
# corpus on disk

SPLITS = ("train", "val", "test")


@dataclass
class CorpusManifest:
    root: Path
    splits: dict

    def paths(self, split):
        return [self.root / p for p in self.splits[split]]

    def to_json(self):
        return {k: list(self.splits[k]) for k in SPLITS}

    def save(self, path=None):
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        return path


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    d = json.loads(path.read_text())
    missing = [k for k in SPLITS if k not in d]
    if missing:
        raise ValueError(f"{path}: manifest lacks split {missing[0]!r}")
    return CorpusManifest(root=path.parent, splits={k: list(d[k]) for k in SPLITS})


def scene_seeds(seed: int, index: int) -> tuple[int, int]:
    """Independent (render, annotation) seeds for scene ``index``."""
    a, b = np.random.SeedSequence([seed, index]).generate_state(2)
    return int(a), int(b)


def stem_of(path) -> Path:
    p = Path(path)
    return p.with_name(p.name[:-len(".pgm")] if p.name.endswith(".pgm") else p.name)


def sidecar(path, suffix) -> Path:
    s = stem_of(path)
    return s.with_name(s.name + suffix)


def write_scene(path, scene: Scene, annotations: AnnotationSet):
    path = Path(path)
    write_pgm(path, np.round(scene.image * 255).astype(np.uint8))
    _write_json(sidecar(path, ".truth.json"), {"slabs": [t.to_json() for t in scene.truth]})
    _write_json(sidecar(path, ".ann.json"), annotations.to_json())


def _write_json(path, obj):
    try:
        Path(path).write_text(json.dumps(obj, separators=(",", ":")) + "\n")
    except OSError as e:
        raise OSError(f"{path}: {e.strerror or e}") from e


def read_scene(path) -> tuple[Scene, AnnotationSet]:
    path = Path(path)
    img = read_pgm(path) / 255.0
    truth = json.loads(sidecar(path, ".truth.json").read_text())
    ann = json.loads(sidecar(path, ".ann.json").read_text())
    return Scene(img, [TruthSlab.from_json(t) for t in truth["slabs"]]), AnnotationSet.from_json(ann)


def gen_corpus(spec: SceneSpec, atlas: GlyphAtlas, annotator: AnnotatorModel, counts, seed: int,
               out_dir) -> CorpusManifest:
    """Render train/val/test scenes with truth and annotation sidecars into ``out_dir``."""
    if len(counts) != 3 or any(int(c) < 0 for c in counts):
        raise ConfigError("counts: need three non-negative split sizes (train, val, test)")
    spec.validate(atlas)
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    splits = {}
    index = 0
    for split, n in zip(SPLITS, counts):
        names = []
        for j in range(int(n)):
            rs, ans = scene_seeds(seed, index)
            scene = render_scene(spec, atlas, rs)
            ann = simulate_annotation(scene, annotator, ans)
            rel = f"scenes/{split}_{j:04d}.pgm"
            try:
                write_scene(out / rel, scene, ann)
            except OSError as e:
                raise OSError(f"{out / rel}: {e}") from e
            names.append(rel)
            index += 1
        splits[split] = names
    manifest = CorpusManifest(root=out, splits=splits)
    manifest.save()
    return manifest


def generate_in_memory(spec: SceneSpec, atlas: GlyphAtlas, annotator: AnnotatorModel, counts, seed: int):
    """Same scenes as :func:`gen_corpus` but returned as {split: [(Scene, AnnotationSet)]}."""
    spec.validate(atlas)
    result = {}
    index = 0
    for split, n in zip(SPLITS, counts):
        items = []
        for _ in range(int(n)):
            rs, ans = scene_seeds(seed, index)
            scene = render_scene(spec, atlas, rs)
            items.append((scene, simulate_annotation(scene, annotator, ans)))
            index += 1
        result[split] = items
    return result
