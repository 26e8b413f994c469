"""Procedural image+caption generator: colored shapes with facet-aligned captions.

Each scene carries a main shape, a minor shape, a spatial relation, a mood, and
a dominant color. Two caption sources are emitted per scene, mirroring the
long/raw split of real caption corpora:

  - a long caption: one sentence per semantic facet plus stylistic filler, so
    every caption differs from every other in many words;
  - a raw caption: the minimal "a photo of a <color> <shape>" line, which is
    what zero-shot label templates are matched against.

Every detail a caption mentions is coarse enough for a 4x4-patch encoder to
read off the pixels: shapes are large and near-centered, positions and sizes
are bucketed into words, and the main circle is drawn as a thick ring so its
hollow center separates it from filled squares and triangles at patch-mean
resolution. Captions are deterministic functions of the scene; the generator
redraws any scene whose caption would collide with an earlier one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import encode_ppm
from .store import Corpus, CorpusRecord, save_corpus

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (0.86, 0.16, 0.16),
    "green": (0.16, 0.71, 0.27),
    "blue": (0.20, 0.35, 0.86),
    "yellow": (0.90, 0.78, 0.20),
}
BACKGROUNDS = {
    "pale": 0.93,
    "gray": 0.70,
    "dark": 0.30,
}
WARM = {"red", "yellow"}
IMAGE_SIZE = 64

ROW_WORDS = ("top", "upper", "middle", "lower", "bottom")
COL_WORDS = ("far left", "left", "center", "right", "far right")
SIZE_WORDS = {False: "medium", True: "big"}

_LEADS = ("A photo of", "A picture of", "An image of", "A rendering of")
_VERBS = ("sits", "rests", "lies", "stands")
_FEELS = ("The scene feels", "The overall mood is", "The atmosphere seems")
_DOMS = ("The dominant color is", "The picture is mostly", "Color-wise it leans")
_ADJS = (
    "quiet", "vivid", "plain", "crisp", "soft", "bold", "clean", "faded",
    "sharp", "mild", "tidy", "stark", "calm", "bright", "dull", "neat",
    "airy", "dense", "flat", "deep", "warm", "cool", "pale", "rich",
)
_NOUNS = (
    "study", "sketch", "scene", "view", "frame", "panel", "plate", "still",
    "shot", "print", "piece", "work", "image", "composition", "figure",
    "layout", "design", "form", "card", "poster", "sample", "specimen",
    "exhibit", "item",
)


@dataclass(frozen=True)
class Scene:
    main_shape: str
    main_color: str
    minor_shape: str
    minor_color: str
    background: str
    main_center: tuple[int, int]  # (row, col)
    main_radius: int
    minor_center: tuple[int, int]
    minor_radius: int

    @property
    def relation(self) -> str:
        dy = self.minor_center[0] - self.main_center[0]
        dx = self.minor_center[1] - self.main_center[1]
        if abs(dy) >= abs(dx):
            return "above" if dy > 0 else "below"
        return "left of" if dx > 0 else "right of"

    @property
    def mood(self) -> str:
        return "warm" if self.main_color in WARM else "cool"

    @property
    def corner(self) -> str:
        r, c = self.minor_center
        vert = "top" if r < IMAGE_SIZE // 2 else "bottom"
        horz = "left" if c < IMAGE_SIZE // 2 else "right"
        return f"{vert} {horz}"

    @property
    def size_word(self) -> str:
        return SIZE_WORDS[self.main_radius >= 19]

    @property
    def place_words(self) -> str:
        row = ROW_WORDS[min(int(self.main_center[0] * 5 / IMAGE_SIZE), 4)]
        col = COL_WORDS[min(int(self.main_center[1] * 5 / IMAGE_SIZE), 4)]
        return f"{row} {col}"

    @property
    def caption_key(self) -> tuple:
        """Everything the captions mention; scenes with equal keys collide."""
        return (self.main_shape, self.main_color, self.minor_shape, self.minor_color,
                self.background, self.relation, self.corner, self.size_word,
                self.place_words)


def _draw_scene(rng: np.random.Generator) -> Scene:
    main_shape = SHAPES[rng.integers(len(SHAPES))]
    color_names = list(COLORS)
    main_color = color_names[rng.integers(len(color_names))]
    minor_shape = SHAPES[rng.integers(len(SHAPES))]
    while minor_shape == main_shape:
        minor_shape = SHAPES[rng.integers(len(SHAPES))]
    minor_color = color_names[rng.integers(len(color_names))]
    while minor_color == main_color:
        minor_color = color_names[rng.integers(len(color_names))]
    background = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    main_center = (int(rng.integers(30, 35)), int(rng.integers(30, 35)))
    main_radius = int(rng.integers(16, 22))
    corners = [(10, 10), (10, 54), (54, 10), (54, 54)]
    minor_center = corners[rng.integers(4)]
    minor_radius = int(rng.integers(5, 8))
    return Scene(
        main_shape=main_shape,
        main_color=main_color,
        minor_shape=minor_shape,
        minor_color=minor_color,
        background=background,
        main_center=main_center,
        main_radius=main_radius,
        minor_center=minor_center,
        minor_radius=minor_radius,
    )


def make_scene(seed: int, index: int) -> Scene:
    rng = np.random.default_rng([seed, index])
    return _draw_scene(rng)


def _shape_mask(shape: str, center: tuple[int, int], radius: int) -> np.ndarray:
    rr, cc = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    dy = rr - center[0]
    dx = cc - center[1]
    if shape == "circle":
        return dy * dy + dx * dx <= radius * radius
    if shape == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    # upright triangle: apex at the top, flat base at the bottom
    inside_v = (dy >= -radius) & (dy <= radius)
    half_width = (dy + radius) / 2.0
    return inside_v & (np.abs(dx) <= half_width)


def _ring_mask(center: tuple[int, int], radius: int) -> np.ndarray:
    rr, cc = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE]
    d2 = (rr - center[0]) ** 2 + (cc - center[1]) ** 2
    inner = max(radius - max(3, radius // 4), 2)
    return (d2 <= radius * radius) & (d2 >= inner * inner)


def render_scene(scene: Scene) -> np.ndarray:
    """(3, 64, 64) float32 in [0, 1]. The main circle renders as a thick ring."""
    img = np.full((3, IMAGE_SIZE, IMAGE_SIZE), BACKGROUNDS[scene.background], dtype=np.float32)
    for shape, color, center, radius, is_main in (
        (scene.main_shape, scene.main_color, scene.main_center, scene.main_radius, True),
        (scene.minor_shape, scene.minor_color, scene.minor_center, scene.minor_radius, False),
    ):
        if shape == "circle" and is_main:
            mask = _ring_mask(center, radius)
        else:
            mask = _shape_mask(shape, center, radius)
        for ch, val in enumerate(COLORS[color]):
            img[ch][mask] = val
    return img


def _pick(scene: Scene, salt: str, pool) -> str:
    """Deterministic style choice: a stable hash of the scene's caption key."""
    digest = hashlib.sha256((repr(scene.caption_key) + salt).encode()).digest()
    return pool[int.from_bytes(digest[:4], "little") % len(pool)]


def caption_for(scene: Scene) -> str:
    """Long caption: one sentence per facet, styled and reordered per scene."""
    s = scene
    sentences = [
        f"The main object is a {s.main_shape}.",
        f"Its prominent color is {s.main_color}.",
        f"It {_pick(s, 'verb', _VERBS)} in the {s.place_words} area.",
        f"A small {s.minor_color} {s.minor_shape} waits in the {s.corner} corner.",
        f"The {s.main_shape} is {s.relation} the {s.minor_shape}.",
        f"{_pick(s, 'feel', _FEELS)} {s.mood}.",
        f"{_pick(s, 'dom', _DOMS)} {s.main_color}.",
        f"A {_pick(s, 'a1', _ADJS)} and {_pick(s, 'a2', _ADJS)} {_pick(s, 'n1', _NOUNS)}, "
        f"like a {_pick(s, 'a3', _ADJS)} {_pick(s, 'n2', _NOUNS)}.",
    ]
    rotate = int.from_bytes(
        hashlib.sha256((repr(s.caption_key) + "order").encode()).digest()[:4], "little"
    ) % len(sentences)
    sentences = sentences[rotate:] + sentences[:rotate]
    lead = _pick(s, "lead", _LEADS)
    return (
        f"{lead} a {s.size_word} {s.main_color} {s.main_shape} on a "
        f"{s.background} background. " + " ".join(sentences)
    )


def raw_caption_for(scene: Scene) -> str:
    """Short raw caption, the zero-shot template's anchor."""
    return f"a photo of a {scene.main_color} {scene.main_shape}"


def scene_meta(scene: Scene) -> dict:
    return {
        "shape": scene.main_shape,
        "color": scene.main_color,
        "minor_shape": scene.minor_shape,
        "minor_color": scene.minor_color,
        "relation": scene.relation,
        "mood": scene.mood,
        "background": scene.background,
    }


def generate_dataset(n: int, seed: int, out_dir: str | Path) -> tuple[Corpus, Corpus]:
    """Render n scenes; write PPMs, corpus.jsonl (long captions),
    corpus_raw.jsonl (raw captions), and meta.jsonl. Returns (long, raw)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    long_records = []
    raw_records = []
    metas = []
    seen: set[tuple] = set()
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        scene = _draw_scene(rng)
        while scene.caption_key in seen:  # deterministic redraws keep captions unique
            scene = _draw_scene(rng)
        seen.add(scene.caption_key)
        img_path = out_dir / "images" / f"{i:05d}.ppm"
        img_path.write_bytes(encode_ppm(render_scene(scene)))
        long_records.append(
            CorpusRecord(sample_id=i, caption=caption_for(scene), image_path=str(img_path))
        )
        raw_records.append(
            CorpusRecord(sample_id=i, caption=raw_caption_for(scene), image_path=str(img_path))
        )
        metas.append({"id": i, **scene_meta(scene)})
    long_corpus = Corpus(tuple(long_records))
    raw_corpus = Corpus(tuple(raw_records))
    save_corpus(long_corpus, out_dir / "corpus.jsonl", relative_to=out_dir)
    save_corpus(raw_corpus, out_dir / "corpus_raw.jsonl", relative_to=out_dir)
    with open(out_dir / "meta.jsonl", "w", encoding="utf-8") as f:
        for m in metas:
            f.write(json.dumps(m) + "\n")
    return long_corpus, raw_corpus


def load_meta(path: str | Path) -> dict[int, dict]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            obj = json.loads(line)
            out[int(obj["id"])] = obj
    return out
