"""Procedural scenes of colored shapes with masks and aligned captions."""

import logging
import os
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .config import STREAM_DATA, STREAM_SPLIT
from .imageio import ImageFormatError, read_pgm, read_ppm, write_pgm, write_ppm
from .text import Vocabulary, words_of

logger = logging.getLogger(__name__)

MIN_CANVAS = 24
GRID = 3

PALETTE: Dict[str, Tuple[int, int, int]] = {
    "red": (220, 30, 30),
    "green": (30, 170, 60),
    "blue": (40, 70, 220),
    "yellow": (240, 220, 40),
    "purple": (140, 50, 170),
    "orange": (250, 140, 20),
    "white": (255, 255, 255),
    "black": (0, 0, 0),
}
COLORS = tuple(PALETTE)
SHAPES = ("circle", "square", "triangle", "cross")
SIZES = ("small", "large")
HALF_SIZE = {"small": 0.28, "large": 0.42}
LOCATIONS = (
    "top left",
    "top center",
    "top right",
    "middle left",
    "center",
    "middle right",
    "bottom left",
    "bottom center",
    "bottom right",
)
COUNT_WORDS = {2: "two", 3: "three", 4: "four"}

OBJECT_TEMPLATE = "A {size} {color} {shape} sits in the {location}."
SHORT_TEMPLATE = "There is a {color} {shape} near the {location}."
SCENE_TEMPLATE = "A scene with {count} objects on a {background} background."


class SceneError(ValueError):
    """Raised for invalid generation or split arguments."""

    pass


class CorpusError(OSError):
    """Raised when a corpus directory is missing or inconsistent."""

    pass


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    cell: int


@dataclass(frozen=True)
class SceneSpec:
    canvas: int
    background: str
    objects: Tuple[SceneObject, ...]


@dataclass
class AnnotatedSample:
    sample_id: int
    scene: SceneSpec
    image: np.ndarray
    masks: List[np.ndarray]
    long_caption: List[str]
    short_captions: List[str]
    sentence_to_object: Dict[int, int] = field(default_factory=dict)


def color_values(name: str) -> np.ndarray:
    return np.array(PALETTE[name], dtype=np.float64) / 255.0


def vocabulary() -> Vocabulary:
    """Closed vocabulary covering every caption the generator can emit."""
    words = set()
    for template in (OBJECT_TEMPLATE, SHORT_TEMPLATE, SCENE_TEMPLATE):
        words.update(words_of(re.sub(r"\{[a-z]+\}", " ", template)))
    for group in (COLORS, SHAPES, SIZES, LOCATIONS, COUNT_WORDS.values()):
        for phrase in group:
            words.update(words_of(phrase))
    return Vocabulary.from_words(words)


def shape_mask(obj: SceneObject, canvas: int) -> np.ndarray:
    """Rasterize one object at pixel centers with hard edges."""
    cell = canvas / GRID
    row, col = divmod(obj.cell, GRID)
    cx, cy = (col + 0.5) * cell, (row + 0.5) * cell
    half = HALF_SIZE[obj.size] * cell
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    if obj.shape == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if obj.shape == "circle":
        return dx * dx + dy * dy <= half * half
    if obj.shape == "triangle":
        # apex at the top, base at the bottom
        inside_rows = (dy >= -half) & (dy <= half)
        return inside_rows & (np.abs(dx) <= (dy + half) / 2.0)
    if obj.shape == "cross":
        arm = half / 3.0
        vertical = (np.abs(dx) <= arm) & (np.abs(dy) <= half)
        horizontal = (np.abs(dy) <= arm) & (np.abs(dx) <= half)
        return vertical | horizontal
    raise SceneError(f"Unknown shape: {obj.shape}")


def object_sentence(obj: SceneObject) -> str:
    return OBJECT_TEMPLATE.format(
        size=obj.size, color=obj.color, shape=obj.shape, location=LOCATIONS[obj.cell]
    )


def short_sentence(obj: SceneObject) -> str:
    return SHORT_TEMPLATE.format(
        color=obj.color, shape=obj.shape, location=LOCATIONS[obj.cell]
    )


def scene_sentence(scene: SceneSpec) -> str:
    return SCENE_TEMPLATE.format(
        count=COUNT_WORDS[len(scene.objects)], background=scene.background
    )


def parse_object_sentence(sentence: str) -> Tuple[str, str, str]:
    """Recover (color, shape, location) from an object sentence."""
    words = words_of(sentence)
    color = next(w for w in words if w in PALETTE)
    shape = next(w for w in words if w in SHAPES)
    tail = " ".join(words[words.index("the") + 1 :])
    return color, shape, tail


def sample_scene(rng: np.random.Generator, canvas: int) -> SceneSpec:
    background = COLORS[int(rng.integers(len(COLORS)))]
    count = int(rng.integers(2, 5))
    cells = rng.choice(GRID * GRID, size=count, replace=False)
    foreground = [c for c in COLORS if c != background]
    used = set()
    objects = []
    for cell in cells:
        while True:
            color = foreground[int(rng.integers(len(foreground)))]
            shape = SHAPES[int(rng.integers(len(SHAPES)))]
            if (color, shape) not in used:
                break
        used.add((color, shape))
        size = SIZES[int(rng.integers(len(SIZES)))]
        objects.append(SceneObject(shape, color, size, int(cell)))
    return SceneSpec(canvas, background, tuple(objects))


def render(scene: SceneSpec, sample_id: int = 0) -> AnnotatedSample:
    """Rasterize a scene and fill its caption templates."""
    canvas = scene.canvas
    image = np.empty((canvas, canvas, 3), dtype=np.float64)
    image[...] = color_values(scene.background)
    masks = []
    for obj in scene.objects:
        mask = shape_mask(obj, canvas)
        image[mask] = color_values(obj.color)
        masks.append(mask)
    long_caption = [scene_sentence(scene)] + [object_sentence(o) for o in scene.objects]
    return AnnotatedSample(
        sample_id=sample_id,
        scene=scene,
        image=image,
        masks=masks,
        long_caption=long_caption,
        short_captions=[short_sentence(o) for o in scene.objects],
        sentence_to_object={k + 1: k for k in range(len(scene.objects))},
    )


def generate_one(seed: int, index: int, canvas: int) -> AnnotatedSample:
    rng = np.random.default_rng([seed, STREAM_DATA, index])
    return render(sample_scene(rng, canvas), sample_id=index)


def generate(
    seed: int, count: int, canvas: int, max_workers: int = 1
) -> List[AnnotatedSample]:
    """Deterministic samples; each index draws from its own random stream."""
    if canvas < MIN_CANVAS:
        raise SceneError(f"Canvas must be at least {MIN_CANVAS}, got {canvas}")
    if count < 1:
        raise SceneError(f"Sample count must be >= 1, got {count}")
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(lambda i: generate_one(seed, i, canvas), range(count)))


def corpus_split(
    samples: Sequence[AnnotatedSample], train_fraction: float, seed: int
) -> Tuple[List[AnnotatedSample], List[AnnotatedSample]]:
    """Seeded split that keeps samples sharing a SceneSpec on one side."""
    if not 0.0 < train_fraction < 1.0:
        raise SceneError(f"train fraction must lie in (0, 1), got {train_fraction}")
    groups: Dict[SceneSpec, List[int]] = {}
    for position, sample in enumerate(samples):
        groups.setdefault(sample.scene, []).append(position)
    ordered = list(groups.values())
    rng = np.random.default_rng([seed, STREAM_SPLIT])
    target = int(round(train_fraction * len(samples)))
    train_positions: List[int] = []
    for g in rng.permutation(len(ordered)):
        if len(train_positions) + len(ordered[g]) <= target:
            train_positions.extend(ordered[g])
    chosen = set(train_positions)
    train = [s for i, s in enumerate(samples) if i in chosen]
    test = [s for i, s in enumerate(samples) if i not in chosen]
    if not train or not test:
        raise SceneError(
            f"Split of {len(samples)} samples at {train_fraction} leaves a side empty"
        )
    return train, test


def _atomic_text(path: Path, text: str) -> None:
    fd, temp_path = tempfile.mkstemp(dir=path.parent, prefix=f".tmp_{path.stem}_")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(temp_path, path)
    except OSError:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


def _scene_line(sample: AnnotatedSample) -> str:
    scene = sample.scene
    objects = ";".join(f"{o.shape}:{o.color}:{o.size}:{o.cell}" for o in scene.objects)
    return f"{sample.sample_id:04d} {scene.canvas} {scene.background} {objects}"


def _parse_scene_line(line: str) -> Tuple[int, SceneSpec]:
    sample_id, canvas, background, objects = line.split(" ")
    parsed = []
    for record in objects.split(";"):
        shape, color, size, cell = record.split(":")
        parsed.append(SceneObject(shape, color, size, int(cell)))
    return int(sample_id), SceneSpec(int(canvas), background, tuple(parsed))


def write_corpus(out_dir: str, samples: Sequence[AnnotatedSample]) -> None:
    """Write images, masks, captions, manifest and vocabulary under ``out_dir``."""
    root = Path(out_dir)
    for sub in ("images", "masks", "captions"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for sample in samples:
        stem = f"{sample.sample_id:04d}"
        write_ppm(str(root / "images" / f"{stem}.ppm"), sample.image)
        for k, mask in enumerate(sample.masks):
            write_pgm(str(root / "masks" / f"{stem}_{k}.pgm"), mask.astype(np.float64))
        _atomic_text(
            root / "captions" / f"{stem}.txt", "\n".join(sample.long_caption) + "\n"
        )
        _atomic_text(
            root / "captions" / f"{stem}_short.txt",
            "\n".join(sample.short_captions) + "\n",
        )
    manifest = ["# id canvas background shape:color:size:cell;..."]
    manifest += [_scene_line(s) for s in samples]
    _atomic_text(root / "manifest.txt", "\n".join(manifest) + "\n")
    vocabulary().save(str(root / "vocab.txt"))
    logger.info(f"Wrote {len(samples)} samples to {root}")


def read_corpus(data_dir: str) -> Tuple[List[AnnotatedSample], Vocabulary]:
    """Load a corpus written by ``write_corpus``."""
    root = Path(data_dir)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise CorpusError(f"No manifest.txt in {root}")
    samples = []
    try:
        for line in manifest.read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            sample_id, scene = _parse_scene_line(line.strip())
            stem = f"{sample_id:04d}"
            image = read_ppm(str(root / "images" / f"{stem}.ppm"))
            masks = [
                read_pgm(str(root / "masks" / f"{stem}_{k}.pgm")) > 0.5
                for k in range(len(scene.objects))
            ]
            long_caption = (root / "captions" / f"{stem}.txt").read_text(
                encoding="utf-8"
            ).splitlines()
            short_captions = (root / "captions" / f"{stem}_short.txt").read_text(
                encoding="utf-8"
            ).splitlines()
            samples.append(
                AnnotatedSample(
                    sample_id=sample_id,
                    scene=scene,
                    image=image,
                    masks=masks,
                    long_caption=long_caption,
                    short_captions=short_captions,
                    sentence_to_object={k + 1: k for k in range(len(scene.objects))},
                )
            )
        vocab = Vocabulary.load(str(root / "vocab.txt"))
    except ImageFormatError:
        raise
    except (OSError, ValueError) as e:
        raise CorpusError(f"Corrupt corpus in {root}: {e}")
    if not samples:
        raise CorpusError(f"Corpus in {root} lists no samples")
    logger.info(f"Read {len(samples)} samples from {root}")
    return samples, vocab
