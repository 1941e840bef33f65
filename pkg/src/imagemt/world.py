"""Synthetic grid world: scenes, bilingual sentences, scene vectors, scene graphs.

Scenes hold one to three coloured shapes on a 4x4 grid. Each scene renders
to a "Sourcish" sentence (``a red circle left-of a blue square``) and a
"Targetese" translation (``sirkolo roja maldekstre-de kwadro blua``). The
ambiguous rendering drops the colour word of every object after the first
from the source only, so the target then needs information the source
lacks.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue")
RELATIONS = ("left-of", "above")
GRID = 4
MAX_OBJECTS = 3
SLOT_DIM = 9  # 3 shape + 3 color + 2 position + 1 presence
SCENE_DIM = MAX_OBJECTS * SLOT_DIM

HAS_COLOR = "has-color"
EXISTS = "exists"

LEXICON = {
    "circle": "sirkolo",
    "square": "kwadro",
    "triangle": "trigono",
    "red": "roja",
    "green": "verda",
    "blue": "blua",
    "left-of": "maldekstre-de",
    "above": "supre-de",
}
ARTICLE = "a"
SOURCE_WORDS = (ARTICLE,) + SHAPES + COLORS + RELATIONS
TARGET_WORDS = tuple(LEXICON[w] for w in SHAPES + COLORS + RELATIONS)


class UnknownTokenError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class ObjectSpec:
    shape: str
    color: str
    col: int
    row: int

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS:
            raise ValueError(f"bad object attributes {self.shape!r}/{self.color!r}")
        if not (0 <= self.col < GRID and 0 <= self.row < GRID):
            raise ValueError(f"position ({self.col},{self.row}) off the {GRID}x{GRID} grid")

    @property
    def cell(self) -> tuple[int, int]:
        return (self.col, self.row)


def _row_major(o: ObjectSpec):
    return (o.row, o.col)


def _mention_order(o: ObjectSpec):
    return (o.col, o.row)


@dataclass(frozen=True)
class Scene:
    """Objects in canonical row-major order; no two share a cell.

    Decoded scenes may be empty; sampled scenes hold 1-3 objects.
    """

    objects: tuple[ObjectSpec, ...] = ()

    def __post_init__(self):
        objs = tuple(sorted(self.objects, key=_row_major))
        if len({o.cell for o in objs}) != len(objs):
            raise ValueError("two objects share a grid cell")
        if len(objs) > MAX_OBJECTS:
            raise ValueError(f"at most {MAX_OBJECTS} objects, got {len(objs)}")
        object.__setattr__(self, "objects", objs)

    def __len__(self) -> int:
        return len(self.objects)

    def mentions(self) -> list[ObjectSpec]:
        return sorted(self.objects, key=_mention_order)

    def to_json(self) -> list[dict]:
        return [{"shape": o.shape, "color": o.color, "col": o.col, "row": o.row} for o in self.objects]

    @classmethod
    def from_json(cls, items: Sequence[dict]) -> "Scene":
        return cls(tuple(ObjectSpec(d["shape"], d["color"], int(d["col"]), int(d["row"])) for d in items))


@dataclass(frozen=True)
class SceneConfig:
    count_probs: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)  # P(count = 1, 2, 3)


def sample_scene(rng: np.random.Generator, config: SceneConfig = SceneConfig()) -> Scene:
    k = int(rng.choice(len(config.count_probs), p=np.asarray(config.count_probs))) + 1
    cells: list[int] = []
    while len(cells) < k:
        c = int(rng.integers(GRID * GRID))
        if c not in cells:
            cells.append(c)
    objs = []
    for c in cells:
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = COLORS[int(rng.integers(len(COLORS)))]
        objs.append(ObjectSpec(shape, color, c % GRID, c // GRID))
    return Scene(tuple(objs))


def relation(a: ObjectSpec, b: ObjectSpec) -> str:
    """Relation of ``a`` to ``b`` where ``a`` precedes ``b`` in mention order."""
    if a.col < b.col:
        return "left-of"
    if a.col == b.col and a.row < b.row:
        return "above"
    raise ValueError(f"{a} does not precede {b} in mention order")


def render_pair(scene: Scene, mode: str = "normal") -> tuple[list[str], list[str]]:
    if mode not in ("normal", "ambiguous"):
        raise ValueError(f"mode must be normal or ambiguous, got {mode!r}")
    objs = scene.mentions()
    src: list[str] = []
    for i, o in enumerate(objs):
        if i:
            src.append(relation(objs[i - 1], o))
        src.append(ARTICLE)
        if mode == "normal" or i == 0:
            src.append(o.color)
        src.append(o.shape)
    return src, render_target(scene)


def render_target(scene: Scene) -> list[str]:
    objs = scene.mentions()
    tgt: list[str] = []
    for i, o in enumerate(objs):
        if i:
            tgt.append(LEXICON[relation(objs[i - 1], o)])
        tgt += [LEXICON[o.shape], LEXICON[o.color]]
    return tgt


# ---------------------------------------------------------------------------
# scene vectors


def encode_scene(scene: Scene) -> np.ndarray:
    v = np.zeros(SCENE_DIM)
    for s, o in enumerate(scene.objects):  # already row-major
        base = s * SLOT_DIM
        v[base + SHAPES.index(o.shape)] = 1.0
        v[base + 3 + COLORS.index(o.color)] = 1.0
        v[base + 6] = o.col / 1.5 - 1.0
        v[base + 7] = o.row / 1.5 - 1.0
        v[base + 8] = 1.0
    return v


def decode_scene(v: np.ndarray) -> Scene:
    v = np.asarray(v, dtype=np.float64).reshape(SCENE_DIM)
    objs: list[ObjectSpec] = []
    taken: set[tuple[int, int]] = set()
    for s in range(MAX_OBJECTS):
        slot = v[s * SLOT_DIM : (s + 1) * SLOT_DIM]
        if not slot[8] > 0.5:
            continue
        col = int(np.clip(np.rint((slot[6] + 1.0) * 1.5), 0, GRID - 1))
        row = int(np.clip(np.rint((slot[7] + 1.0) * 1.5), 0, GRID - 1))
        if (col, row) in taken:  # earlier slot wins
            continue
        taken.add((col, row))
        objs.append(ObjectSpec(SHAPES[int(np.argmax(slot[:3]))], COLORS[int(np.argmax(slot[3:6]))], col, row))
    return Scene(tuple(objs))


def all_scenes(max_objects: int = MAX_OBJECTS) -> Iterator[Scene]:
    """Every valid scene with 1..max_objects objects, each object set once."""
    kinds = list(itertools.product(SHAPES, COLORS))
    cells = [(c, r) for r in range(GRID) for c in range(GRID)]
    for k in range(1, max_objects + 1):
        for cell_set in itertools.combinations(cells, k):
            for attrs in itertools.product(kinds, repeat=k):
                yield Scene(tuple(ObjectSpec(a[0], a[1], c[0], c[1]) for a, c in zip(attrs, cell_set)))


# ---------------------------------------------------------------------------
# scene graphs


@dataclass(frozen=True, order=True)
class Triple:
    head: str
    relation: str
    tail: str


def _graph(entities: list[str], triples: list[Triple]) -> frozenset[Triple]:
    used = {t.head for t in triples} | {t.tail for t in triples}
    extra = [Triple(e, EXISTS, e) for e in entities if e not in used]
    return frozenset(triples + extra)


def _entity_names(shapes: Sequence[str]) -> list[str]:
    seen: dict[str, int] = {}
    names = []
    for s in shapes:
        seen[s] = seen.get(s, 0) + 1
        names.append(f"{s}#{seen[s]}")
    return names


def parse_lsg(tokens: Sequence[str]) -> frozenset[Triple]:
    """Rule-based language scene graph of a Sourcish sentence."""
    for tok in tokens:
        if tok not in SOURCE_WORDS:
            raise UnknownTokenError(f"unknown source token {tok!r}")
    shapes: list[str] = []
    colors: list[str | None] = []
    rels: list[str] = []
    i, n = 0, len(tokens)
    while i < n:
        if shapes:
            if tokens[i] not in RELATIONS:
                raise ValueError(f"expected a relation at position {i}, got {tokens[i]!r}")
            rels.append(tokens[i])
            i += 1
        if i >= n or tokens[i] != ARTICLE:
            raise ValueError(f"expected {ARTICLE!r} at position {i}")
        i += 1
        color = None
        if i < n and tokens[i] in COLORS:
            color = tokens[i]
            i += 1
        if i >= n or tokens[i] not in SHAPES:
            raise ValueError(f"expected a shape at position {i}")
        shapes.append(tokens[i])
        colors.append(color)
        i += 1
    names = _entity_names(shapes)
    triples = [Triple(e, HAS_COLOR, c) for e, c in zip(names, colors) if c is not None]
    triples += [Triple(names[j], r, names[j + 1]) for j, r in enumerate(rels)]
    return _graph(names, triples)


def extract_vsg(scene: Scene) -> frozenset[Triple]:
    """Scene graph read off ground-truth attributes and grid geometry."""
    objs = scene.mentions()
    names = _entity_names([o.shape for o in objs])
    triples = [Triple(e, HAS_COLOR, o.color) for e, o in zip(names, objs)]
    triples += [Triple(names[j], relation(objs[j], objs[j + 1]), names[j + 1]) for j in range(len(objs) - 1)]
    return _graph(names, triples)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class TranslationExample:
    source: list[str]
    target: list[str]
    scene: Scene
    split: str = "normal"

    def to_json(self) -> str:
        d = {
            "source": " ".join(self.source),
            "target": " ".join(self.target),
            "scene": self.scene.to_json(),
            "split": self.split,
        }
        return json.dumps(d, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "TranslationExample":
        d = json.loads(line)
        return cls(d["source"].split(), d["target"].split(), Scene.from_json(d["scene"]), d["split"])


def ambiguous_slots(n: int, fraction: float) -> list[bool]:
    """Deterministic interleaving: example i is ambiguous when floor((i+1)f) > floor(i f)."""
    return [int((i + 1) * fraction + 1e-9) > int(i * fraction + 1e-9) for i in range(n)]


def make_examples(
    rng: np.random.Generator, n: int, ambiguous_fraction: float, config: SceneConfig = SceneConfig()
) -> list[TranslationExample]:
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0.0 <= ambiguous_fraction <= 1.0:
        raise ValueError("ambiguous_fraction must lie in [0, 1]")
    if ambiguous_fraction > 0 and sum(config.count_probs[1:]) <= 0:
        raise ValueError("ambiguous examples need scenes with at least two objects")
    out = []
    for amb in ambiguous_slots(n, ambiguous_fraction):
        scene = sample_scene(rng, config)
        # a single object has nothing to drop; ambiguous slots redraw until >= 2 objects
        while amb and len(scene) < 2:
            scene = sample_scene(rng, config)
        mode = "ambiguous" if amb else "normal"
        src, tgt = render_pair(scene, mode)
        out.append(TranslationExample(src, tgt, scene, mode))
    return out


def emit_dataset(
    rng: np.random.Generator,
    n: int,
    ambiguous_fraction: float,
    path: str | Path,
    config: SceneConfig = SceneConfig(),
) -> Path:
    examples = make_examples(rng, n, ambiguous_fraction, config)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")
    return path


def load_dataset(path: str | Path) -> list[TranslationExample]:
    with open(path, encoding="utf-8") as fh:
        return [TranslationExample.from_json(line) for line in fh if line.strip()]
