"""Scene-graph consistency reward between a sentence graph and a scene graph.

Each sentence triple is scored against its best-matching scene triple, where
a triple pair scores the mean of the head, relation and tail similarities.
The reward is the average best-match score over the sentence triples, so it
lies in [0, 1] whenever symbol similarities do.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .world import COLORS, EXISTS, HAS_COLOR, RELATIONS, SHAPES, Triple

SYMBOLS = SHAPES + COLORS + (HAS_COLOR, EXISTS) + RELATIONS
RELATION_SYMBOLS = (HAS_COLOR, EXISTS) + RELATIONS


class UnknownSymbolError(KeyError):
    pass


def strip_instance(symbol: str) -> str:
    """``circle#2`` -> ``circle``."""
    return symbol.split("#", 1)[0]


@dataclass
class SymbolLexicon:
    """Symmetric similarity table; 1 on the diagonal, 0 off it unless listed."""

    symbols: frozenset[str] = frozenset(SYMBOLS)
    table: dict[tuple[str, str], float] = field(default_factory=dict)

    def __post_init__(self):
        clean: dict[tuple[str, str], float] = {}
        for (a, b), val in self.table.items():
            for s in (a, b):
                if s not in self.symbols:
                    raise UnknownSymbolError(s)
            val = min(max(float(val), 0.0), 1.0)
            key = (a, b) if a <= b else (b, a)
            if key in clean and clean[key] != val:
                raise ValueError(f"asymmetric similarity for {key}: {clean[key]} vs {val}")
            if a == b and val != 1.0:
                raise ValueError(f"sim({a},{a}) must be 1")
            clean[key] = val
        self.table = clean

    def sim(self, a: str, b: str) -> float:
        if a not in self.symbols:
            raise UnknownSymbolError(a)
        if b not in self.symbols:
            raise UnknownSymbolError(b)
        if a == b:
            return 1.0
        return self.table.get((a, b) if a <= b else (b, a), 0.0)

    def to_text(self) -> str:
        return "".join(f"{a} {b} {v!r}\n" for (a, b), v in sorted(self.table.items()))


def strict_lexicon() -> SymbolLexicon:
    return SymbolLexicon()


def soft_lexicon() -> SymbolLexicon:
    table = {}
    for i, a in enumerate(RELATION_SYMBOLS):
        for b in RELATION_SYMBOLS[i + 1 :]:
            table[(a, b)] = 0.2
    return SymbolLexicon(table=table)


def read_lexicon(path: str | Path, symbols: Iterable[str] = SYMBOLS) -> SymbolLexicon:
    """Parse ``symbol_a symbol_b value`` lines; blank lines and ``#`` comments skipped."""
    table = {}
    syms = set(symbols)
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'symbol_a symbol_b value'")
        a, b, v = parts
        syms.update((a, b))
        table[(a, b)] = float(v)
    return SymbolLexicon(frozenset(syms), table)


def get_lexicon(name: str) -> SymbolLexicon:
    if name == "strict":
        return strict_lexicon()
    if name == "soft":
        return soft_lexicon()
    return read_lexicon(name)


def sim_symbols(a: str, b: str, lex: SymbolLexicon) -> float:
    return lex.sim(a, b)


def _component_sum(l: Triple, v: Triple, lex: SymbolLexicon) -> float:
    return (
        lex.sim(strip_instance(l.head), strip_instance(v.head))
        + lex.sim(l.relation, v.relation)
        + lex.sim(strip_instance(l.tail), strip_instance(v.tail))
    )


def sim_triple(l: Triple, v: Triple, lex: SymbolLexicon) -> float:
    return _component_sum(l, v, lex) / 3.0


def _best_sum(l: Triple, vsg: Sequence[Triple], lex: SymbolLexicon) -> float:
    return max((_component_sum(l, v, lex) for v in vsg), default=0.0)


def score_triple(l: Triple, vsg: Iterable[Triple], lex: SymbolLexicon) -> float:
    """Best match of one sentence triple against the scene graph (0 if it is empty)."""
    return _best_sum(l, list(vsg), lex) / 3.0


def reward(lsg: Iterable[Triple], vsg: Iterable[Triple], lex: SymbolLexicon) -> float:
    lsg = list(lsg)
    if not lsg:
        raise ValueError("reward needs a non-empty sentence graph")
    vsg = list(vsg)
    # component sums stay unscaled until one final division; fsum makes the
    # total independent of set iteration order, and 5/6-style values exact
    return math.fsum(_best_sum(l, vsg, lex) for l in lsg) / (3 * len(lsg))


# ---------------------------------------------------------------------------
# graph files: one JSON list of [head, relation, tail] per line


def graph_from_json(line: str) -> frozenset[Triple]:
    return frozenset(Triple(*t) for t in json.loads(line))


def graph_to_json(graph: Iterable[Triple]) -> str:
    return json.dumps([[t.head, t.relation, t.tail] for t in sorted(graph)])


def read_graphs(path: str | Path) -> list[frozenset[Triple]]:
    with open(path, encoding="utf-8") as fh:
        return [graph_from_json(line) for line in fh if line.strip()]


def score_files(lsg_path: str | Path, vsg_path: str | Path, lex: SymbolLexicon) -> str:
    """CSV of per-pair rewards for two parallel graph files."""
    lsgs, vsgs = read_graphs(lsg_path), read_graphs(vsg_path)
    if len(lsgs) != len(vsgs):
        raise ValueError(f"graph files differ in length: {len(lsgs)} vs {len(vsgs)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "reward"])
    for i, (l, v) in enumerate(zip(lsgs, vsgs)):
        w.writerow([i, repr(reward(l, v, lex))])
    return buf.getvalue()


def symbol_bag(graph: Sequence[Triple] | frozenset[Triple]) -> dict[str, int]:
    bag: dict[str, int] = {}
    for t in graph:
        for s in (strip_instance(t.head), t.relation, strip_instance(t.tail)):
            bag[s] = bag.get(s, 0) + 1
    return bag
