"""Concept inventory, co-occurrence statistics, and replacement sampling.

The lexicon is the universe of things a scene can contain and the source
of hallucinated replacements: closed-set sampling confuses a concept with
its most frequent co-occurrence partners, open-set sampling swaps it for
another member of the same category.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

KINDS = ("object", "attribute", "action", "location")


@dataclass(frozen=True)
class Concept:
    name: str
    kind: str
    category: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("concept name must be nonempty")
        if self.kind not in KINDS:
            raise ValueError(f"unknown concept kind {self.kind!r}")
        if not self.category:
            raise ValueError(f"concept {self.name!r} has empty category")


class ConceptLexicon:
    """Immutable concept set with per-category lists and co-occurrence counts."""

    def __init__(self, concepts: list[Concept], cooccur: dict[str, dict[str, int]] | None = None):
        self.concepts: dict[str, Concept] = {}
        for c in concepts:
            if c.name in self.concepts:
                raise ValueError(f"duplicate concept {c.name!r}")
            self.concepts[c.name] = c
        self.by_category: dict[str, list[str]] = {}
        for c in concepts:
            self.by_category.setdefault(c.category, []).append(c.name)
        self.cooccur: dict[str, Counter] = {}
        for a, partners in (cooccur or {}).items():
            if a not in self.concepts:
                raise ValueError(f"cooccur key {a!r} not in lexicon")
            for b, count in partners.items():
                if b not in self.concepts:
                    raise ValueError(f"cooccur partner {b!r} not in lexicon")
                if b == a:
                    raise ValueError(f"concept {a!r} co-occurs with itself")
                if count < 0:
                    raise ValueError("negative co-occurrence count")
            self.cooccur[a] = Counter(partners)

    def __contains__(self, name: str) -> bool:
        return name in self.concepts

    def names_of_kind(self, kind: str) -> list[str]:
        return [c.name for c in self.concepts.values() if c.kind == kind]

    def save(self, path: str) -> None:
        payload = {
            "concepts": [
                {"name": c.name, "kind": c.kind, "category": c.category}
                for c in self.concepts.values()
            ],
            "cooccur": {a: dict(sorted(m.items())) for a, m in sorted(self.cooccur.items())},
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "ConceptLexicon":
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        concepts = [Concept(d["name"], d["kind"], d["category"]) for d in payload["concepts"]]
        return cls(concepts, payload.get("cooccur"))


def build_cooccurrence(scenes, lexicon: ConceptLexicon, min_count: int = 1) -> ConceptLexicon:
    """Count, for every concept pair, the scenes containing both.

    Returns a new lexicon with symmetric cooccur filled in; pairs seen
    fewer than min_count times are dropped.
    """
    if not scenes:
        raise ValueError("no scenes to count over")
    counts: dict[str, Counter] = {}
    for scene in scenes:
        present = sorted(scene.concept_names())
        for name in present:
            if name not in lexicon:
                raise ValueError(f"scene {scene.id} references unknown concept {name!r}")
        for i, a in enumerate(present):
            for b in present[i + 1 :]:
                if a == b:
                    continue
                counts.setdefault(a, Counter())[b] += 1
                counts.setdefault(b, Counter())[a] += 1
    cooccur = {
        a: {b: n for b, n in m.items() if n >= min_count}
        for a, m in counts.items()
    }
    cooccur = {a: m for a, m in cooccur.items() if m}
    return ConceptLexicon(list(lexicon.concepts.values()), cooccur)


def _pick(candidates: list[str], rng: np.random.Generator) -> str:
    return candidates[int(rng.integers(len(candidates)))]


def _category_candidates(lexicon: ConceptLexicon, target: Concept, forbidden: set[str]) -> list[str]:
    return [
        n
        for n in lexicon.by_category.get(target.category, [])
        if n != target.name
        and n not in forbidden
        and lexicon.concepts[n].kind == target.kind
    ]


def sample_closed_set_replacement(
    lexicon: ConceptLexicon, target: Concept, forbidden: set[str], rng: np.random.Generator
) -> Concept:
    """Most frequent co-occurrence partner of the target, kind-preserving.

    Ties at the top count are broken by the rng; if no co-occurrence
    candidate is legal, falls back to same-category sampling.
    """
    partners = lexicon.cooccur.get(target.name, Counter())
    legal = [
        (n, c)
        for n, c in partners.items()
        if n != target.name
        and n not in forbidden
        and lexicon.concepts[n].kind == target.kind
    ]
    if legal:
        top = max(c for _, c in legal)
        tied = sorted(n for n, c in legal if c == top)
        return lexicon.concepts[_pick(tied, rng)]
    fallback = _category_candidates(lexicon, target, forbidden)
    if not fallback:
        raise ValueError(f"no replacement for {target.name}")
    return lexicon.concepts[_pick(fallback, rng)]


def sample_open_set_replacement(
    lexicon: ConceptLexicon, target: Concept, forbidden: set[str], rng: np.random.Generator
) -> Concept:
    """Uniform same-category swap, excluding the target and forbidden names."""
    candidates = _category_candidates(lexicon, target, forbidden)
    if not candidates:
        raise ValueError(f"no replacement for {target.name}")
    return lexicon.concepts[_pick(candidates, rng)]


def scan_mentions(words: list[str], names) -> list[tuple[int, int, str]]:
    """Locate concept-name phrases in a word list, left to right.

    At each position the longest matching name wins, so "white shirt"
    shadows "white"; matches never overlap. Returns (start, end, name)
    triples with half-open word indices.
    """
    phrases = {}
    for name in names:
        parts = tuple(name.split())
        phrases.setdefault(parts[0], []).append(parts)
    for options in phrases.values():
        options.sort(key=len, reverse=True)
    found = []
    i = 0
    n = len(words)
    while i < n:
        hit = None
        for parts in phrases.get(words[i], ()):
            if tuple(words[i : i + len(parts)]) == parts:
                hit = parts
                break
        if hit:
            found.append((i, i + len(hit), " ".join(hit)))
            i += len(hit)
        else:
            i += 1
    return found


def default_lexicon() -> ConceptLexicon:
    """Built-in desk-scale inventory used by the CLI and the experiments."""
    spec = [
        # objects
        ("fork", "object", "utensil"),
        ("knife", "object", "utensil"),
        ("spoon", "object", "utensil"),
        ("toothpick", "object", "utensil"),
        ("ladle", "object", "utensil"),
        ("whisk", "object", "utensil"),
        ("dog", "object", "animal"),
        ("cat", "object", "animal"),
        ("bird", "object", "animal"),
        ("horse", "object", "animal"),
        ("table", "object", "furniture"),
        ("chair", "object", "furniture"),
        ("bench", "object", "furniture"),
        ("shelf", "object", "furniture"),
        ("apple", "object", "food"),
        ("sandwich", "object", "food"),
        ("pizza", "object", "food"),
        ("salad", "object", "food"),
        ("man", "object", "person"),
        ("woman", "object", "person"),
        ("child", "object", "person"),
        # attributes
        ("red", "attribute", "color"),
        ("blue", "attribute", "color"),
        ("green", "attribute", "color"),
        ("black", "attribute", "color"),
        ("white", "attribute", "color"),
        ("white shirt", "attribute", "outfit"),
        ("black dress", "attribute", "outfit"),
        ("red sneakers", "attribute", "outfit"),
        ("green scarf", "attribute", "outfit"),
        # actions
        ("skateboarding", "action", "sport"),
        ("rollerblading", "action", "sport"),
        ("surfing", "action", "sport"),
        ("skiing", "action", "sport"),
        # locations
        ("skate park", "location", "venue"),
        ("roller rink", "location", "venue"),
        ("beach", "location", "venue"),
        ("garden", "location", "venue"),
    ]
    return ConceptLexicon([Concept(n, k, c) for n, k, c in spec])
