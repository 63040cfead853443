"""Synthetic scene sampling with controllable co-occurrence bias, plus the
fixed caption / question / instruction templates.

A scene is a symbolic image: object names, optional per-object attribute,
optional action and location. The bias map makes P(partner present | anchor
present) equal a chosen probability exactly, which is how a
maximum-likelihood model is made to learn a spurious correlation on
purpose.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .lexicon import ConceptLexicon
from .textcore import TokenSeq, Vocab, build_vocab, tokenize

STYLES = ("one_sentence", "short", "detailed")
TASKS = STYLES + ("yesno",)

YESNO_SUFFIX = "Please answer in one word, yes or no."

# every word the fixed templates can emit, excluding concept names
_TEMPLATE_WORDS = (
    "a young in is there also and image describe the briefly detail one "
    "sentence please answer word yes or no . , ? ; :"
)


@dataclass(frozen=True)
class SceneSpec:
    id: str
    objects: tuple[str, ...]
    attributes: dict[str, str] = field(default_factory=dict)
    action: str | None = None
    location: str | None = None

    def __post_init__(self):
        if not self.objects:
            raise ValueError(f"scene {self.id}: no objects")
        if len(set(self.objects)) != len(self.objects):
            raise ValueError(f"scene {self.id}: duplicate objects")
        for key in self.attributes:
            if key not in self.objects:
                raise ValueError(f"scene {self.id}: attribute for absent object {key!r}")

    def concept_names(self) -> set[str]:
        names = set(self.objects) | set(self.attributes.values())
        if self.action:
            names.add(self.action)
        if self.location:
            names.add(self.location)
        return names

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "objects": list(self.objects),
            "attributes": dict(self.attributes),
            "action": self.action,
            "location": self.location,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            id=d["id"],
            objects=tuple(d["objects"]),
            attributes=dict(d.get("attributes") or {}),
            action=d.get("action"),
            location=d.get("location"),
        )


def save_scenes(scenes: list[SceneSpec], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in scenes:
            f.write(json.dumps(s.to_json_dict(), sort_keys=True) + "\n")


def load_scenes(path: str) -> list[SceneSpec]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(SceneSpec.from_json_dict(json.loads(line)))
    return out


@dataclass
class WorldConfig:
    lexicon: ConceptLexicon
    bias: dict[tuple[str, str], float] = field(default_factory=dict)
    size_range: tuple[int, int] = (1, 3)
    seed: int = 0
    attr_prob: float = 0.5
    action_prob: float = 0.6
    location_prob: float = 0.6

    def __post_init__(self):
        lo, hi = self.size_range
        if not (1 <= lo <= hi):
            raise ValueError(f"bad scene size range {self.size_range}")
        for (a, b), p in self.bias.items():
            if a not in self.lexicon or b not in self.lexicon:
                missing = a if a not in self.lexicon else b
                raise ValueError(f"bias references unknown concept {missing!r}")
            if a == b:
                raise ValueError(f"bias pair ({a!r}, {a!r}) is degenerate")
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"bias probability {p} outside [0, 1]")


def generate_scenes(config: WorldConfig, n: int) -> list[SceneSpec]:
    """Sample n scenes, one derived rng per index, so order is stable.

    For each bias entry ((a, b), p) the partner b is forced present with
    probability p and forced absent otherwise whenever the anchor a was
    sampled, making the conditional co-occurrence exactly p.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    lex = config.lexicon
    object_names = lex.names_of_kind("object")
    if not object_names:
        raise ValueError("lexicon has no object concepts")
    outfits = [n_ for n_ in lex.by_category.get("outfit", []) if lex.concepts[n_].kind == "attribute"]
    colors = [n_ for n_ in lex.by_category.get("color", []) if lex.concepts[n_].kind == "attribute"]
    actions = lex.names_of_kind("action")
    locations = lex.names_of_kind("location")
    lo, hi = config.size_range
    scenes = []
    for i in range(n):
        rng = np.random.default_rng([config.seed, i])
        size = min(int(rng.integers(lo, hi + 1)), len(object_names))
        picked = [object_names[j] for j in rng.choice(len(object_names), size=size, replace=False)]
        for (a, b), p in sorted(config.bias.items()):
            if a not in picked:
                continue
            if rng.random() < p:
                if b not in picked:
                    picked.append(b)
            elif b in picked:
                picked.remove(b)
        attributes = {}
        for name in picked:
            pool = outfits if lex.concepts[name].category == "person" else colors
            if pool and rng.random() < config.attr_prob:
                attributes[name] = pool[int(rng.integers(len(pool)))]
        action = None
        if actions and rng.random() < config.action_prob:
            action = actions[int(rng.integers(len(actions)))]
        location = None
        if locations and rng.random() < config.location_prob:
            location = locations[int(rng.integers(len(locations)))]
        scenes.append(
            SceneSpec(
                id=f"sc{i:06d}",
                objects=tuple(picked),
                attributes=attributes,
                action=action,
                location=location,
            )
        )
    return scenes


def _noun_phrase(scene: SceneSpec, obj: str) -> str:
    """Render an object with its attribute.

    Multi-word attributes are worn ("young man in a white shirt" — only
    person-category objects receive them at generation time), single-word
    attributes are prefixed adjectives ("black dog").
    """
    attr = scene.attributes.get(obj)
    if attr is None:
        return obj
    if " " in attr:
        return f"young {obj} in a {attr}"
    return f"{attr} {obj}"


def ground_truth_caption(scene: SceneSpec, style: str, rng=None) -> str:
    """Template-rendered description; concept words all come from the scene."""
    if style not in STYLES:
        raise ValueError(f"unknown caption style {style!r}")
    if style == "one_sentence":
        return f"a {_noun_phrase(scene, scene.objects[0])} ."
    if style == "short":
        body = " and ".join(f"a {obj}" for obj in scene.objects)
        return f"there is {body} ."
    head = f"a {_noun_phrase(scene, scene.objects[0])}"
    if scene.action:
        head += f" is {scene.action}"
    if scene.location:
        head += f" in a {scene.location}"
    sentences = [head + " ."]
    for obj in scene.objects[1:]:
        sentences.append(f"there is also a {_noun_phrase(scene, obj)} .")
    return " ".join(sentences)


def yes_no_question(
    scene: SceneSpec, lexicon: ConceptLexicon, rng: np.random.Generator,
    p_yes: float = 0.5,
) -> tuple[str, str]:
    """Presence question; negatives prefer co-occurrence partners.

    Asking about a plausible-but-absent object is what makes yes-bias
    measurable: a model that has learned the co-occurrence will answer yes.
    p_yes skews the gold-answer rate; an imbalanced QA corpus is how the
    base model acquires an answer prior in the first place.
    """
    if not (0.0 <= p_yes <= 1.0):
        raise ValueError(f"p_yes {p_yes} outside [0, 1]")
    present = set(scene.concept_names())
    if rng.random() < p_yes:
        name = scene.objects[int(rng.integers(len(scene.objects)))]
        answer = "yes"
    else:
        candidates = [n for n in lexicon.names_of_kind("object") if n not in present]
        if not candidates:
            raise ValueError(f"scene {scene.id}: no absent object to ask about")
        scored = []
        for n in candidates:
            partner_counts = lexicon.cooccur.get(n, {})
            scored.append(max((partner_counts.get(p, 0) for p in present), default=0))
        top = max(scored)
        tied = [n for n, s in zip(candidates, scored) if s == top]
        name = tied[int(rng.integers(len(tied)))]
        answer = "no"
    question = f"is there a {name} in the image? {YESNO_SUFFIX}"
    return question, answer


def scene_prefix(scene: SceneSpec) -> str:
    """Symbolic stand-in for the image: the conditioning side of a record."""
    segments = []
    for obj in scene.objects:
        attr = scene.attributes.get(obj)
        segments.append(f"{attr} {obj}" if attr else obj)
    if scene.action:
        segments.append(scene.action)
    if scene.location:
        segments.append(scene.location)
    return "image : " + " ; ".join(segments)


def instruction_text(scene: SceneSpec, task: str, question: str | None = None) -> str:
    if task == "one_sentence":
        ask = "describe the image in one sentence ."
    elif task == "short":
        ask = "describe the image briefly ."
    elif task == "detailed":
        ask = "describe the image in detail ."
    elif task == "yesno":
        if not question:
            raise ValueError("yesno instruction needs the question text")
        ask = question
    else:
        raise ValueError(f"unknown task {task!r}")
    return f"{scene_prefix(scene)} {ask}"


def standard_vocab(lexicon: ConceptLexicon) -> Vocab:
    """Vocabulary from the fixed template inventory plus the lexicon.

    Derived from the lexicon alone (never from a corpus) so that any two
    stages handed the same lexicon agree on every token id.
    """
    return build_vocab([_TEMPLATE_WORDS] + list(lexicon.concepts))


def caption_corpus(
    scenes: list[SceneSpec], vocab: Vocab, styles: str = "all"
) -> list[tuple[TokenSeq, TokenSeq]]:
    """Tokenized (instruction, caption) pairs for likelihood training."""
    if styles == "all":
        chosen = [(s, style) for s in scenes for style in STYLES]
    elif styles == "cycle":
        chosen = [(s, STYLES[i % len(STYLES)]) for i, s in enumerate(scenes)]
    else:
        raise ValueError(f"styles must be all or cycle, got {styles!r}")
    return [
        (tokenize(instruction_text(s, style), vocab),
         tokenize(ground_truth_caption(s, style), vocab))
        for s, style in chosen
    ]


def presence_qa_corpus(
    scenes: list[SceneSpec],
    lexicon: ConceptLexicon,
    vocab: Vocab,
    p_yes: float = 0.5,
    seed: int = 0,
) -> list[tuple[TokenSeq, TokenSeq]]:
    """One tokenized (question, answer) pair per scene.

    Training the base on p_yes > 0.5 plants the answer prior that shows up
    later as yes-bias on balanced questions.
    """
    pairs = []
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, i])
        question, answer = yes_no_question(scene, lexicon, rng, p_yes=p_yes)
        pairs.append((tokenize(instruction_text(scene, "yesno", question), vocab),
                      tokenize(answer, vocab)))
    return pairs
