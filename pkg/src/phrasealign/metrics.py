"""Hallucination and utility metrics over generated text.

Concept mentions are exact (multi-word) token matches against the
lexicon, longest match first, so the templated generator makes detection
complete. Description metrics count a concept as hallucinated when the
scene does not contain it; discriminative metrics treat "yes" as the
positive class.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .lexicon import ConceptLexicon, scan_mentions
from .textcore import Vocab, detokenize, tokenize, words_of
from .world import SceneSpec, instruction_text, yes_no_question


class ChairScores(NamedTuple):
    chair_i: float
    chair_s: float
    coverage: float
    hall_rate: float
    avg_len: float


class F1Scores(NamedTuple):
    f1: float
    precision: float
    recall: float
    yes_bias: float


class Significance(NamedTuple):
    delta: float
    se: float
    adjusted_delta: float
    significant: bool


def _sentences(words: list[str]) -> list[list[str]]:
    out, cur = [], []
    for w in words:
        if w == ".":
            if cur:
                out.append(cur)
            cur = []
        else:
            cur.append(w)
    if cur:
        out.append(cur)
    return out


def chair_metrics(outputs: list[tuple[str, SceneSpec]],
                  lexicon: ConceptLexicon) -> ChairScores:
    """Instance/sentence hallucination rates plus ground-truth coverage.

    chair_i = hallucinated unique concept mentions over all mentions,
    chair_s = sentences containing a hallucinated concept over all
    sentences (both pooled across records); coverage is the per-record
    mean fraction of scene concepts mentioned. Records with no concept
    mention contribute nothing to chair_i's denominator.
    """
    if not outputs:
        raise ValueError("no outputs to score")
    names = list(lexicon.concepts)
    mention_total = hall_total = 0
    sent_total = sent_hall = 0
    bad_records = 0
    coverages = []
    lengths = []
    for text, scene in outputs:
        words = words_of(text)
        lengths.append(len(words))
        truth = set(scene.concept_names())
        mentioned = {name for _, _, name in scan_mentions(words, names)}
        hall = mentioned - truth
        mention_total += len(mentioned)
        hall_total += len(hall)
        bad_records += bool(hall)
        coverages.append(len(mentioned & truth) / len(truth))
        for sent in _sentences(words):
            sent_total += 1
            found = {name for _, _, name in scan_mentions(sent, names)}
            sent_hall += bool(found - truth)
    return ChairScores(
        chair_i=hall_total / mention_total if mention_total else 0.0,
        chair_s=sent_hall / sent_total if sent_total else 0.0,
        coverage=float(np.mean(coverages)),
        hall_rate=bad_records / len(outputs),
        avg_len=float(np.mean(lengths)),
    )


def discriminative_f1(answers: list[tuple[str, str]]) -> F1Scores:
    """Yes-positive F1 over (predicted, gold) pairs, plus yes-rate excess.

    Degenerate conventions keep sweep tables NaN-free: no positives on
    either side scores 1.0, a zero denominator against real positives
    scores 0.0.
    """
    if not answers:
        raise ValueError("no answers to score")
    for pred, gold in answers:
        if pred not in ("yes", "no") or gold not in ("yes", "no"):
            raise ValueError(f"answers must be yes/no, got ({pred!r}, {gold!r})")
    tp = sum(1 for p, g in answers if p == "yes" and g == "yes")
    pp = sum(1 for p, _ in answers if p == "yes")
    gp = sum(1 for _, g in answers if g == "yes")
    if pp == 0 and gp == 0:
        precision = recall = f1 = 1.0
    else:
        precision = tp / pp if pp else 0.0
        recall = tp / gp if gp else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return F1Scores(f1=f1, precision=precision, recall=recall,
                    yes_bias=(pp - gp) / len(answers))


def significance(m1: float, m2: float, n: int) -> Significance:
    """One-sided binomial check: is the m1 - m2 gap beyond 1.96 SE of m1?"""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if not (0.0 <= m1 <= 1.0 and 0.0 <= m2 <= 1.0):
        raise ValueError(f"rates must lie in [0, 1], got {m1}, {m2}")
    se = math.sqrt(m1 * (1.0 - m1) / n)
    delta = m1 - m2
    adjusted = delta - 1.96 * se
    return Significance(delta=delta, se=se, adjusted_delta=adjusted,
                        significant=adjusted > 0)


@dataclass
class EvalReport:
    """All metrics for one model on one test split."""

    chair_i: float
    chair_s: float
    coverage: float
    hall_rate: float
    f1: float
    precision: float
    recall: float
    yes_bias: float
    avg_len: float
    n: int

    def __post_init__(self):
        for name in ("chair_i", "chair_s", "coverage", "hall_rate",
                     "f1", "precision", "recall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} outside [0, 1]: {v}")
        if not -1.0 <= self.yes_bias <= 1.0:
            raise ValueError(f"yes_bias outside [-1, 1]: {self.yes_bias}")
        if self.precision + self.recall > 0:
            expect = 2 * self.precision * self.recall / (self.precision + self.recall)
        else:
            expect = 1.0 if self.precision == self.recall == 1.0 else 0.0
        if abs(self.f1 - expect) > 1e-12:
            raise ValueError("f1 inconsistent with precision/recall")

    def save(self, path: str, config: dict | None = None,
             seed: int | None = None) -> None:
        payload = asdict(self)
        payload["config"] = config or {}
        payload["seed"] = seed
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


def generate_descriptions(model, scenes: list[SceneSpec], vocab: Vocab,
                          style: str = "detailed",
                          max_len: int = 64) -> list[tuple[str, SceneSpec]]:
    outputs = []
    for scene in scenes:
        x = tokenize(instruction_text(scene, style), vocab)
        outputs.append((detokenize(model.generate(x, max_len=max_len), vocab), scene))
    return outputs


def answer_yesno(model, scenes: list[SceneSpec], lexicon: ConceptLexicon,
                 vocab: Vocab, seed: int = 0) -> list[tuple[str, str]]:
    """Predicted/gold answer pairs; any first token but "yes" counts as no."""
    answers = []
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, i])
        question, gold = yes_no_question(scene, lexicon, rng)
        x = tokenize(instruction_text(scene, "yesno", question), vocab)
        out = model.generate(x, max_len=2)
        pred = detokenize(out[:1], vocab) if out else ""
        answers.append(("yes" if pred == "yes" else "no", gold))
    return answers


def evaluate_model(model, scenes: list[SceneSpec], lexicon: ConceptLexicon,
                   vocab: Vocab, seed: int = 0, style: str = "detailed",
                   max_len: int = 64) -> EvalReport:
    """Full report: description metrics plus yes/no discrimination."""
    chair = chair_metrics(generate_descriptions(model, scenes, vocab,
                                                style, max_len), lexicon)
    f1 = discriminative_f1(answer_yesno(model, scenes, lexicon, vocab, seed))
    return EvalReport(
        chair_i=chair.chair_i, chair_s=chair.chair_s, coverage=chair.coverage,
        hall_rate=chair.hall_rate, f1=f1.f1, precision=f1.precision,
        recall=f1.recall, yes_bias=f1.yes_bias, avg_len=chair.avg_len,
        n=len(scenes),
    )
