"""Contrastive data construction: hallucinated twins of correct responses.

A training record pairs a ground-truth response with a minimally edited
hallucinated version and the exact token spans where they differ.
Descriptions are corrupted by swapping selected scene concepts for
lexicon-sampled replacements; yes/no answers are corrupted by inversion.
Everything outside the recorded spans stays token-identical, which is the
property the phrase-level loss depends on.
"""

from __future__ import annotations

import difflib
import json
import time
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .lexicon import (
    ConceptLexicon,
    sample_closed_set_replacement,
    sample_open_set_replacement,
    scan_mentions,
)
from .textcore import TokenSeq, Vocab, detokenize, tokenize, words_of
from .world import (
    STYLES,
    SceneSpec,
    ground_truth_caption,
    instruction_text,
    yes_no_question,
)

TASK_ORDER = ("one_sentence", "short", "detailed", "yesno")

# default number of concepts to corrupt, per task
DEFAULT_K = {"one_sentence": 1, "short": 2, "detailed": None}  # None = all


@dataclass(frozen=True)
class AlignedPair:
    c_start: int
    c_end: int
    h_start: int
    h_end: int
    c_text: str
    h_text: str

    def __post_init__(self):
        if not (0 <= self.c_start < self.c_end) or not (0 <= self.h_start < self.h_end):
            raise ValueError(f"invalid pair spans {self}")
        if self.c_text == self.h_text:
            raise ValueError(f"pair texts identical: {self.c_text!r}")


@dataclass(frozen=True)
class TrainingRecord:
    id: str
    task: str
    instruction: TokenSeq
    correct: TokenSeq
    hallucinated: TokenSeq
    pairs: tuple[AlignedPair, ...]
    scene_id: str

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "task": self.task,
            "instruction": list(self.instruction),
            "correct": list(self.correct),
            "hallucinated": list(self.hallucinated),
            "pairs": [
                {
                    "c_start": p.c_start,
                    "c_end": p.c_end,
                    "h_start": p.h_start,
                    "h_end": p.h_end,
                    "c_text": p.c_text,
                    "h_text": p.h_text,
                }
                for p in self.pairs
            ],
            "scene_id": self.scene_id,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainingRecord":
        return cls(
            id=d["id"],
            task=d["task"],
            instruction=list(d["instruction"]),
            correct=list(d["correct"]),
            hallucinated=list(d["hallucinated"]),
            pairs=tuple(
                AlignedPair(
                    p["c_start"], p["c_end"], p["h_start"], p["h_end"],
                    p["c_text"], p["h_text"],
                )
                for p in d["pairs"]
            ),
            scene_id=d["scene_id"],
        )


@dataclass(frozen=True)
class ReferenceRecord:
    id: str
    instruction: TokenSeq
    response: TokenSeq

    def __post_init__(self):
        if not self.response:
            raise ValueError(f"reference record {self.id}: empty response")

    def to_json_dict(self) -> dict:
        return {"id": self.id, "instruction": list(self.instruction), "response": list(self.response)}

    @classmethod
    def from_json_dict(cls, d: dict) -> "ReferenceRecord":
        return cls(id=d["id"], instruction=list(d["instruction"]), response=list(d["response"]))


def validate_record(
    record: TrainingRecord,
    scene_concepts: set[str],
    vocab: Vocab,
    lexicon: ConceptLexicon | None = None,
) -> None:
    """Raise with a diagnostic if any record invariant is broken."""
    rid = record.id
    if not record.pairs:
        raise ValueError(f"{rid}: no aligned pairs")
    if not record.correct or not record.hallucinated:
        raise ValueError(f"{rid}: empty response")
    prev_c = prev_h = 0
    for p in record.pairs:
        if p.c_start < prev_c or p.h_start < prev_h:
            raise ValueError(f"{rid}: pairs unsorted or overlapping at {p}")
        if p.c_end > len(record.correct) or p.h_end > len(record.hallucinated):
            raise ValueError(f"{rid}: span exceeds response length at {p}")
        if detokenize(record.correct[p.c_start : p.c_end], vocab) != p.c_text:
            raise ValueError(f"{rid}: correct span text mismatch at {p}")
        if detokenize(record.hallucinated[p.h_start : p.h_end], vocab) != p.h_text:
            raise ValueError(f"{rid}: hallucinated span text mismatch at {p}")
        prev_c, prev_h = p.c_end, p.h_end
    out_c = _outside_spans(record.correct, [(p.c_start, p.c_end) for p in record.pairs])
    out_h = _outside_spans(record.hallucinated, [(p.h_start, p.h_end) for p in record.pairs])
    if out_c != out_h:
        raise ValueError(f"{rid}: tokens outside paired spans differ")
    for p in record.pairs:
        if p.h_text in scene_concepts:
            raise ValueError(f"{rid}: hallucinated text {p.h_text!r} is in the scene")
        if lexicon is not None:
            for _, _, name in scan_mentions(p.h_text.split(), lexicon.concepts):
                if name in scene_concepts:
                    raise ValueError(
                        f"{rid}: hallucinated span mentions scene concept {name!r}"
                    )


def _outside_spans(seq: TokenSeq, spans: list[tuple[int, int]]) -> TokenSeq:
    out = []
    cursor = 0
    for s, e in spans:
        out.extend(seq[cursor:s])
        cursor = e
    out.extend(seq[cursor:])
    return out


def select_replacement_targets(
    scene: SceneSpec,
    caption: str,
    task: str,
    k_targets: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[str]:
    """Pick which mentioned scene concepts to corrupt, in mention order."""
    rng = rng if rng is not None else np.random.default_rng(0)
    words = words_of(caption)
    mentions = scan_mentions(words, sorted(scene.concept_names()))
    seen: list[str] = []
    for _, _, name in mentions:
        if name not in seen:
            seen.append(name)
    if not seen:
        raise ValueError(f"caption for scene {scene.id} mentions no scene concept")
    if k_targets is None:
        k_default = DEFAULT_K.get(task)
        k_targets = len(seen) if k_default is None else min(k_default, len(seen))
    if not (1 <= k_targets <= len(seen)):
        raise ValueError(
            f"k_targets={k_targets} but caption has {len(seen)} replaceable concepts"
        )
    if k_targets == len(seen):
        return list(seen)
    idx = sorted(rng.choice(len(seen), size=k_targets, replace=False))
    return [seen[i] for i in idx]


def augment_description(
    scene: SceneSpec,
    caption: str,
    task: str,
    lexicon: ConceptLexicon,
    vocab: Vocab,
    mode: str = "open",
    k_targets: int | None = None,
    rng: np.random.Generator | None = None,
    record_id: str = "rec",
) -> TrainingRecord:
    """Swap k scene concepts in the caption for sampled replacements.

    Every occurrence of a selected concept is replaced (consistently, by
    one sampled replacement per concept); span bookkeeping absorbs word
    count differences. Longer concept phrases shadow embedded shorter
    ones, so a selected "white" never fires inside "white shirt".
    """
    if mode not in ("open", "closed"):
        raise ValueError(f"unknown augmentation mode {mode!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    words = words_of(caption)
    scene_names = scene.concept_names()
    mentions = scan_mentions(words, sorted(scene_names))
    targets = select_replacement_targets(scene, caption, task, k_targets, rng)
    sampler = sample_open_set_replacement if mode == "open" else sample_closed_set_replacement
    forbidden = set(scene_names)
    replacement: dict[str, str] = {}
    for name in targets:
        got = sampler(lexicon, lexicon.concepts[name], forbidden, rng)
        replacement[name] = got.name
        forbidden.add(got.name)
    h_words: list[str] = []
    pairs: list[AlignedPair] = []
    cursor = 0
    for start, end, name in mentions:
        h_words.extend(words[cursor:start])
        if name in replacement:
            r_words = replacement[name].split()
            pairs.append(
                AlignedPair(
                    c_start=start,
                    c_end=end,
                    h_start=len(h_words),
                    h_end=len(h_words) + len(r_words),
                    c_text=name,
                    h_text=replacement[name],
                )
            )
            h_words.extend(r_words)
        else:
            h_words.extend(words[start:end])
        cursor = end
    h_words.extend(words[cursor:])
    record = TrainingRecord(
        id=record_id,
        task=task,
        instruction=tokenize(instruction_text(scene, task), vocab),
        correct=tokenize(caption, vocab),
        hallucinated=[vocab.id(w) for w in h_words],
        pairs=tuple(pairs),
        scene_id=scene.id,
    )
    validate_record(record, scene_names, vocab, lexicon)
    return record


def invert_answer(answer: str) -> str:
    table = {"yes": "no", "no": "yes"}
    if answer not in table:
        raise ValueError(f"answer must be yes or no, got {answer!r}")
    return table[answer]


def augment_yesno(
    scene: SceneSpec,
    question: str,
    answer: str,
    vocab: Vocab,
    rng: np.random.Generator | None = None,
    record_id: str = "rec",
) -> TrainingRecord:
    """Corrupt a one-word answer by inversion; one pair spanning the token."""
    wrong = invert_answer(answer)
    record = TrainingRecord(
        id=record_id,
        task="yesno",
        instruction=tokenize(instruction_text(scene, "yesno", question), vocab),
        correct=[vocab.id(answer)],
        hallucinated=[vocab.id(wrong)],
        pairs=(AlignedPair(0, 1, 0, 1, answer, wrong),),
        scene_id=scene.id,
    )
    validate_record(record, scene.concept_names(), vocab)
    return record


def build_dataset(
    scenes: list[SceneSpec],
    lexicon: ConceptLexicon,
    vocab: Vocab,
    mix: dict[str, float],
    seed: int = 0,
    mode: str = "open",
    reference_scenes: list[SceneSpec] | None = None,
    n_reference: int | None = None,
    rewriter=None,
) -> tuple[list[TrainingRecord], list[ReferenceRecord]]:
    """Build the contrastive training set and the regularization set.

    Per-task record counts are round(len(scenes) * proportion); scenes are
    reused cyclically. Reference responses are correct captions of the
    reference scenes (by default the same scenes the training records come
    from, the "seen data" choice).
    """
    if not scenes:
        raise ValueError("empty scene list")
    for task in mix:
        if task not in TASK_ORDER:
            raise ValueError(f"unknown task {task!r} in mix")
    if any(p < 0 for p in mix.values()) or sum(mix.values()) <= 0:
        raise ValueError("mix proportions must be nonnegative and sum > 0")
    records: list[TrainingRecord] = []
    cursor = 0
    idx = 0
    for task in TASK_ORDER:
        p = mix.get(task, 0.0)
        count = round(len(scenes) * p)
        for _ in range(count):
            rng = np.random.default_rng([seed, idx])
            record = None
            last_err = None
            for _attempt in range(len(scenes)):
                scene = scenes[cursor % len(scenes)]
                cursor += 1
                try:
                    if task == "yesno":
                        q, a = yes_no_question(scene, lexicon, rng)
                        record = augment_yesno(
                            scene, q, a, vocab, rng, record_id=f"rec{idx:06d}"
                        )
                    elif rewriter is not None:
                        caption = ground_truth_caption(scene, task, rng)
                        record = rewriter(scene, caption, task, rng, f"rec{idx:06d}")
                    else:
                        caption = ground_truth_caption(scene, task, rng)
                        record = augment_description(
                            scene, caption, task, lexicon, vocab,
                            mode=mode, rng=rng, record_id=f"rec{idx:06d}",
                        )
                    break
                except ValueError as e:
                    last_err = e
                    continue
            if record is None:
                raise ValueError(
                    f"could not build a {task} record from any scene"
                    f" (last failure: {last_err})"
                )
            records.append(record)
            idx += 1
    ref_scenes = reference_scenes if reference_scenes is not None else scenes
    n_ref = len(ref_scenes) if n_reference is None else n_reference
    reference: list[ReferenceRecord] = []
    for j in range(n_ref):
        scene = ref_scenes[j % len(ref_scenes)]
        style = STYLES[j % len(STYLES)]
        reference.append(
            ReferenceRecord(
                id=f"ref{j:06d}",
                instruction=tokenize(instruction_text(scene, style), vocab),
                response=tokenize(ground_truth_caption(scene, style), vocab),
            )
        )
    return records, reference


def save_training_records(records: list[TrainingRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json_dict(), sort_keys=True) + "\n")


def load_training_records(path: str) -> list[TrainingRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(TrainingRecord.from_json_dict(json.loads(line)))
    return out


def save_reference_records(records: list[ReferenceRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r.to_json_dict(), sort_keys=True) + "\n")


def load_reference_records(path: str) -> list[ReferenceRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(ReferenceRecord.from_json_dict(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# optional external LLM rewrite path

PROMPT_TEMPLATES = {
    "correct_desc": (
        "Please describe an image that contains the following: {concepts}."
    ),
    "closed_set": (
        "Please rewrite the given text by replacing the mentioned words with "
        "the provided replacement words, keeping the overall structure intact. "
        "Text: {text} Replace: {targets} with {replacements}. After rewriting, "
        "make sure to NOT include the following words: {forbidden}."
    ),
    "open_set": (
        "Please rewrite the given text by replacing the mentioned words with "
        "other words of similar types or categories, keeping the overall "
        "structure intact. Text: {text} Replace: {targets}. After rewriting, "
        "make sure to NOT include the following words: {forbidden}."
    ),
}


class RetriableEndpointError(RuntimeError):
    """The endpoint could not be reached; the call may be retried later."""


class CompletionRejectedError(ValueError):
    """The completion violated a record invariant and was discarded."""


def render_prompt(template_id: str, fill: dict) -> str:
    if template_id not in PROMPT_TEMPLATES:
        raise ValueError(f"unknown template {template_id!r}")
    try:
        return PROMPT_TEMPLATES[template_id].format(**fill)
    except KeyError as e:
        raise ValueError(f"template {template_id!r} missing fill key {e.args[0]!r}")


def external_llm_rewrite(
    endpoint: str,
    template_id: str,
    fill: dict,
    attempts: int = 3,
    timeout: float = 10.0,
) -> str:
    """POST {template_id, fill} to the endpoint and return its raw text.

    The caller must re-validate whatever comes back; nothing from the wire
    is trusted. Network failures raise RetriableEndpointError after the
    configured number of attempts.
    """
    render_prompt(template_id, fill)  # fail fast on bad template or fill
    payload = json.dumps({"template_id": template_id, "fill": fill}).encode("utf-8")
    last = None
    for attempt in range(attempts):
        try:
            req = urllib.request.Request(
                endpoint, data=payload, headers={"Content-Type": "application/json"}
            )
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
            if "text" not in body:
                raise RetriableEndpointError(f"endpoint reply missing 'text': {body}")
            return str(body["text"])
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as e:
            last = e
            if attempt + 1 < attempts:
                time.sleep(0.05 * (attempt + 1))
    raise RetriableEndpointError(f"endpoint unreachable after {attempts} attempts: {last}")


def record_from_llm_completion(
    scene: SceneSpec,
    caption: str,
    task: str,
    targets: list[str],
    completion: str,
    lexicon: ConceptLexicon,
    vocab: Vocab,
    record_id: str = "llm",
) -> TrainingRecord:
    """Align an external rewrite against the caption and validate it.

    The completion must differ from the caption only by contiguous
    replacements (no insertions or deletions), must not retain any target
    phrase, and must pass every TrainingRecord invariant; otherwise it is
    rejected with a diagnostic.
    """
    words = words_of(caption)
    h_words = words_of(completion)
    for t in targets:
        t_parts = t.split()
        for i in range(len(h_words) - len(t_parts) + 1):
            if h_words[i : i + len(t_parts)] == t_parts:
                raise CompletionRejectedError(
                    f"completion still contains forbidden phrase {t!r}"
                )
    pairs = []
    for tag, i1, i2, j1, j2 in difflib.SequenceMatcher(
        None, words, h_words, autojunk=False
    ).get_opcodes():
        if tag == "equal":
            continue
        if tag != "replace":
            raise CompletionRejectedError(
                f"completion does not preserve structure ({tag} at words {i1}:{i2})"
            )
        pairs.append(
            AlignedPair(
                c_start=i1, c_end=i2, h_start=j1, h_end=j2,
                c_text=" ".join(words[i1:i2]), h_text=" ".join(h_words[j1:j2]),
            )
        )
    if not pairs:
        raise CompletionRejectedError("completion is identical to the caption")
    got = sorted(p.c_text for p in pairs)
    if got != sorted(targets):
        raise CompletionRejectedError(
            f"completion replaced {got} instead of the requested {sorted(targets)}"
        )
    record = TrainingRecord(
        id=record_id,
        task=task,
        instruction=tokenize(instruction_text(scene, task), vocab),
        correct=tokenize(caption, vocab),
        hallucinated=[vocab.id(w) for w in h_words],
        pairs=tuple(pairs),
        scene_id=scene.id,
    )
    try:
        validate_record(record, scene.concept_names(), vocab, lexicon)
    except ValueError as e:
        raise CompletionRejectedError(str(e))
    return record
