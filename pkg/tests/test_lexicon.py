import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phrasealign.lexicon import (
    Concept,
    ConceptLexicon,
    build_cooccurrence,
    default_lexicon,
    sample_closed_set_replacement,
    sample_open_set_replacement,
)
from phrasealign.world import SceneSpec


def utensils(*names):
    return ConceptLexicon([Concept(n, "object", "utensil") for n in names])


def scene(i, *objects):
    return SceneSpec(id=f"s{i}", objects=tuple(objects))


def test_cooccurrence_direct_count():
    lex = utensils("fork", "knife", "spoon")
    out = build_cooccurrence([scene(0, "fork", "knife"), scene(1, "fork", "spoon")], lex)
    assert out.cooccur["fork"] == {"knife": 1, "spoon": 1}


def test_cooccurrence_single_object_scenes_empty():
    lex = utensils("fork", "knife")
    out = build_cooccurrence([scene(0, "fork"), scene(1, "knife")], lex)
    assert out.cooccur == {}


def test_cooccurrence_symmetric_counts():
    lex = utensils("a", "b")
    out = build_cooccurrence([scene(0, "a", "b"), scene(1, "a", "b")], lex)
    assert out.cooccur["a"]["b"] == 2
    assert out.cooccur["b"]["a"] == 2


def test_cooccurrence_unknown_concept_named():
    lex = utensils("fork")
    with pytest.raises(ValueError, match="ghost"):
        build_cooccurrence([scene(0, "fork", "ghost")], lex)


def test_closed_set_prefers_highest_count():
    lex = ConceptLexicon(
        [Concept(n, "object", "utensil") for n in ("fork", "toothpick", "spoon")],
        {"fork": {"toothpick": 5, "spoon": 1}},
    )
    rng = np.random.default_rng(0)
    got = sample_closed_set_replacement(lex, lex.concepts["fork"], {"spoon"}, rng)
    assert got.name == "toothpick"


def test_closed_set_falls_back_to_category():
    lex = utensils("fork", "ladle")
    rng = np.random.default_rng(0)
    got = sample_closed_set_replacement(lex, lex.concepts["fork"], {"fork"}, rng)
    assert got.name == "ladle"


def test_no_replacement_error():
    lex = utensils("fork", "ladle")
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="no replacement for fork"):
        sample_closed_set_replacement(lex, lex.concepts["fork"], {"fork", "ladle"}, rng)


def test_open_set_uniform_same_category():
    lex = ConceptLexicon([Concept(n, "object", "person") for n in ("man", "woman", "child")])
    rng = np.random.default_rng(7)
    first = sample_open_set_replacement(lex, lex.concepts["man"], set(), rng)
    assert first.name in {"woman", "child"}
    again = sample_open_set_replacement(
        lex, lex.concepts["man"], set(), np.random.default_rng(7)
    )
    assert again.name == first.name


def test_open_set_singleton_category_errors():
    lex = ConceptLexicon([Concept("man", "object", "person")])
    with pytest.raises(ValueError, match="no replacement"):
        sample_open_set_replacement(lex, lex.concepts["man"], set(), np.random.default_rng(0))


def test_skateboarding_to_rollerblading():
    lex = ConceptLexicon(
        [Concept("skateboarding", "action", "sport"), Concept("rollerblading", "action", "sport")]
    )
    got = sample_open_set_replacement(
        lex, lex.concepts["skateboarding"], set(), np.random.default_rng(0)
    )
    assert got.name == "rollerblading"


def test_kind_preserved_even_when_category_mixed():
    lex = ConceptLexicon(
        [
            Concept("surfing", "action", "beachlife"),
            Concept("sandcastle", "object", "beachlife"),
            Concept("swimming", "action", "beachlife"),
        ]
    )
    got = sample_open_set_replacement(
        lex, lex.concepts["surfing"], set(), np.random.default_rng(0)
    )
    assert got.name == "swimming"


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10 ** 6), st.sampled_from(["closed", "open"]))
def test_replacement_never_target_or_forbidden(seed, mode):
    lex = default_lexicon()
    lex = ConceptLexicon(
        list(lex.concepts.values()),
        {"fork": {"toothpick": 5, "knife": 2}, "dog": {"cat": 3}},
    )
    rng = np.random.default_rng(seed)
    target = lex.concepts["fork"]
    forbidden = {"fork", "spoon"}
    fn = sample_closed_set_replacement if mode == "closed" else sample_open_set_replacement
    got = fn(lex, target, forbidden, rng)
    assert got.name != target.name
    assert got.name not in forbidden
    assert got.kind == target.kind


def test_lexicon_rejects_self_cooccurrence():
    with pytest.raises(ValueError, match="itself"):
        ConceptLexicon([Concept("fork", "object", "utensil")], {"fork": {"fork": 1}})


def test_lexicon_save_load_round_trip(tmp_path):
    lex = ConceptLexicon(
        list(default_lexicon().concepts.values()), {"fork": {"toothpick": 5}}
    )
    p = tmp_path / "lex.json"
    lex.save(str(p))
    back = ConceptLexicon.load(str(p))
    assert list(back.concepts) == list(lex.concepts)
    assert back.cooccur == lex.cooccur


def test_min_count_threshold_drops_rare_pairs():
    lex = utensils("a", "b", "c")
    scenes = [scene(0, "a", "b"), scene(1, "a", "b"), scene(2, "a", "c")]
    out = build_cooccurrence(scenes, lex, min_count=2)
    assert out.cooccur["a"] == {"b": 2}
    assert "c" not in out.cooccur
