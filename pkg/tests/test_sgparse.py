import re

import pytest
from hypothesis import given, strategies as st

from refdic.errors import SchemaError
from refdic.sgparse import Lexicon, SceneGraph, overlap, parse_graph

LEX = Lexicon(
    nouns=frozenset({"helmet", "people", "motorcycle", "road", "bus", "car", "dog", "couch"}),
    adjectives=frozenset({"black", "dirt", "two", "big", "red"}),
    synonyms={"sofa": "couch", "motorbike": "motorcycle"},
)

HELMET_TOP = SceneGraph.from_pairs([("helmet", {"black"}), ("people", set()),
                                  ("motorcycle", {"black"}), ("road", {"dirt"})])
HELMET_BOTTOM = SceneGraph.from_pairs([("helmet", set()), ("people", {"two"}),
                                     ("motorcycle", {"black"}), ("road", set())])


def test_adjective_noun():
    g = parse_graph([("a", "black", "helmet")], LEX)
    assert g.entries == {"helmet": frozenset({"black"})}


def test_noun_without_adjectives():
    lex = Lexicon(frozenset({"dog"}), frozenset())
    assert parse_graph([("a", "dog")], lex).entries == {"dog": frozenset()}


def _regex_oracle(tokens, lex):
    """Tag tokens, then find ADJ* NOUN runs with a regex over the tag string."""
    canon = [lex.canonical(t) for t in tokens]
    tags = "".join("N" if w in lex.nouns else "A" if w in lex.adjectives else "x" for w in canon)
    out = []
    for m in re.finditer(r"A*N", tags):
        out.append((canon[m.end() - 1], set(canon[m.start():m.end() - 1])))
    return out


def test_multiple_runs_against_regex_oracle():
    tokens = ("big", "red", "bus", "near", "red", "car")
    expected = SceneGraph.from_pairs(_regex_oracle(tokens, LEX))
    assert parse_graph([tokens], LEX) == expected
    assert expected.entries == {"bus": frozenset({"big", "red"}), "car": frozenset({"red"})}


@given(st.lists(st.sampled_from(["a", "big", "red", "bus", "near", "dog", "sofa", "cars", "the"]),
                max_size=12))
def test_parser_matches_regex_oracle(tokens):
    assert parse_graph([tokens], LEX) == SceneGraph.from_pairs(_regex_oracle(tokens, LEX))


def test_canonicalization():
    g = parse_graph([("a", "red", "sofa"), ("two", "buses"), ("motorbikes",)], LEX)
    assert g.entries == {"couch": frozenset({"red"}), "bus": frozenset({"two"}),
                         "motorcycle": frozenset()}


def test_merge_across_captions():
    g = parse_graph([("a", "black", "dog"), ("a", "big", "dog")], LEX)
    assert g.entries == {"dog": frozenset({"black", "big"})}


def test_lexicon_invariants():
    with pytest.raises(SchemaError):
        Lexicon(frozenset({"dog"}), frozenset(), {"puppy": "hound"})
    with pytest.raises(SchemaError):
        Lexicon(frozenset({"dog", "pup"}), frozenset(), {"puppy": "pup", "pup": "dog"})


def test_helmet_scene_overlap():
    score = overlap(HELMET_TOP, HELMET_BOTTOM)
    assert (score.object_overlaps, score.attribute_overlaps, score.total) == (4, 1, 5)


def test_cross_object_attribute_does_not_count():
    a = SceneGraph.from_pairs([("helmet", {"black"}), ("motorcycle", set())])
    b = SceneGraph.from_pairs([("helmet", set()), ("motorcycle", {"black"})])
    assert overlap(a, b).attribute_overlaps == 0
    assert overlap(a, b).object_overlaps == 2


def test_self_and_disjoint():
    assert overlap(HELMET_TOP, HELMET_TOP).object_overlaps == len(HELMET_TOP)
    assert overlap(HELMET_TOP, HELMET_TOP).attribute_overlaps == HELMET_TOP.num_attributes
    other = SceneGraph.from_pairs([("tree", {"green"})])
    assert overlap(HELMET_TOP, other).total == 0


graphs = st.dictionaries(st.sampled_from(["dog", "cat", "bus", "car", "tree"]),
                         st.frozensets(st.sampled_from(["red", "big", "old"])), max_size=5).map(SceneGraph)


@given(graphs, graphs)
def test_overlap_symmetric(a, b):
    assert overlap(a, b) == overlap(b, a)
    shared = a.entries.keys() & b.entries.keys()
    bound = sum(min(len(a.entries[o]), len(b.entries[o])) for o in shared)
    assert overlap(a, b).attribute_overlaps <= bound


def test_duplicate_caption_is_idempotent():
    caps = [("a", "black", "helmet", "on", "a", "road")]
    other = parse_graph([("two", "people", "on", "a", "dirt", "road")], LEX)
    g1 = parse_graph(caps, LEX)
    g2 = parse_graph(caps * 3, LEX)
    assert g1 == g2
    assert overlap(g1, other) == overlap(g2, other)


def test_graph_json_roundtrip():
    image_id, g = SceneGraph.from_json(HELMET_TOP.to_json(42))
    assert image_id == 42 and g == HELMET_TOP
