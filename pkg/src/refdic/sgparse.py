"""Lexicon-driven scene-graph parsing and object/attribute overlap.

A caption contributes one entry per maximal ``ADJ* NOUN`` run. Surface
forms are canonicalized by a one-step synonym lookup, falling back to
stripping a plural ``-es``/``-s`` suffix. Relations are not parsed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ParseError, SchemaError


@dataclass(frozen=True)
class Lexicon:
    nouns: frozenset
    adjectives: frozenset
    synonyms: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        known = self.nouns | self.adjectives
        for surface, canonical in self.synonyms.items():
            if canonical not in known:
                raise SchemaError(f"synonym {surface!r} -> {canonical!r}: target not in lexicon")
            if canonical in self.synonyms and self.synonyms[canonical] != canonical:
                raise SchemaError(f"synonym chain through {canonical!r} (mapping must be one-step)")

    def canonical(self, token: str) -> str:
        """Map a surface token to its lexicon form, or return it unchanged."""
        if token in self.synonyms:
            return self.synonyms[token]
        if token in self.nouns or token in self.adjectives:
            return token
        for suffix in ("es", "s"):
            if len(token) > len(suffix) and token.endswith(suffix):
                stem = token[:-len(suffix)]
                if stem in self.synonyms and self.synonyms[stem] in self.nouns:
                    return self.synonyms[stem]
                if stem in self.nouns:
                    return stem
        return token

    def to_json(self) -> dict:
        return {"nouns": sorted(self.nouns), "adjectives": sorted(self.adjectives),
                "synonyms": dict(sorted(self.synonyms.items()))}

    @classmethod
    def from_json(cls, data) -> "Lexicon":
        if not isinstance(data, dict):
            raise SchemaError("lexicon must be a JSON object")
        nouns, adjs = data.get("nouns"), data.get("adjectives")
        syn = data.get("synonyms", {})
        if not isinstance(nouns, list) or not isinstance(adjs, list) or not isinstance(syn, dict):
            raise SchemaError('lexicon needs "nouns" and "adjectives" lists and a "synonyms" object')
        if not all(isinstance(w, str) for w in [*nouns, *adjs, *syn, *syn.values()]):
            raise SchemaError("lexicon entries must be strings")
        return cls(frozenset(w.lower() for w in nouns), frozenset(w.lower() for w in adjs),
                   {k.lower(): v.lower() for k, v in syn.items()})


def load_lexicon(path: str | Path) -> Lexicon:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed lexicon JSON: {exc.msg}", exc.pos) from exc
    return Lexicon.from_json(data)


@dataclass(frozen=True)
class SceneGraph:
    """Objects of one image mapped to their attribute sets."""

    entries: Mapping[str, frozenset] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    @property
    def num_attributes(self) -> int:
        return sum(len(a) for a in self.entries.values())

    def to_json(self, image_id: int) -> dict:
        return {"image_id": image_id,
                "entries": [{"object": obj, "attributes": sorted(attrs)}
                            for obj, attrs in sorted(self.entries.items())]}

    @classmethod
    def from_json(cls, data) -> tuple[int, "SceneGraph"]:
        try:
            image_id = data["image_id"]
            entries = {}
            for e in data["entries"]:
                entries[e["object"]] = entries.get(e["object"], frozenset()) | frozenset(e["attributes"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed graph entry: {exc}") from exc
        if isinstance(image_id, bool) or not isinstance(image_id, int) or image_id < 0:
            raise SchemaError(f"graph image_id must be an unsigned integer, got {image_id!r}")
        return image_id, cls(entries)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, Iterable[str]]]) -> "SceneGraph":
        entries: dict[str, frozenset] = {}
        for obj, attrs in pairs:
            entries[obj] = entries.get(obj, frozenset()) | frozenset(attrs)
        return cls(entries)


def _caption_pairs(tokens, lex: Lexicon):
    canon = [lex.canonical(t) for t in tokens]
    pending: set[str] = set()
    for i, word in enumerate(canon):
        is_noun = word in lex.nouns
        is_adj = word in lex.adjectives
        if is_noun and is_adj:
            # ambiguous word: adjective only if the run continues
            nxt = canon[i + 1] if i + 1 < len(canon) else None
            is_adj = nxt is not None and (nxt in lex.nouns or nxt in lex.adjectives)
            is_noun = not is_adj
        if is_adj:
            pending.add(word)
        elif is_noun:
            yield word, pending
            pending = set()
        else:
            pending = set()


def parse_graph(captions: Iterable[Iterable[str]], lex: Lexicon) -> SceneGraph:
    """Union the ``ADJ* NOUN`` entries of every tokenized caption of one image."""
    pairs = []
    for tokens in captions:
        pairs.extend(_caption_pairs(tokens, lex))
    return SceneGraph.from_pairs(pairs)


@dataclass(frozen=True)
class OverlapScore:
    object_overlaps: int
    attribute_overlaps: int

    @property
    def total(self) -> int:
        return self.object_overlaps + self.attribute_overlaps


def overlap(a: SceneGraph, b: SceneGraph) -> OverlapScore:
    """Shared object categories plus shared (object, attribute) pairs.

    An attribute only counts when it hangs off the same object in both graphs.
    """
    shared = a.entries.keys() & b.entries.keys()
    attrs = sum(len(a.entries[o] & b.entries[o]) for o in shared)
    return OverlapScore(len(shared), attrs)


def dump_graphs(graphs: Mapping[int, SceneGraph]) -> dict:
    return {"graphs": [graphs[i].to_json(i) for i in graphs]}


def load_graphs(path: str | Path) -> dict[int, SceneGraph]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed graph JSON: {exc.msg}", exc.pos) from exc
    if not isinstance(data, dict) or not isinstance(data.get("graphs"), list):
        raise SchemaError('graph file needs a top-level "graphs" list')
    graphs = {}
    for raw in data["graphs"]:
        image_id, graph = SceneGraph.from_json(raw)
        if image_id in graphs:
            raise SchemaError(f"duplicate graph for image {image_id}")
        graphs[image_id] = graph
    return graphs
