"""Deterministic mini-corpus generator.

Every image belongs to a scene and holds a few (object, attribute) facts
drawn from that scene's object pool. Captions verbalize subsets of those
facts through templates, using synonyms and plurals so the parser's
canonicalization is exercised. Embeddings are bag-of-words: each canonical
word owns a seeded random vector; a caption vector sums its content words,
an image vector sums its facts plus a scene vector. Region features place
one noisy row per fact plus background rows.

All randomness flows from ``numpy.random.default_rng(seed)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .corpus import CaptionCorpus, ImageEntry, tokenize
from .grouping import EmbeddingStore, write_embeddings
from .regionmatch import RegionFeatureSet, write_region_features
from .sgparse import Lexicon

SCENES = {
    "street": ["bus", "car", "motorcycle", "helmet", "road", "person", "bicycle", "sign"],
    "living room": ["couch", "tv", "painting", "vase", "lamp", "table", "fireplace", "dog"],
    "kitchen": ["oven", "table", "cup", "plate", "sink", "cat", "window", "chair"],
    "park": ["dog", "bench", "tree", "kite", "grass", "person", "bicycle", "frisbee"],
}
ADJECTIVES = ["red", "black", "white", "blue", "green", "wooden", "small", "large", "old", "two"]
SYNONYMS = {"sofa": "couch", "automobile": "car", "television": "tv", "puppy": "dog",
            "kitty": "cat", "man": "person", "woman": "person", "people": "person",
            "bike": "bicycle"}
PREPOSITIONS = ["next to", "near", "beside", "behind", "in front of"]
TEMPLATES = [
    "a {a} {b} {prep} a {c} {d}",
    "there is a {a} {b} and a {c} {d} in the {scene}",
    "a {scene} with a {a} {b}",
    "{A} {b} sits {prep} the {d}.",
    "a {b} and a {c} {d}, seen in a {scene}",
]


def _surface(noun: str, rng) -> str:
    options = [noun] + [s for s, c in SYNONYMS.items() if c == noun]
    word = options[int(rng.integers(len(options)))]
    if word == noun and rng.random() < 0.2:
        if noun == "person":
            return "people"
        return noun + ("es" if noun.endswith(("s", "ch", "sh", "x")) else "s")
    return word


def lexicon() -> Lexicon:
    nouns = sorted({n for pool in SCENES.values() for n in pool} | {"room", "street", "kitchen", "park"})
    return Lexicon(frozenset(nouns), frozenset(ADJECTIVES), dict(SYNONYMS))


@dataclass
class Fixture:
    corpus: CaptionCorpus
    lexicon: Lexicon
    embeddings: EmbeddingStore
    regions: list
    candidates: dict  # image id -> caption string


def generate(seed: int = 0, n_images: int = 50, captions_per_image: int = 5,
             dim: int = 32, region_dim: int = 16,
             split_sizes: tuple = (0.5, 0.25, 0.25)) -> Fixture:
    rng = np.random.default_rng(seed)
    scene_names = list(SCENES)
    vocab = sorted({w for pool in SCENES.values() for w in pool} | set(ADJECTIVES) | set(scene_names))
    word_vec = {w: rng.normal(size=dim) for w in vocab}
    region_vec = {w: rng.normal(size=region_dim) for w in vocab}

    lex = lexicon()
    n_train = int(round(n_images * split_sizes[0]))
    n_val = int(round(n_images * split_sizes[1]))
    images, store, regions, candidates = [], EmbeddingStore(), [], {}
    for idx in range(n_images):
        image_id = 1000 + idx
        split = "train" if idx < n_train else "val" if idx < n_train + n_val else "test"
        scene = scene_names[int(rng.integers(len(scene_names)))]
        pool = SCENES[scene]
        objs = [pool[i] for i in rng.choice(len(pool), size=int(rng.integers(3, 5)), replace=False)]
        facts = [(o, ADJECTIVES[int(rng.integers(len(ADJECTIVES)))] if rng.random() < 0.7 else None)
                 for o in objs]

        def caption():
            i, j = rng.choice(len(facts), size=2, replace=False)
            (b, a), (d, c) = facts[i], facts[j]
            text = TEMPLATES[int(rng.integers(len(TEMPLATES)))].format(
                a=a or "", A=(a or "the").capitalize(), b=_surface(b, rng), c=c or "",
                d=_surface(d, rng), prep=PREPOSITIONS[int(rng.integers(len(PREPOSITIONS)))],
                scene=scene)
            return " ".join(text.split())

        caps = [caption() for _ in range(captions_per_image)]
        images.append(ImageEntry(image_id, split, tuple(caps), tuple(tokenize(c) for c in caps)))
        candidates[image_id] = caption()

        content = [w for o, a in facts for w in (o, a) if w] + [scene]
        store.image_vectors[image_id] = sum(word_vec[w] for w in content) + 0.5 * rng.normal(size=dim)
        for j, cap in enumerate(caps):
            words = [lex.canonical(t) for t in tokenize(cap)]
            words = [w for w in words if w in word_vec]
            store.caption_vectors[(image_id, j)] = sum(word_vec[w] for w in words) + 0.5 * rng.normal(size=dim)

        rows = [region_vec[o] + (region_vec[a] if a else 0) + 0.3 * rng.normal(size=region_dim)
                for o, a in facts]
        rows += [rng.normal(size=region_dim) for _ in range(int(rng.integers(1, 3)))]
        regions.append(RegionFeatureSet(image_id, np.stack(rows)))
    return Fixture(CaptionCorpus(images), lexicon(), store, regions, candidates)


def write_fixture(out_dir: str | Path, fx: Fixture, test_only_candidates: bool = True) -> dict[str, Path]:
    """Write captions.json, lexicon.json, embeddings.bin, features.bin, candidates.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in
             ("captions.json", "lexicon.json", "embeddings.bin", "features.bin", "candidates.json")}
    atomic_write_text(paths["captions.json"], json.dumps(fx.corpus.to_json(), indent=2) + "\n")
    atomic_write_text(paths["lexicon.json"], json.dumps(fx.lexicon.to_json(), indent=2) + "\n")
    write_embeddings(paths["embeddings.bin"], fx.embeddings)
    write_region_features(paths["features.bin"], fx.regions)
    cands = [{"image_id": i, "caption": c} for i, c in fx.candidates.items()
             if not test_only_candidates or fx.corpus.split_of(i) == "test"]
    atomic_write_text(paths["candidates.json"], json.dumps({"candidates": cands}, indent=2) + "\n")
    return paths
