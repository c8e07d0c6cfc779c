"""Seeded random mini-corpora shared by the metric tests."""

import random

from refdic.corpus import CaptionCorpus, ImageEntry

WORDS = ["a", "red", "dog", "sofa", "on", "the", "grass", "two", "cats", "blue"]


def make_corpus(captions_by_image, split="test"):
    return CaptionCorpus(ImageEntry(i, split, tuple(" ".join(c) for c in caps), tuple(tuple(c) for c in caps))
                         for i, caps in enumerate(captions_by_image))


def random_case(seed, max_images=20, max_caps=5, k=3):
    """Seeded mini-corpus: (captions per image, candidate, target index, reference indices)."""
    r = random.Random(seed)
    n_images = r.randint(k + 1, max_images)
    vocab = WORDS[:r.randint(4, len(WORDS))]
    caps = [[[r.choice(vocab) for _ in range(r.randint(1, 8))] for _ in range(r.randint(1, max_caps))]
            for _ in range(n_images)]
    candidate = [r.choice(vocab) for _ in range(r.randint(1, 8))]
    target = r.randrange(n_images)
    refs = r.sample([i for i in range(n_images) if i != target], k)
    return caps, candidate, target, refs
