"""CIDEr and DisCIDEr.

Both metrics weight n-grams by term frequency times inverse document
frequency (natural log, document = image) and average cosine similarities
between the candidate vector and each ground-truth vector, per n in 1..4,
scaled by 10. Plain CIDEr: no length penalty, no count clipping.

DisCIDEr additionally multiplies every ground-truth weight by the inverse
reference frequency ``ln((m + K) / (n + c))``, where ``c`` counts the
reference images whose captions contain the n-gram. The candidate vector
is left untouched, so ground-truth weights may turn negative.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

from .corpus import CaptionCorpus, extract_ngrams
from .errors import ParameterError

MAX_N = 4


@dataclass(frozen=True)
class IdfTable:
    df: Mapping[int, Counter]
    size: int

    def idf(self, n: int, gram: str) -> float:
        return math.log(self.size / max(1, self.df[n].get(gram, 0)))


def build_idf(corpus: CaptionCorpus, split: str | None = None, max_n: int = MAX_N) -> IdfTable:
    """Document frequencies over the images of ``split`` (None / "all" for every image)."""
    df = {n: Counter() for n in range(1, max_n + 1)}
    size = 0
    for img in corpus.iter_split(split):
        size += 1
        seen = {n: set() for n in df}
        for tokens in img.tokens:
            for n, counts in extract_ngrams(tokens, max_n).items():
                seen[n].update(counts)
        for n, grams in seen.items():
            df[n].update(grams)
    if size == 0:
        raise ValueError(f"cannot build IDF over empty split {split!r}")
    return IdfTable(df, size)


@dataclass(frozen=True)
class DisciderParams:
    m: float = 0.8
    n_param: float = 5.0
    k: int = 5

    def __post_init__(self):
        if not self.n_param > 0:
            raise ParameterError(f"n_param must be > 0, got {self.n_param}")
        if self.k < 0:
            raise ParameterError(f"k must be >= 0, got {self.k}")


def irf(count: int, params: DisciderParams) -> float:
    """Inverse reference frequency for an n-gram seen in ``count`` of the K reference images."""
    if not 0 <= count <= params.k:
        raise ParameterError(f"reference count {count} outside [0, {params.k}]")
    return math.log((params.m + params.k) / (params.n_param + count))


def _weights(tokens: Sequence[str], idf: IdfTable, factor=None) -> dict[int, dict[str, float]]:
    vec = {}
    for n, counts in extract_ngrams(tokens, MAX_N).items():
        total = sum(counts.values())
        g = {}
        for gram, h in counts.items():
            w = h / total * idf.idf(n, gram)
            if factor is not None:
                w *= factor(n, gram)
            g[gram] = w
        vec[n] = g
    return vec


def _cosine(a: dict[str, float], b: dict[str, float]) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    if len(b) < len(a):
        a, b = b, a
    return sum(v * b.get(k, 0.0) for k, v in a.items()) / (na * nb)


def _consensus(candidate: Sequence[str], refs: Sequence[Sequence[str]], idf: IdfTable,
               ref_factor: Callable[[int, str], float] | None = None) -> float:
    if not refs:
        raise ValueError("at least one reference caption is required")
    cand = _weights(candidate, idf)
    ref_vecs = [_weights(r, idf, ref_factor) for r in refs]
    per_n = []
    for n in range(1, MAX_N + 1):
        per_n.append(sum(_cosine(cand[n], rv[n]) for rv in ref_vecs) / len(ref_vecs))
    return 10.0 * sum(per_n) / MAX_N


def cider(candidate: Sequence[str], refs: Sequence[Sequence[str]], idf: IdfTable) -> float:
    return _consensus(candidate, refs, idf)


def reference_counts(group_refs: Iterable[Iterable[Sequence[str]]], max_n: int = MAX_N) -> dict[int, Counter]:
    """Per n-gram, the number of reference images with at least one occurrence."""
    counts = {n: Counter() for n in range(1, max_n + 1)}
    for captions in group_refs:
        seen = {n: set() for n in counts}
        for tokens in captions:
            for n, bag in extract_ngrams(tokens, max_n).items():
                seen[n].update(bag)
        for n, grams in seen.items():
            counts[n].update(grams)
    return counts


def discider(candidate: Sequence[str], target_refs: Sequence[Sequence[str]],
             group_refs: Sequence[Sequence[Sequence[str]]], idf: IdfTable,
             params: DisciderParams = DisciderParams()) -> float:
    """CIDEr with ground-truth weights rescaled by the reference-group IRF."""
    if len(group_refs) != params.k:
        raise ParameterError(f"got {len(group_refs)} reference images but params.k = {params.k}")
    counts = reference_counts(group_refs)
    return _consensus(candidate, target_refs, idf,
                      lambda n, gram: irf(counts[n].get(gram, 0), params))


def score_candidates(corpus: CaptionCorpus, candidates: Mapping[int, Sequence[str]],
                     groups: Mapping[int, Sequence[int]], m: float = 0.8,
                     n_param: float = 5.0, idf_split: str | None = None) -> dict:
    """Score candidate token sequences keyed by image id.

    IDF is built per split of the scored image unless ``idf_split`` is given.
    Returns a report with per-image rows (sorted by id) and corpus means.
    """
    idf_cache: dict[str | None, IdfTable] = {}
    rows, raw = [], []
    for image_id in sorted(candidates):
        split = idf_split or corpus.split_of(image_id)
        if split not in idf_cache:
            idf_cache[split] = build_idf(corpus, split)
        idf = idf_cache[split]
        members = groups[image_id]
        params = DisciderParams(m, n_param, len(members))
        gt = corpus[image_id].tokens
        refs = [corpus[r].tokens for r in members]
        c = cider(candidates[image_id], gt, idf)
        d = discider(candidates[image_id], gt, refs, idf, params)
        raw.append((c, d))
        rows.append({"image_id": image_id, "cider": round(c, 6), "discider": round(d, 6)})
    mean = {"cider": round(sum(c for c, _ in raw) / len(raw), 6) if raw else 0.0,
            "discider": round(sum(d for _, d in raw) / len(raw), 6) if raw else 0.0}
    return {"params": {"m": m, "n": n_param}, "images": rows, "mean": mean}
