"""Two-stage reference group construction.

Stage one ranks candidate captions of same-split images by cosine
similarity to the target image vector and keeps the images behind the
``coarse_size`` best captions. Stage two re-ranks those images by
scene-graph overlap with the target. A window of ``k`` images starting at
rank ``p`` becomes the reference group.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ._io import atomic_write_bytes
from .corpus import CaptionCorpus
from .errors import InsufficientCandidatesError, MissingItemError, ParseError, SchemaError
from .sgparse import SceneGraph, overlap

EMBEDDING_MAGIC = b"RDICFT01"


@dataclass
class EmbeddingStore:
    """Precomputed image and caption vectors of a shared dimension."""

    image_vectors: dict = field(default_factory=dict)  # id -> (D,)
    caption_vectors: dict = field(default_factory=dict)  # (id, caption index) -> (D,)

    @property
    def dim(self) -> int:
        for v in self.image_vectors.values():
            return len(v)
        for v in self.caption_vectors.values():
            return len(v)
        return 0

    def image(self, image_id: int) -> np.ndarray:
        try:
            return self.image_vectors[image_id]
        except KeyError:
            raise MissingItemError(f"no image embedding for id {image_id}") from None

    def caption(self, image_id: int, index: int) -> np.ndarray:
        try:
            return self.caption_vectors[(image_id, index)]
        except KeyError:
            raise MissingItemError(f"no caption embedding for id {image_id} caption {index}") from None


def write_embeddings(path: str | Path, store: EmbeddingStore) -> None:
    """Binary layout: magic, u32 count, u32 dim, then per item u64 id,
    u64 sub-index (0 = image, caption index + 1 = caption), dim x f32 (all LE)."""
    dim = store.dim
    items = [(i, 0, v) for i, v in store.image_vectors.items()]
    items += [(i, j + 1, v) for (i, j), v in store.caption_vectors.items()]
    chunks = [EMBEDDING_MAGIC, struct.pack("<II", len(items), dim)]
    for image_id, sub, vec in items:
        vec = np.asarray(vec, dtype="<f4")
        if vec.shape != (dim,):
            raise SchemaError(f"embedding for id {image_id} has shape {vec.shape}, expected ({dim},)")
        chunks.append(struct.pack("<QQ", image_id, sub))
        chunks.append(vec.tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def read_embeddings(path: str | Path) -> EmbeddingStore:
    raw = Path(path).read_bytes()
    if raw[:8] != EMBEDDING_MAGIC:
        raise ParseError("embedding file: bad magic", 0)
    if len(raw) < 16:
        raise ParseError("embedding file: truncated header", len(raw))
    count, dim = struct.unpack_from("<II", raw, 8)
    item = 16 + 4 * dim
    if len(raw) != 16 + count * item:
        raise ParseError(f"embedding file: expected {16 + count * item} bytes, got {len(raw)}",
                         min(len(raw), 16 + count * item))
    store = EmbeddingStore()
    for k in range(count):
        off = 16 + k * item
        image_id, sub = struct.unpack_from("<QQ", raw, off)
        vec = np.frombuffer(raw, dtype="<f4", count=dim, offset=off + 16).astype(np.float64)
        if not np.all(np.isfinite(vec)):
            raise SchemaError(f"embedding file: non-finite vector for id {image_id}")
        if sub == 0:
            store.image_vectors[image_id] = vec
        else:
            store.caption_vectors[(image_id, sub - 1)] = vec
    return store


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=-1, keepdims=True)
    return np.divide(mat, norms, out=np.zeros_like(mat), where=norms > 0)


def coarse_group(target: int, corpus: CaptionCorpus, emb: EmbeddingStore,
                 coarse_size: int = 500) -> list[tuple[int, float]]:
    """Images behind the ``coarse_size`` captions most similar to the target image.

    Returns ``(image_id, best caption score)`` pairs, best first, ties by id.
    """
    if coarse_size < 1:
        raise ValueError("coarse_size must be >= 1")
    if target not in corpus:
        raise MissingItemError(f"target image {target} not in corpus")
    split = corpus.split_of(target)
    keys = [(img.id, j) for img in corpus.iter_split(split) if img.id != target
            for j in range(img.num_captions)]
    if not keys:
        raise InsufficientCandidatesError(f"target {target}: no candidate captions in split {split}",
                                          needed=1, available=0)
    query = _unit_rows(np.asarray(emb.image(target), dtype=np.float64)[None, :])[0]
    caps = _unit_rows(np.stack([emb.caption(i, j) for i, j in keys]).astype(np.float64))
    scores = caps @ query
    ids = np.array([i for i, _ in keys], dtype=np.uint64)
    sub = np.array([j for _, j in keys])
    # score desc, then image id asc, then caption index asc
    order = np.lexsort((sub, ids, -scores))[:coarse_size]
    best: dict[int, float] = {}
    for idx in order:
        image_id = int(ids[idx])
        if image_id not in best:
            best[image_id] = float(scores[idx])
    return sorted(best.items(), key=lambda t: (-t[1], t[0]))


@dataclass(frozen=True)
class RankedImage:
    image_id: int
    fine: int
    coarse: float


@dataclass(frozen=True)
class Ranking:
    target: int
    entries: tuple  # of RankedImage, best first

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list[int]:
        return [e.image_id for e in self.entries]


def _graph(graphs: Mapping[int, SceneGraph], image_id: int) -> SceneGraph:
    try:
        return graphs[image_id]
    except KeyError:
        raise MissingItemError(f"no scene graph for image {image_id}") from None


def fine_rank(target: int, coarse: Sequence[tuple[int, float]],
              graphs: Mapping[int, SceneGraph]) -> Ranking:
    """Re-rank coarse candidates by overlap total, then coarse score, then id."""
    tgt = _graph(graphs, target)
    entries = [RankedImage(i, overlap(tgt, _graph(graphs, i)).total, s) for i, s in coarse]
    entries.sort(key=lambda e: (-e.fine, -e.coarse, e.image_id))
    return Ranking(target, tuple(entries))


@dataclass(frozen=True)
class ReferenceGroup:
    target: int
    members: tuple
    coarse_scores: tuple
    fine_scores: tuple
    p: int
    k: int

    def to_json(self) -> dict:
        return {"target": self.target, "members": list(self.members),
                "fine_scores": list(self.fine_scores),
                "coarse_scores": list(self.coarse_scores), "p": self.p, "k": self.k}

    @classmethod
    def from_json(cls, d) -> "ReferenceGroup":
        try:
            g = cls(int(d["target"]), tuple(int(m) for m in d["members"]),
                    tuple(float(s) for s in d["coarse_scores"]),
                    tuple(int(s) for s in d["fine_scores"]), int(d["p"]), int(d["k"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed group entry: {exc}") from exc
        if not len(g.members) == len(g.coarse_scores) == len(g.fine_scores) == g.k:
            raise SchemaError(f"group for target {g.target}: member/score lengths disagree with k={g.k}")
        return g


def select_window(ranked: Ranking, p: int = 3, k: int = 5) -> ReferenceGroup:
    """Take ranks ``p`` .. ``p + k - 1`` (1-indexed) as the reference group."""
    if p < 1 or k < 1:
        raise ValueError("p and k must be >= 1")
    needed = p + k - 1
    if len(ranked) < needed:
        raise InsufficientCandidatesError(
            f"target {ranked.target}: window top{p}-{needed} needs {needed} ranked images, "
            f"only {len(ranked)} available", needed=needed, available=len(ranked))
    chosen = ranked.entries[p - 1:needed]
    return ReferenceGroup(ranked.target, tuple(e.image_id for e in chosen),
                          tuple(e.coarse for e in chosen), tuple(e.fine for e in chosen), p, k)


def build_group(target: int, corpus: CaptionCorpus, emb: EmbeddingStore,
                graphs: Mapping[int, SceneGraph], coarse_size: int = 500,
                p: int = 3, k: int = 5) -> ReferenceGroup:
    coarse = coarse_group(target, corpus, emb, coarse_size)
    return select_window(fine_rank(target, coarse, graphs), p, k)


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("REFDIC_THREADS", "1")))
    except ValueError:
        return 1


def build_groups(corpus: CaptionCorpus, emb: EmbeddingStore, graphs: Mapping[int, SceneGraph],
                 coarse_size: int = 500, p: int = 3, k: int = 5,
                 targets: Sequence[int] | None = None) -> list[ReferenceGroup]:
    """Build one group per target (default: every image), sorted by target id.

    Raises InsufficientCandidatesError listing every target that failed.
    """
    targets = sorted(corpus.ids() if targets is None else targets)

    def one(t):
        try:
            return build_group(t, corpus, emb, graphs, coarse_size, p, k)
        except InsufficientCandidatesError as exc:
            return exc

    threads = _thread_count()
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, targets))
    else:
        results = [one(t) for t in targets]
    failed = [(t, r) for t, r in zip(targets, results) if isinstance(r, Exception)]
    if failed:
        detail = "; ".join(str(r) for _, r in failed)
        raise InsufficientCandidatesError(
            f"{len(failed)} target(s) lack candidates: {[t for t, _ in failed]}: {detail}")
    return sorted(results, key=lambda g: g.target)


def group_overlap_stats(groups: Sequence[ReferenceGroup], graphs: Mapping[int, SceneGraph]) -> float:
    """Mean over groups of the mean target-member overlap total."""
    if not groups:
        raise ValueError("mean over an empty group list is undefined")
    per_group = []
    for g in groups:
        tgt = _graph(graphs, g.target)
        per_group.append(sum(overlap(tgt, _graph(graphs, m)).total for m in g.members) / len(g.members))
    return sum(per_group) / len(per_group)


def random_groups(corpus: CaptionCorpus, k: int, seed: int) -> list[ReferenceGroup]:
    """Uniformly random same-split groups; the baseline for overlap statistics."""
    rng = np.random.default_rng(seed)
    groups = []
    for t in sorted(corpus.ids()):
        pool = [i for i in corpus.ids(corpus.split_of(t)) if i != t]
        if len(pool) < k:
            raise InsufficientCandidatesError(f"target {t}: split too small for k={k}",
                                              needed=k, available=len(pool))
        members = tuple(int(pool[i]) for i in rng.choice(len(pool), size=k, replace=False))
        groups.append(ReferenceGroup(t, members, (0.0,) * k, (0,) * k, 0, k))
    return groups


def dumps_groups(groups: Sequence[ReferenceGroup]) -> str:
    return json.dumps({"groups": [g.to_json() for g in groups]}, indent=1) + "\n"


def load_groups(path: str | Path) -> list[ReferenceGroup]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed groups JSON: {exc.msg}", exc.pos) from exc
    if not isinstance(data, dict) or not isinstance(data.get("groups"), list):
        raise SchemaError('groups file needs a top-level "groups" list')
    return [ReferenceGroup.from_json(d) for d in data["groups"]]

