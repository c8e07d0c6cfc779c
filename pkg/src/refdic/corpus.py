"""Caption corpus loading, tokenization and n-gram extraction.

Tokenization rules: lowercase, replace every character whose Unicode
category starts with ``P`` (punctuation) by a space, split on whitespace.
No stemming.
"""

from __future__ import annotations

import json
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from .errors import EmptyCaptionError, ParseError, SchemaError

SPLITS = ("train", "val", "test")
MAX_ID = 2**64 - 1


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(caption: str) -> tuple[str, ...]:
    """Split a caption into lowercase word tokens.

    >>> tokenize("A red Couch.")
    ('a', 'red', 'couch')
    """
    cleaned = "".join(" " if _is_punct(ch) else ch for ch in caption.lower())
    tokens = tuple(cleaned.split())
    if not tokens:
        raise EmptyCaptionError(f"caption normalizes to zero tokens: {caption!r}")
    return tokens


def extract_ngrams(seq: Iterable[str], max_n: int = 4) -> dict[int, Counter]:
    """Count every n-gram for n in 1..max_n; keys are space-joined tokens."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    tokens = list(seq)
    bag = {}
    for n in range(1, max_n + 1):
        counts = Counter()
        for i in range(len(tokens) - n + 1):
            counts[" ".join(tokens[i:i + n])] += 1
        bag[n] = counts
    return bag


@dataclass(frozen=True)
class ImageEntry:
    id: int
    split: str
    captions: tuple[str, ...]
    tokens: tuple[tuple[str, ...], ...]

    @property
    def num_captions(self) -> int:
        return len(self.captions)


class CaptionCorpus:
    """Immutable, order-preserving collection of images and their captions."""

    def __init__(self, images: Iterable[ImageEntry]):
        self._images: dict[int, ImageEntry] = {}
        for img in images:
            if img.id in self._images:
                raise SchemaError(f"duplicate image id {img.id}")
            self._images[img.id] = img

    def __len__(self) -> int:
        return len(self._images)

    def __iter__(self) -> Iterator[ImageEntry]:
        return iter(self._images.values())

    def __contains__(self, image_id) -> bool:
        return image_id in self._images

    def __getitem__(self, image_id: int) -> ImageEntry:
        return self._images[image_id]

    def ids(self, split: str | None = None) -> list[int]:
        return [img.id for img in self if split is None or img.split == split]

    def split_of(self, image_id: int) -> str:
        return self._images[image_id].split

    def iter_split(self, split: str | None) -> Iterator[ImageEntry]:
        """Images of one split in file order; ``None`` or ``"all"`` means every image."""
        if split in (None, "all"):
            return iter(self)
        return (img for img in self if img.split == split)

    def to_json(self) -> dict:
        return {"images": [{"id": img.id, "split": img.split, "captions": list(img.captions)}
                           for img in self]}

    @classmethod
    def from_json(cls, data) -> "CaptionCorpus":
        if not isinstance(data, dict) or not isinstance(data.get("images"), list):
            raise SchemaError('expected a top-level object with an "images" list')
        entries = []
        for pos, raw in enumerate(data["images"]):
            entries.append(_image_from_json(raw, pos))
        return cls(entries)


def _image_from_json(raw, pos: int) -> ImageEntry:
    if not isinstance(raw, dict):
        raise SchemaError(f"images[{pos}] is not an object")
    image_id = raw.get("id")
    if isinstance(image_id, bool) or not isinstance(image_id, int) or not 0 <= image_id <= MAX_ID:
        raise SchemaError(f"images[{pos}].id must be an unsigned 64-bit integer, got {image_id!r}")
    split = raw.get("split")
    if split not in SPLITS:
        raise SchemaError(f"image {image_id}: split must be one of {SPLITS}, got {split!r}")
    captions = raw.get("captions")
    if not isinstance(captions, list) or not captions:
        raise SchemaError(f"image {image_id}: captions must be a non-empty list")
    if not all(isinstance(c, str) for c in captions):
        raise SchemaError(f"image {image_id}: every caption must be a string")
    try:
        tokens = tuple(tokenize(c) for c in captions)
    except EmptyCaptionError as exc:
        raise SchemaError(f"image {image_id}: {exc}") from exc
    return ImageEntry(image_id, split, tuple(captions), tokens)


def loads_corpus(raw: bytes | str) -> CaptionCorpus:
    if isinstance(raw, bytes):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("caption file is not valid UTF-8", exc.start) from exc
    else:
        text = raw
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise ParseError(f"malformed caption JSON: {exc.msg}", offset) from exc
    return CaptionCorpus.from_json(data)


def load_corpus(path: str | Path) -> CaptionCorpus:
    """Read a caption JSON file (``{"images": [{"id", "split", "captions"}]}``)."""
    return loads_corpus(Path(path).read_bytes())
