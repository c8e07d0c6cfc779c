"""Similar-region matching between a target image and its reference images.

Region features are projected into a shared memory space by one affine
layer (weights shared by target and references, no activation). For every
target region and every reference image the most cosine-similar reference
region is chosen; the target region plus its K matches form a tuple.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_bytes
from .errors import DimensionError, ParseError, SchemaError

REGION_MAGIC = b"RDICRG01"


@dataclass(frozen=True)
class RegionFeatureSet:
    image_id: int
    features: np.ndarray  # (N, D_in)

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DimensionError(f"image {self.image_id}: region features must be N x D with N >= 1, "
                                 f"got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise SchemaError(f"image {self.image_id}: non-finite region features")


@dataclass(frozen=True)
class TargetReferenceTuple:
    target_index: int
    matches: tuple  # K pairs of (reference region index, similarity)

    @property
    def indices(self) -> tuple:
        return tuple(i for i, _ in self.matches)

    def to_json(self) -> dict:
        return {"target_region": self.target_index,
                "references": [{"region": i, "similarity": s} for i, s in self.matches]}


def project(features: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Row-wise affine map ``features @ weight + bias`` into memory space."""
    features = np.asarray(features)
    if features.ndim != 2 or weight.ndim != 2 or features.shape[1] != weight.shape[0]:
        raise DimensionError(f"projection: features {features.shape} incompatible with weight {weight.shape}")
    out = features @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"projection: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias
    return out


def similarity_matrix(ref: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """Cosine similarity, rows = reference regions, columns = target regions.

    Zero-norm rows give 0 rather than NaN.
    """
    if ref.shape[-1] != tgt.shape[-1]:
        raise DimensionError(f"memory dims differ: {ref.shape[-1]} vs {tgt.shape[-1]}")

    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, n, out=np.zeros_like(x, dtype=np.result_type(x, float)), where=n > 0)

    return unit(ref) @ unit(tgt).T


def match_regions(sim: np.ndarray) -> np.ndarray:
    """Per target column, the smallest reference row index attaining the max."""
    if sim.size == 0:
        raise ValueError("similarity matrix is empty")
    return np.argmax(sim, axis=0)


def build_tuples(tgt: np.ndarray, refs: Sequence[np.ndarray]) -> list[TargetReferenceTuple]:
    if len(refs) == 0:
        raise ValueError("at least one reference image is required")
    picks = []
    for ref in refs:
        sim = similarity_matrix(ref, tgt)
        idx = match_regions(sim)
        picks.append([(int(i), float(sim[i, j])) for j, i in enumerate(idx)])
    return [TargetReferenceTuple(n, tuple(p[n] for p in picks)) for n in range(tgt.shape[0])]


def gather_tuples(tgt: np.ndarray, refs: Sequence[np.ndarray],
                  tuples: Sequence[TargetReferenceTuple]) -> np.ndarray:
    """Stack matched reference rows into an (N, K, d) array aligned with ``tgt``."""
    return np.stack([np.stack([refs[k][i] for k, i in enumerate(t.indices)]) for t in tuples])


def write_region_features(path: str | Path, items: Sequence[RegionFeatureSet]) -> None:
    """Layout: magic, u32 image count; per image u64 id, u32 N, u32 D_in, N*D_in f32 (LE)."""
    chunks = [REGION_MAGIC, struct.pack("<I", len(items))]
    for it in items:
        n, d = it.features.shape
        chunks.append(struct.pack("<QII", it.image_id, n, d))
        chunks.append(np.ascontiguousarray(it.features, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def read_region_features(path: str | Path) -> dict[int, RegionFeatureSet]:
    raw = Path(path).read_bytes()
    if raw[:8] != REGION_MAGIC:
        raise ParseError("region feature file: bad magic", 0)
    off = 8
    try:
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        out = {}
        for _ in range(count):
            image_id, n, d = struct.unpack_from("<QII", raw, off)
            off += 16
            if off + 4 * n * d > len(raw):
                raise ParseError(f"region feature file: truncated data for image {image_id}", off)
            feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d)
            off += 4 * n * d
            if image_id in out:
                raise SchemaError(f"region feature file: duplicate image {image_id}")
            out[image_id] = RegionFeatureSet(image_id, feats.astype(np.float64))
    except struct.error as exc:
        raise ParseError(f"region feature file: truncated header ({exc})", off) from exc
    if off != len(raw):
        raise ParseError("region feature file: trailing bytes", off)
    return out
