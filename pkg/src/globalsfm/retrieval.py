"""Candidate image-pair selection from sequential order and descriptor similarity.

Pairs come from two sources: a sliding window over the capture order, and
nearest neighbors in a global-descriptor space.  Descriptors are read from a
file (or synthesized for virtual scenes); no network inference happens here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InputError

SOURCE_SEQUENTIAL = "sequential"
SOURCE_SIMILARITY = "similarity"


@dataclass(frozen=True)
class GlobalDescriptor:
    """L2-normalized global appearance descriptor of one image."""

    image_id: int
    vector: np.ndarray

    def __post_init__(self):
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise InputError(
                f"descriptor for image {self.image_id} has norm {norm:.8f}, expected 1")


@dataclass(frozen=True)
class CandidatePairs:
    """Deduplicated candidate pairs, each with a score and a source tag.

    Keys are ``(i, j)`` with ``i < j``.  Scores live in [-1, 1]; sequential
    pairs carry score 1.0 by convention.
    """

    scores: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)

    def pairs(self) -> list:
        """Sorted list of (i, j) keys."""
        return sorted(self.scores.keys())

    def __len__(self) -> int:
        return len(self.scores)

    def __contains__(self, pair) -> bool:
        return tuple(pair) in self.scores


def sequential_pairs(n_images: int, lookahead: int) -> CandidatePairs:
    """All pairs (i, j) with 0 < j - i <= lookahead.

    Args:
        n_images: number of images, >= 2.
        lookahead: window size in capture order, >= 1.
    """
    if n_images < 2:
        raise InputError("need at least 2 images")
    if lookahead < 1:
        raise InputError("lookahead must be >= 1")
    scores = {}
    sources = {}
    for i in range(n_images):
        for j in range(i + 1, min(i + lookahead + 1, n_images)):
            scores[(i, j)] = 1.0
            sources[(i, j)] = SOURCE_SEQUENTIAL
    return CandidatePairs(scores, sources)


def blocked_similarity(descriptors: list, block: int = 50) -> np.ndarray:
    """Upper-triangular dot-product similarity matrix, computed in sub-blocks.

    Each (block x block) tile is an independent task; tiles use a fixed
    summation order so the assembled matrix is bitwise identical for every
    block size.  Rows follow list order.

    Args:
        descriptors: GlobalDescriptor list, one per image.
        block: tile edge length, >= 1.

    Returns:
        (n, n) float64 matrix with entries only at i < j; rest is zero.

    Raises:
        DimensionMismatch: descriptor lengths differ.
    """
    if block < 1:
        raise InputError("block must be >= 1")
    n = len(descriptors)
    if n == 0:
        return np.zeros((0, 0))
    dims = {len(np.asarray(d.vector)) for d in descriptors}
    if len(dims) != 1:
        raise DimensionMismatch(f"descriptor dimensions differ: {sorted(dims)}")
    mat = np.array([np.asarray(d.vector, dtype=np.float64) for d in descriptors])
    sim = np.zeros((n, n))
    for bi, bj, tile in similarity_block_tasks(mat, block):
        _write_similarity_block(sim, bi, bj, tile, block)
    return sim


def similarity_block_tasks(mat: np.ndarray, block: int):
    """Yield (block_row, block_col, tile) for every upper tile of the matrix.

    Exposed separately so the pipeline scheduler can farm tiles out to
    workers; :func:`compute_similarity_block` is the pure per-task kernel.
    """
    n = mat.shape[0]
    n_blocks = (n + block - 1) // block
    for bi in range(n_blocks):
        for bj in range(bi, n_blocks):
            yield bi, bj, compute_similarity_block(mat, bi, bj, block)


def compute_similarity_block(mat: np.ndarray, block_row: int, block_col: int,
                             block: int) -> np.ndarray:
    """One tile of the similarity matrix.

    einsum with optimize=False keeps the per-entry summation order fixed,
    which makes the result independent of tile shape (BLAS matmul is not).
    """
    r0, r1 = block_row * block, min((block_row + 1) * block, mat.shape[0])
    c0, c1 = block_col * block, min((block_col + 1) * block, mat.shape[0])
    return np.einsum("id,jd->ij", mat[r0:r1], mat[c0:c1], optimize=False)


def _write_similarity_block(sim: np.ndarray, block_row: int, block_col: int,
                            tile: np.ndarray, block: int) -> None:
    r0 = block_row * block
    c0 = block_col * block
    rows, cols = tile.shape
    for a in range(rows):
        i = r0 + a
        for b in range(cols):
            j = c0 + b
            if i < j:
                sim[i, j] = tile[a, b]


def select_similarity_pairs(sim: np.ndarray, k: int, min_score: float) -> CandidatePairs:
    """Top-k descriptor neighbors per image, post-filtered by minimum score.

    The score threshold is applied after top-k truncation.  Ties in score are
    broken toward the lower partner index.

    Args:
        sim: (n, n) matrix with similarities at i < j  (output of
            :func:`blocked_similarity`).
        k: neighbors to keep per image.
        min_score: pairs scoring below this are dropped.
    """
    n = sim.shape[0]
    scores = {}
    sources = {}
    for i in range(n):
        partners = []
        for j in range(n):
            if j == i:
                continue
            s = sim[i, j] if i < j else sim[j, i]
            partners.append((-s, j))
        partners.sort()
        for neg_s, j in partners[:k]:
            if -neg_s < min_score:
                continue
            key = (min(i, j), max(i, j))
            if key not in scores:
                scores[key] = -neg_s
                sources[key] = SOURCE_SIMILARITY
    return CandidatePairs(scores, sources)


def retrieval_k(n_images: int, small_k: int = 5, large_k: int = 15,
                threshold: int = 500) -> int:
    """Per-image neighbor count: small_k below the image-count threshold, else large_k."""
    return small_k if n_images < threshold else large_k


def merge_candidates(a: CandidatePairs, b: CandidatePairs) -> CandidatePairs:
    """Deduplicated union.  On collision the higher score wins; a sequential
    tag survives a similarity tag."""
    scores = dict(a.scores)
    sources = dict(a.sources)
    for key, s in b.scores.items():
        if key not in scores:
            scores[key] = s
            sources[key] = b.sources[key]
        else:
            scores[key] = max(scores[key], s)
            if b.sources[key] == SOURCE_SEQUENTIAL:
                sources[key] = SOURCE_SEQUENTIAL
    return CandidatePairs(scores, sources)
