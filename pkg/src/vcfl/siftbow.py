"""Local gradient descriptors, k-means visual vocabulary, bag-of-words encoding.

The descriptors are dense-grid, scale-invariant-style 128-d vectors
(4x4 spatial cells x 8 orientation bins over a 16x16 window): no keypoint
detection or scale pyramid, since the guidance signal only needs local
gradient structure that survives view changes. Normalized histograms of
gradient orientation are insensitive to the global illumination gain each
view applies, and coarse orientation bins tolerate the modest per-view
rotations -- that is what makes the encoding usable as a view-independent
guidance vector for the embedding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DataFormatError, ValidationError
from .numcore import pairwise_sq_dist, rng_stream

WINDOW = 16          # support window side, pixels
STRIDE = 8           # dense grid stride
CELLS = 4            # spatial cells per window side
ORIENT_BINS = 8
DESCRIPTOR_DIM = CELLS * CELLS * ORIENT_BINS  # 128
CLIP = 0.2           # per-entry clamp between the two normalizations
ENERGY_FLOOR = 1e-8  # windows below this total squared gradient are dropped
GAUSS_SIGMA = 8.0    # spatial weighting scale, half the window side

VOCAB_MAGIC = b"VCFLVOC1"
BOW_CACHE_MAGIC = b"VCFLVEC1"

STREAM_KMEANS = 7_000_000


class DescriptorSet(NamedTuple):
    """Descriptors for one image: (n,128) vectors and (n,2) keypoint centers."""

    vectors: np.ndarray
    positions: np.ndarray


@dataclass
class BowVocabulary:
    k: int
    centroids: np.ndarray  # (k, 128)
    seed: int = 0
    iterations: int = 0
    inertia: float = 0.0


@dataclass
class KmeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    iterations: int
    inertia: float
    inertia_history: list[float]


def _window_weights() -> np.ndarray:
    offs = np.arange(WINDOW, dtype=np.float64) - (WINDOW - 1) / 2.0
    d2 = offs[:, None] ** 2 + offs[None, :] ** 2
    return np.exp(-d2 / (2.0 * GAUSS_SIGMA**2))


_WEIGHTS = _window_weights()


def extract_descriptors(image: np.ndarray) -> DescriptorSet:
    """Dense descriptors over a stride-8 grid of 16x16 windows.

    Per window: central-difference gradients, an 8-bin orientation histogram
    per 4x4 cell weighted by Gaussian-attenuated gradient magnitude, then
    L2-normalize, clamp entries at 0.2, and renormalize. Windows with total
    gradient energy under 1e-8 are dropped, so a constant image yields an
    empty set.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < WINDOW or img.shape[1] < WINDOW:
        raise ValidationError(
            f"image must be at least {WINDOW}x{WINDOW} for descriptor extraction, "
            f"got {img.shape}"
        )
    gy, gx = np.gradient(img)
    magnitude = np.hypot(gx, gy)
    orientation = np.arctan2(gy, gx)
    # bin edges at -pi, -3pi/4, ...; the +pi boundary folds into the last bin
    bins = np.minimum((orientation + np.pi) / (2.0 * np.pi / ORIENT_BINS),
                      ORIENT_BINS - 1e-9).astype(np.int64)

    vectors = []
    positions = []
    cell = WINDOW // CELLS
    for r0 in range(0, img.shape[0] - WINDOW + 1, STRIDE):
        for c0 in range(0, img.shape[1] - WINDOW + 1, STRIDE):
            mag = magnitude[r0:r0 + WINDOW, c0:c0 + WINDOW]
            if float((mag * mag).sum()) < ENERGY_FLOOR:
                continue
            wmag = mag * _WEIGHTS
            b = bins[r0:r0 + WINDOW, c0:c0 + WINDOW]
            hist = np.zeros((CELLS, CELLS, ORIENT_BINS))
            for cr in range(CELLS):
                for cc in range(CELLS):
                    sub_b = b[cr * cell:(cr + 1) * cell, cc * cell:(cc + 1) * cell].ravel()
                    sub_w = wmag[cr * cell:(cr + 1) * cell, cc * cell:(cc + 1) * cell].ravel()
                    hist[cr, cc] = np.bincount(sub_b, weights=sub_w, minlength=ORIENT_BINS)
            vec = hist.ravel()
            norm = np.linalg.norm(vec)
            if norm <= 0.0:
                continue
            vec = np.minimum(vec / norm, CLIP)
            vec /= np.linalg.norm(vec)
            vectors.append(vec)
            positions.append((r0 + WINDOW / 2.0, c0 + WINDOW / 2.0))
    if not vectors:
        return DescriptorSet(np.empty((0, DESCRIPTOR_DIM)), np.empty((0, 2)))
    return DescriptorSet(np.array(vectors), np.array(positions))


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = pairwise_sq_dist(points, centroids[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centroids[i] = points[rng.integers(n)]
        else:
            centroids[i] = points[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, pairwise_sq_dist(points, centroids[i:i + 1])[:, 0])
    return centroids


def lloyd_kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
                 max_iters: int = 50) -> KmeansResult:
    """Lloyd iterations from a k-means++ start.

    An emptied cluster is reseeded to the point currently farthest from its
    assigned centroid. Stops when assignments stabilize or at max_iters.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise ValidationError(f"k-means needs at least k={k} points, got {n}")
    centroids = _kmeans_pp_init(points, k, rng)
    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    iterations = 0
    for iterations in range(1, max_iters + 1):
        dists = pairwise_sq_dist(points, centroids)
        new_assign = dists.argmin(axis=1)
        point_d = dists[np.arange(n), new_assign]
        for c in range(k):
            mask = new_assign == c
            if mask.any():
                centroids[c] = points[mask].mean(axis=0)
            else:
                farthest = int(point_d.argmax())
                centroids[c] = points[farthest]
                new_assign[farthest] = c
                point_d[farthest] = 0.0
        history.append(float(point_d.sum()))
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
    final_d = pairwise_sq_dist(points, centroids)
    assignments = final_d.argmin(axis=1)
    inertia = float(final_d[np.arange(n), assignments].sum())
    return KmeansResult(centroids, assignments, iterations, inertia, history)


def train_vocabulary(descriptors: np.ndarray, k: int, seed: int,
                     max_iters: int = 50) -> BowVocabulary:
    if k < 2:
        raise ValidationError(f"vocabulary size must be >= 2, got k={k}")
    if descriptors.shape[0] < k:
        raise ValidationError(
            f"need at least k={k} descriptors to train a vocabulary, "
            f"got {descriptors.shape[0]}"
        )
    result = lloyd_kmeans(descriptors, k, rng_stream(seed, STREAM_KMEANS), max_iters)
    return BowVocabulary(k, result.centroids, seed, result.iterations, result.inertia)


def bow_encode(image: np.ndarray, vocab: BowVocabulary) -> np.ndarray:
    """Unit-norm histogram of hard nearest-centroid descriptor assignments."""
    descriptors = extract_descriptors(image).vectors
    if descriptors.shape[0] == 0:
        raise ValidationError("flat image, no BoW encoding")
    return bow_encode_descriptors(descriptors, vocab)


def bow_encode_descriptors(descriptors: np.ndarray, vocab: BowVocabulary) -> np.ndarray:
    assign = pairwise_sq_dist(descriptors, vocab.centroids).argmin(axis=1)
    hist = np.bincount(assign, minlength=vocab.k).astype(np.float64)
    return hist / np.linalg.norm(hist)


def save_vocabulary(vocab: BowVocabulary, path: str) -> None:
    with open(path, "wb") as f:
        f.write(VOCAB_MAGIC)
        f.write(np.array([vocab.k, DESCRIPTOR_DIM], dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(vocab.centroids, dtype="<f8").tobytes())


def load_vocabulary(path: str) -> BowVocabulary:
    with open(path, "rb") as f:
        magic = f.read(len(VOCAB_MAGIC))
        if magic != VOCAB_MAGIC:
            raise DataFormatError(
                f"bad vocabulary magic at byte offset 0: expected {VOCAB_MAGIC!r}, got {magic!r}"
            )
        header = f.read(8)
        if len(header) != 8:
            raise DataFormatError(f"truncated vocabulary header at byte offset {f.tell() - len(header)}")
        k, dim = (int(v) for v in np.frombuffer(header, dtype="<u4"))
        if dim != DESCRIPTOR_DIM:
            raise DataFormatError(f"vocabulary descriptor dim {dim} != {DESCRIPTOR_DIM}")
        body = f.read(k * dim * 8)
        if len(body) != k * dim * 8:
            raise DataFormatError(f"truncated vocabulary data at byte offset {16 + len(body)}")
        centroids = np.frombuffer(body, dtype="<f8").reshape(k, dim).copy()
    return BowVocabulary(k, centroids)


def save_bow_cache(vectors: np.ndarray, path: str) -> None:
    """Cache file of per-sample BoW rows, row order = dataset sample order."""
    n, k = vectors.shape
    with open(path, "wb") as f:
        f.write(BOW_CACHE_MAGIC)
        f.write(np.array([n, k], dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(vectors, dtype="<f8").tobytes())


def load_bow_cache(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(len(BOW_CACHE_MAGIC))
        if magic != BOW_CACHE_MAGIC:
            raise DataFormatError(
                f"bad BoW cache magic at byte offset 0: expected {BOW_CACHE_MAGIC!r}, got {magic!r}"
            )
        header = f.read(8)
        if len(header) != 8:
            raise DataFormatError(f"truncated BoW cache header at byte offset {f.tell() - len(header)}")
        n, k = (int(v) for v in np.frombuffer(header, dtype="<u4"))
        body = f.read(n * k * 8)
        if len(body) != n * k * 8:
            raise DataFormatError(f"truncated BoW cache data at byte offset {16 + len(body)}")
        return np.frombuffer(body, dtype="<f8").reshape(n, k).copy()
