"""Ranking evaluation: CMC curves, mAP, and the view-information probe.

The protocol mirrors standard cross-camera retrieval: for each query,
gallery entries sharing both its identity and its camera view are
excluded, the rest are ranked by Euclidean distance, and the correct
identity's positions determine CMC and average precision. Precision sums
are accumulated as exact rationals and converted to float once, so two
implementations of the same definition agree bit-for-bit.

The view probe is a fresh linear softmax trained on frozen embeddings;
its held-out accuracy measures how much view information the embedding
still leaks (0.25 is chance at four balanced views).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import model as model_mod
from .errors import ValidationError
from .numcore import pairwise_sq_dist, rng_stream, softmax

STREAM_PROBE = 8_000_000

PROBE_STEPS = 300
PROBE_LR = 0.05
PROBE_TRAIN_FRACTION = 0.7


@dataclass
class EvalProtocol:
    exclude_same_view: bool = True
    normalize_features: bool = False
    max_rank: int = 10
    single_query: bool = True


@dataclass
class EvalReport:
    cmc: np.ndarray                 # cmc[r] = P(first match at rank <= r+1)
    mean_ap: float
    per_query_ap: list[float]
    view_probe_accuracy: float
    num_queries: int
    num_gallery: int
    metrics: dict[str, float] = field(default_factory=dict)


def rank_gallery(query_features: np.ndarray, gallery_features: np.ndarray) -> np.ndarray:
    """Per-query gallery indices by ascending Euclidean distance, stable ties."""
    if gallery_features.shape[0] == 0:
        raise ValidationError("cannot rank an empty gallery")
    if query_features.shape[1] != gallery_features.shape[1]:
        raise ValidationError(
            f"query dim {query_features.shape[1]} != gallery dim {gallery_features.shape[1]}"
        )
    dists = pairwise_sq_dist(query_features, gallery_features)
    return np.argsort(dists, axis=1, kind="stable")


def _kept_relevance(order: np.ndarray, q_id: int, q_cam: int, g_ids: np.ndarray,
                    g_cams: np.ndarray, protocol: EvalProtocol) -> np.ndarray:
    """Relevance of the ranked gallery after the exclusion rule, in rank order."""
    ranked_ids = g_ids[order]
    ranked_cams = g_cams[order]
    if protocol.exclude_same_view:
        keep = ~((ranked_ids == q_id) & (ranked_cams == q_cam))
    else:
        keep = np.ones(len(order), dtype=bool)
    return (ranked_ids[keep] == q_id)


def cmc_curve(rankings: np.ndarray, q_ids: np.ndarray, g_ids: np.ndarray,
              q_cams: np.ndarray, g_cams: np.ndarray, protocol: EvalProtocol) -> np.ndarray:
    """cmc[n-1] = fraction of queries whose first correct match has rank <= n."""
    num_q = rankings.shape[0]
    max_rank = min(protocol.max_rank, rankings.shape[1])
    hits = np.zeros(max_rank, dtype=np.int64)
    for q in range(num_q):
        rel = _kept_relevance(rankings[q], int(q_ids[q]), int(q_cams[q]),
                              g_ids, g_cams, protocol)
        positions = np.flatnonzero(rel)
        if len(positions) == 0:
            raise ValidationError(f"query {q} has no valid gallery match after exclusions")
        first = positions[0]
        if first < max_rank:
            hits[first:] += 1
    return hits / num_q


def average_precision(relevance: np.ndarray) -> Fraction:
    """AP of one ranked relevance list, exact: mean of precision at each hit."""
    positions = np.flatnonzero(relevance)
    if len(positions) == 0:
        raise ValidationError("average_precision needs at least one relevant entry")
    total = Fraction(0)
    for hit_number, pos in enumerate(positions, start=1):
        total += Fraction(hit_number, int(pos) + 1)
    return total / len(positions)


def map_score(rankings: np.ndarray, q_ids: np.ndarray, g_ids: np.ndarray,
              q_cams: np.ndarray, g_cams: np.ndarray,
              protocol: EvalProtocol) -> tuple[float, list[float]]:
    """Mean average precision and the per-query APs."""
    ap_fractions = []
    for q in range(rankings.shape[0]):
        rel = _kept_relevance(rankings[q], int(q_ids[q]), int(q_cams[q]),
                              g_ids, g_cams, protocol)
        if not rel.any():
            raise ValidationError(f"query {q} has no valid gallery match after exclusions")
        ap_fractions.append(average_precision(rel))
    mean_ap = float(sum(ap_fractions, Fraction(0)) / len(ap_fractions))
    return mean_ap, [float(ap) for ap in ap_fractions]


def view_probe(features: np.ndarray, view_labels: np.ndarray, seed: int) -> float:
    """Held-out accuracy of a fresh linear softmax predicting the view.

    Fixed budget (full-batch Adam from zero init), fixed seeded 70/30
    split. The probe is linear on purpose: the measurement must not depend
    on the capacity of the training-time adversary.
    """
    labels = np.asarray(view_labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValidationError("view probe needs at least two views present")
    n = features.shape[0]
    class_index = {int(c): i for i, c in enumerate(classes)}
    targets = np.array([class_index[int(v)] for v in labels])

    perm = rng_stream(seed, STREAM_PROBE).permutation(n)
    n_train = max(1, int(np.ceil(PROBE_TRAIN_FRACTION * n)))
    train_idx, test_idx = perm[:n_train], perm[n_train:]
    if len(test_idx) == 0:
        raise ValidationError(f"view probe needs enough samples for a held-out split, got {n}")

    x_train = features[train_idx]
    y_train = targets[train_idx]
    n_classes = len(classes)
    w = np.zeros((features.shape[1], n_classes))
    b = np.zeros(n_classes)
    one_hot = np.zeros((len(train_idx), n_classes))
    one_hot[np.arange(len(train_idx)), y_train] = 1.0

    m_w = np.zeros_like(w); v_w = np.zeros_like(w)
    m_b = np.zeros_like(b); v_b = np.zeros_like(b)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    for t in range(1, PROBE_STEPS + 1):
        probs = softmax(x_train @ w + b, axis=1)
        d_logits = (probs - one_hot) / len(train_idx)
        g_w = x_train.T @ d_logits
        g_b = d_logits.sum(axis=0)
        c1, c2 = 1.0 - beta1**t, 1.0 - beta2**t
        m_w = beta1 * m_w + (1 - beta1) * g_w
        v_w = beta2 * v_w + (1 - beta2) * g_w * g_w
        m_b = beta1 * m_b + (1 - beta1) * g_b
        v_b = beta2 * v_b + (1 - beta2) * g_b * g_b
        w -= PROBE_LR * (m_w / c1) / (np.sqrt(v_w / c2) + eps)
        b -= PROBE_LR * (m_b / c1) / (np.sqrt(v_b / c2) + eps)

    predictions = (features[test_idx] @ w + b).argmax(axis=1)
    return float((predictions == targets[test_idx]).mean())


def extract_features(extractor: model_mod.Mlp, images: np.ndarray,
                     normalize: bool = False) -> np.ndarray:
    feats, _ = model_mod.extractor_forward(extractor, images)
    if normalize:
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = feats / np.where(norms > 0, norms, 1.0)
    return feats


def evaluate(extractor: model_mod.Mlp, dataset, protocol: EvalProtocol,
             seed: int = 0) -> EvalReport:
    """Full report for one embedding model on a split dataset."""
    q_idx = dataset.query_indices()
    g_idx = dataset.gallery_indices()
    if len(q_idx) == 0 or len(g_idx) == 0:
        raise ValidationError("dataset has no query/gallery split; run the split first")
    q_feats = extract_features(extractor, dataset.flat_images(q_idx), protocol.normalize_features)
    g_feats = extract_features(extractor, dataset.flat_images(g_idx), protocol.normalize_features)
    rankings = rank_gallery(q_feats, g_feats)
    q_ids, g_ids = dataset.identities[q_idx], dataset.identities[g_idx]
    q_cams, g_cams = dataset.cameras[q_idx], dataset.cameras[g_idx]
    cmc = cmc_curve(rankings, q_ids, g_ids, q_cams, g_cams, protocol)
    mean_ap, per_query = map_score(rankings, q_ids, g_ids, q_cams, g_cams, protocol)

    eval_feats = np.concatenate([q_feats, g_feats], axis=0)
    eval_cams = np.concatenate([q_cams, g_cams])
    probe_acc = view_probe(eval_feats, eval_cams, seed)

    def rank_value(r: int) -> float:
        return float(cmc[min(r, len(cmc)) - 1])

    metrics = {
        "rank1": rank_value(1),
        "rank5": rank_value(5),
        "rank10": rank_value(10),
        "mAP": mean_ap,
        "view_probe_acc": probe_acc,
    }
    return EvalReport(cmc, mean_ap, per_query, probe_acc, len(q_idx), len(g_idx), metrics)
