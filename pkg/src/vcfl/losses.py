"""Loss heads and their gradients with respect to the embedding batch.

Every head returns (scalar loss, gradient w.r.t. features) and averages
over the batch, so the loss weights are batch-size independent. The
view cross-entropy against the common-view class is the adversarial
pressure that reaches the extractor through a frozen classifier.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .model import COMMON_VIEW_CLASS
from .numcore import pairwise_sq_dist

logger = logging.getLogger(__name__)


@dataclass
class LossWeights:
    """Combination weights for the extractor objective, plus the margin."""

    lambda_adv: float = 0.5    # adversarial (common-view) pressure
    lambda_fc: float = 1e-4    # feature-confusion (center) term
    lambda_sg: float = 0.1     # descriptor-guidance term
    lambda_trip: float = 1.0   # ranking (triplet) term
    margin: float = 0.3

    def validate(self) -> None:
        vals = (self.lambda_adv, self.lambda_fc, self.lambda_sg, self.lambda_trip, self.margin)
        if any(v < 0 for v in vals):
            raise ValidationError(f"loss weights must be non-negative, got {self}")


@dataclass
class CenterTable:
    """Per-identity feature centers with their own update rate."""

    centers: np.ndarray        # (num_identities, D)
    identity_rows: dict[int, int]
    alpha: float = 0.5

    @classmethod
    def from_features(cls, features: np.ndarray, identities: np.ndarray,
                      alpha: float = 0.5) -> "CenterTable":
        """One center per identity, initialized to its mean feature."""
        ids = np.unique(identities)
        centers = np.empty((len(ids), features.shape[1]))
        rows = {}
        for row, identity in enumerate(ids):
            centers[row] = features[identities == identity].mean(axis=0)
            rows[int(identity)] = row
        return cls(centers, rows, alpha)

    def rows_for(self, identities: np.ndarray) -> np.ndarray:
        try:
            return np.array([self.identity_rows[int(i)] for i in identities], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"identity {exc.args[0]} has no feature center") from None

    def checksum(self) -> bytes:
        return hashlib.sha256(self.centers.tobytes()).digest()


@dataclass
class TripletSelection:
    """Batch-hard choice per anchor: farthest positive, nearest negative."""

    positive_index: np.ndarray
    negative_index: np.ndarray
    positive_dist: np.ndarray
    negative_dist: np.ndarray


def batch_hard_select(features: np.ndarray, identities: np.ndarray) -> TripletSelection:
    """Hardest positive/negative per anchor under Euclidean distance.

    Ties resolve to the lowest index. Requires every identity to appear at
    least twice and at least two identities in the batch.
    """
    identities = np.asarray(identities)
    n = features.shape[0]
    if n != identities.shape[0]:
        raise ValueError(f"features ({n}) and identities ({identities.shape[0]}) disagree")
    ids, counts = np.unique(identities, return_counts=True)
    if len(ids) < 2:
        raise ValidationError("batch-hard mining needs at least two identities in the batch")
    lonely = ids[counts < 2]
    if len(lonely):
        raise ValidationError(f"identity {int(lonely[0])} has a single sample in the batch; "
                              "no positive pair exists")
    dist = np.sqrt(pairwise_sq_dist(features, features))
    same = identities[:, None] == identities[None, :]
    pos_d = np.where(same & ~np.eye(n, dtype=bool), dist, -np.inf)
    neg_d = np.where(~same, dist, np.inf)
    pos_idx = pos_d.argmax(axis=1)
    neg_idx = neg_d.argmin(axis=1)
    rows = np.arange(n)
    return TripletSelection(pos_idx, neg_idx, dist[rows, pos_idx], dist[rows, neg_idx])


def _unit_difference(features: np.ndarray, anchor: np.ndarray, other: np.ndarray,
                     dist: np.ndarray) -> np.ndarray:
    """(f_a - f_o) / d with subgradient 0 where the pair distance is 0."""
    diff = features[anchor] - features[other]
    safe = np.where(dist > 0.0, dist, 1.0)
    out = diff / safe[:, None]
    out[dist == 0.0] = 0.0
    return out


def triplet_loss(features: np.ndarray, selection: TripletSelection,
                 margin: float) -> tuple[float, np.ndarray]:
    """Mean hinge over anchors: [d(a,p) - d(a,n) + margin]_+ ."""
    n = features.shape[0]
    terms = selection.positive_dist - selection.negative_dist + margin
    active = terms > 0.0
    loss = float(np.maximum(terms, 0.0).mean())
    grad = np.zeros_like(features)
    if active.any():
        anchors = np.flatnonzero(active)
        e_pos = _unit_difference(features, anchors, selection.positive_index[anchors],
                                 selection.positive_dist[anchors])
        e_neg = _unit_difference(features, anchors, selection.negative_index[anchors],
                                 selection.negative_dist[anchors])
        for row, a in enumerate(anchors):
            grad[a] += (e_pos[row] - e_neg[row]) / n
            grad[selection.positive_index[a]] -= e_pos[row] / n
            grad[selection.negative_index[a]] += e_neg[row] / n
    return loss, grad


def center_loss(features: np.ndarray, identities: np.ndarray,
                table: CenterTable) -> tuple[float, np.ndarray]:
    """Half the mean squared distance of each feature to its identity center."""
    rows = table.rows_for(identities)
    diff = features - table.centers[rows]
    n = features.shape[0]
    loss = float(0.5 * (diff * diff).sum() / n)
    return loss, diff / n


def update_centers(table: CenterTable, features: np.ndarray, identities: np.ndarray) -> None:
    """Move each present identity's center toward its batch-mean feature.

    C <- C - alpha * (C - mean), a contraction by (1 - alpha); identities
    absent from the batch are untouched.
    """
    if not 0.0 <= table.alpha <= 1.0:
        raise ValidationError(f"center update rate must lie in [0,1], got {table.alpha}")
    for identity in np.unique(identities):
        row = table.rows_for(np.array([identity]))[0]
        mean = features[identities == identity].mean(axis=0)
        table.centers[row] -= table.alpha * (table.centers[row] - mean)


def sift_guided_loss(features: np.ndarray, bow: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared distance between unit-normalized features and BoW targets.

    The gradient is propagated through the normalization. Zero-norm feature
    rows contribute ||bow||^2 with subgradient zero (counted and logged).
    """
    if features.shape != bow.shape:
        raise ValueError(f"features {features.shape} and BoW targets {bow.shape} disagree")
    n = features.shape[0]
    norms = np.linalg.norm(features, axis=1)
    zero_rows = norms == 0.0
    if zero_rows.any():
        logger.warning("sift_guided_loss: %d zero-norm feature rows get subgradient 0",
                       int(zero_rows.sum()))
    safe = np.where(zero_rows, 1.0, norms)
    unit = features / safe[:, None]
    unit[zero_rows] = 0.0
    err = unit - bow
    loss = float((err * err).sum() / n)
    radial = (unit * err).sum(axis=1, keepdims=True)
    grad = 2.0 * (err - radial * unit) / (n * safe[:, None])
    grad[zero_rows] = 0.0
    return loss, grad


def view_cross_entropy(probs: np.ndarray, targets: np.ndarray | None, mode: str) -> float:
    """Mean cross-entropy against true views ('true') or the common class ('common')."""
    n, c = probs.shape
    if mode == "true":
        idx = np.asarray(targets, dtype=np.int64)
        if idx.shape != (n,):
            raise ValueError(f"expected {n} targets, got shape {idx.shape}")
        if idx.min() < 0 or idx.max() >= COMMON_VIEW_CLASS:
            raise ValidationError(f"true-view targets must lie in 0..{COMMON_VIEW_CLASS - 1}, "
                                  f"got range [{idx.min()}, {idx.max()}]")
    elif mode == "common":
        if targets is not None:
            idx = np.asarray(targets, dtype=np.int64)
            if not np.all(idx == COMMON_VIEW_CLASS):
                raise ValidationError("common-view mode requires every target to be the "
                                      f"common class {COMMON_VIEW_CLASS}")
        idx = np.full(n, COMMON_VIEW_CLASS, dtype=np.int64)
    else:
        raise ValueError(f"unknown view cross-entropy mode {mode!r}")
    picked = probs[np.arange(n), idx]
    return float(-np.log(picked).mean())


def combined_feature_loss(parts: dict[str, tuple[float, np.ndarray]],
                          weights: LossWeights) -> tuple[float, np.ndarray]:
    """Weighted sum of per-head (loss, feature-gradient) pairs.

    Keys: 'triplet', 'center', 'sift', 'adversarial'. Absent heads simply
    do not contribute.
    """
    weight_of = {
        "triplet": weights.lambda_trip,
        "center": weights.lambda_fc,
        "sift": weights.lambda_sg,
        "adversarial": weights.lambda_adv,
    }
    unknown = set(parts) - set(weight_of)
    if unknown:
        raise ValueError(f"unknown loss heads: {sorted(unknown)}")
    if not parts:
        raise ValueError("combined_feature_loss needs at least one head")
    total = 0.0
    grad: np.ndarray | None = None
    for name, (value, g) in parts.items():
        w = weight_of[name]
        total += w * value
        grad = w * g if grad is None else grad + w * g
    assert grad is not None
    return total, grad
