"""Alternating adversarial training loop.

Each iteration draws one P x K batch from a per-step random stream, runs
one extractor update (SGD with momentum and weight decay on the combined
feature objective) and, when classifier confusion is enabled, one
classifier update (Adam on the true-view cross-entropy, scaled by the
adversarial weight). The two phases never touch each other's parameters;
an optional audit hashes both networks around every phase to prove it.

A short warm-up of triplet-only extractor steps precedes the alternation
so the confusion terms act on features that already carry identity
structure. All batch streams are indexed by step number, so a resumed run
replays the exact same batches as an uninterrupted one.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataset as ds_mod
from . import losses as loss_mod
from . import model as model_mod
from . import siftbow as bow_mod
from .errors import NumericError, ValidationError
from .numcore import rng_stream

STREAM_BATCH = 5_000_000
STREAM_CLASSIFIER_BATCH = 5_500_000

LOG_COLUMNS = ("step", "phase", "L_trip", "L_fc", "L_sg", "L_d_minus", "L_d_plus",
               "mean_p_common", "lr_f", "lr_d")


@dataclass
class TrainConfig:
    batch_p: int = 8
    batch_k: int = 4
    total_steps: int = 400
    warmup_frac: float = 0.1
    extractor_lr: float = 0.05
    lr_policy: str = "step"                      # "step" or "fixed"
    lr_milestones: tuple[float, ...] = (0.5, 0.8)  # fractions of total_steps, /10 each
    momentum: float = 0.9
    weight_decay: float = 2e-4
    classifier_lr0: float = 0.01
    sched_alpha: float = 10.0
    sched_beta: float = 0.75
    classifier_steps: int = 1                    # classifier updates per iteration
    center_alpha: float = 0.5
    weights: loss_mod.LossWeights = field(default_factory=loss_mod.LossWeights)
    use_classifier_confusion: bool = True
    use_feature_confusion: bool = True
    use_sift_confusion: bool = True
    feature_dim: int = 64
    hidden_dims: tuple[int, int] = (256, 128)
    classifier_hidden: int = 32
    seed: int = 0
    checkpoint_interval: int = 200

    def validate(self) -> None:
        if self.total_steps < 0:
            raise ValidationError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.extractor_lr <= 0 or self.classifier_lr0 <= 0:
            raise ValidationError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must lie in [0,1), got {self.momentum}")
        if self.lr_policy not in ("step", "fixed"):
            raise ValidationError(f"lr_policy must be 'step' or 'fixed', got {self.lr_policy!r}")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValidationError(f"warmup_frac must lie in [0,1], got {self.warmup_frac}")
        if self.classifier_steps < 1:
            raise ValidationError("classifier_steps must be >= 1")
        self.weights.validate()


def paper_preset(config: TrainConfig | None = None) -> TrainConfig:
    """The published batch structure: 30 identities x 10 samples."""
    base = config if config is not None else TrainConfig()
    return replace(base, batch_p=30, batch_k=10)


def lr_schedule(progress: float, lr0: float, alpha: float = 10.0, beta: float = 0.75) -> float:
    """Inverse-decay schedule lr0 / (1 + alpha * p) ** beta for p in [0,1]."""
    if not 0.0 <= progress <= 1.0:
        raise ValidationError(f"schedule progress must lie in [0,1], got {progress}")
    return lr0 / (1.0 + alpha * progress) ** beta


@dataclass
class SgdState:
    velocity: list[np.ndarray]

    @classmethod
    def zeros_like(cls, tensors: list[np.ndarray]) -> "SgdState":
        return cls([np.zeros_like(t) for t in tensors])


def sgd_step(tensors: list[np.ndarray], grads: list[np.ndarray], lr: float,
             momentum: float, weight_decay: float, state: SgdState) -> None:
    """In-place momentum SGD: v <- m*v + (g + wd*p); p <- p - lr*v."""
    if len(tensors) != len(grads) or len(tensors) != len(state.velocity):
        raise ValueError("sgd_step: tensor/grad/state length mismatch")
    for p, g, v in zip(tensors, grads, state.velocity):
        if p.shape != g.shape:
            raise ValueError(f"sgd_step shape mismatch: param {p.shape} vs grad {g.shape}")
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, tensors: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(t) for t in tensors],
                   [np.zeros_like(t) for t in tensors], 0)


def adam_step(tensors: list[np.ndarray], grads: list[np.ndarray], lr: float,
              state: AdamState, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """In-place bias-corrected adaptive-moment update."""
    if len(tensors) != len(grads) or len(tensors) != len(state.m):
        raise ValueError("adam_step: tensor/grad/state length mismatch")
    state.t += 1
    correct1 = 1.0 - beta1 ** state.t
    correct2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(tensors, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"adam_step shape mismatch: param {p.shape} vs grad {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / correct1) / (np.sqrt(v / correct2) + eps)


def format_log_row(record: dict) -> list[str]:
    row = []
    for col in LOG_COLUMNS:
        value = record.get(col)
        if value is None:
            row.append("")
        elif col in ("step", "phase"):
            row.append(str(value))
        else:
            row.append(repr(float(value)))
    return row


def write_log_csv(records: list[dict], path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_COLUMNS)
        for record in records:
            writer.writerow(format_log_row(record))


class Trainer:
    """Owns the single mutable copy of both networks, centers, and optimizers."""

    def __init__(self, config: TrainConfig, dataset: ds_mod.SynthDataset,
                 vocab: bow_mod.BowVocabulary | None = None,
                 bow_cache: np.ndarray | None = None):
        config.validate()
        self.config = config
        self.dataset = dataset
        h, w = dataset.image_shape
        if config.use_sift_confusion:
            if vocab is None and bow_cache is None:
                raise ValidationError("sift confusion is enabled but no vocabulary was given")
            if vocab is not None and vocab.k != config.feature_dim:
                raise ValidationError(
                    f"vocabulary size {vocab.k} must equal the feature dim "
                    f"{config.feature_dim} for descriptor guidance"
                )
            if bow_cache is not None and bow_cache.shape != (len(dataset), config.feature_dim):
                raise ValidationError(
                    f"BoW cache shape {bow_cache.shape} does not match "
                    f"({len(dataset)}, {config.feature_dim})"
                )
        self.vocab = vocab
        self.extractor = model_mod.init_extractor(h * w, config.feature_dim, config.seed,
                                                  config.hidden_dims)
        self.classifier = model_mod.init_classifier(config.feature_dim, config.seed,
                                                    config.classifier_hidden)
        self.opt_extractor = SgdState.zeros_like(self.extractor.tensors())
        self.opt_classifier = AdamState.zeros_like(self.classifier.tensors())
        self.centers = self._initial_centers()
        self.bow: np.ndarray | None = None
        if config.use_sift_confusion:
            self.bow = bow_cache if bow_cache is not None else self._precompute_bow()
        self.step = 0
        self.records: list[dict] = []
        self.last_checkpoint_path: str | None = None

    # -- setup ------------------------------------------------------------

    def _initial_centers(self) -> loss_mod.CenterTable:
        idx = self.dataset.train_indices()
        if len(idx) == 0:
            raise ValidationError("dataset has no train samples; run the split first")
        feats, _ = model_mod.extractor_forward(self.extractor, self.dataset.flat_images(idx))
        return loss_mod.CenterTable.from_features(feats, self.dataset.identities[idx],
                                                  self.config.center_alpha)

    def _precompute_bow(self) -> np.ndarray:
        """BoW row per dataset sample (train rows are the ones consumed)."""
        assert self.vocab is not None
        n = len(self.dataset)
        out = np.zeros((n, self.vocab.k))
        for i in self.dataset.train_indices():
            out[i] = bow_mod.bow_encode(self.dataset.images[i], self.vocab)
        return out

    # -- schedules ---------------------------------------------------------

    def extractor_lr_at(self, step: int) -> float:
        lr = self.config.extractor_lr
        if self.config.lr_policy == "step":
            total = max(1, self.config.total_steps)
            for frac in self.config.lr_milestones:
                if step >= math.floor(frac * total):
                    lr /= 10.0
        return lr

    def classifier_lr_at(self, step: int) -> float:
        progress = step / max(1, self.config.total_steps)
        return lr_schedule(min(progress, 1.0), self.config.classifier_lr0,
                           self.config.sched_alpha, self.config.sched_beta)

    def warmup_steps(self) -> int:
        return int(round(self.config.warmup_frac * self.config.total_steps))

    def batch_for_step(self, step: int) -> ds_mod.PkBatch:
        rng = rng_stream(self.config.seed, STREAM_BATCH + step)
        return ds_mod.sample_pk_batch(self.dataset, self.config.batch_p,
                                      self.config.batch_k, rng)

    # -- phases ------------------------------------------------------------

    def extractor_phase(self, batch: ds_mod.PkBatch, warmup: bool = False) -> dict:
        """One SGD update of the extractor; the classifier is read-only here."""
        cfg = self.config
        idx = batch.flat()
        images = self.dataset.flat_images(idx)
        identities = self.dataset.identities[idx]
        features, cache = model_mod.extractor_forward(self.extractor, images)

        parts: dict[str, tuple[float, np.ndarray]] = {}
        record: dict = {"step": self.step, "phase": "f"}
        selection = loss_mod.batch_hard_select(features, identities)
        parts["triplet"] = loss_mod.triplet_loss(features, selection, cfg.weights.margin)
        record["L_trip"] = parts["triplet"][0]

        use_center = cfg.use_feature_confusion and not warmup
        use_sift = cfg.use_sift_confusion and not warmup
        use_adv = cfg.use_classifier_confusion and not warmup
        if use_center:
            parts["center"] = loss_mod.center_loss(features, identities, self.centers)
            record["L_fc"] = parts["center"][0]
        if use_sift:
            assert self.bow is not None
            parts["sift"] = loss_mod.sift_guided_loss(features, self.bow[idx])
            record["L_sg"] = parts["sift"][0]
        if use_adv:
            _, probs, clf_cache = model_mod.classifier_forward(self.classifier, features)
            loss_dm = loss_mod.view_cross_entropy(probs, None, "common")
            grad_dm = model_mod.classifier_input_gradient(self.classifier, clf_cache, "common")
            parts["adversarial"] = (loss_dm, grad_dm)
            record["L_d_minus"] = loss_dm
            record["mean_p_common"] = float(probs[:, model_mod.COMMON_VIEW_CLASS].mean())

        total, d_features = loss_mod.combined_feature_loss(parts, cfg.weights)
        if not np.isfinite(total):
            raise NumericError(self._diverged_message(total))
        grads = model_mod.extractor_backward(self.extractor, cache, d_features)
        lr = self.extractor_lr_at(self.step)
        sgd_step(self.extractor.tensors(), grads.tensors(), lr,
                 cfg.momentum, cfg.weight_decay, self.opt_extractor)
        if use_center:
            loss_mod.update_centers(self.centers, features, identities)
        record["lr_f"] = lr
        return record

    def classifier_phase(self, batch: ds_mod.PkBatch) -> dict:
        """One Adam update of the classifier on true view labels; extractor frozen."""
        cfg = self.config
        idx = batch.flat()
        images = self.dataset.flat_images(idx)
        views = self.dataset.views[idx]
        features, _ = model_mod.extractor_forward(self.extractor, images)
        _, probs, clf_cache = model_mod.classifier_forward(self.classifier, features)
        loss_dp = loss_mod.view_cross_entropy(probs, views, "true")
        if not np.isfinite(loss_dp):
            raise NumericError(self._diverged_message(loss_dp))
        grads, _ = model_mod.classifier_backward(self.classifier, clf_cache, views, "true")
        scaled = [cfg.weights.lambda_adv * g for g in grads.tensors()]
        lr = self.classifier_lr_at(self.step)
        adam_step(self.classifier.tensors(), scaled, lr, self.opt_classifier)
        return {
            "step": self.step,
            "phase": "d",
            "L_d_plus": loss_dp,
            "mean_p_common": float(probs[:, model_mod.COMMON_VIEW_CLASS].mean()),
            "lr_d": lr,
        }

    def _diverged_message(self, value: float) -> str:
        where = (f"; last good checkpoint: {self.last_checkpoint_path}"
                 if self.last_checkpoint_path else "")
        return f"non-finite loss ({value}) at step {self.step}{where}"

    # -- loop ---------------------------------------------------------------

    def run(self, out_dir: str | None = None, audit: bool = False) -> list[dict]:
        """Run from the current step to total_steps; returns the log records."""
        cfg = self.config
        warmup = self.warmup_steps()
        while self.step < cfg.total_steps:
            batch = self.batch_for_step(self.step)
            in_warmup = self.step < warmup

            if audit:
                before_d = self.classifier.checksum()
            self.records.append(self.extractor_phase(batch, warmup=in_warmup))
            if audit and self.classifier.checksum() != before_d:
                raise AssertionError(f"classifier changed during extractor phase {self.step}")

            if cfg.use_classifier_confusion and not in_warmup:
                for sub in range(cfg.classifier_steps):
                    if sub == 0:
                        clf_batch = batch
                    else:
                        rng = rng_stream(cfg.seed, STREAM_CLASSIFIER_BATCH
                                         + self.step * cfg.classifier_steps + sub)
                        clf_batch = ds_mod.sample_pk_batch(self.dataset, cfg.batch_p,
                                                           cfg.batch_k, rng)
                    if audit:
                        before_f = self.extractor.checksum()
                    self.records.append(self.classifier_phase(clf_batch))
                    if audit and self.extractor.checksum() != before_f:
                        raise AssertionError(
                            f"extractor changed during classifier phase {self.step}")

            self.step += 1
            if out_dir and cfg.checkpoint_interval > 0 and self.step % cfg.checkpoint_interval == 0:
                self.save_checkpoint(os.path.join(out_dir, f"step_{self.step:06d}.ckpt"))
        if out_dir:
            self.save_checkpoint(os.path.join(out_dir, "final.ckpt"))
        return self.records

    # -- checkpointing -------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors: dict[str, np.ndarray] = {}
        tensors.update(model_mod.mlp_tensor_dict("extractor", self.extractor))
        tensors.update(model_mod.mlp_tensor_dict("classifier", self.classifier))
        ids = sorted(self.centers.identity_rows, key=self.centers.identity_rows.get)
        tensors["centers.ids"] = np.array(ids, dtype=np.float64)
        tensors["centers.values"] = self.centers.centers
        for i, v in enumerate(self.opt_extractor.velocity):
            tensors[f"opt_f.v{i}"] = v
        for i, m in enumerate(self.opt_classifier.m):
            tensors[f"opt_d.m{i}"] = m
        for i, v in enumerate(self.opt_classifier.v):
            tensors[f"opt_d.v{i}"] = v
        tensors["opt_d.t"] = np.array([float(self.opt_classifier.t)])
        return tensors

    def save_checkpoint(self, path: str) -> str:
        model_mod.save_tensors(path, self.step, self.state_tensors())
        self.last_checkpoint_path = path
        return path

    def load_checkpoint(self, path: str) -> None:
        step, tensors = model_mod.load_tensors(path)
        extractor = model_mod.mlp_from_tensors("extractor", tensors)
        h, w = self.dataset.image_shape
        if extractor.input_dim != h * w:
            raise ValidationError(
                f"checkpoint extractor input dim {extractor.input_dim} does not match "
                f"dataset image size {h * w} ({h}x{w})"
            )
        if extractor.output_dim != self.config.feature_dim:
            raise ValidationError(
                f"checkpoint feature dim {extractor.output_dim} does not match "
                f"configured feature dim {self.config.feature_dim}"
            )
        self.extractor = extractor
        self.classifier = model_mod.mlp_from_tensors("classifier", tensors)
        ids = [int(v) for v in tensors["centers.ids"]]
        self.centers = loss_mod.CenterTable(tensors["centers.values"],
                                            {identity: row for row, identity in enumerate(ids)},
                                            self.config.center_alpha)
        self.opt_extractor = SgdState([tensors[f"opt_f.v{i}"]
                                       for i in range(len(self.extractor.tensors()))])
        n_clf = len(self.classifier.tensors())
        self.opt_classifier = AdamState([tensors[f"opt_d.m{i}"] for i in range(n_clf)],
                                        [tensors[f"opt_d.v{i}"] for i in range(n_clf)],
                                        int(tensors["opt_d.t"][0]))
        self.step = step


def train(config: TrainConfig, dataset: ds_mod.SynthDataset,
          vocab: bow_mod.BowVocabulary | None = None, out_dir: str | None = None,
          resume: str | None = None, audit: bool = False,
          bow_cache: np.ndarray | None = None) -> tuple[Trainer, list[dict]]:
    """Convenience wrapper: build a Trainer, optionally resume, run to the end."""
    trainer = Trainer(config, dataset, vocab, bow_cache=bow_cache)
    if resume is not None:
        trainer.load_checkpoint(resume)
    records = trainer.run(out_dir=out_dir, audit=audit)
    return trainer, records
