"""Online/offline model cooperation mechanics.

Three pieces: prediction fusion (summing the two models' logits), the
intra-client mutual-distillation phase driven by frozen teacher copies, and
the inter-client transfer loss that pushes local features toward other
clients' frozen offline classifiers. The mutual phase runs both teacher and
student with eval-mode BN so a student initialized at its teacher sees a
zero KL gradient and stays put; BN statistics refresh during the adaptation
phase instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import MLPConfig, ModelOutput, ParamSet, apply_classifier, clone_frozen, forward
from .numerics import (Tape, Tensor, add, backward, kl_divergence, scale,
                       sgd_step, softmax_cross_entropy)


class FrozenTeacherError(ValueError):
    """A teacher or transferred classifier was not fully frozen."""


@dataclass
class FusionRule:
    """Positive weights for combining online and offline logits."""

    w_on: float = 1.0
    w_off: float = 1.0

    def __post_init__(self):
        if self.w_on <= 0 or self.w_off <= 0:
            raise ValueError("fusion weights must be positive")


@dataclass
class ClassifierSet:
    """Frozen offline classifiers received from other clients."""

    entries: list[tuple[int, ParamSet]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def fuse_predictions(on_logits: Tensor, off_logits: Tensor,
                     rule: FusionRule | None = None) -> Tensor:
    """Weighted sum of the two logit tensors (default weights 1, 1)."""
    rule = rule or FusionRule()
    if on_logits.data.shape != off_logits.data.shape:
        raise ValueError(
            f"fusion shapes {on_logits.data.shape} vs {off_logits.data.shape}")
    return Tensor(rule.w_on * on_logits.data + rule.w_off * off_logits.data)


def build_classifier_set(uploads: list[tuple[int, ParamSet]]) -> ClassifierSet:
    """Deep-copy uploaded classifiers and freeze every entry."""
    ids = [cid for cid, _ in uploads]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in classifier uploads: {sorted(ids)}")
    return ClassifierSet([(cid, clone_frozen(params)) for cid, params in uploads])


def _require_frozen(params: ParamSet, what: str) -> None:
    if set(params.blocks) - params.frozen:
        raise FrozenTeacherError(f"{what} has unfrozen blocks")


def mutual_learning_step(cfg: MLPConfig, online: ParamSet, offline: ParamSet,
                         teacher_online: ParamSet, teacher_offline: ParamSet,
                         batch_x: Tensor, lr: float) -> None:
    """One step of mutual distillation between the online and offline models.

    The offline teacher guides the online student and vice versa; both
    gradients are taken from the pre-step parameters, so the two updates are
    order-independent. Updates happen in place.
    """
    _require_frozen(teacher_online, "online teacher")
    _require_frozen(teacher_offline, "offline teacher")
    if batch_x.data.shape[0] < 1:
        raise ValueError("mutual learning needs a nonempty batch")
    teach_on = forward(teacher_online, cfg, batch_x, mode="eval").logits
    teach_off = forward(teacher_offline, cfg, batch_x, mode="eval").logits

    tape = Tape()
    student = forward(online, cfg, batch_x, mode="eval", tape=tape)
    loss = kl_divergence(teach_off, student.logits, tape)
    backward(tape, loss)
    grads_online = online.take_grads()

    tape = Tape()
    student = forward(offline, cfg, batch_x, mode="eval", tape=tape)
    loss = kl_divergence(teach_on, student.logits, tape)
    backward(tape, loss)
    grads_offline = offline.take_grads()

    sgd_step(online, grads_online, lr)
    sgd_step(offline, grads_offline, lr)


def _generalization_loss(features: Tensor, labels: np.ndarray,
                         classifier_set: ClassifierSet, own_id: int,
                         tape: Tape | None) -> Tensor | None:
    total: Tensor | None = None
    for cid, clf in classifier_set.entries:
        if cid == own_id:
            continue
        _require_frozen(clf, f"transferred classifier from client {cid}")
        head_w = clf.blocks["head.weight"]
        if head_w.data.shape[0] != features.data.shape[1]:
            raise ValueError(
                f"classifier from client {cid} expects feature width "
                f"{head_w.data.shape[0]}, got {features.data.shape[1]}")
        ce = softmax_cross_entropy(apply_classifier(clf, features, tape), labels, tape)
        total = ce if total is None else add(total, ce, tape)
    return total


def inter_client_loss(features_fn, classifier_set: ClassifierSet, own_id: int,
                      batch: tuple[Tensor, np.ndarray],
                      tape: Tape | None = None) -> Tensor:
    """Sum of cross-entropies of foreign frozen classifiers on own features.

    Entries matching ``own_id`` are skipped; an empty sum is exactly zero.
    Gradients reach only the feature extractor (classifier entries are
    frozen and detached).
    """
    x, y = batch
    total = _generalization_loss(features_fn(x), y, classifier_set, own_id, tape)
    return total if total is not None else Tensor(0.0)


def adaptation_loss(model: ParamSet, cfg: MLPConfig, classifier_set: ClassifierSet,
                    own_id: int, batch: tuple[Tensor, np.ndarray], mu: float,
                    tape: Tape | None = None) -> tuple[Tensor, ModelOutput]:
    """Local-adaptation objective: cross-entropy plus mu times the
    inter-client transfer loss, sharing one forward pass."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    x, y = batch
    out = forward(model, cfg, x, mode="train", tape=tape)
    loss = softmax_cross_entropy(out.logits, y, tape)
    if mu > 0:
        gen = _generalization_loss(out.features, y, classifier_set, own_id, tape)
        if gen is not None:
            loss = add(loss, scale(gen, mu, tape), tape)
    return loss, out
