"""Classifier training on (optionally) masked inputs, with per-epoch
evaluation and label relabeling.

The mask generator is frozen here: its scores for a fixed image never
change during classifier training, so every masked view is precomputed
once and the classifier trains on plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mgn as mgn_mod
from . import tensor as T
from .data import compute_metrics
from .errors import NumericError
from .relabel import RelabelPolicy, ThresholdFn, decide, relabel_pass
from .tensor import Tape, Tensor, backward


def predict_logits(model, images, batch=256):
    """Grad-free forward over an [n, H, W, C] array."""
    outs = []
    for start in range(0, len(images), batch):
        outs.append(model.forward(Tensor(images[start:start + batch])).data)
    return np.concatenate(outs, axis=0)


def softmax_rows(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mask_scores(gen, images, batch=256):
    """Frozen-generator patch scores for an [n, H, W, C] array."""
    outs = []
    for start in range(0, len(images), batch):
        outs.append(mgn_mod.gen_patch_masks(Tensor(images[start:start + batch]), gen).data)
    return np.concatenate(outs, axis=0)


def masked_images(gen, images, batch=256):
    """Deployment view of every image: pixels weighted by 1 - patch score."""
    scores = mask_scores(gen, images, batch=batch)
    out = np.empty_like(images)
    for start in range(0, len(images), batch):
        view = mgn_mod.deployment_view(Tensor(images[start:start + batch]),
                                       Tensor(scores[start:start + batch]),
                                       gen.patch_side)
        out[start:start + batch] = view.data
    return out


def evaluate_model(model, images, labels, classes=None, batch=256):
    """Metrics over already-preprocessed inputs."""
    logits = predict_logits(model, images, batch=batch)
    predictions = logits.argmax(axis=-1)
    return compute_metrics(predictions, labels, classes=classes), predictions


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    relabel_active: bool = False
    relabel_changed: int = 0
    relabel_precision: float | None = None
    relabel_recall: float | None = None


@dataclass
class DecisionRecord:
    """One relabel decision plus the constant-threshold reference verdict."""

    epoch: int
    sample_id: int
    given_prob: float
    top_prob: float
    threshold: float
    changed: bool
    changed_constant_ref: bool


def train_classifier(model, optimizer, train_images, train_labels, test_images,
                     test_labels, epochs, batch_size, rng, relabel_policy=None,
                     audit_truth=None, on_epoch=None):
    """Train in place; returns (epoch records, relabel decision records).

    `train_labels` is mutated by relabel passes. `audit_truth` is optional
    hidden ground truth used only for relabel precision/recall statistics.
    """
    n = len(train_images)
    bs = min(batch_size, n)
    usable = (n // bs) * bs           # drop a trailing partial batch
    records = []
    decision_records = []
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        hit = 0
        for start in range(0, usable, bs):
            idx = order[start:start + bs]
            xb = Tensor(train_images[idx])
            yb = train_labels[idx]
            with Tape() as tape:
                logits = model.forward(xb)
                loss = T.cross_entropy(logits, yb)
                backward(loss, tape)
            step += 1
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at training step {step}")
            optimizer.step()
            optimizer.zero_grad()
            loss_sum += value * len(idx)
            hit += int((logits.data.argmax(axis=-1) == yb).sum())
        train_loss = loss_sum / usable
        train_acc = hit / usable
        optimizer.end_epoch()

        test_metrics, _ = evaluate_model(model, test_images, test_labels)
        record = EpochRecord(epoch=epoch, lr=optimizer.lr, train_loss=train_loss,
                             train_accuracy=train_acc,
                             test_accuracy=test_metrics.overall_accuracy)

        if relabel_policy is not None:
            probs = softmax_rows(predict_logits(model, train_images))
            labels_before = train_labels.copy()
            audit, decisions = relabel_pass(probs, train_labels, relabel_policy,
                                            train_acc, true_labels=audit_truth)
            record.relabel_active = audit.gate_open
            record.relabel_changed = audit.changed
            record.relabel_precision = audit.precision
            record.relabel_recall = audit.recall
            if audit.gate_open:
                const_policy = RelabelPolicy(fn=ThresholdFn(variant="constant"),
                                             delta=relabel_policy.delta,
                                             gate=relabel_policy.gate)
                for i, d in enumerate(decisions):
                    ref = decide(probs[i], int(labels_before[i]), const_policy)
                    decision_records.append(DecisionRecord(
                        epoch=epoch, sample_id=d.sample_id,
                        given_prob=d.given_prob, top_prob=d.top_prob,
                        threshold=d.threshold, changed=d.changed,
                        changed_constant_ref=ref.changed))

        records.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return records, decision_records
