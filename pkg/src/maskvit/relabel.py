"""Confidence-margin relabeling with constant or dynamic thresholds.

A training label is replaced by the model's argmax when the margin between
the top predicted probability and the probability of the current label
exceeds a threshold. The threshold is ``f(p_given) + delta`` where ``f`` is
a nonnegative, monotone non-decreasing function of the current label's
probability; the constant variant (``f == 0``) relabels on a fixed margin,
while the dynamic variants demand a larger margin the more plausible the
current label already is.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DomainError

VARIANTS = ("constant", "linear", "quadratic", "sigmoid")


@dataclass(frozen=True)
class ThresholdFn:
    """Margin-growth function f with f(0) = 0, f >= 0, monotone non-decreasing.

    constant:  f(p) = 0
    linear:    f(p) = slope * p
    quadratic: f(p) = coeff * p**2
    sigmoid:   f(p) = amplitude * (sigma(steepness*(p - midpoint))
                                   - sigma(-steepness*midpoint))
    """

    variant: str = "constant"
    slope: float = 0.5
    coeff: float = 1.0
    amplitude: float = 0.5
    steepness: float = 10.0
    midpoint: float = 0.5

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown threshold variant {self.variant!r}")
        if self.variant == "linear" and self.slope < 0:
            raise DomainError("linear slope must be nonnegative")
        if self.variant == "quadratic" and self.coeff < 0:
            raise DomainError("quadratic coefficient must be nonnegative")
        if self.variant == "sigmoid" and (self.amplitude < 0 or self.steepness < 0):
            raise DomainError("sigmoid amplitude and steepness must be nonnegative")

    def __call__(self, p):
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"probability {p} outside [0, 1]")
        if self.variant == "constant":
            return 0.0
        if self.variant == "linear":
            return self.slope * p
        if self.variant == "quadratic":
            return self.coeff * p * p
        # shifted so the curve starts at exactly zero
        return self.amplitude * (float(expit(self.steepness * (p - self.midpoint)))
                                 - float(expit(-self.steepness * self.midpoint)))


def threshold(fn, p_given, delta):
    """Relabeling margin required at probability `p_given`."""
    return fn(p_given) + delta


@dataclass(frozen=True)
class RelabelPolicy:
    """Threshold function plus its floor and the activation gate.

    Relabeling runs once per epoch, and only once the training accuracy has
    reached `gate`; before that a pass is a recorded no-op.
    """

    fn: ThresholdFn = field(default_factory=ThresholdFn)
    delta: float = 0.2
    gate: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.delta < 1.0:
            raise DomainError(f"delta must lie in [0, 1), got {self.delta}")
        if not 0.0 <= self.gate <= 1.0:
            raise DomainError(f"gate must lie in [0, 1], got {self.gate}")


@dataclass
class RelabelDecision:
    sample_id: int
    top_prob: float
    given_prob: float
    threshold: float
    old_label: int
    new_label: int
    changed: bool


def decide(probs, given, policy):
    """One relabel decision for a probability vector and its current label."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.shape[0] < 2:
        raise DomainError(f"expected a probability vector of >=2 classes, got shape {probs.shape}")
    if abs(float(probs.sum()) - 1.0) > 1e-5:
        raise DomainError(f"probabilities sum to {probs.sum():.8f}, not 1")
    given = int(given)
    if not 0 <= given < probs.shape[0]:
        raise DomainError(f"label {given} out of range for {probs.shape[0]} classes")
    top = int(np.argmax(probs))
    p_top = float(probs[top])
    p_given = float(probs[given])
    thr = threshold(policy.fn, p_given, policy.delta)
    changed = (p_top - p_given) > thr
    return RelabelDecision(
        sample_id=-1, top_prob=p_top, given_prob=p_given, threshold=thr,
        old_label=given, new_label=top if changed else given, changed=changed)


@dataclass
class RelabelAudit:
    gate_open: bool
    changed: int = 0
    changed_correct: int = 0
    corrupted_before: int = 0
    precision: float | None = None
    recall: float | None = None
    note: str = ""


def relabel_pass(probs, labels, policy, train_accuracy, sample_ids=None,
                 true_labels=None):
    """Apply one relabel sweep in place over `labels`.

    `probs` is an [n, K] matrix of predicted probabilities taken from the
    classifier's actual input path. Returns (audit, decisions); when the
    gate is closed the pass is a no-op with an explanatory audit note.
    `true_labels` is audit-only metadata: it feeds precision/recall but
    never influences any decision.
    """
    probs = np.asarray(probs)
    n = probs.shape[0]
    if labels.shape[0] != n:
        raise DomainError(f"{n} probability rows but {labels.shape[0]} labels")
    if sample_ids is None:
        sample_ids = np.arange(n)
    if train_accuracy < policy.gate:
        note = f"gate closed: training accuracy {train_accuracy:.4f} < {policy.gate:.4f}"
        return RelabelAudit(gate_open=False, note=note), []

    decisions = []
    changed = 0
    changed_correct = 0
    corrupted_before = 0
    for i in range(n):
        old = int(labels[i])
        d = decide(probs[i], old, policy)
        d.sample_id = int(sample_ids[i])
        decisions.append(d)
        if true_labels is not None and old != int(true_labels[i]):
            corrupted_before += 1
        if d.changed:
            labels[i] = d.new_label
            changed += 1
            if true_labels is not None and d.new_label == int(true_labels[i]):
                changed_correct += 1

    audit = RelabelAudit(gate_open=True, changed=changed,
                         changed_correct=changed_correct,
                         corrupted_before=corrupted_before)
    if true_labels is not None:
        audit.precision = changed_correct / changed if changed else None
        audit.recall = changed_correct / corrupted_before if corrupted_before else None
    return audit, decisions
