"""Max-rule authentication, the evaluation metric suite, confusion matrices,
and the adversarial cross-device evaluation.

Metric vocabulary: PSTest is the percentage of correctly predicted slices;
TTSD and TTOD are the same computation tagged by which split supplied the
slices (same-domain held-out test vs other-domain evaluation). RRP counts a
device as recognized only when its mean true-class softmax probability is
the strict maximum over all classes. Improvement is a new/old multiplier
kept to one decimal (truncated toward zero, which reproduces the published
summary-table arithmetic).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyDeviceRow,
    HypothesisMismatch,
    LabelMismatch,
    LengthMismatch,
    SameDevice,
    ShapeError,
    ZeroBaseline,
)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Slice counts with rows = true device, columns = predicted device."""

    counts: np.ndarray
    n_slices: int

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeError("confusion counts must be a square matrix")
        if np.any(counts < 0):
            raise ShapeError("confusion counts must be non-negative")
        if int(counts.sum()) != self.n_slices:
            raise ShapeError("confusion counts must sum to n_slices")

    @property
    def n_classes(self) -> int:
        return int(self.counts.shape[0])

    @classmethod
    def from_predictions(cls, true_labels, predicted, n_classes: int) -> "ConfusionMatrix":
        true_labels = np.asarray(true_labels, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        if true_labels.shape != predicted.shape:
            raise LengthMismatch("true and predicted label arrays differ in length")
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (true_labels, predicted), 1)
        return cls(counts, int(true_labels.size))

    def accuracy_pct(self) -> float:
        return 100.0 * float(np.trace(self.counts)) / self.n_slices

    def to_csv(self, path):
        """CSV with a header row of predicted labels; one row per true device."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\predicted"] + list(range(self.n_classes)))
            for i, row in enumerate(self.counts):
                writer.writerow([i] + [int(c) for c in row])

    def to_lists(self):
        return [[int(c) for c in row] for row in self.counts]


@dataclass
class MetricsReport:
    """One evaluation run's metric values plus its confusion matrix.

    Fields not applicable to a given evaluation stay None. For adversarial
    runs, ttod_pct holds the impersonation success rate toward the target
    device and pstest_pct the accuracy against the true labels.
    """

    pstest_pct: float | None = None
    ttsd_pct: float | None = None
    ttod_pct: float | None = None
    rrp_pct: float | None = None
    improvement_x: float | None = None
    per_device_softmax: list | None = None
    confusion: ConfusionMatrix | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "pstest_pct": self.pstest_pct,
            "ttsd_pct": self.ttsd_pct,
            "ttod_pct": self.ttod_pct,
            "rrp_pct": self.rrp_pct,
            "improvement_x": self.improvement_x,
            "per_device_softmax": self.per_device_softmax,
            "confusion": self.confusion.to_lists() if self.confusion is not None else None,
            "extra": self.extra,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        confusion = None
        if doc.get("confusion") is not None:
            counts = np.asarray(doc["confusion"], dtype=np.int64)
            confusion = ConfusionMatrix(counts, int(counts.sum()))
        return cls(
            pstest_pct=doc.get("pstest_pct"),
            ttsd_pct=doc.get("ttsd_pct"),
            ttod_pct=doc.get("ttod_pct"),
            rrp_pct=doc.get("rrp_pct"),
            improvement_x=doc.get("improvement_x"),
            per_device_softmax=doc.get("per_device_softmax"),
            confusion=confusion,
            extra=doc.get("extra", {}),
        )


def pstest(output, labels) -> float:
    """Percentage of correctly predicted slices.

    `output` may be a ClassifierOutput or a plain array of predicted labels.
    """
    predicted = np.asarray(getattr(output, "predicted", output), dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predicted.shape != labels.shape:
        raise LengthMismatch(
            f"{predicted.size} predictions vs {labels.size} labels"
        )
    if predicted.size == 0:
        raise LengthMismatch("cannot score an empty batch")
    return 100.0 * float(np.mean(predicted == labels))


def mean_softmax_by_device(probabilities, labels, n_classes: int) -> np.ndarray:
    """(N, N) matrix: row i is the mean softmax vector over device i's slices."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probabilities.shape != (labels.size, n_classes):
        raise ShapeError("probabilities must be (m, n_classes) aligned with labels")
    rows = np.zeros((n_classes, n_classes), dtype=np.float64)
    for i in range(n_classes):
        mask = labels == i
        if not np.any(mask):
            raise EmptyDeviceRow(f"device {i} has no slices in this evaluation")
        rows[i] = probabilities[mask].mean(axis=0)
    return rows


def rrp(confusion_or_rows) -> float:
    """Radio recognition percentage.

    Accepts a ConfusionMatrix or an (N, N) per-device mean-softmax matrix.
    Device i is recognized iff row i's entry at column i is the strict
    maximum; ties count as not recognized.
    """
    if isinstance(confusion_or_rows, ConfusionMatrix):
        rows = confusion_or_rows.counts.astype(np.float64)
        if np.any(rows.sum(axis=1) == 0):
            raise EmptyDeviceRow("confusion matrix has an empty device row")
    else:
        rows = np.asarray(confusion_or_rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] != rows.shape[1]:
            raise ShapeError("expected a square per-device matrix")
    n = rows.shape[0]
    if n < 2:
        raise ShapeError("RRP needs at least 2 devices")
    recognized = 0
    for i in range(n):
        others = np.delete(rows[i], i)
        if rows[i, i] > others.max():
            recognized += 1
    return 100.0 * recognized / n


def improvement(old_pct: float, new_pct: float) -> float:
    """new/old multiplier kept to one decimal (truncated toward zero)."""
    if old_pct == 0:
        raise ZeroBaseline("improvement undefined for a zero baseline")
    if old_pct < 0 or new_pct < 0:
        raise ShapeError("percentages must be non-negative")
    ratio = new_pct / old_pct
    # round at the ninth decimal first so exact ratios are not nudged below
    # the truncation boundary by float error
    return math.floor(round(ratio * 10, 9)) / 10


def format_improvement(multiplier: float) -> str:
    return f"{multiplier:g}x"


@dataclass(frozen=True)
class MaxRuleResult:
    """Per-slice authentication decisions and their per-hypothesis scores."""

    labels: np.ndarray
    translated_won: np.ndarray
    scores: np.ndarray


def max_rule(raw_probs, translated_probs) -> MaxRuleResult:
    """Authenticate each slice by the better of its raw and translated paths.

    raw_probs[k, i] is the classifier probability of class i for raw slice k;
    translated_probs[k, i] is the probability of class i after translating
    slice k with device i's translator. The per-hypothesis score is the
    elementwise max, the authenticated label its argmax (lowest index on
    ties), and translated_won[k] reports whether the translated path
    strictly beat the raw path for the winning hypothesis (the precautionary
    default prefers the raw path).
    """
    raw = np.asarray(raw_probs, dtype=np.float64)
    tra = np.asarray(translated_probs, dtype=np.float64)
    if raw.ndim != 2 or raw.shape != tra.shape:
        raise HypothesisMismatch(
            f"raw {raw.shape} and translated {tra.shape} score tables must match"
        )
    scores = np.maximum(raw, tra)
    labels = np.argmax(scores, axis=1)
    rows = np.arange(raw.shape[0])
    translated_won = tra[rows, labels] > raw[rows, labels]
    return MaxRuleResult(labels=labels, translated_won=translated_won, scores=scores)


def hypothesis_probability_table(per_hypothesis_probs) -> np.ndarray:
    """Column-stack P(class i | translated by translator i) for all hypotheses.

    per_hypothesis_probs maps hypothesis i -> (m, N) softmax rows produced by
    classifying slices translated with device i's translator.
    """
    items = sorted(per_hypothesis_probs.items())
    n = len(items)
    if [i for i, _ in items] != list(range(n)):
        raise HypothesisMismatch("hypotheses must cover devices 0..N-1")
    cols = []
    for i, probs in items:
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape[1] != n:
            raise HypothesisMismatch("each hypothesis table must have N columns")
        cols.append(probs[:, i])
    return np.stack(cols, axis=1)


def adversarial_eval(translators, classifier, slices_j, target_i: int) -> MetricsReport:
    """Impersonation check: run device j's slices through device i's translator.

    Reports the impersonation success rate toward class i as ttod_pct and the
    accuracy against the true labels as pstest_pct.
    """
    from .baseline import classify
    from .reveal import translate

    device_ids = slices_j.device_ids
    if len(device_ids) != 1:
        raise LabelMismatch("adversarial evaluation needs slices from a single device")
    j = device_ids[0]
    if target_i == j:
        raise SameDevice(f"impersonation target must differ from source device {j}")
    pair = translators[target_i] if not hasattr(translators, "device_id") else translators
    if pair.device_id != target_i:
        raise HypothesisMismatch(
            f"translator for device {pair.device_id} used as hypothesis {target_i}"
        )
    out = classify(classifier, translate(pair, slices_j))
    impersonation = 100.0 * float(np.mean(out.predicted == target_i))
    accuracy = 100.0 * float(np.mean(out.predicted == j))
    confusion = ConfusionMatrix.from_predictions(
        slices_j.labels, out.predicted, classifier.n_classes
    )
    return MetricsReport(
        pstest_pct=accuracy,
        ttod_pct=impersonation,
        confusion=confusion,
        extra={"source_device": int(j), "target_device": int(target_i)},
    )
