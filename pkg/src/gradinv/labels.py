"""Analytic label recovery from the final dense layer's gradient.

For softmax cross-entropy the final weight gradient is
``sum_i (softmax_i - onehot_i) h_i^T``. With non-negative features ``h``
(post-ReLU / pooling) only classes present in the batch can produce a
negative entry. That gives the single-image rule (the true class row is the
only row with negative sum) and the batch rule (classes whose row minimum is
negative). Neither rule can count how many images share a class.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import Dense, GradientPacket, Model


@dataclass
class LabelGuess:
    labels: list[int]
    batch_size: int
    unique_label_condition: bool
    multiplicity_known: bool
    undecidable: bool = False
    row_min: list[float] = field(default_factory=list)
    row_sum: list[float] = field(default_factory=list)

    def as_vector(self) -> np.ndarray:
        """A length-``batch_size`` label vector; unknown multiplicities cycle through the found classes."""
        if self.undecidable or not self.labels:
            raise ValueError("label inference was undecidable; no label vector available")
        reps = -(-self.batch_size // len(self.labels))
        return np.array((self.labels * reps)[:self.batch_size], dtype=int)


def _final_weight_grad(packet: GradientPacket, model: Model) -> np.ndarray:
    last = len(model.layers) - 1
    if not isinstance(model.layers[last], Dense):
        raise ValueError(f"{model.arch}: final layer must be dense for label inference")
    name = f"{last}.weight"
    if name not in packet.grads:
        raise ValueError(f"packet has no gradient for {name}")
    return np.asarray(packet.grads[name], dtype=np.float64)


def infer_single_label(packet: GradientPacket, model: Model) -> int | None:
    """True label of a single-image packet, or ``None`` when the sign structure is ambiguous."""
    if packet.batch_size != 1:
        raise ValueError(f"single-label inference needs batch size 1, got {packet.batch_size}")
    sums = _final_weight_grad(packet, model).sum(axis=1)
    neg = np.flatnonzero(sums < 0)
    if len(neg) != 1:
        return None
    return int(neg[0])


def infer_batch_labels(packet: GradientPacket, model: Model) -> LabelGuess:
    dw = _final_weight_grad(packet, model)
    mins = dw.min(axis=1)
    found = [int(c) for c in np.flatnonzero(mins < 0)]
    b = packet.batch_size
    if not found:
        return LabelGuess([], b, False, False, undecidable=True,
                          row_min=mins.tolist(), row_sum=dw.sum(axis=1).tolist())
    unique = len(found) == b
    return LabelGuess(found, b, unique_label_condition=unique, multiplicity_known=unique,
                      row_min=mins.tolist(), row_sum=dw.sum(axis=1).tolist())


def label_collision_stats(labels, batch_size: int, trials: int, rng) -> dict:
    """Monte-Carlo label multiplicities of random batches drawn without replacement."""
    labels = np.asarray(labels)
    if batch_size > len(labels):
        raise ValueError(f"batch size {batch_size} exceeds dataset size {len(labels)}")
    max_mult = np.empty(trials, dtype=int)
    histograms = []
    for t in range(trials):
        batch = labels[rng.choice(len(labels), size=batch_size, replace=False)]
        counts = np.bincount(np.unique(batch, return_inverse=True)[1])
        max_mult[t] = counts.max()
        histograms.append(np.bincount(counts, minlength=batch_size + 1)[1:].tolist())
    dup = max_mult > 1
    return {
        "batch_size": batch_size,
        "trials": trials,
        "p_duplicate": float(dup.mean()),
        "mean_max_multiplicity": float(max_mult.mean()),
        "histograms": histograms,
    }
