"""Gradient pruning and the MixUp / Intra-InstaHide input encodings.

Combined defenses apply in a fixed order: encode the batch, compute the
gradient on the encodings, then prune it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .models import GradientPacket


@dataclass
class DefenseConfig:
    prune_ratio: float = 0.0
    mix_k: int = 1
    coef_upper_bound: float = 0.65
    sign_flip: bool = False
    per_layer_prune: bool = False

    def __post_init__(self):
        if not 0.0 <= self.prune_ratio < 1.0:
            raise ValueError(f"prune ratio must lie in [0, 1), got {self.prune_ratio}")
        if self.mix_k < 1:
            raise ValueError(f"mix_k must be >= 1, got {self.mix_k}")
        if self.mix_k > 1 and not (1.0 / self.mix_k <= self.coef_upper_bound <= 1.0):
            raise ValueError(
                f"coefficient bound {self.coef_upper_bound} infeasible for k={self.mix_k}")

    @property
    def encodes(self) -> bool:
        return self.mix_k > 1 or self.sign_flip

    @property
    def name(self) -> str:
        parts = []
        if self.encodes:
            parts.append(f"{'instahide' if self.sign_flip else 'mixup'}(k={self.mix_k})")
        if self.prune_ratio > 0:
            parts.append(f"gradprune(p={self.prune_ratio})")
        return "+".join(parts) or "none"


@dataclass
class EncodingRecord:
    indices: list[int]
    coefficients: np.ndarray
    signs: np.ndarray  # int8, all +1 for MixUp
    epoch: int

    def to_dict(self) -> dict:
        return {"indices": [int(i) for i in self.indices],
                "coefficients": [float(c) for c in self.coefficients],
                "signs": "".join("1" if s > 0 else "0" for s in self.signs.ravel()),
                "epoch": int(self.epoch)}

    @classmethod
    def from_dict(cls, d: dict, shape=None) -> "EncodingRecord":
        signs = np.array([1 if ch == "1" else -1 for ch in d["signs"]], dtype=np.int8)
        if shape is not None:
            signs = signs.reshape(shape)
        return cls(list(d["indices"]), np.array(d["coefficients"], dtype=np.float64),
                   signs, int(d["epoch"]))


# ---------------------------------------------------------------- pruning

def _prune_flat(flat: np.ndarray, p: float) -> np.ndarray:
    z = math.floor(p * flat.size)
    out = flat.copy()
    if z:
        # stable sort: equal magnitudes keep index order, so lower index goes first
        order = np.argsort(np.abs(flat), kind="stable")
        out[order[:z]] = 0.0
    return out


def grad_prune(packet: GradientPacket, p: float, per_layer: bool = False) -> GradientPacket:
    """Zero the floor(p*n) smallest-magnitude gradient entries.

    Global over the concatenation of all parameter gradients by default;
    ``per_layer`` applies the ratio to each tensor separately.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"prune ratio must lie in [0, 1), got {p}")
    if per_layer:
        grads = {k: _prune_flat(g.ravel(), p).reshape(g.shape) for k, g in packet.grads.items()}
        return packet.with_grads(grads)
    flat = _prune_flat(packet.flat(), p)
    grads, pos = {}, 0
    for k, g in packet.grads.items():
        grads[k] = flat[pos:pos + g.size].reshape(g.shape)
        pos += g.size
    return packet.with_grads(grads)


# ---------------------------------------------------------------- encodings

def sample_coefficients(k: int, upper_bound: float, rng) -> np.ndarray:
    """Uniform draw from the simplex restricted to coefficients <= ``upper_bound``.

    Rejection from a flat Dirichlet. The bounded simplex is also the image of
    a scaled simplex under mu = u - lambda, so when the bound is close to 1/k
    the draw is made in that parametrisation instead, where almost every
    sample is accepted. Both give the uniform distribution on the same set.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if upper_bound * k < 1.0 or upper_bound > 1.0:
        raise ValueError(f"upper bound {upper_bound} infeasible for k={k}")
    if k == 1:
        return np.ones(1)
    if math.isclose(upper_bound * k, 1.0):
        return np.full(k, 1.0 / k)
    slack = upper_bound * k - 1.0  # sum of mu
    if slack >= 1.0:
        while True:
            lam = rng.dirichlet(np.ones(k))
            if lam.max() <= upper_bound:
                return lam / lam.sum()
    while True:
        mu = slack * rng.dirichlet(np.ones(k))
        if mu.max() <= upper_bound:
            lam = np.clip(upper_bound - mu, 0.0, None)
            return lam / lam.sum()


def encode_batch(images, labels, config: DefenseConfig, epoch: int, rng,
                 num_classes: int = 10):
    """Encode every private image with ``k-1`` other private images.

    Returns ``(encoded, soft_labels, records)``; encoding ``i`` has image
    ``i`` as its first source. Sign patterns are always drawn so that MixUp
    and InstaHide consume the random stream identically.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n, k = len(images), config.mix_k
    if k > n:
        raise ValueError(f"k={k} exceeds private set size {n}")
    onehot = np.eye(num_classes)[labels]
    encoded = np.empty_like(images)
    soft = np.empty((n, num_classes))
    records = []
    for i in range(n):
        others = rng.choice(np.delete(np.arange(n), i), size=k - 1, replace=False)
        idx = np.concatenate(([i], others)).astype(int)
        lam = sample_coefficients(k, config.coef_upper_bound if k > 1 else 1.0, rng)
        signs = rng.choice(np.array([-1, 1], dtype=np.int8), size=images.shape[1:])
        if not config.sign_flip:
            signs = np.ones_like(signs)
        mix = np.tensordot(lam, images[idx], axes=1)
        encoded[i] = signs * mix
        soft[i] = lam @ onehot[idx]
        records.append(EncodingRecord(idx.tolist(), lam, signs, epoch))
    return encoded, soft, records
