"""Segmentation, feature-consistency and centroid-alignment losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, ShapeError, Tensor

LABEL_SOURCES = ("ground-truth", "teacher-pseudo", "target-pseudo")


@dataclass
class LabelMatrix:
    """Column-per-point one-hot labels (C x N)."""

    onehot: np.ndarray
    source: str = "ground-truth"

    def __post_init__(self):
        if self.source not in LABEL_SOURCES:
            raise ValueError(f"unknown label source {self.source!r}")
        if self.onehot.ndim != 2 or not np.all(self.onehot.sum(axis=0) == 1):
            raise ValueError("every column of a label matrix must sum to exactly 1")

    @classmethod
    def from_labels(cls, labels, num_classes: int, source: str = "ground-truth") -> "LabelMatrix":
        labels = np.asarray(labels, dtype=np.int64)
        onehot = np.zeros((num_classes, labels.size))
        onehot[labels, np.arange(labels.size)] = 1.0
        return cls(onehot, source)

    @property
    def num_classes(self) -> int:
        return self.onehot.shape[0]

    @property
    def n(self) -> int:
        return self.onehot.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.onehot, axis=0)


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 4.0
    lambda_a: float = 0.1
    lambda_w: float = 0.01

    def __post_init__(self):
        if min(self.lambda_c, self.lambda_a, self.lambda_w) < 0:
            raise ValueError(f"loss weights must be >= 0, got {self}")


@dataclass
class Centroids:
    """Per-class means; rows of absent classes are zero and must not be read."""

    matrix: Tensor
    present: np.ndarray
    domain: str = "source"

    def vector(self, c: int) -> np.ndarray:
        if not self.present[c]:
            raise KeyError(f"class {c} has no points in this {self.domain} batch")
        return self.matrix.values[c]


def _cross_entropy(logprobs: Tensor, labels: LabelMatrix) -> Tensor:
    if labels.n == 0 or logprobs.rows == 0:
        raise ValueError("segmentation loss needs at least one point")
    if logprobs.shape != (labels.n, labels.num_classes):
        raise ShapeError(f"log-probs {logprobs.shape} vs labels {labels.onehot.shape[::-1]}")
    return ad.scale(ad.mean(ad.pick(logprobs, labels.labels)), -1.0)


def seg_loss_source(logprobs: Tensor, labels: LabelMatrix) -> Tensor:
    """Mean negative log-likelihood of the ground-truth class."""
    return _cross_entropy(logprobs, labels)


def seg_loss_bridge(logprobs_t: Tensor, pseudo: LabelMatrix) -> Tensor:
    """Target-branch cross-entropy against teacher pseudo-labels (constants)."""
    return _cross_entropy(logprobs_t, pseudo)


def consistency_loss(proj_s: Tensor, proj_t: Tensor, proj_weights: Sequence[Tensor],
                     lambda_w: float) -> Tensor:
    """Mean squared distance between paired projected rows plus L2 on the projections."""
    if proj_s.shape != proj_t.shape:
        raise ShapeError(f"consistency_loss: shapes {proj_s.shape} and {proj_t.shape} do not conform")
    loss = ad.mean(ad.row_sq_dist(proj_s, proj_t))
    if lambda_w and proj_weights:
        reg = ad.sq_norm(proj_weights[0])
        for w in proj_weights[1:]:
            reg = ad.add(reg, ad.sq_norm(w))
        loss = ad.add(loss, ad.scale(reg, lambda_w))
    return loss


def class_centroids(proj: Tensor, labels: LabelMatrix, domain: str = "source") -> Centroids:
    if proj.rows != labels.n:
        raise ShapeError(f"class_centroids: {proj.rows} feature rows vs {labels.n} labels")
    counts = labels.onehot.sum(axis=1, keepdims=True)
    present = counts[:, 0] > 0
    sums = ad.matmul(Tensor(labels.onehot), proj)
    inv = Tensor(np.where(present[:, None], 1.0 / np.maximum(counts, 1.0), 0.0))
    return Centroids(ad.mul(sums, inv), present, domain)


def alignment_loss(src: Centroids, tgt: Centroids) -> Tensor:
    """Mean cosine dissimilarity over classes present in both centroid sets."""
    shared = np.flatnonzero(src.present & tgt.present)
    if shared.size == 0:
        return Tensor(0.0)
    total = None
    for c in shared:
        try:
            cos = ad.cosine(ad.take_rows(src.matrix, [c]), ad.take_rows(tgt.matrix, [c]))
        except NumericError as exc:
            raise NumericError(f"degenerate cosine: zero centroid for class {c}") from exc
        term = ad.sub(Tensor(1.0), cos)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / shared.size)


def _batch_mean(part: Tensor | Sequence[Tensor] | None) -> Tensor | None:
    if part is None or isinstance(part, Tensor):
        return part
    if len(part) == 0:
        return None
    acc = part[0]
    for p in part[1:]:
        acc = ad.add(acc, p)
    return ad.scale(acc, 1.0 / len(part))


def total_loss(parts: dict, weights: LossWeights, use_con: bool = True, use_ali: bool = True) -> Tensor:
    """seg_s + lambda_a * ali + seg_b + lambda_c * con, each averaged over the batch.

    List-valued parts hold one loss per scene and are averaged.
    """
    seg_s = _batch_mean(parts.get("seg_s"))
    if seg_s is None:
        raise ValueError("total_loss requires seg_s")
    total = seg_s
    ali = parts.get("ali")
    if use_ali and ali is not None:
        total = ad.add(total, ad.scale(_batch_mean(ali), weights.lambda_a))
    seg_b = _batch_mean(parts.get("seg_b"))
    if seg_b is not None:
        total = ad.add(total, seg_b)
    con = _batch_mean(parts.get("con"))
    if use_con and con is not None:
        total = ad.add(total, ad.scale(con, weights.lambda_c))
    return total
