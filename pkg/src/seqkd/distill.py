"""Importance-aware ranking distillation: candidate weights from teacher rank,
grounding confidence, and teacher-student agreement, combined linearly and
applied to a BCE-style loss over the teacher's top-K items."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import StudentModel, pad_prefixes
from .teacher import TeacherArtifact, TeacherError


class DistillError(ValueError):
    pass


@dataclass
class DistillConfig:
    k: int = 10
    beta: float = 1.0
    gamma_p: float = 0.3
    gamma_c: float = 0.5
    gamma_o: float = 0.1
    lambda_d: float = 0.5
    refresh_epochs: int = 1

    def validate(self) -> None:
        if self.k < 1:
            raise DistillError("k must be >= 1")
        if self.beta <= 0:
            raise DistillError("beta must be > 0")
        if min(self.gamma_p, self.gamma_c, self.gamma_o) < 0:
            raise DistillError("gamma coefficients must be >= 0")
        if self.lambda_d < 0:
            raise DistillError("lambda_d must be >= 0")
        if self.refresh_epochs < 1:
            raise DistillError("refresh_epochs must be >= 1")


@dataclass
class ImportanceWeights:
    """Per (sample, candidate) weight components and their combination."""

    position: np.ndarray      # (n, k)
    confidence: np.ndarray    # (n,), shared by all candidates of a sample
    consistency: np.ndarray   # (n, k), 0/1
    combined: np.ndarray      # (n, k)


def position_weight(rank, beta: float):
    """exp(-rank/beta) for 1-based ranks; beta flattens the decay."""
    rank = np.asarray(rank, dtype=np.float64)
    if np.any(rank < 1):
        raise DistillError("ranks are 1-based; got rank < 1")
    if beta <= 0:
        raise DistillError("beta must be > 0")
    out = np.exp(-rank / beta)
    return float(out) if out.ndim == 0 else out


def confidence_weight(distance, beta: float):
    """exp(-d/beta); small grounding distance means a trustworthy teacher."""
    distance = np.asarray(distance, dtype=np.float64)
    if np.any(distance < 0):
        raise DistillError("grounding distance must be >= 0")
    if beta <= 0:
        raise DistillError("beta must be > 0")
    out = np.exp(-distance / beta)
    return float(out) if out.ndim == 0 else out


def consistency_weight(item: int, teacher_list, student_list) -> float:
    """1 when the item appears in both top-K lists, else 0."""
    teacher_set = set(int(i) for i in teacher_list)
    if int(item) not in teacher_set:
        raise DistillError(f"item {item} is not a teacher candidate")
    return 1.0 if int(item) in teacher_set & set(int(i) for i in student_list) else 0.0


def combine_weights(w_p, w_c, w_o, gamma_p: float, gamma_c: float, gamma_o: float):
    """Linear combination; the result is a constant w.r.t. model parameters."""
    out = gamma_p * np.asarray(w_p, dtype=np.float64) \
        + gamma_c * np.asarray(w_c, dtype=np.float64) \
        + gamma_o * np.asarray(w_o, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def compute_weights(sample_ids: np.ndarray, teacher: TeacherArtifact,
                    student_topk: np.ndarray, config: DistillConfig) -> ImportanceWeights:
    """All weight components for the given samples, frozen as plain arrays.

    `student_topk` is the cached O^S matrix for the same sample ids (refreshed
    per epoch); gradients never flow through any of this.
    """
    config.validate()
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    if sample_ids.size and sample_ids.max() >= teacher.sample_count:
        raise TeacherError(
            f"teacher artifact covers {teacher.sample_count} samples; id {sample_ids.max()} requested")
    k = config.k
    if k > teacher.rankings.shape[1]:
        raise DistillError(
            f"distill k={k} exceeds stored teacher list length {teacher.rankings.shape[1]}")
    teacher_lists = teacher.rankings[sample_ids, :k]
    ranks = np.arange(1, k + 1, dtype=np.float64)
    w_p = np.broadcast_to(position_weight(ranks, config.beta), teacher_lists.shape).copy()
    w_c = confidence_weight(teacher.confidences[sample_ids], config.beta)
    w_o = np.zeros_like(w_p)
    for row in range(teacher_lists.shape[0]):
        w_o[row] = np.isin(teacher_lists[row], student_topk[row], assume_unique=False)
    combined = combine_weights(w_p, w_c[:, None], w_o,
                               config.gamma_p, config.gamma_c, config.gamma_o)
    return ImportanceWeights(position=w_p, confidence=np.atleast_1d(w_c),
                             consistency=w_o, combined=combined)


def weighted_candidate_loss(candidate_scores: Tensor, weights: np.ndarray) -> Tensor:
    """-mean_s sum_k w_sk * log sigma(score_sk); zero weights contribute exactly 0."""
    w = ad.constant(np.asarray(weights, dtype=np.float64))
    per_sample = ad.tsum(ad.mul(w, ad.neg(ad.log_sigmoid(candidate_scores))), axis=-1)
    return ad.tmean(per_sample)


def distill_loss(model: StudentModel, samples, sample_ids, teacher: TeacherArtifact,
                 student_topk: np.ndarray, config: DistillConfig) -> Tensor:
    """Standalone distillation loss for a batch of samples (eval-mode encoder)."""
    sample_ids = np.asarray(sample_ids, dtype=np.int64)
    weights = compute_weights(sample_ids, teacher, student_topk, config)
    padded, lengths = pad_prefixes([list(s.prefix) for s in samples])
    table = model.item_table()
    e_s = model.encode_batch(padded, lengths, table=table)
    candidates = teacher.rankings[sample_ids, :config.k]
    scores = model.score_batch(e_s, candidates, table=table)
    return weighted_candidate_loss(scores, weights.combined)


def total_loss(rec: Tensor, distill: Tensor, lambda_d: float) -> Tensor:
    if lambda_d < 0:
        raise DistillError("lambda_d must be >= 0")
    return ad.add(rec, ad.scale(distill, lambda_d))


def refresh_student_topk(model: StudentModel, samples, k: int,
                         batch_size: int = 512) -> np.ndarray:
    """Current student top-k lists for every sample, as one frozen matrix."""
    if k < 1:
        raise DistillError("k must be >= 1")
    out = np.empty((len(samples), k), dtype=np.int64)
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        prefixes = [list(s.prefix) for s in chunk]
        padded, lengths = pad_prefixes(prefixes)
        out[lo:lo + len(chunk)] = model.top_k_batch(padded, lengths, k, prefixes=prefixes)
    return out
