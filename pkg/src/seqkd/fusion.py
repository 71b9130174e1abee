"""Embedding fusion: project teacher item embeddings into the student space,
optionally add a learnable per-item offset, or merely align (hint mode)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import (FUSION_HINT, FUSION_MODES, FUSION_NONE,
                     FUSION_OFFSET_DISABLED, FUSION_OFFSET_SUM, ModelError,
                     StudentModel, _glorot)

FUSION_STREAM = 43


@dataclass
class FusionConfig:
    mode: str = FUSION_NONE
    lambda_h: float = 0.5

    def validate(self) -> None:
        if self.mode not in FUSION_MODES:
            raise ModelError(f"unknown fusion mode {self.mode!r}")
        if self.lambda_h < 0:
            raise ModelError("lambda_h must be >= 0")


def standardize_embeddings(z: np.ndarray) -> np.ndarray:
    """Per-dimension z-score over the catalog; raw LLM embedding scales vary."""
    z = np.asarray(z, dtype=np.float64)
    mean = z.mean(axis=0, keepdims=True)
    std = z.std(axis=0, keepdims=True)
    return (z - mean) / np.maximum(std, 1e-12)


def project(model: StudentModel, z) -> Tensor:
    """Two-layer MLP from teacher space to the student embedding space."""
    z = z if isinstance(z, Tensor) else ad.constant(np.atleast_2d(z))
    if z.data.shape[-1] != model.config.teacher_dim:
        raise ModelError(
            f"teacher dim mismatch: got {z.data.shape[-1]}, expected {model.config.teacher_dim}")
    h = ad.relu(ad.add(ad.matmul(z, model.params["proj.w1"]), model.params["proj.b1"]))
    return ad.add(ad.matmul(h, model.params["proj.w2"]), model.params["proj.b2"])


def fuse(z_projected: Tensor, offset: Tensor | None, mode: str) -> Tensor:
    if mode == FUSION_OFFSET_SUM:
        if offset is None:
            raise ModelError("offset-sum fusion needs an offset table")
        return ad.add(z_projected, offset)
    if mode == FUSION_OFFSET_DISABLED:
        return z_projected
    raise ModelError(f"fuse() undefined for mode {mode!r}")


def attach(model: StudentModel, teacher_embeddings: np.ndarray,
           config: FusionConfig, seed: int = 0) -> StudentModel:
    """Wire fusion into the model's item table (mutates and returns `model`).

    Offset modes replace the free embedding table with
    fuse(project(z), offset); hint mode keeps the free table and only makes
    the alignment loss available.
    """
    config.validate()
    if config.mode == FUSION_NONE:
        return model
    z = np.asarray(teacher_embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != model.config.item_count:
        raise ModelError(
            f"teacher embeddings {z.shape} do not cover catalog of {model.config.item_count}")
    if model.config.fusion_mode != FUSION_NONE:
        raise ModelError("model already has a fusion attachment")

    d = model.config.embed_dim
    model.config.fusion_mode = config.mode
    model.config.teacher_dim = z.shape[1]
    model.teacher_table = ad.constant(standardize_embeddings(z))

    rng = np.random.default_rng(np.random.SeedSequence((seed, FUSION_STREAM)))
    model._add("proj.w1", _glorot(rng, z.shape[1], d))
    model._add("proj.b1", np.zeros(d))
    # Output layer starts small so fused embeddings match the free-table init
    # scale; otherwise initial scores saturate the sigmoids.
    model._add("proj.w2", _glorot(rng, d, d) * 0.3)
    model._add("proj.b2", np.zeros(d))
    if config.mode == FUSION_OFFSET_SUM:
        model._add("fuse.offset", np.zeros((model.config.item_count, d)))
    if config.mode in (FUSION_OFFSET_SUM, FUSION_OFFSET_DISABLED):
        del model.params["emb.items"]
    return model


def embedding_alignment_mse(e_table: Tensor, z_projected: Tensor, item_ids) -> Tensor:
    """Mean squared coordinate difference between the two tables on a batch of items."""
    ids = np.asarray(item_ids, dtype=np.int64)
    diff = ad.sub(ad.gather(e_table, ids), ad.gather(z_projected, ids))
    return ad.tmean(ad.mul(diff, diff))


def hint_align_loss(model: StudentModel, item_ids) -> Tensor:
    if model.config.fusion_mode != FUSION_HINT:
        raise ModelError("hint_align_loss is only valid in hint-align mode")
    return embedding_alignment_mse(model.params["emb.items"], model.project_teacher(), item_ids)
