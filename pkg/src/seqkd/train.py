"""Training engine: plain student training and teacher-distilled training,
with per-epoch deterministic randomness so a run is a pure function of
(config, seed) and resuming from a checkpoint replays the exact trajectory.

Every random draw comes from a generator keyed by (seed, stream, epoch), so
there is no hidden RNG state to serialize; a resumed run re-derives the same
streams from the epoch counter.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import SequenceSample, sample_negatives_batch
from .distill import (DistillConfig, compute_weights, refresh_student_topk,
                      total_loss, weighted_candidate_loss)
from .fusion import FusionConfig, attach, hint_align_loss
from .metrics import MetricsReport, evaluate, overlap_ratio
from .models import (FUSION_HINT, FUSION_NONE, StudentModel, StudentConfig,
                     bce_from_scores, pad_prefixes)
from .optim import AdamState, adam_step, collect_grads, zero_grads
from .teacher import TeacherArtifact, TeacherError

SHUFFLE_STREAM = 50
NEG_STREAM = 51
DROPOUT_STREAM = 52


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


@dataclass
class TrainSettings:
    lr: float = 0.001
    batch_size: int = 256
    weight_decay: float = 0.0
    epochs: int = 100
    patience: int = 10
    negatives: int = 1
    eval_k: int = 20
    distill: DistillConfig = field(default_factory=DistillConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)


@dataclass
class DataBundle:
    """A chronological split plus each part's indices into the canonical
    sample list (teacher artifacts are indexed by those ids)."""

    train: list
    validation: list
    test: list
    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray
    item_count: int
    user_count: int


def index_split(samples: list[SequenceSample], ratios=(8, 1, 1),
                item_count: int = 0, user_count: int = 0) -> DataBundle:
    from .data import chronological_split_ids
    train_ids, val_ids, test_ids = chronological_split_ids(samples, ratios)
    return DataBundle(
        train=[samples[i] for i in train_ids],
        validation=[samples[i] for i in val_ids],
        test=[samples[i] for i in test_ids],
        train_ids=train_ids, val_ids=val_ids, test_ids=test_ids,
        item_count=item_count, user_count=user_count,
    )


@dataclass
class TrainResult:
    model: StudentModel
    test: MetricsReport
    validation_best: float
    best_epoch: int
    epochs_run: int
    history: list = field(default_factory=list)
    overlap_pre: float | None = None
    overlap_post: float | None = None
    first_epoch_loss: float | None = None
    last_epoch_loss: float | None = None
    seconds: float = 0.0


def _epoch_rng(seed: int, stream: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, stream, epoch)))


def _batch_order(n: int, lengths: np.ndarray, batch_size: int,
                 rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle, then group similar lengths so padded batches stay short."""
    perm = rng.permutation(n)
    perm = perm[np.argsort(lengths[perm], kind="stable")]
    batches = [perm[lo:lo + batch_size] for lo in range(0, n, batch_size)]
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _snapshot(model: StudentModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.params.items()}


def _restore(model: StudentModel, snap: dict[str, np.ndarray]) -> None:
    for name, data in snap.items():
        model.params[name].data = data.copy()


def run_training(model: StudentModel, bundle, settings: TrainSettings, seed: int,
                 teacher: TeacherArtifact | None = None,
                 teacher_test_lists: np.ndarray | None = None,
                 log=None, start_epoch: int = 0,
                 adam: AdamState | None = None) -> TrainResult:
    """Train `model` on the bundle's train split; early-stop on validation NDCG.

    With a teacher, adds importance-weighted ranking distillation (and the
    hint alignment term in hint mode). The teacher artifact must cover the
    canonical sample indexing of the *full* sample list, of which the train
    split references a subset by id.
    """
    log = log or (lambda msg: None)
    t_start = time.perf_counter()
    settings.distill.validate()
    settings.fusion.validate()

    train = bundle.train
    sample_ids = np.asarray(bundle.train_ids, dtype=np.int64)
    distilling = teacher is not None and settings.distill.lambda_d > 0
    hinting = model.config.fusion_mode == FUSION_HINT and teacher is not None
    if teacher is not None and sample_ids.size and sample_ids.max() >= teacher.sample_count:
        raise TeacherError("teacher artifact does not cover the training samples")

    prefixes = [list(s.prefix) for s in train]
    lengths = np.array([len(p) for p in prefixes], dtype=np.int64)
    targets = np.array([s.target for s in train], dtype=np.int64)
    item_count = model.config.item_count

    overlap_pre = None
    if distilling and teacher_test_lists is not None:
        pre_report = evaluate(model, bundle.test, k=settings.eval_k, keep_lists=True)
        overlap_pre, _ = overlap_ratio(teacher_test_lists, pre_report.lists, settings.eval_k)

    best_ndcg = -1.0
    best_epoch = -1
    best_snap = _snapshot(model)
    patience_left = settings.patience
    history = []
    first_loss = None
    last_loss = None
    adam = adam or AdamState(lr=settings.lr, weight_decay=settings.weight_decay)
    weights_cache = None
    topk_cache = None
    epochs_run = 0

    for epoch in range(start_epoch, settings.epochs):
        epochs_run += 1
        if distilling and (epoch % settings.distill.refresh_epochs == 0 or topk_cache is None):
            topk_cache = refresh_student_topk(model, train, settings.distill.k)
            weights_cache = compute_weights(sample_ids, teacher, topk_cache,
                                            settings.distill).combined

        shuffle_rng = _epoch_rng(seed, SHUFFLE_STREAM, epoch)
        neg_rng = _epoch_rng(seed, NEG_STREAM, epoch)
        drop_rng = _epoch_rng(seed, DROPOUT_STREAM, epoch)

        loss_sum = 0.0
        batch_count = 0
        for batch_idx in _batch_order(len(train), lengths, settings.batch_size, shuffle_rng):
            tgt = targets[batch_idx]
            negs = sample_negatives_batch(tgt, settings.negatives, item_count, neg_rng)
            batch_prefixes = [prefixes[i] for i in batch_idx]
            padded, lens = pad_prefixes(batch_prefixes)

            table = model.item_table()
            e_s = model.encode_batch(padded, lens, train=True, rng=drop_rng, table=table)
            cand = np.concatenate([tgt[:, None], negs], axis=1)
            scores = model.score_batch(e_s, cand, table=table)
            loss = bce_from_scores(scores)

            if distilling:
                cand_t = teacher.rankings[sample_ids[batch_idx], :settings.distill.k]
                t_scores = model.score_batch(e_s, cand_t, table=table)
                l_d = weighted_candidate_loss(t_scores, weights_cache[batch_idx])
                loss = total_loss(loss, l_d, settings.distill.lambda_d)
            if hinting:
                seen = np.concatenate([np.concatenate(batch_prefixes), cand.ravel()])
                batch_items = np.unique(seen)
                loss = ad.add(loss, ad.scale(hint_align_loss(model, batch_items),
                                             settings.fusion.lambda_h))

            if not np.isfinite(loss.data):
                raise DivergenceError(epoch, batch_count)
            zero_grads(model.params)
            loss.backward()
            adam_step(model.params, collect_grads(model.params), adam)
            loss_sum += loss.item()
            batch_count += 1

        epoch_loss = loss_sum / max(batch_count, 1)
        if first_loss is None:
            first_loss = epoch_loss
        last_loss = epoch_loss

        val = evaluate(model, bundle.validation, k=settings.eval_k)
        history.append({"epoch": epoch, "train_loss": epoch_loss,
                        "val_hr": val.hr, "val_ndcg": val.ndcg})
        log(f"epoch {epoch}: loss {epoch_loss:.6f} val_hr {val.hr:.4f} val_ndcg {val.ndcg:.4f}")

        if val.ndcg > best_ndcg:
            best_ndcg = val.ndcg
            best_epoch = epoch
            best_snap = _snapshot(model)
            patience_left = settings.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                log(f"early stop at epoch {epoch} (best {best_epoch})")
                break

    _restore(model, best_snap)
    test = evaluate(model, bundle.test, k=settings.eval_k,
                    keep_lists=teacher_test_lists is not None)

    overlap_post = None
    if distilling and teacher_test_lists is not None:
        overlap_post, _ = overlap_ratio(teacher_test_lists, test.lists, settings.eval_k)

    return TrainResult(model=model, test=test, validation_best=best_ndcg,
                       best_epoch=best_epoch, epochs_run=epochs_run,
                       history=history, overlap_pre=overlap_pre,
                       overlap_post=overlap_post, first_epoch_loss=first_loss,
                       last_epoch_loss=last_loss,
                       seconds=time.perf_counter() - t_start)
