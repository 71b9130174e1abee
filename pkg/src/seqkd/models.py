"""Sequential student models: an item-embedding encoder, a gated recurrent or
a lite causal self-attention sequence encoder, dot-product scoring, and the
sampled binary cross-entropy training loss.

Both encoders run batched over right-padded prefixes; padding is inert (the
recurrent state freezes past each sample's length, the attention output is
read at the last valid position under a causal mask).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_tensors, save_tensors

INIT_STREAM = 42
NEG_BIG = -1e9

RECURRENT = "recurrent"
SELF_ATTENTIVE = "self-attentive"
KINDS = (RECURRENT, SELF_ATTENTIVE)

FUSION_NONE = "none"
FUSION_OFFSET_SUM = "offset-sum"
FUSION_OFFSET_DISABLED = "offset-disabled"
FUSION_HINT = "hint-align"
FUSION_MODES = (FUSION_NONE, FUSION_OFFSET_SUM, FUSION_OFFSET_DISABLED, FUSION_HINT)


class ModelError(ValueError):
    pass


@dataclass
class StudentConfig:
    kind: str = RECURRENT
    item_count: int = 0
    embed_dim: int = 64
    max_len: int = 50
    dropout: float = 0.1
    attention_heads: int = 1
    exclude_seen: bool = False
    fusion_mode: str = FUSION_NONE
    teacher_dim: int = 0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ModelError(f"unknown encoder kind {self.kind!r}")
        if self.item_count < 1:
            raise ModelError("item_count must be >= 1")
        if self.embed_dim < 1 or self.max_len < 1:
            raise ModelError("embed_dim and max_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.attention_heads != 1:
            raise ModelError("only single-head attention is supported")
        if self.fusion_mode not in FUSION_MODES:
            raise ModelError(f"unknown fusion mode {self.fusion_mode!r}")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.standard_normal((fan_in, fan_out)) * std


class StudentModel:
    """Parameters plus forward passes; everything trainable lives in `params`."""

    def __init__(self, config: StudentConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.teacher_table: Tensor | None = None   # standardized, constant
        rng = np.random.default_rng(np.random.SeedSequence((seed, INIT_STREAM)))
        d = config.embed_dim
        self._add("emb.items", rng.standard_normal((config.item_count, d)) * 0.05)
        if config.kind == RECURRENT:
            self._add("rnn.w_x", _glorot(rng, d, 3 * d))
            self._add("rnn.w_h", _glorot(rng, d, 3 * d))
            self._add("rnn.b_x", np.zeros(3 * d))
            self._add("rnn.b_h", np.zeros(3 * d))
        else:
            self._add("attn.positions", rng.standard_normal((config.max_len, d)) * 0.05)
            for name in ("attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"):
                self._add(name, _glorot(rng, d, d))
        if config.fusion_mode != FUSION_NONE:
            if config.teacher_dim < 1:
                raise ModelError("fusion modes require teacher_dim >= 1")
            self._init_fusion(rng)

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = ad.parameter(data, name)

    def _init_fusion(self, rng: np.random.Generator) -> None:
        d, dt = self.config.embed_dim, self.config.teacher_dim
        self._add("proj.w1", _glorot(rng, dt, d))
        self._add("proj.b1", np.zeros(d))
        self._add("proj.w2", _glorot(rng, d, d) * 0.3)
        self._add("proj.b2", np.zeros(d))
        if self.config.fusion_mode in (FUSION_OFFSET_SUM,):
            self._add("fuse.offset", np.zeros((self.config.item_count, d)))
        if self.config.fusion_mode in (FUSION_OFFSET_SUM, FUSION_OFFSET_DISABLED):
            # The fused embedding replaces the free table entirely.
            del self.params["emb.items"]

    # -- embeddings ---------------------------------------------------------

    def project_teacher(self) -> Tensor:
        if self.teacher_table is None:
            raise ModelError("no teacher embeddings attached")
        h = ad.relu(ad.add(ad.matmul(self.teacher_table, self.params["proj.w1"]),
                           self.params["proj.b1"]))
        return ad.add(ad.matmul(h, self.params["proj.w2"]), self.params["proj.b2"])

    def item_table(self) -> Tensor:
        """Catalog embedding table as consumed by the encoder and the scorer."""
        mode = self.config.fusion_mode
        if mode == FUSION_OFFSET_SUM:
            return ad.add(self.project_teacher(), self.params["fuse.offset"])
        if mode == FUSION_OFFSET_DISABLED:
            return self.project_teacher()
        return self.params["emb.items"]

    def encode_items(self, item_ids) -> Tensor:
        ids = np.asarray(item_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.item_count):
            raise ModelError(f"item id out of range for catalog of {self.config.item_count}")
        return ad.gather(self.item_table(), ids)

    # -- sequence encoding ----------------------------------------------------

    def encode_batch(self, padded: np.ndarray, lengths: np.ndarray,
                     train: bool = False, rng: np.random.Generator | None = None,
                     table: Tensor | None = None) -> Tensor:
        """Encode right-padded prefixes (B, L) into sequence states (B, d)."""
        padded = np.asarray(padded, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if padded.ndim != 2 or lengths.min() < 1:
            raise ModelError("padded batch must be (B, L) with lengths >= 1")
        if padded.shape[1] > self.config.max_len:
            raise ModelError(f"prefix length {padded.shape[1]} exceeds max_len {self.config.max_len}")
        table = table if table is not None else self.item_table()
        x = ad.gather(table, padded)
        if train and self.config.dropout > 0:
            if rng is None:
                raise ModelError("training forward needs an rng for dropout")
            x = ad.dropout(x, self.config.dropout, rng)
        if self.config.kind == RECURRENT:
            return self._encode_recurrent(x, lengths)
        return self._encode_attentive(x, lengths)

    def _encode_recurrent(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        d = self.config.embed_dim
        batch, steps = x.data.shape[0], x.data.shape[1]
        # Input transform for all steps at once; only the hidden transform loops.
        px = ad.add(ad.matmul(x, self.params["rnn.w_x"]), self.params["rnn.b_x"])
        h = ad.constant(np.zeros((batch, d)))
        for t in range(steps):
            px_t = ad.index_axis1(px, t)
            ph = ad.add(ad.matmul(h, self.params["rnn.w_h"]), self.params["rnn.b_h"])
            r = ad.sigmoid(ad.add(ad.slice_last(px_t, 0, d), ad.slice_last(ph, 0, d)))
            z = ad.sigmoid(ad.add(ad.slice_last(px_t, d, 2 * d), ad.slice_last(ph, d, 2 * d)))
            n = ad.tanh(ad.add(ad.slice_last(px_t, 2 * d, 3 * d),
                               ad.mul(r, ad.slice_last(ph, 2 * d, 3 * d))))
            h_new = ad.add(ad.mul(ad.shift(ad.neg(z), 1.0), n), ad.mul(z, h))
            active = (lengths > t).astype(np.float64)[:, None]
            if active.all():
                h = h_new
            else:
                m = ad.constant(active)
                h = ad.add(ad.mul(m, h_new), ad.mul(ad.constant(1.0 - active), h))
        return h

    def _encode_attentive(self, x: Tensor, lengths: np.ndarray) -> Tensor:
        d = self.config.embed_dim
        steps = x.data.shape[1]
        pos = ad.gather(self.params["attn.positions"], np.arange(steps))
        x = ad.add(x, pos)
        q = ad.matmul(x, self.params["attn.w_q"])
        k = ad.matmul(x, self.params["attn.w_k"])
        v = ad.matmul(x, self.params["attn.w_v"])
        scores = ad.scale(ad.matmul(q, ad.transpose_last2(k)), 1.0 / np.sqrt(d))
        causal = np.triu(np.full((steps, steps), NEG_BIG), k=1)
        scores = ad.add(scores, ad.constant(causal))
        attn = ad.row_softmax(scores)
        out = ad.matmul(ad.matmul(attn, v), self.params["attn.w_o"])
        h = ad.add(x, out)
        return ad.take_positions(h, lengths - 1)

    def encode_sequence(self, prefix) -> Tensor:
        """Single-prefix convenience wrapper (eval semantics, no dropout)."""
        prefix = list(prefix)
        if len(prefix) == 0:
            raise ModelError("empty prefix")
        if len(prefix) > self.config.max_len:
            raise ModelError(f"prefix longer than max_len {self.config.max_len}")
        padded = np.asarray([prefix], dtype=np.int64)
        es = self.encode_batch(padded, np.array([len(prefix)]))
        return ad.reshape(es, (self.config.embed_dim,))

    # -- scoring and losses ----------------------------------------------------

    def score(self, e_s: Tensor, item_ids) -> Tensor:
        """Dot products between one sequence state (d,) and the given items."""
        emb = self.encode_items(item_ids)
        return ad.tsum(ad.mul(emb, e_s), axis=-1)

    def score_batch(self, e_s: Tensor, item_ids: np.ndarray,
                    table: Tensor | None = None) -> Tensor:
        """(B, d) states against per-sample candidate sets (B, n) -> (B, n)."""
        table = table if table is not None else self.item_table()
        return ad.batched_dot(e_s, ad.gather(table, np.asarray(item_ids, dtype=np.int64)))

    def rec_loss(self, batch, train: bool = False,
                 rng: np.random.Generator | None = None,
                 reduction: str = "mean") -> Tensor:
        """Sampled BCE: -log sigma(y_pos) - sum_j log(1 - sigma(y_neg_j))."""
        if not batch:
            raise ModelError("empty batch")
        prefixes = [list(s[0]) for s in batch]
        targets = np.array([s[1] for s in batch], dtype=np.int64)
        negatives = np.array([list(s[2]) for s in batch], dtype=np.int64)
        padded, lengths = pad_prefixes(prefixes)
        table = self.item_table()
        e_s = self.encode_batch(padded, lengths, train=train, rng=rng, table=table)
        cand = np.concatenate([targets[:, None], negatives], axis=1)
        scores = self.score_batch(e_s, cand, table=table)
        return bce_from_scores(scores, reduction=reduction)

    # -- ranking -----------------------------------------------------------------

    def top_k_batch(self, padded: np.ndarray, lengths: np.ndarray, k: int,
                    prefixes=None) -> np.ndarray:
        if k > self.config.item_count:
            raise ModelError(f"k={k} exceeds catalog size {self.config.item_count}")
        with ad.no_grad():
            table = self.item_table()
            e_s = self.encode_batch(padded, lengths, table=table)
            scores = e_s.data @ table.data.T
        if self.config.exclude_seen:
            if prefixes is None:
                raise ModelError("exclude_seen ranking needs the raw prefixes")
            for b, prefix in enumerate(prefixes):
                scores[b, list(prefix)] = NEG_BIG
        # Stable sort on -scores: ties fall back to ascending item id.
        order = np.argsort(-scores, axis=1, kind="stable")
        return order[:, :k].astype(np.int64)

    def top_k(self, prefix, k: int) -> list[int]:
        prefix = list(prefix)
        padded, lengths = pad_prefixes([prefix])
        return self.top_k_batch(padded, lengths, k, prefixes=[prefix])[0].tolist()


def pad_prefixes(prefixes) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad variable-length prefixes with item 0 (inert under masking)."""
    lengths = np.array([len(p) for p in prefixes], dtype=np.int64)
    if lengths.min() < 1:
        raise ModelError("empty prefix")
    out = np.zeros((len(prefixes), int(lengths.max())), dtype=np.int64)
    for b, p in enumerate(prefixes):
        out[b, :len(p)] = p
    return out, lengths


def bce_from_scores(scores: Tensor, reduction: str = "mean") -> Tensor:
    """Column 0 holds the positive score, the rest are negatives."""
    pos = ad.log_sigmoid(ad.slice_last(scores, 0, 1))
    neg = ad.log_sigmoid(ad.neg(ad.slice_last(scores, 1, scores.data.shape[-1])))
    per_sample = ad.neg(ad.add(ad.tsum(pos, axis=-1), ad.tsum(neg, axis=-1)))
    if reduction == "mean":
        return ad.tmean(per_sample)
    if reduction == "sum":
        return ad.tsum(per_sample)
    raise ModelError(f"unknown reduction {reduction!r}")


# -- checkpointing ---------------------------------------------------------------

def save_model(path, model: StudentModel) -> None:
    header = {"config": asdict(model.config)}
    tensors = {name: p.data for name, p in model.params.items()}
    if model.teacher_table is not None:
        tensors["const.teacher_table"] = model.teacher_table.data
    save_tensors(path, tensors, header=header)


def load_model(path) -> StudentModel:
    header, tensors = load_tensors(path)
    if "config" not in header:
        raise ModelError(f"{path}: missing model config header")
    config = StudentConfig(**header["config"])
    model = StudentModel(config, seed=0)
    teacher = tensors.pop("const.teacher_table", None)
    if teacher is not None:
        model.teacher_table = ad.constant(teacher)
    elif config.fusion_mode != FUSION_NONE:
        raise ModelError(f"{path}: fusion checkpoint lacks teacher table")
    for name, p in model.params.items():
        if name not in tensors:
            raise ModelError(f"{path}: checkpoint missing tensor {name!r}")
        if tensors[name].shape != p.data.shape:
            raise ModelError(f"{path}: shape mismatch for {name!r}")
        p.data = tensors[name]
    return model
