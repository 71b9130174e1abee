"""Teacher artifacts: ranked lists, grounding-confidence distances, and item
embeddings, with file I/O and a synthetic oracle of controllable quality.

The oracle fakes a generative teacher: for each sample it draws a pseudo
"generated description" near the true target's embedding (or, with the
corruption probability, near a random wrong item), then grounds it against
the catalog exactly the way a real consumer of these files would.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .data import SequenceSample, SyntheticTruth

TEACHER_STREAM = 41
STORED_LIST_LENGTH = 20


class TeacherError(ValueError):
    pass


@dataclass
class TeacherQuality:
    sigma_g: float = 0.0       # noise scale around the target embedding
    corruption: float = 0.0    # probability a sample grounds near a wrong item

    def validate(self) -> None:
        if self.sigma_g < 0:
            raise TeacherError(f"sigma_g must be >= 0, got {self.sigma_g}")
        if not 0.0 <= self.corruption <= 1.0:
            raise TeacherError(f"corruption must be in [0, 1], got {self.corruption}")


@dataclass
class TeacherArtifact:
    rankings: np.ndarray        # (samples, stored_k) int64
    confidences: np.ndarray     # (samples,) float64
    embeddings: np.ndarray      # (items, teacher_dim) float64
    provenance: dict = field(default_factory=dict)
    fingerprint: str = ""
    generated: np.ndarray | None = None    # (samples, teacher_dim), debug only

    @property
    def sample_count(self) -> int:
        return self.rankings.shape[0]

    @property
    def item_count(self) -> int:
        return self.embeddings.shape[0]

    @property
    def teacher_dim(self) -> int:
        return self.embeddings.shape[1]


def grounding_distance(z_g: np.ndarray, z_i: np.ndarray) -> float:
    """Squared L2 distance between a generated embedding and an item embedding."""
    z_g = np.asarray(z_g, dtype=np.float64)
    z_i = np.asarray(z_i, dtype=np.float64)
    if z_g.shape != z_i.shape:
        raise TeacherError(f"dimension mismatch: {z_g.shape} vs {z_i.shape}")
    return float(((z_g - z_i) ** 2).sum())


def rank_by_grounding(z_g: np.ndarray, embeddings: np.ndarray, k: int) -> np.ndarray:
    """Item ids sorted by ascending distance to z_g, ties by ascending id."""
    if k > embeddings.shape[0]:
        raise TeacherError(f"k={k} exceeds catalog size {embeddings.shape[0]}")
    d = ((embeddings - np.asarray(z_g, dtype=np.float64)) ** 2).sum(axis=1)
    order = np.argsort(d, kind="stable")
    return order[:k].astype(np.int64)


def synthesize_teacher(truth: SyntheticTruth, samples: list[SequenceSample],
                       quality: TeacherQuality, seed: int,
                       stored_k: int = STORED_LIST_LENGTH,
                       keep_generated: bool = False,
                       fingerprint: str = "") -> TeacherArtifact:
    """Simulate a generative teacher over `samples` at the requested quality.

    Per-sample randomness is derived from (seed, sample index), so any
    parallel split over samples reproduces the serial result.
    """
    quality.validate()
    emb = truth.teacher_embeddings
    n_items, dim = emb.shape
    if stored_k > n_items:
        raise TeacherError(f"stored list length {stored_k} exceeds catalog {n_items}")

    n = len(samples)
    z_g = np.empty((n, dim), dtype=np.float64)
    for idx, s in enumerate(samples):
        rng = np.random.default_rng(np.random.SeedSequence((seed, TEACHER_STREAM, idx)))
        base = s.target
        if quality.corruption > 0 and rng.random() < quality.corruption:
            wrong = int(rng.integers(0, n_items))
            while wrong == s.target:
                wrong = int(rng.integers(0, n_items))
            base = wrong
        eps = rng.standard_normal(dim)
        z_g[idx] = emb[base] + quality.sigma_g * eps

    rankings = np.empty((n, stored_k), dtype=np.int64)
    confidences = np.empty(n, dtype=np.float64)
    block = 256
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        dists = ((z_g[lo:hi, None, :] - emb[None, :, :]) ** 2).sum(axis=2)
        order = np.argsort(dists, axis=1, kind="stable")
        rankings[lo:hi] = order[:, :stored_k]
        targets = np.array([samples[j].target for j in range(lo, hi)])
        confidences[lo:hi] = dists[np.arange(hi - lo), targets]

    provenance = {
        "generator": "synthetic",
        "seed": seed,
        "sigma_g": quality.sigma_g,
        "corruption": quality.corruption,
        "truth_seed": truth.seed,
    }
    return TeacherArtifact(rankings=rankings, confidences=confidences,
                           embeddings=emb.copy(), provenance=provenance,
                           fingerprint=fingerprint,
                           generated=z_g if keep_generated else None)


# -- file formats -------------------------------------------------------------
#
# manifest.json   {"rankings": ..., "confidences": ..., "embeddings": ...,
#                  "sample_count": N, "item_count": I, "teacher_dim": D,
#                  "list_length": K, "standardize_embeddings": true,
#                  "fingerprint": ..., "provenance": {...}}
# rankings.jsonl  one {"sample": n, "items": [...]} object per line
# confidences.tsv sample_id <TAB> distance
# embeddings.txt  tensor checkpoint with a single tensor "teacher_embeddings"


def save_teacher_artifact(artifact: TeacherArtifact, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "rankings.jsonl", "w") as f:
        for idx, row in enumerate(artifact.rankings):
            f.write(json.dumps({"sample": idx, "items": [int(i) for i in row]}) + "\n")
    with open(out_dir / "confidences.tsv", "w") as f:
        for idx, d in enumerate(artifact.confidences):
            f.write(f"{idx}\t{float(d)!r}\n")
    save_tensors(out_dir / "embeddings.txt",
                 {"teacher_embeddings": artifact.embeddings})
    if artifact.generated is not None:
        save_tensors(out_dir / "generated.txt", {"generated": artifact.generated})

    manifest = {
        "rankings": "rankings.jsonl",
        "confidences": "confidences.tsv",
        "embeddings": "embeddings.txt",
        "sample_count": int(artifact.sample_count),
        "item_count": int(artifact.item_count),
        "teacher_dim": int(artifact.teacher_dim),
        "list_length": int(artifact.rankings.shape[1]),
        "standardize_embeddings": True,
        "fingerprint": artifact.fingerprint,
        "provenance": artifact.provenance,
    }
    if artifact.generated is not None:
        manifest["generated"] = "generated.txt"
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return out_dir / "manifest.json"


def load_teacher_artifact(manifest_path) -> TeacherArtifact:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    with open(manifest_path) as f:
        manifest = json.load(f)
    base = manifest_path.parent

    n = int(manifest["sample_count"])
    n_items = int(manifest["item_count"])
    list_len = int(manifest["list_length"])

    rankings = np.empty((n, list_len), dtype=np.int64)
    with open(base / manifest["rankings"]) as f:
        count = 0
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            idx, items = obj["sample"], obj["items"]
            if idx != count:
                raise TeacherError(f"rankings line {lineno}: sample ids out of order")
            if len(items) != list_len:
                raise TeacherError(f"rankings line {lineno}: expected {list_len} items")
            if len(set(items)) != len(items):
                raise TeacherError(f"rankings line {lineno}: duplicate item in ranking")
            if any(i < 0 or i >= n_items for i in items):
                raise TeacherError(f"rankings line {lineno}: item id out of range")
            rankings[idx] = items
            count += 1
    if count != n:
        raise TeacherError(f"rankings: expected {n} samples, found {count}")

    confidences = np.empty(n, dtype=np.float64)
    with open(base / manifest["confidences"]) as f:
        count = 0
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TeacherError(f"confidences line {lineno}: expected 2 columns")
            idx, d = int(parts[0]), float(parts[1])
            if idx != count:
                raise TeacherError(f"confidences line {lineno}: sample ids out of order")
            if not np.isfinite(d) or d < 0:
                raise TeacherError(f"confidences line {lineno}: bad distance {d}")
            confidences[idx] = d
            count += 1
    if count != n:
        raise TeacherError(f"confidences: expected {n} samples, found {count}")

    _, tensors = load_tensors(base / manifest["embeddings"])
    embeddings = tensors["teacher_embeddings"]
    if embeddings.shape[0] != n_items:
        raise TeacherError(
            f"embeddings row count {embeddings.shape[0]} != catalog size {n_items}")
    if not np.all(np.isfinite(embeddings)):
        raise TeacherError("embeddings contain non-finite values")

    generated = None
    if "generated" in manifest:
        _, gen = load_tensors(base / manifest["generated"])
        generated = gen["generated"]

    return TeacherArtifact(rankings=rankings, confidences=confidences,
                           embeddings=embeddings,
                           provenance=manifest.get("provenance", {}),
                           fingerprint=manifest.get("fingerprint", ""),
                           generated=generated)
