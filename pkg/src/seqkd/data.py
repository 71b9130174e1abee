"""Interaction logs, sequence samples, chronological splits, negatives, and
the synthetic generator whose latent factors double as oracle ground truth."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SYNTH_STREAM = 40


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    timestamp: int


@dataclass
class InteractionDataset:
    """Re-indexed event log. Row order preserves the source order, which is
    the tie-break for equal timestamps."""

    users: np.ndarray          # int64, contiguous ids
    items: np.ndarray
    timestamps: np.ndarray
    user_count: int
    item_count: int
    user_map: dict = field(default_factory=dict)   # original id -> contiguous id
    item_map: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.users)


@dataclass(frozen=True)
class SequenceSample:
    prefix: tuple          # ordered item ids, most recent last
    target: int
    user_id: int
    target_timestamp: int


@dataclass
class SplitBundle:
    train: list
    validation: list
    test: list
    item_count: int
    user_count: int


def load_interactions(path) -> InteractionDataset:
    """Parse a 3-column TSV (user, item, timestamp); '#' lines are comments.

    User/item ids are re-indexed to contiguous ints in order of first
    appearance; the original ids are kept in the mapping tables.
    """
    path = Path(path)
    users: list[int] = []
    items: list[int] = []
    times: list[int] = []
    user_map: dict = {}
    item_map: dict = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) == 1:
                parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(parts)}")
            try:
                u, i, t = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field in {line!r}") from None
            if u < 0 or i < 0:
                raise DataError(f"{path}:{lineno}: negative id")
            if u not in user_map:
                user_map[u] = len(user_map)
            if i not in item_map:
                item_map[i] = len(item_map)
            users.append(user_map[u])
            items.append(item_map[i])
            times.append(t)
    if not users:
        raise DataError(f"{path}: no interactions found")
    return InteractionDataset(
        users=np.asarray(users, dtype=np.int64),
        items=np.asarray(items, dtype=np.int64),
        timestamps=np.asarray(times, dtype=np.int64),
        user_count=len(user_map),
        item_count=len(item_map),
        user_map=user_map,
        item_map=item_map,
    )


def save_interactions(path, dataset: InteractionDataset) -> None:
    with open(path, "w") as f:
        for u, i, t in zip(dataset.users, dataset.items, dataset.timestamps):
            f.write(f"{u}\t{i}\t{t}\n")


def save_id_map(path, mapping: dict) -> None:
    with open(path, "w") as f:
        for orig, new in mapping.items():
            f.write(f"{orig}\t{new}\n")


def build_sequences(dataset: InteractionDataset, max_len: int = 50) -> list[SequenceSample]:
    """One sample per position t >= 2 of each user's time-ordered history,
    prefix truncated to the most recent `max_len` items."""
    if max_len < 1:
        raise DataError(f"max_len must be >= 1, got {max_len}")
    per_user_items: dict[int, list[int]] = {}
    per_user_times: dict[int, list[int]] = {}
    for u, i, t in zip(dataset.users.tolist(), dataset.items.tolist(),
                       dataset.timestamps.tolist()):
        per_user_items.setdefault(u, []).append(i)
        per_user_times.setdefault(u, []).append(t)

    samples: list[SequenceSample] = []
    for u in sorted(per_user_items):
        times = np.asarray(per_user_times[u])
        order = np.argsort(times, kind="stable")   # ties keep input order
        hist = [per_user_items[u][j] for j in order]
        ts = [per_user_times[u][j] for j in order]
        for t in range(1, len(hist)):
            prefix = tuple(hist[max(0, t - max_len):t])
            samples.append(SequenceSample(prefix=prefix, target=hist[t],
                                          user_id=u, target_timestamp=ts[t]))
    return samples


def chronological_split_ids(samples: list[SequenceSample],
                            ratios: tuple = (8, 1, 1)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Indices of (train, validation, test) after a stable sort by target
    timestamp, cut at the floor of the cumulative ratios."""
    if len(samples) < 10:
        raise DataError(f"need at least 10 samples to split, got {len(samples)}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise DataError(f"bad split ratios {ratios}")
    order = np.asarray(sorted(range(len(samples)),
                              key=lambda j: samples[j].target_timestamp), dtype=np.int64)
    n = len(order)
    total = sum(ratios)
    cut1 = n * ratios[0] // total
    cut2 = n * (ratios[0] + ratios[1]) // total
    return order[:cut1], order[cut1:cut2], order[cut2:]


def chronological_split(samples: list[SequenceSample],
                        ratios: tuple = (8, 1, 1),
                        item_count: int = 0,
                        user_count: int = 0) -> SplitBundle:
    """Sort by target timestamp and cut at the floor of the cumulative ratios."""
    train_ids, val_ids, test_ids = chronological_split_ids(samples, ratios)
    return SplitBundle(
        train=[samples[j] for j in train_ids],
        validation=[samples[j] for j in val_ids],
        test=[samples[j] for j in test_ids],
        item_count=item_count,
        user_count=user_count,
    )


def sample_negatives(sample: SequenceSample, n: int, item_count: int, seed: int) -> list[int]:
    """Draw n uniform item ids excluding the target, resampling collisions."""
    if n < 1:
        raise DataError(f"n must be >= 1, got {n}")
    if item_count <= 1:
        raise DataError("catalog exhausted: no non-target item exists")
    rng = np.random.default_rng(seed)
    out: list[int] = []
    while len(out) < n:
        cand = int(rng.integers(0, item_count))
        if cand != sample.target:
            out.append(cand)
    return out


def sample_negatives_batch(targets: np.ndarray, n: int, item_count: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Vectorized uniform negatives with resample-on-collision, one row per target."""
    if item_count <= 1:
        raise DataError("catalog exhausted: no non-target item exists")
    out = rng.integers(0, item_count, size=(len(targets), n))
    bad = out == targets[:, None]
    while bad.any():
        out[bad] = rng.integers(0, item_count, size=int(bad.sum()))
        bad = out == targets[:, None]
    return out


@dataclass
class SyntheticConfig:
    user_count: int = 2000
    item_count: int = 500
    events_per_user: int = 20
    latent_dim: int = 8
    teacher_dim: int = 32
    popularity_skew: float = 0.0
    noise_scale: float = 0.1
    temperature: float = 0.5

    def validate(self) -> None:
        if self.user_count < 1 or self.item_count < 2:
            raise DataError("need at least 1 user and 2 items")
        if self.events_per_user < 1:
            raise DataError("events_per_user must be >= 1")
        if self.latent_dim < 1 or self.teacher_dim < 1:
            raise DataError("latent and teacher dims must be >= 1")
        if self.temperature <= 0:
            raise DataError("temperature must be > 0")
        if self.noise_scale < 0 or self.popularity_skew < 0:
            raise DataError("noise_scale and popularity_skew must be >= 0")


@dataclass
class SyntheticTruth:
    """Latent factors behind a synthetic dataset; the oracle for teacher synthesis."""

    user_factors: np.ndarray    # (users, d)
    item_factors: np.ndarray    # (items, d)
    teacher_embeddings: np.ndarray  # (items, teacher_dim)
    config: SyntheticConfig
    seed: int


def generate_synthetic(config: SyntheticConfig, seed: int) -> tuple[InteractionDataset, SyntheticTruth]:
    """Latent-factor event log plus the factors that generated it.

    Users pick items i.i.d. from softmax(u . v / temperature + skew * log-pop);
    timestamps interleave users round-robin so a global chronological split
    cuts every user's history at the same relative position. Teacher item
    embeddings are the item factors concatenated with seeded noise, pushed
    through a random linear map to the teacher dimension.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence((seed, SYNTH_STREAM)))
    nu, ni, d = config.user_count, config.item_count, config.latent_dim

    item_factors = rng.standard_normal((ni, d)) / np.sqrt(d)
    user_factors = rng.standard_normal((nu, d)) / np.sqrt(d)

    log_pop = -config.popularity_skew * np.log(np.arange(1, ni + 1, dtype=np.float64))
    logits = user_factors @ item_factors.T / config.temperature + log_pop
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)

    events = np.empty((nu, config.events_per_user), dtype=np.int64)
    for u in range(nu):
        events[u] = rng.choice(ni, size=config.events_per_user, p=probs[u])

    # Round-robin timestamps: event k of user u happens at k*|U| + u.
    ks = np.arange(config.events_per_user)
    users = np.repeat(np.arange(nu), config.events_per_user)
    times = (ks[None, :] * nu + np.arange(nu)[:, None]).reshape(-1)
    order = np.argsort(times, kind="stable")

    noise = rng.standard_normal((ni, d)) * config.noise_scale
    raw = np.concatenate([item_factors, noise], axis=1)
    mix = rng.standard_normal((raw.shape[1], config.teacher_dim)) / np.sqrt(raw.shape[1])
    teacher_embeddings = raw @ mix

    dataset = InteractionDataset(
        users=users[order],
        items=events.reshape(-1)[order],
        timestamps=times[order],
        user_count=nu,
        item_count=ni,
        user_map={u: u for u in range(nu)},
        item_map={i: i for i in range(ni)},
    )
    truth = SyntheticTruth(user_factors=user_factors, item_factors=item_factors,
                           teacher_embeddings=teacher_embeddings, config=config, seed=seed)
    return dataset, truth


def sample_fingerprint(samples: list[SequenceSample]) -> str:
    """Stable hash of the sample set, used to pair teacher artifacts with data."""
    h = hashlib.sha256()
    for s in samples:
        h.update(f"{s.user_id}:{s.target}:{s.target_timestamp}:{','.join(map(str, s.prefix))};".encode())
    return h.hexdigest()
