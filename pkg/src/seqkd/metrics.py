"""Ranking metrics over full-catalog top-K lists, plus teacher-student
overlap diagnostics and report serialization (CSV + markdown)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .models import StudentModel, pad_prefixes


class MetricsError(ValueError):
    pass


def hr_at_k(ranked_list, target: int) -> int:
    return 1 if int(target) in set(int(i) for i in ranked_list) else 0


def ndcg_at_k(ranked_list, target: int) -> float:
    for pos, item in enumerate(ranked_list, start=1):
        if int(item) == int(target):
            return 1.0 / np.log2(pos + 1)
    return 0.0


@dataclass
class MetricsReport:
    hr: float
    ndcg: float
    k: int
    sample_count: int
    hits: np.ndarray | None = None           # per-sample 0/1
    ndcgs: np.ndarray | None = None
    lists: np.ndarray | None = None          # (n, k) ranked ids
    overlap: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def evaluate(model: StudentModel, samples, k: int = 20,
             batch_size: int = 512, keep_lists: bool = False) -> MetricsReport:
    """Full-catalog ranking of every sample; means of HR@k and NDCG@k."""
    if not samples:
        raise MetricsError("no samples to evaluate")
    n = len(samples)
    hits = np.zeros(n)
    ndcgs = np.zeros(n)
    lists = np.empty((n, k), dtype=np.int64) if keep_lists else None
    for lo in range(0, n, batch_size):
        chunk = samples[lo:lo + batch_size]
        prefixes = [list(s.prefix) for s in chunk]
        padded, lengths = pad_prefixes(prefixes)
        topk = model.top_k_batch(padded, lengths, k, prefixes=prefixes)
        if lists is not None:
            lists[lo:lo + len(chunk)] = topk
        targets = np.array([s.target for s in chunk])
        where = topk == targets[:, None]
        hit_rows, hit_cols = np.nonzero(where)
        hits[lo + hit_rows] = 1.0
        ndcgs[lo + hit_rows] = 1.0 / np.log2(hit_cols + 2.0)
    return MetricsReport(hr=float(hits.mean()), ndcg=float(ndcgs.mean()), k=k,
                         sample_count=n, hits=hits, ndcgs=ndcgs, lists=lists)


def overlap_ratio(lists_a: np.ndarray, lists_b: np.ndarray, k: int,
                  targets: np.ndarray | None = None):
    """Mean |A cap B| / k, plus per-region hit rates when targets are given.

    Region hit rate = fraction of recommended (sample, item) pairs in that
    region that equal the sample's target.
    """
    lists_a = np.asarray(lists_a)[:, :k]
    lists_b = np.asarray(lists_b)[:, :k]
    if lists_a.shape != lists_b.shape:
        raise MetricsError(f"mismatched list sets: {lists_a.shape} vs {lists_b.shape}")
    n = lists_a.shape[0]
    fractions = np.zeros(n)
    region_items = {"overlap": 0, "a_only": 0, "b_only": 0}
    region_hits = {"overlap": 0, "a_only": 0, "b_only": 0}
    for row in range(n):
        a = set(lists_a[row].tolist())
        b = set(lists_b[row].tolist())
        both = a & b
        fractions[row] = len(both) / k
        if targets is not None:
            t = int(targets[row])
            for name, region in (("overlap", both), ("a_only", a - b), ("b_only", b - a)):
                region_items[name] += len(region)
                region_hits[name] += 1 if t in region else 0
    result = float(fractions.mean())
    if targets is None:
        return result, {}
    rates = {name: (region_hits[name] / region_items[name] if region_items[name] else 0.0)
             for name in region_items}
    return result, rates


def overlap_before_after(teacher_lists: np.ndarray, student_pre: np.ndarray,
                         student_post: np.ndarray, k: int) -> tuple[float, float]:
    pre, _ = overlap_ratio(teacher_lists, student_pre, k)
    post, _ = overlap_ratio(teacher_lists, student_post, k)
    return pre, post


def per_sample_wins(ndcg_a: np.ndarray, ndcg_b: np.ndarray) -> dict:
    """Win/loss counts of A vs B on per-sample NDCG; ties count for neither."""
    a_wins = int((ndcg_a > ndcg_b).sum())
    b_wins = int((ndcg_b > ndcg_a).sum())
    return {"a_wins": a_wins, "b_wins": b_wins,
            "ties": len(ndcg_a) - a_wins - b_wins}


# -- serialization -------------------------------------------------------------

def write_metrics_csv(path, rows: list[dict]) -> None:
    """One row per run/config. Column order is first-seen key order, so a
    fixed caller produces byte-identical files."""
    if not rows:
        raise MetricsError("no metric rows to write")
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in columns})


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_markdown_table(path, rows: list[dict], title: str = "") -> None:
    if not rows:
        raise MetricsError("no rows to write")
    columns: list[str] = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    cells = [[_md_cell(row.get(c, "")) for c in columns] for row in rows]
    widths = [max(len(c), max(len(row[i]) for row in cells))
              for i, c in enumerate(columns)]
    lines = []
    if title:
        lines.append(f"# {title}")
        lines.append("")
    lines.append("| " + " | ".join(c.ljust(w) for c, w in zip(columns, widths)) + " |")
    lines.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    for row in cells:
        lines.append("| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _md_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_diagnostics_jsonl(path, report: MetricsReport) -> None:
    import json
    with open(path, "w") as f:
        for idx in range(report.sample_count):
            rec = {"sample": idx, "hit": int(report.hits[idx]),
                   "ndcg": float(report.ndcgs[idx])}
            if report.lists is not None:
                rec["items"] = report.lists[idx].tolist()
            f.write(json.dumps(rec) + "\n")
