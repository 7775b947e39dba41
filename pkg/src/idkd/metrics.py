"""Communication accounting, class-histogram homogeneity and result export.

Byte accounting counts each node's sends only; a receive is always some
peer's send. Parameters are counted at 4 bytes each.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import InvalidInputError

MIB = 1024 ** 2


@dataclass
class CommLedger:
    gossip_bytes: int = 0
    label_bytes: int = 0
    gossip_by_iter: list[int] = field(default_factory=list)
    label_by_event: list[int] = field(default_factory=list)

    @property
    def total_bytes(self) -> int:
        return self.gossip_bytes + self.label_bytes

    def overhead_ratio(self) -> float:
        return self.label_bytes / self.gossip_bytes if self.gossip_bytes else 0.0


def record_param_gossip(ledger: CommLedger, n_params: int, bytes_per_param: int, n_neighbors: int) -> int:
    nbytes = int(n_params) * int(bytes_per_param) * int(n_neighbors)
    if nbytes < 0:
        raise InvalidInputError("byte counts cannot be negative")
    ledger.gossip_bytes += nbytes
    return nbytes


def close_iteration(ledger: CommLedger, nbytes: int) -> None:
    ledger.gossip_by_iter.append(nbytes)


def record_label_exchange(ledger: CommLedger, message_bytes: Iterable[int]) -> int:
    total = 0
    for b in message_bytes:
        if b < 0:
            raise InvalidInputError("byte counts cannot be negative")
        total += int(b)
    ledger.label_bytes += total
    ledger.label_by_event.append(total)
    return total


def amortize(ledger: CommLedger, total_iters: int) -> float:
    """Average bytes per iteration with label traffic spread over the whole run."""
    if total_iters <= 0:
        raise InvalidInputError("total_iters must be positive")
    return ledger.total_bytes / total_iters


def replay_ledger(events: Iterable[Mapping]) -> CommLedger:
    """Rebuild a ledger from a run's event stream."""
    ledger = CommLedger()
    per_iter = None
    for ev in events:
        kind = ev.get("event")
        if kind == "run_start":
            per_iter = sum(ev["n_params"] * ev["bytes_per_param"] * d for d in ev["degrees"])
        elif kind == "run_end":
            if per_iter is None:
                raise InvalidInputError("run_end before run_start in event stream")
            for _ in range(ev["iterations"]):
                ledger.gossip_bytes += per_iter
                ledger.gossip_by_iter.append(per_iter)
        elif kind == "idkd_exchange":
            record_label_exchange(ledger, ev["message_bytes"])
    return ledger


# ------------------------------------------------------------ histograms


@dataclass(frozen=True)
class ClassHistogram:
    counts: np.ndarray
    shares: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.shares)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.array([int(Decimal(repr(float(v))).quantize(Decimal(1), rounding=ROUND_HALF_UP)) for v in x],
                    dtype=np.float64)


def histogram_from_counts(counts) -> ClassHistogram:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    shares = counts / total if total > 0 else np.full(counts.size, 1.0 / counts.size)
    return ClassHistogram(counts, shares)


def soft_class_histogram(pool, num_classes: int) -> ClassHistogram:
    """Hard labels add 1 to their class, soft labels add their probability mass.

    Per-class totals are rounded half-up to whole counts and then normalized.
    """
    mass = np.bincount(np.asarray(pool.private_labels, dtype=np.int64), minlength=num_classes).astype(np.float64)
    if pool.n_public:
        mass = mass + np.asarray(pool.public_probs, dtype=np.float64).sum(axis=0)
    return histogram_from_counts(_round_half_up(mass))


def tv_distance(h1, h2) -> float:
    """Total-variation distance between two class distributions."""
    p = np.asarray(getattr(h1, "shares", h1), dtype=np.float64)
    q = np.asarray(getattr(h2, "shares", h2), dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError(f"class counts differ: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


# ---------------------------------------------------------------- export


def export_jsonl(records: Iterable[Mapping], path) -> None:
    with Path(path).open("a") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
            f.flush()


def export_csv(records: Iterable[Mapping], path, fieldnames=None) -> None:
    records = list(records)
    path = Path(path)
    if fieldnames is None:
        fieldnames = list(records[0]) if records else []
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, quoting=csv.QUOTE_MINIMAL)
        if new:
            w.writeheader()
        for rec in records:
            w.writerow(rec)
            f.flush()
