"""Soft-label generation, neighbor label exchange, label averaging and pool rebuild.

Wire layout of one label message (all little-endian)::

    uint32 record_count
    record_count x { uint32 public_index; float32 probs[C] }

Only indices and probability vectors are ever encoded; features never leave
a node.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInputError, TransportError
from .model import MlpModel, check_soft_labels, predict, softmax_with_temperature
from .topology import Graph


@dataclass(frozen=True, eq=False)
class SoftLabelRecord:
    """A public-sample index with its soft label.

    ``msp`` is the temperature-1 max softmax probability used for OoD gating;
    when absent, gating falls back to ``max(probs)``.
    """

    public_index: int
    probs: np.ndarray
    msp: float | None = None

    @property
    def confidence(self) -> float:
        return float(self.probs.max()) if self.msp is None else self.msp

    def __eq__(self, other):
        if not isinstance(other, SoftLabelRecord):
            return NotImplemented
        return (self.public_index == other.public_index and self.msp == other.msp
                and np.array_equal(self.probs, other.probs))


def generate_soft_labels(model: MlpModel, public_features, tau: float) -> list[SoftLabelRecord]:
    """One record per public row: probs at ``tau``, gating confidence at temperature 1."""
    feats = np.asarray(getattr(public_features, "features", public_features))
    logits = predict(model, feats)
    soft = softmax_with_temperature(logits.astype(np.float64), tau)
    msp = softmax_with_temperature(logits.astype(np.float64), 1.0).max(axis=1)
    return [SoftLabelRecord(i, soft[i], float(msp[i])) for i in range(len(feats))]


# ---------------------------------------------------------------- wire


def message_size(n_records: int, num_classes: int) -> int:
    return 4 + n_records * (4 + 4 * num_classes)


def encode_message(records: Sequence[SoftLabelRecord], num_classes: int) -> bytes:
    rec = struct.Struct(f"<I{num_classes}f")
    parts = [struct.pack("<I", len(records))]
    for r in records:
        if r.probs.shape != (num_classes,):
            raise InvalidInputError(f"record {r.public_index} has {r.probs.shape} probs, expected {num_classes}")
        parts.append(rec.pack(r.public_index, *r.probs))
    return b"".join(parts)


def decode_message(payload: bytes, num_classes: int) -> list[SoftLabelRecord]:
    if len(payload) < 4:
        raise TransportError("label message shorter than its header")
    (count,) = struct.unpack_from("<I", payload)
    if len(payload) != message_size(count, num_classes):
        raise TransportError(f"label message of {len(payload)} bytes does not hold {count} records")
    body = np.frombuffer(payload, dtype=np.dtype([("index", "<u4"), ("probs", "<f4", (num_classes,))]),
                         offset=4, count=count)
    return [SoftLabelRecord(int(row["index"]), row["probs"].astype(np.float64)) for row in body]


@dataclass
class InProcessTransport:
    """Lossless, ordered, neighbor-only message passing with byte accounting."""

    graph: Graph
    log: list[tuple[int, int, int]] = field(default_factory=list)
    _inbox: dict[int, list[tuple[int, bytes]]] = field(default_factory=dict)

    def send(self, src: int, dst: int, payload: bytes) -> None:
        if not self.graph.adjacency[src, dst]:
            raise TransportError(f"nodes {src} and {dst} are not neighbors")
        self._inbox.setdefault(dst, []).append((src, payload))
        self.log.append((src, dst, len(payload)))

    def receive(self, dst: int) -> list[tuple[int, bytes]]:
        return sorted(self._inbox.pop(dst, []), key=lambda m: m[0])


@dataclass
class ExchangeResult:
    received: list[dict[int, list[SoftLabelRecord]]]
    messages: list[tuple[int, int, int]]  # (src, dst, bytes)

    def bytes_sent(self, n_nodes: int) -> list[int]:
        out = [0] * n_nodes
        for src, _, nbytes in self.messages:
            out[src] += nbytes
        return out


def exchange_labels(subsets: Sequence[Sequence[SoftLabelRecord]], graph: Graph, num_classes: int,
                    transport: InProcessTransport | None = None) -> ExchangeResult:
    """Synchronous round: every node sends its ID subset to each neighbor, then all receive."""
    if len(subsets) != graph.n:
        raise InvalidInputError(f"{len(subsets)} subsets for {graph.n} nodes")
    transport = transport or InProcessTransport(graph)
    start = len(transport.log)
    for i in range(graph.n):
        payload = encode_message(subsets[i], num_classes)
        for j in graph.neighbors(i):
            transport.send(i, j, payload)
    received = []
    for j in range(graph.n):
        received.append({src: decode_message(p, num_classes) for src, p in transport.receive(j)})
    return ExchangeResult(received, transport.log[start:])


def label_average(own: Sequence[SoftLabelRecord],
                  received: Mapping[int, Sequence[SoftLabelRecord]]) -> list[tuple[int, np.ndarray]]:
    """Mean soft label per public index over the nodes that selected it.

    Contributions are summed in a fixed order (own subset, then senders by
    id), so the result does not depend on mapping iteration order.
    """
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for records in [own] + [received[k] for k in sorted(received)]:
        for r in records:
            p = np.asarray(r.probs, dtype=np.float64)
            if r.public_index in sums:
                sums[r.public_index] = sums[r.public_index] + p
                counts[r.public_index] += 1
            else:
                sums[r.public_index] = p.copy()
                counts[r.public_index] = 1
    out = []
    for idx in sorted(sums):
        mean = sums[idx] / counts[idx]
        out.append((idx, mean / mean.sum()))
    return out


@dataclass(frozen=True, eq=False)
class TrainingPool:
    """A node's training set: its original private samples plus averaged public labels."""

    private_indices: np.ndarray
    private_labels: np.ndarray
    public_indices: np.ndarray
    public_probs: np.ndarray

    def __post_init__(self):
        if len(np.unique(self.public_indices)) != len(self.public_indices):
            raise InvalidInputError("public indices in a pool must be unique")
        if len(self.private_indices) != len(self.private_labels):
            raise InvalidInputError("private indices and labels differ in length")

    def __len__(self):
        return len(self.private_indices) + len(self.public_indices)

    @property
    def n_private(self) -> int:
        return len(self.private_indices)

    @property
    def n_public(self) -> int:
        return len(self.public_indices)


def build_training_pool(private_indices, private_labels, averaged: Sequence[tuple[int, np.ndarray]] = (),
                        num_classes: int | None = None) -> TrainingPool:
    """Pool = private set + averaged public labels; any earlier public portion is discarded."""
    private_indices = np.asarray(private_indices, dtype=np.int64)
    private_labels = np.asarray(private_labels, dtype=np.int64)
    if averaged:
        pub_idx = np.array([i for i, _ in averaged], dtype=np.int64)
        pub_probs = check_soft_labels(np.stack([p for _, p in averaged]).astype(np.float64), atol=1e-6)
    else:
        c = num_classes if num_classes is not None else 0
        pub_idx = np.zeros(0, dtype=np.int64)
        pub_probs = np.zeros((0, c))
    return TrainingPool(private_indices, private_labels, pub_idx, pub_probs)
