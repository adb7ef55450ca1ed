"""FIFO memory bank of detached embeddings reused as extra contrast candidates."""

from __future__ import annotations

from collections import deque
from dataclasses import replace

import numpy as np

from .losses import BANK, PairIndexSets

__all__ = ["MemoryBank", "push_batch", "augment_candidates"]


class MemoryBank:
    """Bounded queue of ``(embedding, label, exit)`` entries.

    ``exits="backbone"`` keeps every entry but only exposes those pushed from
    the backbone exit as candidates.
    """

    def __init__(self, capacity: int = 1024, exits: str = "all"):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        if exits not in ("all", "backbone"):
            raise ValueError("exits must be 'all' or 'backbone'")
        self.capacity = capacity
        self.exits = exits
        self._queue: deque = deque(maxlen=capacity) if capacity else deque(maxlen=0)
        self.dim: int | None = None

    def __len__(self) -> int:
        return len(self._queue)

    def push(self, embedding, label: int, exit_index: int, is_backbone: bool) -> None:
        emb = np.array(embedding, dtype=np.float64)
        emb.setflags(write=False)
        if self.dim is None:
            self.dim = emb.shape[0]
        elif emb.shape != (self.dim,):
            raise ValueError(f"bank holds {self.dim}-dim embeddings, got {emb.shape}")
        if self.capacity:
            self._queue.append((emb, int(label), int(exit_index), bool(is_backbone)))

    def entries(self) -> list[tuple[np.ndarray, int, int]]:
        """Entries usable as candidates, oldest first."""
        return [(e, y, k) for e, y, k, bb in self._queue if self.exits == "all" or bb]

    def embedding_matrix(self) -> np.ndarray:
        rows = [e for e, _, _ in self.entries()]
        if not rows:
            return np.zeros((0, self.dim or 0))
        return np.stack(rows)

    def labels(self) -> np.ndarray:
        return np.array([y for _, y, _ in self.entries()], dtype=np.int64)

    def clear(self) -> None:
        self._queue.clear()


def push_batch(bank: MemoryBank, outputs, labels) -> None:
    """Append detached copies of every exit output, exit by exit."""
    labels = np.asarray(labels)
    E = outputs.n_exits
    for k, emb in enumerate(outputs.embeddings):
        data = np.asarray(getattr(emb, "data", emb))
        for i in range(data.shape[0]):
            bank.push(data[i], labels[i], k, k == E - 1)


def augment_candidates(sets: PairIndexSets, bank: MemoryBank, anchor_labels=None) -> PairIndexSets:
    """Add bank entries to every anchor's ``J`` (and to ``P`` on label match).

    ``anchor_labels`` are the live batch labels indexed by sample; pass
    ``None`` for unsupervised kinds, where bank entries only act as negatives.
    """
    entries = bank.entries()
    if not entries:
        return sets
    M = len(entries)
    cols = np.stack([np.full(M, BANK), np.arange(M)], axis=1)
    cand = np.ones((len(sets.anchors), M), dtype=bool)
    if anchor_labels is None:
        pos = np.zeros_like(cand)
    else:
        y = np.asarray(anchor_labels)[sets.anchors[:, 1]]
        pos = y[:, None] == bank.labels()[None, :]
    return replace(
        sets,
        columns=np.concatenate([sets.columns, cols]),
        positive=np.concatenate([sets.positive, pos], axis=1),
        candidate=np.concatenate([sets.candidate, cand], axis=1),
    )
