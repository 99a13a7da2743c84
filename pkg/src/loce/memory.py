"""Per-class FIFO feature memory and the inverse-score class sampler."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scores import MeanScoreVector


@dataclass
class MemoryEntry:
    feature: np.ndarray
    target: np.ndarray
    source_class: int


@dataclass(frozen=True)
class SamplerConfig:
    k: int = 8
    m: int = 4
    classes_with_replacement: bool = True

    def __post_init__(self) -> None:
        if self.k < 1 or self.m < 1:
            raise ValueError(f"k and m must be >= 1, got k={self.k}, m={self.m}")


class FeatureMemory:
    """One bounded queue per foreground class; the oldest entry is evicted first."""

    def __init__(self, num_classes: int, feature_dim: int, capacity: int = 80):
        if num_classes < 1 or feature_dim < 1 or capacity < 1:
            raise ValueError("num_classes, feature_dim and capacity must be positive")
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.capacity = capacity
        self.queues: list[deque[MemoryEntry]] = [deque(maxlen=capacity) for _ in range(num_classes)]

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues)

    def queue_lengths(self) -> np.ndarray:
        return np.array([len(q) for q in self.queues], dtype=np.int64)

    def enqueue(self, entries) -> None:
        entries = list(entries)
        for e in entries:
            if not 0 <= e.source_class < self.num_classes:
                raise ValueError(f"memory holds foreground classes only, got {e.source_class}")
            if np.shape(e.feature) != (self.feature_dim,):
                raise ValueError(f"feature shape {np.shape(e.feature)} != ({self.feature_dim},)")
        for e in entries:
            self.queues[e.source_class].append(e)

    def enqueue_batch(self, features, targets, labels) -> None:
        features = np.asarray(features, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        self.enqueue(
            MemoryEntry(features[i].copy(), targets[i].copy(), int(labels[i])) for i in range(len(labels))
        )

    def sample(
        self, s: MeanScoreVector, cfg: SamplerConfig, rng: np.random.Generator
    ) -> list[MemoryEntry]:
        """Draw ``cfg.k`` classes by inverse score, then ``cfg.m`` entries per drawn class.

        Drawn classes with an empty queue contribute nothing. A queue shorter
        than ``m`` is sampled with replacement.
        """
        if len(self) == 0:
            return []
        probs = class_probabilities(s)
        if cfg.classes_with_replacement:
            drawn = rng.choice(self.num_classes, size=cfg.k, p=probs)
        else:
            size = min(cfg.k, int(np.count_nonzero(probs)))
            drawn = rng.choice(self.num_classes, size=size, replace=False, p=probs)
        lengths = self.queue_lengths()
        # per-class index blocks are drawn in one vectorised call each
        picks: dict[int, np.ndarray] = {}
        for c in np.unique(drawn):
            n_draws = int(np.count_nonzero(drawn == c))
            size = int(lengths[c])
            if size == 0:
                continue
            if size < cfg.m or cfg.m == 1:
                picks[int(c)] = rng.integers(0, size, size=(n_draws, cfg.m))
            else:
                picks[int(c)] = np.argsort(rng.random((n_draws, size)), axis=1)[:, : cfg.m]
        cursor = dict.fromkeys(picks, 0)
        out: list[MemoryEntry] = []
        for c in drawn:
            c = int(c)
            if c not in picks:
                continue
            queue = self.queues[c]
            out.extend(queue[j] for j in picks[c][cursor[c]])
            cursor[c] += 1
        return out

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["class", "slot", "dx", "dy", "dw", "dh"] + [f"f{i}" for i in range(self.feature_dim)]
            )
            for c, queue in enumerate(self.queues):
                for slot, e in enumerate(queue):
                    w.writerow([c, slot] + [repr(float(v)) for v in e.target] + [repr(float(v)) for v in e.feature])

    @classmethod
    def load_csv(cls, path, num_classes: int, capacity: int) -> "FeatureMemory":
        with open(Path(path), newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        dim = len(header) - 6
        mem = cls(num_classes, dim, capacity)
        for row in body:
            vals = [float(v) for v in row[2:]]
            mem.enqueue([MemoryEntry(np.array(vals[4:]), np.array(vals[:4]), int(row[0]))])
        return mem


def class_probabilities(s: MeanScoreVector) -> np.ndarray:
    """Sampling probability per foreground class, proportional to 1 / score."""
    inv = 1.0 / np.asarray(s.scores, dtype=np.float64)
    return inv / inv.sum()
