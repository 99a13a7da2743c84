"""Per-class mean classification score tracked by exponential moving average."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


def _check_unit_open(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or not 0.0 < value <= 1.0:
        raise ValueError(f"{name} must lie in (0, 1], got {value!r}")
    return value


@dataclass
class MeanScoreVector:
    """Running score per foreground class plus a fixed background stand-in.

    ``scores`` holds the C foreground entries. The background slot (index C)
    is never tracked: every read of it returns ``background_substitute``.
    """

    scores: np.ndarray
    alpha: float
    background_substitute: float
    frozen: bool = False
    updates: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.scores = np.array(self.scores, dtype=np.float64)
        if self.scores.ndim != 1 or self.scores.size < 1:
            raise ValueError("scores must be a non-empty vector")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores <= 0) or np.any(self.scores > 1):
            raise ValueError("every score must lie in (0, 1]")
        alpha = float(self.alpha)
        if not math.isfinite(alpha) or not 0.0 <= alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {alpha!r}")
        self.alpha = alpha
        self.background_substitute = _check_unit_open("background_substitute", self.background_substitute)
        if self.updates is None:
            self.updates = np.zeros(self.scores.size, dtype=np.int64)

    @property
    def num_foreground(self) -> int:
        return int(self.scores.size)

    @property
    def background_index(self) -> int:
        return self.num_foreground

    def __getitem__(self, index: int) -> float:
        if index == self.background_index:
            return self.background_substitute
        return float(self.scores[index])

    def values(self) -> np.ndarray:
        """Full length-(C+1) vector as read for margins (background substituted)."""
        return np.append(self.scores, self.background_substitute)

    def log_values(self) -> np.ndarray:
        return np.log(self.values())

    def update(self, class_label: int, probability: float) -> float:
        """Fold one positive instance's true-class probability into its class entry."""
        class_label = int(class_label)
        if not 0 <= class_label < self.num_foreground:
            raise ValueError(f"only foreground labels update the tracker, got {class_label}")
        p = float(probability)
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {p!r}")
        if self.frozen:
            return float(self.scores[class_label])
        new = self.alpha * self.scores[class_label] + (1.0 - self.alpha) * p
        # p = 0 with a tiny previous score could underflow to zero
        self.scores[class_label] = max(new, np.finfo(np.float64).tiny)
        self.updates[class_label] += 1
        return float(self.scores[class_label])

    def update_many(self, labels: Iterable[int], probabilities: Iterable[float]) -> None:
        """Sequential updates in the given order; the fold is order-sensitive."""
        for label, p in zip(labels, probabilities):
            self.update(label, p)

    def copy(self) -> "MeanScoreVector":
        return MeanScoreVector(
            self.scores.copy(), self.alpha, self.background_substitute, self.frozen, self.updates.copy()
        )

    def to_text(self) -> str:
        lines = [
            f"alpha={self.alpha!r}",
            f"background_substitute={self.background_substitute!r}",
            f"frozen={int(self.frozen)}",
            f"num_foreground={self.num_foreground}",
        ]
        lines += [f"{i}={float(v)!r}" for i, v in enumerate(self.scores)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MeanScoreVector":
        meta: dict[str, str] = {}
        entries: dict[int, float] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key = key.strip()
            if key.isdigit():
                entries[int(key)] = float(value)
            else:
                meta[key] = value.strip()
        n = int(meta.get("num_foreground", len(entries)))
        if sorted(entries) != list(range(n)):
            raise ValueError("snapshot is missing class entries")
        return cls(
            np.array([entries[i] for i in range(n)]),
            alpha=float(meta["alpha"]),
            background_substitute=float(meta["background_substitute"]),
            frozen=bool(int(meta.get("frozen", "0"))),
        )


def new_tracker(
    num_foreground_classes: int,
    alpha: float = 0.9,
    background_substitute: float = 0.01,
    init_value: float | None = None,
) -> MeanScoreVector:
    """Fresh tracker; ``init_value`` defaults to the uniform-softmax score 1/(C+1)."""
    if int(num_foreground_classes) < 1:
        raise ValueError("need at least one foreground class")
    n = int(num_foreground_classes)
    if init_value is None:
        init_value = 1.0 / (n + 1)
    init_value = _check_unit_open("init_value", init_value)
    return MeanScoreVector(np.full(n, init_value), alpha, background_substitute)


def frequency_indicator(
    class_instance_counts, background_substitute: float = 0.01
) -> MeanScoreVector:
    """Dataset-prior indicator: instance counts normalized to sum to one.

    Drop-in replacement for the score tracker; it is frozen, so updates are no-ops.
    """
    counts = np.asarray(class_instance_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 1:
        raise ValueError("counts must be a non-empty vector")
    if np.any(~np.isfinite(counts)) or np.any(counts < 1):
        raise ValueError("every class needs a count of at least 1")
    return MeanScoreVector(counts / counts.sum(), 0.0, background_substitute, frozen=True)
