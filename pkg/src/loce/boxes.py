"""Axis-aligned boxes: IoU, jittered dense box generation, regression targets.

Scalar helpers work on :class:`Box`; the ``*_array`` variants take ``(N, 4)``
arrays in ``x1, y1, x2, y2`` order and are what the training loop uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

JITTER_FRACTION = 1.0 / 6.0


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not np.all(np.isfinite(coords)):
            raise ValueError(f"non-finite box {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class RegressionTarget:
    dx: float
    dy: float
    dw: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)


@dataclass(frozen=True)
class JitterSample:
    eta: tuple[float, float, float, float]
    signs: tuple[int, int, int, int]

    def __post_init__(self) -> None:
        if len(self.eta) != 4 or len(self.signs) != 4:
            raise ValueError("jitter needs four eta values and four signs")
        if any(not 0.0 <= e <= 1.0 for e in self.eta):
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if any(s not in (-1, 1) for s in self.signs):
            raise ValueError(f"signs must be +/-1, got {self.signs}")

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "JitterSample":
        eta, signs = draw_jitter(rng, 1)
        return cls(tuple(float(v) for v in eta[0]), tuple(int(v) for v in signs[0]))


def draw_jitter(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` independent jitters: eta uniform on [0, 1], signs uniform on {-1, +1}."""
    eta = rng.random((n, 4))
    signs = np.where(rng.random((n, 4)) < 0.5, -1.0, 1.0)
    return eta, signs


def iou_array(a, b) -> np.ndarray:
    """Row-wise IoU of two ``(N, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def iou(a: Box, b: Box) -> float:
    return float(iou_array(a.as_array(), b.as_array()))


def jitter_array(gt, eta, signs) -> np.ndarray:
    """Dense box generator: each coordinate moves by ``sign * eta * size / 6``."""
    gt = np.asarray(gt, dtype=np.float64)
    w = gt[..., 2] - gt[..., 0]
    h = gt[..., 3] - gt[..., 1]
    scale = np.stack([w, h, w, h], axis=-1) * JITTER_FRACTION
    return gt + np.asarray(signs) * np.asarray(eta) * scale


def generate_box(gt: Box, jitter: JitterSample) -> Box:
    # max inward shift is size/6 per side, so the result keeps >= 2/3 of each side
    return Box.from_array(jitter_array(gt.as_array(), jitter.eta, jitter.signs))


def generate_proposals(
    gt, rng: np.random.Generator, min_iou: float | None = None, max_tries: int = 100
) -> np.ndarray:
    """One jittered proposal per row of ``gt``.

    With ``min_iou`` set, rows falling at or below it are redrawn (rejection
    sampling). Unfiltered, the extreme all-inward jitter reaches IoU 4/9.
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    eta, signs = draw_jitter(rng, gt.shape[0])
    out = jitter_array(gt, eta, signs)
    if min_iou is None:
        return out
    bad = iou_array(out, gt) <= min_iou
    tries = 0
    while bad.any():
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not reach IoU > {min_iou} after {max_tries} redraws")
        eta, signs = draw_jitter(rng, int(bad.sum()))
        out[bad] = jitter_array(gt[bad], eta, signs)
        bad = iou_array(out, gt) <= min_iou
    return out


def encode_array(proposals, gt) -> np.ndarray:
    """Center offsets scaled by proposal size and log size ratios."""
    p = np.asarray(proposals, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    pw = p[..., 2] - p[..., 0]
    ph = p[..., 3] - p[..., 1]
    gw = g[..., 2] - g[..., 0]
    gh = g[..., 3] - g[..., 1]
    dx = ((g[..., 0] + g[..., 2]) - (p[..., 0] + p[..., 2])) * 0.5 / pw
    dy = ((g[..., 1] + g[..., 3]) - (p[..., 1] + p[..., 3])) * 0.5 / ph
    return np.stack([dx, dy, np.log(gw / pw), np.log(gh / ph)], axis=-1)


def decode_array(proposals, targets) -> np.ndarray:
    p = np.asarray(proposals, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    pw = p[..., 2] - p[..., 0]
    ph = p[..., 3] - p[..., 1]
    cx = (p[..., 0] + p[..., 2]) * 0.5 + t[..., 0] * pw
    cy = (p[..., 1] + p[..., 3]) * 0.5 + t[..., 1] * ph
    w = pw * np.exp(t[..., 2])
    h = ph * np.exp(t[..., 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def encode_target(proposal: Box, gt: Box) -> RegressionTarget:
    return RegressionTarget(*(float(v) for v in encode_array(proposal.as_array(), gt.as_array())))


def decode_target(proposal: Box, target: RegressionTarget) -> Box:
    return Box.from_array(decode_array(proposal.as_array(), target.as_array()))


def clip_box(box: Box, width: float, height: float) -> Box:
    """Clip to an image of the given size. Not applied anywhere by default."""
    a = box.as_array()
    a[[0, 2]] = np.clip(a[[0, 2]], 0.0, width)
    a[[1, 3]] = np.clip(a[[1, 3]], 0.0, height)
    return Box.from_array(a)
