"""Seeded long-tailed instance worlds and the frozen feature extractor stand-in.

Each class has a prototype on a sphere in a latent space; instances are
prototype plus Gaussian noise, with a ground-truth box. A proposal box over an
instance is turned into a feature by a fixed random projection of the latent
code, the proposal's regression target and its IoU with the ground truth.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .boxes import Box, encode_array, iou_array

GROUPS = ("rare", "common", "frequent")


@dataclass(frozen=True)
class WorldSpec:
    num_classes: int = 50
    zipf_exponent: float = 1.5
    total_instances: int = 20000
    feature_dim: int = 32
    cluster_spread: float = 1.0
    inter_class_separation: float = 5.0
    seed: int = 0
    latent_dim: int = 16
    val_per_class: int = 40
    min_prototype_angle: float = 60.0
    feature_noise: float = 0.1
    geometry_scale: float = 1.0
    background_scale: float = 1.5
    background_exclusion: float = 3.0
    rare_fraction: float = 0.002
    common_fraction: float = 0.01
    image_size: float = 1024.0

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.total_instances < self.num_classes:
            raise ValueError("total_instances must be >= num_classes so every class occurs")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")
        if self.cluster_spread <= 0 or self.inter_class_separation <= 0:
            raise ValueError("cluster_spread and inter_class_separation must be positive")
        if self.feature_dim < 1 or self.latent_dim < 1 or self.val_per_class < 1:
            raise ValueError("dimensions and val_per_class must be positive")
        if self.feature_noise < 0 or self.background_scale <= 0:
            raise ValueError("feature_noise must be >= 0 and background_scale > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Instance:
    class_label: int
    gt_box: Box
    latent: np.ndarray
    split: str


@dataclass
class World:
    spec: WorldSpec
    prototypes: np.ndarray
    projection: np.ndarray
    train_labels: np.ndarray
    train_boxes: np.ndarray
    train_latents: np.ndarray
    val_labels: np.ndarray
    val_boxes: np.ndarray
    val_latents: np.ndarray
    _val_features: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def background_label(self) -> int:
        return self.spec.num_classes

    @property
    def train_counts(self) -> np.ndarray:
        return np.bincount(self.train_labels, minlength=self.num_classes)

    def group_thresholds(self) -> tuple[int, int]:
        return group_thresholds(self.spec)

    def groups(self) -> np.ndarray:
        return assign_groups(self.train_counts, *self.group_thresholds())

    def instance(self, index: int, split: str = "train") -> Instance:
        labels, boxes, latents = self._split(split)
        return Instance(int(labels[index]), Box.from_array(boxes[index]), latents[index].copy(), split)

    def _split(self, split: str):
        if split == "train":
            return self.train_labels, self.train_boxes, self.train_latents
        if split == "val":
            return self.val_labels, self.val_boxes, self.val_latents
        raise ValueError(f"unknown split {split!r}")

    def val_features(self) -> np.ndarray:
        """Val features at the ground-truth boxes, with a fixed noise stream."""
        if self._val_features is None:
            rng = np.random.default_rng([self.spec.seed, 0x7A1])
            self._val_features = extract_features(
                self, self.val_latents, self.val_boxes, self.val_boxes, rng
            )
        return self._val_features

    def prototypes_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.prototypes).tobytes()).hexdigest()

    def projection_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.projection).tobytes()).hexdigest()


def zipf_counts(num_classes: int, exponent: float, total: int) -> np.ndarray:
    """Train count per class rank: proportional to rank**-exponent, rounded, at least 1."""
    ranks = np.arange(1, num_classes + 1, dtype=np.float64)
    weights = ranks**-exponent
    return np.maximum(1, np.rint(total * weights / weights.sum())).astype(np.int64)


def group_thresholds(spec: WorldSpec) -> tuple[int, int]:
    """Largest train count still counted as rare, and as common."""
    rare = max(2, int(math.floor(spec.rare_fraction * spec.total_instances)))
    common = max(10, int(math.floor(spec.common_fraction * spec.total_instances)))
    return rare, max(common, rare + 1)


def assign_groups(counts, rare_max: int, common_max: int) -> np.ndarray:
    counts = np.asarray(counts)
    return np.where(counts <= rare_max, "rare", np.where(counts <= common_max, "common", "frequent"))


def _sphere_prototypes(spec: WorldSpec, rng: np.random.Generator, max_tries: int = 20000) -> np.ndarray:
    min_cos = math.cos(math.radians(spec.min_prototype_angle))
    protos: list[np.ndarray] = []
    tries = 0
    while len(protos) < spec.num_classes:
        tries += 1
        if tries > max_tries:
            raise ValueError(
                f"cannot place {spec.num_classes} prototypes {spec.min_prototype_angle} degrees apart "
                f"in {spec.latent_dim} dimensions"
            )
        v = rng.standard_normal(spec.latent_dim)
        v /= np.linalg.norm(v)
        if protos and np.max(np.stack(protos) @ v) > min_cos:
            continue
        protos.append(v)
    return np.stack(protos) * spec.inter_class_separation


def _random_boxes(rng: np.random.Generator, n: int, image_size: float) -> np.ndarray:
    w = np.exp(rng.uniform(np.log(32.0), np.log(256.0), n))
    h = np.exp(rng.uniform(np.log(32.0), np.log(256.0), n))
    x1 = rng.uniform(0.0, image_size - w)
    y1 = rng.uniform(0.0, image_size - h)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def _draw_instances(spec, prototypes, labels, rng):
    latents = prototypes[labels] + spec.cluster_spread * rng.standard_normal((labels.size, spec.latent_dim))
    boxes = _random_boxes(rng, labels.size, spec.image_size)
    return boxes, latents


def generate_world(spec: WorldSpec) -> World:
    proto_seq, proj_seq, train_seq, val_seq = np.random.SeedSequence(spec.seed).spawn(4)
    prototypes = _sphere_prototypes(spec, np.random.default_rng(proto_seq))
    in_dim = spec.latent_dim + 5
    projection = np.random.default_rng(proj_seq).standard_normal((in_dim, spec.feature_dim))
    projection /= math.sqrt(spec.feature_dim)

    counts = zipf_counts(spec.num_classes, spec.zipf_exponent, spec.total_instances)
    train_rng = np.random.default_rng(train_seq)
    train_labels = train_rng.permutation(np.repeat(np.arange(spec.num_classes), counts))
    train_boxes, train_latents = _draw_instances(spec, prototypes, train_labels, train_rng)

    val_rng = np.random.default_rng(val_seq)
    val_labels = np.repeat(np.arange(spec.num_classes), spec.val_per_class)
    val_boxes, val_latents = _draw_instances(spec, prototypes, val_labels, val_rng)
    return World(
        spec, prototypes, projection,
        train_labels, train_boxes, train_latents,
        val_labels, val_boxes, val_latents,
    )


def _project(world: World, latents, targets, ious, rng) -> np.ndarray:
    g = world.spec.geometry_scale
    u = np.concatenate([latents, g * targets, g * ious[:, None]], axis=1)
    feats = u @ world.projection
    if rng is not None and world.spec.feature_noise > 0:
        feats = feats + world.spec.feature_noise * rng.standard_normal(feats.shape)
    return feats


def extract_features(world: World, latents, proposals, gt_boxes, rng=None) -> np.ndarray:
    """Batched feature extraction; ``rng=None`` switches observation noise off."""
    latents = np.asarray(latents, dtype=np.float64).reshape(-1, world.spec.latent_dim)
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    ious = iou_array(proposals, gt_boxes)
    if np.any(ious <= 0):
        raise ValueError("proposal does not overlap its ground-truth box")
    return _project(world, latents, encode_array(proposals, gt_boxes), ious, rng)


def extract_feature(instance: Instance, box: Box, world: World, rng=None) -> np.ndarray:
    return extract_features(world, instance.latent, box.as_array(), instance.gt_box.as_array(), rng)[0]


def background_latents(world: World, n: int, rng: np.random.Generator) -> np.ndarray:
    """Off-prototype latent codes, each farther than the exclusion radius from every prototype."""
    spec = world.spec
    radius = spec.background_exclusion * spec.cluster_spread
    out = np.empty((0, spec.latent_dim))
    for _ in range(1000):
        need = n - out.shape[0]
        if need <= 0:
            break
        cand = spec.background_scale * rng.standard_normal((2 * need + 8, spec.latent_dim))
        d2 = ((cand[:, None, :] - world.prototypes[None, :, :]) ** 2).sum(axis=2)
        out = np.vstack([out, cand[d2.min(axis=1) > radius**2][:need]])
    if out.shape[0] < n:
        raise RuntimeError("background exclusion radius leaves no room for background samples")
    return out


def background_features(world: World, n: int, rng: np.random.Generator, noise: bool = True):
    """``n`` background features and their (background) labels."""
    latents = background_latents(world, n, rng)
    targets = rng.uniform(-1.0, 1.0, size=(n, 4))
    ious = rng.uniform(0.0, 0.5, size=n)
    feats = _project(world, latents, targets, ious, rng if noise else None)
    return feats, np.full(n, world.background_label, dtype=np.int64)


def background_sample(world: World, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    feats, labels = background_features(world, 1, rng)
    return feats[0], int(labels[0])


# --- dataset files -------------------------------------------------------------------------


def world_summary(world: World) -> dict:
    counts = world.train_counts
    groups = world.groups()
    rare, common = world.group_thresholds()
    return {
        "classes_per_group": {g: int(np.sum(groups == g)) for g in GROUPS},
        "instances_per_group": {g: int(counts[groups == g].sum()) for g in GROUPS},
        "rare_max_count": rare,
        "common_max_count": common,
        "train_instances": int(counts.sum()),
        "val_instances": int(world.val_labels.size),
    }


def save_world(world: World, csv_path, sidecar_path, provenance: dict | None = None) -> None:
    provenance = provenance or {}
    L = world.spec.latent_dim
    with open(csv_path, "w", newline="") as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(provenance.items())) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "index", "class", "x1", "y1", "x2", "y2"] + [f"z{i}" for i in range(L)])
        for split in ("train", "val"):
            labels, boxes, latents = world._split(split)
            for i in range(labels.size):
                w.writerow(
                    [split, i, int(labels[i])]
                    + [repr(float(v)) for v in boxes[i]]
                    + [repr(float(v)) for v in latents[i]]
                )
    sidecar = {
        "schema": "loce.dataset/1",
        "spec": world.spec.to_dict(),
        "prototypes_sha256": world.prototypes_digest(),
        "projection_sha256": world.projection_digest(),
        "train_counts": [int(c) for c in world.train_counts],
        "groups": [str(g) for g in world.groups()],
        "summary": world_summary(world),
        "provenance": provenance,
    }
    Path(sidecar_path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_world(csv_path, sidecar_path) -> World:
    """Rebuild a world from its CSV and sidecar; frozen parts are regenerated and checked."""
    sidecar = json.loads(Path(sidecar_path).read_text())
    spec = WorldSpec.from_dict(sidecar["spec"])
    world = generate_world(spec)
    if world.prototypes_digest() != sidecar["prototypes_sha256"]:
        raise ValueError("prototype digest mismatch: sidecar was produced by a different generator")
    if world.projection_digest() != sidecar["projection_sha256"]:
        raise ValueError("projection digest mismatch: sidecar was produced by a different generator")
    rows: dict[str, list] = {"train": [], "val": []}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        next(reader)
        for row in reader:
            rows[row[0]].append(row)
    for split in ("train", "val"):
        data = rows[split]
        data.sort(key=lambda r: int(r[1]))
        labels = np.array([int(r[2]) for r in data], dtype=np.int64)
        nums = np.array([[float(v) for v in r[3:]] for r in data]).reshape(len(data), 4 + spec.latent_dim)
        setattr(world, f"{split}_labels", labels)
        setattr(world, f"{split}_boxes", nums[:, :4])
        setattr(world, f"{split}_latents", nums[:, 4:])
    world._val_features = None
    return world
