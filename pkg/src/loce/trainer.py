"""Decoupled two-stage training on a synthetic world.

Stage 1 trains backbone, classifier and box head with plain cross-entropy on
instance-proportional batches. Stage 2 freezes the backbone and fine-tunes the
heads, optionally with the equilibrium loss and memory-augmented feature
sampling, both steered by the running mean-score tracker.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .boxes import encode_array, generate_proposals
from .losses import equilibrium_loss_batch, smooth_l1, softmax, softmax_ce_batch
from .memory import FeatureMemory, SamplerConfig
from .scores import MeanScoreVector, frequency_indicator, new_tracker
from .world import GROUPS, World, background_features, extract_features

log = logging.getLogger(__name__)

BACKBONE = ("W1", "b1", "W2", "b2")
HEADS = ("Wc", "bc", "Wb", "bb")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 12
    stage2_epochs: int = 6
    batch_size: int = 128
    stage1_lr: float = 0.1
    stage2_lr: float = 0.02
    lr_decay_factor: float = 0.1
    stage1_decay_at: tuple[float, ...] = (2 / 3, 11 / 12)
    stage2_decay_at: tuple[float, ...] = (1 / 2, 5 / 6)
    momentum: float = 0.9
    weight_decay: float = 0.0
    neg_pos_ratio: float = 3.0
    k: int = 8
    m: int = 4
    memory_size: int = 80
    classes_with_replacement: bool = True
    alpha: float = 0.9
    background_substitute: float = 0.01
    score_init: float | None = None
    seed: int = 0
    ebl_enabled: bool = True
    mfs_enabled: bool = True
    indicator: str = "score"
    memory_updates_tracker: bool = True
    warm_start_tracker: bool = False
    reinit_classifier: bool = False
    box_loss_weight: float = 1.0
    proposal_min_iou: float | None = None
    hidden_dim: int = 64
    embed_dim: int = 32
    reduction: str = "mean"

    def __post_init__(self) -> None:
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1 or self.stage1_lr <= 0 or self.stage2_lr <= 0:
            raise ValueError("batch_size and learning rates must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ValueError("lr_decay_factor must lie in (0, 1)")
        if self.neg_pos_ratio < 0:
            raise ValueError("neg_pos_ratio must be >= 0")
        if self.indicator not in ("score", "prior"):
            raise ValueError(f"indicator must be 'score' or 'prior', got {self.indicator!r}")
        SamplerConfig(self.k, self.m)
        object.__setattr__(self, "stage1_decay_at", tuple(self.stage1_decay_at))
        object.__setattr__(self, "stage2_decay_at", tuple(self.stage2_decay_at))

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.k, self.m, self.classes_with_replacement)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage1_decay_at"] = list(self.stage1_decay_at)
        d["stage2_decay_at"] = list(self.stage2_decay_at)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


# Ablation rows: (ebl_enabled, mfs_enabled, indicator)
VARIANTS = {
    "ce": (False, False, "score"),
    "ebl": (True, False, "score"),
    "mfs": (False, True, "score"),
    "loce": (True, True, "score"),
    "loce-prior": (True, True, "prior"),
}


def variant_config(config: TrainConfig, name: str) -> TrainConfig:
    ebl, mfs, indicator = VARIANTS[name]
    return replace(config, ebl_enabled=ebl, mfs_enabled=mfs, indicator=indicator)


def variant_name(config: TrainConfig) -> str:
    for name, flags in VARIANTS.items():
        if flags == (config.ebl_enabled, config.mfs_enabled, config.indicator):
            return name
    return f"ebl{int(config.ebl_enabled)}-mfs{int(config.mfs_enabled)}-{config.indicator}"


def lr_at(base: float, epoch: int, total: int, decay_at, factor: float) -> float:
    """Step schedule: multiply by ``factor`` at each fraction of the stage."""
    drops = sum(1 for frac in decay_at if epoch >= int(round(frac * total)))
    return base * factor**drops


# --- model ---------------------------------------------------------------------------------


class Model:
    """Two-layer ReLU backbone with a (C+1)-way classifier and a 4-d box head."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    @classmethod
    def init(cls, in_dim: int, hidden: int, embed: int, num_outputs: int, rng: np.random.Generator) -> "Model":
        def he(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)

        p = {
            "W1": he(in_dim, hidden), "b1": np.zeros(hidden),
            "W2": he(hidden, embed), "b2": np.zeros(embed),
            "Wc": rng.standard_normal((embed, num_outputs)) * math.sqrt(1.0 / embed),
            "bc": np.zeros(num_outputs),
            "Wb": rng.standard_normal((embed, 4)) * 0.01, "bb": np.zeros(4),
        }
        return cls(p)

    @property
    def num_outputs(self) -> int:
        return self.params["Wc"].shape[1]

    def copy(self) -> "Model":
        return Model({k: v.copy() for k, v in self.params.items()})

    def embed(self, x: np.ndarray) -> np.ndarray:
        p = self.params
        h = np.maximum(x @ p["W1"] + p["b1"], 0.0)
        return np.maximum(h @ p["W2"] + p["b2"], 0.0)

    def heads(self, f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        return f @ p["Wc"] + p["bc"], f @ p["Wb"] + p["bb"]

    def forward(self, x: np.ndarray):
        p = self.params
        a1 = x @ p["W1"] + p["b1"]
        h = np.maximum(a1, 0.0)
        a2 = h @ p["W2"] + p["b2"]
        f = np.maximum(a2, 0.0)
        logits, box = self.heads(f)
        return logits, box, (x, a1, h, a2, f)

    def head_grads(self, f, dlogits, dbox, rows_box) -> dict[str, np.ndarray]:
        fb = f[rows_box]
        return {
            "Wc": f.T @ dlogits, "bc": dlogits.sum(axis=0),
            "Wb": fb.T @ dbox, "bb": dbox.sum(axis=0),
        }

    def backward(self, cache, dlogits, dbox, rows_box) -> dict[str, np.ndarray]:
        p = self.params
        x, a1, h, a2, f = cache
        g = self.head_grads(f, dlogits, dbox, rows_box)
        df = dlogits @ p["Wc"].T
        df[rows_box] += dbox @ p["Wb"].T
        da2 = df * (a2 > 0)
        g["W2"] = h.T @ da2
        g["b2"] = da2.sum(axis=0)
        da1 = (da2 @ p["W2"].T) * (a1 > 0)
        g["W1"] = x.T @ da1
        g["b1"] = da1.sum(axis=0)
        return g

    def checksum(self, names=BACKBONE) -> str:
        h = hashlib.sha256()
        for n in names:
            h.update(np.ascontiguousarray(self.params[n]).tobytes())
        return h.hexdigest()


class SGD:
    def __init__(self, params: dict[str, np.ndarray], names, momentum: float, weight_decay: float):
        self.params = params
        self.names = tuple(names)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(params[n]) for n in self.names}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for n in self.names:
            g = grads[n]
            if self.weight_decay:
                g = g + self.weight_decay * self.params[n]
            v = self.velocity[n]
            v *= self.momentum
            v += g
            self.params[n] -= lr * v


# checkpoint: b"LOCECKPT", u32 version, u32 len + utf8 provenance, u32 n_arrays,
# then per array: u32 name len, name, u32 ndim, u64 dims..., row-major little-endian float64
_MAGIC = b"LOCECKPT"


def save_checkpoint(model: Model, path, provenance: str = "") -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", 1))
        prov = provenance.encode()
        fh.write(struct.pack("<I", len(prov)) + prov)
        fh.write(struct.pack("<I", len(model.params)))
        for name in BACKBONE + HEADS:
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> tuple[Model, str]:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8
    (version,) = struct.unpack_from("<I", data, pos)
    if version != 1:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 4
    (plen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    provenance = data[pos:pos + plen].decode()
    pos += plen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return Model(params), provenance


# --- evaluation ----------------------------------------------------------------------------


@dataclass
class MetricsReport:
    classes: np.ndarray
    train_counts: np.ndarray
    groups: np.ndarray
    mean_scores: np.ndarray
    accuracies: np.ndarray
    group_accuracy: dict[str, float]
    group_mean_score: dict[str, float]
    overall_accuracy: float
    balanced_accuracy: float
    score_dispersion: float
    spearman: float | None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        per_class = [
            {
                "class": int(c), "train_count": int(n), "group": str(g),
                "mean_score": float(s), "accuracy": float(a),
            }
            for c, n, g, s, a in zip(self.classes, self.train_counts, self.groups, self.mean_scores, self.accuracies)
        ]
        return {
            "schema": "loce.report/1",
            "provenance": dict(self.provenance),
            "scalars": {
                "overall_accuracy": float(self.overall_accuracy),
                "balanced_accuracy": float(self.balanced_accuracy),
                "score_dispersion": float(self.score_dispersion),
                "spearman_score_accuracy": None if self.spearman is None else float(self.spearman),
            },
            "per_group": [
                {"group": g, "accuracy": self.group_accuracy[g], "mean_score": self.group_mean_score[g]}
                for g in GROUPS if g in self.group_accuracy
            ],
            "per_class": per_class,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def metrics_from_logits(logits, labels, train_counts, groups, provenance=None,
                        include_background: bool = False) -> MetricsReport:
    """Per-class and per-group metrics from val logits over C+1 outputs.

    A val instance counts as correct when its top foreground logit is the true
    class (``include_background`` adds the background output to the argmax).
    The score is the full (C+1)-way softmax probability of the true class, the
    same quantity the tracker follows during training.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    groups = np.asarray(groups)
    C = len(train_counts)
    probs = softmax(logits)
    pred = logits if include_background else logits[:, :C]
    hit = pred.argmax(axis=1) == labels
    true_p = probs[np.arange(labels.size), labels]
    classes = np.arange(C)
    acc = np.array([hit[labels == c].mean() for c in classes])
    score = np.array([true_p[labels == c].mean() for c in classes])
    group_acc = {g: float(acc[groups == g].mean()) for g in GROUPS if np.any(groups == g)}
    group_score = {g: float(score[groups == g].mean()) for g in GROUPS if np.any(groups == g)}
    rho = None
    if np.ptp(score) > 0 and np.ptp(acc) > 0:
        rho = float(spearmanr(score, acc).statistic)
    return MetricsReport(
        classes, np.asarray(train_counts), groups, score, acc, group_acc, group_score,
        overall_accuracy=float(hit.mean()),
        balanced_accuracy=float(acc.mean()),
        score_dispersion=float(score.std()),
        spearman=rho,
        provenance=dict(provenance or {}),
    )


def evaluate(world: World, model: Model, provenance=None) -> MetricsReport:
    logits, _, _ = model.forward(world.val_features())
    return metrics_from_logits(logits, world.val_labels, world.train_counts, world.groups(), provenance)


# --- training ------------------------------------------------------------------------------


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)
    per_class: list[dict] = field(default_factory=list)

    def record(self, stage: int, epoch: int, lr: float, cls_loss: float, box_loss: float,
               report: MetricsReport, tracker: MeanScoreVector | None) -> None:
        row = {
            "stage": stage, "epoch": epoch, "lr": lr,
            "cls_loss": cls_loss, "box_loss": box_loss,
            "balanced_accuracy": report.balanced_accuracy,
            "score_dispersion": report.score_dispersion,
        }
        for g in GROUPS:
            row[f"{g}_accuracy"] = report.group_accuracy.get(g, float("nan"))
            row[f"{g}_score"] = report.group_mean_score.get(g, float("nan"))
        self.rows.append(row)
        for c in range(report.classes.size):
            self.per_class.append({
                "stage": stage, "epoch": epoch, "class": c,
                "val_score": float(report.mean_scores[c]),
                "val_accuracy": float(report.accuracies[c]),
                "tracked_score": float(tracker.scores[c]) if tracker is not None else float("nan"),
            })


@dataclass
class StageResult:
    model: Model
    history: History
    tracker: MeanScoreVector | None = None
    memory: FeatureMemory | None = None


def _stream(config: TrainConfig, stage: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, stage, purpose])


def assemble_batch(world: World, idx: np.ndarray, neg_pos_ratio: float, rng: np.random.Generator,
                   min_iou: float | None = None):
    """Proposal features for the positives in ``idx`` plus background features.

    Returns ``(features, labels, box_targets, n_pos)``; the positives come first.
    """
    gt = world.train_boxes[idx]
    proposals = generate_proposals(gt, rng, min_iou)
    feats = extract_features(world, world.train_latents[idx], proposals, gt, rng)
    targets = encode_array(proposals, gt)
    n_bg = int(round(neg_pos_ratio * idx.size))
    bg, bg_labels = background_features(world, n_bg, rng)
    x = np.vstack([feats, bg])
    y = np.concatenate([world.train_labels[idx], bg_labels])
    return x, y, targets, idx.size


def _check_finite(value, stage: int, epoch: int, it: int) -> None:
    if not np.all(np.isfinite(value)):
        raise TrainingDiverged(f"non-finite values in stage {stage}, epoch {epoch}, iteration {it}")


def _true_class_probs(logits, labels) -> np.ndarray:
    return softmax(logits)[np.arange(labels.size), labels]


def initial_model(world: World, config: TrainConfig) -> Model:
    return Model.init(
        world.spec.feature_dim, config.hidden_dim, config.embed_dim,
        world.num_classes + 1, _stream(config, 0, 0),
    )


def run_stage1(world: World, model: Model, config: TrainConfig) -> StageResult:
    """Cross-entropy training of every parameter on instance-proportional batches."""
    model = model.copy()
    history = History()
    tracker = new_tracker(world.num_classes, config.alpha, config.background_substitute, config.score_init)
    opt = SGD(model.params, BACKBONE + HEADS, config.momentum, config.weight_decay)
    order_rng, batch_rng = _stream(config, 1, 1), _stream(config, 1, 2)
    n = world.train_labels.size
    for epoch in range(config.stage1_epochs):
        lr = lr_at(config.stage1_lr, epoch, config.stage1_epochs, config.stage1_decay_at, config.lr_decay_factor)
        perm = order_rng.permutation(n)
        cls_total = box_total = 0.0
        iters = 0
        for it, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            x, y, targets, n_pos = assemble_batch(world, idx, config.neg_pos_ratio, batch_rng, config.proposal_min_iou)
            logits, box, cache = model.forward(x)
            _check_finite(logits, 1, epoch, it)
            cls = softmax_ce_batch(logits, y, config.reduction)
            reg = smooth_l1(box[:n_pos], targets, reduction=config.reduction)
            _check_finite(cls.loss + reg.loss, 1, epoch, it)
            dbox = config.box_loss_weight * reg.gradient
            grads = model.backward(cache, cls.gradient, dbox, slice(0, n_pos))
            opt.step(grads, lr)
            tracker.update_many(y[:n_pos], _true_class_probs(logits[:n_pos], y[:n_pos]))
            cls_total += cls.loss
            box_total += reg.loss
            iters += 1
        history.record(1, epoch, lr, cls_total / iters, box_total / iters, evaluate(world, model), tracker)
        log.info("stage1 epoch %d lr %.4g loss %.4f", epoch, lr, cls_total / iters)
    return StageResult(model, history, tracker)


def _reinit_classifier(model: Model, config: TrainConfig) -> None:
    rng = _stream(config, 2, 9)
    embed, outputs = model.params["Wc"].shape
    model.params["Wc"] = rng.standard_normal((embed, outputs)) * math.sqrt(1.0 / embed)
    model.params["bc"] = np.zeros(outputs)


def stage2_indicator(world: World, config: TrainConfig, warm: MeanScoreVector | None = None) -> MeanScoreVector:
    if config.indicator == "prior":
        return frequency_indicator(world.train_counts, config.background_substitute)
    if config.warm_start_tracker and warm is not None:
        return MeanScoreVector(warm.scores.copy(), config.alpha, config.background_substitute)
    return new_tracker(world.num_classes, config.alpha, config.background_substitute, config.score_init)


def run_stage2(world: World, model: Model, tracker: MeanScoreVector, memory: FeatureMemory | None,
               config: TrainConfig) -> StageResult:
    """Head-only fine-tuning with the frozen backbone.

    Per iteration: jittered proposals plus background, frozen features, enqueue
    positives, draw memory features by inverse score, loss over batch and
    memory draws, head update, tracker update from positive probabilities.
    """
    model = model.copy()
    tracker = tracker.copy()
    if config.reinit_classifier:
        _reinit_classifier(model, config)
    if config.mfs_enabled and memory is None:
        memory = FeatureMemory(world.num_classes, config.embed_dim, config.memory_size)
    history = History()
    opt = SGD(model.params, HEADS, config.momentum, config.weight_decay)
    order_rng, batch_rng, sample_rng = _stream(config, 2, 1), _stream(config, 2, 2), _stream(config, 2, 3)
    sampler = config.sampler
    n = world.train_labels.size
    backbone_before = model.checksum()
    for epoch in range(config.stage2_epochs):
        lr = lr_at(config.stage2_lr, epoch, config.stage2_epochs, config.stage2_decay_at, config.lr_decay_factor)
        perm = order_rng.permutation(n)
        cls_total = box_total = 0.0
        iters = 0
        for it, start in enumerate(range(0, n, config.batch_size)):
            idx = perm[start:start + config.batch_size]
            x, y, targets, n_pos = assemble_batch(world, idx, config.neg_pos_ratio, batch_rng, config.proposal_min_iou)
            f = model.embed(x)
            n_mem = 0
            if config.mfs_enabled:
                memory.enqueue_batch(f[:n_pos], targets, y[:n_pos])
                drawn = memory.sample(tracker, sampler, sample_rng)
                n_mem = len(drawn)
                if n_mem:
                    f_pos = np.vstack([f[:n_pos]] + [e.feature[None, :] for e in drawn])
                    f = np.vstack([f_pos, f[n_pos:]])
                    y = np.concatenate([y[:n_pos], [e.source_class for e in drawn], y[n_pos:]])
                    targets = np.vstack([targets] + [e.target[None, :] for e in drawn])
            n_fg = n_pos + n_mem
            logits, box = model.heads(f)
            _check_finite(logits, 2, epoch, it)
            if config.ebl_enabled:
                cls = equilibrium_loss_batch(logits, y, tracker, config.reduction)
            else:
                cls = softmax_ce_batch(logits, y, config.reduction)
            reg = smooth_l1(box[:n_fg], targets, reduction=config.reduction)
            _check_finite(cls.loss + reg.loss, 2, epoch, it)
            grads = model.head_grads(f, cls.gradient, config.box_loss_weight * reg.gradient, slice(0, n_fg))
            opt.step(grads, lr)
            n_track = n_fg if config.memory_updates_tracker else n_pos
            tracker.update_many(y[:n_track], _true_class_probs(logits[:n_track], y[:n_track]))
            cls_total += cls.loss
            box_total += reg.loss
            iters += 1
        history.record(2, epoch, lr, cls_total / iters, box_total / iters, evaluate(world, model), tracker)
        log.info("stage2 epoch %d lr %.4g loss %.4f", epoch, lr, cls_total / iters)
    if model.checksum() != backbone_before:
        raise AssertionError("backbone parameters changed during stage 2")
    return StageResult(model, history, tracker, memory)


def config_digest(world_spec, config: TrainConfig) -> str:
    payload = {"world": world_spec.to_dict(), "train": config.to_dict()}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class PipelineResult:
    stage1: StageResult
    stage2: StageResult
    report: MetricsReport


def run_pipeline(world: World, config: TrainConfig, stage1: StageResult | None = None) -> PipelineResult:
    """Both stages and the final evaluation. A finished ``stage1`` can be reused across variants."""
    if stage1 is None:
        stage1 = run_stage1(world, initial_model(world, config), config)
    tracker = stage2_indicator(world, config, stage1.tracker)
    stage2 = run_stage2(world, stage1.model, tracker, None, config)
    provenance = {
        "config_digest": config_digest(world.spec, config),
        "seed": config.seed,
        "world_seed": world.spec.seed,
        "variant": variant_name(config),
    }
    return PipelineResult(stage1, stage2, evaluate(world, stage2.model, provenance))
