"""Losses, SGD with momentum, schedules, inference, metrics, and the
training loop.

The loop is deterministic given the seed: one RNG drives initialization,
shuffling, window sampling, augmentation, and mixup in a fixed order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import ModelConfig, TrainConfig
from .data import Dataset, apply_mixup, mixup_draws, spec_augment, visual_augment
from .engine import (
    GradientMap,
    Tensor,
    backward,
    sigmoid_bce_with_logits,
    softmax_cross_entropy,
)
from .model import ForwardResult, FusionModel, init_params, stochastic_depth
from .tokenizer import (
    Clip,
    extract_window,
    log_mel_spectrogram,
    patch_frames,
    patch_spectrogram,
    sample_windows,
)

__all__ = [
    "bce_loss",
    "ce_loss",
    "one_hot",
    "OptimizerState",
    "sgd_momentum_step",
    "cosine_warmup_lr",
    "stochastic_depth",
    "multicrop_infer",
    "average_precision",
    "MapReport",
    "mean_average_precision",
    "topk_accuracy",
    "TrainResult",
    "train",
    "evaluate",
    "predict_scores",
    "write_metrics_csv",
]


# ---------------------------------------------------------------------------
# Losses.

def one_hot(indices, num_classes: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=int)
    out = np.zeros((idx.size, num_classes))
    out[np.arange(idx.size), idx.reshape(-1)] = 1.0
    return out


def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean multilabel binary cross-entropy; targets in [0, 1]."""
    return sigmoid_bce_with_logits(logits, targets)


def ce_loss(logits, targets) -> Tensor:
    """Cross-entropy with hard indices or soft target rows.

    ``logits`` may be one (batch, classes) tensor, or a [verb, noun] pair of
    tensors with targets as an (indices, indices) pair; the pair form
    returns the sum of both heads' losses.
    """
    if isinstance(logits, (list, tuple)):
        verb_logits, noun_logits = logits
        verb_t, noun_t = targets
        return ce_loss(verb_logits, verb_t) + ce_loss(noun_logits, noun_t)
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.min() < 0 or t.max() >= logits.shape[1]:
            raise ValueError("class index out of range")
        t = one_hot(t, logits.shape[1])
    return softmax_cross_entropy(logits, t)


# ---------------------------------------------------------------------------
# Optimizer and schedule.

@dataclass
class OptimizerState:
    """Per-parameter velocity buffers, keyed by parameter node-id."""

    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "OptimizerState":
        return cls(velocity={p.node_id: np.zeros_like(p.data) for p in params})


def sgd_momentum_step(
    params: list[Tensor],
    grads: GradientMap,
    state: OptimizerState,
    lr: float,
    momentum: float = 0.9,
) -> None:
    """v <- m v + g; p <- p - lr v (in place)."""
    for p in params:
        g = grads.get(p).data
        v = state.velocity[p.node_id]
        v *= momentum
        v += g
        p.data -= lr * v


def cosine_warmup_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp to ``base_lr`` over the warmup, then a cosine decay to 0."""
    if step > total_steps:
        raise ValueError(f"step {step} beyond total {total_steps}")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


# ---------------------------------------------------------------------------
# Tokenization pipeline (clips -> patch arrays).

def _tokenize_window(
    frames: np.ndarray,
    audio: np.ndarray,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig | None,
    rng: np.random.Generator | None,
    training: bool,
) -> tuple[np.ndarray, np.ndarray]:
    tok = model_cfg.tokenizer
    if training and train_cfg is not None and train_cfg.visual_augment:
        frames = visual_augment(frames, rng)
    spec = log_mel_spectrogram(audio, tok.sample_rate, tok.window_s, tok.hop_s, tok.n_mels)
    if training and train_cfg is not None and (train_cfg.max_time_mask or train_cfg.max_freq_mask):
        spec = spec_augment(spec, train_cfg.max_time_mask, train_cfg.max_freq_mask, rng)
    rgb = patch_frames(frames, tok.rgb_patch).patches
    aud = patch_spectrogram(spec, tok.spec_patch).patches
    rgb = (rgb - tok.rgb_mean) * tok.rgb_scale
    aud = (aud - tok.spec_mean) * tok.spec_scale
    return rgb, aud


def clips_to_batch(
    clips: list[Clip],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    training: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample windows and tokenize a batch; returns (rgb, spec) patch arrays."""
    tok = model_cfg.tokenizer
    rgbs, specs = [], []
    for clip in clips:
        win = sample_windows(clip, tok.span_s, tok.frames_per_clip,
                             train_cfg.sampling if training else "sync", rng)
        r, s = _tokenize_window(win.frames, win.audio, model_cfg, train_cfg, rng, training)
        rgbs.append(r)
        specs.append(s)
    return np.stack(rgbs), np.stack(specs)


def _batch_at_offsets(
    clips: list[Clip],
    offsets: np.ndarray,
    model_cfg: ModelConfig,
) -> tuple[np.ndarray, np.ndarray]:
    tok = model_cfg.tokenizer
    rgbs, specs = [], []
    for clip, off in zip(clips, offsets):
        win = extract_window(clip, float(off), float(off), tok.span_s, tok.frames_per_clip)
        r, s = _tokenize_window(win.frames, win.audio, model_cfg, None, None, False)
        rgbs.append(r)
        specs.append(s)
    return np.stack(rgbs), np.stack(specs)


# ---------------------------------------------------------------------------
# Inference.

def multicrop_infer(model: FusionModel, clip: Clip, n_crops: int) -> np.ndarray:
    """Mean pre-softmax logits over ``n_crops`` evenly spaced windows."""
    tok = model.config.tokenizer
    slack = clip.duration - tok.span_s
    if slack < -1e-9:
        raise ValueError(f"clip shorter ({clip.duration:.3f}s) than span {tok.span_s}s")
    offsets = np.linspace(0.0, max(slack, 0.0), n_crops)
    per_crop = []
    for off in offsets:
        rgb, spec = _batch_at_offsets([clip], np.array([off]), model.config)
        res = model.forward_patches(rgb, spec)
        per_crop.append(_stack_head_logits(res)[0])
    return np.mean(per_crop, axis=0)


def _stack_head_logits(res: ForwardResult) -> np.ndarray:
    """(batch, total classes); verb-noun heads are concatenated."""
    return np.concatenate([hl.data for hl in res.head_logits], axis=1)


def predict_scores(
    model: FusionModel,
    dataset: Dataset,
    n_crops: int = 1,
    batch_size: int = 16,
) -> np.ndarray:
    """Per-clip multicrop logits over a dataset, batched across clips."""
    tok = model.config.tokenizer
    n = len(dataset)
    scores = None
    for start in range(0, n, batch_size):
        clips = dataset.clips[start : start + batch_size]
        acc = None
        for j in range(n_crops):
            offsets = np.array([
                np.linspace(0.0, max(c.duration - tok.span_s, 0.0), n_crops)[j]
                for c in clips
            ])
            rgb, spec = _batch_at_offsets(clips, offsets, model.config)
            logits = _stack_head_logits(model.forward_patches(rgb, spec))
            acc = logits if acc is None else acc + logits
        acc = acc / n_crops
        if scores is None:
            scores = np.zeros((n, acc.shape[1]))
        scores[start : start + len(clips)] = acc
    return scores


# ---------------------------------------------------------------------------
# Metrics.

def average_precision(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """AP of one class: mean precision at each positive's rank, ranks by
    descending score with ties broken by stable index order. None when the
    class has no positives."""
    labels = np.asarray(labels)
    if labels.sum() == 0:
        return None
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = labels[order].astype(np.float64)
    cum = np.cumsum(hits)
    ranks = np.arange(1, hits.size + 1)
    precisions = cum[hits > 0] / ranks[hits > 0]
    return float(precisions.mean())


@dataclass
class MapReport:
    value: float
    per_class: dict[int, float]
    excluded: list[int]           # classes with no positives


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> MapReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    per_class: dict[int, float] = {}
    excluded: list[int] = []
    for c in range(scores.shape[1]):
        ap = average_precision(scores[:, c], labels[:, c])
        if ap is None:
            excluded.append(c)
        else:
            per_class[c] = ap
    value = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return MapReport(value=value, per_class=per_class, excluded=excluded)


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose true class is among the k best scores (ties
    broken by stable class-index order)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if k > scores.shape[1]:
        raise ValueError(f"k={k} exceeds {scores.shape[1]} classes")
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return float(np.mean([labels[i] in order[i] for i in range(scores.shape[0])]))


# ---------------------------------------------------------------------------
# Training loop.

@dataclass
class MetricRow:
    epoch: int
    split: str
    loss: float | None
    top1: float | None
    top5: float | None
    map_value: float | None
    lr: float | None


@dataclass
class TrainResult:
    model: FusionModel
    rows: list[MetricRow]
    final: dict[str, float]


def _hard_labels(dataset: Dataset) -> np.ndarray:
    return np.array([int(c.labels) for c in dataset.clips], dtype=int)


def _soft_targets(clips: list[Clip], dataset: Dataset) -> np.ndarray:
    if dataset.label_kind == "single":
        return one_hot([int(c.labels) for c in clips], dataset.num_classes)
    if dataset.label_kind == "multilabel":
        return np.stack([np.asarray(c.labels, dtype=np.float64) for c in clips])
    raise ValueError("verb-noun training uses index pairs, not soft targets")


def evaluate(model: FusionModel, dataset: Dataset, n_crops: int = 1,
             batch_size: int = 16) -> dict[str, float]:
    scores = predict_scores(model, dataset, n_crops=n_crops, batch_size=batch_size)
    out: dict[str, float] = {}
    if dataset.label_kind == "single":
        labels = _hard_labels(dataset)
        out["top1"] = topk_accuracy(scores, labels, 1)
        if dataset.num_classes >= 5:
            out["top5"] = topk_accuracy(scores, labels, 5)
        rows = one_hot(labels, dataset.num_classes)
        m = scores.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(scores - m).sum(axis=1))
        out["loss"] = float(np.mean(lse - (rows * scores).sum(axis=1)))
    elif dataset.label_kind == "multilabel":
        labels = np.stack([np.asarray(c.labels) for c in dataset.clips])
        out["map"] = mean_average_precision(scores, labels).value
        x = scores
        t = labels.astype(np.float64)
        out["loss"] = float(np.mean(np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))))
    else:
        verbs = np.array([c.labels[0] for c in dataset.clips], dtype=int)
        nouns = np.array([c.labels[1] for c in dataset.clips], dtype=int)
        nv = model.config.verb_classes
        out["verb_top1"] = topk_accuracy(scores[:, :nv], verbs, 1)
        out["noun_top1"] = topk_accuracy(scores[:, nv:], nouns, 1)
        pv = np.argmax(scores[:, :nv], axis=1)
        pn = np.argmax(scores[:, nv:], axis=1)
        out["top1"] = float(np.mean((pv == verbs) & (pn == nouns)))
    return out


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Dataset,
    eval_dataset: Dataset | None = None,
    progress: bool = False,
) -> TrainResult:
    """Full training run; see TrainConfig for the recipe knobs."""
    model_cfg.validate()
    train_cfg.validate()
    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, rng)
    model = FusionModel(model_cfg, params)
    trainable = params.trainable()
    state = OptimizerState.for_params(trainable)

    n = len(dataset)
    bs = train_cfg.batch_size
    steps_per_epoch = max(n // bs, 1)
    total_steps = steps_per_epoch * train_cfg.epochs
    warmup_steps = int(round(train_cfg.warmup_epochs * steps_per_epoch))

    single = dataset.label_kind == "single"
    multilabel = dataset.label_kind == "multilabel"
    rows: list[MetricRow] = []
    step = 0
    lr = 0.0
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        correct = 0
        seen = 0
        for b in range(steps_per_epoch):
            clips = [dataset.clips[i] for i in perm[b * bs : (b + 1) * bs]]
            rgb, spec = clips_to_batch(clips, model_cfg, train_cfg, rng, training=True)
            if dataset.label_kind == "verbnoun":
                targets = (np.array([c.labels[0] for c in clips], dtype=int),
                           np.array([c.labels[1] for c in clips], dtype=int))
            else:
                targets = _soft_targets(clips, dataset)
            if train_cfg.mixup_alpha > 0 and len(clips) >= 2 and not isinstance(targets, tuple):
                draws = mixup_draws(len(clips), train_cfg.mixup_alpha, train_cfg.mixup_mode, rng)
                rgb, spec, targets = apply_mixup(rgb, spec, targets, draws)

            res = model.forward_patches(
                rgb, spec, training=True, drop_rng=rng,
                stochastic_depth_p=train_cfg.stochastic_depth,
            )
            if dataset.label_kind == "verbnoun":
                loss = ce_loss(res.head_logits, targets)
            elif multilabel:
                loss = bce_loss(res.logits, targets)
            else:
                loss = ce_loss(res.logits, targets)

            grads = backward(loss, trainable)
            lr = cosine_warmup_lr(step, total_steps, train_cfg.base_lr, warmup_steps)
            sgd_momentum_step(trainable, grads, state, lr, train_cfg.momentum)
            step += 1

            epoch_loss += float(loss.data)
            if single:
                pred = np.argmax(res.logits.data, axis=1)
                hard = np.array([int(c.labels) for c in clips], dtype=int)
                correct += int(np.sum(pred == hard))
                seen += len(clips)

        train_row = MetricRow(
            epoch=epoch, split="train",
            loss=epoch_loss / steps_per_epoch,
            top1=(correct / seen) if single and seen else None,
            top5=None, map_value=None, lr=lr,
        )
        rows.append(train_row)
        if progress:
            print(f"epoch {epoch}: loss {train_row.loss:.4f}"
                  + (f" top1 {train_row.top1:.3f}" if train_row.top1 is not None else ""))

        last = epoch == train_cfg.epochs - 1
        due = train_cfg.eval_every > 0 and (epoch + 1) % train_cfg.eval_every == 0
        if eval_dataset is not None and (last or due):
            m = evaluate(model, eval_dataset, n_crops=train_cfg.test_crops, batch_size=bs)
            rows.append(MetricRow(
                epoch=epoch, split="eval",
                loss=m.get("loss"), top1=m.get("top1"), top5=m.get("top5"),
                map_value=m.get("map"), lr=None,
            ))
            if progress:
                print(f"epoch {epoch}: eval {m}")

    final = evaluate(model, eval_dataset, n_crops=train_cfg.test_crops, batch_size=bs) \
        if eval_dataset is not None else {}
    return TrainResult(model=model, rows=rows, final=final)


def write_metrics_csv(rows: list[MetricRow], path: str | Path) -> None:
    """CSV columns: epoch, split, loss, top1, top5, map, lr (full precision)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "split", "loss", "top1", "top5", "map", "lr"])
        for r in rows:
            writer.writerow([
                r.epoch, r.split,
                *("" if v is None else repr(float(v))
                  for v in (r.loss, r.top1, r.top5, r.map_value, r.lr)),
            ])
