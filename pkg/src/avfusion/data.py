"""Synthetic audiovisual datasets, augmentation, mixup, and class-cap
balancing, plus the on-disk dataset layout.

The synthetic task renders a visual symbol v (a bright block at grid cell v)
and an audio symbol a (a pure tone whose frequency indexes a). In pair-sum
mode the label is (v + a) mod K, so no single modality can beat chance 1/K;
visual-only and audio-only modes label by v or a alone.

Disk layout (version 1), one directory per dataset:

    manifest.tsv        header lines ("key=value"), a blank line, then one
                        row per clip: id, duration_s, frame_rate,
                        sample_rate, labels
    <id>.frames.f64     raw little-endian float64 frames, (F, H, W, C)
                        row-major
    <id>.audio.i16      raw little-endian 16-bit PCM mono audio

Label encoding in the manifest: single "3"; multilabel "0,5,7" (set bits);
verb-noun "2;5".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tokenizer import Clip, Spectrogram

DATASET_FORMAT = "avf-dataset"
DATASET_VERSION = 1

LABEL_KINDS = ("single", "multilabel", "verbnoun")


@dataclass
class Dataset:
    clips: list[Clip]
    label_kind: str               # single | multilabel | verbnoun
    num_classes: int              # classes (single) or labels (multilabel)
    split: str = "train"
    verb_classes: int = 0
    noun_classes: int = 0

    def __post_init__(self) -> None:
        if self.label_kind not in LABEL_KINDS:
            raise ValueError(f"unknown label kind {self.label_kind!r}")

    def __len__(self) -> int:
        return len(self.clips)


# ---------------------------------------------------------------------------
# Synthetic generation.

def gen_synthetic_av(
    num_classes: int,
    n: int,
    mode: str,
    rng: np.random.Generator,
    grid: int = 32,
    channels: int = 1,
    frame_rate: float = 5.0,
    duration: float = 0.6,
    sample_rate: int = 4000,
    noise: float = 0.05,
    tone_amp: float = 0.3,
    split: str = "train",
) -> Dataset:
    """Audiovisual symbol clips with labels solvable per ``mode``."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if mode not in ("pair-sum", "visual-only", "audio-only"):
        raise ValueError(f"unknown synthetic mode {mode!r}")

    cells = int(np.ceil(np.sqrt(num_classes)))
    cell = grid // cells
    block = max(1, int(round(0.7 * cell)))
    # Stagger each cell's block against the patch lattice: the offsets break
    # the translation symmetry of aligned cells, so patch contents (not only
    # patch positions) identify the cell.
    slack_px = cell - block
    offs = [(slack_px // 2 + 3 * k) % (slack_px + 1) for k in range(cells)]
    n_frames = int(round(duration * frame_rate))
    n_samples = int(round(duration * sample_rate))
    t = np.arange(n_samples) / sample_rate
    nyquist = sample_rate / 2.0
    freqs = nyquist * (np.arange(num_classes) + 1.0) / (num_classes + 2.0)

    clips = []
    for i in range(n):
        v = int(rng.integers(0, num_classes))
        a = int(rng.integers(0, num_classes))
        frames = rng.normal(0.2, noise, size=(n_frames, grid, grid, channels))
        r, c = divmod(v, cells)
        r0 = r * cell + offs[r]
        c0 = c * cell + offs[c]
        frames[:, r0 : r0 + block, c0 : c0 + block, :] += 0.6
        np.clip(frames, 0.0, 1.0, out=frames)

        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave = tone_amp * np.sin(2.0 * np.pi * freqs[a] * t + phase)
        wave += rng.normal(0.0, noise * 0.2, size=n_samples)
        np.clip(wave, -1.0, 1.0, out=wave)

        if mode == "pair-sum":
            label = (v + a) % num_classes
        elif mode == "visual-only":
            label = v
        else:
            label = a
        clips.append(Clip(
            frames=frames, waveform=wave, sample_rate=sample_rate,
            frame_rate=frame_rate, labels=label, clip_id=f"{split}{i:06d}",
        ))
    return Dataset(clips=clips, label_kind="single", num_classes=num_classes, split=split)


# ---------------------------------------------------------------------------
# Augmentation.

def spec_augment(
    spec: Spectrogram,
    max_time_mask: int,
    max_freq_mask: int,
    rng: np.random.Generator,
) -> Spectrogram:
    """One time mask and one frequency mask, filled with the grid mean.

    Mask extents are drawn uniformly from {0, ..., max}; a zero maximum
    disables that mask.
    """
    n_mels, n_frames = spec.mels.shape
    if max_time_mask > n_frames or max_freq_mask > n_mels:
        raise ValueError("mask maxima exceed spectrogram extents")
    out = spec.mels.copy()
    fill = out.mean()
    if max_time_mask > 0:
        w = int(rng.integers(0, max_time_mask + 1))
        if w > 0:
            t0 = int(rng.integers(0, n_frames - w + 1))
            out[:, t0 : t0 + w] = fill
    if max_freq_mask > 0:
        h = int(rng.integers(0, max_freq_mask + 1))
        if h > 0:
            f0 = int(rng.integers(0, n_mels - h + 1))
            out[f0 : f0 + h, :] = fill
    return Spectrogram(mels=out, n_mels=spec.n_mels, hop_s=spec.hop_s, window_s=spec.window_s)


def _bilinear_resize(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of one (H, W, C) frame."""
    h, w, _ = frame.shape
    if (h, w) == (out_h, out_w):
        return frame.copy()
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = frame[y0][:, x0] * (1 - wx) + frame[y0][:, x1] * wx
    bottom = frame[y1][:, x0] * (1 - wx) + frame[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def visual_augment(frames: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random resized crop (scale U(0.7, 1.0)) and horizontal flip (p=0.5),
    the same window and flip decision for every frame of the clip."""
    frames = np.asarray(frames, dtype=np.float64)
    f, h, w, c = frames.shape
    s = rng.uniform(0.7, 1.0)
    ch = max(1, int(round(s * h)))
    cw = max(1, int(round(s * w)))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.uniform() < 0.5)
    out = np.empty_like(frames)
    for i in range(f):
        crop = frames[i, top : top + ch, left : left + cw, :]
        out[i] = _bilinear_resize(crop, h, w)
    if flip:
        out = out[:, :, ::-1, :].copy()
    return out


# ---------------------------------------------------------------------------
# Mixup.

@dataclass
class MixupDraw:
    partner: int
    lam_rgb: float
    lam_spec: float
    lam_label: float


def mixup_draws(
    batch_size: int,
    alpha: float,
    mode: str,
    rng: np.random.Generator,
) -> list[MixupDraw]:
    """Partner assignment (a random permutation) plus Beta(alpha, alpha)
    weights: one shared weight in standard mode, independent per-modality
    weights in modality mode (labels then use their mean)."""
    if batch_size < 2:
        raise ValueError("mixup needs a batch of at least 2")
    if mode not in ("standard", "modality"):
        raise ValueError(f"unknown mixup mode {mode!r}")
    partners = rng.permutation(batch_size)
    draws = []
    for i in range(batch_size):
        if mode == "standard":
            lam = float(rng.beta(alpha, alpha))
            draws.append(MixupDraw(int(partners[i]), lam, lam, lam))
        else:
            lr = float(rng.beta(alpha, alpha))
            ls = float(rng.beta(alpha, alpha))
            draws.append(MixupDraw(int(partners[i]), lr, ls, (lr + ls) / 2.0))
    return draws


def apply_mixup(
    rgb: np.ndarray,
    spec: np.ndarray,
    labels: np.ndarray,
    draws: list[MixupDraw],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Convexly combine each sample with its partner.

    ``rgb``/``spec`` are per-modality input arrays (batch leading); labels
    are soft rows (batch, classes).
    """
    out_rgb = np.empty_like(rgb)
    out_spec = np.empty_like(spec)
    out_labels = np.empty_like(labels)
    for i, d in enumerate(draws):
        out_rgb[i] = d.lam_rgb * rgb[i] + (1.0 - d.lam_rgb) * rgb[d.partner]
        out_spec[i] = d.lam_spec * spec[i] + (1.0 - d.lam_spec) * spec[d.partner]
        out_labels[i] = d.lam_label * labels[i] + (1.0 - d.lam_label) * labels[d.partner]
    return out_rgb, out_spec, out_labels


# ---------------------------------------------------------------------------
# Greedy per-class cap (multilabel balancing).

def greedy_class_cap(dataset: Dataset, cap: int) -> Dataset:
    """Admit samples in order; a sample is kept iff every one of its labels
    is still under ``cap`` admitted samples. Deterministic and stable."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if dataset.label_kind != "multilabel":
        raise ValueError("greedy_class_cap expects a multilabel dataset")
    counts = np.zeros(dataset.num_classes, dtype=int)
    kept = []
    for clip in dataset.clips:
        labels = np.flatnonzero(np.asarray(clip.labels))
        if labels.size and np.all(counts[labels] < cap):
            kept.append(clip)
            counts[labels] += 1
    return Dataset(
        clips=kept,
        label_kind=dataset.label_kind,
        num_classes=dataset.num_classes,
        split=dataset.split,
    )


# ---------------------------------------------------------------------------
# Disk layout.

def _encode_labels(kind: str, labels) -> str:
    if kind == "single":
        return str(int(labels))
    if kind == "multilabel":
        return ",".join(str(i) for i in np.flatnonzero(np.asarray(labels)))
    verb, noun = labels
    return f"{int(verb)};{int(noun)}"


def _decode_labels(kind: str, text: str, num_classes: int):
    if kind == "single":
        return int(text)
    if kind == "multilabel":
        bits = np.zeros(num_classes, dtype=np.int64)
        if text:
            bits[[int(x) for x in text.split(",")]] = 1
        return bits
    verb, noun = text.split(";")
    return (int(verb), int(noun))


def save_dataset(dataset: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = dataset.clips[0]
    f, h, w, c = first.frames.shape
    header = [
        f"format={DATASET_FORMAT}",
        f"version={DATASET_VERSION}",
        f"label_kind={dataset.label_kind}",
        f"num_classes={dataset.num_classes}",
        f"verb_classes={dataset.verb_classes}",
        f"noun_classes={dataset.noun_classes}",
        f"split={dataset.split}",
        f"height={h}",
        f"width={w}",
        f"channels={c}",
        "",
    ]
    rows = []
    for clip in dataset.clips:
        cid = clip.clip_id
        if not cid or "\t" in cid or "/" in cid:
            raise ValueError(f"invalid clip id {cid!r}")
        (directory / f"{cid}.frames.f64").write_bytes(
            np.ascontiguousarray(clip.frames, dtype="<f8").tobytes()
        )
        pcm = np.clip(np.round(clip.waveform * 32767.0), -32768, 32767).astype("<i2")
        (directory / f"{cid}.audio.i16").write_bytes(pcm.tobytes())
        rows.append("\t".join([
            cid,
            repr(clip.duration),
            repr(clip.frame_rate),
            str(clip.sample_rate),
            _encode_labels(dataset.label_kind, clip.labels),
        ]))
    (directory / "manifest.tsv").write_text("\n".join(header + rows) + "\n")


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    text = (directory / "manifest.tsv").read_text().splitlines()
    blank = text.index("")
    meta = dict(line.split("=", 1) for line in text[:blank])
    if meta.get("format") != DATASET_FORMAT or int(meta.get("version", -1)) != DATASET_VERSION:
        raise ValueError("unsupported dataset manifest header")
    kind = meta["label_kind"]
    num_classes = int(meta["num_classes"])
    h, w, c = int(meta["height"]), int(meta["width"]), int(meta["channels"])

    clips = []
    for row in text[blank + 1 :]:
        if not row.strip():
            continue
        cid, duration, frame_rate, sample_rate, labels_text = row.split("\t")
        frame_rate = float(frame_rate)
        n_frames = int(round(float(duration) * frame_rate))
        frames = np.frombuffer(
            (directory / f"{cid}.frames.f64").read_bytes(), dtype="<f8"
        ).reshape(n_frames, h, w, c).astype(np.float64)
        pcm = np.frombuffer((directory / f"{cid}.audio.i16").read_bytes(), dtype="<i2")
        wave = pcm.astype(np.float64) / 32767.0
        clips.append(Clip(
            frames=frames, waveform=wave, sample_rate=int(sample_rate),
            frame_rate=frame_rate, labels=_decode_labels(kind, labels_text, num_classes),
            clip_id=cid,
        ))
    return Dataset(
        clips=clips, label_kind=kind, num_classes=num_classes,
        split=meta.get("split", "train"),
        verb_classes=int(meta.get("verb_classes", 0)),
        noun_classes=int(meta.get("noun_classes", 0)),
    )
