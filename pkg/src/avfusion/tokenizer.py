"""Raw clips to embedded token sequences.

Pipeline: sample a window from the clip, turn audio into a log-mel
spectrogram, cut frames and spectrogram into non-overlapping patches, then
linearly project patches and prepend a CLS token plus learned positions.

Spectrogram convention (fixed, documented): Hamming window, magnitude STFT,
HTK mel scale with triangular filters spanning 0 Hz to Nyquist, log floor
1e-10. Frames start every hop; the tail is zero-padded so the frame count is
``ceil(n_samples / hop_samples)`` (exactly ``100 * t`` for 10 ms hops when
the duration divides the hop).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, add, concat, expand_batch, matmul, reshape, slice_axis

LOG_FLOOR = 1e-10


class TokenizerError(ValueError):
    pass


@dataclass
class Clip:
    """One audiovisual example: frames in [0,1] plus a mono waveform."""

    frames: np.ndarray            # (F_total, H, W, C), float64 in [0, 1]
    waveform: np.ndarray          # (n_samples,), float64
    sample_rate: int
    frame_rate: float
    labels: object = None         # int | label bit-vector | (verb, noun)
    clip_id: str = ""

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.waveform = np.asarray(self.waveform, dtype=np.float64)
        if self.frames.ndim != 4:
            raise TokenizerError(f"frames must be (F, H, W, C), got {self.frames.shape}")
        if self.sample_rate <= 0:
            raise TokenizerError("sample_rate must be positive")
        video_dur = self.frames.shape[0] / self.frame_rate
        audio_dur = self.waveform.size / self.sample_rate
        if abs(video_dur - audio_dur) > 1.0 / self.frame_rate + 1e-9:
            raise TokenizerError(
                f"video ({video_dur:.3f}s) and audio ({audio_dur:.3f}s) durations disagree"
            )

    @property
    def duration(self) -> float:
        return self.frames.shape[0] / self.frame_rate


@dataclass
class Spectrogram:
    mels: np.ndarray              # (n_mels, n_frames) log-mel energies
    n_mels: int
    hop_s: float
    window_s: float

    @property
    def n_frames(self) -> int:
        return self.mels.shape[1]


@dataclass
class PatchSequence:
    patches: np.ndarray           # (N, patch_dim) flattened raster patches
    grid_shape: tuple[int, ...]   # (F, gh, gw) for video, (gm, gt) for audio
    modality: str
    patch_hw: tuple[int, int]
    crop_offset: tuple[int, ...] = ()

    @property
    def count(self) -> int:
        return self.patches.shape[0]


@dataclass
class TokenSequence:
    tokens: Tensor                # (N + 1, d), CLS first
    modality: str


@dataclass
class EmbeddingParams:
    """Per-modality patch projection, CLS token, and positional table."""

    proj: Tensor                  # (patch_dim, d)
    cls: Tensor                   # (d,)
    pos: Tensor                   # (N_max + 1, d)

    def named(self, prefix: str):
        yield f"{prefix}.proj", self.proj
        yield f"{prefix}.cls", self.cls
        yield f"{prefix}.pos", self.pos


@dataclass
class WindowSample:
    frames: np.ndarray            # (F, H, W, C)
    audio: np.ndarray             # (span * rate,)
    visual_offset: float
    audio_offset: float


# ---------------------------------------------------------------------------
# Log-mel spectrogram.

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft_bins: int, sample_rate: int) -> np.ndarray:
    """Triangular filters, (n_mels, n_fft_bins), HTK mel spacing 0..Nyquist."""
    nyquist = sample_rate / 2.0
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    freqs = np.linspace(0.0, nyquist, n_fft_bins)
    fb = np.zeros((n_mels, n_fft_bins))
    for m in range(n_mels):
        left, center, right = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rising = (freqs - left) / (center - left)
        falling = (right - freqs) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def mel_band_edges(n_mels: int, sample_rate: int) -> np.ndarray:
    """(n_mels, 3) of (left, center, right) filter frequencies in Hz."""
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz = mel_to_hz(mel_pts)
    return np.stack([hz[:-2], hz[1:-1], hz[2:]], axis=1)


def log_mel_spectrogram(
    waveform: np.ndarray,
    sample_rate: int,
    window_s: float = 0.025,
    hop_s: float = 0.010,
    n_mels: int = 128,
) -> Spectrogram:
    waveform = np.asarray(waveform, dtype=np.float64)
    win = int(round(window_s * sample_rate))
    hop = int(round(hop_s * sample_rate))
    if waveform.size < win:
        raise TokenizerError(f"waveform of {waveform.size} samples shorter than one {win}-sample window")
    n_bins = win // 2 + 1
    if n_mels > n_bins:
        raise TokenizerError(f"n_mels={n_mels} exceeds {n_bins} FFT bins")

    n_frames = -(-waveform.size // hop)  # ceil; tail zero-padded
    padded = np.zeros((n_frames - 1) * hop + win)
    padded[: waveform.size] = waveform
    starts = np.arange(n_frames) * hop
    frames = padded[starts[:, None] + np.arange(win)[None, :]]
    window = np.hamming(win)
    spectrum = np.abs(np.fft.rfft(frames * window, axis=1))  # magnitude, not power

    fb = mel_filterbank(n_mels, n_bins, sample_rate)
    mels = np.log(fb @ spectrum.T + LOG_FLOOR)
    return Spectrogram(mels=mels, n_mels=n_mels, hop_s=hop_s, window_s=window_s)


# ---------------------------------------------------------------------------
# Patch extraction. Inputs that do not divide evenly are center-cropped to
# the largest divisible region; the crop offset is kept for reassembly.

def _crop_extent(extent: int, patch: int) -> tuple[int, int]:
    if patch > extent:
        raise TokenizerError(f"patch extent {patch} larger than grid extent {extent}")
    kept = (extent // patch) * patch
    return (extent - kept) // 2, kept


def patch_spectrogram(spec: Spectrogram, patch: int) -> PatchSequence:
    m_off, m_kept = _crop_extent(spec.mels.shape[0], patch)
    t_off, t_kept = _crop_extent(spec.mels.shape[1], patch)
    grid = spec.mels[m_off : m_off + m_kept, t_off : t_off + t_kept]
    gm, gt = m_kept // patch, t_kept // patch
    blocks = grid.reshape(gm, patch, gt, patch).transpose(0, 2, 1, 3)
    patches = blocks.reshape(gm * gt, patch * patch)
    return PatchSequence(
        patches=patches,
        grid_shape=(gm, gt),
        modality="spec",
        patch_hw=(patch, patch),
        crop_offset=(m_off, t_off),
    )


def patch_frames(frames: np.ndarray, patch: int) -> PatchSequence:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4:
        raise TokenizerError(f"frames must be (F, H, W, C), got {frames.shape}")
    f, h, w, c = frames.shape
    h_off, h_kept = _crop_extent(h, patch)
    w_off, w_kept = _crop_extent(w, patch)
    region = frames[:, h_off : h_off + h_kept, w_off : w_off + w_kept, :]
    gh, gw = h_kept // patch, w_kept // patch
    blocks = region.reshape(f, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    patches = blocks.reshape(f * gh * gw, patch * patch * c)
    return PatchSequence(
        patches=patches,
        grid_shape=(f, gh, gw),
        modality="rgb",
        patch_hw=(patch, patch),
        crop_offset=(h_off, w_off),
    )


def reassemble_patches(ps: PatchSequence) -> np.ndarray:
    """Invert patching over the cropped region (bit-identical)."""
    p = ps.patch_hw[0]
    if ps.modality == "spec":
        gm, gt = ps.grid_shape
        blocks = ps.patches.reshape(gm, gt, p, p).transpose(0, 2, 1, 3)
        return blocks.reshape(gm * p, gt * p)
    f, gh, gw = ps.grid_shape
    c = ps.patches.shape[1] // (p * p)
    blocks = ps.patches.reshape(f, gh, gw, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return blocks.reshape(f, gh * p, gw * p, c)


# ---------------------------------------------------------------------------
# Token embedding.

def embed_tokens(ps: PatchSequence, params: EmbeddingParams) -> TokenSequence:
    """tokens[0] = cls + pos[0]; tokens[i] = proj @ patch_i + pos[i]."""
    n, patch_dim = ps.patches.shape
    if params.proj.shape[0] != patch_dim:
        raise TokenizerError(
            f"patch dim {patch_dim} does not match projection input {params.proj.shape[0]}"
        )
    if n + 1 > params.pos.shape[0]:
        raise TokenizerError(f"positional table has {params.pos.shape[0]} rows, need {n + 1}")
    d = params.proj.shape[1]
    projected = matmul(Tensor(ps.patches), params.proj)          # (N, d)
    cls_row = reshape(params.cls, (1, d))
    body = concat([cls_row, projected], axis=0)                  # (N+1, d)
    tokens = add(body, slice_axis(params.pos, 0, 0, n + 1))
    return TokenSequence(tokens=tokens, modality=ps.modality)


def embed_patch_batch(patches: Tensor, params: EmbeddingParams) -> Tensor:
    """Batched embedding: (B, N, patch_dim) -> (B, N + 1, d)."""
    b, n, patch_dim = patches.shape
    if params.proj.shape[0] != patch_dim:
        raise TokenizerError(
            f"patch dim {patch_dim} does not match projection input {params.proj.shape[0]}"
        )
    if n + 1 > params.pos.shape[0]:
        raise TokenizerError(f"positional table has {params.pos.shape[0]} rows, need {n + 1}")
    d = params.proj.shape[1]
    projected = matmul(patches, params.proj)                     # (B, N, d)
    cls_rows = expand_batch(reshape(params.cls, (1, d)), b)      # (B, 1, d)
    body = concat([cls_rows, projected], axis=1)                 # (B, N+1, d)
    return add(body, slice_axis(params.pos, 0, 0, n + 1))


# ---------------------------------------------------------------------------
# Window sampling.

def extract_window(
    clip: Clip,
    visual_offset: float,
    audio_offset: float,
    span_s: float,
    n_frames: int,
) -> WindowSample:
    """Deterministic window: ``n_frames`` frames at a uniform stride of
    ``span * frame_rate / n_frames`` starting at the visual offset, plus the
    audio segment starting at the audio offset."""
    f_total = clip.frames.shape[0]
    stride = span_s * clip.frame_rate / n_frames
    idx = np.floor(visual_offset * clip.frame_rate + np.arange(n_frames) * stride).astype(int)
    idx = np.clip(idx, 0, f_total - 1)
    frames = clip.frames[idx]

    span_samples = int(round(span_s * clip.sample_rate))
    a0 = int(round(audio_offset * clip.sample_rate))
    a0 = min(max(a0, 0), max(clip.waveform.size - span_samples, 0))
    audio = clip.waveform[a0 : a0 + span_samples]
    return WindowSample(frames=frames, audio=audio,
                        visual_offset=visual_offset, audio_offset=audio_offset)


def sample_windows(
    clip: Clip,
    span_s: float,
    n_frames: int,
    mode: str,
    rng: np.random.Generator,
) -> WindowSample:
    """Pick a span_s window (shared offset in sync mode, independent per
    modality in async mode) uniformly over the clip's slack."""
    if mode not in ("sync", "async"):
        raise TokenizerError(f"unknown sampling mode {mode!r}")
    slack = clip.duration - span_s
    if slack < -1e-9:
        raise TokenizerError(f"span {span_s}s exceeds clip duration {clip.duration:.3f}s")
    slack = max(slack, 0.0)

    v_off = rng.uniform(0.0, slack) if slack > 0 else 0.0
    if mode == "sync":
        a_off = v_off
    else:
        a_off = rng.uniform(0.0, slack) if slack > 0 else 0.0
    return extract_window(clip, v_off, a_off, span_s, n_frames)
