"""Audio front-end: WAV loading, energy VAD, MFCC + CMVN, gammatonegrams."""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct
from scipy.signal import hilbert, lfilter

from . import formats
from .errors import (
    CorruptHeader,
    EmptyAfterVad,
    EmptyAudio,
    InsufficientFrames,
    InvalidConfig,
    InvalidRange,
    TooShort,
    UnsupportedFormat,
)
from .imaging import resize_nearest

logger = logging.getLogger(__name__)

PRE_EMPHASIS = 0.97
CMVN_VAR_FLOOR = 1e-10
GTG_FLOOR_DB = -80.0
GAMMATONE_ORDER = 4
# bandwidth scale for a 4th-order gammatone (Patterson/Holdsworth)
GAMMATONE_BW_FACTOR = 1.019


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise InvalidConfig("sample_rate must be positive")
        if samples.ndim != 1:
            raise UnsupportedFormat("AudioClip holds mono samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FrameMatrix:
    values: np.ndarray  # n_frames x n_coeffs
    frame_shift: float
    frame_length: float

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    def to_bytes(self) -> bytes:
        return formats.matrix_to_bytes(self.values, formats.MAGIC_FRAMES)

    @classmethod
    def from_bytes(cls, data: bytes, frame_shift: float = 0.010, frame_length: float = 0.025):
        return cls(formats.matrix_from_bytes(data, formats.MAGIC_FRAMES), frame_shift, frame_length)


@dataclass(frozen=True)
class Gammatonegram:
    values: np.ndarray  # n_channels x n_frames, dB
    center_freqs: np.ndarray
    floor_db: float = GTG_FLOOR_DB

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def to_bytes(self) -> bytes:
        return formats.matrix_to_bytes(self.values, formats.MAGIC_GAMMATONE)

    @classmethod
    def from_bytes(cls, data: bytes, center_freqs=None, floor_db: float = GTG_FLOOR_DB):
        values = formats.matrix_from_bytes(data, formats.MAGIC_GAMMATONE)
        if center_freqs is None:
            center_freqs = np.arange(values.shape[0], dtype=np.float64)
        return cls(values, np.asarray(center_freqs, dtype=np.float64), floor_db)


@dataclass
class FrontendConfig:
    frame_length_s: float = 0.025
    frame_shift_s: float = 0.010
    n_mfcc: int = 24
    n_mel_filters: int = 26
    n_gt_channels: int = 64
    fmin_hz: float = 50.0
    fmax_hz: float | None = None  # None -> Nyquist
    vad_threshold_db: float = -40.0
    energy_floor: float = 1e-10

    def validate(self, sample_rate: int) -> None:
        if not 0 < self.frame_shift_s <= self.frame_length_s:
            raise InvalidConfig("need 0 < frame_shift_s <= frame_length_s")
        if self.n_gt_channels < 2:
            raise InvalidConfig("n_gt_channels must be >= 2")
        if not self.fmin_hz < self.upper_hz(sample_rate) <= sample_rate / 2:
            raise InvalidConfig("need fmin_hz < fmax_hz <= sample_rate/2")
        if self.n_mfcc < 1 or self.n_mel_filters < self.n_mfcc:
            raise InvalidConfig("need 1 <= n_mfcc <= n_mel_filters")
        if self.energy_floor <= 0:
            raise InvalidConfig("energy_floor must be positive")

    def upper_hz(self, sample_rate: int) -> float:
        return sample_rate / 2 if self.fmax_hz is None else float(self.fmax_hz)

    def frame_samples(self, sample_rate: int) -> tuple[int, int]:
        length = int(round(self.frame_length_s * sample_rate))
        shift = int(round(self.frame_shift_s * sample_rate))
        return length, max(shift, 1)


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> AudioClip:
    try:
        with wave.open(str(path), "rb") as w:
            n_channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        if "unknown format" in str(exc):
            raise UnsupportedFormat(f"{path}: {exc}") from exc
        raise CorruptHeader(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise CorruptHeader(f"{path}: truncated header") from exc
    if width != 2:
        raise UnsupportedFormat(f"{path}: {8 * width}-bit samples, need 16-bit PCM")
    if n_channels != 1:
        raise UnsupportedFormat(f"{path}: {n_channels} channels, need mono")
    if rate <= 0:
        raise CorruptHeader(f"{path}: sample rate {rate}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise EmptyAudio(f"{path}: no samples")
    return AudioClip(samples, rate)


def wav_bytes(clip: AudioClip) -> bytes:
    import io

    pcm = np.clip(np.rint(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.tobytes())
    return buf.getvalue()


def save_wav(path, clip: AudioClip) -> None:
    formats.write_bytes(path, wav_bytes(clip))


# ---------------------------------------------------------------------------
# framing / VAD


def n_frames_for(n_samples: int, frame_len: int, shift: int) -> int:
    return 1 + (n_samples - frame_len) // shift


def frame_signal(x: np.ndarray, frame_len: int, shift: int) -> np.ndarray:
    if x.size < frame_len:
        raise TooShort(f"{x.size} samples is shorter than one frame ({frame_len})")
    return np.lib.stride_tricks.sliding_window_view(x, frame_len)[::shift]


def apply_vad(clip: AudioClip, cfg: FrontendConfig | None = None) -> AudioClip:
    """Drop samples that belong to no active frame.

    A frame is active when its mean power is above ``energy_floor`` and its
    level in dB exceeds ``peak + vad_threshold_db``. Samples after the last
    full frame inherit that frame's decision. Kept samples stay in order.
    """
    cfg = cfg or FrontendConfig()
    x = clip.samples
    if x.size == 0:
        raise EmptyAudio("empty clip")
    frame_len, shift = cfg.frame_samples(clip.sample_rate)
    frame_len = min(frame_len, x.size)
    frames = frame_signal(x, frame_len, shift)
    power = np.mean(frames * frames, axis=1)
    level = 10.0 * np.log10(np.maximum(power, cfg.energy_floor))
    active = (power > cfg.energy_floor) & (level > level.max() + cfg.vad_threshold_db)
    if not active.any():
        raise EmptyAfterVad("no frame passes the VAD threshold")
    keep = np.zeros(x.size, dtype=bool)
    starts = np.arange(frames.shape[0]) * shift
    for s in starts[active]:
        keep[s : s + frame_len] = True
    if active[-1]:
        keep[starts[-1] :] = True
    return AudioClip(x[keep], clip.sample_rate)


# ---------------------------------------------------------------------------
# MFCC


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def fft_size(frame_len: int) -> int:
    return 1 << max(int(frame_len - 1).bit_length(), 1)


def mel_filterbank(n_filters: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filters, shape ``(n_filters, n_fft//2 + 1)``."""
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2))
    bins_hz = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_filters, bins_hz.size))
    for m in range(n_filters):
        lo, mid, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rise = (bins_hz - lo) / (mid - lo)
        fall = (hi - bins_hz) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(rise, fall))
    return fb


def mel_centers(n_filters: int, fmin: float, fmax: float) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_filters + 2))[1:-1]


def power_spectrum_frames(clip: AudioClip, cfg: FrontendConfig) -> tuple[np.ndarray, int]:
    frame_len, shift = cfg.frame_samples(clip.sample_rate)
    frames = frame_signal(clip.samples, frame_len, shift)
    emphasized = np.concatenate(
        [frames[:, :1], frames[:, 1:] - PRE_EMPHASIS * frames[:, :-1]], axis=1
    )
    windowed = emphasized * np.hamming(frame_len)
    n_fft = fft_size(frame_len)
    spec = np.fft.rfft(windowed, n=n_fft, axis=1)
    return (spec.real**2 + spec.imag**2) / n_fft, n_fft


def mel_energies(clip: AudioClip, cfg: FrontendConfig | None = None) -> np.ndarray:
    """Per-frame mel filterbank energies (before the log)."""
    cfg = cfg or FrontendConfig()
    cfg.validate(clip.sample_rate)
    power, n_fft = power_spectrum_frames(clip, cfg)
    fb = mel_filterbank(
        cfg.n_mel_filters, n_fft, clip.sample_rate, cfg.fmin_hz, cfg.upper_hz(clip.sample_rate)
    )
    return power @ fb.T


def compute_mfcc(clip: AudioClip, cfg: FrontendConfig | None = None) -> FrameMatrix:
    cfg = cfg or FrontendConfig()
    energies = mel_energies(clip, cfg)
    logmel = np.log(np.maximum(energies, cfg.energy_floor))
    ceps = dct(logmel, type=2, axis=1, norm="ortho")[:, : cfg.n_mfcc]
    return FrameMatrix(ceps, cfg.frame_shift_s, cfg.frame_length_s)


def apply_cmvn(frames: FrameMatrix) -> FrameMatrix:
    x = frames.values
    if x.shape[0] < 2:
        raise InsufficientFrames(f"CMVN needs >= 2 frames, got {x.shape[0]}")
    centered = x - x.mean(axis=0)
    centered[:, np.ptp(x, axis=0) == 0] = 0.0  # exact zeros despite rounding in the mean
    var = np.mean(centered * centered, axis=0)
    scale = np.where(var >= CMVN_VAR_FLOOR, 1.0 / np.sqrt(np.maximum(var, CMVN_VAR_FLOOR)), 1.0)
    return FrameMatrix(centered * scale, frames.frame_shift, frames.frame_length)


# ---------------------------------------------------------------------------
# gammatone


def erb_rate(f):
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f, dtype=np.float64))


def erb_rate_to_hz(e):
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


def erb_bandwidth(f):
    """Glasberg-Moore ERB in Hz."""
    return 24.7 * (4.37 * np.asarray(f, dtype=np.float64) / 1000.0 + 1.0)


def erb_center_frequencies(n: int, fmin: float, fmax: float) -> np.ndarray:
    if n < 1 or not 0 < fmin <= fmax:
        raise InvalidRange(f"need n >= 1 and 0 < fmin <= fmax (n={n}, fmin={fmin}, fmax={fmax})")
    if n > 1 and fmin == fmax:
        raise InvalidRange("several channels need fmin < fmax")
    if n == 1:
        return np.array([float(fmin)])
    freqs = erb_rate_to_hz(np.linspace(erb_rate(fmin), erb_rate(fmax), n))
    # pin endpoints exactly; the inverse map is not bit-exact
    freqs[0], freqs[-1] = fmin, fmax
    return freqs


def gammatone_filter(x: np.ndarray, center_hz: float, sample_rate: int) -> np.ndarray:
    """Complex 4th-order gammatone: four identical one-pole complex resonators.

    Each stage is ``y[n] = (1 - r) x[n] + r e^{jw} y[n-1]`` which has exactly
    unit gain at ``w = 2 pi center_hz / fs``; the cascade therefore does too.
    Returns the complex (analytic-like) channel output.
    """
    bw = GAMMATONE_BW_FACTOR * erb_bandwidth(center_hz)
    r = np.exp(-2.0 * np.pi * bw / sample_rate)
    pole = r * np.exp(2j * np.pi * center_hz / sample_rate)
    b = np.array([1.0 - r], dtype=np.complex128)
    a = np.array([1.0, -pole], dtype=np.complex128)
    y = np.asarray(x, dtype=np.complex128)
    for _ in range(GAMMATONE_ORDER):
        y = lfilter(b, a, y)
    return y


def gammatone_power(analytic: np.ndarray, center_hz: float, sample_rate: int) -> np.ndarray:
    """Instantaneous channel power for an analytic input signal.

    Scaled by 1/2 so a real sinusoid at the centre frequency keeps its power.
    """
    y = gammatone_filter(analytic, center_hz, sample_rate)
    return 0.5 * (y.real**2 + y.imag**2)


def compute_gammatonegram(clip: AudioClip, cfg: FrontendConfig | None = None) -> Gammatonegram:
    cfg = cfg or FrontendConfig()
    cfg.validate(clip.sample_rate)
    frame_len, shift = cfg.frame_samples(clip.sample_rate)
    if clip.samples.size < frame_len:
        raise TooShort(f"{clip.samples.size} samples is shorter than one frame ({frame_len})")
    cfs = erb_center_frequencies(cfg.n_gt_channels, cfg.fmin_hz, cfg.upper_hz(clip.sample_rate))
    n_frames = n_frames_for(clip.samples.size, frame_len, shift)
    out = np.empty((cfs.size, n_frames))
    # analytic input removes the negative-frequency image near Nyquist
    analytic = hilbert(clip.samples)
    for i, cf in enumerate(cfs):
        p = gammatone_power(analytic, cf, clip.sample_rate)
        out[i] = frame_signal(p, frame_len, shift).mean(axis=1)
    db = 10.0 * np.log10(np.maximum(out, cfg.energy_floor))
    return Gammatonegram(np.maximum(db, GTG_FLOOR_DB), cfs, GTG_FLOOR_DB)


def render_gammatonegram_image(gtg: Gammatonegram, width: int = 224, height: int = 224) -> np.ndarray:
    """Grayscale uint8 image of shape ``(height, width)``; low frequencies at the bottom."""
    if width < 8 or height < 8:
        raise InvalidConfig("image width and height must be >= 8")
    v = gtg.values
    top = v.max()
    if np.all(v == v.flat[0]):
        logger.warning("degenerate gammatonegram range; rendering uniform grey")
        return np.full((height, width), 128, dtype=np.uint8)
    span = top - gtg.floor_db
    pix = np.rint((np.clip(v, gtg.floor_db, None) - gtg.floor_db) / span * 255.0)
    pix = np.clip(pix, 0, 255).astype(np.uint8)
    return resize_nearest(pix[::-1], height, width)


def voice_features(clip: AudioClip, cfg: FrontendConfig | None = None) -> FrameMatrix:
    """VAD, MFCC and CMVN in sequence: the x-vector input stream."""
    cfg = cfg or FrontendConfig()
    return apply_cmvn(compute_mfcc(apply_vad(clip, cfg), cfg))
