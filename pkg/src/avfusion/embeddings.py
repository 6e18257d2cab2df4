"""Per-utterance identity vectors for the voice and face modalities."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import formats
from .errors import (
    DimMismatch,
    EmptyDataset,
    InvalidConfig,
    InvalidSpec,
    TooShort,
)
from .frontend import Gammatonegram
from .imaging import vector_heatmap
from .nn import (
    Conv1d,
    Dense,
    Network,
    ReLU,
    Softmax,
    SoftmaxModel,
    StatPool,
    TrainConfig,
    forward,
    init_network,
    train,
    train_softmax,
)

MODALITIES = ("voice_xvec", "voice_gtg", "face")


@dataclass
class Embedding:
    id: str
    speaker: str
    modality: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding values must be finite")

    @property
    def dim(self) -> int:
        return self.values.size


# ---------------------------------------------------------------------------
# VoiceNet


@dataclass
class VoiceNetSpec:
    in_dim: int = 24
    conv_widths: tuple = (512, 512, 512, 512, 1500)
    kernels: tuple = (5, 3, 3, 1, 1)
    dilations: tuple = (1, 2, 3, 1, 1)
    embedding_dim: int = 512
    hidden_dim: int = 512
    n_classes: int = 118

    def validate(self) -> None:
        if not len(self.conv_widths) == len(self.kernels) == len(self.dilations) == 5:
            raise InvalidSpec("VoiceNet has exactly five convolutional layers")
        dims = (self.in_dim, self.embedding_dim, self.hidden_dim, *self.conv_widths, *self.kernels, *self.dilations)
        if min(dims) < 1:
            raise InvalidSpec("all VoiceNet dimensions must be positive")
        if self.n_classes < 2:
            raise InvalidSpec("VoiceNet needs at least two classes")


def build_voicenet(spec: VoiceNetSpec, seed: int = 0) -> Network:
    spec.validate()
    layers = []
    width = spec.in_dim
    for out, k, d in zip(spec.conv_widths, spec.kernels, spec.dilations):
        layers += [Conv1d(width, out, k, d), ReLU()]
        width = out
    layers += [
        StatPool(),
        Dense(2 * width, spec.embedding_dim),
        ReLU(),
        Dense(spec.embedding_dim, spec.hidden_dim),
        ReLU(),
        Dense(spec.hidden_dim, spec.n_classes),
        Softmax(),
    ]
    return init_network(layers, seed)


def _xvector_layer(net: Network) -> int:
    for i, layer in enumerate(net.layers):
        if isinstance(layer, StatPool):
            if i + 1 < len(net.layers) and isinstance(net.layers[i + 1], Dense):
                return i + 1
    raise InvalidSpec("network has no Dense layer right after statistics pooling")


def xvectors(net: Network, frames) -> np.ndarray:
    """Embedding-layer pre-activations; ``frames`` is T x C or B x T x C."""
    frames = np.asarray(getattr(frames, "values", frames), dtype=np.float64)
    t = frames.shape[-2]
    if t < net.receptive_field:
        raise TooShort(f"{t} frames, network needs at least {net.receptive_field}")
    tap = _xvector_layer(net)
    trace = forward(net, frames)
    out = trace.inputs[tap + 1]
    return out if frames.ndim == 3 else out[0]


def extract_xvector(net: Network, frames, utt_id: str = "", speaker: str = "") -> Embedding:
    return Embedding(utt_id, speaker, "voice_xvec", xvectors(net, frames))


# ---------------------------------------------------------------------------
# gammatonegram branch


def gtg_stats_vector(gtg) -> np.ndarray:
    """Per-channel mean then per-channel population std of the dB values."""
    values = gtg.values if isinstance(gtg, Gammatonegram) else np.asarray(gtg, dtype=np.float64)
    if values.shape[1] < 1:
        raise TooShort("gammatonegram has no frames")
    return np.concatenate([values.mean(axis=1), values.std(axis=1)])


def train_gtg_classifier(stats, labels, cfg: TrainConfig, n_classes: int | None = None) -> SoftmaxModel:
    stats = np.asarray(stats, dtype=np.float64)
    labels = np.asarray(labels)
    if stats.size == 0 or len(labels) == 0:
        raise EmptyDataset("no gammatonegram statistics to train on")
    if len(np.unique(labels)) < 2:
        raise EmptyDataset("need at least two classes")
    return train_softmax(stats, labels, cfg, n_classes)


def extract_gtg_embedding(model: SoftmaxModel, stats, utt_id: str = "", speaker: str = "") -> Embedding:
    """Pre-softmax logits: one entry per training class."""
    return Embedding(utt_id, speaker, "voice_gtg", model.logits(stats))


# ---------------------------------------------------------------------------
# face embeddings (FBEM)


def save_face_embedding(path, values) -> None:
    formats.write_bytes(path, formats.embedding_to_bytes(values))


def load_face_embedding(path, expected_dim: int | None = None, utt_id: str = "", speaker: str = "") -> Embedding:
    values = formats.embedding_from_bytes(formats.read_bytes(path))
    if expected_dim is not None and values.size != expected_dim:
        raise DimMismatch(f"{path}: dim {values.size}, dataset uses {expected_dim}")
    return Embedding(utt_id, speaker, "face", values)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class MultimodalDataset:
    """Aligned per-utterance modalities.

    ``voice`` holds utterance-level voice vectors (gammatonegram statistics for
    real audio); ``voice_frames`` holds MFCC-like frame sequences for VoiceNet.
    """

    utt_ids: list
    labels: np.ndarray
    class_names: list
    face: np.ndarray
    voice: np.ndarray | None = None
    voice_frames: list | None = None
    face_images: list | None = None
    voice_images: list | None = None

    def __len__(self) -> int:
        return len(self.utt_ids)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def speakers(self) -> list:
        return [self.class_names[i] for i in self.labels]

    def subset(self, idx) -> "MultimodalDataset":
        idx = np.asarray(idx, dtype=np.int64)

        def pick(seq):
            return None if seq is None else [seq[i] for i in idx]

        return MultimodalDataset(
            [self.utt_ids[i] for i in idx],
            self.labels[idx],
            self.class_names,
            self.face[idx],
            None if self.voice is None else self.voice[idx],
            pick(self.voice_frames),
            pick(self.face_images),
            pick(self.voice_images),
        )


@dataclass
class SynthConfig:
    n_classes: int = 10
    n_utt_per_class: int = 30
    dim_voice: int = 32
    dim_face: int = 32
    class_sep: float = 1.0
    noise_voice: float = 1.0
    noise_face: float = 1.0
    cross_modal_corr: float = 0.0
    seed: int = 0
    n_frames: int = 0  # > 0 also emits per-utterance frame sequences
    frame_noise: float = 0.5
    image_side: int = 32

    def validate(self) -> None:
        if self.n_classes < 2 or self.n_utt_per_class < 1:
            raise InvalidConfig("need >= 2 classes and >= 1 utterance per class")
        if self.dim_voice < 2 or self.dim_face < 2:
            raise InvalidConfig("modality dimensions must be >= 2")
        if min(self.noise_voice, self.noise_face, self.frame_noise, self.class_sep) < 0:
            raise InvalidConfig("noise levels and class_sep must be non-negative")
        if not 0 <= self.cross_modal_corr <= 1:
            raise InvalidConfig("cross_modal_corr must lie in [0, 1]")
        if self.n_frames < 0 or self.image_side < 8:
            raise InvalidConfig("n_frames must be >= 0 and image_side >= 8")


def synth_generate(cfg: SynthConfig) -> MultimodalDataset:
    """Class-conditional Gaussian voice/face vectors with optional shared noise.

    A fraction ``cross_modal_corr`` of each modality's noise variance comes from
    a component shared between the two modalities.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    c, u = cfg.n_classes, cfg.n_utt_per_class
    mu_v = cfg.class_sep * rng.standard_normal((c, cfg.dim_voice))
    mu_f = cfg.class_sep * rng.standard_normal((c, cfg.dim_face))
    n = c * u
    labels = np.repeat(np.arange(c), u)
    z_v = rng.standard_normal((n, cfg.dim_voice))
    z_f = rng.standard_normal((n, cfg.dim_face))
    z_s = rng.standard_normal((n, max(cfg.dim_voice, cfg.dim_face)))
    own, shared = np.sqrt(1.0 - cfg.cross_modal_corr), np.sqrt(cfg.cross_modal_corr)
    voice = mu_v[labels] + cfg.noise_voice * (own * z_v + shared * z_s[:, : cfg.dim_voice])
    face = mu_f[labels] + cfg.noise_face * (own * z_f + shared * z_s[:, : cfg.dim_face])
    frames = None
    if cfg.n_frames > 0:
        frames = [
            voice[i] + cfg.frame_noise * rng.standard_normal((cfg.n_frames, cfg.dim_voice))
            for i in range(n)
        ]
    face_scale = cfg.class_sep + cfg.noise_face
    voice_scale = cfg.class_sep + cfg.noise_voice
    width = len(str(c - 1))
    names = [f"spk{k:0{width}d}" for k in range(c)]
    return MultimodalDataset(
        utt_ids=[f"{names[labels[i]]}-utt{i % u:04d}" for i in range(n)],
        labels=labels,
        class_names=names,
        face=face,
        voice=voice,
        voice_frames=frames,
        face_images=[vector_heatmap(f, cfg.image_side, face_scale) for f in face],
        voice_images=[vector_heatmap(v, cfg.image_side, voice_scale) for v in voice],
    )


def synth_tone_samples(vector, sample_rate: int = 16000, duration_s: float = 1.0, seed: int = 0) -> np.ndarray:
    """Render a voice vector as a sum of log-spaced tones between 200 Hz and 3.8 kHz.

    Tone j has amplitude proportional to exp(0.5 * vector[j]), so the vector is
    recoverable from per-band log energies. 100 ms of near-silence pads each end.
    """
    vector = np.asarray(vector, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    freqs = np.geomspace(200.0, min(3800.0, 0.45 * sample_rate), vector.size)
    t = np.arange(int(round(duration_s * sample_rate))) / sample_rate
    amps = np.exp(0.5 * (vector - vector.max()))
    phases = rng.uniform(0, 2 * np.pi, vector.size)
    tone = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(axis=0)
    tone *= 0.8 / np.abs(tone).max()
    pad = np.zeros(int(0.1 * sample_rate))
    out = np.concatenate([pad, tone, pad])
    return out + 1e-4 * rng.standard_normal(out.size)


def dataset_digest(ds: MultimodalDataset) -> bytes:
    """Canonical byte serialization, used to compare datasets for equality."""
    parts = ["\n".join(ds.utt_ids).encode(), ds.labels.astype("<i8").tobytes(), ds.face.astype("<f8").tobytes()]
    if ds.voice is not None:
        parts.append(ds.voice.astype("<f8").tobytes())
    for seq in (ds.voice_frames, ds.face_images, ds.voice_images):
        for arr in seq or []:
            parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def crop_frames(frames: list, length: int | None = None) -> np.ndarray:
    """Stack frame sequences after cropping each to a common length (default: shortest)."""
    if not frames:
        raise EmptyDataset("no frame sequences")
    length = length or min(len(f) for f in frames)
    if min(len(f) for f in frames) < length:
        raise TooShort(f"some sequences are shorter than {length} frames")
    return np.stack([np.asarray(f, dtype=np.float64)[:length] for f in frames])


def train_voicenet(frames, labels, spec: VoiceNetSpec, cfg: TrainConfig, crop: int | None = None):
    """Build and train VoiceNet; returns the TrainResult (network + loss history)."""
    batch = crop_frames(list(frames), crop)
    spec = replace(spec, in_dim=batch.shape[2])
    net = build_voicenet(spec, seed=cfg.seed)
    if batch.shape[1] < net.receptive_field:
        raise TooShort(f"{batch.shape[1]} frames, VoiceNet needs {net.receptive_field}")
    return train(net, batch, labels, cfg)
