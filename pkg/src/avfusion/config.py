"""Flat ``key = value`` run configuration.

Precedence: command-line overrides > config file > defaults. Unknown keys are
rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .embeddings import SynthConfig, VoiceNetSpec
from .errors import InvalidConfig
from .evaluation import ID_MODES, VERIFY_MODES, ExperimentConfig
from .frontend import FrontendConfig
from .nn import TrainConfig


@dataclass
class RunConfig:
    # front-end
    frame_length_s: float = 0.025
    frame_shift_s: float = 0.010
    n_mfcc: int = 24
    n_mel_filters: int = 26
    n_gt_channels: int = 64
    fmin_hz: float = 50.0
    fmax_hz: float = 0.0  # 0 = Nyquist
    vad_threshold_db: float = -40.0
    energy_floor: float = 1e-10
    # VoiceNet training
    epochs: int = 8
    batch_size: int = 128
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    momentum: float = 0.9
    min_gradient_norm: float = 1e-6
    conv_widths: str = "64,64,64,64,128"
    kernels: str = "5,3,3,1,1"
    dilations: str = "1,2,3,1,1"
    embedding_dim: int = 512
    hidden_dim: int = 512
    voice_crop_frames: int = 0
    gradcheck_tolerance: float = 1e-4
    # softmax classifiers / fusion layer
    classifier_epochs: int = 50
    # synthetic data
    n_classes: int = 10
    n_utt_per_class: int = 30
    dim_voice: int = 16
    dim_face: int = 32
    class_sep: float = 1.0
    noise_voice: float = 1.3
    noise_face: float = 1.8
    cross_modal_corr: float = 0.0
    sample_rate: int = 16000
    utt_duration_s: float = 1.0
    # experiment
    mode: str = "feature_xvec"
    task: str = "id"
    k_folds: int = 3
    seed: int = 0
    out_dir: str = "out"
    trials_per_fold: int = 1000
    lda_dim: int = 150
    plda_latent_dim: int = -1  # -1 = min(100, lda_dim - 1)
    plda_iterations: int = 20
    composite_size: int = 224
    sensor_downsample: int = 16
    n_augment: int = 1

    def validate(self) -> None:
        if self.task not in ("id", "verify"):
            raise InvalidConfig(f"task must be 'id' or 'verify', got {self.task!r}")
        modes = ID_MODES if self.task == "id" else VERIFY_MODES
        if self.mode not in modes:
            raise InvalidConfig(f"mode {self.mode!r} not valid for task {self.task!r}; choose from {', '.join(modes)}")
        if self.k_folds < 2:
            raise InvalidConfig("k_folds must be >= 2")
        for key in ("conv_widths", "kernels", "dilations"):
            if len(_ints(getattr(self, key), key)) != 5:
                raise InvalidConfig(f"{key} needs five comma-separated integers")

    # -- derived configs -------------------------------------------------

    def frontend(self) -> FrontendConfig:
        return FrontendConfig(
            self.frame_length_s,
            self.frame_shift_s,
            self.n_mfcc,
            self.n_mel_filters,
            self.n_gt_channels,
            self.fmin_hz,
            self.fmax_hz or None,
            self.vad_threshold_db,
            self.energy_floor,
        )

    def voice_train(self) -> TrainConfig:
        return TrainConfig(
            self.epochs, self.batch_size, self.lr_start, self.lr_end, self.momentum, self.seed, self.min_gradient_norm
        )

    def voicenet(self, n_classes: int = 2) -> VoiceNetSpec:
        return VoiceNetSpec(
            in_dim=self.n_mfcc,
            conv_widths=_ints(self.conv_widths, "conv_widths"),
            kernels=_ints(self.kernels, "kernels"),
            dilations=_ints(self.dilations, "dilations"),
            embedding_dim=self.embedding_dim,
            hidden_dim=self.hidden_dim,
            n_classes=n_classes,
        )

    def synth(self) -> SynthConfig:
        return SynthConfig(
            n_classes=self.n_classes,
            n_utt_per_class=self.n_utt_per_class,
            dim_voice=self.dim_voice,
            dim_face=self.dim_face,
            class_sep=self.class_sep,
            noise_voice=self.noise_voice,
            noise_face=self.noise_face,
            cross_modal_corr=self.cross_modal_corr,
            seed=self.seed,
        )

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(
            k_folds=self.k_folds,
            seed=self.seed,
            voice_train=dataclasses.replace(self.voice_train(), seed=0),
            voicenet=self.voicenet(),
            voice_crop_frames=self.voice_crop_frames,
            classifier_epochs=self.classifier_epochs,
            composite_size=self.composite_size,
            sensor_downsample=self.sensor_downsample,
            n_augment=self.n_augment,
            lda_dim=self.lda_dim,
            plda_latent_dim=None if self.plda_latent_dim < 0 else self.plda_latent_dim,
            plda_iterations=self.plda_iterations,
            trials_per_fold=self.trials_per_fold,
            frontend=self.frontend(),
        )

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _ints(text: str, key: str) -> tuple:
    try:
        return tuple(int(t) for t in str(text).split(","))
    except ValueError as exc:
        raise InvalidConfig(f"{key}: expected comma-separated integers, got {text!r}") from exc


KEYS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in KEYS:
        raise InvalidConfig(f"unknown config key {key!r}")
    kind = KEYS[key].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise InvalidConfig(f"{key}: cannot parse {raw!r} as {kind}") from exc
    return str(raw)


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
        values.update(parse_config_text(text))
    for key, raw in (overrides or {}).items():
        values[key] = _coerce(key, raw)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
