"""K-fold experiment harness, identification metrics and report rendering."""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from .embeddings import MultimodalDataset, VoiceNetSpec, crop_frames, train_voicenet, xvectors
from .errors import DataError, EmptyMatrix, InsufficientUtterances, LabelOutOfRange
from .frontend import FrontendConfig
from .fusion import (
    build_composite_image,
    fusion_train_config,
    random_augment,
    sensor_fusion_features,
    train_fusion,
)
from .nn import SoftmaxModel, TrainConfig, forward, train_softmax
from .verification import ScoreSet, compute_eer, fit_backend, score_gplda_batch

logger = logging.getLogger(__name__)

ID_MODES = ("face", "voice_xvec", "voice_gtg", "sensor", "feature_xvec", "feature_gtg", "score", "score_xvec")
VERIFY_MODES = ("face", "voice", "feature_gtg", "feature_xvec")

# Reported averages, shown as citation rows next to the reproduced numbers.
CITED_ACCURACY = {
    "face": 96.00,
    "voice_xvec": 72.67,
    "voice_gtg": 61.64,
    "sensor": 93.61,
    "score": 96.24,
    "feature_gtg": 98.37,
    "score_xvec": 96.70,
    "feature_xvec": 98.33,
}
CITED_EER = {"face": 1.01, "voice": 5.12, "feature_gtg": 0.82, "feature_xvec": 0.62}


# ---------------------------------------------------------------------------
# folds


@dataclass
class FoldSplit:
    utt_ids: list
    folds: np.ndarray  # fold index per utterance, aligned with utt_ids
    k: int

    @property
    def assignments(self) -> dict:
        return dict(zip(self.utt_ids, self.folds.tolist()))

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != fold)


def kfold_split(utt_ids, speakers, k: int = 3, seed: int = 0) -> FoldSplit:
    """Per-speaker stratified round-robin folds after a seeded shuffle.

    Each speaker's starting fold is rotated so overall fold sizes stay balanced.
    """
    if k < 2:
        raise ValueError("K must be >= 2")
    speakers = list(speakers)
    if len(utt_ids) != len(speakers):
        raise DataError("utt_ids and speakers differ in length")
    rng = np.random.default_rng(seed)
    folds = np.full(len(utt_ids), -1, dtype=np.int64)
    by_speaker: dict = {}
    for i, s in enumerate(speakers):
        by_speaker.setdefault(s, []).append(i)
    for n_spk, spk in enumerate(sorted(by_speaker)):
        idx = np.array(by_speaker[spk])
        if idx.size < k:
            raise InsufficientUtterances(f"speaker {spk!r} has {idx.size} utterances, K={k}")
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (n_spk + np.arange(idx.size)) % k
    return FoldSplit(list(utt_ids), folds, k)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, cols = prediction

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(predictions, truths, n_classes: int) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(truths, dtype=np.int64)
    if p.shape != t.shape:
        raise DataError("predictions and truths differ in length")
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass
class MetricsReport:
    precision: float
    sensitivity: float
    specificity: float
    f_measure: float
    accuracy: float  # percent

    @classmethod
    def mean(cls, reports) -> "MetricsReport":
        return cls(*(float(np.mean([getattr(r, f.name) for r in reports])) for f in fields(cls)))


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def metrics_from_confusion(m: ConfusionMatrix) -> MetricsReport:
    """Macro-averaged one-vs-rest metrics; accuracy in percent."""
    c = np.asarray(m.counts, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise EmptyMatrix("confusion matrix is empty")
    tp = np.diag(c)
    fn = c.sum(axis=1) - tp
    fp = c.sum(axis=0) - tp
    tn = total - tp - fn - fp
    if np.any(tn + fp == 0):
        warnings.warn("specificity undefined for some classes; reported as 0", RuntimeWarning, stacklevel=2)
    precision = _ratio(tp, tp + fp)
    sensitivity = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)
    f1 = _ratio(2 * precision * sensitivity, precision + sensitivity)
    return MetricsReport(
        float(precision.mean()),
        float(sensitivity.mean()),
        float(specificity.mean()),
        float(f1.mean()),
        float(100.0 * tp.sum() / total),
    )


# ---------------------------------------------------------------------------
# experiment configuration


@dataclass
class ExperimentConfig:
    k_folds: int = 3
    seed: int = 0
    voice_train: TrainConfig = field(default_factory=TrainConfig)
    voicenet: VoiceNetSpec = field(default_factory=lambda: VoiceNetSpec(conv_widths=(64, 64, 64, 64, 128)))
    voice_crop_frames: int = 0  # 0: shortest utterance
    classifier_epochs: int = 50  # softmax classifiers and the fusion layer
    composite_size: int = 224
    sensor_downsample: int = 16
    n_augment: int = 1
    lda_dim: int = 150
    plda_latent_dim: int | None = None
    plda_iterations: int = 20
    trials_per_fold: int = 1000
    frontend: FrontendConfig = field(default_factory=FrontendConfig)

    def classifier_config(self, salt: int = 0) -> TrainConfig:
        return fusion_train_config(self.seed + salt, self.classifier_epochs)


@dataclass
class _Branch:
    """Embeddings and posteriors of one modality for a single fold."""

    train_emb: np.ndarray
    test_emb: np.ndarray
    train_post: np.ndarray
    test_post: np.ndarray


def _softmax_branch(x, tr, te, labels, n_classes, cfg: TrainConfig) -> tuple[_Branch, SoftmaxModel]:
    model = train_softmax(x[tr], labels[tr], cfg, n_classes)
    return _Branch(x[tr], x[te], model.posteriors(x[tr]), model.posteriors(x[te])), model


def face_branch(ds, tr, te, cfg: ExperimentConfig) -> _Branch:
    return _softmax_branch(ds.face, tr, te, ds.labels, ds.n_classes, cfg.classifier_config(1))[0]


def gtg_branch(ds, tr, te, cfg: ExperimentConfig) -> _Branch:
    """Softmax over gammatonegram statistics; embeddings are its logits."""
    if ds.voice is None:
        raise DataError("dataset has no gammatonegram statistics")
    b, model = _softmax_branch(ds.voice, tr, te, ds.labels, ds.n_classes, cfg.classifier_config(2))
    b.train_emb, b.test_emb = model.logits(ds.voice[tr]), model.logits(ds.voice[te])
    return b


def xvec_branch(ds, tr, te, cfg: ExperimentConfig) -> _Branch:
    """VoiceNet x-vectors when frame sequences exist, else the voice vectors as given."""
    if ds.voice_frames is None:
        if ds.voice is None:
            raise DataError("dataset has no voice features")
        return _softmax_branch(ds.voice, tr, te, ds.labels, ds.n_classes, cfg.classifier_config(3))[0]
    frames = crop_frames(ds.voice_frames, cfg.voice_crop_frames or None)
    spec = VoiceNetSpec(**{**cfg.voicenet.__dict__, "n_classes": ds.n_classes})
    voice_cfg = TrainConfig(**{**cfg.voice_train.__dict__, "seed": cfg.seed + cfg.voice_train.seed})
    net = train_voicenet(frames[tr], ds.labels[tr], spec, voice_cfg).network

    def post(idx):
        return forward(net, frames[idx]).probs

    return _Branch(xvectors(net, frames[tr]), xvectors(net, frames[te]), post(tr), post(te))


# ---------------------------------------------------------------------------
# identification


@dataclass
class IdentificationResult:
    mode: str
    folds: list
    average: MetricsReport


def _sensor_predict(ds, tr, te, cfg: ExperimentConfig) -> np.ndarray:
    if ds.face_images is None or ds.voice_images is None:
        raise DataError("sensor fusion needs face and gammatonegram images")
    size = cfg.composite_size
    comps = [
        build_composite_image(ds.face_images[i], ds.voice_images[i], "face_left", size, size).pixels
        for i in range(len(ds))
    ]
    rng = np.random.default_rng(cfg.seed + 7)
    train_x, train_y = [], []
    for i in tr:
        train_x.append(sensor_fusion_features(comps[i], cfg.sensor_downsample))
        train_y.append(ds.labels[i])
        for _ in range(cfg.n_augment):
            train_x.append(sensor_fusion_features(random_augment(comps[i], rng), cfg.sensor_downsample))
            train_y.append(ds.labels[i])
    model = train_softmax(np.stack(train_x), np.array(train_y), cfg.classifier_config(4), ds.n_classes)
    test_x = np.stack([sensor_fusion_features(comps[i], cfg.sensor_downsample) for i in te])
    return model.predict(test_x)[0]


def _fuse_predict(a: np.ndarray, b: np.ndarray, tr_labels, test_a, test_b, cfg, n_classes) -> np.ndarray:
    model = train_fusion(np.hstack([a, b]), tr_labels, cfg.classifier_config(5), n_classes)
    return model.predict(np.hstack([test_a, test_b]))[0]


def identify_fold(ds: MultimodalDataset, mode: str, tr, te, cfg: ExperimentConfig) -> np.ndarray:
    """Predicted class indices for the test side of one fold."""
    ytr = ds.labels[tr]
    if mode == "sensor":
        return _sensor_predict(ds, tr, te, cfg)
    if mode == "face":
        return face_branch(ds, tr, te, cfg).test_post.argmax(axis=1)
    if mode == "voice_xvec":
        return xvec_branch(ds, tr, te, cfg).test_post.argmax(axis=1)
    if mode == "voice_gtg":
        return gtg_branch(ds, tr, te, cfg).test_post.argmax(axis=1)
    voice = xvec_branch(ds, tr, te, cfg) if mode.endswith("xvec") else gtg_branch(ds, tr, te, cfg)
    if mode.startswith("feature"):
        return _fuse_predict(voice.train_emb, ds.face[tr], ytr, voice.test_emb, ds.face[te], cfg, ds.n_classes)
    if mode.startswith("score"):
        face = face_branch(ds, tr, te, cfg)
        return _fuse_predict(voice.train_post, face.train_post, ytr, voice.test_post, face.test_post, cfg, ds.n_classes)
    raise ValueError(f"unknown identification mode {mode!r}")


def run_identification_experiment(ds: MultimodalDataset, mode: str, cfg: ExperimentConfig | None = None) -> IdentificationResult:
    cfg = cfg or ExperimentConfig()
    if mode not in ID_MODES:
        raise ValueError(f"unknown identification mode {mode!r}; choose from {', '.join(ID_MODES)}")
    split = kfold_split(ds.utt_ids, ds.speakers, cfg.k_folds, cfg.seed)
    reports = []
    for k in range(cfg.k_folds):
        tr, te = split.train_indices(k), split.test_indices(k)
        pred = identify_fold(ds, mode, tr, te, cfg)
        reports.append(metrics_from_confusion(confusion_matrix(pred, ds.labels[te], ds.n_classes)))
        logger.info("%s fold %d accuracy %.2f", mode, k + 1, reports[-1].accuracy)
    return IdentificationResult(mode, reports, MetricsReport.mean(reports))


FUSION_MODES = ("feature_xvec", "feature_gtg", "score", "score_xvec")


def train_fusion_model(ds: MultimodalDataset, mode: str, cfg: ExperimentConfig | None = None) -> SoftmaxModel:
    """Fit the branches and the fusion layer on every utterance of ``ds``."""
    cfg = cfg or ExperimentConfig()
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}; choose from {', '.join(FUSION_MODES)}")
    every = np.arange(len(ds))
    voice = xvec_branch(ds, every, every, cfg) if mode.endswith("xvec") else gtg_branch(ds, every, every, cfg)
    if mode.startswith("feature"):
        x = np.hstack([voice.train_emb, ds.face])
    else:
        x = np.hstack([voice.train_post, face_branch(ds, every, every, cfg).train_post])
    return train_fusion(x, ds.labels, cfg.classifier_config(5), ds.n_classes)


# ---------------------------------------------------------------------------
# verification


@dataclass
class VerificationResult:
    mode: str
    eers: list  # percent, per fold
    thresholds: list
    average: float


def make_trials(test_idx, labels, n_trials: int, rng: np.random.Generator):
    """Balanced seeded trial list: half same-speaker pairs, half different-speaker pairs."""
    test_idx = np.asarray(test_idx)
    labels = np.asarray(labels)[test_idx]
    by_spk = {s: test_idx[labels == s] for s in np.unique(labels)}
    multi = [s for s, v in by_spk.items() if v.size >= 2]
    if not multi or len(by_spk) < 2:
        raise DataError("test side cannot form both genuine and impostor trials")
    speakers = sorted(by_spk)
    pairs, truth = [], []
    for _ in range(n_trials // 2):
        s = multi[rng.integers(len(multi))]
        a, b = rng.choice(by_spk[s], size=2, replace=False)
        pairs.append((a, b))
        truth.append(True)
    for _ in range(n_trials - n_trials // 2):
        s1, s2 = rng.choice(len(speakers), size=2, replace=False)
        pairs.append((rng.choice(by_spk[speakers[s1]]), rng.choice(by_spk[speakers[s2]])))
        truth.append(False)
    return np.array(pairs, dtype=np.int64), np.array(truth)


def verification_vectors(ds, mode, tr, te, cfg) -> tuple[np.ndarray, np.ndarray]:
    """Train-side and test-side vectors for the backend, in dataset index order."""
    if mode == "face":
        return ds.face[tr], ds.face[te]
    if mode == "voice":
        b = xvec_branch(ds, tr, te, cfg)
        return b.train_emb, b.test_emb
    voice = xvec_branch(ds, tr, te, cfg) if mode == "feature_xvec" else gtg_branch(ds, tr, te, cfg)
    return np.hstack([voice.train_emb, ds.face[tr]]), np.hstack([voice.test_emb, ds.face[te]])


def run_verification_experiment(ds: MultimodalDataset, mode: str, cfg: ExperimentConfig | None = None) -> VerificationResult:
    cfg = cfg or ExperimentConfig()
    if mode not in VERIFY_MODES:
        raise ValueError(f"unknown verification mode {mode!r}; choose from {', '.join(VERIFY_MODES)}")
    if cfg.trials_per_fold < 100:
        raise DataError("trials_per_fold must be >= 100")
    split = kfold_split(ds.utt_ids, ds.speakers, cfg.k_folds, cfg.seed)
    eers, thresholds = [], []
    for k in range(cfg.k_folds):
        tr, te = split.train_indices(k), split.test_indices(k)
        train_x, test_x = verification_vectors(ds, mode, tr, te, cfg)
        backend = fit_backend(train_x, ds.labels[tr], cfg.lda_dim, cfg.plda_latent_dim, cfg.plda_iterations)
        position = {int(g): i for i, g in enumerate(te)}
        pairs, genuine = make_trials(te, ds.labels, cfg.trials_per_fold, np.random.default_rng(cfg.seed + 1000 + k))
        rows = np.vectorize(position.get)(pairs)
        projected = backend.project(test_x)
        llr = score_gplda_batch(backend.plda, projected[rows[:, 0]], projected[rows[:, 1]])
        eer, thr = compute_eer(ScoreSet(llr[genuine], llr[~genuine]))
        eers.append(100.0 * eer)
        thresholds.append(thr)
        logger.info("%s fold %d EER %.2f%%", mode, k + 1, eers[-1])
    return VerificationResult(mode, eers, thresholds, float(np.mean(eers)))


# ---------------------------------------------------------------------------
# reports

METRIC_ROWS = (
    ("precision", "Precision", 2),
    ("sensitivity", "Sensitivity", 2),
    ("specificity", "Specificity", 2),
    ("f_measure", "F-measure", 2),
    ("accuracy", "Accuracy(%)", 2),
)

MODE_TITLES = {
    "face": "Face",
    "voice_xvec": "x-Vector Speaker",
    "voice_gtg": "Gammatonegram Speaker",
    "voice": "Speaker",
    "sensor": "Sensor Fusion (gammatonegram + face)",
    "score": "Score Fusion (gammatonegram + face)",
    "score_xvec": "Score Fusion (x-vector + face)",
    "feature_gtg": "Feature Fusion (gammatonegram + face)",
    "feature_xvec": "Feature Fusion (x-vector + face)",
}


def _table(rows, k: int) -> list:
    head = "| Metrics | " + " | ".join(f"Fold {i + 1}" for i in range(k)) + " | Avg. |"
    sep = "|---|" + "---|" * (k + 1)
    return [head, sep] + ["| " + " | ".join(r) + " |" for r in rows]


def identification_tables(result: IdentificationResult):
    """(markdown, csv) pair for an identification result."""
    k = len(result.folds)
    rows, records = [], []
    for attr, label, digits in METRIC_ROWS:
        vals = [getattr(r, attr) for r in result.folds] + [getattr(result.average, attr)]
        rows.append([label] + [f"{v:.{digits}f}" for v in vals])
        records += [(attr, str(i + 1), v) for i, v in enumerate(vals[:-1])] + [(attr, "avg", vals[-1])]
    if result.mode in CITED_ACCURACY:
        rows.append(["Paper Accuracy(%)"] + ["-"] * k + [f"{CITED_ACCURACY[result.mode]:.2f}"])
    title = f"## Identification: {MODE_TITLES.get(result.mode, result.mode)}"
    md = "\n".join([title, ""] + _table(rows, k)) + "\n"
    return md, _csv(records)


def verification_tables(result: VerificationResult):
    k = len(result.eers)
    vals = list(result.eers) + [result.average]
    rows = [["EER(%)"] + [f"{v:.2f}" for v in vals]]
    if result.mode in CITED_EER:
        rows.append(["Paper EER(%)"] + ["-"] * k + [f"{CITED_EER[result.mode]:.2f}"])
    records = [("eer", str(i + 1), v) for i, v in enumerate(result.eers)] + [("eer", "avg", result.average)]
    title = f"## Verification: {MODE_TITLES.get(result.mode, result.mode)}"
    md = "\n".join([title, ""] + _table(rows, k)) + "\n"
    return md, _csv(records)


def _csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "fold", "value"])
    for metric, fold, value in records:
        w.writerow([metric, fold, f"{value:.6f}"])
    return buf.getvalue()


def tables_from_csv(text: str, task: str, mode: str) -> str:
    """Re-render the Markdown table from a CSV twin."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ["metric", "fold", "value"]:
        raise DataError("report CSV header must be metric,fold,value")
    values: dict = {}
    for row in reader:
        values.setdefault(row["metric"], {})[row["fold"]] = float(row["value"])
    if task == "verify":
        eer = values.get("eer")
        if not eer:
            raise DataError("verification CSV has no eer rows")
        folds = [eer[str(i + 1)] for i in range(len(eer) - 1)]
        return verification_tables(VerificationResult(mode, folds, [], eer["avg"]))[0]
    names = [a for a, _, _ in METRIC_ROWS]
    missing = [n for n in names if n not in values]
    if missing:
        raise DataError(f"identification CSV lacks {missing}")
    k = len(values["accuracy"]) - 1
    folds = [MetricsReport(*(values[n][str(i + 1)] for n in names)) for i in range(k)]
    avg = MetricsReport(*(values[n]["avg"] for n in names))
    return identification_tables(IdentificationResult(mode, folds, avg))[0]
