import numpy as np
import pytest

from avfusion.embeddings import (
    Embedding,
    SynthConfig,
    VoiceNetSpec,
    build_voicenet,
    crop_frames,
    dataset_digest,
    extract_gtg_embedding,
    extract_xvector,
    gtg_stats_vector,
    load_face_embedding,
    save_face_embedding,
    synth_generate,
    synth_tone_samples,
    train_gtg_classifier,
    train_voicenet,
)
from avfusion.errors import CorruptFile, DimMismatch, EmptyDataset, InvalidConfig, InvalidSpec, TooShort
from avfusion.frontend import Gammatonegram
from avfusion.nn import Dense, Softmax, TrainConfig

SMALL = dict(conv_widths=(8, 8, 8, 8, 12), embedding_dim=16, hidden_dim=10)


def _nearest_centroid_accuracy(x_tr, y_tr, x_te, y_te):
    classes = np.unique(y_tr)
    cents = np.stack([x_tr[y_tr == c].mean(axis=0) for c in classes])
    d = ((x_te[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return np.mean(classes[d.argmin(axis=1)] == y_te)


# -- VoiceNet -------------------------------------------------------------------


def test_voicenet_topology_118():
    net = build_voicenet(VoiceNetSpec(n_classes=118, **SMALL), seed=0)
    kinds = [type(l).__name__ for l in net.layers]
    assert kinds.count("Conv1d") == 5 and kinds.count("StatPool") == 1 and kinds.count("Dense") == 3
    assert net.layers[-2] == Dense(10, 118) and net.layers[-1] == Softmax()
    assert net.output_dim == 118


def test_voicenet_param_count_deterministic():
    a = build_voicenet(VoiceNetSpec(**SMALL), seed=0)
    b = build_voicenet(VoiceNetSpec(**SMALL), seed=5)
    assert a.n_params == b.n_params
    convs = (24 * 8 * 5 + 8) + 2 * (8 * 8 * 3 + 8) + (8 * 8 + 8) + (8 * 12 + 12)
    dense = (24 * 16 + 16) + (16 * 10 + 10) + (10 * 118 + 118)
    expected = convs + dense
    assert a.n_params == expected


def test_voicenet_four_convs_invalid():
    with pytest.raises(InvalidSpec):
        build_voicenet(VoiceNetSpec(conv_widths=(8, 8, 8, 8), kernels=(5, 3, 3, 1), dilations=(1, 2, 3, 1)))


def test_xvector_default_length_and_determinism():
    net = build_voicenet(VoiceNetSpec(conv_widths=(8, 8, 8, 8, 12)), seed=0)
    frames = np.random.default_rng(0).standard_normal((40, 24))
    a = extract_xvector(net, frames, "u1", "s1")
    b = extract_xvector(net, frames, "u1", "s1")
    assert a.dim == 512 and a.modality == "voice_xvec"
    assert a.values.tobytes() == b.values.tobytes()


def test_xvector_too_short():
    net = build_voicenet(VoiceNetSpec(**SMALL), seed=0)
    with pytest.raises(TooShort):
        extract_xvector(net, np.zeros((net.receptive_field - 1, 24)))


def test_xvector_permutation_invariant_with_width_one_kernels():
    spec = VoiceNetSpec(kernels=(1,) * 5, dilations=(1,) * 5, **SMALL)
    net = build_voicenet(spec, seed=2)
    frames = np.random.default_rng(1).standard_normal((30, 24))
    perm = np.random.default_rng(2).permutation(30)
    a = extract_xvector(net, frames).values
    b = extract_xvector(net, frames[perm]).values
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_train_voicenet_runs():
    ds = synth_generate(SynthConfig(n_classes=3, n_utt_per_class=4, dim_voice=6, n_frames=20))
    spec = VoiceNetSpec(n_classes=3, **SMALL)
    res = train_voicenet(ds.voice_frames, ds.labels, spec, TrainConfig(epochs=2, batch_size=4))
    assert res.network.layers[0].in_ch == 6 and res.epochs_run == 2


def test_crop_frames():
    frames = [np.zeros((5, 2)), np.ones((7, 2))]
    assert crop_frames(frames).shape == (2, 5, 2)
    with pytest.raises(TooShort):
        crop_frames(frames, 6)
    with pytest.raises(EmptyDataset):
        crop_frames([])


# -- gammatonegram branch -------------------------------------------------------------


def test_gtg_stats_constant_and_shape():
    gtg = Gammatonegram(np.full((64, 30), -80.0), np.arange(64.0))
    v = gtg_stats_vector(gtg)
    assert v.shape == (128,)
    assert np.all(v[:64] == -80) and np.all(v[64:] == 0)


def test_gtg_stats_two_pass_oracle():
    vals = np.random.default_rng(0).normal(-40, 10, (5, 33))
    v = gtg_stats_vector(vals)
    for c in range(5):
        m = sum(vals[c]) / 33
        s = np.sqrt(sum((x - m) ** 2 for x in vals[c]) / 33)
        assert abs(v[c] - m) < 1e-10 and abs(v[5 + c] - s) < 1e-10


def test_gtg_classifier_embedding():
    ds = synth_generate(SynthConfig(n_classes=10, n_utt_per_class=20, dim_voice=12, class_sep=3, noise_voice=0.5))
    tr = np.arange(len(ds)) % 4 != 0
    assert _nearest_centroid_accuracy(ds.voice[tr], ds.labels[tr], ds.voice[~tr], ds.labels[~tr]) >= 0.95
    cfg = TrainConfig(epochs=60, batch_size=16, lr_start=0.05, lr_end=0.005)
    model = train_gtg_classifier(ds.voice[tr], ds.labels[tr], cfg)
    emb = [extract_gtg_embedding(model, v) for v in ds.voice[~tr]]
    assert all(e.dim == 10 and e.modality == "voice_gtg" for e in emb)
    pred = np.array([e.values.argmax() for e in emb])
    assert np.mean(pred == ds.labels[~tr]) >= 0.95


def test_gtg_classifier_needs_two_classes():
    with pytest.raises(EmptyDataset):
        train_gtg_classifier(np.zeros((4, 3)), np.zeros(4, int), TrainConfig())


def test_gtg_embedding_length_118():
    model = train_gtg_classifier(
        np.random.default_rng(0).standard_normal((236, 4)), np.arange(236) % 118, TrainConfig(epochs=1), 118
    )
    assert extract_gtg_embedding(model, np.zeros(4)).dim == 118


# -- face embeddings --------------------------------------------------------------


def test_face_round_trip(tmp_path):
    v = np.random.default_rng(0).standard_normal(512).astype(np.float32)
    save_face_embedding(tmp_path / "f.fbem", v)
    e = load_face_embedding(tmp_path / "f.fbem")
    assert e.dim == 512 and e.modality == "face"
    assert e.values.astype(np.float32).tobytes() == v.tobytes()
    with pytest.raises(DimMismatch):
        load_face_embedding(tmp_path / "f.fbem", expected_dim=128)


def test_face_header_dim_zero(tmp_path):
    (tmp_path / "z.fbem").write_bytes(b"FBEM" + (0).to_bytes(4, "little"))
    with pytest.raises(CorruptFile):
        load_face_embedding(tmp_path / "z.fbem")


def test_embedding_rejects_non_finite():
    with pytest.raises(ValueError):
        Embedding("u", "s", "face", [1.0, np.nan])


# -- synthetic data -------------------------------------------------------------------


def test_synth_zero_noise():
    ds = synth_generate(SynthConfig(n_classes=4, n_utt_per_class=5, noise_voice=0, noise_face=0))
    for c in range(4):
        rows = ds.face[ds.labels == c]
        assert np.all(rows == rows[0])
    tr = np.arange(len(ds)) % 2 == 0
    assert _nearest_centroid_accuracy(ds.face[tr], ds.labels[tr], ds.face[~tr], ds.labels[~tr]) == 1.0


def test_synth_deterministic():
    cfg = SynthConfig(n_classes=3, n_utt_per_class=4, n_frames=10)
    assert dataset_digest(synth_generate(cfg)) == dataset_digest(synth_generate(cfg))
    other = SynthConfig(n_classes=3, n_utt_per_class=4, n_frames=10, seed=1)
    assert dataset_digest(synth_generate(cfg)) != dataset_digest(synth_generate(other))


def test_synth_large_separation():
    ds = synth_generate(SynthConfig(n_classes=10, n_utt_per_class=40, class_sep=10, noise_voice=1, noise_face=1))
    tr = np.arange(len(ds)) % 2 == 0
    for x in (ds.voice, ds.face):
        assert _nearest_centroid_accuracy(x[tr], ds.labels[tr], x[~tr], ds.labels[~tr]) > 0.99


def test_synth_conditional_independence():
    cfg = SynthConfig(n_classes=10, n_utt_per_class=500, dim_voice=4, dim_face=4)
    ds = synth_generate(cfg)

    def residuals(x):
        means = np.stack([x[ds.labels == c].mean(axis=0) for c in range(10)])
        return x - means[ds.labels]

    rv, rf = residuals(ds.voice), residuals(ds.face)
    assert abs(np.corrcoef(rv[:, 0], rf[:, 0])[0, 1]) < 0.05
    corr = synth_generate(SynthConfig(**{**cfg.__dict__, "cross_modal_corr": 0.5}))
    rv2 = corr.voice - np.stack([corr.voice[corr.labels == c].mean(axis=0) for c in range(10)])[corr.labels]
    rf2 = corr.face - np.stack([corr.face[corr.labels == c].mean(axis=0) for c in range(10)])[corr.labels]
    assert abs(np.corrcoef(rv2[:, 0], rf2[:, 0])[0, 1] - 0.5) < 0.05


def test_synth_images_and_ids():
    ds = synth_generate(SynthConfig(n_classes=12, n_utt_per_class=2))
    assert ds.face_images[0].shape == (32, 32) and ds.face_images[0].dtype == np.uint8
    assert ds.utt_ids[0] == "spk00-utt0000" and ds.class_names[-1] == "spk11"


def test_synth_invalid():
    with pytest.raises(InvalidConfig):
        synth_generate(SynthConfig(cross_modal_corr=1.5))
    with pytest.raises(InvalidConfig):
        synth_generate(SynthConfig(dim_voice=1))


def test_synth_tone_samples():
    x = synth_tone_samples(np.zeros(8), 16000, 0.5, seed=0)
    assert x.size == 16000 * 0.7
    assert np.abs(x).max() <= 1.0
    assert np.abs(x[:1600]).max() < 1e-2  # leading pad is near-silent
