import numpy as np
import pytest

from avfusion.embeddings import Embedding, SynthConfig, synth_generate
from avfusion.errors import (
    DimMismatch,
    EmptyDataset,
    InvalidLayout,
    NotAPosterior,
    OutOfConfiguredRange,
    UtteranceMismatch,
)
from avfusion.fusion import (
    SoftmaxFusionModel,
    augment_image,
    build_composite_image,
    concat_features,
    concat_scores,
    fusion_train_config,
    predict_fusion,
    random_augment,
    sensor_fusion_features,
    train_fusion,
)


def _emb(modality, dim, uid="u1", seed=0):
    return Embedding(uid, "s", modality, np.random.default_rng(seed).standard_normal(dim))


def _centroid_predict(x_tr, y_tr, x):
    cents = np.stack([x_tr[y_tr == c].mean(axis=0) for c in np.unique(y_tr)])
    return ((x[:, None] - cents[None]) ** 2).sum(axis=2).argmin(axis=1)


# -- concatenation ----------------------------------------------------------------


@pytest.mark.parametrize("voice,dim,total", [("voice_xvec", 512, 1024), ("voice_gtg", 118, 630)])
def test_feature_fusion_sizes(voice, dim, total):
    v = concat_features(_emb(voice, dim), _emb("face", 512, seed=1))
    assert v.dim == total
    assert v.provenance == ((voice, dim), ("face", 512))


def test_feature_split_inverts():
    a, b = _emb("voice_xvec", 7), _emb("face", 5, seed=3)
    va, vb = concat_features(a, b).split()
    assert va.tobytes() == a.values.tobytes() and vb.tobytes() == b.values.tobytes()


def test_feature_fusion_mismatch():
    with pytest.raises(UtteranceMismatch):
        concat_features(_emb("voice_xvec", 4, "a"), _emb("face", 4, "b"))


def test_score_fusion():
    p = np.full(118, 1 / 118)
    assert concat_scores(p, p).dim == 236
    v = concat_scores(np.full(10, 0.1), np.full(10, 0.1))
    np.testing.assert_array_equal(v.values, np.full(20, 0.1))
    with pytest.raises(NotAPosterior):
        concat_scores(np.full(10, 0.08), np.full(10, 0.1))
    with pytest.raises(DimMismatch):
        concat_scores(np.full(10, 0.1), np.full(5, 0.2))


def test_concat_injective():
    a = concat_scores([0.5, 0.5], [1.0, 0.0]).values
    b = concat_scores([1.0, 0.0], [0.5, 0.5]).values
    assert not np.array_equal(a, b)


# -- composite images ---------------------------------------------------------------


def test_composite_face_left():
    comp = build_composite_image(np.zeros((30, 17), np.uint8), np.full((64, 100), 255, np.uint8))
    assert comp.shape == (224, 224)
    assert np.all(comp.pixels[:, :112] == 0) and np.all(comp.pixels[:, 112:] == 255)
    x, y, w, h = comp.face_region
    x2, y2, w2, h2 = comp.voice_region
    assert w * h + w2 * h2 == 224 * 224 and x + w == x2


def test_composite_face_top():
    comp = build_composite_image(np.zeros((8, 8), np.uint8), np.full((8, 8), 255, np.uint8), "face_top", 100, 60)
    assert comp.shape == (60, 100)
    assert np.all(comp.pixels[:30] == 0) and np.all(comp.pixels[30:] == 255)


def test_composite_bad_layout():
    with pytest.raises(InvalidLayout):
        build_composite_image(np.zeros((8, 8)), np.zeros((8, 8)), "diagonal")
    with pytest.raises(InvalidLayout):
        build_composite_image(np.zeros((8, 8)), np.zeros((8, 8)), "face_left", 101, 100)


# -- augmentation -------------------------------------------------------------------


def test_augment_identity():
    img = np.random.default_rng(0).integers(0, 256, (40, 40)).astype(np.uint8)
    np.testing.assert_array_equal(augment_image(img, 0, 0, 0), img)


def test_augment_shift_uniform_image():
    img = np.full((40, 40), 77, np.uint8)
    out = augment_image(img, 0, 5, 0)
    # vacated columns are zero-filled; everything that moved is unchanged
    assert np.all(out[:, 5:] == 77) and np.all(out[:, :5] == 0)
    np.testing.assert_array_equal(augment_image(np.zeros((40, 40), np.uint8), 0, 5, 0), 0)


def test_augment_shift_moves_content():
    img = np.zeros((20, 20), np.uint8)
    img[10, 10] = 200
    out = augment_image(img, 0, 3, -2)
    assert out[8, 13] == 200 and out.sum() == 200


def test_augment_rotation_round_trip():
    rr, cc = np.mgrid[0:64, 0:64]
    board = (((rr // 8) + (cc // 8)) % 2 * 255).astype(np.uint8)
    back = augment_image(augment_image(board, 20), -20)
    inside = (rr - 31.5) ** 2 + (cc - 31.5) ** 2 < 28**2  # region never rotated out of frame
    err = np.abs(back.astype(float) - board)[inside].mean()
    assert err < 0.1 * 255


def test_augment_range():
    img = np.zeros((16, 16), np.uint8)
    with pytest.raises(OutOfConfiguredRange):
        augment_image(img, 21)
    with pytest.raises(OutOfConfiguredRange):
        augment_image(img, 0, 6, 0)
    rng = np.random.default_rng(0)
    assert random_augment(img, rng).shape == (16, 16)


# -- sensor features ------------------------------------------------------------------


def test_sensor_features():
    assert sensor_fusion_features(np.zeros((224, 224), np.uint8), 16).shape == (256,)
    assert np.all(sensor_fusion_features(np.full((64, 64), 255, np.uint8), 8) == 1.0)
    img = np.zeros((64, 64), np.uint8)
    img[:, 36:] = 255
    feats = sensor_fusion_features(img, 8).reshape(8, 8)
    assert np.all(feats[:, 4] == 0.5)
    assert np.all(feats[:, :4] == 0) and np.all(feats[:, 5:] == 1)


# -- classifier ---------------------------------------------------------------------------


def _separable_fusion_set():
    ds = synth_generate(SynthConfig(n_classes=10, n_utt_per_class=30, dim_voice=8, dim_face=8, class_sep=10))
    x = np.hstack([ds.voice, ds.face])
    tr = np.arange(len(ds)) % 3 != 0
    return x, ds.labels, tr


def test_train_fusion_separable():
    x, y, tr = _separable_fusion_set()
    oracle = _centroid_predict(x[tr], y[tr], x[~tr])
    assert np.mean(oracle == y[~tr]) > 0.99
    model = train_fusion(x[tr], y[tr], fusion_train_config(0))
    pred, post = predict_fusion(model, x[~tr])
    assert np.mean(pred == y[~tr]) > 0.99
    assert np.mean(pred == oracle) >= 0.99
    np.testing.assert_allclose(post.sum(axis=1), 1, atol=1e-9)


def test_train_fusion_deterministic():
    x, y, tr = _separable_fusion_set()
    a = train_fusion(x[tr], y[tr], fusion_train_config(3, epochs=5))
    b = train_fusion(x[tr], y[tr], fusion_train_config(3, epochs=5))
    assert a.to_bytes() == b.to_bytes()


def test_uninformative_voice_scores():
    ds = synth_generate(SynthConfig(n_classes=10, n_utt_per_class=30, dim_face=8, noise_face=1.5, seed=4))
    tr = np.arange(len(ds)) % 3 != 0
    cfg = fusion_train_config(1)
    face_model = train_fusion(ds.face[tr], ds.labels[tr], cfg)
    post = face_model.posteriors(ds.face)
    uniform = np.full_like(post, 0.1)
    fused = train_fusion(np.hstack([uniform, post])[tr], ds.labels[tr], cfg)
    acc_face = np.mean(face_model.predict(ds.face[~tr])[0] == ds.labels[~tr])
    acc_fused = np.mean(fused.predict(np.hstack([uniform, post])[~tr])[0] == ds.labels[~tr])
    assert abs(acc_fused - acc_face) <= 0.01


def test_predict_fusion_ties_and_shift():
    model = SoftmaxFusionModel(np.zeros((4, 3)), np.zeros(4))
    cls, post = predict_fusion(model, np.ones(3))
    assert cls == 0
    np.testing.assert_allclose(post, 0.25)
    rng = np.random.default_rng(0)
    model = SoftmaxFusionModel(rng.standard_normal((4, 3)), rng.standard_normal(4))
    x = rng.standard_normal((20, 3))
    shifted = SoftmaxFusionModel(model.weights, model.bias + 7.5)
    assert np.array_equal(predict_fusion(model, x)[0], predict_fusion(shifted, x)[0])
    with pytest.raises(DimMismatch):
        predict_fusion(model, np.ones(5))


def test_train_fusion_errors():
    with pytest.raises(EmptyDataset):
        train_fusion(np.zeros((4, 2)), np.zeros(4, int))
    with pytest.raises(DimMismatch):
        train_fusion(np.zeros((4, 2)), np.array([0, 1, 0]))
