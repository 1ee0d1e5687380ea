"""Estimator wrappers: sklearn conventions plus end-to-end tiny fits."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gpm.estimators import (
    GeneralPointModel,
    PointCloudClassifier,
    PointCloudTokenizer,
)

TINY = dict(vocab_size=32, code_dim=8, embed_dim=8, num_patches=8,
            patch_points=8, points_per_cloud=64, graph_neighbors=4,
            conv_depth=2, dvae_steps=2, dvae_batch=2)

TINY_GPM = dict(TINY, model_dim=16, depth=2, heads=2, gpm_steps=2, gpm_batch=2)


def cloud_batch(n=6, points=64, seed=0):
    rng = np.random.default_rng(seed)
    clouds = []
    for _ in range(n):
        c = rng.normal(size=(points, 3))
        clouds.append(c / np.abs(c).max())
    return clouds


# ---------------------------------------------------------------------------
# conventions
# ---------------------------------------------------------------------------

def test_params_roundtrip_and_clone():
    est = PointCloudTokenizer(**TINY)
    params = est.get_params()
    for k, v in TINY.items():
        assert params[k] == v
    twin = clone(est)
    assert twin.get_params() == params
    assert est.set_params(vocab_size=64) is est
    assert est.get_params()["vocab_size"] == 64


def test_constructor_defers_validation_to_fit():
    est = PointCloudTokenizer(vocab_size=-5)  # stored verbatim, no complaint
    assert est.vocab_size == -5
    with pytest.raises(ValueError, match="vocab_size"):
        est.fit(cloud_batch(2))


def test_unfitted_transform_raises():
    with pytest.raises(NotFittedError):
        PointCloudTokenizer(**TINY).transform(cloud_batch(1))
    with pytest.raises(NotFittedError):
        PointCloudTokenizer(**TINY).reconstruct(cloud_batch(1))
    with pytest.raises(NotFittedError):
        GeneralPointModel(**TINY_GPM).transform(cloud_batch(1))
    with pytest.raises(NotFittedError):
        PointCloudClassifier().predict(cloud_batch(1))


def test_input_validation_messages():
    est = PointCloudTokenizer(**TINY)
    with pytest.raises(ValueError, match=r"X\[1\] must have shape"):
        est.fit([np.zeros((8, 3)), np.zeros((8, 2))])
    with pytest.raises(ValueError, match="non-finite"):
        est.fit([np.full((8, 3), np.nan)])


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

def test_tokenizer_fit_transform():
    clouds = cloud_batch(4)
    est = PointCloudTokenizer(**TINY)
    assert est.fit(clouds) is est
    toks = est.transform(clouds)
    assert toks.shape == (4, 8)
    assert toks.dtype == np.int64
    assert (toks >= 0).all() and (toks < 32).all()
    np.testing.assert_array_equal(toks, est.transform(clouds))
    # refitting from scratch with the same seeds reproduces the mapping
    again = PointCloudTokenizer(**TINY).fit(clouds).transform(clouds)
    np.testing.assert_array_equal(toks, again)


def test_tokenizer_accepts_single_cloud_and_stacked_batch():
    clouds = cloud_batch(3)
    est = PointCloudTokenizer(**TINY).fit(clouds)
    single = est.transform(clouds[0])
    assert single.shape == (1, 8)
    stacked = est.transform(np.stack(clouds))
    np.testing.assert_array_equal(stacked, est.transform(clouds))


def test_tokenizer_reconstruct_shape():
    clouds = cloud_batch(2)
    est = PointCloudTokenizer(**TINY).fit(clouds)
    recon = est.reconstruct(clouds)
    assert recon.shape == (2, 64, 3)
    assert np.isfinite(recon).all()


# ---------------------------------------------------------------------------
# pretrained backbone
# ---------------------------------------------------------------------------

def test_backbone_features():
    clouds = cloud_batch(4)
    est = GeneralPointModel(**TINY_GPM)
    est.fit(clouds)
    feats = est.transform(clouds)
    assert feats.shape == (4, 32)  # [CLS] concat max-pool, 2 * model_dim
    assert np.isfinite(feats).all()
    np.testing.assert_array_equal(feats, est.transform(clouds))


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

def test_classifier_with_prefit_backbone():
    clouds = cloud_batch(6)
    labels = np.array([7, 7, 7, 9, 9, 9])  # arbitrary label values survive
    backbone = GeneralPointModel(**TINY_GPM).fit(clouds)
    clf = PointCloudClassifier(backbone=backbone, finetune_steps=2,
                               finetune_batch=2)
    assert clf.fit(clouds, labels) is clf
    np.testing.assert_array_equal(clf.classes_, [7, 9])
    pred = clf.predict(clouds)
    assert pred.shape == (6,)
    assert set(pred) <= {7, 9}
    proba = clf.predict_proba(clouds)
    assert proba.shape == (6, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    scores = clf.decision_function(clouds)
    np.testing.assert_array_equal(clf.classes_[np.argmax(scores, axis=1)], pred)
    assert 0.0 <= clf.score(clouds, labels) <= 1.0


def test_classifier_fits_an_unfitted_backbone():
    clouds = cloud_batch(4)
    labels = np.array([0, 0, 1, 1])
    backbone = GeneralPointModel(**TINY_GPM)
    clf = PointCloudClassifier(backbone=backbone, finetune_steps=1,
                               finetune_batch=2)
    clf.fit(clouds, labels)
    assert hasattr(backbone, "model_")  # the backbone got trained in passing
    assert clf.metrics_["steps"] == 1


def test_classifier_label_validation():
    clouds = cloud_batch(3)
    backbone = GeneralPointModel(**TINY_GPM)
    clf = PointCloudClassifier(backbone=backbone)
    with pytest.raises(ValueError, match="shape"):
        clf.fit(clouds, np.array([0, 1]))
    with pytest.raises(ValueError, match="integer"):
        clf.fit(clouds, np.array([0.5, 1.0, 0.25]))
