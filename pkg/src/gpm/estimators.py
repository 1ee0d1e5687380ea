"""Estimator wrappers around the two-stage pipeline.

`PointCloudTokenizer` fits the patch tokenizer (stage 1) and maps clouds to
token sequences; `GeneralPointModel` adds the pretrained transformer and
exposes pooled features; `PointCloudClassifier` fine-tunes a classification
head on top.  All follow the usual conventions: constructor stores
hyperparameters verbatim, `fit` learns state into trailing-underscore
attributes and returns self, transforms validate fitted state first.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from gpm import training
from gpm.config import GPMConfig
from gpm.data_io import Dataset, DatasetItem
from gpm.downstream import evaluate_classifier, finetune_classifier
from gpm.runtime import Tensor, no_grad
from gpm.validation import as_cloud_list, as_labels


def _config_from_params(params: dict) -> GPMConfig:
    keys = {f.name for f in dataclasses.fields(GPMConfig)}
    return GPMConfig(**{k: v for k, v in params.items() if k in keys})


def _as_dataset(X, y=None) -> Dataset:
    clouds = as_cloud_list(X)
    labels = as_labels(y, len(clouds)) if y is not None else [None] * len(clouds)
    names = None
    if y is not None:
        names = [str(c) for c in range(int(max(labels)) + 1)]
    items = [DatasetItem(f"cloud_{i:05d}", c, None if y is None else int(l))
             for i, (c, l) in enumerate(zip(clouds, labels))]
    return Dataset(items, names)


class PointCloudTokenizer(TransformerMixin, BaseEstimator):
    """Stage-1 tokenizer: fit trains the discrete VAE; transform returns the
    hard token sequence (n_clouds, num_patches) for each input cloud."""

    def __init__(self, vocab_size=256, code_dim=64, embed_dim=64, num_patches=32,
                 patch_points=16, points_per_cloud=1024, graph_neighbors=4,
                 conv_depth=4, dvae_steps=3000, dvae_batch=8, dvae_lr=0.0005,
                 data_seed=0, model_seed=0, sample_seed=0):
        self.vocab_size = vocab_size
        self.code_dim = code_dim
        self.embed_dim = embed_dim
        self.num_patches = num_patches
        self.patch_points = patch_points
        self.points_per_cloud = points_per_cloud
        self.graph_neighbors = graph_neighbors
        self.conv_depth = conv_depth
        self.dvae_steps = dvae_steps
        self.dvae_batch = dvae_batch
        self.dvae_lr = dvae_lr
        self.data_seed = data_seed
        self.model_seed = model_seed
        self.sample_seed = sample_seed

    def _config(self) -> GPMConfig:
        return _config_from_params(self.get_params())

    def fit(self, X, y=None):
        cfg = self._config()
        dataset = _as_dataset(X)
        self.model_, self.log_ = training.train_dvae(cfg, dataset)
        self.config_ = cfg
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this tokenizer is not fitted; call fit first")

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        clouds = as_cloud_list(X)
        cfg = self.config_
        out = np.empty((len(clouds), cfg.num_patches), dtype=np.int64)
        for i, cloud in enumerate(clouds):
            data = training.prepare_clouds(_as_dataset([cloud]), cfg)
            frozen = training.precompute_tokens(self.model_, data)
            out[i] = frozen.tokens[0]
        return out

    def reconstruct(self, X) -> np.ndarray:
        """Hard-mode reconstructions, (n_clouds, num_patches*patch_points, 3)."""
        self._check_fitted()
        clouds = as_cloud_list(X)
        cfg = self.config_
        data = training.prepare_clouds(_as_dataset(clouds), cfg)
        model = self.model_
        with no_grad():
            logits = model.token_logits(model.embed(Tensor(data.patches)))
            _, code_inputs = model.quantize(logits, tau=1.0, mode="hard")
            recon = model.decode(code_inputs, data.centers)
        return recon.data.astype(np.float64)


class GeneralPointModel(TransformerMixin, BaseEstimator):
    """Both pretraining stages; transform yields pooled features (n, 2*dim)."""

    def __init__(self, vocab_size=256, code_dim=64, embed_dim=64, num_patches=32,
                 patch_points=16, points_per_cloud=1024, graph_neighbors=4,
                 conv_depth=4, model_dim=128, depth=4,
                 heads=4, drop_path=0.1, w_ae=1.0, w_ar=1.0, dvae_steps=3000,
                 dvae_batch=8, gpm_steps=2000, gpm_batch=8, data_seed=0,
                 model_seed=0, sample_seed=0):
        self.vocab_size = vocab_size
        self.code_dim = code_dim
        self.embed_dim = embed_dim
        self.num_patches = num_patches
        self.patch_points = patch_points
        self.points_per_cloud = points_per_cloud
        self.graph_neighbors = graph_neighbors
        self.conv_depth = conv_depth
        self.model_dim = model_dim
        self.depth = depth
        self.heads = heads
        self.drop_path = drop_path
        self.w_ae = w_ae
        self.w_ar = w_ar
        self.dvae_steps = dvae_steps
        self.dvae_batch = dvae_batch
        self.gpm_steps = gpm_steps
        self.gpm_batch = gpm_batch
        self.data_seed = data_seed
        self.model_seed = model_seed
        self.sample_seed = sample_seed

    def _config(self) -> GPMConfig:
        return _config_from_params(self.get_params())

    def fit(self, X, y=None):
        cfg = self._config()
        dataset = _as_dataset(X)
        prepared = training.prepare_clouds(dataset, cfg)
        self.dvae_, _ = training.train_dvae(cfg, dataset, prepared=prepared)
        self.model_, self.log_ = training.train_gpm(cfg, dataset, self.dvae_,
                                                    prepared=prepared)
        self.config_ = cfg
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this model is not fitted; call fit first")

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        cfg = self.config_
        data = training.prepare_clouds(_as_dataset(as_cloud_list(X)), cfg)
        frozen = training.precompute_tokens(self.dvae_, data)
        self.model_.eval()
        with no_grad():
            feats = self.model_.classification_feature(
                Tensor(frozen.embeddings), data.centers)
        return feats.data.astype(np.float64)


class PointCloudClassifier(ClassifierMixin, BaseEstimator):
    """Fine-tunes a pretrained backbone (or trains one) for classification."""

    def __init__(self, backbone=None, finetune_steps=500, finetune_batch=8,
                 finetune_lr=0.0005, weight_decay=0.05, seed=0):
        self.backbone = backbone
        self.finetune_steps = finetune_steps
        self.finetune_batch = finetune_batch
        self.finetune_lr = finetune_lr
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y):
        clouds = as_cloud_list(X)
        y = as_labels(y, len(clouds))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        backbone = self.backbone
        if backbone is None:
            backbone = GeneralPointModel()
        if not hasattr(backbone, "model_"):
            backbone.fit(clouds)
        self.backbone_ = backbone
        dataset = _as_dataset(clouds, encoded)
        self.model_, self.head_, self.metrics_ = finetune_classifier(
            backbone.model_, backbone.dvae_, backbone.config_,
            dataset, dataset, steps=self.finetune_steps,
            batch=self.finetune_batch, lr=self.finetune_lr,
            weight_decay=self.weight_decay, seed=self.seed)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this classifier is not fitted; call fit first")

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        cfg = self.backbone_.config_
        data = training.prepare_clouds(_as_dataset(as_cloud_list(X)), cfg)
        frozen = training.precompute_tokens(self.backbone_.dvae_, data)
        self.model_.eval()
        self.head_.eval()
        with no_grad():
            feats = self.model_.classification_feature(
                Tensor(frozen.embeddings), data.centers)
            logits = self.head_(feats)
        return logits.data.astype(np.float64)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)  # fitted check runs before classes_
        return self.classes_[np.argmax(scores, axis=1)]

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)
