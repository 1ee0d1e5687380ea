"""Downstream evaluation: classification fine-tuning and few-shot episodes.

Classification runs full clouds through the bidirectional encoder only (no
masking, no causal segment); the feature is the [CLS] output concatenated
with a max-pool over patch outputs, fed to a two-layer head with dropout 0.5
before the final affine.  The patch embedder stays frozen (its outputs are
precomputed per cloud); the transformer and head train end to end.
"""

from __future__ import annotations

import numpy as np

from gpm import data_io
from gpm.config import GPMConfig
from gpm.dvae import DiscreteVAE
from gpm.model import GPMTransformer
from gpm.runtime import (
    AdamW,
    Linear,
    Module,
    Tensor,
    clip_global_grad_norm,
    cosine_schedule,
    cross_entropy,
    dropout,
    gelu,
    no_grad,
)
from gpm.training import (
    PreparedData,
    build_gpm,
    precompute_tokens,
    prepare_clouds,
)

_CLS_BATCH, _CLS_DROP = 23, 29


class ClassifierHead(Module):
    """Two affine layers, GELU between, dropout 0.5 before the final one."""

    def __init__(self, in_dim: int, n_classes: int, rng: np.random.Generator,
                 hidden: int | None = None, drop: float = 0.5):
        super().__init__()
        hidden = hidden or in_dim // 2
        self.drop = drop
        self.lin1 = Linear(in_dim, hidden, rng)
        self.lin2 = Linear(hidden, n_classes, rng)

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        h = gelu(self.lin1(x))
        h = dropout(h, self.drop, rng, self.training)
        return self.lin2(h)


def _frozen_embeddings(dvae: DiscreteVAE, data: PreparedData) -> np.ndarray:
    return precompute_tokens(dvae, data).embeddings


def _logits_for(bundle_gpm: GPMTransformer, head: ClassifierHead,
                embeddings: np.ndarray, centers: np.ndarray,
                depth_rng=None, drop_rng=None) -> Tensor:
    feats = bundle_gpm.classification_feature(
        Tensor(embeddings.astype(np.float32)), centers, depth_rng)
    return head(feats, drop_rng)


def evaluate_classifier(gpm: GPMTransformer, head: ClassifierHead,
                        embeddings: np.ndarray, centers: np.ndarray,
                        labels: np.ndarray, batch: int = 32) -> float:
    gpm.eval()
    head.eval()
    hits = 0
    with no_grad():
        for lo in range(0, len(labels), batch):
            hi = min(lo + batch, len(labels))
            logits = _logits_for(gpm, head, embeddings[lo:hi], centers[lo:hi])
            hits += int((np.argmax(logits.data, axis=1) == labels[lo:hi]).sum())
    return hits / len(labels)


def finetune_classifier(gpm: GPMTransformer, dvae: DiscreteVAE, cfg: GPMConfig,
                        train_set: data_io.Dataset, test_set: data_io.Dataset,
                        steps: int = 1000, batch: int = 8, lr: float = 0.0005,
                        weight_decay: float = 0.05, seed: int = 0,
                        eval_every: int | None = None,
                        ) -> tuple[GPMTransformer, ClassifierHead, dict]:
    """Fine-tune a private copy of the transformer plus a fresh head.

    Returns (tuned transformer, head, metrics).  metrics carries train/test
    accuracy, the untrained-baseline test accuracy, and an accuracy curve if
    eval_every is set.
    """
    n_classes = len(train_set.class_names)
    train_data = prepare_clouds(train_set, cfg)
    test_data = prepare_clouds(test_set, cfg)
    train_h = _frozen_embeddings(dvae, train_data)
    test_h = _frozen_embeddings(dvae, test_data)
    y_train = train_set.labels()
    y_test = test_set.labels()

    tuned = build_gpm(cfg)
    tuned.load_state_dict(gpm.state_dict())  # private copy of the backbone
    head_rng = np.random.default_rng(seed)
    head = ClassifierHead(2 * cfg.model_dim, n_classes, head_rng)

    baseline = evaluate_classifier(tuned, head, test_h, test_data.centers, y_test)

    # the classification graph never touches the PartB machinery or the two
    # token heads; leaving them in the optimizer would trip its grad check
    unused = ("mask_token", "start_token", "ae_head.", "ar_head.")
    params = [(n, p) for n, p in tuned.named_parameters()
              if not n.startswith(unused)] + \
        [(f"head.{n}", p) for n, p in head.named_parameters()]
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    n = len(y_train)
    curve = []
    for step in range(steps):
        tuned.train()
        head.train()
        batch_rng = np.random.default_rng([seed, _CLS_BATCH, step])
        idx = batch_rng.integers(0, n, batch)
        drop_rng = np.random.default_rng([seed, _CLS_DROP, step])
        logits = _logits_for(tuned, head, train_h[idx], train_data.centers[idx],
                             depth_rng=drop_rng, drop_rng=drop_rng)
        loss = cross_entropy(logits, y_train[idx])
        tuned.zero_grad()
        head.zero_grad()
        loss.backward()
        clip_global_grad_norm([p for _, p in params], cfg.clip_norm)
        opt.lr = cosine_schedule(step, steps, lr)
        opt.step()
        if eval_every and (step + 1) % eval_every == 0:
            acc = evaluate_classifier(tuned, head, test_h, test_data.centers, y_test)
            curve.append((step + 1, acc))

    train_acc = evaluate_classifier(tuned, head, train_h, train_data.centers, y_train)
    test_acc = evaluate_classifier(tuned, head, test_h, test_data.centers, y_test)
    metrics = {
        "baseline_test_accuracy": baseline,
        "train_accuracy": train_acc,
        "test_accuracy": test_acc,
        "steps": steps,
        "curve": curve,
    }
    return tuned, head, metrics


# ---------------------------------------------------------------------------
# few-shot protocol
# ---------------------------------------------------------------------------

QUERY_PER_CLASS = 20


def few_shot_episode(dataset: data_io.Dataset, way: int, shot: int, seed: int = 0,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Sample way classes and shot+20 items each; first `shot` of each class
    form the support set, the remaining 20 the query set.  Returns index
    arrays into dataset.items; the two sets partition the sampled items."""
    labels = dataset.labels()
    classes = np.unique(labels)
    if len(classes) < way:
        raise ValueError(f"need {way} classes, dataset has {len(classes)}")
    rng = np.random.default_rng(seed)
    picked = rng.choice(classes, size=way, replace=False)
    support, query = [], []
    need = shot + QUERY_PER_CLASS
    for c in picked:
        pool = np.flatnonzero(labels == c)
        if len(pool) < need:
            name = dataset.class_names[c] if dataset.class_names else str(c)
            raise ValueError(
                f"class '{name}' has {len(pool)} items, episode needs {need}")
        chosen = rng.choice(pool, size=need, replace=False)
        support.extend(chosen[:shot])
        query.extend(chosen[shot:])
    return np.array(support), np.array(query)


def _subset(dataset: data_io.Dataset, idx: np.ndarray,
            class_map: dict[int, int]) -> data_io.Dataset:
    names = [dataset.class_names[c] for c in sorted(class_map, key=class_map.get)] \
        if dataset.class_names else [str(c) for c in class_map]
    items = [data_io.DatasetItem(dataset.items[i].cloud_id,
                                 dataset.items[i].cloud,
                                 class_map[dataset.items[i].label])
             for i in idx]
    return data_io.Dataset(items, names)


def few_shot_eval(gpm: GPMTransformer, dvae: DiscreteVAE, cfg: GPMConfig,
                  dataset: data_io.Dataset, way: int = 5, shot: int = 10,
                  runs: int = 10, steps: int = 200, batch: int = 10,
                  lr: float = 0.0005, seed: int = 0) -> dict:
    """Fine-tune on each episode's support set, score its query set; report
    mean and std over `runs` independent episodes."""
    accs = []
    for run in range(runs):
        sup_idx, qry_idx = few_shot_episode(dataset, way, shot, seed=seed + run)
        episode_classes = sorted({dataset.items[i].label for i in sup_idx})
        class_map = {c: i for i, c in enumerate(episode_classes)}
        support = _subset(dataset, sup_idx, class_map)
        query = _subset(dataset, qry_idx, class_map)
        _, _, metrics = finetune_classifier(
            gpm, dvae, cfg, support, query, steps=steps, batch=batch,
            lr=lr, seed=seed * 1000 + run)
        accs.append(metrics["test_accuracy"])
    accs = np.array(accs)
    return {
        "mean_accuracy": float(accs.mean()),
        "std_accuracy": float(accs.std()),
        "run_accuracies": [float(a) for a in accs],
        "way": way, "shot": shot, "runs": runs,
    }
