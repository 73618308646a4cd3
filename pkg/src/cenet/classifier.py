"""Binary "answer is historical" classifier and the entity mask it induces."""

from __future__ import annotations

import logging
import math
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .history import QueryContext
from .model import HyperParams, ModelParams, embed_queries, epoch_order

logger = logging.getLogger(__name__)

THRESHOLD = 0.5


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def classifier_logits(V: np.ndarray, params: ModelParams) -> np.ndarray:
    return V @ params.clf_w.data[0] + params.clf_b.data[0]


def predict_from_embeddings(V: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels (probability >= 0.5, ties to True) and probabilities."""
    prob = _sigmoid(classifier_logits(V, params))
    return prob >= THRESHOLD, prob


def predict_label(ctx: QueryContext, params: ModelParams, lam: float) -> tuple[bool, float]:
    V = embed_queries([ctx], params, lam)
    label, prob = predict_from_embeddings(V, params)
    return bool(label[0]), float(prob[0])


def build_mask(H, predicted: bool, num_entities: int) -> np.ndarray:
    """Boolean vector marking entities whose history membership equals ``predicted``."""
    in_history = np.zeros(num_entities, dtype=bool)
    ids = np.fromiter(H, dtype=np.int64) if not isinstance(H, np.ndarray) else H
    in_history[ids] = True
    return in_history if predicted else ~in_history


def _accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float((pred == labels).mean()) if len(labels) else float("nan")


def _init_classifier(params: ModelParams, seed: int) -> None:
    rng = np.random.default_rng([seed, 2])
    bound = 1.0 / math.sqrt(params.d)
    params.clf_w.data[...] = rng.uniform(-bound, bound, size=params.clf_w.shape)
    params.clf_b.data[...] = rng.uniform(-bound, bound, size=params.clf_b.shape)


def _fit(V: np.ndarray, labels: np.ndarray, params: ModelParams, hp: HyperParams) -> list[float]:
    for p in params.classifier():
        p.unfreeze()
    optimizer = Adam(params.classifier(), lr=hp.lr)
    targets = labels.astype(np.float64)[:, None]
    history = []
    for epoch in range(hp.stage2_epochs):
        order = epoch_order(len(V), hp.seed + 1, epoch)
        total = 0.0
        for lo in range(0, len(order), hp.batch_size):
            idx = order[lo:lo + hp.batch_size]
            logits = ad.linear(params.clf_w, params.clf_b, Tensor(V[idx]))
            loss = ad.bce_with_logits(logits, targets[idx])
            ad.backward(loss)
            optimizer.step()
            total += loss.item()
        history.append(total / len(V))
    for p in params.classifier():
        p.freeze()
    params.has_classifier = True
    return history


def fit_classifier_on_embeddings(V: np.ndarray, labels, params: ModelParams, hp: HyperParams) -> float:
    """Train only the classifier on given embeddings; returns training accuracy."""
    labels = np.asarray(labels, dtype=bool)
    _init_classifier(params, hp.seed)
    _fit(np.asarray(V, dtype=np.float64), labels, params, hp)
    return _accuracy(predict_from_embeddings(V, params)[0], labels)


def train_stage2(contexts: list[QueryContext], params: ModelParams, hp: HyperParams,
                 valid_contexts: list[QueryContext] | None = None) -> dict:
    """Fit the linear classifier on frozen query embeddings with summed BCE.

    Every stage-1 parameter is frozen for the duration and stays frozen.
    """
    if not contexts:
        raise ValueError("train_stage2 needs at least one context")
    hp.validate()
    for p in params.stage1():
        p.freeze()
    if not params.has_classifier:
        _init_classifier(params, hp.seed)

    started = time.perf_counter()
    V = embed_queries(contexts, params, hp.lam, hp.batch_size)
    labels = np.array([c.label for c in contexts], dtype=bool)
    history = _fit(V, labels, params, hp)

    pred, _ = predict_from_embeddings(V, params)
    positive_rate = float(labels.mean())
    metrics = {
        "train_accuracy": _accuracy(pred, labels),
        "train_positive_rate": positive_rate,
        "majority_baseline": max(positive_rate, 1.0 - positive_rate),
        "epoch_mean_bce": history,
        "seconds": time.perf_counter() - started,
    }
    if valid_contexts:
        Vv = embed_queries(valid_contexts, params, hp.lam, hp.batch_size)
        lv = np.array([c.label for c in valid_contexts], dtype=bool)
        metrics["valid_accuracy"] = _accuracy(predict_from_embeddings(Vv, params)[0], lv)
        metrics["valid_positive_rate"] = float(lv.mean())
    logger.info("stage2 train accuracy %.4f (majority %.4f)", metrics["train_accuracy"], metrics["majority_baseline"])
    return metrics
