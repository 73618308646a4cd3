"""Mask-based inference, filtered ranking and the ablation matrix."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .classifier import predict_from_embeddings
from .data import Quadruple, known_objects
from .history import QueryContext, history_mask
from .model import Batch, HyperParams, ModelParams, embed_queries, entity_distribution

MASK_MODES = ("none", "hard", "soft", "random", "ground_truth")
FILTER_MODES = ("raw", "static", "time_aware")
HITS_AT = (1, 3, 10)


class EvaluationError(ValueError):
    pass


@dataclass
class InferenceConfig:
    mask_mode: str = "soft"
    filter_mode: str = "static"
    seed: int = 0

    def validate(self) -> "InferenceConfig":
        if self.mask_mode not in MASK_MODES:
            raise EvaluationError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.filter_mode not in FILTER_MODES:
            raise EvaluationError(f"filter_mode must be one of {FILTER_MODES}, got {self.filter_mode!r}")
        return self

    @property
    def needs_classifier(self) -> bool:
        return self.mask_mode in ("hard", "soft")


# ---------------------------------------------------------------- distribution and masks


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def combined_distribution(h_his: np.ndarray, h_nhis: np.ndarray) -> np.ndarray:
    return 0.5 * (_softmax(np.asarray(h_his, dtype=np.float64)) + _softmax(np.asarray(h_nhis, dtype=np.float64)))


def apply_mask(P: np.ndarray, B: np.ndarray, mode: str) -> np.ndarray:
    """Combine a distribution with a boolean entity mask.

    Works on a single vector or a ``[batch, |E|]`` block. ``hard`` multiplies
    by the mask and falls back to ``P`` for an all-false row; ``soft``
    multiplies by the softmax of the 0/1 mask. ``random`` and
    ``ground_truth`` expect the caller to have built ``B`` and apply the hard
    rule.
    """
    P = np.asarray(P, dtype=np.float64)
    if mode == "none":
        return P
    B = np.asarray(B, dtype=bool)
    if mode == "soft":
        return P * _softmax(B.astype(np.float64))
    if mode in ("hard", "random", "ground_truth"):
        out = P * B
        empty = ~B.any(axis=-1)
        if np.any(empty):
            out = np.where(np.expand_dims(empty, -1), P, out) if out.ndim > 1 else P.copy()
        return out
    raise EvaluationError(f"unknown mask mode {mode!r}")


def predict(scores: np.ndarray) -> int:
    """Index of the highest score; ties go to the smallest id."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise EvaluationError("cannot predict from an empty score vector")
    return int(np.argmax(scores))


def filtered_rank(scores: np.ndarray, true_o: int, known_true: Iterable[int] = (), filter_mode: str = "static") -> int:
    """1 + number of surviving entities scoring strictly higher than ``true_o``.

    For ``raw`` nothing is removed; otherwise ``known_true`` (minus the
    target) is removed. The caller picks the static or per-granule set.
    """
    scores = np.asarray(scores, dtype=np.float64)
    greater = scores > scores[true_o]
    if filter_mode != "raw":
        ids = [o for o in known_true if o != true_o]
        if ids:
            greater[np.asarray(ids, dtype=np.int64)] = False
    return 1 + int(greater.sum())


# ---------------------------------------------------------------- reports


def rank_metrics(ranks) -> dict:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        return {"count": 0}
    out = {"count": int(ranks.size), "mrr": float(np.mean(1.0 / ranks))}
    for k in HITS_AT:
        out[f"hits@{k}"] = float(np.mean(ranks <= k))
    return out


@dataclass
class RankReport:
    ranks: np.ndarray
    is_subject: np.ndarray
    config: dict
    classifier_accuracy: float | None = None
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def combined(self) -> dict:
        return rank_metrics(self.ranks)

    @property
    def mrr(self) -> float:
        return self.combined["mrr"]

    def hits(self, k: int) -> float:
        return self.combined[f"hits@{k}"]

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "diagnostic_only": self.config.get("mask_mode") == "ground_truth",
            "object": rank_metrics(self.ranks[~self.is_subject]),
            "subject": rank_metrics(self.ranks[self.is_subject]),
            "combined": self.combined,
            "classifier_accuracy": self.classifier_accuracy,
            "seconds": self.seconds,
            **self.extra,
        }


class FilterIndex:
    """Known answers for filtered ranking, per ``(s, p)`` or per ``(s, p, t)``."""

    def __init__(self, facts: Iterable[Quadruple], mode: str):
        self.mode = mode
        facts = list(facts)
        self._static = known_objects(facts) if mode == "static" else {}
        self._timed = known_objects(facts, time_aware=True) if mode == "time_aware" else {}

    def known(self, ctx: QueryContext) -> set[int]:
        if self.mode == "static":
            return self._static.get((ctx.s, ctx.p), set())
        if self.mode == "time_aware":
            return self._timed.get((ctx.s, ctx.p, ctx.t), set())
        return set()


def evaluate(contexts: list[QueryContext], params: ModelParams, hp: HyperParams, config: InferenceConfig,
             facts: Iterable[Quadruple], num_relations_raw: int, batch_size: int = 1024,
             dump_top_k: int = 0, dump_file=None) -> RankReport:
    """Rank the true answer of every context and aggregate filtered metrics.

    ``facts`` are all inverse-augmented quadruples used to build the filter.
    """
    config.validate()
    if not contexts:
        raise EvaluationError("no queries to evaluate")
    if config.needs_classifier and not params.has_classifier:
        raise EvaluationError(f"mask mode {config.mask_mode!r} needs a trained classifier; checkpoint has none")
    started = time.perf_counter()
    filt = FilterIndex(facts, config.filter_mode)
    rng = np.random.default_rng(config.seed)
    num_e = params.num_entities
    ranks = np.zeros(len(contexts), dtype=np.int64)
    correct = total_pred = 0

    for lo in range(0, len(contexts), batch_size):
        chunk = contexts[lo:lo + batch_size]
        batch = Batch.from_contexts(chunk, hp.lam, num_e, params.num_relations)
        P = entity_distribution(batch, params, hp.heads)
        in_hist = history_mask(chunk, num_e)
        if config.mask_mode in ("hard", "soft"):
            V = embed_queries(chunk, params, hp.lam, batch_size)
            predicted, _ = predict_from_embeddings(V, params)
            correct += int((predicted == batch.labels).sum())
            total_pred += len(chunk)
            B = in_hist == predicted[:, None]
        elif config.mask_mode == "ground_truth":
            B = in_hist == batch.labels[:, None]
        elif config.mask_mode == "random":
            B = rng.random((len(chunk), num_e)) < 0.5
        else:
            B = None
        scores = apply_mask(P, B, config.mask_mode)

        rows = np.arange(len(chunk))
        greater = scores > scores[rows, batch.o][:, None]
        if config.filter_mode != "raw":
            for r, ctx in enumerate(chunk):
                ids = [o for o in filt.known(ctx) if o != ctx.true_o]
                if ids:
                    greater[r, ids] = False
        ranks[lo:lo + len(chunk)] = 1 + greater.sum(axis=1)

        if dump_file is not None and dump_top_k > 0:
            k = min(dump_top_k, num_e)
            for r, ctx in enumerate(chunk):
                top = np.argsort(-scores[r], kind="stable")[:k]
                dump_file.write(json.dumps({
                    "s": ctx.s, "p": ctx.p, "t": ctx.t, "true_o": ctx.true_o,
                    "rank": int(ranks[lo + r]),
                    "top": [[int(i), float(scores[r, i])] for i in top],
                }) + "\n")

    is_subject = np.array([c.p >= num_relations_raw for c in contexts], dtype=bool)
    return RankReport(
        ranks=ranks,
        is_subject=is_subject,
        config={**asdict(config), "heads": hp.heads},
        classifier_accuracy=(correct / total_pred) if total_pred else None,
        seconds=time.perf_counter() - started,
    )


# ---------------------------------------------------------------- ablations


@dataclass(frozen=True)
class Variant:
    name: str
    inference: InferenceConfig
    heads: str = "both"
    alpha: float | None = None  # None keeps the configured value
    train_stage2: bool = True

    def apply(self, hp: HyperParams) -> HyperParams:
        updates = asdict(hp)
        updates["heads"] = self.heads
        if self.alpha is not None:
            updates["alpha"] = self.alpha
        return HyperParams(**updates).validate()


VARIANTS = {
    "his-only": dict(heads="his", mask_mode="soft"),
    "nhis-only": dict(heads="nhis", mask_mode="soft"),
    "no-stage1": dict(alpha=1.0, mask_mode="soft"),
    "no-stage2": dict(train_stage2=False, mask_mode="none"),
    "no-CL": dict(alpha=1.0, train_stage2=False, mask_mode="none"),
    "random-mask": dict(mask_mode="random"),
    "hard-mask": dict(mask_mode="hard"),
    "soft-mask": dict(mask_mode="soft"),
    "GT-mask": dict(mask_mode="ground_truth"),
}


def ablation_variant(name: str, filter_mode: str = "static", seed: int = 0) -> Variant:
    if name not in VARIANTS:
        raise EvaluationError(f"unknown ablation {name!r}; valid names: {', '.join(VARIANTS)}")
    settings = dict(VARIANTS[name])
    mask_mode = settings.pop("mask_mode")
    return Variant(name=name, inference=InferenceConfig(mask_mode, filter_mode, seed), **settings)
