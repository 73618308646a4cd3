"""Stage-1 model: copy-mechanism scoring heads, query encoder and joint loss."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Parameter, Tensor
from .history import ConfigError, QueryContext, dense_f, dense_z

logger = logging.getLogger(__name__)

HEADS = ("both", "his", "nhis")
LOG_FLOOR = 1e-12

# incremented whenever a contrastive batch is too small to form pairs
degenerate_supcon_batches = 0


@dataclass
class HyperParams:
    d: int = 200
    alpha: float = 0.2
    lam: float = 2.0
    tau: float = 0.1
    batch_size: int = 1024
    lr: float = 0.001
    stage1_epochs: int = 30
    stage2_epochs: int = 20
    seed: int = 0
    heads: str = "both"

    def validate(self) -> "HyperParams":
        if self.d <= 0:
            raise ConfigError(f"embedding dim must be positive, got {self.d}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size must be >= 1 and lr > 0")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.heads not in HEADS:
            raise ConfigError(f"heads must be one of {HEADS}, got {self.heads!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**data)


STAGE1_NAMES = (
    "E", "P", "W_his", "b_his", "W_nhis", "b_nhis", "W_F",
    "mlp_W1", "mlp_b1", "mlp_W2", "mlp_b2",
)
CLASSIFIER_NAMES = ("clf_w", "clf_b")


class ModelParams:
    """Every trainable array of the model, addressed by name."""

    def __init__(self, num_entities: int, num_relations: int, d: int, arrays: dict[str, np.ndarray],
                 has_classifier: bool = False):
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.d = d
        expected = self.expected_shapes(num_entities, num_relations, d)
        self.params: dict[str, Parameter] = {}
        for name, shape in expected.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != shape:
                raise ad.ShapeError(f"parameter {name}: expected shape {shape}, got {value.shape}")
            self.params[name] = Parameter(value, name)
        self.has_classifier = has_classifier

    @staticmethod
    def expected_shapes(num_entities: int, num_relations: int, d: int) -> dict[str, tuple[int, ...]]:
        return {
            "E": (num_entities, d),
            "P": (num_relations, d),
            "W_his": (d, 2 * d),
            "b_his": (d,),
            "W_nhis": (d, 2 * d),
            "b_nhis": (d,),
            "W_F": (d, num_entities),
            "mlp_W1": (d, 3 * d),
            "mlp_b1": (d,),
            "mlp_W2": (d, d),
            "mlp_b2": (d,),
            "clf_w": (1, d),
            "clf_b": (1,),
        }

    @classmethod
    def init(cls, num_entities: int, num_relations: int, d: int, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(d)
        arrays = {
            name: rng.uniform(-bound, bound, size=shape)
            for name, shape in cls.expected_shapes(num_entities, num_relations, d).items()
        }
        return cls(num_entities, num_relations, d, arrays)

    def __getattr__(self, name: str) -> Parameter:
        params = self.__dict__.get("params")
        if params is not None and name in params:
            return params[name]
        raise AttributeError(name)

    def stage1(self) -> list[Parameter]:
        return [self.params[n] for n in STAGE1_NAMES]

    def classifier(self) -> list[Parameter]:
        return [self.params[n] for n in CLASSIFIER_NAMES]

    def all(self) -> list[Parameter]:
        return list(self.params.values())

    def arrays(self, include_classifier: bool = True) -> dict[str, np.ndarray]:
        names = STAGE1_NAMES + (CLASSIFIER_NAMES if include_classifier else ())
        return {n: self.params[n].data for n in names}

    def copy(self) -> "ModelParams":
        return ModelParams(self.num_entities, self.num_relations, self.d,
                           {n: p.data.copy() for n, p in self.params.items()}, self.has_classifier)


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    s: np.ndarray
    p: np.ndarray
    o: np.ndarray
    z: np.ndarray  # [B, |E|] copy term, constant
    f: np.ndarray  # [B, |E|] raw historical counts
    labels: np.ndarray  # bool [B]
    contexts: list[QueryContext]

    def __len__(self) -> int:
        return len(self.s)

    @classmethod
    def from_contexts(cls, contexts: list[QueryContext], lam: float, num_entities: int,
                      num_relations: int | None = None) -> "Batch":
        s = np.array([c.s for c in contexts], dtype=np.int64)
        p = np.array([c.p for c in contexts], dtype=np.int64)
        o = np.array([c.true_o for c in contexts], dtype=np.int64)
        for name, ids, bound in (("subject", s, num_entities), ("object", o, num_entities),
                                 ("relation", p, num_relations)):
            if bound is not None and ids.size and (ids.min() < 0 or ids.max() >= bound):
                raise IndexError(f"{name} id out of range [0, {bound})")
        labels = np.array([c.label for c in contexts], dtype=bool)
        return cls(s, p, o, dense_z(contexts, lam, num_entities), dense_f(contexts, num_entities),
                   labels, contexts)


def _query_pair(batch: Batch, params: ModelParams) -> Tensor:
    return ad.concat([ad.take_rows(params.E, batch.s), ad.take_rows(params.P, batch.p)])


def _similarity(batch: Batch, params: ModelParams, W: Parameter, b: Parameter) -> Tensor:
    hidden = ad.tanh_op(ad.linear(W, b, _query_pair(batch, params)))
    return ad.matmul(hidden, params.E, transpose_b=True)


def historical_scores(batch: Batch, params: ModelParams) -> Tensor:
    """Similarity to every entity plus the copy term (which carries no gradient)."""
    return ad.add(_similarity(batch, params, params.W_his, params.b_his), Tensor(batch.z))


def nonhistorical_scores(batch: Batch, params: ModelParams) -> Tensor:
    return ad.sub(_similarity(batch, params, params.W_nhis, params.b_nhis), Tensor(batch.z))


def ce_loss(h_his: Tensor | None, h_nhis: Tensor | None, true_objects) -> Tensor:
    """``-sum log(p_his[o] + p_nhis[o])``; a missing head is dropped from the sum.

    With both heads the argument of the log can exceed 1, so terms may be
    negative (bounded below by ``-log 2``).
    """
    probs = [ad.pick(ad.softmax_row(h), true_objects) for h in (h_his, h_nhis) if h is not None]
    if not probs:
        raise ValueError("ce_loss needs at least one score head")
    total = probs[0] if len(probs) == 1 else ad.add(probs[0], probs[1])
    return ad.scale(ad.sum_op(ad.log_op(total, floor=LOG_FLOOR)), -1.0)


def query_embedding(batch: Batch, params: ModelParams) -> Tensor:
    """Unit-norm query representation from ``s``, ``p`` and squashed frequencies."""
    freq = ad.tanh_op(ad.matmul(Tensor(batch.f), params.W_F, transpose_b=True))
    x = ad.concat([ad.take_rows(params.E, batch.s), ad.take_rows(params.P, batch.p), freq])
    hidden = ad.tanh_op(ad.linear(params.mlp_W1, params.mlp_b1, x))
    return ad.l2_normalize(ad.linear(params.mlp_W2, params.mlp_b2, hidden))


def supcon_loss(V: Tensor, labels, tau: float) -> Tensor:
    """Supervised contrastive loss summed over anchors that have a positive.

    For anchor ``q`` the positives are the other rows sharing its label and the
    denominator runs over every row except ``q`` itself.
    """
    global degenerate_supcon_batches
    labels = np.asarray(labels).reshape(-1)
    n = V.shape[0]
    if n < 2:
        degenerate_supcon_batches += 1
        return Tensor(0.0)
    sims = ad.scale(ad.matmul(V, V, transpose_b=True), 1.0 / tau)
    not_self = ~np.eye(n, dtype=bool)
    positives = (labels[:, None] == labels[None, :]) & not_self
    n_pos = positives.sum(axis=1)
    has_pos = n_pos > 0
    weights = -positives.astype(np.float64) / np.where(has_pos, n_pos, 1)[:, None]
    attract = ad.sum_op(sims, weights)
    normalizer = ad.sum_op(ad.logsumexp_rows(sims, not_self), has_pos.astype(np.float64))
    return ad.add(attract, normalizer)


def combined_loss(ce, sup, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if isinstance(ce, Tensor) or isinstance(sup, Tensor):
        return ad.add(ad.scale(ad.as_tensor(ce), alpha), ad.scale(ad.as_tensor(sup), 1.0 - alpha))
    return alpha * ce + (1.0 - alpha) * sup


def stage1_loss(batch: Batch, params: ModelParams, hp: HyperParams, use_supcon: bool = True):
    """Forward pass for one minibatch. Returns ``(total, ce, sup)`` tensors."""
    h_his = historical_scores(batch, params) if hp.heads in ("both", "his") else None
    h_nhis = nonhistorical_scores(batch, params) if hp.heads in ("both", "nhis") else None
    ce = ce_loss(h_his, h_nhis, batch.o)
    sup = supcon_loss(query_embedding(batch, params), batch.labels, hp.tau) if use_supcon else Tensor(0.0)
    return combined_loss(ce, sup, hp.alpha), ce, sup


def entity_distribution(batch: Batch, params: ModelParams, heads: str = "both") -> np.ndarray:
    """Mean of the head softmaxes, ``[B, |E|]``, each row summing to one."""
    with ad.no_grad():
        parts = []
        if heads in ("both", "his"):
            parts.append(ad.softmax_row(historical_scores(batch, params)).data)
        if heads in ("both", "nhis"):
            parts.append(ad.softmax_row(nonhistorical_scores(batch, params)).data)
    return parts[0] if len(parts) == 1 else 0.5 * (parts[0] + parts[1])


def embed_queries(contexts: list[QueryContext], params: ModelParams, lam: float,
                  batch_size: int = 1024) -> np.ndarray:
    out = np.zeros((len(contexts), params.d))
    with ad.no_grad():
        for lo in range(0, len(contexts), batch_size):
            chunk = contexts[lo:lo + batch_size]
            batch = Batch.from_contexts(chunk, lam, params.num_entities)
            out[lo:lo + len(chunk)] = query_embedding(batch, params).data
    return out


# ---------------------------------------------------------------- training


class TrainingError(RuntimeError):
    pass


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _dump_batch(batch: Batch, dump_dir) -> str:
    payload = {"s": batch.s.tolist(), "p": batch.p.tolist(), "o": batch.o.tolist(),
               "labels": batch.labels.tolist()}
    if dump_dir is None:
        return json.dumps(payload)[:2000]
    path = Path(dump_dir) / "nan_batch.json"
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


def train_stage1(contexts: list[QueryContext], params: ModelParams, hp: HyperParams, *,
                 use_supcon: bool = True, optimizer: Adam | None = None, start_epoch: int = 0,
                 on_epoch: Callable[[int, Adam, dict], None] | None = None,
                 dump_dir=None) -> list[dict]:
    """Joint training of both score heads and the query encoder.

    Minibatches are drawn from a permutation seeded by ``(seed, epoch)`` so a
    resumed run replays the same order. Returns one log record per epoch.
    """
    hp.validate()
    if not contexts:
        raise TrainingError("no training contexts")
    for p in params.classifier():
        p.freeze()
    if optimizer is None:
        optimizer = Adam(params.stage1(), lr=hp.lr)
    log = []
    for epoch in range(start_epoch, hp.stage1_epochs):
        started = time.perf_counter()
        order = epoch_order(len(contexts), hp.seed, epoch)
        sums = {"ce": 0.0, "sup": 0.0, "combined": 0.0}
        steps = 0
        for lo in range(0, len(order), hp.batch_size):
            chunk = [contexts[i] for i in order[lo:lo + hp.batch_size]]
            batch = Batch.from_contexts(chunk, hp.lam, params.num_entities, params.num_relations)
            loss, ce, sup = stage1_loss(batch, params, hp, use_supcon)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {steps}; batch: "
                                    f"{_dump_batch(batch, dump_dir)}")
            ad.backward(loss)
            optimizer.step()
            sums["ce"] += ce.item()
            sums["sup"] += sup.item()
            sums["combined"] += loss.item()
            steps += 1
        record = {"stage": 1, "epoch": epoch + 1, "steps": steps,
                  **{k: v / steps for k, v in sums.items()},
                  "seconds": time.perf_counter() - started}
        logger.info("stage1 epoch %d loss %.5f (ce %.5f sup %.5f)", epoch + 1,
                    record["combined"], record["ce"], record["sup"])
        log.append(record)
        if on_epoch is not None:
            on_epoch(epoch + 1, optimizer, record)
    return log
