"""Seeded synthetic temporal graphs with controllable recurrence."""

from __future__ import annotations

import numpy as np

from .data import Quadruple, TkgDataset


def split_by_granule(quads: list[Quadruple], num_granules: int, train_frac: float = 0.8,
                     valid_frac: float = 0.1) -> tuple[list, list, list]:
    train_end = int(round(num_granules * train_frac))
    valid_end = int(round(num_granules * (train_frac + valid_frac)))
    train = [q for q in quads if q.t < train_end]
    valid = [q for q in quads if train_end <= q.t < valid_end]
    test = [q for q in quads if q.t >= valid_end]
    return train, valid, test


def recurrent_tkg(num_entities: int = 50, num_relations: int = 10, num_granules: int = 60,
                  pairs_per_granule: int = 40, novel_fraction: float = 0.0, seed: int = 0,
                  train_frac: float = 0.8, valid_frac: float = 0.1) -> TkgDataset:
    """A graph where fixed ``(s, p) -> o`` facts repeat every granule.

    With ``novel_fraction > 0`` the entity set is split in two halves: the
    lower half carries the recurrent facts and the upper half receives
    never-repeating random facts, so that ``novel_fraction`` of each
    granule's events are new.
    """
    rng = np.random.default_rng(seed)
    if novel_fraction > 0:
        half = num_entities // 2
        rec_entities = np.arange(half)
        novel_entities = np.arange(half, num_entities)
    else:
        rec_entities = np.arange(num_entities)
        novel_entities = np.arange(0)

    all_pairs = [(int(s), p) for s in rec_entities for p in range(num_relations)]
    chosen = rng.choice(len(all_pairs), size=min(pairs_per_granule, len(all_pairs)), replace=False)
    recurrent = []
    for i in sorted(chosen):
        s, p = all_pairs[i]
        o = int(rng.choice(rec_entities[rec_entities != s]))
        recurrent.append((s, p, o))

    n_novel = 0
    if novel_fraction > 0:
        n_novel = int(round(len(recurrent) * novel_fraction / (1.0 - novel_fraction)))
    seen: set[tuple[int, int, int]] = set()
    quads = []
    for t in range(num_granules):
        quads.extend(Quadruple(s, p, o, t) for s, p, o in recurrent)
        made = 0
        while made < n_novel:
            s, o = (int(x) for x in rng.choice(novel_entities, size=2, replace=False))
            p = int(rng.integers(num_relations))
            if (s, p, o) in seen:
                continue
            seen.add((s, p, o))
            quads.append(Quadruple(s, p, o, t))
            made += 1
    train, valid, test = split_by_granule(quads, num_granules, train_frac, valid_frac)
    return TkgDataset(train, valid, test, num_entities, num_relations, 1, bool(valid), "synthetic")


def random_tkg(num_quads: int, num_entities: int, num_relations: int, num_granules: int,
               seed: int = 0, repeat_prob: float = 0.5) -> list[Quadruple]:
    """Random time-sorted quadruples; ``repeat_prob`` re-emits an earlier fact."""
    rng = np.random.default_rng(seed)
    times = np.sort(rng.integers(0, num_granules, size=num_quads))
    out: list[Quadruple] = []
    for t in times:
        if out and rng.random() < repeat_prob:
            q = out[int(rng.integers(len(out)))]
            out.append(Quadruple(q.s, q.p, q.o, int(t)))
        else:
            out.append(Quadruple(int(rng.integers(num_entities)), int(rng.integers(num_relations)),
                                 int(rng.integers(num_entities)), int(t)))
    return out
