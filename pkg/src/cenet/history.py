"""Full-timeline historical frequencies for ``(s, p, ?, t)`` queries.

One chronological sweep keeps, for every ``(s, p)`` pair, a sparse count of
the objects it has been seen with. A query at granule ``t`` is answered from
the counts of granules strictly before ``t``; there is no window, so an
object seen once a thousand granules ago still counts.
"""

from __future__ import annotations

import hashlib
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .data import Quadruple, TkgDataset, add_inverse_quadruples

EMPTY_IDS = np.zeros(0, dtype=np.int64)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, slots=True, eq=False)
class QueryContext:
    s: int
    p: int
    t: int
    true_o: int
    f_ids: np.ndarray  # sorted object ids with positive count
    f_counts: np.ndarray

    @property
    def F(self) -> dict[int, int]:
        return dict(zip(self.f_ids.tolist(), self.f_counts.tolist()))

    @property
    def H(self) -> frozenset[int]:
        return frozenset(self.f_ids.tolist())

    @property
    def label(self) -> bool:
        return label_query(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QueryContext):
            return NotImplemented
        return (
            (self.s, self.p, self.t, self.true_o) == (other.s, other.p, other.t, other.true_o)
            and np.array_equal(self.f_ids, other.f_ids)
            and np.array_equal(self.f_counts, other.f_counts)
        )


def label_query(ctx: QueryContext) -> bool:
    """True when the answer object already appeared for this ``(s, p)``."""
    i = np.searchsorted(ctx.f_ids, ctx.true_o)
    return bool(i < len(ctx.f_ids) and ctx.f_ids[i] == ctx.true_o)


class HistoryIndex:
    """Cumulative ``(s, p) -> {o: count}`` as of the last absorbed granule."""

    def __init__(self):
        self._counts: dict[tuple[int, int], dict[int, int]] = defaultdict(dict)
        self.cursor: int | None = None

    def absorb(self, t: int, quads: Iterable[Quadruple]) -> None:
        if self.cursor is not None and t <= self.cursor:
            raise ValueError(f"granule {t} absorbed after cursor {self.cursor}")
        for q in quads:
            row = self._counts[(q.s, q.p)]
            row[q.o] = row.get(q.o, 0) + 1
        self.cursor = t

    def frequencies(self, s: int, p: int, t: int) -> tuple[np.ndarray, np.ndarray]:
        if self.cursor is not None and self.cursor >= t:
            raise ValueError(f"index already absorbed granule {self.cursor}; cannot answer for t={t}")
        row = self._counts.get((s, p))
        if not row:
            return EMPTY_IDS, EMPTY_IDS
        ids = np.fromiter(row.keys(), dtype=np.int64, count=len(row))
        counts = np.fromiter(row.values(), dtype=np.int64, count=len(row))
        order = np.argsort(ids)
        return ids[order], counts[order]

    def num_pairs(self) -> int:
        return sum(len(r) for r in self._counts.values())


def _is_sorted(quads: list[Quadruple]) -> bool:
    return all(a.t <= b.t for a, b in zip(quads, quads[1:]))


def build_contexts(queries: list[Quadruple], history: Iterable[Quadruple] = ()) -> list[QueryContext]:
    """One context per query quadruple, in input order.

    ``history`` holds facts observed alongside the queries but not asked
    about (earlier splits). Both streams are absorbed into the index as the
    sweep passes their granule, so a query at ``t`` sees every fact with
    ``k < t`` from either stream.
    """
    if not _is_sorted(queries):
        raise ValueError("query quadruples must be sorted by time")
    by_time: dict[int, list[Quadruple]] = defaultdict(list)
    for q in history:
        by_time[q.t].append(q)
    query_pos: dict[int, list[int]] = defaultdict(list)
    for i, q in enumerate(queries):
        by_time[q.t].append(q)
        query_pos[q.t].append(i)

    index = HistoryIndex()
    out: list[QueryContext | None] = [None] * len(queries)
    for t in sorted(by_time):
        snapshot: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        for i in query_pos.get(t, ()):
            q = queries[i]
            key = (q.s, q.p)
            if key not in snapshot:
                snapshot[key] = index.frequencies(q.s, q.p, t)
            ids, counts = snapshot[key]
            out[i] = QueryContext(q.s, q.p, q.t, q.o, ids, counts)
        index.absorb(t, by_time[t])
    return out  # type: ignore[return-value]


SPLIT_ORDER = ("train", "valid", "test")


def contexts_for_split(ds: TkgDataset, split: str) -> list[QueryContext]:
    """Object and inverse-subject contexts for one split, with all earlier splits as history."""
    idx = SPLIT_ORDER.index(split)
    history: list[Quadruple] = []
    for name in SPLIT_ORDER[:idx]:
        history.extend(add_inverse_quadruples(ds.split(name), ds.num_relations_raw))
    queries = add_inverse_quadruples(ds.split(split), ds.num_relations_raw)
    queries.sort(key=lambda q: q.t)
    return build_contexts(queries, history)


# ---------------------------------------------------------------- dense views


def clamp_to_z(F, lam: float, num_entities: int) -> np.ndarray:
    """Copy term: ``+lam`` where the count is positive, ``-lam`` elsewhere."""
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    z = np.full(num_entities, -float(lam))
    if isinstance(F, QueryContext):
        ids = F.f_ids[F.f_counts > 0]
    elif isinstance(F, Mapping):
        ids = np.array([o for o, c in F.items() if c > 0], dtype=np.int64)
    else:
        ids, counts = F
        ids = np.asarray(ids, dtype=np.int64)[np.asarray(counts) > 0]
    z[ids] = float(lam)
    return z


def dense_z(contexts: list[QueryContext], lam: float, num_entities: int) -> np.ndarray:
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    z = np.full((len(contexts), num_entities), -float(lam))
    for row, ctx in enumerate(contexts):
        z[row, ctx.f_ids] = float(lam)
    return z


def dense_f(contexts: list[QueryContext], num_entities: int) -> np.ndarray:
    f = np.zeros((len(contexts), num_entities))
    for row, ctx in enumerate(contexts):
        f[row, ctx.f_ids] = ctx.f_counts
    return f


def history_mask(contexts: list[QueryContext], num_entities: int) -> np.ndarray:
    m = np.zeros((len(contexts), num_entities), dtype=bool)
    for row, ctx in enumerate(contexts):
        m[row, ctx.f_ids] = True
    return m


# ---------------------------------------------------------------- disk cache
#
# layout: MAGIC, u16 version, 32-byte sha256 of the dataset, varint count,
# then per context varints s, p, t, o, nnz, (id, count) * nnz.

CACHE_MAGIC = b"CNCTX"
CACHE_VERSION = 1


def _put_varint(buf: bytearray, value: int) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            buf.append(byte | 0x80)
        else:
            buf.append(byte)
            return


def _get_varint(data: bytes, pos: int) -> tuple[int, int]:
    result = shift = 0
    while True:
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7


def save_context_cache(path, contexts: list[QueryContext], dataset_hash: str) -> None:
    buf = bytearray(CACHE_MAGIC)
    buf += struct.pack("<H", CACHE_VERSION)
    buf += bytes.fromhex(dataset_hash)
    _put_varint(buf, len(contexts))
    for c in contexts:
        for v in (c.s, c.p, c.t, c.true_o, len(c.f_ids)):
            _put_varint(buf, int(v))
        for o, n in zip(c.f_ids.tolist(), c.f_counts.tolist()):
            _put_varint(buf, o)
            _put_varint(buf, n)
    Path(path).write_bytes(bytes(buf))


def load_context_cache(path, dataset_hash: str) -> list[QueryContext] | None:
    """Contexts from ``path``, or ``None`` when absent, stale or of another version."""
    path = Path(path)
    if not path.exists():
        return None
    data = path.read_bytes()
    head = len(CACHE_MAGIC)
    if data[:head] != CACHE_MAGIC:
        return None
    (version,) = struct.unpack_from("<H", data, head)
    if version != CACHE_VERSION or data[head + 2:head + 34] != bytes.fromhex(dataset_hash):
        return None
    pos = head + 34
    n, pos = _get_varint(data, pos)
    out = []
    for _ in range(n):
        vals = []
        for _ in range(5):
            v, pos = _get_varint(data, pos)
            vals.append(v)
        s, p, t, o, nnz = vals
        pairs = []
        for _ in range(2 * nnz):
            v, pos = _get_varint(data, pos)
            pairs.append(v)
        arr = np.array(pairs, dtype=np.int64).reshape(nnz, 2) if nnz else np.zeros((0, 2), dtype=np.int64)
        out.append(QueryContext(s, p, t, o, arr[:, 0].copy(), arr[:, 1].copy()))
    return out


def cache_key(dataset_hash: str, split: str) -> str:
    return hashlib.sha256(f"{dataset_hash}:{split}".encode()).hexdigest()[:16]
