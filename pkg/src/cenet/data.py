"""Quadruple datasets in the ICEWS / RE-NET distribution layout.

A dataset directory holds ``train.txt``, optionally ``valid.txt``, ``test.txt``
and optionally ``stat.txt``. Each data line is tab separated::

    subject  relation  object  raw_time  [extra columns ignored]

Raw times are divided by the dataset granularity to give granule indices.
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

logger = logging.getLogger(__name__)

# raw-time units per granule for the public benchmark distributions
KNOWN_GRANULARITY = {
    "ICEWS18": 24,
    "ICEWS14": 24,
    "ICEWS05-15": 24,
    "GDELT": 15,
    "WIKI": 1,
    "YAGO": 1,
}


class DatasetError(ValueError):
    pass


class Quadruple(NamedTuple):
    s: int
    p: int
    o: int
    t: int


@dataclass(frozen=True)
class TkgDataset:
    train: list[Quadruple]
    valid: list[Quadruple]
    test: list[Quadruple]
    num_entities: int
    num_relations_raw: int
    granularity: int = 1
    valid_present: bool = True
    name: str = ""

    @property
    def num_relations_total(self) -> int:
        return 2 * self.num_relations_raw

    def split(self, name: str) -> list[Quadruple]:
        if name not in ("train", "valid", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def granules(self) -> list[int]:
        return sorted({q.t for part in (self.train, self.valid, self.test) for q in part})


def _sort_by_time(quads: list[Quadruple]) -> list[Quadruple]:
    return sorted(quads, key=lambda q: q.t)  # stable


def parse_quadruple_lines(lines: Iterable[str], granularity: int = 1, source: str = "<lines>") -> list[Quadruple]:
    if granularity <= 0:
        raise DatasetError(f"granularity must be positive, got {granularity}")
    quads = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        cols = line.split("\t")
        if len(cols) < 4:
            cols = line.split()
        if len(cols) < 4:
            raise DatasetError(f"{source} line {lineno}: expected at least 4 columns, got {len(cols)}")
        try:
            s, p, o, raw_t = (int(c) for c in cols[:4])
        except ValueError:
            raise DatasetError(f"{source} line {lineno}: non-integer field in {line!r}") from None
        if min(s, p, o, raw_t) < 0:
            raise DatasetError(f"{source} line {lineno}: negative id or time in {line!r}")
        if raw_t % granularity:
            raise DatasetError(f"{source} line {lineno}: time {raw_t} not divisible by granularity {granularity}")
        quads.append(Quadruple(s, p, o, raw_t // granularity))
    return _sort_by_time(quads)


def parse_quadruple_file(path, granularity: int = 1) -> list[Quadruple]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        return parse_quadruple_lines(fh, granularity, source=str(path))


def write_quadruple_file(path, quads: Iterable[Quadruple], granularity: int = 1) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for q in quads:
            fh.write(f"{q.s}\t{q.p}\t{q.o}\t{q.t * granularity}\n")


def read_stat_file(path) -> tuple[int, int]:
    """``stat.txt``: entity and relation counts on one line (extra numbers ignored)."""
    text = Path(path).read_text(encoding="utf-8").split()
    if len(text) < 2:
        raise DatasetError(f"{path}: expected 'num_entities num_relations'")
    return int(text[0]), int(text[1])


def load_dataset(directory, granularity: int | None = None) -> TkgDataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory not found: {directory}")
    if granularity is None:
        granularity = KNOWN_GRANULARITY.get(directory.name, 1)

    def load(name: str, required: bool) -> list[Quadruple] | None:
        path = directory / f"{name}.txt"
        if not path.exists():
            if required:
                raise DatasetError(f"missing split file: {path}")
            return None
        return parse_quadruple_file(path, granularity)

    train = load("train", True)
    valid = load("valid", False)
    test = load("test", True)
    valid_present = valid is not None
    valid = valid or []

    every = train + valid + test
    inferred_e = max((max(q.s, q.o) for q in every), default=-1) + 1
    inferred_r = max((q.p for q in every), default=-1) + 1
    stat = directory / "stat.txt"
    if stat.exists():
        num_e, num_r = read_stat_file(stat)
        if inferred_e > num_e or inferred_r > num_r:
            raise DatasetError(
                f"{stat}: declares {num_e} entities / {num_r} relations but data uses ids up to "
                f"{inferred_e - 1} / {inferred_r - 1}"
            )
    else:
        num_e, num_r = inferred_e, inferred_r

    ds = TkgDataset(train, valid, test, num_e, num_r, granularity, valid_present, directory.name)
    _check_chronology(ds)
    return ds


def _check_chronology(ds: TkgDataset) -> None:
    if not ds.train or not ds.test:
        return
    last_train = ds.train[-1].t
    if ds.test[0].t <= last_train:
        logger.warning("test split starts at granule %d, not after training end %d", ds.test[0].t, last_train)
    if ds.valid and not (last_train <= ds.valid[0].t and ds.valid[-1].t <= ds.test[0].t):
        logger.warning("validation split does not lie between train and test")


def add_inverse_quadruples(quads: list[Quadruple], num_relations_raw: int) -> list[Quadruple]:
    """Append ``(o, p + R, s, t)`` for every fact, turning subject prediction into object prediction."""
    out = list(quads)
    for q in quads:
        if q.p >= num_relations_raw:
            raise DatasetError(f"relation {q.p} out of range for {num_relations_raw} raw relations")
        out.append(Quadruple(q.o, q.p + num_relations_raw, q.s, q.t))
    return out


# ---------------------------------------------------------------- statistics


@dataclass
class DatasetStats:
    counts: dict[str, int]
    new_event_rate: float
    new_events: int
    repetitive_events: int
    per_timestamp_new_counts: list[list[int]] = field(default_factory=list)
    first_gap_hist: list[list[int]] = field(default_factory=list)
    latest_gap_hist: list[list[int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "counts": self.counts,
            "new_event_rate": self.new_event_rate,
            "new_events": self.new_events,
            "repetitive_events": self.repetitive_events,
            "per_timestamp_new_counts": self.per_timestamp_new_counts,
            "first_gap_hist": self.first_gap_hist,
            "latest_gap_hist": self.latest_gap_hist,
        }


def event_novelty(quads: list[Quadruple]):
    """Sweep facts chronologically and classify each as new or repetitive.

    Yields ``(quad, first_gap, latest_gap)`` where both gaps are ``None`` for
    new events. Facts sharing a granule never see each other.
    """
    first: dict[tuple[int, int, int], int] = {}
    latest: dict[tuple[int, int, int], int] = {}
    quads = _sort_by_time(quads)
    i = 0
    n = len(quads)
    while i < n:
        t = quads[i].t
        j = i
        while j < n and quads[j].t == t:
            j += 1
        for q in quads[i:j]:
            key = (q.s, q.p, q.o)
            if key in first:
                yield q, t - first[key], t - latest[key]
            else:
                yield q, None, None
        for q in quads[i:j]:
            key = (q.s, q.p, q.o)
            first.setdefault(key, t)
            latest[key] = t
        i = j


def compute_stats(ds: TkgDataset) -> DatasetStats:
    """Table-style statistics; novelty measured over the training split only."""
    per_t_new: Counter = Counter()
    first_hist: Counter = Counter()
    latest_hist: Counter = Counter()
    timestamps = set()
    n_new = n_rep = 0
    for q, first_gap, latest_gap in event_novelty(ds.train):
        timestamps.add(q.t)
        if first_gap is None:
            n_new += 1
            per_t_new[q.t] += 1
        else:
            n_rep += 1
            first_hist[first_gap] += 1
            latest_hist[latest_gap] += 1
    total = n_new + n_rep
    counts = {
        "entities": ds.num_entities,
        "relations": ds.num_relations_raw,
        "train": len(ds.train),
        "valid": len(ds.valid),
        "test": len(ds.test),
        "granules": len(ds.granules()),
    }
    return DatasetStats(
        counts=counts,
        new_event_rate=(n_new / total) if total else 0.0,
        new_events=n_new,
        repetitive_events=n_rep,
        per_timestamp_new_counts=[[t, per_t_new.get(t, 0)] for t in sorted(timestamps)],
        first_gap_hist=sorted([g, c] for g, c in first_hist.items()),
        latest_gap_hist=sorted([g, c] for g, c in latest_hist.items()),
    )


def write_stats(stats: DatasetStats, path) -> None:
    Path(path).write_text(json.dumps(stats.to_json(), indent=1), encoding="utf-8")


def known_objects(quads: Iterable[Quadruple], time_aware: bool = False) -> dict:
    """Map ``(s, p)`` (or ``(s, p, t)``) to the set of objects observed for it."""
    out: dict = defaultdict(set)
    for q in quads:
        key = (q.s, q.p, q.t) if time_aware else (q.s, q.p)
        out[key].add(q.o)
    return out


def dataset_fingerprint(directory) -> str:
    """Content hash of a dataset directory's split files."""
    import hashlib

    h = hashlib.sha256()
    for name in ("train.txt", "valid.txt", "test.txt", "stat.txt"):
        path = Path(directory) / name
        h.update(name.encode())
        if path.exists():
            h.update(path.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


def default_cache_dir() -> Path | None:
    value = os.environ.get("CENET_CACHE_DIR")
    return Path(value) if value else None
