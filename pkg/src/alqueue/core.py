"""Candidate records, deduplicated datasets and threshold/fraction selection."""

from __future__ import annotations

import csv
import enum
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

SCORES = ("s_is", "s_sa", "s_t")


class Origin(str, enum.Enum):
    GENERATED = "Generated"
    PRETRAINING = "Pretraining"
    REFERENCE = "Reference"
    HOLDOUT = "Holdout"


@dataclass(frozen=True, eq=False)
class Candidate:
    id: int
    latent: np.ndarray
    embedding: np.ndarray
    fingerprint: frozenset
    origin: Origin = Origin.GENERATED
    generator_version: int = 0

    @property
    def mask(self) -> int:
        return bits_to_mask(self.fingerprint)


def bits_to_mask(bits: Iterable[int]) -> int:
    m = 0
    for b in bits:
        m |= 1 << int(b)
    return m


def mask_to_bits(mask: int) -> frozenset:
    return frozenset(i for i in range(64) if (int(mask) >> i) & 1)


def dedup_key(c: Candidate) -> int:
    """63-bit hash of the fingerprint bits and the embedding rounded to 4 decimals."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(c.mask).to_bytes(8, "little"))
    q = np.rint(np.asarray(c.embedding, dtype=np.float64) * 1e4).astype("<i8")
    h.update(q.tobytes())
    return int.from_bytes(h.digest(), "little") >> 1


@dataclass(eq=False)
class ScoredRecord:
    candidate: Candidate
    s_sa: float
    s_t: float
    s_is: float | None = None
    key: int = field(init=False)

    def __post_init__(self):
        self.key = dedup_key(self.candidate)

    @property
    def id(self) -> int:
        return self.candidate.id

    def record_strain(self, s_is: float) -> None:
        if self.s_is is not None:
            raise ValueError(f"record {self.id} already has s_is={self.s_is}")
        self.s_is = float(s_is)

    def score(self, name: str) -> float:
        if name not in SCORES:
            raise KeyError(f"unknown score {name!r}")
        v = getattr(self, name)
        if v is None:
            raise ValueError(f"record {self.id} has no {name}")
        return v


class Dataset:
    """Ordered records, unique by dedup key."""

    def __init__(self, records: Iterable[ScoredRecord] = ()):
        self.records: list[ScoredRecord] = []
        self.index: dict[int, int] = {}
        for r in records:
            insert_unique(self, r)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ScoredRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> ScoredRecord:
        return self.records[i]

    def __contains__(self, key: int) -> bool:
        return key in self.index

    def ids(self) -> list[int]:
        return [r.id for r in self.records]

    def keys(self) -> set[int]:
        return set(self.index)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.score(name) for r in self.records], dtype=np.float64)

    def embeddings(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 0))
        return np.stack([r.candidate.embedding for r in self.records])

    def latents(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, 0))
        return np.stack([r.candidate.latent for r in self.records])

    def masks(self) -> np.ndarray:
        return np.array([r.candidate.mask for r in self.records], dtype=np.uint64)


def insert_unique(d: Dataset, r: ScoredRecord) -> bool:
    if r.key in d.index:
        return False
    d.index[r.key] = len(d.records)
    d.records.append(r)
    return True


@dataclass(frozen=True)
class Thresholds:
    t_is: float = 0.25
    t_sa: float = 1.0
    t_t: float = 1.0

    def __post_init__(self):
        for name in ("t_is", "t_sa", "t_t"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"threshold {name} must be finite and >= 0, got {v}")

    def passes(self, r: ScoredRecord) -> bool:
        if r.s_is is None:
            raise ValueError(f"record {r.id} has not been simulated")
        return r.s_is < self.t_is and r.s_sa < self.t_sa and r.s_t < self.t_t


def stable_subset(d: Dataset, t: Thresholds) -> Dataset:
    out = Dataset()
    for r in d:
        if t.passes(r):
            insert_unique(out, r)
    return out


def top_fraction(d: Dataset, frac: float, by: str = "s_is", lower_is_better: bool = True) -> Dataset:
    """Best ``ceil(frac * |d|)`` records by one score; ties go to the smaller id."""
    if len(d) == 0:
        raise ValueError("top_fraction of an empty dataset")
    if not 0 < frac <= 1:
        raise ValueError(f"frac must be in (0, 1], got {frac}")
    sign = 1.0 if lower_is_better else -1.0
    ranked = sorted(d.records, key=lambda r: (sign * r.score(by), r.id))
    n = math.ceil(frac * len(d) - 1e-9)
    return Dataset(ranked[:max(n, 1)])


# --- CSV persistence -------------------------------------------------------

BuildFn = Callable[[Sequence[int], Sequence[Origin], np.ndarray], list]


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def write_dataset_csv(d: Dataset, path: str | Path) -> None:
    k = len(d[0].candidate.latent) if len(d) else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "origin", *(f"latent_{i}" for i in range(k)), "s_sa", "s_t", "s_is"])
        for r in d:
            c = r.candidate
            w.writerow([c.id, c.origin.value, *(repr(float(x)) for x in c.latent),
                        _fmt(r.s_sa), _fmt(r.s_t), _fmt(r.s_is)])


def read_dataset_csv(path: str | Path, build: BuildFn) -> Dataset:
    """Load a dataset; ``build(ids, origins, latents)`` recomputes embeddings and fingerprints."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    if header[:2] != ["id", "origin"] or header[-3:] != ["s_sa", "s_t", "s_is"]:
        raise ValueError(f"{path}: unexpected header {header}")
    k = len(header) - 5
    ids = [int(r[0]) for r in body]
    origins = [Origin(r[1]) for r in body]
    latents = np.array([[float(x) for x in r[2:2 + k]] for r in body], dtype=np.float64).reshape(len(body), k)
    cands = build(ids, origins, latents)
    out = Dataset()
    for c, r in zip(cands, body):
        s_is = float(r[-1]) if r[-1] != "" else None
        insert_unique(out, ScoredRecord(c, float(r[-3]), float(r[-2]), s_is))
    return out
