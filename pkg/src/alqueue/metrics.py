"""Event-log records and the metrics series derived from them."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

EVENT_COLUMNS = ("clock", "event", "candidate_id", "model_version", "generator_version", "detail")
EVENT_TYPES = ("GEN", "RANK", "POP", "SIM_DONE", "RETRAIN", "FINETUNE",
               "DISCARD_DUP", "DISCARD_INVALID", "DISCARD_STALE", "STOP")
METRIC_COLUMNS = ("n_simulated", "cum_stable", "holdout_rmse", "win_sa", "win_t", "stable_fraction")
CHECKPOINT_EVERY = 10
WINDOW = 100


@dataclass(frozen=True)
class Event:
    clock: float
    event: str
    candidate_id: int | None = None
    model_version: int | None = None
    generator_version: int | None = None
    detail: str = ""

    def row(self) -> list[str]:
        return [f"{self.clock:.6f}", self.event,
                "" if self.candidate_id is None else str(self.candidate_id),
                "" if self.model_version is None else str(self.model_version),
                "" if self.generator_version is None else str(self.generator_version),
                self.detail]

    def fields(self) -> dict[str, str]:
        return parse_detail(self.detail)


def parse_detail(detail: str) -> dict[str, str]:
    out = {}
    for part in detail.split(";"):
        if part:
            k, _, v = part.partition("=")
            out[k] = v
    return out


def write_events(events: Iterable[Event], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for e in events:
            w.writerow(e.row())


def read_events(path: str | Path) -> list[Event]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != EVENT_COLUMNS:
        raise ValueError(f"{path}: not an event log")

    def opt(s):
        return int(s) if s != "" else None

    return [Event(float(r[0]), r[1], opt(r[2]), opt(r[3]), opt(r[4]), r[5]) for r in rows[1:]]


@dataclass(frozen=True)
class MetricsRow:
    n_simulated: int
    cum_stable: int
    holdout_rmse: float | None
    win_sa: float
    win_t: float
    stable_fraction: float

    def row(self) -> list[str]:
        return [str(self.n_simulated), str(self.cum_stable),
                "" if self.holdout_rmse is None else repr(self.holdout_rmse),
                repr(self.win_sa), repr(self.win_t), repr(self.stable_fraction)]


def metrics_from_events(events: Iterable[Event], every: int = CHECKPOINT_EVERY,
                        window: int = WINDOW) -> list[MetricsRow]:
    """One row per ``every`` accepted results, plus a final row if the run ends off-cadence."""
    rows: list[MetricsRow] = []
    sa: list[float] = []
    st: list[float] = []
    stable = 0
    rmse = None
    for e in events:
        if e.event == "RETRAIN":
            r = e.fields().get("rmse", "")
            rmse = float(r) if r else None
        elif e.event == "SIM_DONE":
            f = e.fields()
            if f.get("accepted", "1") != "1":
                continue
            sa.append(float(f["s_sa"]))
            st.append(float(f["s_t"]))
            stable += int(f["stable"])
            if len(sa) % every == 0:
                rows.append(_row(sa, st, stable, rmse, window))
    if sa and len(sa) % every:
        rows.append(_row(sa, st, stable, rmse, window))
    return rows


def _row(sa, st, stable, rmse, window) -> MetricsRow:
    n = len(sa)
    w_sa = sa[-window:]
    w_t = st[-window:]
    return MetricsRow(n, stable, rmse, math.fsum(w_sa) / len(w_sa), math.fsum(w_t) / len(w_t), stable / n)


def write_metrics(rows: Iterable[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow(r.row())


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != METRIC_COLUMNS:
        raise ValueError(f"{path}: not a metrics file")
    return [MetricsRow(int(r[0]), int(r[1]), float(r[2]) if r[2] else None,
                       float(r[3]), float(r[4]), float(r[5])) for r in rows[1:]]


def check_conservation(events: Iterable[Event]) -> int:
    """Replay candidate dispositions and check every RANK/STOP count against them.

    Each candidate must move GEN -> (queued) -> POP -> SIM_DONE, or leave via a
    DISCARD event, and never be in two places. Returns the number of checks made.
    """
    queued: set[int] = set()
    in_flight: set[int] = set()
    seen: set[int] = set()
    simulated = discarded = 0
    checks = 0
    for e in events:
        cid = e.candidate_id
        if e.event == "GEN":
            if cid in seen:
                raise AssertionError(f"candidate {cid} generated twice")
            seen.add(cid)
            queued.add(cid)
        elif e.event in ("DISCARD_DUP", "DISCARD_INVALID", "DISCARD_STALE"):
            if cid not in queued:
                raise AssertionError(f"{e.event} for candidate {cid} that is not queued")
            queued.remove(cid)
            discarded += 1
        elif e.event == "POP":
            if cid not in queued:
                raise AssertionError(f"POP of candidate {cid} that is not queued")
            queued.remove(cid)
            in_flight.add(cid)
        elif e.event == "SIM_DONE":
            if cid not in in_flight:
                raise AssertionError(f"SIM_DONE for candidate {cid} that is not in flight")
            in_flight.remove(cid)
            simulated += 1
        elif e.event in ("RANK", "STOP"):
            f = e.fields()
            if int(f["queued"]) != len(queued) or int(f["in_flight"]) != len(in_flight):
                raise AssertionError(f"{e.event} at {e.clock}: reported queued={f['queued']} "
                                     f"in_flight={f['in_flight']}, replay has {len(queued)}/{len(in_flight)}")
            if int(f["generated"]) != simulated + len(queued) + len(in_flight) + discarded:
                raise AssertionError(f"{e.event} at {e.clock}: conservation violated")
            checks += 1
    if len(seen) != simulated + len(queued) + len(in_flight) + discarded:
        raise AssertionError("final conservation violated")
    return checks
