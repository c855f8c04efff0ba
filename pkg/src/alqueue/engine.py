"""The generate / prioritize / simulate / fine-tune control loop.

One coordinator owns every queue, dataset and model reference. Workers only
see (candidate, latency) messages and send back (candidate, s_is, cost). Two
drivers share the coordinator logic: a single-threaded discrete-event
simulation on a simulated clock, and a thread-pool driver on the wall clock.
"""

from __future__ import annotations

import enum
import heapq
import math
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import rng as rngmod
from . import surrogate as sg
from .acquisition import AcquisitionSpec, Mode, priorities, rank
from .core import Dataset, ScoredRecord, Thresholds, insert_unique, stable_subset, top_fraction
from .domain import Generator, LatencyModel, WorldSpec, fine_tune, oracle_strain, sample_candidates, validity_check
from .metrics import Event, MetricsRow, metrics_from_events

STAGES = ("Generate", "FineTune", "Prioritize", "Validate", "Simulate")


class ExecMode(str, enum.Enum):
    DES = "DeterministicEventSim"
    PARALLEL = "Parallel"


@dataclass(frozen=True)
class StageCosts:
    """Modeled durations (simulated seconds) of the coordinator and GPU stages."""
    generate_per_candidate: float = 0.25
    validate_per_candidate: float = 2.0
    finetune: float = 180.0
    retrain: float = 15.0
    rank_per_candidate: float = 0.005

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"stage cost {f.name} must be finite and >= 0")


@dataclass(frozen=True)
class RunConfig:
    n_target: int = 1000
    seed: int = 0
    acquisition: AcquisitionSpec = field(default_factory=AcquisitionSpec)
    ft_fraction: float = 0.5
    ft_trigger: int = 32
    ft_counts: str = "results"     # "results" or "stable": which new results advance the trigger
    ft_eta: float = 0.5
    gen_batch: int = 64
    retrain_batch: int | None = 1  # None disables retraining after the initial fit
    workers: int = 48
    mode: ExecMode = ExecMode.DES
    latency: LatencyModel = field(default_factory=LatencyModel)
    thresholds: Thresholds = field(default_factory=Thresholds)
    costs: StageCosts = field(default_factory=StageCosts)
    trees: sg.TreeParams = field(default_factory=sg.TreeParams)
    stale_after: int = 0           # drop queued candidates this many generator versions old; 0 keeps them
    time_scale: float = 0.0        # parallel mode: real seconds slept per simulated latency second

    def __post_init__(self):
        object.__setattr__(self, "mode", ExecMode(self.mode))
        if self.n_target < 1:
            raise ValueError("n_target must be >= 1")
        if not 0 < self.ft_fraction <= 1:
            raise ValueError("ft_fraction must be in (0, 1]")
        if self.ft_trigger < 1:
            raise ValueError("ft_trigger must be >= 1")
        if self.ft_counts not in ("results", "stable"):
            raise ValueError("ft_counts must be 'results' or 'stable'")
        if not 0 <= self.ft_eta <= 1:
            raise ValueError("ft_eta must be in [0, 1]")
        if self.gen_batch < 1 or self.workers < 1:
            raise ValueError("gen_batch and workers must be >= 1")
        if self.retrain_batch is not None and self.retrain_batch < 1:
            raise ValueError("retrain_batch must be >= 1 or None")
        if self.stale_after < 0 or self.time_scale < 0:
            raise ValueError("stale_after and time_scale must be >= 0")
        self.latency.draw(np.random.default_rng(0))  # rejects unknown latency kinds up front

    @property
    def trains_surrogate(self) -> bool:
        return self.acquisition.uses_surrogate


class TimingLedger:
    def __init__(self):
        self.seconds = {s: 0.0 for s in STAGES}

    def account(self, stage: str, cost: float) -> None:
        if stage not in self.seconds:
            raise KeyError(f"unknown stage {stage!r}")
        self.seconds[stage] += float(cost)

    @property
    def total(self) -> float:
        return math.fsum(self.seconds.values())

    def shares(self) -> dict[str, float]:
        tot = self.total
        return {s: (v / tot if tot > 0 else 0.0) for s, v in self.seconds.items()}


@dataclass
class Queued:
    record: ScoredRecord
    priority: float = math.nan
    model_version: int | None = None


@dataclass
class RunState:
    q_gl: deque = field(default_factory=deque)
    q_ul: deque = field(default_factory=deque)
    d_s: Dataset = field(default_factory=Dataset)
    in_flight: dict = field(default_factory=dict)  # id -> Queued
    model: sg.SurrogateEnsemble | None = None
    model_version: int | None = None
    generator: Generator | None = None
    clock: float = 0.0
    counters: dict = field(default_factory=lambda: dict.fromkeys(
        ("generated", "simulated", "stable", "duplicates", "invalid", "stale"), 0))
    ledger: TimingLedger = field(default_factory=TimingLedger)
    events: list = field(default_factory=list)
    blocked_keys: set = field(default_factory=set)  # pretraining keys
    in_flight_keys: set = field(default_factory=set)
    dup_cost: float = 0.0

    def emit(self, event: str, cid: int | None = None, detail: str = "", *, model_version="current",
             generator_version="current") -> None:
        mv = self.model_version if model_version == "current" else model_version
        gv = (self.generator.version if self.generator is not None else None) \
            if generator_version == "current" else generator_version
        self.events.append(Event(self.clock, event, cid, mv, gv, detail))

    @property
    def queued(self) -> int:
        return len(self.q_gl) + len(self.q_ul)

    def census(self) -> str:
        c = self.counters
        return (f"generated={c['generated']};simulated={c['simulated']};queued={self.queued};"
                f"in_flight={len(self.in_flight)};discarded={c['duplicates'] + c['invalid'] + c['stale']}")

    def check_conservation(self) -> None:
        c = self.counters
        rhs = c["simulated"] + self.queued + len(self.in_flight) + c["duplicates"] + c["invalid"] + c["stale"]
        if c["generated"] != rhs:
            raise AssertionError(f"conservation violated at clock {self.clock}: {self.census()}")


def pop_next(state: RunState) -> Queued | None:
    """Head of Q_UL, skipping (and discarding) keys already simulated, in flight or pretrained."""
    while state.q_ul:
        q = state.q_ul.popleft()
        key = q.record.key
        if key in state.d_s or key in state.in_flight_keys or key in state.blocked_keys:
            state.counters["duplicates"] += 1
            state.ledger.account("Validate", state.dup_cost)
            state.emit("DISCARD_DUP", q.record.id, f"key={key}")
            continue
        return q
    return None


@dataclass
class RunResult:
    config: RunConfig
    d_s: Dataset
    d_s_star: Dataset
    events: list
    ledger: TimingLedger
    counters: dict
    metrics: list[MetricsRow]
    model: sg.SurrogateEnsemble | None
    model_version: int | None
    generator: Generator
    clock: float
    wall_seconds: float


class WorkflowAborted(RuntimeError):
    def __init__(self, msg: str, events: list):
        super().__init__(msg)
        self.events = events


class Workflow:
    """Coordinator state transitions, shared by both drivers."""

    def __init__(self, cfg: RunConfig, world: WorldSpec, pretrain: Dataset, holdout: Dataset | None = None,
                 on_model: Callable[[int, sg.SurrogateEnsemble], None] | None = None):
        if len(pretrain) == 0 or any(r.s_is is None for r in pretrain):
            raise ValueError("pretraining data must be non-empty and fully labelled")
        self.cfg = cfg
        self.world = world
        self.pretrain = pretrain
        self.holdout = holdout
        self.on_model = on_model
        self.state = RunState(generator=world.init_generator, blocked_keys=pretrain.keys(),
                              dup_cost=cfg.costs.validate_per_candidate)
        known = pretrain.ids() + (holdout.ids() if holdout is not None else [])
        self.next_id = max(known) + 1
        self.rng_gen = rngmod.stream(cfg.seed, rngmod.RUN_GENERATE)
        self.rng_lat = rngmod.stream(cfg.seed, rngmod.RUN_LATENCY)
        self.rng_ft = rngmod.stream(cfg.seed, rngmod.RUN_FINETUNE)
        self.X_pt = pretrain.embeddings()
        self.y_pt = pretrain.column("s_is")
        self.X_s = np.empty((cfg.n_target, self.X_pt.shape[1]))
        self.y_s = np.empty(cfg.n_target)
        self.rank_passes = 0
        self.fit_rows = 0          # |D_S| used by the latest (started) retrain
        self.ft_progress = 0       # results counted toward the next fine-tune
        self.stopped = False

    # --- model ------------------------------------------------------------

    def _fit(self, n_rows: int) -> None:
        s = self.state
        X = np.concatenate([self.X_pt, self.X_s[:n_rows]])
        y = np.concatenate([self.y_pt, self.y_s[:n_rows]])
        version = 0 if s.model_version is None else s.model_version + 1
        seed = int(rngmod.stream(self.cfg.seed, rngmod.RUN_SURROGATE, version).integers(2**63))
        model = sg.fit_arrays(X, y, self.cfg.trees, seed)
        err = "" if self.holdout is None else repr(sg.holdout_rmse(model, self.holdout))
        s.model, s.model_version = model, version  # atomic swap on the coordinator
        s.emit("RETRAIN", detail=f"rows={len(y)};results={n_rows};rmse={err}")
        if self.on_model is not None:
            self.on_model(version, model)

    def initialize(self) -> None:
        if self.cfg.trains_surrogate:
            self._fit(0)

    def retrain_due(self) -> bool:
        b = self.cfg.retrain_batch
        return (self.cfg.trains_surrogate and b is not None
                and sg.needs_retrain(len(self.state.d_s) - self.fit_rows, b))

    # --- producer -----------------------------------------------------------

    def wants_generation(self) -> bool:
        return self.state.queued < 2 * self.cfg.gen_batch

    def generation_cost(self) -> tuple[float, float]:
        n, c = self.cfg.gen_batch, self.cfg.costs
        return n * c.generate_per_candidate, n * c.validate_per_candidate

    def generate(self) -> None:
        s = self.state
        cands = sample_candidates(s.generator, self.cfg.gen_batch, self.rng_gen, self.world, self.next_id)
        self.next_id += len(cands)
        valid = []
        for c in cands:
            s.counters["generated"] += 1
            s.emit("GEN", c.id)
            if validity_check(c):
                valid.append(c)
            else:
                s.counters["invalid"] += 1
                s.emit("DISCARD_INVALID", c.id)
        for r in self.world.score_candidates(valid):
            s.q_gl.append(Queued(r))

    # --- fine-tuning --------------------------------------------------------

    def wants_finetune(self) -> bool:
        return self.ft_progress >= self.cfg.ft_trigger and len(self.state.d_s) >= self.state.generator.K

    def prepare_finetune(self) -> Generator:
        self.ft_progress = 0
        elite = top_fraction(self.state.d_s, self.cfg.ft_fraction, "s_is", lower_is_better=True)
        if len(elite) < self.state.generator.K:
            # small datasets: fall back to the K best so the refit stays well-posed
            elite = Dataset(list(top_fraction(self.state.d_s, 1.0))[:self.state.generator.K])
        return fine_tune(self.state.generator, elite, self.rng_ft, self.cfg.ft_eta)

    def install_generator(self, g: Generator, n_elite_from: int) -> None:
        s = self.state
        s.generator = g
        s.emit("FINETUNE", detail=f"results={n_elite_from};frac={self.cfg.ft_fraction!r}")
        if self.cfg.stale_after:
            floor = g.version - self.cfg.stale_after + 1
            for name in ("q_gl", "q_ul"):
                keep = deque()
                for q in getattr(s, name):
                    if q.record.candidate.generator_version < floor:
                        s.counters["stale"] += 1
                        s.emit("DISCARD_STALE", q.record.id)
                    else:
                        keep.append(q)
                setattr(s, name, keep)

    # --- prioritization -----------------------------------------------------

    def wants_rank(self) -> bool:
        return bool(self.state.q_gl) or self.retrain_due()

    def begin_rank(self) -> tuple[int | None, float]:
        """Snapshot the training rows for this pass; returns (rows or None, modeled cost)."""
        c = self.cfg.costs
        rows = None
        cost = c.rank_per_candidate * self.state.queued
        if self.retrain_due():
            rows = len(self.state.d_s)
            self.fit_rows = rows
            cost += c.retrain
        return rows, cost

    def finish_rank(self, rows: int | None) -> None:
        s = self.state
        if rows is not None:
            self._fit(rows)
        queue = list(s.q_ul) + list(s.q_gl)
        s.q_gl.clear()
        self.rank_passes += 1
        if queue:
            recs = [q.record for q in queue]
            ids = np.array([r.id for r in recs], dtype=np.int64)
            spec = self.cfg.acquisition
            mean = spread = None
            if spec.uses_surrogate:
                mean, spread = s.model.predict_batch(np.stack([r.candidate.embedding for r in recs]))
            prio = priorities(spec, ids, mean, spread,
                              np.array([r.s_sa for r in recs]), np.array([r.s_t for r in recs]),
                              seed=self.cfg.seed, rank_pass=self.rank_passes)
            order = rank(ids, prio)
            s.q_ul = deque(Queued(recs[i], float(prio[i]), s.model_version) for i in order)
        else:
            s.q_ul = deque()
        s.emit("RANK", detail=f"pass={self.rank_passes};{s.census()}")

    # --- workers ------------------------------------------------------------

    def dispatch(self) -> tuple[Queued, float] | None:
        s = self.state
        q = pop_next(s)
        if q is None:
            return None
        latency = self.cfg.latency.draw(self.rng_lat)
        s.in_flight[q.record.id] = q
        s.in_flight_keys.add(q.record.key)
        s.emit("POP", q.record.id, f"priority={q.priority!r};latency={latency!r}",
               model_version=q.model_version)
        return q, latency

    def complete(self, cid: int, s_is: float, cost: float) -> None:
        s = self.state
        q = s.in_flight.pop(cid)
        s.in_flight_keys.discard(q.record.key)
        rec = q.record
        rec.record_strain(s_is)
        s.ledger.account("Simulate", cost)
        if not insert_unique(s.d_s, rec):
            raise AssertionError(f"duplicate key reached D_S for candidate {cid}")
        n = len(s.d_s) - 1
        self.X_s[n] = rec.candidate.embedding
        self.y_s[n] = rec.s_is
        stable = self.cfg.thresholds.passes(rec)
        s.counters["simulated"] += 1
        s.counters["stable"] += stable
        if self.cfg.ft_counts == "results" or stable:
            self.ft_progress += 1
        s.emit("SIM_DONE", cid, f"s_is={rec.s_is!r};s_sa={rec.s_sa!r};s_t={rec.s_t!r};stable={int(stable)}",
               generator_version=rec.candidate.generator_version)
        if len(s.d_s) == self.cfg.n_target:
            self.stopped = True
            c = s.counters
            s.emit("STOP", detail=f"{s.census()};stable={c['stable']};duplicates={c['duplicates']};"
                                  f"invalid={c['invalid']};stale={c['stale']}")

    def result(self, wall: float) -> RunResult:
        s = self.state
        return RunResult(self.cfg, s.d_s, stable_subset(s.d_s, self.cfg.thresholds), s.events, s.ledger,
                         dict(s.counters), metrics_from_events(s.events), s.model, s.model_version,
                         s.generator, s.clock, wall)


# --- drivers ------------------------------------------------------------------

_GEN, _FT, _RANK, _SIM = range(4)


def _run_des(wf: Workflow) -> None:
    s = wf.state
    cfg = wf.cfg
    heap: list = []
    seq = 0
    gpu_busy = coord_busy = False
    free = cfg.workers

    def push(dt, kind, payload):
        nonlocal seq
        heapq.heappush(heap, (s.clock + dt, seq, kind, payload))
        seq += 1

    wf.initialize()
    while not wf.stopped:
        if not gpu_busy:
            if wf.wants_finetune():
                n = len(s.d_s)
                push(cfg.costs.finetune, _FT, (wf.prepare_finetune(), n))
                s.ledger.account("FineTune", cfg.costs.finetune)
                gpu_busy = True
            elif wf.wants_generation():
                g_cost, v_cost = wf.generation_cost()
                push(g_cost + v_cost, _GEN, None)
                s.ledger.account("Generate", g_cost)
                s.ledger.account("Validate", v_cost)
                gpu_busy = True
        if not coord_busy and wf.wants_rank():
            rows, cost = wf.begin_rank()
            push(cost, _RANK, rows)
            s.ledger.account("Prioritize", cost)
            coord_busy = True
        while free and s.q_ul:
            job = wf.dispatch()
            if job is None:
                break
            q, latency = job
            push(latency, _SIM, (q.record.id, latency))
            free -= 1
        if not heap:
            raise AssertionError("event queue drained before reaching n_target")
        s.clock, _, kind, payload = heapq.heappop(heap)
        if kind == _GEN:
            wf.generate()
            gpu_busy = False
        elif kind == _FT:
            wf.install_generator(*payload)
            gpu_busy = False
        elif kind == _RANK:
            wf.finish_rank(payload)
            coord_busy = False
        else:
            cid, latency = payload
            q = s.in_flight[cid]
            wf.complete(cid, oracle_strain(q.record.candidate, wf.world), latency)
            free += 1
        s.check_conservation()


def _simulate(cand, world, latency: float, time_scale: float) -> tuple[float, float]:
    t0 = time.perf_counter()
    s_is = oracle_strain(cand, world)
    if latency > 0 and time_scale > 0:
        time.sleep(latency * time_scale)
    return s_is, time.perf_counter() - t0


def _run_parallel(wf: Workflow) -> None:
    s = wf.state
    cfg = wf.cfg
    t0 = time.perf_counter()

    def tick():
        s.clock = time.perf_counter() - t0

    def timed(stage, fn, *args):
        a = time.perf_counter()
        out = fn(*args)
        s.ledger.account(stage, time.perf_counter() - a)
        tick()
        return out

    wf.initialize()
    futures = {}
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        try:
            while not wf.stopped:
                if wf.wants_finetune():
                    n = len(s.d_s)
                    timed("FineTune", lambda: wf.install_generator(wf.prepare_finetune(), n))
                if wf.wants_generation():
                    timed("Generate", wf.generate)
                if wf.wants_rank():
                    timed("Prioritize", lambda: wf.finish_rank(wf.begin_rank()[0]))
                while len(futures) < cfg.workers and s.q_ul:
                    job = wf.dispatch()
                    if job is None:
                        break
                    q, latency = job
                    fut = pool.submit(_simulate, q.record.candidate, wf.world, latency, cfg.time_scale)
                    futures[fut] = q.record.id
                if not futures:
                    continue
                done, _ = wait(futures, return_when=FIRST_COMPLETED)
                tick()
                for fut in sorted(done, key=lambda f: futures[f]):
                    cid = futures.pop(fut)
                    s_is, cost = fut.result()
                    if not wf.stopped:
                        wf.complete(cid, s_is, cost)
                s.check_conservation()
        finally:
            for fut in futures:
                fut.cancel()


def run_workflow(cfg: RunConfig, world: WorldSpec, pretrain: Dataset, holdout: Dataset | None = None,
                 on_model: Callable[[int, sg.SurrogateEnsemble], None] | None = None) -> RunResult:
    wf = Workflow(cfg, world, pretrain, holdout, on_model)
    t0 = time.perf_counter()
    try:
        if cfg.mode is ExecMode.DES:
            _run_des(wf)
        else:
            _run_parallel(wf)
    except Exception as exc:
        wf.state.emit("STOP", detail=f"aborted={type(exc).__name__};{wf.state.census()}")
        raise WorkflowAborted(f"run aborted: {exc}", wf.state.events) from exc
    return wf.result(time.perf_counter() - t0)


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
