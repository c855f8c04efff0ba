"""Presets, config files, run directories, the offline reordering experiment,
and cross-run comparison."""

from __future__ import annotations

import csv
import dataclasses
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rngmod
from . import surrogate as sg
from .acquisition import AcquisitionSpec, Mode, priorities, rank
from .core import Dataset, Thresholds, read_dataset_csv, write_dataset_csv
from .domain import LatencyModel, WorldSpec, build_datasets, create_world, read_meta, read_world, write_world
from .engine import ExecMode, RunConfig, RunResult, StageCosts, WorkflowAborted, run_workflow
from .metrics import MetricsRow, check_conservation, metrics_from_events, read_events, read_metrics, \
    write_events, write_metrics

AL_RETRAIN_BATCH = 8
STALE_AFTER = 1
CHECKPOINT_STRIDE = 25


# --- presets ----------------------------------------------------------------

@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    deltas: dict = field(default_factory=dict)
    workflow: bool = True

    @property
    def active_learning(self) -> bool:
        return self.workflow and AcquisitionSpec(**self.deltas.get("acquisition", {})).uses_surrogate

    def config(self, **overrides) -> RunConfig:
        d = dict(self.deltas)
        d["acquisition"] = AcquisitionSpec(**d.get("acquisition", {}))
        d.update(overrides)
        return RunConfig(**d)


def _wf(name, description, acq, ft_fraction=0.5):
    acq = dict(acq)
    learns = AcquisitionSpec(**acq).uses_surrogate
    deltas = {"acquisition": acq, "ft_fraction": ft_fraction, "stale_after": STALE_AFTER,
              "retrain_batch": AL_RETRAIN_BATCH if learns else None}
    return Preset(name, description, deltas)


def _reorder(name, description, acq):
    return Preset(name, description, {"acquisition": dict(acq)}, workflow=False)


FIFO = {"mode": Mode.FIFO}
EXPLOIT = {"mode": Mode.EXPLOIT}
THIRD = 1.0 / 3.0

PRESETS: dict[str, Preset] = {p.name: p for p in [
    _reorder("random-selection", "offline reordering, uniform random order", {"mode": Mode.RANDOM}),
    _reorder("exploit-only", "offline reordering by predicted strain", EXPLOIT),
    _reorder("ucb-small", "offline reordering, confidence bound lambda=0.1", {"mode": Mode.LCB, "lam": 0.1}),
    _reorder("ucb-large", "offline reordering, confidence bound lambda=2.0", {"mode": Mode.LCB, "lam": 2.0}),
    _reorder("explore-only", "offline reordering by ensemble spread", {"mode": Mode.EXPLORE}),
    _wf("basic-control", "workflow, generation order, fine-tune on top 50%", FIFO),
    _wf("basic-al", "workflow, predicted-strain order, fine-tune on top 50%", EXPLOIT),
    _wf("control-small-frac", "workflow, generation order, fine-tune on top 10%", FIFO, 0.1),
    _wf("control-large-frac", "workflow, generation order, fine-tune on top 90%", FIFO, 0.9),
    _wf("al-small-frac", "workflow, predicted-strain order, fine-tune on top 10%", EXPLOIT, 0.1),
    _wf("al-large-frac", "workflow, predicted-strain order, fine-tune on top 90%", EXPLOIT, 0.9),
    _wf("acq-sa-only", "workflow ordered by synthesizability score", {"mode": Mode.MULTI, "w_is": 0.0, "w_sa": 1.0}),
    _wf("acq-t-only", "workflow ordered by novelty distance", {"mode": Mode.MULTI, "w_is": 0.0, "w_t": 1.0}),
    _wf("acq-is-sa", "workflow ordered by 1/2 strain + 1/2 synthesizability",
        {"mode": Mode.MULTI, "w_is": 0.5, "w_sa": 0.5}),
    _wf("acq-is-t", "workflow ordered by 1/2 strain + 1/2 novelty distance",
        {"mode": Mode.MULTI, "w_is": 0.5, "w_t": 0.5}),
    _wf("acq-is-sa-t", "workflow ordered by equal thirds of all three scores",
        {"mode": Mode.MULTI, "w_is": THIRD, "w_sa": THIRD, "w_t": 1.0 - 2 * THIRD}),
    _wf("wf-ucb-small", "workflow, confidence bound lambda=0.1", {"mode": Mode.LCB, "lam": 0.1}),
    _wf("wf-ucb-large", "workflow, confidence bound lambda=2.0", {"mode": Mode.LCB, "lam": 2.0}),
    _wf("wf-explore-only", "workflow ordered by ensemble spread", {"mode": Mode.EXPLORE}),
]}

REORDER_PRESETS = tuple(n for n, p in PRESETS.items() if not p.workflow)
WORKFLOW_PRESETS = tuple(n for n, p in PRESETS.items() if p.workflow)
AL_PRESETS = tuple(n for n in WORKFLOW_PRESETS if PRESETS[n].active_learning)


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(PRESETS)}") from None


# --- flat key = value config -----------------------------------------------

_NESTED = {"acquisition": AcquisitionSpec, "latency": LatencyModel, "thresholds": Thresholds,
           "costs": StageCosts, "trees": sg.TreeParams}
# config-file spelling -> dataclass field
_ALIASES = {"acquisition.lambda": "acquisition.lam"}
_SPELLING = {v: k for k, v in _ALIASES.items()}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "value"):
        return str(v.value)
    return str(v)


def config_items(cfg: RunConfig) -> list[tuple[str, str]]:
    out = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _NESTED:
            out += [(_SPELLING.get(f"{f.name}.{g.name}", f"{f.name}.{g.name}"), _fmt(getattr(v, g.name)))
                    for g in dataclasses.fields(v)]
        else:
            out.append((f.name, _fmt(v)))
    return out


def _parse_value(text: str, default):
    text = text.strip()
    if text.lower() == "none":
        return None
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1")
    if isinstance(default, int) and not hasattr(default, "value"):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if default is None:
        # optional integers (retrain_batch, max_bins)
        return int(text)
    return text


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        k, _, v = line.partition("=")
        out[k.strip()] = v.strip()
    return out


def apply_config(cfg: RunConfig, values: dict[str, str]) -> RunConfig:
    """Apply flat ``key = value`` overrides (``section.field`` for nested configs)."""
    top: dict = {}
    nested: dict[str, dict] = {}
    names = {f.name for f in dataclasses.fields(cfg)}
    for key, text in values.items():
        head, _, sub = _ALIASES.get(key, key).partition(".")
        if head not in names:
            raise KeyError(f"unknown config key {key!r}")
        if sub:
            if head not in _NESTED:
                raise KeyError(f"{head!r} has no sub-fields")
            obj = getattr(cfg, head)
            if sub not in {f.name for f in dataclasses.fields(obj)}:
                raise KeyError(f"unknown config key {key!r}")
            nested.setdefault(head, {})[sub] = _parse_value(text, getattr(obj, sub))
        else:
            if head in _NESTED:
                raise KeyError(f"{head!r} needs a sub-field, e.g. {head}.<name>")
            if head == "mode":
                top[head] = {"des": ExecMode.DES, "parallel": ExecMode.PARALLEL}.get(text.lower(), text)
            else:
                top[head] = _parse_value(text, getattr(cfg, head))
    for head, kv in nested.items():
        top[head] = dataclasses.replace(getattr(cfg, head), **kv)
    return dataclasses.replace(cfg, **top)


def load_config_file(cfg: RunConfig, path: str | Path) -> RunConfig:
    return apply_config(cfg, parse_config(Path(path).read_text()))


# --- worlds -------------------------------------------------------------------

@dataclass
class WorldBundle:
    world: WorldSpec
    pretrain: Dataset
    holdout: Dataset
    pool: Dataset | None = None


def make_world(seed: int, out_dir: str | Path | None = None) -> WorldBundle:
    world = create_world(seed)
    reference, holdout, pool = build_datasets(world)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_world(world, out)
        write_dataset_csv(reference, out / "reference.csv")
        write_dataset_csv(holdout, out / "holdout.csv")
        write_dataset_csv(pool, out / "pool.csv")
    return WorldBundle(world, reference, holdout, pool)


def load_world(world_dir: str | Path, with_pool: bool = False) -> WorldBundle:
    d = Path(world_dir)
    for name in ("world.meta", "world.csv", "reference.csv", "holdout.csv"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} missing; create it with `alqueue world`")
    meta = read_meta(d / "world.meta")
    if meta.get("prng") != rngmod.PRNG_VERSION:
        raise ValueError(f"world was written with PRNG {meta.get('prng')!r}, this build uses {rngmod.PRNG_VERSION!r}")
    world = read_world(d)
    holdout = read_dataset_csv(d / "holdout.csv", world.build_candidates)
    pool = read_dataset_csv(d / "pool.csv", world.build_candidates) if with_pool else None
    return WorldBundle(world, world.reference_set, holdout, pool)


# --- workflow runs ------------------------------------------------------------

def write_summary(path: Path, header: dict, result: RunResult) -> None:
    c = result.counters
    last = result.metrics[-1] if result.metrics else None
    lines = [(k, str(v)) for k, v in header.items()]
    lines += [(f"config.{k}", v) for k, v in config_items(result.config)]
    lines += [(f"count.{k}", str(v)) for k, v in c.items()]
    lines += [("cum_stable", str(len(result.d_s_star))),
              ("n_simulated", str(len(result.d_s))),
              ("stable_fraction", repr(len(result.d_s_star) / max(len(result.d_s), 1))),
              ("holdout_rmse", "" if last is None or last.holdout_rmse is None else repr(last.holdout_rmse)),
              ("model_version", _fmt(result.model_version)),
              ("generator_version", str(result.generator.version)),
              ("clock", repr(result.clock)),
              ("wall_seconds", f"{result.wall_seconds:.3f}")]
    shares = result.ledger.shares()
    for stage, secs in result.ledger.seconds.items():
        lines.append((f"ledger.{stage}.seconds", repr(secs)))
        lines.append((f"ledger.{stage}.share", f"{100 * shares[stage]:.3f}%"))
    lines.append(("ledger.total.seconds", repr(result.ledger.total)))
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines))


def read_summary(path: str | Path) -> dict[str, str]:
    return read_meta(path)


def run_preset(name: str, seed: int, out_dir: str | Path, world_dir: str | Path | None = None, *,
               bundle: WorldBundle | None = None, config_file: str | Path | None = None,
               overrides: dict | None = None, checkpoints: str = "stride") -> RunResult:
    """Run one workflow preset and write events.csv, metrics.csv, summary.txt and checkpoints.

    Precedence: preset deltas < config file < ``overrides``. ``checkpoints`` is
    ``all``, ``stride`` (every 25th model plus the last) or ``none``.
    """
    preset = get_preset(name)
    if not preset.workflow:
        raise ValueError(f"{name!r} is an offline reordering preset; use reorder_experiment")
    if checkpoints not in ("all", "stride", "none"):
        raise ValueError("checkpoints must be all, stride or none")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if bundle is None:
        if world_dir is None:
            world_dir = out / "world"
            if not (world_dir / "world.meta").exists():
                make_world(seed, world_dir)
        bundle = load_world(world_dir)
    cfg = preset.config(seed=seed)
    if config_file is not None:
        cfg = load_config_file(cfg, config_file)
    if overrides:
        cfg = apply_config(cfg, {k: str(v) for k, v in overrides.items()})

    ckpt = out / "checkpoints"
    models: dict[int, sg.SurrogateEnsemble] = {}
    if checkpoints != "none":
        ckpt.mkdir(exist_ok=True)
        for old in ckpt.glob("model_*.trees"):
            old.unlink()

    def on_model(version, model):
        if checkpoints == "all" or version % CHECKPOINT_STRIDE == 0:
            sg.save(model, ckpt / f"model_{version}.trees")
        models["last"] = (version, model)

    try:
        result = run_workflow(cfg, bundle.world, bundle.pretrain, bundle.holdout,
                              on_model if checkpoints != "none" else None)
    except WorkflowAborted as exc:
        write_events(exc.events, out / "events.csv")
        raise
    if "last" in models:
        v, m = models["last"]
        sg.save(m, ckpt / f"model_{v}.trees")
    write_events(result.events, out / "events.csv")
    write_metrics(result.metrics, out / "metrics.csv")
    header = {"preset": name, "description": preset.description, "seed": seed,
              "world": "" if world_dir is None else str(world_dir), "prng": rngmod.PRNG_VERSION}
    write_summary(out / "summary.txt", header, result)
    return result


def replay(run_dir: str | Path, out_path: str | Path | None = None) -> tuple[list[MetricsRow], bool]:
    """Recompute metrics from events.csv; returns (rows, byte-identical to metrics.csv)."""
    d = Path(run_dir)
    events = read_events(d / "events.csv")
    check_conservation(events)
    rows = metrics_from_events(events)
    target = Path(out_path) if out_path is not None else d / "metrics.replay.csv"
    write_metrics(rows, target)
    same = (d / "metrics.csv").exists() and (d / "metrics.csv").read_bytes() == target.read_bytes()
    return rows, same


# --- comparison -----------------------------------------------------------------

@dataclass
class RunSummary:
    path: Path
    preset: str
    seed: str
    cum_stable: int
    stable_fraction: float
    holdout_rmse: float | None
    prioritize_share: float
    series: list[MetricsRow]


@dataclass
class Comparison:
    runs: list[RunSummary]
    aligned_n: list[int]
    group_means: dict[str, float]
    ratios: dict[str, float]
    truncated: bool

    def rows(self) -> list[list[str]]:
        base = self.runs[0]
        out = [["run", "preset", "seed", "cum_stable", "stable_fraction", "holdout_rmse",
                "prioritize_share", "delta_cum_stable", "delta_holdout_rmse"]]
        for r in self.runs:
            d_rmse = "" if r.holdout_rmse is None or base.holdout_rmse is None \
                else repr(r.holdout_rmse - base.holdout_rmse)
            out.append([str(r.path), r.preset, r.seed, str(r.cum_stable), repr(r.stable_fraction),
                        "" if r.holdout_rmse is None else repr(r.holdout_rmse), repr(r.prioritize_share),
                        str(r.cum_stable - base.cum_stable), d_rmse])
        return out

    def series_rows(self) -> list[list[str]]:
        head = ["n_simulated"] + [f"{r.path.name}:cum_stable" for r in self.runs]
        body = []
        for i, n in enumerate(self.aligned_n):
            body.append([str(n)] + [str(r.series[i].cum_stable) for r in self.runs])
        return [head] + body

    def text(self) -> str:
        rows = self.rows()
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
        if len(self.group_means) > 1:
            lines.append("")
            ref = next(iter(self.group_means))
            for g, m in self.group_means.items():
                lines.append(f"mean cum_stable {g}: {m:.1f}  (ratio to {ref}: {self.ratios[g]:.3f})")
        if self.truncated:
            lines.append(f"series truncated to n_simulated <= {self.aligned_n[-1] if self.aligned_n else 0}")
        return "\n".join(lines) + "\n"


def _load_run(d: Path) -> RunSummary:
    for name in ("summary.txt", "metrics.csv"):
        if not (d / name).exists():
            raise FileNotFoundError(f"{d / name} missing")
    s = read_summary(d / "summary.txt")
    try:
        share = float(s["ledger.Prioritize.share"].rstrip("%")) / 100
        rmse = float(s["holdout_rmse"]) if s.get("holdout_rmse") else None
        return RunSummary(d, s["preset"], s.get("seed", ""), int(s["cum_stable"]), float(s["stable_fraction"]),
                          rmse, share, read_metrics(d / "metrics.csv"))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{d}: corrupt run summary ({exc})") from exc


def compare_runs(run_dirs: Sequence[str | Path], out_dir: str | Path | None = None) -> Comparison:
    if len(run_dirs) < 2:
        raise ValueError("compare_runs needs at least two run directories")
    runs = [_load_run(Path(d)) for d in run_dirs]
    n_sets = [[m.n_simulated for m in r.series] for r in runs]
    shortest = min(len(s) for s in n_sets)
    truncated = any(len(s) != shortest for s in n_sets)
    if truncated:
        warnings.warn(f"runs differ in length; series truncated to the first {shortest} checkpoints")
    aligned = n_sets[0][:shortest]
    if any(s[:shortest] != aligned for s in n_sets):
        raise ValueError("checkpoint cadence differs between runs")
    groups: dict[str, list[int]] = {}
    for r in runs:
        groups.setdefault(r.preset, []).append(r.cum_stable)
    means = {g: float(np.mean(v)) for g, v in groups.items()}
    ref = means[runs[0].preset]
    ratios = {g: (m / ref if ref > 0 else math.inf) for g, m in means.items()}
    cmp = Comparison(runs, aligned, means, ratios, truncated)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "comparison.csv", cmp.rows())
        _write_csv(out / "comparison_series.csv", cmp.series_rows())
        (out / "comparison.txt").write_text(cmp.text())
    return cmp


def _write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


# --- offline reordering -----------------------------------------------------------

REORDER_COLUMNS = ("n_acquired", "cum_stable", "holdout_rmse")


@dataclass
class ReorderSeries:
    strategy: str
    seed: int
    n_acquired: np.ndarray
    cum_stable: np.ndarray
    holdout_rmse: np.ndarray
    metrics: list[MetricsRow]

    def at(self, n: int) -> int:
        """Index of the first checkpoint with at least ``n`` acquired records."""
        i = int(np.searchsorted(self.n_acquired, n))
        if i >= len(self.n_acquired):
            raise ValueError(f"series never reaches {n} records")
        return i


def reorder_experiment(pool: Dataset, strategy: AcquisitionSpec, batch: int = 200, warm: int = 200,
                       seeds: Sequence[int] = range(5), holdout: Dataset | None = None,
                       thresholds: Thresholds = Thresholds(), trees: sg.TreeParams = sg.TreeParams(),
                       name: str = "") -> list[ReorderSeries]:
    """Offline active learning over a fully labelled pool.

    Starts from ``warm`` random records, then repeatedly refits on everything
    acquired, ranks the remainder and takes the best ``batch``. A checkpoint is
    recorded after the warm start and after every acquisition.
    """
    n = len(pool)
    if warm < 1 or batch < 1:
        raise ValueError("warm and batch must be >= 1")
    if warm + batch > n:
        raise ValueError(f"warm + batch ({warm + batch}) exceeds the pool size {n}")
    if any(r.s_is is None for r in pool):
        raise ValueError("pool must be fully labelled")
    X = pool.embeddings()
    y = pool.column("s_is")
    sa = pool.column("s_sa")
    st = pool.column("s_t")
    ids = np.array(pool.ids(), dtype=np.int64)
    stable = (y < thresholds.t_is) & (sa < thresholds.t_sa) & (st < thresholds.t_t)
    Xh = holdout.embeddings() if holdout is not None else None
    yh = holdout.column("s_is") if holdout is not None else None

    out = []
    for seed in seeds:
        g = rngmod.stream(seed, rngmod.REORDER)
        order = list(g.permutation(n)[:warm])
        taken = np.zeros(n, dtype=bool)
        taken[order] = True
        n_acq, cum, err = [], [], []
        step = 0
        while True:
            acq = np.array(order)
            model = sg.fit_arrays(X[acq], y[acq], trees, int(rngmod.stream(seed, rngmod.REORDER, 1, step).integers(2**63)))
            n_acq.append(len(acq))
            cum.append(int(stable[acq].sum()))
            err.append(sg.rmse(yh, model.predict_batch(Xh)[0]) if Xh is not None else math.nan)
            rest = np.flatnonzero(~taken)
            if rest.size == 0:
                break
            step += 1
            mean = spread = None
            if strategy.uses_surrogate:
                mean, spread = model.predict_batch(X[rest])
            prio = priorities(strategy, ids[rest], mean, spread, sa[rest], st[rest], seed=seed, rank_pass=step)
            pick = rest[rank(ids[rest], prio)[:batch]]
            taken[pick] = True
            order.extend(pick.tolist())
        acq = np.array(order)
        rows = []
        for a, c, e in zip(n_acq, cum, err):
            w = acq[max(0, a - 100):a]
            rows.append(MetricsRow(a, c, None if math.isnan(e) else e, float(sa[w].mean()), float(st[w].mean()), c / a))
        out.append(ReorderSeries(name or strategy.mode.value, seed, np.array(n_acq), np.array(cum), np.array(err), rows))
    return out


def mean_series(series: Sequence[ReorderSeries]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = series[0].n_acquired
    if any(not np.array_equal(s.n_acquired, n) for s in series):
        raise ValueError("series have different checkpoints")
    return n, np.mean([s.cum_stable for s in series], axis=0), np.mean([s.holdout_rmse for s in series], axis=0)


def write_reorder(series: Sequence[ReorderSeries], out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in series:
        rows = [REORDER_COLUMNS] + [(str(a), str(c), "" if math.isnan(e) else repr(float(e)))
                                    for a, c, e in zip(s.n_acquired, s.cum_stable, s.holdout_rmse)]
        _write_csv(out / f"reorder_{s.strategy}_seed{s.seed}.csv", rows)
    n, c, e = mean_series(series)
    rows = [REORDER_COLUMNS] + [(str(a), repr(float(b)), repr(float(x))) for a, b, x in zip(n, c, e)]
    _write_csv(out / f"reorder_{series[0].strategy}_mean.csv", rows)
