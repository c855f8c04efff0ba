import warnings

import numpy as np
import pytest

from alqueue import cli
from alqueue import harness as hz
from alqueue.acquisition import AcquisitionSpec, Mode
from alqueue.core import Dataset, Origin, ScoredRecord
from alqueue.engine import ExecMode, RunConfig
from alqueue.metrics import read_metrics

FAST = {"n_target": 40, "trees.n_trees": 20}

EXPECTED_PRESETS = ["random-selection", "exploit-only", "ucb-small", "ucb-large", "explore-only", "basic-control",
           "basic-al", "control-small-frac", "control-large-frac", "al-small-frac", "al-large-frac",
           "acq-sa-only", "acq-t-only", "acq-is-sa", "acq-is-t", "acq-is-sa-t", "wf-ucb-small",
           "wf-ucb-large", "wf-explore-only"]


def test_all_expected_presets_exist():
    assert sorted(hz.PRESETS) == sorted(EXPECTED_PRESETS)


@pytest.mark.parametrize("name,mode,frac,al", [
    ("basic-control", Mode.FIFO, 0.5, False),
    ("basic-al", Mode.EXPLOIT, 0.5, True),
    ("control-small-frac", Mode.FIFO, 0.1, False),
    ("al-large-frac", Mode.EXPLOIT, 0.9, True),
    ("acq-sa-only", Mode.MULTI, 0.5, False),
    ("wf-explore-only", Mode.EXPLORE, 0.5, True),
])
def test_preset_configs(name, mode, frac, al):
    c = hz.get_preset(name).config(seed=0)
    assert c.acquisition.mode is mode and c.ft_fraction == frac
    assert hz.PRESETS[name].active_learning is al
    assert (c.retrain_batch is not None) is al


def test_multiobjective_weights():
    a = hz.get_preset("acq-is-sa-t").config().acquisition
    assert (a.w_is, a.w_sa) == (pytest.approx(1 / 3), pytest.approx(1 / 3))
    assert a.w_is + a.w_sa + a.w_t == pytest.approx(1.0, abs=1e-12)
    assert hz.get_preset("wf-ucb-large").config().acquisition.lam == 2.0


def test_unknown_preset():
    with pytest.raises(KeyError):
        hz.get_preset("nope")


def test_config_round_trip_and_overrides():
    c = hz.get_preset("wf-ucb-small").config(seed=4)
    text = "".join(f"{k} = {v}\n" for k, v in hz.config_items(c))
    assert hz.apply_config(RunConfig(), hz.parse_config(text)) == c
    c2 = hz.apply_config(c, {"mode": "parallel", "retrain_batch": "none", "latency.median": "60",
                             "acquisition.lambda": "0.5"})
    assert c2.mode is ExecMode.PARALLEL and c2.retrain_batch is None
    assert c2.latency.median == 60.0 and c2.acquisition.lam == 0.5
    assert ("acquisition.lambda", "0.1") in hz.config_items(c)
    assert hz.apply_config(c, {"acquisition.lam": "0.5"}) == hz.apply_config(c, {"acquisition.lambda": "0.5"})
    for bad in ({"bogus": "1"}, {"latency": "3"}, {"latency.bogus": "1"}, {"n_target.x": "1"}):
        with pytest.raises(KeyError):
            hz.apply_config(c, bad)
    with pytest.raises(ValueError):
        hz.parse_config("no equals sign")


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, world_dir):
    out = tmp_path_factory.mktemp("run")
    hz.run_preset("basic-al", 0, out, world_dir, overrides=FAST, checkpoints="all")
    return out


def test_run_preset_outputs(run_dir):
    for name in ("events.csv", "metrics.csv", "summary.txt"):
        assert (run_dir / name).exists()
    assert list((run_dir / "checkpoints").glob("model_*.trees"))
    s = hz.read_summary(run_dir / "summary.txt")
    assert s["preset"] == "basic-al" and s["config.n_target"] == "40" and s["n_simulated"] == "40"
    assert s["config.acquisition.mode"] == "Exploit"
    shares = sum(float(s[f"ledger.{k}.share"].rstrip("%")) for k in ("Generate", "FineTune", "Prioritize",
                                                                      "Validate", "Simulate"))
    assert shares == pytest.approx(100.0, abs=0.01)


def test_metrics_rows(run_dir):
    rows = read_metrics(run_dir / "metrics.csv")
    assert [r.n_simulated for r in rows] == [10, 20, 30, 40]
    for r in rows:
        assert r.stable_fraction == r.cum_stable / r.n_simulated
        assert r.holdout_rmse is not None


def test_replay_is_byte_identical(run_dir):
    rows, same = hz.replay(run_dir)
    assert same and len(rows) == 4


def test_config_file_precedence(tmp_path, world_dir):
    f = tmp_path / "cfg.txt"
    f.write_text("n_target = 25\ntrees.n_trees = 10\nft_fraction = 0.3\n")
    r = hz.run_preset("basic-control", 1, tmp_path / "r", world_dir, config_file=f,
                      overrides={"n_target": 12}, checkpoints="none")
    assert len(r.d_s) == 12 and r.config.ft_fraction == 0.3
    assert not (tmp_path / "r" / "checkpoints").exists()


def test_run_preset_rejects_reorder_presets(tmp_path, world_dir):
    with pytest.raises(ValueError):
        hz.run_preset("exploit-only", 0, tmp_path, world_dir)


def test_compare_self_has_zero_deltas(run_dir, tmp_path):
    cmp = hz.compare_runs([run_dir, run_dir], tmp_path)
    for row in cmp.rows()[1:]:
        assert row[-2] == "0" and float(row[-1]) == 0.0
    assert (tmp_path / "comparison.csv").exists() and (tmp_path / "comparison.txt").exists()


def test_compare_truncates_with_warning(run_dir, tmp_path, world_dir):
    short = tmp_path / "short"
    hz.run_preset("basic-control", 0, short, world_dir, overrides={"n_target": 20}, checkpoints="none")
    with pytest.warns(UserWarning):
        cmp = hz.compare_runs([run_dir, short])
    assert cmp.aligned_n == [10, 20]
    assert cmp.ratios["basic-control"] == pytest.approx(cmp.group_means["basic-control"] / cmp.group_means["basic-al"])


def test_compare_errors(run_dir, tmp_path):
    with pytest.raises(ValueError):
        hz.compare_runs([run_dir])
    with pytest.raises(FileNotFoundError):
        hz.compare_runs([run_dir, tmp_path])


def test_load_world_matches_generated(world_dir, bundle):
    b = hz.load_world(world_dir, with_pool=True)
    assert b.pretrain.ids() == bundle.pretrain.ids()
    assert b.holdout.ids() == bundle.holdout.ids() and b.pool.ids() == bundle.pool.ids()
    assert [r.s_is for r in b.pool] == [r.s_is for r in bundle.pool]


def test_loaded_world_reproduces_in_memory_run(world_dir, bundle, tmp_path):
    a = hz.run_preset("basic-al", 2, tmp_path / "a", world_dir, overrides=FAST, checkpoints="none")
    b = hz.run_preset("basic-al", 2, tmp_path / "b", bundle=bundle, overrides=FAST, checkpoints="none")
    assert [e.row() for e in a.events] == [e.row() for e in b.events]


# --- offline reordering ------------------------------------------------------------

def _easy_pool(n=1200, seed=0):
    """Strain is a deterministic increasing function of the first embedding coordinate."""
    from alqueue.core import Candidate
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-1, 1, size=(n, 38))
    recs = []
    for i in range(n):
        c = Candidate(i, np.zeros(8), emb[i], frozenset({i % 64}), Origin.PRETRAINING, 0)
        recs.append(ScoredRecord(c, 0.0, 0.0, float(0.5 * (emb[i, 0] + 1))))
    return Dataset(recs)


def test_reorder_exhaustion_ignores_strategy():
    pool = _easy_pool(600)
    total = sum(r.s_is < 0.25 for r in pool)
    for mode in (Mode.EXPLOIT, Mode.RANDOM, Mode.EXPLORE):
        s = hz.reorder_experiment(pool, AcquisitionSpec(mode), batch=len(pool) - 100, warm=100, seeds=[0],
                                  trees=hz.sg.TreeParams(n_trees=10))
        assert len(s[0].n_acquired) == 2
        assert s[0].cum_stable[-1] == total


def _batches_to_90(series, total):
    return int(np.argmax(series.cum_stable >= 0.9 * total))


def test_exploit_finds_stable_items_faster_on_easy_pool():
    pool = _easy_pool()
    total = sum(r.s_is < 0.25 for r in pool)
    kw = dict(batch=100, warm=100, seeds=[0, 1, 2], trees=hz.sg.TreeParams(n_trees=20))
    ex = hz.reorder_experiment(pool, AcquisitionSpec(Mode.EXPLOIT), **kw)
    rnd = hz.reorder_experiment(pool, AcquisitionSpec(Mode.RANDOM), **kw)
    # brute-force optimum: all stable items first
    optimal = int(np.ceil(max(0.9 * total - 100, 0) / 100))
    for e, r in zip(ex, rnd):
        assert _batches_to_90(e, total) < _batches_to_90(r, total)
        assert _batches_to_90(e, total) <= optimal + 2


def test_reorder_errors():
    pool = _easy_pool(100)
    with pytest.raises(ValueError):
        hz.reorder_experiment(pool, AcquisitionSpec(), batch=95, warm=10, seeds=[0])
    with pytest.raises(ValueError):
        hz.reorder_experiment(pool, AcquisitionSpec(), batch=0, warm=10, seeds=[0])


def test_reorder_writes_files(tmp_path):
    s = hz.reorder_experiment(_easy_pool(300), AcquisitionSpec(Mode.RANDOM), 100, 100, [0, 1],
                              trees=hz.sg.TreeParams(n_trees=5), name="random-selection")
    hz.write_reorder(s, tmp_path)
    assert (tmp_path / "reorder_random-selection_mean.csv").exists()
    assert (tmp_path / "reorder_random-selection_seed1.csv").read_text().startswith("n_acquired,")


# --- CLI ------------------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, world_dir, capsys):
    out = tmp_path / "cli"
    assert cli.main(["run", "--preset", "basic-control", "--seed", "0", "--world", str(world_dir),
                     "--out", str(out), "--n-target", "20", "--set", "trees.n_trees=10"]) == 0
    assert "basic-control seed=0" in capsys.readouterr().out
    assert cli.main(["replay", str(out)]) == 0
    assert "identical" in capsys.readouterr().out
    assert cli.main(["compare", str(out), str(out)]) == 0
    assert cli.main(["presets"]) == 0
    assert cli.main(["run", "--preset", "nope", "--seed", "0", "--world", str(world_dir), "--out", str(out)]) == 2


def test_cli_replay_detects_tampering(tmp_path, run_dir):
    import shutil
    d = tmp_path / "copy"
    shutil.copytree(run_dir, d)
    (d / "metrics.csv").write_text((d / "metrics.csv").read_text().replace("\n10,", "\n10,9", 1))
    assert cli.main(["replay", str(d)]) == 1


def test_cli_world(tmp_path, capsys):
    assert cli.main(["world", "--seed", "5", "--out", str(tmp_path)]) == 0
    for name in ("world.meta", "world.csv", "reference.csv", "holdout.csv", "pool.csv"):
        assert (tmp_path / name).exists()
