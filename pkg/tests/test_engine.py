from collections import deque

import numpy as np
import pytest

from alqueue import engine as en
from alqueue.acquisition import AcquisitionSpec, Mode
from alqueue.core import Dataset
from alqueue.metrics import check_conservation, write_events
from alqueue.surrogate import TreeParams

from conftest import make_record

SMALL = TreeParams(n_trees=20)


def cfg(**kw):
    base = dict(n_target=80, seed=1, acquisition=AcquisitionSpec(Mode.EXPLOIT), retrain_batch=8,
                stale_after=1, trees=SMALL, ft_trigger=16)
    base.update(kw)
    return en.RunConfig(**base)


@pytest.fixture(scope="module")
def al_run(bundle):
    return en.run_workflow(cfg(), bundle.world, bundle.pretrain, bundle.holdout)


def _events(r, kind):
    return [e for e in r.events if e.event == kind]


def test_config_validation():
    for bad in (dict(n_target=0), dict(ft_fraction=0.0), dict(ft_fraction=1.2), dict(workers=0),
                dict(retrain_batch=0), dict(ft_counts="x"), dict(stale_after=-1)):
        with pytest.raises(ValueError):
            cfg(**bad)
    with pytest.raises(ValueError):
        en.RunConfig(latency=en.LatencyModel("weibull"))
    assert en.RunConfig(mode="Parallel").mode is en.ExecMode.PARALLEL


def test_ledger():
    led = en.TimingLedger()
    led.account("Simulate", 10.0)
    assert led.shares()["Simulate"] == 1.0
    led.account("Prioritize", 2.5)
    assert led.total == sum(led.seconds.values()) == 12.5
    with pytest.raises(KeyError):
        led.account("Coffee", 1.0)


def _state(entries):
    s = en.RunState()
    s.q_ul = deque(en.Queued(r, p, 0) for r, p in entries)
    return s


def test_pop_next_takes_head_and_skips_duplicates():
    a, b, c = make_record(1), make_record(2), make_record(3)
    s = _state([(b, 0.1), (a, 0.3)])
    assert en.pop_next(s).record is b
    dup = make_record(3)
    s = _state([(dup, 0.1), (a, 0.2)])
    s.blocked_keys = {c.key}
    assert en.pop_next(s).record is a
    assert s.counters["duplicates"] == 1
    assert [e.event for e in s.events] == ["DISCARD_DUP"]
    assert en.pop_next(_state([])) is None


def test_run_reaches_target_and_conserves(al_run):
    r = al_run
    assert len(r.d_s) == 80
    assert len(_events(r, "SIM_DONE")) == 80
    assert _events(r, "STOP")[-1] is r.events[-1]
    assert check_conservation(r.events) > 0
    assert r.counters["stable"] == len(r.d_s_star)
    assert r.metrics[-1].n_simulated == 80


def test_results_are_novel_and_unique(al_run, bundle):
    keys = [x.key for x in al_run.d_s]
    assert len(set(keys)) == len(keys)
    assert not (set(keys) & bundle.pretrain.keys())


def test_pops_use_latest_ranking_and_are_ordered(al_run):
    rank_version = None
    last_prio = -np.inf
    for e in al_run.events:
        if e.event == "RANK":
            rank_version = e.model_version
            last_prio = -np.inf
        elif e.event == "POP":
            assert e.model_version == rank_version
            p = float(e.fields()["priority"])
            assert p >= last_prio
            last_prio = p


def test_retrains_follow_batch_rule(al_run):
    results = [int(e.fields()["results"]) for e in _events(al_run, "RETRAIN")]
    assert results[0] == 0
    assert all(b - a >= 8 for a, b in zip(results, results[1:]))
    assert [e.model_version for e in _events(al_run, "RETRAIN")] == list(range(len(results)))


def test_stale_candidates_are_flushed(al_run):
    ft = _events(al_run, "FINETUNE")
    assert ft, "expected at least one fine-tune"
    gen_version = {e.candidate_id: e.generator_version for e in _events(al_run, "GEN")}
    current = 0
    for e in al_run.events:
        if e.event == "FINETUNE":
            current = e.generator_version
        elif e.event == "DISCARD_STALE":
            assert gen_version[e.candidate_id] < current
        elif e.event == "POP":
            assert gen_version[e.candidate_id] == current


def test_single_result(bundle):
    r = en.run_workflow(cfg(n_target=1), bundle.world, bundle.pretrain, bundle.holdout)
    assert len(r.d_s) == 1
    assert len([e for e in _events(r, "RETRAIN") if int(e.fields()["results"]) > 0]) <= 1


def test_fifo_without_retraining_simulates_in_generation_order(bundle):
    r = en.run_workflow(cfg(acquisition=AcquisitionSpec(Mode.FIFO), retrain_batch=None, stale_after=0),
                        bundle.world, bundle.pretrain)
    popped = [e.candidate_id for e in _events(r, "POP")]
    dropped = {e.candidate_id for e in r.events if e.event.startswith("DISCARD")}
    generated = [e.candidate_id for e in _events(r, "GEN") if e.candidate_id not in dropped]
    assert popped == generated[:len(popped)]
    assert not _events(r, "RETRAIN")


def test_des_is_deterministic(bundle, tmp_path):
    paths = []
    for i in range(2):
        r = en.run_workflow(cfg(n_target=40), bundle.world, bundle.pretrain, bundle.holdout)
        paths.append(tmp_path / f"e{i}.csv")
        write_events(r.events, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_stop_reports_in_flight(al_run):
    stop = al_run.events[-1].fields()
    assert int(stop["in_flight"]) == len(_events(al_run, "POP")) - len(_events(al_run, "SIM_DONE"))


def test_prioritize_is_charged(al_run):
    sec = al_run.ledger.seconds
    assert sec["Prioritize"] > 0 and sec["Simulate"] > 0 and sec["FineTune"] > 0
    assert al_run.ledger.total == pytest.approx(sum(sec.values()))


def test_stable_trigger_variant(bundle):
    r = en.run_workflow(cfg(ft_counts="stable", n_target=40), bundle.world, bundle.pretrain)
    check_conservation(r.events)
    assert r.generator.version <= r.counters["stable"] // 16


def test_parallel_mode(bundle):
    r = en.run_workflow(cfg(mode=en.ExecMode.PARALLEL, workers=4, n_target=30), bundle.world, bundle.pretrain,
                        bundle.holdout)
    assert len(r.d_s) == 30
    check_conservation(r.events)
    for x in r.d_s:
        assert x.s_is == en.oracle_strain(x.candidate, bundle.world)


@pytest.mark.parametrize("mode", [en.ExecMode.DES, en.ExecMode.PARALLEL])
def test_worker_failure_aborts_with_log(bundle, monkeypatch, mode):
    calls = {"n": 0}

    def broken(c, world):
        calls["n"] += 1
        if calls["n"] > 5:
            raise RuntimeError("oracle crashed")
        return 0.5

    monkeypatch.setattr(en, "oracle_strain", broken)
    with pytest.raises(en.WorkflowAborted) as info:
        en.run_workflow(cfg(mode=mode, workers=3, n_target=20), bundle.world, bundle.pretrain)
    last = info.value.events[-1]
    assert last.event == "STOP" and "aborted=RuntimeError" in last.detail


def test_rejects_unlabelled_pretraining(bundle):
    with pytest.raises(ValueError):
        en.run_workflow(cfg(), bundle.world, Dataset([make_record(1)]))
