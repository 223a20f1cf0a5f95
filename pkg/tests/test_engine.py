import numpy as np
import pytest

from dsiforge.bench import generate_synthetic, split_benchmark
from dsiforge.engine import (ContinualState, Cycler, EngineConfig, MethodSpec, Mixer, TrainConfig,
                             batch_split, build_replay_sources, continual_phase, run_sequence,
                             train_initial, update_report)
from dsiforge.model import INDEXING, RETRIEVAL


def tiny_cfg(**kw):
    base = dict(d=16, h=32, initial=TrainConfig(steps=40, warmup=5, eval_interval=20, lr=1e-2),
                continual=TrainConfig(steps=20, warmup=2, eval_interval=10, lr=1e-2),
                generator_steps=20, beam_width=4)
    base.update(kw)
    return EngineConfig(**base)


@pytest.fixture(scope="module")
def splits():
    corpus, rs = generate_synthetic(70, 4, 300, queries_per_doc=3, seed=11)
    return split_benchmark(corpus, rs, [40, 15, 15], seed=11)


def record_batches(monkeypatch):
    seen = []
    orig = Mixer.next

    def spy(self):
        batch = orig(self)
        seen.extend(batch)
        return batch

    monkeypatch.setattr(Mixer, "next", spy)
    return seen


def test_method_spec_parse_and_validation():
    m = MethodSpec.parse("cl_union_genmem:Un:r32")
    assert (m.kind, m.scope, m.r) == ("cl_union_genmem", "Un", 32)
    assert MethodSpec.parse(m.key) == m
    assert MethodSpec.parse("cl_new").label == "cl(Dn)"
    for bad in ("nope", "cl_union_epsmem", "cl_union:Un", "cl_union_genmem:D7"):
        with pytest.raises(ValueError):
            MethodSpec.parse(bad)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=10, eval_interval=3)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainConfig(mixing_ratio=0)


def test_batch_split_ratio():
    assert batch_split(32, 1) == (16, 16)
    assert batch_split(32, 2) == (21, 11)
    assert sum(batch_split(7, 32)) == 7 and batch_split(7, 32)[1] == 1


def test_cycler_covers_every_item_each_epoch():
    c = Cycler(list(range(10)), np.random.default_rng(0))
    assert sorted(c.take(10)) == list(range(10))
    assert sorted(c.take(10)) == list(range(10))
    with pytest.raises(ValueError):
        Cycler([], np.random.default_rng(0))


def test_mixer_old_new_balance():
    old = Cycler([("old", i) for i in range(200)], np.random.default_rng(1))
    new = Cycler([("new", i) for i in range(20)], np.random.default_rng(2))
    ret = Cycler([("ret", i) for i in range(50)], np.random.default_rng(3))
    mix = Mixer([(old, 0.5), (new, 0.5)], [(ret, 1.0)], batch_size=32, r=1)
    fracs = []
    for _ in range(100):
        b = mix.next()
        assert len(b) == 32 and sum(x[0] == "ret" for x in b) == 16
        idx = [x for x in b if x[0] != "ret"]
        fracs.append(sum(x[0] == "old" for x in idx) / len(idx))
    assert abs(np.mean(fracs) - 0.5) <= 0.1


def test_initial_training_and_log(splits):
    model, log = train_initial(splits, tiny_cfg(), seed=0)
    assert log.updates == {0: 40} and log.selected[0] in (20, 40)
    assert log.gt_queries[0] == 40 * batch_split(32, 2)[1]
    assert {r["metric"] for r in log.records} >= {"loss", "indexing_accuracy", "hits@1", "hits@10"}
    assert len(model.registry) == 40


def test_out_of_order_phase_raises(splits):
    cfg = tiny_cfg()
    model, _ = train_initial(splits, cfg, seed=0)
    src = build_replay_sources(splits, cfg, 0, need_generator=False)
    with pytest.raises(ValueError):
        continual_phase(ContinualState(model), MethodSpec("cl_union"), splits, 2, cfg, src, 0)


def test_cl_new_trains_only_on_new_documents(splits, monkeypatch):
    cfg = tiny_cfg()
    model, _ = train_initial(splits, cfg, seed=0)
    src = build_replay_sources(splits, cfg, 0, need_generator=False)
    seen = record_batches(monkeypatch)
    continual_phase(ContinualState(model), MethodSpec("cl_new"), splits, 1, cfg, src, 0)
    new_codes = {model.registry.code(e) for e in splits.corpora[1].ids()}
    assert seen and all(task == INDEXING and code in new_codes for task, _, code in seen)


def test_genmem_uses_no_ground_truth_queries(splits, monkeypatch):
    cfg = tiny_cfg()
    model, _ = train_initial(splits, cfg, seed=0)
    src = build_replay_sources(splits, cfg, 0, need_generator=True)
    pseudo_like = set()
    seen = record_batches(monkeypatch)
    log = continual_phase(ContinualState(model), MethodSpec("cl_union_genmem", "Un"), splits, 1, cfg, src, 0)
    assert log.gt_queries[1] == 0
    for qs in src.pseudo_all.values():
        pseudo_like.update(tuple(q) for q in qs)
    replayed = [tuple(t) for task, t, _ in seen if task == RETRIEVAL]
    assert replayed and all(q in pseudo_like for q in replayed)
    assert set(src.pseudo_all) == set(splits.union(1).ids())


def test_epsmem_counts_ground_truth(splits):
    cfg = tiny_cfg()
    model, _ = train_initial(splits, cfg, seed=0)
    src = build_replay_sources(splits, cfg, 0, need_generator=False)
    log = continual_phase(ContinualState(model), MethodSpec("cl_union_epsmem", "D0"), splits, 1, cfg, src, 0)
    assert log.gt_queries[1] == 20 * batch_split(32, 2)[1]


def test_zero_phases_gives_one_row(splits):
    res = run_sequence([MethodSpec("cl_union")], splits, tiny_cfg(), seed=0, n_phases=0)
    perf = res["cl_union"].perf["indexing_accuracy"]
    assert perf.n_phases == 1 and perf.row_filled(0)


def test_run_sequence_determinism_and_update_counts(splits):
    cfg = tiny_cfg()
    methods = [MethodSpec("cl_union"), MethodSpec("from_scratch")]
    a = run_sequence(methods, splits, cfg, seed=3)
    b = run_sequence(methods, splits, cfg, seed=3)
    for k in a:
        for m in a[k].perf:
            for n in range(3):
                for o in range(n + 1):
                    assert a[k].perf[m].get(n, o) == b[k].perf[m].get(n, o)
    assert a["cl_union"].runlog.updates == {0: 40, 1: 20, 2: 20}
    assert a["from_scratch"].runlog.updates == {0: 40, 1: 40, 2: 40}
    rep = update_report(a, cfg, 2)
    assert rep["ratio_incremental"] == pytest.approx(80 / 40)
    assert rep["ratio_total"] == pytest.approx(120 / 80)
    with pytest.raises(ValueError):
        run_sequence(methods, splits, cfg, n_phases=5)
    with pytest.raises(ValueError):
        run_sequence([], splits, cfg)


def test_update_report_from_config_without_scratch():
    cfg = tiny_cfg()
    rep = update_report({}, cfg, 5)
    assert rep["from_config"] and rep["ratio_incremental"] == pytest.approx(2.0)
