import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsiforge import numerics as nx
from dsiforge.bench import Corpus, RetrievalSet, generate_synthetic
from dsiforge.memory import (EpisodicMemory, GeneratorConfig, PseudoQuerySet, QueryGenerator,
                             episodic_sample, lexical_pseudo_queries, sample_pseudo_queries,
                             token_rarity, train_query_generator)
from oracles import central_differences

VOCAB = [f"t{i}" for i in range(40)]


def small_cfg(**kw):
    base = dict(vocab_size=40, d=16, h=24, steps=500, batch_size=1, lr=1e-2, warmup=0,
                eval_interval=100, seed=0)
    base.update(kw)
    return GeneratorConfig(**base)


@pytest.fixture(scope="module")
def memorized():
    corpus = Corpus([("doc", [5, 6, 7, 8, 9, 10])], VOCAB)
    rs = RetrievalSet([("q", [12, 7, 30], "doc")], "train")
    return corpus, rs, train_query_generator(rs, corpus, small_cfg())


def test_single_pair_is_memorized(memorized):
    corpus, rs, gen = memorized
    assert gen.generate([corpus.tokens("doc")], beam_width=1)[0][0] == [12, 7, 30]
    ps = sample_pseudo_queries(gen, corpus, per_doc=1)
    assert ps.items == [([12, 7, 30], "doc", "old")]


def test_zero_steps_gives_valid_deterministic_tokens():
    corpus, rs = generate_synthetic(10, 2, 200, seed=1)
    cfg = GeneratorConfig(vocab_size=200, d=8, h=8, steps=0, max_query_len=6)
    a = train_query_generator(rs, corpus, cfg).generate([t for _, t in corpus.documents][:3])
    b = train_query_generator(rs, corpus, cfg).generate([t for _, t in corpus.documents][:3])
    assert a == b
    for qs in a:
        assert 1 <= len(qs[0]) <= 6 and all(0 <= t < 200 for t in qs[0])


def test_training_is_deterministic():
    corpus, rs = generate_synthetic(20, 2, 200, seed=2)
    cfg = GeneratorConfig(vocab_size=200, d=8, h=8, steps=20, eval_interval=10)
    a = train_query_generator(rs, corpus, cfg)
    b = train_query_generator(rs, corpus, cfg)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_empty_training_set_is_an_error():
    with pytest.raises(ValueError):
        train_query_generator(RetrievalSet([], "train"), Corpus([("d", [1])], VOCAB), small_cfg())


def test_pseudo_query_cardinality_and_vocabulary():
    corpus, rs = generate_synthetic(12, 2, 200, seed=3)
    gen = QueryGenerator(GeneratorConfig(vocab_size=200, d=8, h=8))
    ps = sample_pseudo_queries(gen, corpus, per_doc=1)
    assert len(ps) == 12 and ps.targets() == set(corpus.ids())
    assert all(len(q) <= 32 and all(0 <= t < 200 for t in q) for q, _, _ in ps.items)
    assert len(sample_pseudo_queries(gen, corpus, per_doc=3, beam_width=4)) == 36
    with pytest.raises(ValueError):
        sample_pseudo_queries(gen, corpus, per_doc=0)


def test_pseudo_queries_are_deterministic():
    corpus, _ = generate_synthetic(8, 2, 200, seed=4)
    gen = QueryGenerator(GeneratorConfig(vocab_size=200, d=8, h=8, seed=3))
    assert sample_pseudo_queries(gen, corpus, 2, 4).items == sample_pseudo_queries(gen, corpus, 2, 4).items


def test_generator_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    gen = QueryGenerator(GeneratorConfig(vocab_size=20, d=6, h=8, seed=1),
                         rarity=token_rarity([[1, 2, 3], [3, 4]], 20))
    for k in ("copy.w", "mix.w"):
        gen.params[k][...] = rng.normal(size=gen.params[k].shape) * 0.3
    pairs = [([1, 2, 3, 3], [3, 9, 1]), ([4, 5], [5, 5])]
    leaves = gen.params.track()
    g = nx.grad(gen.batch_loss(leaves, pairs), leaves)
    num = central_differences(lambda: gen.batch_loss(gen.params.track(), pairs).item(),
                              dict(gen.params.items()), entries=5, rng=rng)
    for name, vals in num.items():
        for idx, v in vals:
            assert abs(g[name][idx] - v) <= 1e-4 * max(1.0, abs(v)), name


def test_episodic_memory_examples():
    mem = EpisodicMemory()
    rs = RetrievalSet([(f"q{i}", [i + 1], "d") for i in range(5)], "train")
    mem.add(0, rs)
    full = episodic_sample(mem, [0], 5, seed=1)
    assert sorted(full) == sorted(rs.examples)
    assert episodic_sample(mem, [0], 0, seed=1) == []
    assert episodic_sample(mem, [0], 3, seed=2) == episodic_sample(mem, [0], 3, seed=2)
    assert len(episodic_sample(mem, [0], 12, seed=2)) == 12
    with pytest.raises(KeyError):
        episodic_sample(mem, [1], 1, seed=0)
    with pytest.raises(ValueError):
        mem.add(1, RetrievalSet([], "val"))


def test_pseudo_query_jsonl_round_trip(tmp_path):
    ps = PseudoQuerySet([([1, 2], "a", "old"), ([3], "b", "new")])
    ps.save(tmp_path / "p.jsonl", VOCAB)
    assert '"source": "new"' in (tmp_path / "p.jsonl").read_text()
    assert PseudoQuerySet.load(tmp_path / "p.jsonl", VOCAB).items == ps.items


def test_lexical_sampler_uses_document_tokens():
    corpus, _ = generate_synthetic(10, 2, 200, seed=5)
    ps = lexical_pseudo_queries(corpus, q_len=4)
    for q, target, _ in ps.items:
        assert set(q) <= set(corpus.tokens(target)) and len(q) <= 4


def test_generator_checkpoint_round_trip(tmp_path, memorized):
    corpus, _, gen = memorized
    gen.save(tmp_path / "g.npz")
    back = QueryGenerator.load(tmp_path / "g.npz")
    assert back.generate([corpus.tokens("doc")]) == gen.generate([corpus.tokens("doc")])


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 3))
def test_pseudo_targets_within_corpus(seed, per_doc):
    corpus, _ = generate_synthetic(6, 2, 120, seed=seed)
    gen = QueryGenerator(GeneratorConfig(vocab_size=120, d=6, h=6, seed=seed, max_query_len=5))
    ps = sample_pseudo_queries(gen, corpus, per_doc=per_doc, beam_width=3)
    assert ps.targets() <= set(corpus.ids())
    assert all(1 <= len(q) <= 5 for q, _, _ in ps.items)
