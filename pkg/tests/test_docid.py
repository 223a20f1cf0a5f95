import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dsiforge.docid import (DocidRegistry, assign_atomic, assign_naive, assign_semantic,
                            balanced_kmeans, build_prefix_trie, format_code, parse_code)


def docs(n, seed=0, vocab=50, length=12):
    rng = np.random.default_rng(seed)
    return [(f"d{i}", rng.integers(1, vocab, size=length).tolist()) for i in range(n)]


def test_atomic_examples():
    reg = assign_atomic(docs(3))
    assert sorted(reg.codes()) == [0, 1, 2]
    assert reg.to_lines() == assign_atomic(docs(3)).to_lines()


def test_atomic_extend_keeps_old_indices():
    reg = assign_atomic(docs(5))
    before = dict(reg.items())
    reg.extend([(f"n{i}", [1]) for i in range(3)])
    assert all(reg.code(k) == v for k, v in before.items())
    assert [reg.code(f"n{i}") for i in range(3)] == [5, 6, 7]


def test_naive_examples():
    one = assign_naive(docs(1), seed=3)
    assert len(one) == 1 and 0 <= int(format_code(one.codes()[0]).replace("-", "")) < 10
    big = assign_naive(docs(1000), seed=1)
    values = [int("".join(map(str, c))) for c in big.codes()]
    assert len(set(values)) == 1000 and max(values) < 10_000
    assert big.to_lines() == assign_naive(docs(1000), seed=1).to_lines()


def test_semantic_orthogonal_example():
    onehots = [("a", [1]), ("b", [2]), ("c", [1, 1]), ("d", [2, 2])]
    reg = assign_semantic(onehots, base=2, leaf_size=1, seed=0, vocab_size=3)
    codes = {k: reg.code(k) for k in "abcd"}
    assert all(len(c) == 2 for c in codes.values())
    assert codes["a"][0] == codes["c"][0] and codes["b"][0] == codes["d"][0]
    assert codes["a"][0] != codes["b"][0]


def test_semantic_single_doc_and_determinism():
    assert assign_semantic([("x", [4, 5])]).codes() == [(0,)]
    a = assign_semantic(docs(120), base=3, leaf_size=5, seed=9)
    b = assign_semantic(docs(120), base=3, leaf_size=5, seed=9)
    assert a.to_lines() == b.to_lines()


def test_semantic_identical_docs_get_distinct_ids():
    same = [(f"s{i}", [3, 3, 7]) for i in range(25)]
    reg = assign_semantic(same, base=2, leaf_size=4, seed=0)
    assert len(set(reg.codes())) == 25


def test_semantic_extend_routes_new_documents():
    reg = assign_semantic(docs(60), base=3, leaf_size=6, seed=1)
    reg.extend([(f"new{i}", t) for i, (_, t) in enumerate(docs(10, seed=5))])
    assert len(reg) == 70 and len(set(reg.codes())) == 70
    assert set(build_prefix_trie(reg).paths()) == set(reg.codes())


def test_balanced_kmeans_capacity():
    x = np.random.default_rng(0).normal(size=(50, 4))
    labels, _ = balanced_kmeans(x, 4, seed=0)
    assert np.bincount(labels, minlength=4).max() <= 13


def test_trie_examples():
    reg = DocidRegistry("naive")
    reg.register("a", (0,))
    reg.register("b", (1,))
    trie = build_prefix_trie(reg)
    assert sorted(trie.root.children) == [0, 1]
    assert all(c.terminal and not c.children for c in trie.root.children.values())
    reg2 = DocidRegistry("naive")
    reg2.register("a", (0, 0))
    reg2.register("b", (0, 1))
    t2 = build_prefix_trie(reg2)
    assert list(t2.root.children) == [0] and sorted(t2.root.children[0].children) == [0, 1]
    with pytest.raises(ValueError):
        build_prefix_trie(assign_atomic(docs(2)))


def test_trie_round_trip_64_ids():
    reg = assign_naive(docs(64), seed=4)
    assert sorted(build_prefix_trie(reg).paths()) == sorted(reg.codes())


def test_registry_text_round_trip(tmp_path):
    reg = assign_semantic(docs(30), base=4, leaf_size=3, seed=2)
    reg.save(tmp_path / "r.tsv")
    back = DocidRegistry.load(tmp_path / "r.tsv")
    assert back.mode == "semantic" and dict(back.items()) == dict(reg.items())
    assert (tmp_path / "r.tsv").read_text().splitlines()[1].count("\t") == 1


def test_registry_rejects_duplicates_and_bad_digits():
    reg = DocidRegistry("naive", base=10)
    reg.register("a", (1, 2))
    with pytest.raises(KeyError):
        reg.register("a", (3,))
    with pytest.raises(KeyError):
        reg.register("b", (1, 2))
    with pytest.raises(ValueError):
        reg.register("c", (10,))


def test_code_text_format():
    assert format_code((3, 1, 4)) == "3-1-4"
    assert parse_code("3-1-4", "naive") == (3, 1, 4)
    assert parse_code("17", "atomic") == 17


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 80), st.integers(2, 5), st.integers(1, 8), st.integers(0, 1000))
def test_all_strategies_are_bijections(n, base, leaf, seed):
    corpus = docs(n, seed)
    for reg in (assign_atomic(corpus), assign_naive(corpus, seed),
                assign_semantic(corpus, base=base, leaf_size=leaf, seed=seed)):
        assert len(reg) == n
        assert len(set(reg.codes())) == n
        assert all(reg.doc(reg.code(k)) == k for k, _ in corpus)
        if reg.structured:
            assert all(0 <= d < reg.base for c in reg.codes() for d in c)
            assert set(build_prefix_trie(reg).paths()) == set(reg.codes())
