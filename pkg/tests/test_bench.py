import json
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from dsiforge.bench import (Corpus, FormatError, RetrievalSet, SplitSet, export_jsonl, generate_synthetic,
                            ingest_jsonl, manifest_hash, split_benchmark)


def test_noise_free_queries_are_sub_multisets():
    corpus, rs = generate_synthetic(50, 5, 400, noise=0.0, seed=1)
    for _, q, target in rs.examples:
        doc = Counter(corpus.tokens(target))
        assert not Counter(q) - doc


def test_zero_queries_per_doc():
    _, rs = generate_synthetic(20, 2, 200, queries_per_doc=0)
    assert len(rs) == 0


def test_unique_ids_and_salient_tokens():
    corpus, _ = generate_synthetic(1000, 20, 4096, seed=0)
    assert len(set(corpus.ids())) == 1000
    salient = [{x for x in t if 1 <= x <= 1000} for _, t in corpus.documents]
    assert all(len(s) == 1 for s in salient)
    assert len(set().union(*salient)) == 1000


def test_paraphrase_words_never_occur_in_documents():
    corpus, rs = generate_synthetic(100, 4, 800, seed=2, paraphrase=0.5, query_words=4, noise=0.0)
    u = {i for i, w in enumerate(corpus.vocab) if w.startswith("u")}
    assert len(u) == 16
    assert not any(u & set(t) for _, t in corpus.documents)
    assert any(u & set(q) for _, q, _ in rs.examples)


def test_generator_preconditions():
    with pytest.raises(ValueError):
        generate_synthetic(10, 100, 400)


def test_ingest_case_folding_and_empty_queries(tmp_path):
    (tmp_path / "d.jsonl").write_text(json.dumps({"id": "x", "text": "A a a"}) + "\n")
    (tmp_path / "q.jsonl").write_text("")
    corpus, rs = ingest_jsonl(tmp_path / "d.jsonl", tmp_path / "q.jsonl")
    toks = corpus.tokens("x")
    assert len(toks) == 3 and len(set(toks)) == 1 and corpus.vocab[toks[0]] == "a"
    assert len(rs) == 0


def test_ingest_drops_unknown_targets_and_reports_bad_lines(tmp_path):
    (tmp_path / "d.jsonl").write_text(json.dumps({"id": "x", "text": "hello"}) + "\n")
    (tmp_path / "q.jsonl").write_text(
        json.dumps({"qid": "1", "query": "hello", "docid": "x"}) + "\n"
        + json.dumps({"qid": "2", "query": "hi", "docid": "missing"}) + "\n")
    _, rs = ingest_jsonl(tmp_path / "d.jsonl", tmp_path / "q.jsonl")
    assert len(rs) == 1 and rs.dropped == 1
    (tmp_path / "bad.jsonl").write_text(json.dumps({"id": "x", "text": "ok"}) + "\n{broken\n")
    with pytest.raises(FormatError, match="2"):
        ingest_jsonl(tmp_path / "bad.jsonl", tmp_path / "q.jsonl")


def test_export_ingest_round_trip(tmp_path):
    corpus, rs = generate_synthetic(30, 3, 300, seed=4)
    export_jsonl(corpus, rs, tmp_path / "d.jsonl", tmp_path / "q.jsonl")
    back, brs = ingest_jsonl(tmp_path / "d.jsonl", tmp_path / "q.jsonl", vocab=corpus.vocab)
    assert back.documents == corpus.documents
    assert [q for _, q, _ in brs.examples] == [q for _, q, _ in rs.examples]


def test_single_corpus_split():
    corpus, rs = generate_synthetic(40, 4, 300, seed=0)
    s = split_benchmark(corpus, rs, [40], seed=0)
    assert s.n_corpora == 1
    assert sum(len(s.retrieval[0][k]) for k in ("train", "val", "test")) == len(rs)


def test_full_scale_sizes_are_accepted_by_the_splitter():
    sizes = [50000, 10000, 10000, 10000, 10000, 10000]
    docs = [(f"d{i}", [1]) for i in range(sum(sizes))]
    s = split_benchmark(Corpus(docs, ["<unk>", "w"]), RetrievalSet([]), sizes)
    assert [len(c) for c in s.corpora] == sizes


def test_desk_split_is_disjoint_and_routed():
    corpus, rs = generate_synthetic(2000, 20, 4096, seed=3)
    s = split_benchmark(corpus, rs, [1000, 200, 200, 200, 200, 200], seed=3)
    seen = set()
    for i, c in enumerate(s.corpora):
        ids = set(c.ids())
        assert not ids & seen
        seen |= ids
        for part in s.retrieval[i].values():
            assert all(t in ids for t in part.targets())


def test_split_errors():
    corpus, rs = generate_synthetic(10, 2, 200)
    with pytest.raises(ValueError):
        split_benchmark(corpus, rs, [8, 8])


def test_split_directory_round_trip_and_hash(tmp_path):
    corpus, rs = generate_synthetic(60, 3, 300, seed=5)
    s = split_benchmark(corpus, rs, [40, 20], seed=5)
    h1 = s.save(tmp_path / "a")
    h2 = split_benchmark(corpus, rs, [40, 20], seed=5).save(tmp_path / "b")
    assert h1 == h2 == manifest_hash(tmp_path / "a")
    back = SplitSet.load(tmp_path / "a")
    assert [c.documents for c in back.corpora] == [c.documents for c in s.corpora]
    assert back.retrieval[1]["test"].examples == s.retrieval[1]["test"].examples
    (tmp_path / "a" / "D1.jsonl").write_text("tampered\n")
    with pytest.raises(FormatError):
        SplitSet.load(tmp_path / "a")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 30), min_size=1, max_size=5),
       st.floats(0.0, 0.5))
def test_split_invariants(seed, sizes, val_fraction):
    corpus, rs = generate_synthetic(sum(sizes) + 5, 2, 300, queries_per_doc=3, seed=seed)
    s = split_benchmark(corpus, rs, sizes, val_fraction=val_fraction, seed=seed)
    again = split_benchmark(corpus, rs, sizes, val_fraction=val_fraction, seed=seed)
    assert [c.ids() for c in s.corpora] == [c.ids() for c in again.corpora]
    owners = {}
    for i, c in enumerate(s.corpora):
        for d in c.ids():
            assert d not in owners
            owners[d] = i
    for i, parts in enumerate(s.retrieval):
        for part in parts.values():
            assert all(owners[t] == i for t in part.targets())
        pool = len(parts["train"]) + len(parts["val"])
        assert abs(len(parts["val"]) - val_fraction * pool) <= 1
        assert len(parts["val"]) <= val_fraction * pool + 1e-9
