"""Corpus sequences D0..DK and retrieval splits, synthetic or from JSONL."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

UNK = "<unk>"
SPLITS = ("train", "val", "test")
MANIFEST = "manifest.json"
FORMAT = "dsiforge-splits/1"


class FormatError(ValueError):
    pass


@dataclass
class Corpus:
    documents: list[tuple[str, list[int]]]
    vocab: list[str]

    def __post_init__(self):
        ids = [d for d, _ in self.documents]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate external document ids in corpus")
        self._index = {d: i for i, d in enumerate(ids)}

    def __len__(self) -> int:
        return len(self.documents)

    def __contains__(self, ext_id: str) -> bool:
        return ext_id in self._index

    def ids(self) -> list[str]:
        return [d for d, _ in self.documents]

    def tokens(self, ext_id: str) -> list[int]:
        return self.documents[self._index[ext_id]][1]

    def subset(self, ids: Sequence[str]) -> "Corpus":
        return Corpus([(i, self.tokens(i)) for i in ids], self.vocab)


@dataclass
class RetrievalSet:
    examples: list[tuple[str, list[int], str]]  # (qid, query tokens, target doc id)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.examples)

    def targets(self) -> list[str]:
        return [t for _, _, t in self.examples]


@dataclass
class SplitSet:
    corpora: list[Corpus]
    retrieval: list[dict[str, RetrievalSet]]
    vocab: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def n_corpora(self) -> int:
        return len(self.corpora)

    def union(self, n: int) -> Corpus:
        docs = [d for c in self.corpora[: n + 1] for d in c.documents]
        return Corpus(docs, self.vocab)

    def save(self, out_dir: str | Path) -> str:
        """Write the split directory; returns the manifest hash."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"vocab.txt": "\n".join(self.vocab) + "\n"}
        for i, c in enumerate(self.corpora):
            files[f"D{i}.jsonl"] = _docs_jsonl(c)
            for s in SPLITS:
                files[f"R{i}_{s}.jsonl"] = _queries_jsonl(self.retrieval[i][s], self.vocab)
        hashes = {}
        for name, text in files.items():
            (out / name).write_text(text)
            hashes[name] = hashlib.sha256(text.encode()).hexdigest()
        manifest = {"format": FORMAT, "sizes": [len(c) for c in self.corpora],
                    **{k: v for k, v in self.meta.items() if k != "sizes"}, "files": hashes}
        text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        (out / MANIFEST).write_text(text)
        return hashlib.sha256(text.encode()).hexdigest()

    @classmethod
    def load(cls, in_dir: str | Path) -> "SplitSet":
        d = Path(in_dir)
        if not (d / MANIFEST).exists():
            raise FileNotFoundError(f"no {MANIFEST} in {d}")
        manifest = json.loads((d / MANIFEST).read_text())
        if manifest.get("format") != FORMAT:
            raise FormatError(f"unsupported split format {manifest.get('format')!r}")
        for name, h in manifest["files"].items():
            got = hashlib.sha256((d / name).read_bytes()).hexdigest()
            if got != h:
                raise FormatError(f"hash mismatch for {name}: split directory was modified")
        vocab = (d / "vocab.txt").read_text().split("\n")[:-1]
        lookup = {w: i for i, w in enumerate(vocab)}
        corpora, retrieval = [], []
        for i in range(len(manifest["sizes"])):
            docs = [(o["id"], _tokenize(o["text"], lookup))
                    for o in _read_jsonl(d / f"D{i}.jsonl", ("id", "text"))]
            corpora.append(Corpus(docs, vocab))
            retrieval.append({s: RetrievalSet(
                [(o["qid"], _tokenize(o["query"], lookup), o["docid"])
                 for o in _read_jsonl(d / f"R{i}_{s}.jsonl", ("qid", "query", "docid"))], s)
                for s in SPLITS})
        meta = {k: v for k, v in manifest.items() if k not in ("files", "format")}
        return cls(corpora, retrieval, vocab, meta)


def manifest_hash(split_dir: str | Path) -> str:
    return hashlib.sha256((Path(split_dir) / MANIFEST).read_bytes()).hexdigest()


# ----------------------------------------------------------------------------
# synthetic generator
# ----------------------------------------------------------------------------

def generate_synthetic(n_docs: int, n_topics: int, vocab_size: int, doc_len: int = 32,
                       queries_per_doc: int = 2, noise: float = 0.2, seed: int = 0,
                       q_len: int = 8, salient_repeats: int | None = None,
                       topic_words: int | None = None, zipf_exponent: float = 0.5,
                       paraphrase: float = 0.0, query_words: int = 16) -> tuple[Corpus, RetrievalSet]:
    """Topic-mixture documents, each carrying its own salient token.

    Token 0 is UNK, tokens 1..n_docs are the salient tokens, the rest are
    shared words split into per-topic blocks drawn with Zipf weights of
    exponent ``zipf_exponent``. Queries draw ``q_len`` tokens from their
    document without replacement; with probability ``paraphrase`` each
    drawn non-salient token is swapped for one of the topic's
    ``query_words`` query-side words, which never occur in documents.
    Finally ``noise`` of the query tokens become random vocabulary tokens.
    """
    if n_topics > vocab_size / 8:
        raise ValueError("n_topics must be <= vocab_size / 8")
    if not 0.0 <= noise <= 1.0 or not 0.0 <= paraphrase <= 1.0:
        raise ValueError("noise and paraphrase must be in [0, 1]")
    n_query = n_topics * query_words if paraphrase > 0 else 0
    n_words = vocab_size - 1 - n_docs - n_query
    if n_words < 2 * n_topics:
        raise ValueError(f"vocab_size {vocab_size} too small for {n_docs} salient tokens")
    rng = np.random.default_rng(seed)
    vocab = ([UNK] + [f"s{i}" for i in range(n_docs)] + [f"w{i}" for i in range(n_words)]
             + [f"u{i}" for i in range(n_query)])
    word0 = 1 + n_docs
    query0 = word0 + n_words
    block = n_words // n_topics if topic_words is None else min(topic_words, n_words // n_topics)
    zipf = np.arange(1, block + 1, dtype=np.float64) ** -zipf_exponent
    zipf /= zipf.sum()
    reps = max(1, doc_len // 8) if salient_repeats is None else salient_repeats
    reps = min(reps, doc_len)

    docs, queries = [], []
    width = len(str(max(n_docs - 1, 0)))
    for i in range(n_docs):
        topic = int(rng.integers(n_topics))
        rest = doc_len - reps
        n_bg = int(rng.binomial(rest, 0.2))
        topical = word0 + topic * block + rng.choice(block, size=rest - n_bg, p=zipf)
        background = word0 + rng.integers(n_words, size=n_bg)
        toks = np.concatenate([np.full(reps, 1 + i), topical, background]).astype(np.int64)
        rng.shuffle(toks)
        ext = f"doc{i:0{width}d}"
        docs.append((ext, toks.tolist()))
        for j in range(queries_per_doc):
            take = rng.choice(len(toks), size=min(q_len, len(toks)), replace=False)
            q = toks[np.sort(take)].copy()
            if n_query:
                swap = (q != 1 + i) & (rng.random(len(q)) < paraphrase)
                q[swap] = query0 + topic * query_words + rng.integers(query_words, size=int(swap.sum()))
            n_noise = int(round(noise * len(q)))
            if n_noise:
                pos = rng.choice(len(q), size=n_noise, replace=False)
                q[pos] = rng.integers(1, vocab_size, size=n_noise)
            queries.append((f"q{i:0{width}d}_{j}", q.tolist(), ext))
    return Corpus(docs, vocab), RetrievalSet(queries, "train")


# ----------------------------------------------------------------------------
# JSONL ingestion / export
# ----------------------------------------------------------------------------

def _split_words(text: str) -> list[str]:
    return text.lower().split()


def _tokenize(text: str, lookup: dict[str, int]) -> list[int]:
    return [lookup.get(w, 0) for w in _split_words(text)]


def _read_jsonl(path: Path, fields: tuple[str, ...]) -> list[dict]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{n}: invalid JSON ({e.msg})") from None
            if not isinstance(obj, dict) or any(not isinstance(obj.get(f), str) for f in fields):
                raise FormatError(f"{path}:{n}: expected string fields {list(fields)}")
            out.append(obj)
    return out


def ingest_jsonl(docs_path: str | Path, queries_path: str | Path, vocab_cap: int = 4096,
                 vocab: list[str] | None = None) -> tuple[Corpus, RetrievalSet]:
    """Read {"id","text"} documents and {"qid","query","docid"} queries.

    Text is lower-cased and split on whitespace. Without an explicit ``vocab``
    the vocabulary is UNK plus the ``vocab_cap - 1`` most frequent words.
    """
    raw_docs = _read_jsonl(Path(docs_path), ("id", "text"))
    raw_q = _read_jsonl(Path(queries_path), ("qid", "query", "docid"))
    if vocab is None:
        counts = Counter(w for o in raw_docs for w in _split_words(o["text"]))
        counts.update(w for o in raw_q for w in _split_words(o["query"]))
        counts.pop(UNK, None)
        top = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[: max(vocab_cap - 1, 0)]
        vocab = [UNK] + [w for w, _ in top]
    lookup = {w: i for i, w in enumerate(vocab)}
    corpus = Corpus([(o["id"], _tokenize(o["text"], lookup)) for o in raw_docs], vocab)
    kept, dropped = [], 0
    for o in raw_q:
        if o["docid"] not in corpus:
            dropped += 1
            continue
        kept.append((o["qid"], _tokenize(o["query"], lookup), o["docid"]))
    if dropped:
        log.warning("dropped %d queries whose target document is not in the corpus", dropped)
    rs = RetrievalSet(kept, "train")
    rs.dropped = dropped  # type: ignore[attr-defined]
    return corpus, rs


def _docs_jsonl(corpus: Corpus) -> str:
    return "".join(json.dumps({"id": d, "text": " ".join(corpus.vocab[t] for t in toks)}) + "\n"
                   for d, toks in corpus.documents)


def _queries_jsonl(rs: RetrievalSet, vocab: list[str], extra: dict | None = None) -> str:
    lines = []
    for qid, toks, target in rs.examples:
        obj = {"qid": qid, "query": " ".join(vocab[t] for t in toks), "docid": target}
        if extra:
            obj.update(extra)
        lines.append(json.dumps(obj) + "\n")
    return "".join(lines)


def export_jsonl(corpus: Corpus, retrieval: RetrievalSet, docs_path: str | Path,
                 queries_path: str | Path) -> None:
    Path(docs_path).write_text(_docs_jsonl(corpus))
    Path(queries_path).write_text(_queries_jsonl(retrieval, corpus.vocab))


# ----------------------------------------------------------------------------
# splitting
# ----------------------------------------------------------------------------

def split_benchmark(corpus: Corpus, retrieval: RetrievalSet, sizes: Sequence[int],
                    val_fraction: float = 0.2, seed: int = 0,
                    test_fraction: float = 0.1) -> SplitSet:
    """Shuffle documents into D0..DK and route queries to the split of their target.

    Each R_i loses a ``test_fraction`` held-out slice first; the remainder is
    divided train/val with the val count rounded down.
    """
    sizes = [int(s) for s in sizes]
    if not sizes or any(s <= 0 for s in sizes):
        raise ValueError("sizes must be positive")
    if sum(sizes) > len(corpus):
        raise ValueError(f"sizes sum to {sum(sizes)} but the corpus has {len(corpus)} documents")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    ids = corpus.ids()
    corpora, owner = [], {}
    start = 0
    for i, s in enumerate(sizes):
        chunk = [ids[j] for j in order[start:start + s]]
        start += s
        corpora.append(corpus.subset(chunk))
        owner.update({d: i for d in chunk})
    routed: list[list] = [[] for _ in sizes]
    for ex in retrieval.examples:
        i = owner.get(ex[2])
        if i is not None:
            routed[i].append(ex)
    splits = []
    for exs in routed:
        perm = rng.permutation(len(exs))
        exs = [exs[j] for j in perm]
        n_test = int(math.floor(test_fraction * len(exs)))
        pool = exs[n_test:]
        n_val = int(math.floor(val_fraction * len(pool)))
        splits.append({"test": RetrievalSet(exs[:n_test], "test"),
                       "val": RetrievalSet(pool[:n_val], "val"),
                       "train": RetrievalSet(pool[n_val:], "train")})
    meta = {"seed": seed, "sizes": sizes, "val_fraction": val_fraction,
            "test_fraction": test_fraction}
    return SplitSet(corpora, splits, corpus.vocab, meta)
