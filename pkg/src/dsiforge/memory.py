"""Replay sources: stored ground-truth queries and a learned document-to-query generator."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .bench import Corpus, RetrievalSet
from .docid import tfidf_matrix
from .model import _mlp, _mlp_params, _seed
from .numerics import ParamSet, Tensor, seeded_init
from .optim import OptimizerState, base_step, value_and_grad

log = logging.getLogger(__name__)

_NO_COPY = 1e4


# ----------------------------------------------------------------------------
# episodic memory
# ----------------------------------------------------------------------------

class EpisodicMemory:
    """Ground-truth retrieval examples keyed by corpus index."""

    def __init__(self):
        self.store: dict[int, list[tuple[str, list[int], str]]] = {}

    def add(self, corpus_index: int, examples: RetrievalSet) -> None:
        if examples.split != "train":
            raise ValueError("episodic memory only holds training-split queries")
        self.store.setdefault(corpus_index, []).extend(examples.examples)

    def size(self, indices: Sequence[int] | None = None) -> int:
        keys = self.store if indices is None else indices
        return sum(len(self.store.get(i, ())) for i in keys)


def episodic_sample(mem: EpisodicMemory, indices: Sequence[int], k: int, seed: int) -> list[tuple[str, list[int], str]]:
    """k examples from the given corpora; without replacement unless k exceeds the store."""
    missing = [i for i in indices if i not in mem.store]
    if missing:
        raise KeyError(f"corpus indices not in memory: {missing}")
    pool = [ex for i in indices for ex in mem.store[i]]
    if k <= 0 or not pool:
        return []
    rng = np.random.default_rng(seed)
    if k <= len(pool):
        pick = rng.permutation(len(pool))[:k]
    else:
        pick = rng.integers(len(pool), size=k)
    return [pool[j] for j in pick]


# ----------------------------------------------------------------------------
# query generator
# ----------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    vocab_size: int
    d: int = 64
    h: int = 128
    max_query_len: int = 32
    max_doc_len: int = 32
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 50
    eval_interval: int = 250
    emb_scale: float = 0.1
    copy_bias: float = 4.0
    seed: int = 0


def _doc_counts(tokens: Sequence[int], vocab_size: int, max_doc_len: int) -> np.ndarray:
    counts = np.zeros(vocab_size + 1)
    t = np.asarray(tokens[:max_doc_len], dtype=np.int64)
    if t.size:
        np.add.at(counts, t, 1.0)
    return counts


def token_rarity(corpus_tokens: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """Normalised inverse document frequency in [0, 1]; unseen tokens get 1."""
    df = np.zeros(vocab_size + 1)
    for toks in corpus_tokens:
        df[np.unique(np.asarray(toks, dtype=np.int64))] += 1
    n = len(corpus_tokens)
    return np.log((n + 1) / (df + 1)) / np.log(n + 1) if n else np.ones(vocab_size + 1)


class QueryGenerator:
    """Encoder as in the indexer plus an autoregressive pointer-generator decoder.

    Each output step mixes two distributions with a learned gate: a
    vocabulary softmax conditioned on the document and the emitted prefix,
    and a copy softmax over the document's tokens. Copy scores use the
    count of each token not yet used by the prefix, the same count weighted
    by rarity (so salient words of unseen documents can be copied) and the
    prefix count.
    """

    def __init__(self, config: GeneratorConfig, params: ParamSet | None = None,
                 rarity: np.ndarray | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params()
        self.rarity = np.ones(config.vocab_size + 1) if rarity is None else np.asarray(rarity, dtype=np.float64)
        self.selection: dict[str, float] = {}

    @property
    def end(self) -> int:
        return self.config.vocab_size

    def _init_params(self) -> ParamSet:
        c = self.config
        ps = ParamSet()
        ps.add("tok_emb", seeded_init((c.vocab_size, c.d), c.emb_scale, _seed(c.seed, "g.tok_emb")))
        _mlp_params(ps, "genc", [c.d, c.h, c.d], c.seed)
        ps.add("gdec.pos", seeded_init((c.max_query_len + 1, c.d), c.emb_scale, _seed(c.seed, "g.pos")))
        ps.add("gdec.prev", seeded_init((c.vocab_size, c.d), c.emb_scale, _seed(c.seed, "g.prev")))
        _mlp_params(ps, "gdec", [c.d, c.h, c.vocab_size + 1], c.seed)
        # copy-score weights (remaining count, rarity-weighted count, prefix count)
        ps.add("copy.w", np.zeros((c.h, 3)))
        ps.add("copy.b", np.array([c.copy_bias, 0.0, 0.0]))
        # mixture gate: (vocabulary, copy)
        ps.add("mix.w", np.zeros((c.h, 2)))
        ps.add("mix.b", np.zeros(2))
        return ps

    def save(self, path: str | Path) -> None:
        arrays = {f"p:{k}": v for k, v in self.params.items()}
        np.savez(path, config=json.dumps(asdict(self.config)), rarity=self.rarity,
                 selection=json.dumps(self.selection), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "QueryGenerator":
        with np.load(path, allow_pickle=False) as z:
            ps = ParamSet()
            for k in z.files:
                if k.startswith("p:"):
                    ps.add(k[2:], z[k].copy())
            gen = cls(GeneratorConfig(**json.loads(str(z["config"]))), ps, z["rarity"].copy())
            gen.selection = json.loads(str(z["selection"]))
        return gen

    def _doc_counts(self, docs: Sequence[Sequence[int]]) -> np.ndarray:
        c = self.config
        return np.stack([_doc_counts(d, c.vocab_size, c.max_doc_len) for d in docs])

    def _encode(self, P, docs: Sequence[Sequence[int]]) -> Tensor:
        c = self.config
        seqs = [np.asarray(d[: c.max_doc_len], dtype=np.int64) for d in docs]
        if any(s.size == 0 for s in seqs):
            raise ValueError("cannot encode an empty document")
        flat = np.concatenate(seqs)
        seg = np.repeat(np.arange(len(seqs)), [len(s) for s in seqs])
        return _mlp(P, "genc", nx.segment_mean(nx.gather(P["tok_emb"], flat), seg, len(seqs)), 2)

    def _step(self, P, pooled_rows: Tensor, positions: np.ndarray,
              prefixes: Sequence[Sequence[int]], doc_counts: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """(vocabulary logits, copy logits, gate logits) for each decoding state."""
        c = self.config
        n = len(positions)
        flat = np.asarray([t for p in prefixes for t in p], dtype=np.int64)
        seg = np.repeat(np.arange(n), [len(p) for p in prefixes])
        z = nx.add(pooled_rows, nx.gather(P["gdec.pos"], positions))
        if flat.size:
            z = nx.add(z, nx.segment_mean(nx.gather(P["gdec.prev"], flat), seg, n))
        hid = nx.relu(nx.add(nx.matmul(z, P["gdec.w0"]), P["gdec.b0"]))
        vocab = nx.add(nx.matmul(hid, P["gdec.w1"]), P["gdec.b1"])
        pref = np.zeros((n, c.vocab_size + 1))
        if flat.size:
            np.add.at(pref, (seg, flat), 1.0)
        remaining = np.maximum(doc_counts - pref, 0.0)
        bag = np.log1p(remaining)
        heads = nx.add(nx.matmul(hid, P["copy.w"]), P["copy.b"])
        pick = np.eye(3)
        # tokens with nothing left to copy get a large finite penalty
        copy = Tensor(np.where(remaining > 0, 0.0, -_NO_COPY))
        for j, feat in enumerate((bag, bag * self.rarity[None, :], pref)):
            copy = nx.add(copy, nx.mul(nx.matmul(heads, Tensor(pick[:, j:j + 1])), Tensor(feat)))
        gate = nx.add(nx.matmul(hid, P["mix.w"]), P["mix.b"])
        return vocab, copy, gate

    def _logprobs(self, P, pooled: np.ndarray, positions: np.ndarray, prefixes, doc_counts: np.ndarray) -> np.ndarray:
        vocab, copy, gate = self._step(P, Tensor(pooled), positions, prefixes, doc_counts)
        return nx.mixture_logprobs([vocab.data, copy.data], gate.data)

    @staticmethod
    def _teacher_rows(pairs, max_len: int, end: int):
        ex, pos, tgt, pre = [], [], [], []
        for b, (_, q) in enumerate(pairs):
            q = list(q[:max_len])
            for t in range(len(q) + 1):
                ex.append(b)
                pos.append(t)
                tgt.append(q[t] if t < len(q) else end)
                pre.append(q[:t])
        return np.asarray(ex), np.asarray(pos), np.asarray(tgt), pre

    def batch_loss(self, P, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]) -> Tensor:
        """Teacher-forced cross-entropy summed over query tokens (end marker included), batch mean."""
        pooled = self._encode(P, [d for d, _ in pairs])
        ex, pos, tgt, pre = self._teacher_rows(pairs, self.config.max_query_len, self.end)
        counts = self._doc_counts([d for d, _ in pairs])
        vocab, copy, gate = self._step(P, nx.gather(pooled, ex), pos, pre, counts[ex])
        return nx.scale(nx.mixture_xent([vocab, copy], gate, tgt, reduction="sum"), 1.0 / len(pairs))

    def token_accuracy(self, pairs) -> tuple[float, float]:
        """Teacher-forced next-token accuracy and exact-match rate over ``pairs``."""
        if not pairs:
            return 0.0, 0.0
        correct = total = exact = 0
        with nx.no_grad():
            P = self.params.track()
            for s in range(0, len(pairs), 256):
                part = pairs[s:s + 256]
                pooled = self._encode(P, [d for d, _ in part]).data
                ex, pos, tgt, pre = self._teacher_rows(part, self.config.max_query_len, self.end)
                lp = self._logprobs(P, pooled[ex], pos, pre, self._doc_counts([d for d, _ in part])[ex])
                ok = lp.argmax(1) == tgt
                correct += int(ok.sum())
                total += len(ok)
                exact += int(np.logical_and.reduceat(ok, np.flatnonzero(np.r_[True, ex[1:] != ex[:-1]])).sum())
        return correct / total, exact / len(pairs)

    def generate(self, docs: Sequence[Sequence[int]], beam_width: int = 4, n_best: int = 1,
                 chunk: int = 128) -> list[list[list[int]]]:
        """Beam search; returns the ``n_best`` highest-scoring queries per document."""
        if n_best > beam_width:
            raise ValueError("n_best must be <= beam_width")
        out: list[list[list[int]]] = []
        for s in range(0, len(docs), chunk):
            out.extend(self._beam(docs[s:s + chunk], beam_width, n_best))
        return out

    def _beam(self, docs, beam_width: int, n_best: int) -> list[list[list[int]]]:
        c = self.config
        V1 = c.vocab_size + 1
        with nx.no_grad():
            P = self.params.track()
            pooled = self._encode(P, docs).data
            counts = self._doc_counts(docs)
            live = [[(0.0, [])] for _ in docs]
            done: list[list[tuple[float, list[int]]]] = [[] for _ in docs]
            for t in range(c.max_query_len + 1):
                rows = [(i, b) for i in range(len(docs)) for b in live[i]]
                if not rows:
                    break
                idx = np.asarray([i for i, _ in rows])
                lp = self._logprobs(P, pooled[idx], np.full(len(rows), t), [b[1] for _, b in rows], counts[idx])
                if t == 0:
                    lp[:, self.end] = -np.inf
                if t == c.max_query_len:
                    lp[:, : self.end] = -np.inf
                start = 0
                for i in range(len(docs)):
                    nb = len(live[i])
                    if nb == 0:
                        continue
                    block = lp[start:start + nb] + np.asarray([b[0] for b in live[i]])[:, None]
                    start += nb
                    flat = block.ravel()
                    kk = min(beam_width, flat.size)
                    cand = np.argpartition(-flat, kk - 1)[:kk]
                    cand = cand[np.lexsort((cand, -flat[cand]))]
                    new_live = []
                    for f in cand:
                        if not np.isfinite(flat[f]):
                            continue
                        b, tok = divmod(int(f), V1)
                        score, seq = float(flat[f]), live[i][b][1]
                        if tok == self.end:
                            done[i].append((score, seq))
                        else:
                            new_live.append((score, seq + [tok]))
                    live[i] = new_live
        result = []
        for i in range(len(docs)):
            ranked = sorted(done[i], key=lambda x: (-x[0], x[1]))[:n_best]
            result.append([seq for _, seq in ranked])
        return result


def _pairs(examples, corpus: Corpus) -> list[tuple[list[int], list[int]]]:
    return [(corpus.tokens(target), list(q)) for _, q, target in examples if target in corpus and len(q)]


def train_query_generator(r0_train: RetrievalSet, corpus: Corpus, config: GeneratorConfig,
                          r0_val: RetrievalSet | None = None) -> QueryGenerator:
    """Teacher-forced doc -> query training; keeps the checkpoint with the best
    validation token accuracy (exact-match rate breaks ties)."""
    pairs = _pairs(r0_train.examples, corpus)
    if not pairs:
        raise ValueError("query generator needs a non-empty training set")
    val = _pairs(r0_val.examples, corpus) if r0_val is not None else []
    val = val or pairs[:256]
    gen = QueryGenerator(config, rarity=token_rarity([t for _, t in corpus.documents], config.vocab_size))
    state = OptimizerState(lr=config.lr, warmup=config.warmup)
    rng = np.random.default_rng(_seed(config.seed, "generator-batches"))
    best, best_params = (-1.0, -1.0), gen.params.copy()
    order, pos = rng.permutation(len(pairs)), 0
    for step in range(1, config.steps + 1):
        if pos + config.batch_size > len(order):
            order, pos = rng.permutation(len(pairs)), 0
        take = order[pos:pos + config.batch_size] if len(pairs) >= config.batch_size else \
            rng.integers(len(pairs), size=config.batch_size)
        pos += config.batch_size
        batch = [pairs[j] for j in take]
        _, g = value_and_grad(gen.batch_loss, gen.params, batch)
        base_step(gen.params, g, state)
        if step % config.eval_interval == 0 or step == config.steps:
            score = gen.token_accuracy(val)
            if score > best:
                best, best_params = score, gen.params.copy()
            log.debug("generator step %d val token acc %.3f exact %.3f", step, *score)
    if config.steps > 0:
        gen.params = best_params
    gen.selection = {"token_accuracy": best[0], "exact_match": best[1]}
    return gen


# ----------------------------------------------------------------------------
# pseudo-queries
# ----------------------------------------------------------------------------

@dataclass
class PseudoQuerySet:
    items: list[tuple[list[int], str, str]] = field(default_factory=list)  # (tokens, target, source)

    def __len__(self) -> int:
        return len(self.items)

    def extend(self, other: "PseudoQuerySet") -> None:
        self.items.extend(other.items)

    def targets(self) -> set[str]:
        return {t for _, t, _ in self.items}

    def save(self, path: str | Path, vocab: Sequence[str]) -> None:
        with open(path, "w") as fh:
            for n, (toks, target, source) in enumerate(self.items):
                fh.write(json.dumps({"qid": f"pq{n}", "query": " ".join(vocab[t] for t in toks),
                                     "docid": target, "source": source}) + "\n")

    @classmethod
    def load(cls, path: str | Path, vocab: Sequence[str]) -> "PseudoQuerySet":
        lookup = {w: i for i, w in enumerate(vocab)}
        items = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    o = json.loads(line)
                    items.append(([lookup.get(w, 0) for w in o["query"].lower().split()],
                                  o["docid"], o.get("source", "old")))
        return cls(items)


def sample_pseudo_queries(gen: QueryGenerator, docs: Corpus, per_doc: int = 1, beam_width: int = 4,
                          seed: int = 0, source: str = "old") -> PseudoQuerySet:
    """Top ``per_doc`` beam hypotheses for each document. Beam search is
    deterministic; ``seed`` is accepted for interface symmetry with samplers."""
    if per_doc < 1:
        raise ValueError("per_doc must be >= 1")
    outs = gen.generate([t for _, t in docs.documents], beam_width=max(beam_width, per_doc), n_best=per_doc)
    items = [(q, ext, source) for (ext, _), qs in zip(docs.documents, outs) for q in qs]
    return PseudoQuerySet(items)


def lexical_pseudo_queries(docs: Corpus, idf_corpus: Corpus | None = None, q_len: int = 8,
                           source: str = "old") -> PseudoQuerySet:
    """Highest TF-IDF tokens of each document as its pseudo-query (ablation sampler)."""
    ref = idf_corpus or docs
    V = len(docs.vocab)
    _, idf = tfidf_matrix([t for _, t in ref.documents], V)
    x, _ = tfidf_matrix([t for _, t in docs.documents], V, idf=idf)
    items = []
    for (ext, toks), row in zip(docs.documents, x):
        cand = sorted(set(toks), key=lambda t: (-row[t], t))[:q_len]
        items.append((cand or list(toks[:1]), ext, source))
    return PseudoQuerySet(items)
