"""The indexer: token sequence + task prompt -> docid scores.

Encoder: embedding lookup, mean-pool with the prompt embedding, then an MLP.
Atomic docids are scored by a head matrix with one row per document; string
docids are produced digit by digit by a small decoder conditioned on the
pooled vector, a position embedding and the mean embedding of the digits
emitted so far.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .docid import Code, DocidRegistry, DocidTrie
from .numerics import ParamSet, Tensor, seeded_init

INDEXING, RETRIEVAL = 0, 1
TASKS = {"indexing": INDEXING, "retrieval": RETRIEVAL}
MAGIC = b"DSIFORGE1\n"

# (task, tokens, target code)
Example = tuple[int, Sequence[int], Code]
RankedDocids = list[tuple[Code, float]]


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 64
    h: int = 128
    depth: int = 1
    mode: str = "atomic"  # "atomic" | "structured"
    base: int = 10
    max_code_len: int = 8
    max_len: int = 32
    emb_scale: float = 0.1
    head_scale: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("atomic", "structured"):
            raise ValueError(f"unknown model mode {self.mode!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")


def _seed(base: int, name: str) -> int:
    return (base * 1_000_003 + zlib.crc32(name.encode())) % (2 ** 63)


def _mlp_params(ps: ParamSet, prefix: str, dims: list[int], seed: int) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        ps.add(f"{prefix}.w{i}", seeded_init((a, b), 1.0 / np.sqrt(a), _seed(seed, f"{prefix}.w{i}")))
        ps.add(f"{prefix}.b{i}", np.zeros(b))


def _mlp(P: dict[str, Tensor], prefix: str, x: Tensor, n_layers: int) -> Tensor:
    for i in range(n_layers):
        x = nx.add(nx.matmul(x, P[f"{prefix}.w{i}"]), P[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            x = nx.relu(x)
    return x


class IndexerModel:
    def __init__(self, config: ModelConfig, registry: DocidRegistry, params: ParamSet | None = None):
        self.config = config
        self.registry = registry
        if (config.mode == "structured") != registry.structured:
            raise ValueError(f"model mode {config.mode!r} does not match registry mode {registry.mode!r}")
        if config.mode == "structured" and registry.base != config.base:
            raise ValueError("registry base differs from model base")
        self.params = params if params is not None else self._init_params()

    # -- construction ---------------------------------------------------------

    def _init_params(self) -> ParamSet:
        c = self.config
        ps = ParamSet()
        ps.add("tok_emb", seeded_init((c.vocab_size + 2, c.d), c.emb_scale, _seed(c.seed, "tok_emb")))
        _mlp_params(ps, "enc", [c.d] + [c.h] * c.depth + [c.d], c.seed)
        if c.mode == "atomic":
            ps.add("head", seeded_init((len(self.registry), c.d), c.head_scale, _seed(c.seed, "head")))
        else:
            ps.add("dec.pos", seeded_init((c.max_code_len + 1, c.d), c.emb_scale, _seed(c.seed, "dec.pos")))
            ps.add("dec.digit", seeded_init((c.base, c.d), c.emb_scale, _seed(c.seed, "dec.digit")))
            _mlp_params(ps, "dec", [c.d, c.h, c.base + 1], c.seed)
        return ps

    @property
    def end_marker(self) -> int:
        return self.config.base

    def prompt_token(self, task: int) -> int:
        return self.config.vocab_size + task

    # -- encoder ----------------------------------------------------------------

    def _sequence(self, task: int, tokens: Sequence[int]) -> np.ndarray:
        toks = np.asarray(tokens, dtype=np.int64)[: self.config.max_len]
        if toks.size == 0:
            raise ValueError("cannot encode an empty token sequence")
        if toks.min() < 0 or toks.max() >= self.config.vocab_size:
            raise ValueError(f"token id outside vocabulary of size {self.config.vocab_size}")
        if task not in (INDEXING, RETRIEVAL):
            raise ValueError(f"unknown task prompt {task!r}")
        return np.concatenate([[self.prompt_token(task)], toks])

    def encode_batch(self, P: dict[str, Tensor], tasks: Sequence[int],
                     token_lists: Sequence[Sequence[int]]) -> Tensor:
        seqs = [self._sequence(t, toks) for t, toks in zip(tasks, token_lists)]
        flat = np.concatenate(seqs)
        seg = np.repeat(np.arange(len(seqs)), [len(s) for s in seqs])
        x = nx.segment_mean(nx.gather(P["tok_emb"], flat), seg, len(seqs))
        return _mlp(P, "enc", x, self.config.depth + 1)

    def encode(self, task: int, tokens: Sequence[int]) -> np.ndarray:
        with nx.no_grad():
            return self.encode_batch(self.params.track(), [task], [tokens]).data[0].copy()

    # -- atomic head --------------------------------------------------------------

    def score_atomic(self, pooled: np.ndarray) -> np.ndarray:
        """Logits over the registered atomic docids for a pooled vector or batch."""
        if self.config.mode != "atomic":
            raise ValueError("score_atomic called on a structured-docid model")
        # einsum keeps each logit independent of the number of head rows, so
        # growing the head leaves old logits bitwise identical (BLAS does not)
        return np.einsum("...d,kd->...k", np.asarray(pooled, dtype=np.float64), self.params["head"])

    # -- structured decoder -------------------------------------------------------

    def _decoder_logits(self, P, pooled_rows: Tensor, positions: np.ndarray,
                        prefixes: Sequence[Sequence[int]]) -> Tensor:
        n = len(positions)
        if np.max(positions, initial=0) > self.config.max_code_len:
            raise ValueError(f"docid longer than max_code_len={self.config.max_code_len}")
        flat = np.asarray([d for p in prefixes for d in p], dtype=np.int64)
        seg = np.repeat(np.arange(n), [len(p) for p in prefixes])
        z = nx.add(pooled_rows, nx.gather(P["dec.pos"], positions))
        if flat.size:
            z = nx.add(z, nx.segment_mean(nx.gather(P["dec.digit"], flat), seg, n))
        return _mlp(P, "dec", z, 2)

    def digit_logprobs(self, pooled: np.ndarray, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Log-probabilities over digits + end marker for each (pooled row, prefix)."""
        pooled = np.atleast_2d(pooled)
        with nx.no_grad():
            P = self.params.track()
            pos = np.asarray([len(p) for p in prefixes], dtype=np.int64)
            z = self._decoder_logits(P, Tensor(pooled), pos, prefixes).data
        return z - z.max(1, keepdims=True) - np.log(np.exp(z - z.max(1, keepdims=True)).sum(1, keepdims=True))

    def decode_structured(self, pooled, trie: DocidTrie, beam_width: int = 10, k: int = 10) -> list[RankedDocids]:
        """Trie-constrained beam search; one ranking per pooled row.

        Scores are sums of digit log-probabilities (end marker included);
        ties go to the lexicographically smaller digit string.
        """
        if self.config.mode != "structured":
            raise ValueError("decode_structured needs a structured-docid model")
        if trie.size == 0:
            raise ValueError("empty docid trie")
        if beam_width < k:
            raise ValueError("beam_width must be >= k")
        pooled = np.atleast_2d(np.asarray(pooled, dtype=np.float64))
        nq = len(pooled)
        live = [[(0.0, (), trie.root)] for _ in range(nq)]
        done: list[list[tuple[float, tuple]]] = [[] for _ in range(nq)]
        end = self.end_marker
        while True:
            rows = [(q, b) for q in range(nq) for b in live[q]]
            if not rows:
                break
            lp = self.digit_logprobs(pooled[[q for q, _ in rows]], [b[1] for _, b in rows])
            cands: list[list] = [[] for _ in range(nq)]
            for (q, (score, digits, node)), row in zip(rows, lp):
                if node.terminal:
                    cands[q].append((score + row[end], digits, None))
                for dgt, child in node.children.items():
                    cands[q].append((score + row[dgt], digits + (dgt,), child))
            for q in range(nq):
                cands[q].sort(key=lambda c: (-c[0], c[1], c[2] is not None))
                live[q] = []
                for score, digits, node in cands[q][:beam_width]:
                    if node is None:
                        done[q].append((score, digits))
                    else:
                        live[q].append((score, digits, node))
        out = []
        for q in range(nq):
            ranked = sorted(done[q], key=lambda c: (-c[0], c[1]))[:k]
            out.append([(digits, float(s)) for s, digits in ranked])
        return out

    # -- losses -------------------------------------------------------------------

    def _target_codes(self, examples: Sequence[Example]) -> list[Code]:
        codes = []
        for _, _, code in examples:
            if not self.registry.has_code(code):
                raise KeyError(f"docid {code!r} is not registered")
            codes.append(code)
        return codes

    def batch_loss(self, P: dict[str, Tensor], examples: Sequence[Example]) -> Tensor:
        """Mean over the batch of the per-example loss."""
        codes = self._target_codes(examples)
        pooled = self.encode_batch(P, [e[0] for e in examples], [e[1] for e in examples])
        if self.config.mode == "atomic":
            logits = nx.matmul(pooled, nx.transpose(P["head"]))
            return nx.softmax_xent(logits, np.asarray(codes, dtype=np.int64))
        ex_idx, positions, targets, prefixes = [], [], [], []
        for b, code in enumerate(codes):
            for t in range(len(code) + 1):
                ex_idx.append(b)
                positions.append(t)
                targets.append(code[t] if t < len(code) else self.end_marker)
                prefixes.append(code[:t])
        rows = nx.gather(pooled, np.asarray(ex_idx))
        logits = self._decoder_logits(P, rows, np.asarray(positions), prefixes)
        return nx.scale(nx.softmax_xent(logits, np.asarray(targets), reduction="sum"), 1.0 / len(codes))

    def loss_for_example(self, example: Example, P: dict[str, Tensor] | None = None) -> Tensor:
        return self.batch_loss(P if P is not None else self.params.track(), [example])

    # -- ranking ------------------------------------------------------------------

    def rank(self, task: int, token_lists: Sequence[Sequence[int]], k: int = 10,
             trie: DocidTrie | None = None, beam_width: int = 10,
             chunk: int = 512) -> list[RankedDocids]:
        """Top-k docids for each input; ties broken by ascending docid."""
        out: list[RankedDocids] = []
        for s in range(0, len(token_lists), chunk):
            part = token_lists[s:s + chunk]
            with nx.no_grad():
                pooled = self.encode_batch(self.params.track(), [task] * len(part), part).data
            if self.config.mode == "atomic":
                logits = self.score_atomic(pooled)
                out.extend(_top_k(row, k) for row in logits)
            else:
                if trie is None:
                    raise ValueError("structured ranking needs a docid trie")
                out.extend(self.decode_structured(pooled, trie, max(beam_width, k), k))
        return out

    # -- growth -------------------------------------------------------------------

    def grow_output_space(self, new_doc_ids: Sequence[str], init_scale: float | None = None,
                          seed: int = 0) -> list[int]:
        """Register new atomic docids and append one freshly initialised head row each."""
        if self.config.mode != "atomic":
            raise ValueError("grow_output_space only applies to atomic docids")
        new_doc_ids = list(new_doc_ids)
        dup = [d for d in new_doc_ids if d in self.registry]
        if dup or len(set(new_doc_ids)) != len(new_doc_ids):
            raise KeyError(f"documents already registered: {dup[:5] or 'repeated in input'}")
        if not new_doc_ids:
            return []
        scale = self.config.head_scale if init_scale is None else init_scale
        n0 = len(self.registry)
        self.registry.extend(new_doc_ids)
        rows = seeded_init((len(new_doc_ids), self.config.d), scale, seed)
        self.params.replace("head", np.concatenate([self.params["head"], rows], axis=0))
        return list(range(n0, n0 + len(new_doc_ids)))

    def copy(self) -> "IndexerModel":
        reg = DocidRegistry.from_lines(self.registry.to_lines())
        reg.tree = self.registry.tree
        return IndexerModel(self.config, reg, self.params.copy())

    # -- persistence --------------------------------------------------------------

    def save(self, path: str | Path) -> None:
        tensors, blobs, offset = [], [], 0
        for name, arr in self.params.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            tensors.append({"name": name, "shape": list(a.shape), "offset": offset})
            blobs.append(a.tobytes())
            offset += a.nbytes
        header = json.dumps({"version": 1, "config": asdict(self.config), "tensors": tensors,
                             "registry": self.registry.to_lines()}, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for b in blobs:
                fh.write(b)

    @classmethod
    def load(cls, path: str | Path) -> "IndexerModel":
        raw = Path(path).read_bytes()
        if not raw.startswith(MAGIC):
            raise ValueError(f"{path} is not a dsiforge checkpoint")
        (n,) = struct.unpack_from("<Q", raw, len(MAGIC))
        start = len(MAGIC) + 8
        header = json.loads(raw[start:start + n])
        body = raw[start + n:]
        ps = ParamSet()
        for t in header["tensors"]:
            size = int(np.prod(t["shape"])) * 8
            arr = np.frombuffer(body, dtype="<f8", count=size // 8, offset=t["offset"])
            ps.add(t["name"], arr.reshape(t["shape"]).astype(np.float64))
        return cls(ModelConfig(**header["config"]), DocidRegistry.from_lines(header["registry"]), ps)


def _top_k(row: np.ndarray, k: int) -> RankedDocids:
    """Top-k (index, score) by descending score, ascending index on ties."""
    n = row.shape[0]
    if k >= n:
        cand = np.arange(n)
    else:
        kth = np.partition(row, n - k)[n - k]
        cand = np.flatnonzero(row >= kth)
    order = cand[np.lexsort((cand, -row[cand]))][:k]
    return [(int(j), float(row[j])) for j in order]


def build_model(config: ModelConfig, registry: DocidRegistry) -> IndexerModel:
    if config.mode == "structured":
        config = replace(config, base=registry.base,
                         max_code_len=max(config.max_code_len, registry.max_code_len() + 2))
    return IndexerModel(config, registry)
