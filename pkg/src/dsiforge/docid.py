"""Document identifier assignment (atomic, naive string, semantic string) and the prefix trie."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

Code = Union[int, tuple[int, ...]]

MODES = ("atomic", "naive", "semantic")


def _documents(corpus) -> list[tuple[str, Sequence[int]]]:
    docs = getattr(corpus, "documents", corpus)
    out = []
    for d in docs:
        if isinstance(d, str):
            out.append((d, ()))
        else:
            out.append((d[0], d[1]))
    return out


def format_code(code: Code) -> str:
    if isinstance(code, (int, np.integer)):
        return str(int(code))
    return "-".join(str(x) for x in code)


def parse_code(text: str, mode: str) -> Code:
    if mode == "atomic":
        return int(text)
    return tuple(int(x) for x in text.split("-")) if text else ()


def _digits(value: int, base: int, width: int) -> tuple[int, ...]:
    out = []
    while value > 0:
        value, r = divmod(value, base)
        out.append(r)
    out.extend([0] * (width - len(out)))
    return tuple(reversed(out))


def _leaf_width(m: int, base: int) -> int:
    w = 0
    while base ** w < m:
        w += 1
    return w


# ----------------------------------------------------------------------------
# semantic tree
# ----------------------------------------------------------------------------

def tfidf_matrix(token_lists: Sequence[Sequence[int]], vocab_size: int,
                 idf: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised (1 + log tf) * idf vectors. Returns (matrix, idf)."""
    n = len(token_lists)
    tf = np.zeros((n, vocab_size))
    for i, toks in enumerate(token_lists):
        t = np.asarray([x for x in toks if x < vocab_size], dtype=np.int64)
        if t.size:
            np.add.at(tf[i], t, 1.0)
    if idf is None:
        df = (tf > 0).sum(axis=0)
        idf = np.where(df > 0, np.log(max(n, 1) / np.maximum(df, 1)), 0.0)
    logtf = np.where(tf > 0, 1.0 + np.log(np.maximum(tf, 1.0)), 0.0)
    x = logtf * idf[None, :]
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0), idf


def _sqdist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = _sqdist(x, np.asarray(centers)).min(axis=1)
        tot = d2.sum()
        if tot <= 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / tot)])
    return np.asarray(centers)


def _balanced_assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    n, k = len(x), len(centers)
    cap = math.ceil(n / k)
    d = np.round(_sqdist(x, centers), 12)
    order = np.lexsort((np.tile(np.arange(k), n), np.repeat(np.arange(n), k), d.ravel()))
    labels = np.full(n, -1)
    fill = np.zeros(k, dtype=np.int64)
    for flat in order:
        i, j = divmod(int(flat), k)
        if labels[i] < 0 and fill[j] < cap:
            labels[i] = j
            fill[j] += 1
    return labels


def balanced_kmeans(x: np.ndarray, k: int, seed: int, iters: int = 25) -> tuple[np.ndarray, np.ndarray]:
    """k-means++ seeded k-means with equal-capacity assignment."""
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, k, rng)
    labels = _balanced_assign(x, centers)
    for _ in range(iters):
        centers = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        new = _balanced_assign(x, centers)
        if np.array_equal(new, labels):
            break
        labels = new
    return labels, centers


@dataclass
class _Node:
    prefix: tuple[int, ...]
    centers: np.ndarray | None = None
    children: list["_Node"] = field(default_factory=list)
    width: int = 0
    next_index: int = 0

    def take(self, base: int) -> tuple[int, ...]:
        i = self.next_index
        self.next_index += 1
        w = max(self.width, len(_digits(i, base, 0)))
        code = self.prefix + _digits(i, base, w)
        return code if code else (0,)


@dataclass
class SemanticTree:
    base: int
    leaf_size: int
    idf: np.ndarray
    root: _Node

    def route(self, vec: np.ndarray) -> _Node:
        node = self.root
        v = vec[: len(self.idf)]
        while node.children:
            d = _sqdist(v[None], node.centers)[0]
            node = node.children[int(np.argmin(d))]
        return node


def _build(x: np.ndarray, idx: np.ndarray, prefix: tuple[int, ...], base: int, m: int,
           seed: int, out: dict[int, tuple[int, ...]]) -> _Node:
    sub = x[idx]
    degenerate = len(idx) > 1 and np.allclose(sub, sub[0], atol=1e-12)
    if len(idx) <= m or degenerate:
        width = _leaf_width(m, base) if not degenerate else _leaf_width(len(idx), base)
        node = _Node(prefix, width=width)
        for i in idx:
            out[int(i)] = node.take(base)
        return node
    k = min(base, len(idx))
    labels, centers = balanced_kmeans(sub, k, seed + len(prefix) * 7919 + sum(prefix))
    node = _Node(prefix, centers=centers)
    for j in range(k):
        child_idx = idx[labels == j]
        node.children.append(_build(x, child_idx, prefix + (j,), base, m, seed + j + 1, out))
    return node


# ----------------------------------------------------------------------------
# registry
# ----------------------------------------------------------------------------

class DocidRegistry:
    """Bijection between external document ids and docid codes."""

    def __init__(self, mode: str, base: int = 10):
        if mode not in MODES:
            raise ValueError(f"unknown docid mode {mode!r}")
        self.mode = mode
        self.base = base
        self._code: dict[str, Code] = {}
        self._doc: dict[Code, str] = {}
        self.tree: SemanticTree | None = None

    @property
    def structured(self) -> bool:
        return self.mode != "atomic"

    def __len__(self) -> int:
        return len(self._code)

    def __contains__(self, ext_id: str) -> bool:
        return ext_id in self._code

    def register(self, ext_id: str, code: Code) -> None:
        if ext_id in self._code:
            raise KeyError(f"document {ext_id!r} already registered")
        if code in self._doc:
            raise KeyError(f"docid {format_code(code)} already assigned")
        if self.structured and any(not 0 <= c < self.base for c in code):
            raise ValueError(f"docid {format_code(code)} has digits outside base {self.base}")
        self._code[ext_id] = code
        self._doc[code] = ext_id

    def code(self, ext_id: str) -> Code:
        try:
            return self._code[ext_id]
        except KeyError:
            raise KeyError(f"document {ext_id!r} is not registered") from None

    def doc(self, code: Code) -> str:
        return self._doc[code]

    def has_code(self, code: Code) -> bool:
        return code in self._doc

    def ids(self) -> list[str]:
        return list(self._code)

    def codes(self) -> list[Code]:
        return list(self._code.values())

    def items(self):
        return self._code.items()

    def max_code_len(self) -> int:
        if not self.structured:
            return 1
        return max((len(c) for c in self._doc), default=1)

    def extend(self, corpus, seed: int = 0) -> list[str]:
        """Register the documents of a newly arriving corpus; returns their ids."""
        docs = _documents(corpus)
        if self.mode == "atomic":
            n = len(self)
            for i, (ext, _) in enumerate(docs):
                self.register(ext, n + i)
        elif self.mode == "naive":
            _naive_into(self, docs, seed)
        else:
            if self.tree is None:
                raise ValueError("semantic registry has no tree; build it with assign_semantic")
            vocab = len(self.tree.idf)
            vecs, _ = tfidf_matrix([t for _, t in docs], vocab, idf=self.tree.idf)
            for (ext, _), v in zip(docs, vecs):
                self.register(ext, self.tree.route(v).take(self.base))
        return [ext for ext, _ in docs]

    def save(self, path: str | Path) -> None:
        lines = [f"# dsiforge-registry mode={self.mode} base={self.base}"]
        lines += [f"{ext}\t{format_code(c)}" for ext, c in self._code.items()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DocidRegistry":
        text = Path(path).read_text().splitlines()
        return cls.from_lines(text)

    def to_lines(self) -> list[str]:
        return [f"# dsiforge-registry mode={self.mode} base={self.base}"] + [
            f"{ext}\t{format_code(c)}" for ext, c in self._code.items()]

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> "DocidRegistry":
        lines = list(lines)
        if not lines or not lines[0].startswith("# dsiforge-registry"):
            raise ValueError("missing registry header line")
        meta = dict(kv.split("=") for kv in lines[0].split()[2:])
        reg = cls(meta["mode"], int(meta["base"]))
        for ln in lines[1:]:
            if not ln.strip():
                continue
            ext, code = ln.split("\t")
            reg.register(ext, parse_code(code, reg.mode))
        return reg


def assign_atomic(corpus) -> DocidRegistry:
    docs = _documents(corpus)
    if not docs:
        raise ValueError("corpus is empty")
    reg = DocidRegistry("atomic")
    reg.extend(docs)
    return reg


def _naive_into(reg: DocidRegistry, docs, seed: int) -> None:
    total = len(reg) + len(docs)
    used = np.array(sorted(int("".join(map(str, c))) for c in reg.codes()), dtype=np.int64)
    pool = np.setdiff1d(np.arange(10 * total, dtype=np.int64), used)
    rng = np.random.default_rng(seed)
    picks = rng.choice(pool, size=len(docs), replace=False)
    for (ext, _), v in zip(docs, picks):
        reg.register(ext, tuple(int(ch) for ch in str(int(v))))


def assign_naive(corpus, seed: int) -> DocidRegistry:
    """Random distinct integers in [0, 10N) written as decimal digit strings."""
    docs = _documents(corpus)
    if not docs:
        raise ValueError("corpus is empty")
    reg = DocidRegistry("naive", base=10)
    _naive_into(reg, docs, seed)
    return reg


def assign_semantic(corpus, base: int = 10, leaf_size: int = 10, seed: int = 0,
                    vocab_size: int | None = None) -> DocidRegistry:
    """Hierarchical k-means over TF-IDF vectors; id = branch digits + leaf index."""
    docs = _documents(corpus)
    if not docs:
        raise ValueError("corpus is empty")
    if base < 2:
        raise ValueError("base must be >= 2")
    if leaf_size < 1:
        raise ValueError("leaf_size must be >= 1")
    toks = [t for _, t in docs]
    if vocab_size is None:
        vocab_size = 1 + max((max(t) for t in toks if len(t)), default=0)
    x, idf = tfidf_matrix(toks, vocab_size)
    out: dict[int, tuple[int, ...]] = {}
    root = _build(x, np.arange(len(docs)), (), base, leaf_size, seed, out)
    reg = DocidRegistry("semantic", base=base)
    for i, (ext, _) in enumerate(docs):
        reg.register(ext, out[i])
    reg.tree = SemanticTree(base, leaf_size, idf, root)
    return reg


# ----------------------------------------------------------------------------
# trie
# ----------------------------------------------------------------------------

class TrieNode:
    __slots__ = ("children", "terminal")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.terminal = False


class DocidTrie:
    def __init__(self):
        self.root = TrieNode()
        self.size = 0

    def insert(self, code: Sequence[int]) -> None:
        node = self.root
        for d in code:
            node = node.children.setdefault(int(d), TrieNode())
        if not node.terminal:
            node.terminal = True
            self.size += 1

    def __contains__(self, code) -> bool:
        node = self.root
        for d in code:
            node = node.children.get(int(d))
            if node is None:
                return False
        return node.terminal

    def paths(self) -> list[tuple[int, ...]]:
        out, stack = [], [(self.root, ())]
        while stack:
            node, pre = stack.pop()
            if node.terminal:
                out.append(pre)
            for d in sorted(node.children, reverse=True):
                stack.append((node.children[d], pre + (d,)))
        return out


def build_prefix_trie(registry: DocidRegistry) -> DocidTrie:
    if not registry.structured:
        raise ValueError("prefix trie needs a string-docid registry, got atomic")
    trie = DocidTrie()
    for c in registry.codes():
        trie.insert(c)
    return trie
