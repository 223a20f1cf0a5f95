"""Initial indexing of D0, continual indexing of D1..DK, and the method registry."""
from __future__ import annotations

import json
import logging
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bench import Corpus, SplitSet
from .docid import DocidRegistry, DocidTrie, assign_atomic, assign_naive, assign_semantic, build_prefix_trie
from .memory import (EpisodicMemory, GeneratorConfig, PseudoQuerySet, QueryGenerator,
                     lexical_pseudo_queries, sample_pseudo_queries, train_query_generator)
from .metrics import ForgettingLog, PerfMatrix, hits_at_k
from .model import INDEXING, RETRIEVAL, Example, IndexerModel, ModelConfig, build_model
from .optim import OptimizerState, SamConfig, train_step

log = logging.getLogger(__name__)

METRICS = ("indexing_accuracy", "hits@1", "hits@10")
KINDS = ("cl_new", "cl_union", "cl_union_epsmem", "cl_union_genmem", "from_scratch")
SCOPES = ("D0", "Dn", "Un")


# ----------------------------------------------------------------------------
# configuration
# ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 3000
    warmup: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    eval_interval: int = 100
    optimizer: str = "adam"  # "adam" | "sam"
    rho: float = 0.15
    sam_inner_batch: int | None = None
    mixing_ratio: int = 2  # indexing examples per retrieval example
    co_train: bool = True  # initial phase only: add R0 retrieval examples

    def __post_init__(self):
        if self.eval_interval <= 0 or self.steps % self.eval_interval:
            raise ValueError("eval_interval must divide steps")
        if self.optimizer not in ("adam", "sam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mixing_ratio < 1:
            raise ValueError("mixing_ratio must be >= 1")

    def sam(self) -> SamConfig | None:
        if self.optimizer != "sam":
            return None
        return SamConfig(rho=self.rho, inner_batch=self.sam_inner_batch)


@dataclass
class EngineConfig:
    vocab_size: int = 0  # filled from the split set when 0
    d: int = 64
    h: int = 128
    depth: int = 1
    docid: str = "atomic"  # "atomic" | "naive" | "semantic"
    base: int = 10
    leaf_size: int = 10
    emb_scale: float = 0.1
    head_scale: float = 0.02
    initial: TrainConfig = field(default_factory=TrainConfig)
    continual: TrainConfig = field(default_factory=lambda: TrainConfig(steps=800, warmup=50))
    generator_steps: int = 1500
    generator_kind: str = "learned"  # "learned" | "lexical"
    pseudo_per_doc: int = 1
    pseudo_beam: int = 4
    replay_balance: bool = False  # True: 50/50 old/new replay for Un scope
    beam_width: int = 10
    eval_split: str = "test"
    seed: int = 0

    def model_config(self, vocab_size: int, seed: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d=self.d, h=self.h, depth=self.depth,
                           mode="atomic" if self.docid == "atomic" else "structured",
                           base=self.base, emb_scale=self.emb_scale, head_scale=self.head_scale,
                           seed=seed)


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    scope: str | None = None
    r: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}")
        needs = self.kind in ("cl_union_epsmem", "cl_union_genmem")
        if needs and self.scope not in SCOPES:
            raise ValueError(f"{self.kind} needs a memory scope in {SCOPES}")
        if not needs and self.scope is not None:
            raise ValueError(f"{self.kind} takes no memory scope")

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        """``kind[:scope][:rN]``, e.g. ``cl_union_genmem:Un:r32``."""
        parts = text.strip().split(":")
        kind, scope, r = parts[0], None, None
        for p in parts[1:]:
            if re.fullmatch(r"r\d+", p):
                r = int(p[1:])
            else:
                scope = p
        return cls(kind, scope, r)

    @property
    def key(self) -> str:
        s = self.kind + (f":{self.scope}" if self.scope else "")
        return s + (f":r{self.r}" if self.r else "")

    @property
    def label(self) -> str:
        mem = f"({self.scope})" if self.scope else ""
        return {"cl_new": "cl(Dn)", "cl_union": "cl(Un)",
                "cl_union_epsmem": f"cl(Un)+epsmem{mem}", "cl_union_genmem": f"cl(Un)+genmem{mem}",
                "from_scratch": "train-from-scratch"}[self.kind] + (f" r={self.r}" if self.r else "")


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    selected: dict[int, int] = field(default_factory=dict)  # phase -> chosen step
    updates: dict[int, int] = field(default_factory=dict)  # phase -> steps executed
    gt_queries: dict[int, int] = field(default_factory=dict)  # phase -> ground-truth queries consumed

    def add(self, phase: int, step: int, split: str, metric: str, value: float) -> None:
        self.records.append({"phase": phase, "step": step, "split": split,
                             "metric": metric, "value": round(float(value), 12)})

    @property
    def total_updates(self) -> int:
        return sum(self.updates.values())

    def extend(self, other: "RunLog") -> None:
        self.records.extend(other.records)
        self.selected.update(other.selected)
        self.updates.update(other.updates)
        self.gt_queries.update(other.gt_queries)

    def write(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
            fh.write(json.dumps({"selected": {str(k): v for k, v in sorted(self.selected.items())},
                                 "updates": {str(k): v for k, v in sorted(self.updates.items())},
                                 "gt_queries": {str(k): v for k, v in sorted(self.gt_queries.items())}},
                                sort_keys=True) + "\n")


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------

def _rng(*parts) -> np.random.Generator:
    ints = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return np.random.default_rng(ints)


class Cycler:
    """Endless epoch-shuffled iterator over a fixed pool."""

    def __init__(self, items: Sequence, rng: np.random.Generator):
        if not items:
            raise ValueError("cannot sample from an empty pool")
        self.items = list(items)
        self.rng = rng
        self._order: list[int] = []

    def take(self, n: int) -> list:
        out = []
        while len(out) < n:
            if not self._order:
                self._order = list(self.rng.permutation(len(self.items)))
            out.append(self.items[self._order.pop()])
        return out


def batch_split(batch_size: int, r: int) -> tuple[int, int]:
    """(indexing, retrieval) slot counts for mixing ratio r:1."""
    n_ret = max(1, int(round(batch_size / (r + 1))))
    return batch_size - n_ret, n_ret


class Mixer:
    """Fills a batch from indexing pools and an optional retrieval pool.

    ``index_pools`` is a list of (Cycler, share) with shares summing to one.
    """

    def __init__(self, index_pools, retrieval_pools=None, batch_size: int = 32, r: int = 2):
        self.index_pools = index_pools
        self.retrieval_pools = retrieval_pools or []
        if self.retrieval_pools:
            self.n_idx, self.n_ret = batch_split(batch_size, r)
        else:
            self.n_idx, self.n_ret = batch_size, 0

    @staticmethod
    def _fill(pools, n: int) -> list:
        if not pools or n == 0:
            return []
        counts = [int(np.floor(share * n)) for _, share in pools]
        counts[-1] += n - sum(counts)
        out = []
        for (c, _), k in zip(pools, counts):
            out.extend(c.take(k))
        return out

    def next(self) -> list:
        return self._fill(self.index_pools, self.n_idx) + self._fill(self.retrieval_pools, self.n_ret)


def indexing_examples(corpus: Corpus, registry: DocidRegistry) -> list[Example]:
    return [(INDEXING, toks, registry.code(ext)) for ext, toks in corpus.documents]


def retrieval_examples(examples, registry: DocidRegistry) -> list[Example]:
    return [(RETRIEVAL, q, registry.code(t)) for _, q, t in examples if len(q)]


def new_registry(corpus: Corpus, cfg: EngineConfig, seed: int) -> DocidRegistry:
    if cfg.docid == "atomic":
        return assign_atomic(corpus)
    if cfg.docid == "naive":
        return assign_naive(corpus, seed)
    if cfg.docid == "semantic":
        return assign_semantic(corpus, cfg.base, cfg.leaf_size, seed, vocab_size=len(corpus.vocab))
    raise ValueError(f"unknown docid mode {cfg.docid!r}")


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

class Evaluator:
    def __init__(self, model: IndexerModel, beam_width: int = 10):
        self.model = model
        self.beam_width = beam_width
        self.trie: DocidTrie | None = build_prefix_trie(model.registry) if model.registry.structured else None

    def refresh(self) -> None:
        if self.model.registry.structured:
            self.trie = build_prefix_trie(self.model.registry)

    def correct(self, corpus: Corpus) -> np.ndarray:
        """Per-document top-1 indexing correctness."""
        reg = self.model.registry
        ranked = self.model.rank(INDEXING, [t for _, t in corpus.documents], k=1,
                                 trie=self.trie, beam_width=self.beam_width)
        return np.array([bool(r) and r[0][0] == reg.code(ext)
                         for r, (ext, _) in zip(ranked, corpus.documents)])

    def indexing(self, corpus: Corpus) -> float:
        return float(self.correct(corpus).mean()) if len(corpus) else 0.0

    def hits(self, examples, ks=(1, 10)) -> dict[int, float]:
        exs = [(q, t) for _, q, t in examples if len(q)]
        if not exs:
            return {k: 0.0 for k in ks}
        reg = self.model.registry
        ranked = self.model.rank(RETRIEVAL, [q for q, _ in exs], k=max(ks), trie=self.trie,
                                 beam_width=max(self.beam_width, max(ks)))
        gold = [reg.code(t) for _, t in exs]
        return {k: hits_at_k(ranked, gold, k) for k in ks}

    def corpus_metrics(self, corpus: Corpus, examples) -> dict[str, float]:
        h = self.hits(examples)
        return {"indexing_accuracy": self.indexing(corpus), "hits@1": h[1], "hits@10": h[10]}


# ----------------------------------------------------------------------------
# training loops
# ----------------------------------------------------------------------------

def _train_loop(model: IndexerModel, mixer: Mixer, tc: TrainConfig, phase: int, runlog: RunLog,
                validate, forgetting: ForgettingLog | None = None) -> None:
    """Shared step loop with periodic validation and best-checkpoint restore.

    ``validate`` returns (selection score, per-document correctness or None,
    dict of metrics to log).
    """
    state = OptimizerState(lr=tc.lr, warmup=tc.warmup)
    sam = tc.sam()
    loss_fn = model.batch_loss
    best_score, best_step, best_params = -np.inf, 0, None
    for step in range(1, tc.steps + 1):
        loss = train_step(model.params, mixer.next(), loss_fn, state, sam)
        if step % tc.eval_interval == 0:
            score, bits, logged = validate()
            runlog.add(phase, step, "train", "loss", loss)
            for name, v in logged.items():
                runlog.add(phase, step, "val", name, v)
            if forgetting is not None and bits is not None:
                forgetting.record(bits, step)
            # ties go to the later checkpoint: saturated selection metrics
            # otherwise freeze the earliest one
            if score >= best_score:
                best_score, best_step, best_params = score, step, model.params.copy()
    runlog.updates[phase] = state.step
    runlog.selected[phase] = best_step
    if best_params is not None:
        model.params.assign(best_params)


def train_initial(splits: SplitSet, cfg: EngineConfig, seed: int | None = None,
                  forgetting: ForgettingLog | None = None) -> tuple[IndexerModel, RunLog]:
    """Co-train indexing on D0 and retrieval on R0 train; select on mean(acc, Hits@1, Hits@10)."""
    seed = cfg.seed if seed is None else seed
    if not splits.corpora or not len(splits.corpora[0]):
        raise ValueError("split set has no D0 documents")
    tc = cfg.initial
    if tc.co_train and not len(splits.retrieval[0]["train"]):
        raise ValueError("R0 train split is empty")
    d0 = splits.corpora[0]
    registry = new_registry(d0, cfg, seed)
    vocab = cfg.vocab_size or len(splits.vocab)
    model = build_model(cfg.model_config(vocab, seed), registry)
    runlog = RunLog()
    _fit_fresh(model, d0, splits.retrieval[0], tc, cfg, seed, 0, runlog, forgetting)
    return model, runlog


def _fit_fresh(model, corpus: Corpus, r0: dict, tc: TrainConfig, cfg: EngineConfig, seed: int,
               phase: int, runlog: RunLog, forgetting: ForgettingLog | None = None) -> None:
    reg = model.registry
    idx = Cycler(indexing_examples(corpus, reg), _rng(seed, phase, "index"))
    ret = [(Cycler(retrieval_examples(r0["train"].examples, reg), _rng(seed, phase, "retr")), 1.0)] \
        if tc.co_train else None
    mixer = Mixer([(idx, 1.0)], ret, tc.batch_size, tc.mixing_ratio)
    ev = Evaluator(model, cfg.beam_width)
    val = r0["val"].examples

    def validate():
        bits = ev.correct(corpus)
        acc = float(bits.mean())
        if not tc.co_train:
            return acc, bits, {"indexing_accuracy": acc}
        h = ev.hits(val)
        m = {"indexing_accuracy": acc, "hits@1": h[1], "hits@10": h[10]}
        return float(np.mean(list(m.values()))), bits, m

    _train_loop(model, mixer, tc, phase, runlog, validate, forgetting)
    runlog.gt_queries[phase] = mixer.n_ret * tc.steps if tc.co_train else 0


@dataclass
class ReplaySources:
    """Everything continual phases may replay from, built once per seed."""
    episodic: EpisodicMemory
    generator: QueryGenerator | None = None
    pseudo: dict[str, list[int]] = field(default_factory=dict)  # doc id -> pseudo-query tokens (first)
    pseudo_all: dict[str, list[list[int]]] = field(default_factory=dict)
    lexical: bool = False

    def pseudo_for(self, corpus: Corpus, cfg: EngineConfig, seed: int) -> list[tuple[str, list[int], str]]:
        missing = Corpus([d for d in corpus.documents if d[0] not in self.pseudo_all], corpus.vocab)
        if len(missing):
            if self.lexical:
                pq = lexical_pseudo_queries(missing)
            else:
                if self.generator is None:
                    raise ValueError("generative replay requested but no query generator was trained")
                pq = sample_pseudo_queries(self.generator, missing, cfg.pseudo_per_doc, cfg.pseudo_beam, seed)
            for toks, ext, _ in pq.items:
                self.pseudo_all.setdefault(ext, []).append(toks)
        return [(f"pq:{ext}:{i}", q, ext) for ext, _ in corpus.documents
                for i, q in enumerate(self.pseudo_all.get(ext, []))]

    def export(self, corpora: dict[str, str]) -> PseudoQuerySet:
        return PseudoQuerySet([(q, ext, corpora.get(ext, "old"))
                               for ext, qs in sorted(self.pseudo_all.items()) for q in qs])


def build_replay_sources(splits: SplitSet, cfg: EngineConfig, seed: int, need_generator: bool) -> ReplaySources:
    mem = EpisodicMemory()
    for i in range(splits.n_corpora):
        mem.add(i, splits.retrieval[i]["train"])
    src = ReplaySources(mem, lexical=cfg.generator_kind == "lexical")
    if need_generator and cfg.generator_kind == "learned":
        gcfg = GeneratorConfig(vocab_size=cfg.vocab_size or len(splits.vocab), d=cfg.d, h=cfg.h,
                               steps=cfg.generator_steps, seed=seed)
        src.generator = train_query_generator(splits.retrieval[0]["train"], splits.corpora[0], gcfg,
                                              splits.retrieval[0]["val"])
    return src


@dataclass
class ContinualState:
    model: IndexerModel
    phase: int = 0


def continual_phase(state: ContinualState, method: MethodSpec, splits: SplitSet, n: int,
                    cfg: EngineConfig, sources: ReplaySources, seed: int | None = None) -> RunLog:
    """Index D_n into the model held by ``state`` according to ``method``.

    Selection uses indexing accuracy over all corpora seen so far.
    """
    seed = cfg.seed if seed is None else seed
    if method.kind == "from_scratch":
        raise ValueError("from_scratch is handled by run_sequence, not continual_phase")
    if n != state.phase + 1:
        raise ValueError(f"phase {n} out of order: model is at phase {state.phase}")
    if n >= splits.n_corpora:
        raise ValueError(f"phase {n} needs corpus D{n}, split set has {splits.n_corpora}")
    model = state.model
    tc = cfg.continual
    r = method.r or tc.mixing_ratio
    dn = splits.corpora[n]
    old = splits.union(n - 1)
    if model.registry.structured:
        model.registry.extend(dn, seed=int(_rng(seed, n, "naive").integers(2 ** 31)))
    else:
        model.grow_output_space(dn.ids(), seed=int(_rng(seed, n, "grow").integers(2 ** 31)))
    reg = model.registry
    tag = method.key
    new_idx = Cycler(indexing_examples(dn, reg), _rng(seed, n, tag, "new"))
    if method.kind == "cl_new":
        index_pools = [(new_idx, 1.0)]
    else:
        old_idx = Cycler(indexing_examples(old, reg), _rng(seed, n, tag, "old"))
        index_pools = [(old_idx, 0.5), (new_idx, 0.5)]

    retrieval_pools = None
    gt_used_per_step = 0
    if method.kind in ("cl_union_epsmem", "cl_union_genmem"):
        groups = _scope_groups(method.scope, n)
        pools = []
        for corp_ids in groups:
            if method.kind == "cl_union_epsmem":
                exs = [ex for i in corp_ids for ex in sources.episodic.store[i]]
            else:
                corp = Corpus([d for i in corp_ids for d in splits.corpora[i].documents], splits.vocab)
                exs = sources.pseudo_for(corp, cfg, seed)
            pools.append(retrieval_examples(exs, reg))
        if method.scope == "Un" and not cfg.replay_balance:
            pools = [[e for p in pools for e in p]]
        retrieval_pools = [(Cycler(p, _rng(seed, n, tag, "replay", i)), 1.0 / len(pools))
                           for i, p in enumerate(pools)]
    mixer = Mixer(index_pools, retrieval_pools, tc.batch_size, r)
    if method.kind == "cl_union_epsmem":
        gt_used_per_step = mixer.n_ret

    ev = Evaluator(model, cfg.beam_width)
    runlog = RunLog()

    def validate():
        per = [ev.correct(splits.corpora[o]) for o in range(n + 1)]
        bits = np.concatenate(per)
        logged = {f"indexing_accuracy/D{o}": float(b.mean()) for o, b in enumerate(per)}
        return float(bits.mean()), None, logged

    _train_loop(model, mixer, tc, n, runlog, validate)
    runlog.gt_queries[n] = gt_used_per_step * tc.steps
    state.phase = n
    return runlog


def _scope_groups(scope: str, n: int) -> list[list[int]]:
    if scope == "D0":
        return [[0]]
    if scope == "Dn":
        return [[n]]
    return [list(range(n)), [n]]


# ----------------------------------------------------------------------------
# sequences
# ----------------------------------------------------------------------------

@dataclass
class MethodResult:
    method: MethodSpec
    perf: dict[str, PerfMatrix]
    runlog: RunLog

    @property
    def updates(self) -> int:
        return self.runlog.total_updates


def evaluate_phase(model: IndexerModel, splits: SplitSet, n: int, perf: dict[str, PerfMatrix],
                   cfg: EngineConfig) -> None:
    ev = Evaluator(model, cfg.beam_width)
    for o in range(n + 1):
        m = ev.corpus_metrics(splits.corpora[o], splits.retrieval[o][cfg.eval_split].examples)
        for name in METRICS:
            perf[name].set(n, o, m[name])


def run_sequence(methods: Sequence[MethodSpec], splits: SplitSet, cfg: EngineConfig,
                 seed: int | None = None, n_phases: int | None = None,
                 checkpoint_dir: str | Path | None = None) -> dict[str, MethodResult]:
    """Run every method over phases 0..K and fill one PerfMatrix per metric."""
    seed = cfg.seed if seed is None else seed
    K = (splits.n_corpora - 1) if n_phases is None else n_phases
    if not methods:
        raise ValueError("no methods given")
    if K > splits.n_corpora - 1:
        raise ValueError(f"{K} phases requested, split set has {splits.n_corpora - 1} new corpora")
    need_gen = any(m.kind == "cl_union_genmem" for m in methods)
    base_model, base_log = train_initial(splits, cfg, seed)
    base_perf = {m: PerfMatrix(K + 1, m) for m in METRICS}
    evaluate_phase(base_model, splits, 0, base_perf, cfg)
    sources = build_replay_sources(splits, cfg, seed, need_gen)
    results: dict[str, MethodResult] = {}
    for method in methods:
        runlog = RunLog()
        runlog.extend(base_log)
        perf = {m: PerfMatrix(K + 1, m) for m in METRICS}
        for name in METRICS:
            perf[name].set(0, 0, base_perf[name].get(0, 0))
        if method.kind == "from_scratch":
            for n in range(1, K + 1):
                model = _scratch_model(splits, n, cfg, seed, runlog)
                evaluate_phase(model, splits, n, perf, cfg)
                _maybe_save(model, checkpoint_dir, method, n)
        else:
            state = ContinualState(base_model.copy())
            for n in range(1, K + 1):
                runlog.extend(continual_phase(state, method, splits, n, cfg, sources, seed))
                evaluate_phase(state.model, splits, n, perf, cfg)
                _maybe_save(state.model, checkpoint_dir, method, n)
        results[method.key] = MethodResult(method, perf, runlog)
        log.info("seed %d method %s done (%d updates)", seed, method.key, runlog.total_updates)
    return results


def _scratch_model(splits: SplitSet, n: int, cfg: EngineConfig, seed: int, runlog: RunLog) -> IndexerModel:
    un = splits.union(n)
    registry = new_registry(un, cfg, seed + n)
    model = build_model(cfg.model_config(cfg.vocab_size or len(splits.vocab), seed + n), registry)
    _fit_fresh(model, un, splits.retrieval[0], cfg.initial, cfg, seed + n, n, runlog)
    return model


def _maybe_save(model: IndexerModel, checkpoint_dir, method: MethodSpec, n: int) -> None:
    if checkpoint_dir is None:
        return
    d = Path(checkpoint_dir)
    d.mkdir(parents=True, exist_ok=True)
    model.save(d / f"{method.key.replace(':', '_')}_phase{n}.dsif")


def update_report(results: dict[str, MethodResult], cfg: EngineConfig, K: int) -> dict:
    """Update counts from the run logs plus the scratch-vs-continual ratio.

    The ratio compares the extra updates needed to absorb D1..DK: every
    from-scratch retrain versus the continual phase budgets. Totals that
    include the D0 training are reported alongside.
    """
    rows = {}
    for key, res in results.items():
        ups = res.runlog.updates
        rows[key] = {"initial": ups.get(0, 0),
                     "incremental": sum(v for p, v in ups.items() if p > 0),
                     "total": sum(ups.values())}
    out = {"methods": rows}
    scratch = [k for k, r in results.items() if r.method.kind == "from_scratch"]
    cont = [k for k, r in results.items() if r.method.kind != "from_scratch"]
    if scratch and cont:
        s, c = rows[scratch[0]], rows[cont[0]]
        out["ratio_incremental"] = s["incremental"] / c["incremental"] if c["incremental"] else float("inf")
        out["ratio_total"] = s["total"] / c["total"] if c["total"] else float("inf")
    else:
        s_inc = cfg.initial.steps * K
        c_inc = cfg.continual.steps * K
        out["ratio_incremental"] = s_inc / c_inc if c_inc else float("inf")
        out["ratio_total"] = (s_inc + cfg.initial.steps) / (c_inc + cfg.initial.steps)
        out["from_config"] = True
    return out
