"""Command-line front end: benchmark building, runs, reports and diagnostics."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .bench import FormatError, SplitSet, generate_synthetic, ingest_jsonl, manifest_hash, split_benchmark
from .config import ConfigError, ExperimentConfig, from_dict, load_config
from .engine import METRICS, indexing_examples, run_sequence, train_initial, update_report
from .memory import GeneratorConfig, QueryGenerator, sample_pseudo_queries, train_query_generator
from .metrics import (ForgettingLog, PerfMatrix, cl_summary, forgetting_events, read_perf_csv,
                      write_csv, write_histogram_csv, write_perf_csv, write_summary_csv)
from .model import IndexerModel
from .optim import sharpness_estimate

log = logging.getLogger("dsiforge")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

DEVIATION_NOTES = """\
# Deviation notes

- Optimizer: Adam (betas 0.9/0.999, eps 1e-8, linear warmup) stands in for Adafactor.
- Query-generator model selection uses validation token accuracy, then exact-match rate, instead of BLEU.
- Indexer: token embeddings, mean pooling and an MLP encoder replace a pre-trained encoder-decoder transformer.
- Step budgets, corpus sizes and evaluation cadence are scaled down to desk size.
- Update-count ratio: `ratio_incremental` counts the extra updates spent on D1..DK
  (every from-scratch retrain vs. the continual phases); `ratio_total` also
  includes the shared D0 training.
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ----------------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------------

def build_splits(cfg: ExperimentConfig, out_dir: Path) -> Path:
    """Load the configured split directory, or generate one under ``out_dir/splits``."""
    b = cfg.bench
    if b.split_dir:
        path = Path(b.split_dir)
        SplitSet.load(path)
        return path
    n_docs = max(b.n_docs, sum(b.sizes))
    corpus, rs = generate_synthetic(n_docs, b.n_topics, b.vocab_size, b.doc_len, b.queries_per_doc,
                                    b.noise, b.seed, salient_repeats=b.salient_repeats,
                                    zipf_exponent=b.zipf_exponent, paraphrase=b.paraphrase,
                                    query_words=b.query_words)
    splits = split_benchmark(corpus, rs, b.sizes, b.val_fraction, b.seed, b.test_fraction)
    path = out_dir / "splits"
    splits.save(path)
    return path


# ----------------------------------------------------------------------------
# run cells
# ----------------------------------------------------------------------------

def _safe(key: str) -> str:
    return key.replace(":", "_")


def _sequence_cell(cfg_dict: dict, splits_dir: str, out_dir: str, seed: int) -> dict:
    cfg = from_dict(cfg_dict)
    splits = SplitSet.load(splits_dir)
    K = splits.n_corpora - 1 if cfg.run.phases < 0 else cfg.run.phases
    seed_dir = Path(out_dir) / f"seed{seed}"
    ckpt = seed_dir / "checkpoints" if cfg.run.save_checkpoints else None
    results = run_sequence(cfg.methods(), splits, cfg.engine(seed), seed, K, ckpt)
    for key, res in results.items():
        d = seed_dir / _safe(key)
        d.mkdir(parents=True, exist_ok=True)
        write_perf_csv(d / "perf.csv", res.perf)
        write_summary_csv(d / "summary.csv", res.perf)
        res.runlog.write(d / "runlog.jsonl")
    updates = update_report(results, cfg.engine(seed), K)
    (seed_dir / "updates.json").write_text(json.dumps(updates, indent=2, sort_keys=True) + "\n")
    return {"seed": seed, "status": "ok"}


def _memorization_cell(cfg_dict: dict, splits_dir: str, out_dir: str, seed: int) -> dict:
    cfg = from_dict(cfg_dict)
    splits = SplitSet.load(splits_dir)
    seed_dir = Path(out_dir) / f"seed{seed}"
    for opt in cfg.run.optimizers:
        ecfg = cfg.engine(seed)
        ecfg.initial = replace(ecfg.initial, optimizer=opt)
        flog = ForgettingLog()
        _, runlog = train_initial(splits, ecfg, seed, forgetting=flog)
        stats = forgetting_events(flog)
        d = seed_dir / opt
        d.mkdir(parents=True, exist_ok=True)
        write_histogram_csv(d / "histogram.csv", stats)
        write_csv(d / "events.csv", ("doc", "events"),
                  [(ext, int(c)) for (ext, _), c in zip(splits.corpora[0].documents, stats.counts)])
        runlog.write(d / "runlog.jsonl")
    return {"seed": seed, "status": "ok"}


def _run_cell(kind: str, cfg_dict: dict, splits_dir: str, out_dir: str, seed: int) -> dict:
    fn = _sequence_cell if kind == "sequence" else _memorization_cell
    try:
        return fn(cfg_dict, splits_dir, out_dir, seed)
    except Exception as e:  # a failed cell must not discard the others
        logging.getLogger("dsiforge").exception("seed %d failed", seed)
        return {"seed": seed, "status": "failed", "error": f"{type(e).__name__}: {e}"}


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, jobs: int = 1) -> tuple[Path, bool]:
    """Run every seed cell and write the report bundle. Returns (run dir, all cells ok)."""
    out = Path(out_dir or cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg.seeds()
    snapshot = replace(cfg, run=replace(cfg.run, seeds=seeds, output_dir=str(out)))
    snapshot.save(out / "config.toml")
    (out / "NOTES.md").write_text(DEVIATION_NOTES)
    splits_dir = build_splits(cfg, out)
    cfg_dict = snapshot.to_dict()
    args = [(cfg.run.experiment, cfg_dict, str(splits_dir), str(out), s) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, *zip(*args)))
    else:
        cells = [_run_cell(*a) for a in args]
    manifest = {"format": "dsiforge-run/1", "experiment": cfg.run.experiment,
                "splits": str(splits_dir), "splits_hash": manifest_hash(splits_dir),
                "cells": sorted(cells, key=lambda c: c["seed"])}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    report(out)
    return out, all(c["status"] == "ok" for c in cells)


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------

def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def _fmt(mean: float | None, std: float | None) -> str:
    if mean is None:
        return "-"
    return f"{100 * mean:6.2f}±{100 * std:5.2f}"


def _load_manifest(run_dir: Path) -> tuple[dict, ExperimentConfig]:
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {run_dir}")
    manifest = json.loads(mpath.read_text())
    return manifest, load_config(run_dir / "config.toml")


def report(run_dir: str | Path) -> str:
    """Aggregate a run directory into CSVs plus a text summary (also written to report.txt)."""
    run_dir = Path(run_dir)
    manifest, cfg = _load_manifest(run_dir)
    ok = [c["seed"] for c in manifest["cells"] if c["status"] == "ok"]
    failed = [c for c in manifest["cells"] if c["status"] != "ok"]
    if manifest["experiment"] == "sequence":
        text = _report_sequence(run_dir, cfg, ok)
    else:
        text = _report_memorization(run_dir, cfg, ok)
    if failed:
        text += "\nFailed cells:\n" + "".join(f"  seed {c['seed']}: {c.get('error', '')}\n" for c in failed)
    (run_dir / "report.txt").write_text(text)
    return text


def _report_sequence(run_dir: Path, cfg: ExperimentConfig, seeds: list[int]) -> str:
    lines = ["Continual indexing report", f"seeds: {', '.join(map(str, seeds)) or 'none'}", ""]
    agg_rows = []
    for method in cfg.methods():
        per_seed: list[dict[str, PerfMatrix]] = []
        for s in seeds:
            p = run_dir / f"seed{s}" / _safe(method.key) / "perf.csv"
            if p.exists():
                per_seed.append(read_perf_csv(p))
        if not per_seed:
            continue
        lines.append(f"== {method.label} [{method.key}]")
        for metric in METRICS:
            mats = [m[metric] for m in per_seed if metric in m]
            n_phases = min(P.n_phases for P in mats)
            lines.append(f"  {metric}")
            lines.append(f"    {'phase':>5}  {'A':>12}  {'F':>12}  {'LA':>12}")
            for n in range(n_phases):
                mats_n = [P for P in mats if P.row_filled(n)]
                if not mats_n:
                    continue
                sums = [cl_summary(P, n) for P in mats_n]
                a = _mean_std([x.A for x in sums])
                f = _mean_std([x.F for x in sums]) if n else (None, None)
                la = _mean_std([x.LA for x in sums]) if n else (None, None)
                agg_rows.append((method.key, metric, n, len(sums), a[0], a[1], f[0], f[1], la[0], la[1]))
                lines.append(f"    {n:>5}  {_fmt(*a):>12}  {_fmt(*f):>12}  {_fmt(*la):>12}")
        lines.append("")
    write_csv(run_dir / "aggregate.csv",
              ("method", "metric", "phase", "n_seeds", "A_mean", "A_std", "F_mean", "F_std", "LA_mean", "LA_std"),
              agg_rows)
    if seeds:
        upd_path = run_dir / f"seed{seeds[0]}" / "updates.json"
        if upd_path.exists():
            upd = json.loads(upd_path.read_text())
            lines.append("Model updates (from run logs)")
            rows = []
            for key, u in sorted(upd["methods"].items()):
                lines.append(f"  {key:28s} initial {u['initial']:>7d}  incremental {u['incremental']:>7d}  total {u['total']:>7d}")
                rows.append((key, u["initial"], u["incremental"], u["total"]))
            write_csv(run_dir / "updates.csv", ("method", "initial", "incremental", "total"), rows)
            src = " (from config budgets; no from_scratch run)" if upd.get("from_config") else ""
            lines.append(f"  scratch/continual update ratio: {upd['ratio_incremental']:.2f} incremental, "
                         f"{upd['ratio_total']:.2f} including D0{src}")
    return "\n".join(lines) + "\n"


def _report_memorization(run_dir: Path, cfg: ExperimentConfig, seeds: list[int]) -> str:
    lines = ["Forgetting events during D0 memorization", f"seeds: {', '.join(map(str, seeds)) or 'none'}", ""]
    rows, hist_rows = [], []
    for opt in cfg.run.optimizers:
        zero, hists = [], []
        for s in seeds:
            p = run_dir / f"seed{s}" / opt / "histogram.csv"
            if p.exists():
                h = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)[:, 1]
                hists.append(h)
                zero.append(float(h[0]))
        if not hists:
            continue
        width = max(len(h) for h in hists)
        mean_hist = np.mean([np.pad(h, (0, width - len(h)), constant_values=1.0) for h in hists], axis=0)
        for j, v in enumerate(mean_hist):
            hist_rows.append((opt, j, float(v)))
        m, sd = _mean_std(zero)
        rows.append((opt, len(zero), m, sd))
        lines.append(f"  {opt:5s} zero-event fraction {_fmt(m, sd)}  (H[j] for j=0..{width - 1}: "
                     + " ".join(f"{v:.3f}" for v in mean_hist) + ")")
    write_csv(run_dir / "zero_events.csv", ("optimizer", "n_seeds", "zero_event_mean", "zero_event_std"), rows)
    write_csv(run_dir / "histogram_mean.csv", ("optimizer", "events_leq", "fraction"), hist_rows)
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------

def cmd_bench_build(a) -> int:
    out = Path(a.out)
    if a.synthetic:
        if a.queries:
            raise UsageError("--queries only applies to JSONL ingestion")
        sizes = _int_list(a.corpora) if a.corpora else [1000, 200, 200, 200, 200, 200]
        try:
            n_docs = int(a.docs) if a.docs else sum(sizes)
        except ValueError:
            raise UsageError("--docs must be a document count with --synthetic") from None
        corpus, rs = generate_synthetic(max(n_docs, sum(sizes)), a.topics, a.vocab, a.doc_len,
                                        a.queries_per_doc, a.noise, a.seed,
                                        salient_repeats=a.salient_repeats, zipf_exponent=a.zipf_exponent,
                                        paraphrase=a.paraphrase, query_words=a.query_words)
    else:
        if not a.docs or not a.queries:
            raise UsageError("JSONL ingestion needs both --docs and --queries (or use --synthetic)")
        corpus, rs = ingest_jsonl(a.docs, a.queries, a.vocab)
        sizes = _int_list(a.corpora) if a.corpora else [len(corpus)]
    splits = split_benchmark(corpus, rs, sizes, a.val_fraction, a.seed, a.test_fraction)
    digest = splits.save(out)
    print(f"wrote {splits.n_corpora} corpora to {out} (manifest {digest})")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def cmd_run(a) -> int:
    cfg = load_config(a.config)
    out, ok = run_experiment(cfg, a.out, a.jobs)
    print((out / "report.txt").read_text(), end="")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_report(a) -> int:
    print(report(a.run_dir), end="")
    return EXIT_OK


def cmd_train_initial(a) -> int:
    cfg = load_config(a.config)
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    splits_dir = build_splits(cfg, out.parent)
    splits = SplitSet.load(splits_dir)
    seed = cfg.seeds()[0]
    model, runlog = train_initial(splits, cfg.engine(seed), seed)
    model.save(out)
    runlog.write(out.with_suffix(".runlog.jsonl"))
    best = runlog.selected.get(0)
    print(f"saved {out} (selected step {best}, {runlog.total_updates} updates)")
    return EXIT_OK


def cmd_genmem_train(a) -> int:
    splits = SplitSet.load(a.splits)
    gcfg = GeneratorConfig(vocab_size=len(splits.vocab), steps=a.steps, seed=a.seed)
    gen = train_query_generator(splits.retrieval[0]["train"], splits.corpora[0], gcfg, splits.retrieval[0]["val"])
    gen.save(a.out)
    print(f"saved {a.out} (val token accuracy {gen.selection['token_accuracy']:.4f}, "
          f"exact match {gen.selection['exact_match']:.4f})")
    return EXIT_OK


def cmd_genmem_sample(a) -> int:
    splits = SplitSet.load(a.splits)
    gen = QueryGenerator.load(a.generator)
    if not 0 <= a.corpus < splits.n_corpora:
        raise UsageError(f"--corpus must be in 0..{splits.n_corpora - 1}")
    pq = sample_pseudo_queries(gen, splits.corpora[a.corpus], a.per_doc, a.beam_width, a.seed,
                               source="old" if a.corpus == 0 else "new")
    pq.save(a.out, splits.vocab)
    print(f"wrote {len(pq)} pseudo-queries to {a.out}")
    return EXIT_OK


def cmd_diag_sharpness(a) -> int:
    splits = SplitSet.load(a.splits)
    model = IndexerModel.load(a.model)
    d0 = splits.corpora[0]
    docs = d0.subset(d0.ids()[: a.batch_size])
    batch = indexing_examples(docs, model.registry)
    lam = sharpness_estimate(model.params, batch, model.batch_loss, a.iters, a.seed)
    print(f"lambda_max {lam:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dsiforge", description="Continual indexing experiments for differentiable search indices.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    bench = sub.add_parser("bench", help="benchmark construction")
    bsub = bench.add_subparsers(dest="bench_command", parser_class=_Parser, required=True)
    b = bsub.add_parser("build", help="write a split directory")
    b.add_argument("--synthetic", action="store_true")
    b.add_argument("--docs", help="document count (synthetic) or documents JSONL path")
    b.add_argument("--queries", help="queries JSONL path")
    b.add_argument("--corpora", help="comma-separated corpus sizes |D0|,|D1|,...")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="splits")
    b.add_argument("--topics", type=int, default=20)
    b.add_argument("--vocab", type=int, default=4096)
    b.add_argument("--doc-len", type=int, default=32)
    b.add_argument("--queries-per-doc", type=int, default=2)
    b.add_argument("--noise", type=float, default=0.2)
    b.add_argument("--salient-repeats", type=int, default=None)
    b.add_argument("--zipf-exponent", type=float, default=0.5)
    b.add_argument("--paraphrase", type=float, default=0.5)
    b.add_argument("--query-words", type=int, default=4)
    b.add_argument("--val-fraction", type=float, default=0.2)
    b.add_argument("--test-fraction", type=float, default=0.1)
    b.set_defaults(fn=cmd_bench_build)

    r = sub.add_parser("run", help="run an experiment config and write a report bundle")
    r.add_argument("config")
    r.add_argument("--out", help="run directory (default: run.output_dir)")
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(fn=cmd_run)

    rep = sub.add_parser("report", help="aggregate a run directory")
    rep.add_argument("run_dir")
    rep.set_defaults(fn=cmd_report)

    t = sub.add_parser("train-initial", help="train on D0/R0 and save a checkpoint")
    t.add_argument("config")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train_initial)

    g = sub.add_parser("genmem", help="query generator")
    gsub = g.add_subparsers(dest="genmem_command", parser_class=_Parser, required=True)
    gt = gsub.add_parser("train")
    gt.add_argument("--splits", required=True)
    gt.add_argument("--out", required=True)
    gt.add_argument("--steps", type=int, default=1500)
    gt.add_argument("--seed", type=int, default=0)
    gt.set_defaults(fn=cmd_genmem_train)
    gs = gsub.add_parser("sample")
    gs.add_argument("--generator", required=True)
    gs.add_argument("--splits", required=True)
    gs.add_argument("--corpus", type=int, default=1)
    gs.add_argument("--per-doc", type=int, default=1)
    gs.add_argument("--beam-width", type=int, default=4)
    gs.add_argument("--seed", type=int, default=0)
    gs.add_argument("--out", required=True)
    gs.set_defaults(fn=cmd_genmem_sample)

    d = sub.add_parser("diag", help="diagnostics")
    dsub = d.add_subparsers(dest="diag_command", parser_class=_Parser, required=True)
    ds = dsub.add_parser("sharpness", help="top Hessian eigenvalue of the indexing loss")
    ds.add_argument("--model", required=True)
    ds.add_argument("--splits", required=True)
    ds.add_argument("--iters", type=int, default=20)
    ds.add_argument("--batch-size", type=int, default=32)
    ds.add_argument("--seed", type=int, default=0)
    ds.set_defaults(fn=cmd_diag_sharpness)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as e:
        print(f"dsiforge: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return a.fn(a)
    except (UsageError, ConfigError) as e:
        print(f"dsiforge: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, FormatError) as e:
        print(f"dsiforge: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        print(f"dsiforge: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
