"""Experiment configuration: sectioned TOML mapped onto dataclasses, unknown keys rejected."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .engine import EngineConfig, MethodSpec, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class BenchSection:
    split_dir: str = ""  # load an existing split directory instead of generating
    n_docs: int = 2000
    n_topics: int = 20
    vocab_size: int = 4096
    doc_len: int = 32
    queries_per_doc: int = 2
    noise: float = 0.2
    salient_repeats: int = 8
    zipf_exponent: float = 0.5
    paraphrase: float = 0.5  # query-side vocabulary shift
    query_words: int = 4
    sizes: list[int] = field(default_factory=lambda: [1000, 200, 200, 200, 200, 200])
    val_fraction: float = 0.2
    test_fraction: float = 0.1
    seed: int = 0


@dataclass
class ModelSection:
    d: int = 64
    h: int = 128
    depth: int = 1
    docid: str = "atomic"
    base: int = 10
    leaf_size: int = 10
    emb_scale: float = 0.1
    head_scale: float = 0.02


@dataclass
class GeneratorSection:
    kind: str = "learned"
    steps: int = 1500
    per_doc: int = 1
    beam_width: int = 4


@dataclass
class EvalSection:
    beam_width: int = 10
    split: str = "test"


@dataclass
class RunSection:
    experiment: str = "sequence"  # "sequence" | "memorization"
    methods: list[str] = field(default_factory=lambda: ["cl_new", "cl_union", "cl_union_genmem:Un"])
    optimizers: list[str] = field(default_factory=lambda: ["adam", "sam"])  # memorization only
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    phases: int = -1  # -1: every corpus in the split set
    replay_balance: bool = False
    output_dir: str = "runs/default"
    save_checkpoints: bool = False


SECTIONS = {"bench": BenchSection, "model": ModelSection, "initial": TrainConfig,
            "continual": TrainConfig, "generator": GeneratorSection, "eval": EvalSection,
            "run": RunSection}


@dataclass
class ExperimentConfig:
    bench: BenchSection = field(default_factory=BenchSection)
    model: ModelSection = field(default_factory=ModelSection)
    initial: TrainConfig = field(default_factory=TrainConfig)
    continual: TrainConfig = field(default_factory=lambda: TrainConfig(steps=800, warmup=50))
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self) -> "ExperimentConfig":
        if self.run.experiment not in ("sequence", "memorization"):
            raise ConfigError(f"run.experiment must be 'sequence' or 'memorization', got {self.run.experiment!r}")
        if self.run.experiment == "sequence":
            if not self.run.methods:
                raise ConfigError("run.methods is empty")
            try:
                self.methods()
            except ValueError as e:
                raise ConfigError(str(e)) from None
        else:
            if not self.run.optimizers or any(o not in ("adam", "sam") for o in self.run.optimizers):
                raise ConfigError("run.optimizers must list 'adam' and/or 'sam'")
        if not self.run.seeds:
            raise ConfigError("run.seeds is empty")
        if self.model.docid not in ("atomic", "naive", "semantic"):
            raise ConfigError(f"model.docid must be atomic, naive or semantic, got {self.model.docid!r}")
        if self.generator.kind not in ("learned", "lexical"):
            raise ConfigError(f"generator.kind must be learned or lexical, got {self.generator.kind!r}")
        if self.eval.split not in ("val", "test"):
            raise ConfigError("eval.split must be val or test")
        if not self.bench.split_dir and len(self.bench.sizes) < 1:
            raise ConfigError("bench.sizes is empty")
        return self

    def methods(self) -> list[MethodSpec]:
        specs = [MethodSpec.parse(m) for m in self.run.methods]
        keys = [m.key for m in specs]
        if len(set(keys)) != len(keys):
            raise ConfigError("duplicate entries in run.methods")
        return specs

    def seeds(self) -> list[int]:
        env = os.environ.get("DSIFORGE_SEED")
        if env is not None and env.strip():
            try:
                return [int(env)]
            except ValueError:
                raise ConfigError(f"DSIFORGE_SEED must be an integer, got {env!r}") from None
        return list(self.run.seeds)

    def engine(self, seed: int | None = None) -> EngineConfig:
        m = self.model
        return EngineConfig(d=m.d, h=m.h, depth=m.depth, docid=m.docid, base=m.base,
                            leaf_size=m.leaf_size, emb_scale=m.emb_scale, head_scale=m.head_scale,
                            initial=self.initial, continual=self.continual,
                            generator_steps=self.generator.steps, generator_kind=self.generator.kind,
                            pseudo_per_doc=self.generator.per_doc, pseudo_beam=self.generator.beam_width,
                            replay_balance=self.run.replay_balance, beam_width=self.eval.beam_width,
                            eval_split=self.eval.split, seed=self.seeds()[0] if seed is None else seed)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = asdict(getattr(self, name))
            out[name] = {k: v for k, v in sec.items() if v is not None}
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def _section(cls, data: dict, name: str, base=None):
    if not isinstance(data, dict):
        raise ConfigError(f"[{name}] must be a table")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    merged = asdict(base) if base is not None else {}
    merged.update(data)
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}]: {e}") from None


def from_dict(data: dict) -> ExperimentConfig:
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    default = ExperimentConfig()
    kwargs = {name: _section(cls, data.get(name, {}), name, getattr(default, name))
              for name, cls in SECTIONS.items()}
    return ExperimentConfig(**kwargs).validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return from_dict(data)
