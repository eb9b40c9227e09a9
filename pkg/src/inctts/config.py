"""Experiment configuration: a YAML tree mapped onto typed sections.

Unknown keys and ill-typed values are reported with the file line they
came from.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .distill import SIZE_CLASSES
from .errors import ConfigError
from .pipeline import Policy


@dataclass
class CorpusSection:
    path: str | None = None  # optional plain-text corpus; synthetic when absent
    vocab_size: int = 64
    sentence_count: int = 1000
    length_range: list[int] = field(default_factory=lambda: [4, 12])
    test_count: int = 100
    K_f: int = 4
    frame_dim: int = 16


@dataclass
class LMSection:
    emb: int = 64
    hidden: int = 128
    iters: int = 400
    lr: float = 1e-3
    batch: int = 64


@dataclass
class SamplerSection:
    max_len: int = 5
    temperature: float = 1.0
    greedy: bool = True
    seed: int | None = None  # sampler seed; the global seed when absent


@dataclass
class TeacherSection:
    emb: int = 64
    enc_hidden: int = 128
    ctx: int = 256
    tokens: int = 10
    dec_hidden: int = 256
    phase1_iters: int = 2000
    phase2_iters: int = 400
    lr: float = 1e-3
    batch: int = 32
    window_sizes: list[int] = field(default_factory=lambda: [1, 2, 3])
    hop: int = 1


@dataclass
class DistillSection:
    lam: float = 1.0
    size: str = "medium"
    iters: int = 2000
    lr: float = 1e-3
    batch: int = 64
    mode: str = "pseudo"


@dataclass
class PipelineSection:
    N: int = 2
    delta: int = 1
    max_frames: int = 24
    policy: str = "student"


@dataclass
class BenchSection:
    repetitions: int = 5
    sentences: int = 20
    lm_extra_layers: int = 4
    lm_width_multiplier: int = 8
    policies: list[str] = field(
        default_factory=lambda: ["independent", "unicontext", "teacher_lm", "student"]
    )


@dataclass
class EvalSection:
    policies: list[str] = field(
        default_factory=lambda: ["independent", "unicontext", "lookahead_full", "teacher_lm",
                                 "student"]
    )
    sentences: int = 100


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    lm: LMSection = field(default_factory=LMSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    distill: DistillSection = field(default_factory=DistillSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    bench: BenchSection = field(default_factory=BenchSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "ExperimentConfig":
        d = self.distill
        if not 0.0 <= d.lam <= 1.0:
            raise ConfigError(f"distill.lam must lie in [0, 1], got {d.lam}")
        if d.size not in SIZE_CLASSES:
            raise ConfigError(f"distill.size must be one of {sorted(SIZE_CLASSES)}, got {d.size!r}")
        if d.mode not in ("pseudo", "truth"):
            raise ConfigError(f"distill.mode must be pseudo or truth, got {d.mode!r}")
        lo_hi = self.corpus.length_range
        if len(lo_hi) != 2:
            raise ConfigError("corpus.length_range must be [min, max]")
        if self.corpus.test_count < 1 or self.corpus.test_count >= self.corpus.sentence_count:
            raise ConfigError("corpus.test_count must be >= 1 and below corpus.sentence_count")
        if self.corpus.path is not None and not Path(self.corpus.path).is_file():
            raise ConfigError(f"corpus.path {self.corpus.path!r} does not exist")
        if self.pipeline.N < 1 or self.pipeline.delta < 0:
            raise ConfigError("pipeline.N must be >= 1 and pipeline.delta >= 0")
        for name in [self.pipeline.policy, *self.bench.policies, *self.eval.policies]:
            Policy.parse(name)
        if self.sampler.max_len < 1:
            raise ConfigError("sampler.max_len must be >= 1")
        if not self.sampler.greedy and self.sampler.temperature <= 0:
            raise ConfigError("sampler.temperature must be > 0")
        if self.bench.repetitions < 1:
            raise ConfigError("bench.repetitions must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Digest of every setting that affects artifacts (the output path excluded)."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _line_map(node, prefix: str = "", out: dict | None = None) -> dict[str, int]:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[key] = k.start_mark.line + 1
            _line_map(v, key, out)
    return out


_SCALARS = {"int": int, "float": float, "str": str, "bool": bool}


def _coerce(value: Any, annotation: str, where: str):
    ann = annotation.replace(" ", "")
    if ann.endswith("|None"):
        if value is None:
            return None
        ann = ann[: -len("|None")]
    if ann.startswith("list["):
        inner = ann[5:-1]
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_coerce(v, inner, where) for v in value]
    kind = _SCALARS[ann]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if (kind is int and isinstance(value, bool)) or not isinstance(value, kind):
        raise ConfigError(f"{where}: expected {ann}, got {value!r}")
    return value


def _fill(cls, data: dict, prefix: str, lines: dict[str, int], source: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: section {prefix or '<root>'} must be a mapping")
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        where = f"{source}:{lines.get(path, '?')}: {path}"
        if key not in fields:
            raise ConfigError(f"{where}: unknown key")
        f = fields[key]
        ann = f.type if isinstance(f.type, str) else f.type.__name__
        sub = _SECTIONS.get(ann)
        kwargs[key] = _fill(sub, value, path, lines, source) if sub else _coerce(value, ann, where)
    return cls(**kwargs)


_SECTIONS = {
    c.__name__: c
    for c in (CorpusSection, LMSection, SamplerSection, TeacherSection, DistillSection,
              PipelineSection, BenchSection, EvalSection)
}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f"{mark.line + 1}" if mark else "?"
        raise ConfigError(f"{source}:{line}: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        return ExperimentConfig().validate()
    return _fill(ExperimentConfig, data, "", _line_map(node), source).validate()


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
