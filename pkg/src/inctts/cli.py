"""Command-line entry point.

Every subcommand reads the experiment config, works inside the output
directory and leaves a manifest next to what it wrote. Reruns with the same
config and seed reproduce the same bytes (latency timings aside).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, dump_config, load_config
from .corpus import (
    Corpus,
    Sentence,
    generate_corpus,
    read_corpus,
    read_vocab,
    write_corpus,
    write_vocab,
)
from .distill import (
    DistillConfig,
    student_from_store,
    student_store,
    train_student,
)
from .errors import ConfigError, InctTSError, MissingArtifactError
from .evalbench import latency_benchmark, quality_report, similarity_curve
from .lm import CostInflatedLM, LanguageModel, LMTrainConfig, SamplerConfig, train_lm
from .nn_core import checkpoint
from .pipeline import (
    Models,
    PipelineConfig,
    Policy,
    incremental_synthesize,
    write_frames,
    write_timings,
)
from .seeding import stage_seed
from .tts import TeacherDims, TeacherModel, TeacherTrainConfig, train_teacher

log = logging.getLogger("inctts")


# ---------------------------------------------------------------------------
# Artifact layout
# ---------------------------------------------------------------------------


class Artifacts:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)

    @property
    def corpus_dir(self) -> Path:
        return self.root / "corpus"

    @property
    def train_txt(self) -> Path:
        return self.corpus_dir / "train.txt"

    @property
    def test_txt(self) -> Path:
        return self.corpus_dir / "test.txt"

    @property
    def vocab_txt(self) -> Path:
        return self.corpus_dir / "vocab.txt"

    @property
    def lm(self) -> Path:
        return self.root / "lm.ck"

    @property
    def teacher(self) -> Path:
        return self.root / "teacher.ck"

    def student_tag(self, mode: str | None = None) -> str:
        d = self.cfg.distill
        return f"student_{d.size}_lam{d.lam:g}_{mode or d.mode}"

    def student(self, mode: str | None = None) -> Path:
        return self.root / f"{self.student_tag(mode)}.ck"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def report(self, kind: str, name: str) -> Path:
        return self.reports / f"report_{kind}_{name}_{self.cfg.seed}.csv"

    def summary(self, kind: str) -> Path:
        return self.reports / f"summary_{kind}_{self.cfg.seed}.json"


def _require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise MissingArtifactError(path, producer)
    return path


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(art: Artifacts, name: str, inputs, outputs, extra: dict | None = None) -> Path:
    """Record what produced ``outputs``: config digest, seed, input/output hashes."""
    cfg = art.cfg
    body = {
        "command": name,
        "version": __version__,
        "seed": cfg.seed,
        "config_sha256": cfg.hash(),
        "config": cfg.to_dict() | {"out": None},
        "inputs": {p.relative_to(art.root).as_posix(): _sha(p) for p in inputs},
        "outputs": {p.relative_to(art.root).as_posix(): _sha(p) for p in outputs},
    }
    if extra:
        body["extra"] = extra
    path = art.root / f"manifest_{name}.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def load_corpus(art: Artifacts) -> tuple[Corpus, Corpus]:
    for p in (art.train_txt, art.test_txt, art.vocab_txt):
        _require(p, "gen-corpus")
    vocab = read_vocab(art.vocab_txt)
    return read_corpus(art.train_txt, vocab), read_corpus(art.test_txt, vocab)


def load_lm(art: Artifacts) -> LanguageModel:
    store, meta = checkpoint.load(_require(art.lm, "train-lm"))
    return LanguageModel.from_store(store, meta)


def load_teacher(art: Artifacts) -> TeacherModel:
    store, meta = checkpoint.load(_require(art.teacher, "train-teacher"))
    return TeacherModel.from_store(store, meta)


def load_student(art: Artifacts, mode: str | None = None):
    mode = mode or art.cfg.distill.mode
    path = art.student(mode)
    if not path.is_file():
        raise MissingArtifactError(path, f"distill --mode {mode}")
    store, meta = checkpoint.load(path)
    return student_from_store(store, meta)


def sampler_config(cfg: ExperimentConfig, stage: str) -> SamplerConfig:
    s = cfg.sampler
    base = cfg.seed if s.seed is None else s.seed
    return SamplerConfig(s.max_len, s.temperature, stage_seed(base, stage) % 2**31, s.greedy)


def pipeline_config(cfg: ExperimentConfig, policy: str | Policy | None = None) -> PipelineConfig:
    p = cfg.pipeline
    return PipelineConfig(p.N, p.delta, policy or p.policy, p.max_frames)


def build_models(art: Artifacts, policies, stage: str, lm_override=None) -> Models:
    names = {Policy.parse(p).name if isinstance(p, str) else p.name for p in policies}
    teacher = load_teacher(art)
    lm = lm_override or (load_lm(art) if "teacher_lm" in names else None)
    student = table = None
    if "student" in names:
        student, table = load_student(art, "pseudo")
    return Models(teacher, lm, student, table, sampler_config(art.cfg, stage))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(art: Artifacts) -> None:
    cfg = art.cfg
    c = cfg.corpus
    inputs = []
    if c.path:
        corpus = read_corpus(c.path, vocab_size=c.vocab_size)
        inputs.append(Path(c.path))
    else:
        corpus = generate_corpus(stage_seed(cfg.seed, "corpus") % 2**31, c.vocab_size,
                                 c.sentence_count, tuple(c.length_range))
    train, test = corpus.split(c.test_count)
    art.corpus_dir.mkdir(parents=True, exist_ok=True)
    write_corpus(art.train_txt, train)
    write_corpus(art.test_txt, test)
    write_vocab(art.vocab_txt, corpus.vocab)
    outs = [art.train_txt, art.test_txt, art.vocab_txt]
    write_manifest(art, "gen-corpus", [], outs,
                   {"sentences": len(corpus.sentences), "vocab": len(corpus.vocab),
                    "source": "text" if inputs else "synthetic"})
    print(f"wrote {len(train.sentences)} training and {len(test.sentences)} test sentences "
          f"to {art.corpus_dir}")


def cmd_train_lm(art: Artifacts) -> None:
    cfg = art.cfg
    train, _ = load_corpus(art)
    L = cfg.lm
    res = train_lm(train.sentences, len(train.vocab),
                   LMTrainConfig(L.emb, L.hidden, L.iters, L.lr, L.batch,
                                 stage_seed(cfg.seed, "lm") % 2**31))
    checkpoint.save(art.lm, res.model.store, res.model.config)
    losses = art.root / "lm_losses.csv"
    _write_csv(losses, ["iteration", "loss"], [(i, _fmt(x)) for i, x in enumerate(res.losses)])
    write_manifest(art, "train-lm", [art.train_txt, art.vocab_txt], [art.lm, losses])
    print(f"language model saved to {art.lm} (final loss {res.losses[-1]:.4f})")


def cmd_train_teacher(art: Artifacts) -> None:
    cfg = art.cfg
    train, _ = load_corpus(art)
    t = cfg.teacher
    lm = load_lm(art) if t.phase2_iters else None
    dims = TeacherDims(len(train.vocab), t.emb, t.enc_hidden, t.ctx, t.tokens, t.dec_hidden,
                       cfg.corpus.frame_dim)
    tcfg = TeacherTrainConfig(t.phase1_iters, t.phase2_iters, t.lr, t.batch,
                              tuple(t.window_sizes), t.hop,
                              stage_seed(cfg.seed, "teacher") % 2**31, cfg.corpus.K_f,
                              stage_seed(cfg.seed, "oracle") % 2**31)
    res = train_teacher(train.sentences, dims, tcfg, lm, sampler_config(cfg, "teacher"))
    checkpoint.save(art.teacher, res.model.store, {"dims": asdict(dims)})
    losses = art.root / "teacher_losses.csv"
    _write_csv(losses, ["iteration", "phase", "loss"],
               [(i, 1 if i < res.phase1_len else 2, _fmt(x)) for i, x in enumerate(res.losses)])
    inputs = [art.train_txt, art.vocab_txt] + ([art.lm] if lm is not None else [])
    write_manifest(art, "train-teacher", inputs, [art.teacher, losses])
    print(f"teacher saved to {art.teacher} (final loss {res.losses[-1]:.5f})")


def cmd_distill(art: Artifacts) -> None:
    cfg = art.cfg
    d = cfg.distill
    train, _ = load_corpus(art)
    teacher = load_teacher(art)
    lm = load_lm(art) if d.mode == "pseudo" else None
    dcfg = DistillConfig(d.lam, d.size, d.iters, d.lr, d.batch,
                         stage_seed(cfg.seed, "distill") % 2**31, cfg.pipeline.N,
                         cfg.corpus.K_f, stage_seed(cfg.seed, "oracle") % 2**31,
                         stage_seed(cfg.seed, "distill", 1) % 2**31)
    res = train_student(teacher, lm, train.sentences, dcfg, sampler_config(cfg, "distill"), d.mode)
    if not res.frozen_ok:
        raise InctTSError("teacher parameters changed during distillation")
    path = art.student()
    meta = {"size": d.size, "lambda": d.lam, "mode": d.mode, "input_dim": res.student.input_dim,
            "out_dim": res.student.out_dim}
    checkpoint.save(path, student_store(res.student, res.table), meta)
    progress = art.root / f"{art.student_tag()}_progress.csv"
    _write_csv(progress, ["iteration", "l_distil", "l_target", "combined"],
               [(i, _fmt(a), _fmt(b), _fmt(c)) for i, a, b, c in res.progress])
    inputs = [art.train_txt, art.vocab_txt, art.teacher] + ([art.lm] if lm else [])
    write_manifest(art, f"distill_{art.student_tag()}", inputs, [path, progress],
                   {"teacher_frozen": True})
    print(f"student saved to {path}")


def _demo_sentence(art: Artifacts, text: str | None) -> Sentence:
    _, test = load_corpus(art)
    if text is None:
        return test.sentences[0]
    ids = test.vocab.encode(text.lower().split())
    if not ids:
        raise ConfigError("--text is empty")
    return Sentence.from_words(ids)


def cmd_synth(art: Artifacts, text: str | None) -> None:
    cfg = art.cfg
    pcfg = pipeline_config(cfg)
    s = _demo_sentence(art, text)
    models = build_models(art, [pcfg.policy], "synth")
    res = incremental_synthesize(s, pcfg, models)
    out = art.root / "synth"
    out.mkdir(parents=True, exist_ok=True)
    frames = out / f"synth_{pcfg.policy}_frames.bin"
    timings = out / f"synth_{pcfg.policy}_timings.csv"
    write_frames(frames, res.frames, pcfg.delta, str(pcfg.policy))
    write_timings(timings, res.timings)
    runaway = sum(res.runaway)
    if runaway:
        log.warning("%d segment(s) hit max_frames without a stop flag", runaway)
    print(f"{res.frames.shape[0]} frames -> {frames}; timings -> {timings}")


def cmd_bench_latency(art: Artifacts) -> None:
    cfg = art.cfg
    b = cfg.bench
    _, test = load_corpus(art)
    sentences = test.sentences[: b.sentences]
    lm = None
    if any(Policy.parse(p).name == "teacher_lm" for p in b.policies):
        lm = CostInflatedLM(load_lm(art), b.lm_extra_layers, b.lm_width_multiplier,
                            stage_seed(cfg.seed, "bench") % 2**31)
    models = build_models(art, b.policies, "bench", lm_override=lm)
    traces, warnings = latency_benchmark(b.policies, sentences, models, pipeline_config(cfg),
                                         b.repetitions, seed=stage_seed(cfg.seed, "bench") % 2**31)
    art.reports.mkdir(parents=True, exist_ok=True)
    outs = []
    for name, tr in traces.items():
        path = art.report("latency", name)
        _write_csv(path, ["t", "words", "context_s", "decode_s", "cumulative_s"],
                   [(t, _fmt(w), _fmt(c), _fmt(d), _fmt(x)) for t, w, c, d, x in
                    zip(tr.steps, tr.words, tr.context_s, tr.decode_s, tr.cumulative_s)])
        outs.append(path)
    summary = {
        name: {"total_s": tr.total_s, "wpm": tr.wpm, "run_totals_s": tr.run_totals,
               "final_cumulative_s": tr.cumulative_s[-1]}
        for name, tr in traces.items()
    }
    summary_path = art.summary("latency")
    summary_path.write_text(json.dumps({"policies": summary, "warnings": warnings,
                                        "lm_extra_layers": b.lm_extra_layers,
                                        "lm_width_multiplier": b.lm_width_multiplier},
                                       indent=2, sort_keys=True) + "\n")
    outs.append(summary_path)
    inputs = [art.test_txt, art.teacher] + [p for p in (art.lm, art.student("pseudo")) if p.is_file()]
    write_manifest(art, "bench-latency", inputs, outs, {"timings_nondeterministic": True})
    for name, tr in traces.items():
        print(f"{name:>16}: {tr.total_s * 1e3:9.2f} ms/sentence  {tr.wpm:10.1f} wpm")


def cmd_bench_quality(art: Artifacts) -> None:
    cfg = art.cfg
    e = cfg.eval
    _, test = load_corpus(art)
    sentences = test.sentences[: e.sentences]
    models = build_models(art, e.policies, "eval")
    res = quality_report(e.policies, sentences, models, pipeline_config(cfg), cfg.corpus.K_f,
                         stage_seed(cfg.seed, "oracle") % 2**31,
                         seed=stage_seed(cfg.seed, "eval") % 2**31)
    art.reports.mkdir(parents=True, exist_ok=True)
    outs = []
    for name, q in res.items():
        path = art.report("quality", name)
        _write_csv(path, ["sentence", "mse"], [(i, _fmt(m)) for i, m in enumerate(q.sentence_mse)])
        outs.append(path)
    summary_path = art.summary("quality")
    summary_path.write_text(json.dumps(
        {name: {"mse": q.mse, "stop_accuracy": q.stop_accuracy, "runaway_segments": q.runaway}
         for name, q in res.items()}, indent=2, sort_keys=True) + "\n")
    outs.append(summary_path)
    inputs = [art.test_txt, art.teacher] + [p for p in (art.lm, art.student("pseudo")) if p.is_file()]
    write_manifest(art, "bench-quality", inputs, outs)
    for name, q in res.items():
        print(f"{name:>16}: mse {q.mse:.5f}  stop accuracy {q.stop_accuracy:.3f}")


def cmd_sim_curve(art: Artifacts) -> None:
    cfg = art.cfg
    _, test = load_corpus(art)
    teacher = load_teacher(art)
    lm = load_lm(art)
    sampler = sampler_config(cfg, "eval")
    outs, summary = [], {}
    for mode in ("pseudo", "truth"):
        student, table = load_student(art, mode)
        curve = similarity_curve(student, table, teacher, lm, test.sentences, mode,
                                 cfg.pipeline.N, sampler, seed=stage_seed(cfg.seed, "eval", 7))
        path = art.report("similarity", mode)
        _write_csv(path, ["t", "mean", "std", "count"],
                   [(r["t"], _fmt(r["mean"]), _fmt(r["std"]), r["count"]) for r in curve.as_rows()])
        outs.append(path)
        summary[mode] = curve.as_rows()
    summary_path = art.summary("similarity")
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    outs.append(summary_path)
    inputs = [art.test_txt, art.teacher, art.lm, art.student("pseudo"), art.student("truth")]
    write_manifest(art, "sim-curve", inputs, outs)
    for mode in ("pseudo", "truth"):
        print(f"{mode:>6}: " + " ".join(f"t={r['t']}:{r['mean']:.3f}" for r in summary[mode]))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

COMMANDS = ("gen-corpus", "train-lm", "train-teacher", "distill", "synth", "bench-latency",
            "bench-quality", "sim-curve", "show-config")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="inctts", description="Incremental TTS experiments")
    ap.add_argument("--version", action="version", version=f"inctts {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--policy", help="synthesis policy, e.g. student or lookahead_2")
        p.add_argument("--size", choices=["small", "medium", "large"], help="student size class")
        p.add_argument("--lambda", dest="lam", type=float, help="distillation loss weight")
        p.add_argument("--mode", choices=["pseudo", "truth"], help="distillation targets")
        p.add_argument("--temperature", type=float, help="LM sampling temperature")
        p.add_argument("--lookahead-len", dest="max_len", type=int,
                       help="pseudo-lookahead length L in words")
        p.add_argument("--sampler-seed", type=int, help="LM sampler seed")
        p.add_argument("--greedy", action=argparse.BooleanOptionalAction, default=None,
                       help="argmax LM decoding (--no-greedy samples with --temperature)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "synth":
            p.add_argument("--text", help="sentence to synthesize (default: first test sentence)")
    return ap


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.policy is not None:
        cfg.pipeline.policy = args.policy
    if args.size is not None:
        cfg.distill.size = args.size
    if args.lam is not None:
        cfg.distill.lam = args.lam
    if args.mode is not None:
        cfg.distill.mode = args.mode
    if args.temperature is not None:
        cfg.sampler.temperature = args.temperature
    if args.max_len is not None:
        cfg.sampler.max_len = args.max_len
    if args.sampler_seed is not None:
        cfg.sampler.seed = args.sampler_seed
    if args.greedy is not None:
        cfg.sampler.greedy = args.greedy
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            sys.stdout.write(dump_config(cfg))
            return 0
        art = Artifacts(cfg)
        art.root.mkdir(parents=True, exist_ok=True)
        handler = {
            "gen-corpus": cmd_gen_corpus,
            "train-lm": cmd_train_lm,
            "train-teacher": cmd_train_teacher,
            "distill": cmd_distill,
            "bench-latency": cmd_bench_latency,
            "bench-quality": cmd_bench_quality,
            "sim-curve": cmd_sim_curve,
        }
        if args.command == "synth":
            cmd_synth(art, args.text)
        else:
            handler[args.command](art)
        return 0
    except InctTSError as exc:
        print(f"inctts {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
