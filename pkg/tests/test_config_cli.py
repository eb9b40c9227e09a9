import hashlib
import json
from pathlib import Path

import pytest

from inctts.cli import main
from inctts.config import ExperimentConfig, dump_config, load_config, parse_config
from inctts.errors import ConfigError
from inctts.pipeline import read_frames

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.yaml"
CHAIN = ["gen-corpus", "train-lm", "train-teacher", "distill", "bench-latency", "bench-quality"]


def sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(*argv) -> int:
    return main([str(a) for a in argv])


def run_chain(out: Path, extra=()):
    for cmd in CHAIN:
        assert run(cmd, "--config", SMOKE, "--out", out, *extra) == 0, cmd
    assert run("distill", "--config", SMOKE, "--out", out, "--mode", "truth", *extra) == 0
    assert run("sim-curve", "--config", SMOKE, "--out", out, *extra) == 0


@pytest.fixture(scope="module")
def chain_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("chain")
    run_chain(out)
    return out


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_empty_config_gives_defaults():
    cfg = parse_config("")
    assert cfg == ExperimentConfig().validate()
    assert (cfg.pipeline.N, cfg.pipeline.delta, cfg.sampler.max_len) == (2, 1, 5)
    assert (cfg.distill.lr, cfg.distill.batch) == (1e-3, 64)


def test_dump_parse_roundtrip():
    cfg = load_config(SMOKE)
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config((ROOT / "configs" / "default.yaml").read_text()) == ExperimentConfig()


@pytest.mark.parametrize("text, line, needle", [
    ("seed: 1\nlm:\n  hidden: 4\n  depth: 2\n", 4, "lm.depth: unknown key"),
    ("seed: 1\n\ndistill:\n  iters: many\n", 4, "distill.iters: expected int"),
    ("bogus: 3\n", 1, "bogus: unknown key"),
    ("lm:\n  hidden: [1\n", 3, ""),
    ("teacher:\n  window_sizes: 3\n", 2, "expected a list"),
    ("sampler:\n  greedy: 1\n", 2, "expected bool"),
])
def test_config_errors_carry_line_numbers(text, line, needle):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "exp.yaml")
    assert f"exp.yaml:{line}" in str(exc.value)
    assert needle in str(exc.value)


@pytest.mark.parametrize("text", [
    "distill:\n  lam: 1.5\n",
    "distill:\n  size: huge\n",
    "distill:\n  mode: oracle\n",
    "pipeline:\n  policy: lookahead_0\n",
    "corpus:\n  path: /nonexistent/corpus.txt\n",
    "corpus:\n  test_count: 2000\n",
    "sampler:\n  temperature: 0\n  greedy: false\n",
    "lm: 3\n",
])
def test_invalid_values_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_int_accepted_for_float():
    assert parse_config("distill:\n  lam: 1\n").distill.lam == 1.0


def test_missing_config_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.yaml")


def test_config_hash():
    a, b = ExperimentConfig(), ExperimentConfig()
    assert a.hash() == b.hash()
    b.out = "elsewhere"
    assert a.hash() == b.hash()
    b.distill.lam = 0.5
    assert a.hash() != b.hash()


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def test_missing_artifacts_name_producer(tmp_path, capsys):
    assert run("train-lm", "--config", SMOKE, "--out", tmp_path) == 3
    assert "inctts gen-corpus" in capsys.readouterr().err
    assert run("gen-corpus", "--config", SMOKE, "--out", tmp_path) == 0
    assert run("distill", "--config", SMOKE, "--out", tmp_path) == 3
    assert "inctts train-teacher" in capsys.readouterr().err
    assert run("sim-curve", "--config", SMOKE, "--out", tmp_path) == 3


def test_flag_errors(tmp_path, capsys):
    assert run("show-config", "--seed", "-1") == 2
    assert run("show-config", "--lambda", "2") == 2
    assert run("show-config", "--policy", "psychic") == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 0\nlm:\n  widht: 3\n")
    assert run("show-config", "--config", bad) == 2
    assert f"{bad}:3" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        run("show-config", "--size", "tiny")


def test_flags_override_config(capsys):
    assert run("show-config", "--config", SMOKE, "--seed", "7", "--size", "large", "--lambda",
               "0.95", "--policy", "lookahead_2", "--temperature", "0.7", "--lookahead-len", "4",
               "--sampler-seed", "11", "--no-greedy") == 0
    cfg = parse_config(capsys.readouterr().out)
    assert cfg.seed == 7 and cfg.distill.size == "large" and cfg.distill.lam == 0.95
    assert cfg.pipeline.policy == "lookahead_2"
    assert (cfg.sampler.temperature, cfg.sampler.max_len, cfg.sampler.seed) == (0.7, 4, 11)
    assert not cfg.sampler.greedy


def test_chain_emits_all_reports(chain_dir):
    reports = {p.name for p in (chain_dir / "reports").iterdir()}
    for pol in ["independent", "unicontext", "teacher_lm", "student"]:
        assert f"report_latency_{pol}_0.csv" in reports
    for pol in ["independent", "unicontext", "lookahead_full", "teacher_lm", "student"]:
        assert f"report_quality_{pol}_0.csv" in reports
    assert {"report_similarity_pseudo_0.csv", "report_similarity_truth_0.csv",
            "summary_latency_0.json", "summary_quality_0.json",
            "summary_similarity_0.json"} <= reports


def test_manifests_record_hashes(chain_dir):
    m = json.loads((chain_dir / "manifest_train-teacher.json").read_text())
    assert m["seed"] == 0 and m["config_sha256"] == load_config(SMOKE).hash()
    assert m["inputs"]["lm.ck"] == sha(chain_dir / "lm.ck")
    assert m["outputs"]["teacher.ck"] == sha(chain_dir / "teacher.ck")
    d = json.loads((chain_dir / "manifest_distill_student_small_lam1_pseudo.json").read_text())
    assert d["inputs"]["teacher.ck"] == sha(chain_dir / "teacher.ck")


def test_distill_rerun_identical(chain_dir):
    path = chain_dir / "student_small_lam1_pseudo.ck"
    before = sha(path)
    teacher_before = sha(chain_dir / "teacher.ck")
    assert run("distill", "--config", SMOKE, "--out", chain_dir) == 0
    assert sha(path) == before
    assert sha(chain_dir / "teacher.ck") == teacher_before


def test_synth_student_writes_frames_and_timings(chain_dir):
    assert run("synth", "--config", SMOKE, "--out", chain_dir, "--policy", "student") == 0
    frames, delta, policy = read_frames(chain_dir / "synth" / "synth_student_frames.bin")
    assert (delta, policy) == (1, "student") and frames.shape[1] == 4
    lines = (chain_dir / "synth" / "synth_student_timings.csv").read_text().splitlines()
    assert lines[0] == "t,context_ms,decode_ms,cumulative_ms" and len(lines) > 1
    assert run("synth", "--config", SMOKE, "--out", chain_dir, "--policy", "lookahead_full",
               "--text", "w0 w1 w2") == 0


def test_independent_rerun_bit_identical(chain_dir, tmp_path):
    run_chain(tmp_path)
    skip = {"synth"}
    for p in sorted(chain_dir.rglob("*")):
        rel = p.relative_to(chain_dir)
        if p.is_dir() or rel.parts[0] in skip:
            continue
        if "latency" in p.name:
            continue
        assert sha(p) == sha(tmp_path / rel), rel
