"""Shared fixtures: a tiny synthesised corpus and the full default pipeline run."""

import os
from pathlib import Path

import pytest

from sfevc.cli import load_corpus, main
from sfevc.config import load_config

TINY_INI = """\
[run]
seed = 3
dir = run

[corpus]
speakers = 2
sentences = 3
holdout = 1

[model]
width_scale = 0.0625
decoder_hidden = 8

[train]
epochs = 2
filter_epochs = 1

[eval]
tsne_iters = 300
"""


def write_config(directory: Path, text: str = TINY_INI, name: str = "exp.ini") -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text(text)
    return path


@pytest.fixture(scope="session")
def tiny_config_path(tmp_path_factory):
    path = write_config(tmp_path_factory.mktemp("tiny"))
    assert main(["--config", str(path), "synth"]) == 0
    assert main(["--config", str(path), "extract"]) == 0
    return path


@pytest.fixture(scope="session")
def tiny_cfg(tiny_config_path):
    return load_config(tiny_config_path)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_cfg):
    return load_corpus(tiny_cfg)


CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def report(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        CRITERIA[number] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])


def _done(path: Path) -> bool:
    return bool(os.environ.get("SFEVC_PIPELINE_DIR")) and path.exists()


@pytest.fixture(scope="session")
def default_config_path(tmp_path_factory):
    """Default configuration with its corpus synthesised and extracted.

    Set ``SFEVC_PIPELINE_DIR`` to keep the run in a fixed directory and
    reuse whatever stages already finished there.
    """
    reuse = os.environ.get("SFEVC_PIPELINE_DIR")
    base = Path(reuse) if reuse else tmp_path_factory.mktemp("default")
    path = base / "exp.ini"
    if not _done(base / "run" / "cache" / "stats"):
        write_config(base, "[run]\nseed = 0\ndir = run\n")
        assert main(["--config", str(path), "synth", "--force"]) == 0
        assert main(["--config", str(path), "extract"]) == 0
    return path


@pytest.fixture(scope="session")
def default_corpus(default_config_path):
    return load_corpus(load_config(default_config_path))


@pytest.fixture(scope="session")
def pipeline(default_config_path, default_corpus):
    """Default configuration trained, converted and evaluated through the command line."""
    cfg = load_config(default_config_path)
    arg = ["--config", str(default_config_path)]
    ckpt = cfg.path("checkpoints")
    for stage in ("joint", "arousal-up", "arousal-down", "valence-up", "valence-down"):
        if not _done(ckpt / f"{stage}.ckpt"):
            assert main(arg + ["train", "--stage", stage]) == 0
    corpus = default_corpus
    last = max(corpus.sentences.values()) + 1 - cfg.corpus.holdout
    held = [b.utt_id for b in corpus.bundles if b.emotion == "neutral" and corpus.sentences[b.utt_id] >= last]
    for target in ("happy", "sad", "angry"):
        if not _done(cfg.path("reports") / "converted" / f"{held[-1]}_to_{target}.feat"):
            srcs = [a for u in held for a in ("--source", u)]
            assert main(arg + ["convert", *srcs, "--target-emotion", target]) == 0
    if not _done(cfg.path("reports") / "eval" / "summary.json"):
        assert main(arg + ["eval"]) == 0
    return cfg
