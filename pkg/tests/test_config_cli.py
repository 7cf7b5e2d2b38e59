"""Config loading and the command-line verbs on a tiny corpus."""

import csv
import json
import shutil

import numpy as np
import pytest

from conftest import TINY_INI, write_config
from sfevc import signal as sig
from sfevc.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, load_corpus, main
from sfevc.config import default_config, load_config, parse_config
from sfevc.evaluation import REPORT_COLUMNS, read_report
from sfevc.training import ConfigError, qualifying_pairs

STAGES = ("joint", "arousal-up", "arousal-down", "valence-up", "valence-down")


def run(path, *args):
    return main(["--config", str(path), *args])


def copy_run(src_path, dst_dir):
    shutil.copytree(src_path.parent, dst_dir)
    return dst_dir / src_path.name


def train_all(path):
    for stage in STAGES:
        assert run(path, "train", "--stage", stage) == EXIT_OK


def held_neutral(cfg):
    corpus = load_corpus(cfg)
    last = max(corpus.sentences.values()) + 1 - cfg.corpus.holdout
    return [b.utt_id for b in corpus.bundles if b.emotion == "neutral" and corpus.sentences[b.utt_id] >= last]


@pytest.fixture(scope="module")
def trained(tiny_config_path, tmp_path_factory):
    """The tiny corpus trained through every stage and converted to happy."""
    path = copy_run(tiny_config_path, tmp_path_factory.mktemp("cli") / "exp")
    train_all(path)
    cfg = load_config(path)
    srcs = [a for u in held_neutral(cfg) for a in ("--source", u)]
    assert run(path, "convert", *srcs, "--target-emotion", "happy") == EXIT_OK
    return path


# -------------------------------------------------------------------- config


def test_config_round_trip():
    cfg = parse_config(TINY_INI)
    again = parse_config(cfg.to_ini())
    assert again == cfg and again.to_ini() == cfg.to_ini()
    d = default_config()
    assert parse_config(d.to_ini()) == d


@pytest.mark.parametrize(
    "text, field",
    [
        ("[train]\nlearning_rate = 1\n", "train.learning_rate"),
        ("[bogus]\nx = 1\n", "bogus"),
        ("[corpus]\nspeakers = 0\n", "speakers"),
        ("[train]\nepochs = many\n", "train.epochs"),
        ("[features]\nf0_min = 10\n", "features.f0_min"),
        ("[tables]\nrhythm = 1, 2, 3\n", "tables.rhythm"),
        ("[va_table]\nneutral = 0, 0\nhappy = 2, 0\n", "happy"),
    ],
)
def test_bad_config_rejected(text, field):
    with pytest.raises(ConfigError, match=field):
        parse_config(text)


def test_lambda_defaults_echo():
    cfg = default_config()
    assert (cfg.train.lambda1, cfg.train.lambda2) == (1.0, 1.0)
    assert "lambda1 = 1.0" in cfg.to_ini() and "lambda2 = 1.0" in cfg.to_ini()
    assert parse_config("[train]\nlambda2 = 0.5\n").train_config().lambda2 == 0.5


# ------------------------------------------------------------------ commands


def test_usage_errors(tmp_path, capsys):
    path = write_config(tmp_path)
    with pytest.raises(SystemExit) as e:
        main(["--config", str(path), "train", "--stage", "pitch-up"])
    assert e.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == EXIT_USAGE
    assert run(tmp_path / "absent.ini", "synth") == EXIT_USAGE


def test_invalid_grid_names_field(tmp_path, capsys):
    path = write_config(tmp_path, TINY_INI.replace("speakers = 2", "speakers = 0"))
    assert run(path, "synth") == EXIT_USAGE
    assert "speakers" in capsys.readouterr().err


def test_synth_reports_grid_refuses_and_regenerates(tiny_config_path, tmp_path, capsys):
    path = copy_run(tiny_config_path, tmp_path / "exp")
    corpus = load_config(path).path("corpus")
    before = {p.relative_to(corpus): p.read_bytes() for p in sorted(corpus.rglob("*")) if p.is_file()}
    capsys.readouterr()
    assert run(path, "synth") == EXIT_USAGE
    assert "--force" in capsys.readouterr().err
    assert run(path, "synth", "--force") == EXIT_OK
    out = capsys.readouterr().out
    assert "manifest.jsonl" in out and "= 24 files" in out
    assert {p.relative_to(corpus): p.read_bytes() for p in sorted(corpus.rglob("*")) if p.is_file()} == before


def test_default_config_grid_echo():
    cc = default_config().corpus_config()
    assert (cc.speakers, len(cc.emotions), cc.sentences) == (4, 4, 12)


def test_extract_writes_cache_and_is_deterministic(tiny_config_path, tmp_path):
    cfg = load_config(tiny_config_path)
    cache = cfg.path("cache")
    feats = sorted(cache.glob("*.feat"))
    assert len(feats) == 24
    assert sorted(p.stem for p in (cache / "stats").glob("*.json")) == load_corpus(cfg).speakers
    path = copy_run(tiny_config_path, tmp_path / "exp")
    assert run(path, "extract") == EXIT_OK
    again = load_config(path).path("cache")
    for f in feats:
        assert (again / f.name).read_bytes() == f.read_bytes()


def test_corrupt_wav_is_a_data_error(tiny_config_path, tmp_path, capsys):
    path = copy_run(tiny_config_path, tmp_path / "exp")
    wav = sorted(load_config(path).path("corpus").rglob("*.wav"))[0]
    wav.write_bytes(b"RIFF\x00\x00\x00\x00garbage")
    assert run(path, "extract") == EXIT_DATA
    assert wav.name in capsys.readouterr().err


def test_missing_wav_listed(tiny_config_path, tmp_path, capsys):
    path = copy_run(tiny_config_path, tmp_path / "exp")
    wav = sorted(load_config(path).path("corpus").rglob("*.wav"))[-1]
    wav.unlink()
    assert run(path, "extract") == EXIT_DATA
    assert wav.name in capsys.readouterr().err


def test_direction_stage_needs_joint(tiny_config_path, tmp_path, capsys):
    path = copy_run(tiny_config_path, tmp_path / "exp")
    assert run(path, "train", "--stage", "arousal-up") == EXIT_USAGE
    assert "joint" in capsys.readouterr().err


def test_train_outputs(trained):
    cfg = load_config(trained)
    with open(cfg.path("reports") / "metrics_joint.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == cfg.train.epochs
    for stage in STAGES[1:]:
        meta = json.loads((cfg.path("checkpoints") / f"{stage}.json").read_text())
        axis, sign = stage.split("-")
        want = qualifying_pairs(cfg.va_table, axis, sign, cfg.va.off_axis_max, cfg.va.on_axis_min, cfg.corpus.emotions)
        assert [tuple(p) for p in meta["pairs"]] == want and want


def test_convert_records_schedule(trained):
    cfg = load_config(trained)
    out = cfg.path("reports") / "converted"
    metas = [json.loads(p.read_text()) for p in sorted(out.glob("*.json"))]
    assert metas and all(m["schedule"] == ["A↑", "V↑"] for m in metas)
    for m in metas:
        b = sig.read_features(out / m["features"])
        assert b.emotion == "happy" and b.mel.shape[1] == cfg.features.n_mels


def test_convert_identity_and_errors(trained, capsys):
    cfg = load_config(trained)
    src = held_neutral(cfg)[0]
    assert run(trained, "convert", "--source", src, "--target-emotion", "neutral") == EXIT_OK
    meta = json.loads((cfg.path("reports") / "converted" / f"{src}_to_neutral.json").read_text())
    assert meta["schedule"] == []
    assert run(trained, "convert", "--source", src, "--target-emotion", "bored") == EXIT_USAGE
    assert "bored" in capsys.readouterr().err
    assert run(trained, "convert", "--source", "nope", "--target-emotion", "happy") == EXIT_DATA


def test_convert_names_missing_direction(trained, tmp_path, capsys):
    path = copy_run(trained, tmp_path / "exp")
    (load_config(path).path("checkpoints") / "valence-up.ckpt").unlink()
    src = held_neutral(load_config(path))[0]
    assert run(path, "convert", "--source", src, "--target-emotion", "happy") == EXIT_USAGE
    assert "V↑" in capsys.readouterr().err


def test_eval_outputs(trained, tmp_path):
    cfg = load_config(trained)
    held = held_neutral(cfg)
    assert run(trained, "convert", "--source", held[0], "--target-emotion", "neutral") == EXIT_OK
    assert run(trained, "eval") == EXIT_OK
    out = cfg.path("reports") / "eval"
    rows = read_report(out / "report.csv")
    assert tuple(rows[0]) == REPORT_COLUMNS and len(rows) == len(held) + 1
    with open(out / "tsne.csv") as fh:
        assert len(list(csv.DictReader(fh))) == len(load_corpus(cfg))
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["directions"]) == {"neutral->happy", "neutral->neutral"}

    ids = [b.utt_id for b in load_corpus(cfg).bundles]
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("pair_id,ref,conv\n" + "".join(f"{u},{u},{u}\n" for u in ids))
    assert run(trained, "eval", "--pairs", str(pairs)) == EXIT_OK
    assert all(float(r["mcd_db"]) == 0.0 for r in read_report(out / "report.csv"))


def test_eval_lists_unmatched_pairs(trained, tmp_path, capsys):
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("pair_id,ref,conv\nghost,nobody,nothing\n")
    assert run(trained, "eval", "--pairs", str(pairs)) == EXIT_DATA
    assert "ghost" in capsys.readouterr().err


def test_run_json_provenance(trained):
    cfg = load_config(trained)
    data = json.loads((cfg.run_dir / "run.json").read_text())
    for verb in ("synth", "extract", "train", "convert"):
        entry = data["commands"][verb]
        assert entry["config_sha256"] == cfg.digest() and entry["seed"] == cfg.run.seed
        assert entry["code_version"] and entry["started"] <= entry["finished"]


def test_seed_flag_overrides(tiny_config_path, tmp_path):
    path = write_config(tmp_path, TINY_INI)
    assert run(path, "--seed", "11", "synth") == EXIT_OK
    data = json.loads((tmp_path / "run" / "run.json").read_text())
    assert data["commands"]["synth"]["seed"] == 11
    a = (tmp_path / "run" / "corpus" / "manifest.jsonl").read_bytes()
    b = (load_config(tiny_config_path).path("corpus") / "manifest.jsonl").read_bytes()
    assert a != b


def test_timing_column_is_the_only_nondeterminism(trained, tmp_path):
    """Rerunning training reproduces every metric; only wall_ms may change."""
    path = copy_run(trained, tmp_path / "exp")
    assert run(path, "train", "--stage", "joint") == EXIT_OK
    a = np.genfromtxt(load_config(trained).path("reports") / "metrics_joint.csv", delimiter=",", names=True)
    b = np.genfromtxt(load_config(path).path("reports") / "metrics_joint.csv", delimiter=",", names=True)
    for col in a.dtype.names:
        if col != "wall_ms":
            assert np.array_equal(a[col], b[col], equal_nan=True)
