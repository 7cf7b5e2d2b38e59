"""Command-line driver: synth, extract, train, convert, eval.

Every command reads one INI config, writes under the run directory and
records a ``run.json`` provenance entry. Exit codes: 0 success, 1 usage
or configuration error, 2 data error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as ev
from . import signal as sig
from .config import ExperimentConfig, default_config, load_config
from .decoder import SFEVC, FeatureStats
from .synthcorpus import make_corpus, read_manifest
from .training import (
    STAGES,
    SYMBOLS,
    ConfigError,
    Corpus,
    DirectionFilter,
    apply_schedule,
    build_va_schedule,
    reanalyze,
    train,
    train_direction_filter,
    write_filter_manifest,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class DataError(Exception):
    pass


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _say(msg: str) -> None:
    print(msg, flush=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def record_run(cfg: ExperimentConfig, command: str, argv: list[str], started: str) -> None:
    """Merge this command's provenance into ``run.json``."""
    path = cfg.run_dir / "run.json"
    data = json.loads(path.read_text()) if path.exists() else {}
    data.setdefault("commands", {})[command] = {
        "argv": argv,
        "config_sha256": cfg.digest(),
        "seed": cfg.run.seed,
        "code_version": __version__,
        "started": started,
        "finished": _now(),
    }
    _write_json(path, data)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _feature_path(cfg: ExperimentConfig, utt_id: str) -> Path:
    return cfg.path("cache") / f"{utt_id}.feat"


def load_corpus(cfg: ExperimentConfig) -> Corpus:
    """Bundles from the feature cache plus manifest metadata (factors when present)."""
    manifest = cfg.path("corpus") / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"no manifest at {manifest}; run `synth` first")
    records = read_manifest(manifest)
    missing = [r.utt_id for r in records if not _feature_path(cfg, r.utt_id).exists()]
    if missing:
        raise DataError(f"feature cache incomplete ({len(missing)} missing, e.g. {missing[:3]}); run `extract`")
    bundles = [sig.read_features(_feature_path(cfg, r.utt_id)) for r in records]
    factors = {r.utt_id: r.factor_record() for r in records if r.factors}
    stats = {}
    for spk in sorted({r.speaker for r in records}):
        d = json.loads((cfg.path("cache") / "stats" / f"{spk}.json").read_text())
        stats[spk] = sig.PitchStats(d["mean"], d["std"])
    return Corpus(bundles, {r.utt_id: r.sentence for r in records}, factors, stats)


def training_split(cfg: ExperimentConfig, corpus: Corpus) -> Corpus:
    last = max(corpus.sentences.values()) + 1 - cfg.corpus.holdout
    return corpus.subset(lambda b, k: k < last)


def _load_model(cfg: ExperimentConfig, path: Path) -> SFEVC:
    model = SFEVC(cfg.network_config(), seed=cfg.run.seed, rr=cfg.rr_config())
    model.load(path)
    return model


# ----------------------------------------------------------------- commands


def cmd_synth(cfg: ExperimentConfig, force: bool = False) -> int:
    out = cfg.path("corpus")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"corpus directory {out} is not empty; pass --force to regenerate")
        shutil.rmtree(out)
    cc = cfg.corpus_config()
    records = make_corpus(cc, cfg.run.seed, out)
    _say(f"manifest: {out / 'manifest.jsonl'}")
    _say(f"grid: {cc.speakers} speakers x {len(cc.emotions)} emotions x {cc.sentences} sentences = {len(records)} files")
    return EXIT_OK


def extract_bundle(cfg: ExperimentConfig, w: sig.Waveform):
    f = cfg.features
    mel = sig.mel_spectrogram(np.abs(sig.stft(w)), n_mels=f.n_mels)
    contour = sig.extract_f0(w, fmin=f.f0_min, fmax=f.f0_max, threshold=f.voicing_threshold)
    return mel, contour, sig.extract_mcep(mel, f.mcep_order)


def cmd_extract(cfg: ExperimentConfig) -> int:
    root = cfg.path("corpus")
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise DataError(f"no manifest at {manifest}")
    records = read_manifest(manifest)
    missing = [r.wav for r in records if not (root / r.wav).exists()]
    if missing:
        raise DataError("missing WAV files:\n  " + "\n  ".join(missing))
    analysed = {}
    contours: dict[str, list] = {}
    for r in records:
        try:
            w = sig.load_wav(root / r.wav)
        except (sig.WavFormatError, sig.WavParseError) as e:
            raise DataError(f"{root / r.wav}: {e}") from None
        mel, contour, mcep = extract_bundle(cfg, w)
        analysed[r.utt_id] = (mel, contour, mcep)
        contours.setdefault(r.speaker, []).append(contour)
    try:
        _, stats = sig.normalize_pitch(contours)
    except (sig.InsufficientDataError, sig.DegenerateSpeakerError) as e:
        raise DataError(str(e)) from None
    cache = cfg.path("cache")
    (cache / "stats").mkdir(parents=True, exist_ok=True)
    for spk, st in sorted(stats.items()):
        _write_json(cache / "stats" / f"{spk}.json", {"speaker": spk, "mean": st.mean, "std": st.std})
    for r in records:
        mel, contour, mcep = analysed[r.utt_id]
        bundle = sig.FeatureBundle(
            r.utt_id, r.speaker, r.emotion, mel, contour.f0, contour.voiced, stats[r.speaker].normalize(contour), mcep
        )
        sig.write_features(_feature_path(cfg, r.utt_id), bundle)
    _say(f"extracted {len(records)} utterances, {len(stats)} speaker stats -> {cache}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, stage: str) -> int:
    ckpt_dir = cfg.path("checkpoints")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    reports = cfg.path("reports")
    reports.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(cfg)
    train_set = training_split(cfg, corpus)
    if stage == "joint":
        model = SFEVC(cfg.network_config(), seed=cfg.run.seed, rr=cfg.rr_config())
        model.stats = FeatureStats.fit(train_set.bundles)
        tc = cfg.train_config("joint")
        if tc.factor_losses and not train_set.has_factors:
            _say("warning: manifest has no ground-truth factors; factor loss terms are skipped")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            records, opt = train(
                model, train_set, tc, reports / "metrics_joint.csv",
                progress=lambda r: _progress("joint", r, tc.epochs),
            )
        model.save(ckpt_dir / "joint.ckpt", opt)
        _say(f"joint: recon {records[0]['loss_recon']:.4f} -> {records[-1]['loss_recon']:.4f}; checkpoint {ckpt_dir / 'joint.ckpt'}")
        return EXIT_OK
    axis, sign = STAGES[stage]
    joint = ckpt_dir / "joint.ckpt"
    if not joint.exists():
        raise UsageError(f"stage {stage} needs the joint stage first (no {joint})")
    base = _load_model(cfg, joint)
    tc = cfg.train_config(stage)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        filt = train_direction_filter(
            base, train_set, axis, sign, cfg.va_table, tc, reports / f"metrics_{stage}.csv",
            cfg.va.off_axis_max, cfg.va.on_axis_min,
        )
    path = ckpt_dir / f"{stage}.ckpt"
    filt.model.save(path)
    write_filter_manifest(ckpt_dir / f"{stage}.json", filt, path.name)
    pairs = ", ".join(f"{s}->{t}" for s, t in filt.pairs)
    _say(f"{filt.symbol} filter trained on {pairs}; checkpoint {path}")
    return EXIT_OK


def _progress(stage: str, rec: dict, total: int) -> None:
    e = rec["epoch"]
    if e == 1 or e == total or e % 25 == 0:
        _say(f"[{stage}] epoch {e}/{total} recon {rec['loss_recon']:.4f}")


def pick_reference(corpus: Corpus, speaker: str, emotion: str, avoid_sentence: int, train_sentences: set) -> sig.FeatureBundle:
    """Same-speaker reference in ``emotion``, preferring a training sentence other than the source's."""
    cands = sorted(
        (k, b.utt_id)
        for b in corpus.bundles
        if b.speaker == speaker and b.emotion == emotion
        for k in [corpus.sentences[b.utt_id]]
    )
    if not cands:
        raise DataError(f"no {emotion} utterance of speaker {speaker} to use as reference")
    for k, uid in cands:
        if k != avoid_sentence and k in train_sentences:
            return corpus.by_id[uid]
    return corpus.by_id[cands[0][1]]


def convert_one(cfg, corpus, train_sentences, source_id: str, target: str, joint: SFEVC, filters: dict):
    """Convert one utterance; returns (mel, schedule, emotion reference)."""
    if source_id not in corpus.by_id:
        raise DataError(f"unknown source utterance {source_id!r}")
    src = corpus.by_id[source_id]
    if target not in cfg.va_table:
        raise ConfigError(f"target emotion {target!r} is not in the VA table ({sorted(cfg.va_table)})")
    schedule = build_va_schedule(src.emotion, target, cfg.va_table)
    ref = pick_reference(corpus, src.speaker, target, corpus.sentences[source_id], train_sentences)
    stats = corpus.pitch_stats.get(src.speaker)
    mel = apply_schedule(src, schedule, filters, ref, None, joint, stats)
    return mel, schedule, ref


def load_filters(cfg: ExperimentConfig, schedule) -> dict:
    out = {}
    for step in schedule:
        stage = f"{step[0]}-{step[1]}"
        path = cfg.path("checkpoints") / f"{stage}.ckpt"
        if not path.exists():
            raise UsageError(f"missing filter checkpoint for {SYMBOLS[step]} ({stage}); run `train --stage {stage}`")
        out[step] = _load_model(cfg, path)
    return out


def cmd_convert(cfg: ExperimentConfig, sources: list[str], target: str, wav: bool | None = None) -> int:
    joint_path = cfg.path("checkpoints") / "joint.ckpt"
    if not joint_path.exists():
        raise UsageError(f"no joint checkpoint at {joint_path}; run `train --stage joint`")
    corpus = load_corpus(cfg)
    train_sentences = set(training_split(cfg, corpus).sentences.values())
    joint = _load_model(cfg, joint_path)
    if target not in cfg.va_table:
        raise ConfigError(f"target emotion {target!r} is not in the VA table ({sorted(cfg.va_table)})")
    out_dir = cfg.path("reports") / "converted"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_wav = cfg.convert.write_wav if wav is None else wav
    cache: dict = {}
    for sid in sources:
        if sid not in corpus.by_id:
            raise DataError(f"unknown source utterance {sid!r}")
        src = corpus.by_id[sid]
        schedule = build_va_schedule(src.emotion, target, cfg.va_table)
        missing = [s for s in schedule if s not in cache]
        cache.update(load_filters(cfg, missing))
        mel, schedule, ref = convert_one(cfg, corpus, train_sentences, sid, target, joint, cache)
        name = f"{sid}_to_{target}"
        out = reanalyze(mel, src, corpus.pitch_stats.get(src.speaker))
        out.emotion = target
        out.utt_id = name
        sig.write_features(out_dir / f"{name}.feat", out)
        meta = {
            "source": sid,
            "speaker": src.speaker,
            "source_emotion": src.emotion,
            "target_emotion": target,
            "sentence": corpus.sentences[sid],
            "schedule": [SYMBOLS[s] for s in schedule],
            "emotion_reference": ref.utt_id,
            "features": f"{name}.feat",
        }
        if write_wav:
            w = sig.griffin_lim(mel, iters=cfg.convert.griffin_lim_iters, is_mel=True)
            sig.save_wav(out_dir / f"{name}.wav", w)
            meta["wav"] = f"{name}.wav"
        _write_json(out_dir / f"{name}.json", meta)
        route = " ".join(meta["schedule"]) or "(identity)"
        _say(f"{sid} -> {target}: schedule {route}; wrote {out_dir / (name + '.feat')}")
    return EXIT_OK


def _read_pairs(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"pair_id", "ref", "conv"} <= set(rows[0]):
        raise DataError(f"{path}: pairs file needs columns pair_id, ref, conv")
    return rows


def _resolve_bundle(cfg: ExperimentConfig, corpus: Corpus, key: str, base: Path):
    if key in corpus.by_id:
        return corpus.by_id[key]
    for cand in (base / key, cfg.path("reports") / "converted" / key, cfg.path("reports") / "converted" / f"{key}.feat"):
        if cand.is_file():
            return sig.read_features(cand)
    return None


def default_pairs(cfg: ExperimentConfig, corpus: Corpus) -> list[dict]:
    """Every converted output paired with its parallel ground-truth rendition."""
    rows = []
    for meta_path in sorted((cfg.path("reports") / "converted").glob("*.json")):
        meta = json.loads(meta_path.read_text())
        ref = corpus.lookup(meta["speaker"], meta["target_emotion"], meta["sentence"])
        if ref is None:
            continue
        rows.append({
            "pair_id": meta_path.stem,
            "ref": ref.utt_id,
            "conv": meta["features"],
            "direction": f"{meta['source_emotion']}->{meta['target_emotion']}",
        })
    return rows


def cmd_eval(cfg: ExperimentConfig, pairs_path: str | None) -> int:
    corpus = load_corpus(cfg)
    out_dir = cfg.path("reports") / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    if pairs_path is not None:
        p = Path(pairs_path)
        if not p.exists():
            raise DataError(f"pairs file {p} does not exist")
        rows, base = _read_pairs(p), p.parent
    else:
        rows, base = default_pairs(cfg, corpus), cfg.path("reports") / "converted"
    resolved, unmatched = [], []
    for row in rows:
        ref = _resolve_bundle(cfg, corpus, row["ref"], base)
        conv = _resolve_bundle(cfg, corpus, row["conv"], base)
        if ref is None or conv is None:
            unmatched.append(row["pair_id"])
            continue
        resolved.append((row, ref, conv))
    if unmatched:
        raise DataError("unmatched pair ids: " + ", ".join(unmatched))

    reports = [(row["pair_id"], ev.metric_report(ref, conv)) for row, ref, conv in resolved]
    ev.write_report(out_dir / "report.csv", reports)
    directions: dict = {}
    for (row, _, _), (_, r) in zip(resolved, reports):
        directions.setdefault(row.get("direction") or "all", []).append(r)
    summary = {
        "alignment": ev.ALIGNMENT_NOTE,
        "directions": {
            d: {
                "n": len(rs),
                "mcd_db": float(np.mean([r.mcd for r in rs])),
                "f0_rmse_hz": _nanmean([r.f0_rmse for r in rs]),
                "voiced_overlap": float(np.mean([r.voiced_overlap for r in rs])),
            }
            for d, rs in sorted(directions.items())
        },
    }

    if corpus.has_factors and resolved:
        protos = ev.Prototypes.build(corpus.bundles, corpus.sentences)
        conv_items = [
            ev.Converted(row["pair_id"], conv.mel, ref.speaker, ref.emotion, corpus.sentences[ref.utt_id], ref.mel)
            for row, ref, conv in resolved
            if ref.utt_id in corpus.sentences
        ]
        if conv_items:
            summary["factor_recovery"] = ev.factor_recovery(conv_items, protos)
    else:
        summary["factor_recovery"] = None

    emb = ev.embedding_analysis(
        corpus.bundles, cfg.va_table, cfg.eval.tsne_perplexity, cfg.eval.tsne_iters, seed=cfg.run.seed
    )
    ev.write_tsne(out_dir / "tsne.csv", emb.ids, emb.coords, emb.labels)
    summary["tsne"] = emb.summary
    _write_json(out_dir / "summary.json", summary)
    _say(f"evaluated {len(reports)} pairs -> {out_dir / 'report.csv'}")
    for d, s in summary["directions"].items():
        rmse = "absent" if s["f0_rmse_hz"] is None else f"{s['f0_rmse_hz']:.2f} Hz"
        _say(f"  {d}: MCD {s['mcd_db']:.3f} dB, F0 RMSE {rmse} (n={s['n']})")
    if summary.get("factor_recovery"):
        fr = summary["factor_recovery"]
        _say(
            f"  factor recovery: emotion {fr['emotion_accuracy']:.2f}, speaker {fr['speaker_accuracy']:.2f}, "
            f"content corr {fr['content_correlation']:.3f}"
        )
    return EXIT_OK


def _nanmean(v) -> float | None:
    a = np.array(v, dtype=float)
    return float(np.nanmean(a)) if np.any(~np.isnan(a)) else None


# ---------------------------------------------------------------- argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="experiment INI file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override [run] seed")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS, help="regenerate existing outputs")

    p = _Parser(prog="sfevc", description="Source-filter emotional voice conversion experiments.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="render the synthetic corpus")
    sub.add_parser("extract", parents=[common], help="compute the feature cache")
    t = sub.add_parser("train", parents=[common], help="train the joint model or one direction filter")
    t.add_argument("--stage", choices=["joint", *STAGES], default="joint")
    c = sub.add_parser("convert", parents=[common], help="convert utterances to a target emotion")
    c.add_argument("--source", required=True, action="append", help="source utterance id (repeatable)")
    c.add_argument("--target-emotion", required=True)
    c.add_argument("--wav", action="store_true", default=None, help="also write Griffin-Lim audio")
    e = sub.add_parser("eval", parents=[common], help="objective metrics, factor recovery and t-SNE export")
    e.add_argument("--pairs", metavar="PATH", help="CSV with pair_id, ref, conv[, direction]")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    started = _now()
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else default_config()
        if getattr(args, "seed", None) is not None:
            cfg = cfg.with_seed(args.seed)
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
        force = getattr(args, "force", False)
        if args.command == "synth":
            code = cmd_synth(cfg, force)
        elif args.command == "extract":
            code = cmd_extract(cfg)
        elif args.command == "train":
            code = cmd_train(cfg, args.stage)
        elif args.command == "convert":
            code = cmd_convert(cfg, args.source, args.target_emotion, args.wav)
        else:
            code = cmd_eval(cfg, args.pairs)
        record_run(cfg, args.command, argv, started)
        return code
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - anything else is a broken invariant
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
