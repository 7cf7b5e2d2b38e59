"""Losses, training loop and the valence-arousal filter schedule.

Training pairs follow two regimes at once. The decoder is asked to turn
a source utterance X_s into its parallel rendition X_t (same speaker,
same sentence, emotion t), reading the target emotion from a reference
of the same speaker in emotion t (U^t, P^t) and the speaker identity
from another speaker in the source emotion (U^y, P^y).
"""

from __future__ import annotations

import copy
import csv
import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import signal as sig
from .decoder import SFEVC, convert
from .encoders import pad_batch
from .neural import Adam, Tensor, as_tensor, length_mask, tabs
from .resample import derive_seed
from .synthcorpus import SyntheticFactors

LAMBDA_1 = 1.0
LAMBDA_2 = 1.0

METRIC_COLUMNS = ("epoch", "loss_recon", "loss_PI", "loss_TI", "loss_PD", "loss_TD", "wall_ms")

DEFAULT_VA_TABLE = {
    "neutral": (0.0, 0.0),
    "happy": (0.8, 0.7),
    "sad": (-0.7, -0.5),
    "angry": (-0.6, 0.7),
    "surprise": (0.3, 0.9),
    "high-tension": (0.6, 0.9),
}

AXES = ("arousal", "valence")
SIGNS = ("up", "down")
STAGES = {f"{a}-{s}": (a, s) for a in AXES for s in SIGNS}
SYMBOLS = {("arousal", "up"): "A↑", ("arousal", "down"): "A↓", ("valence", "up"): "V↑", ("valence", "down"): "V↓"}

# parameters a direction filter fine-tunes; the rest of the joint model stays frozen
FILTER_PREFIXES = ("enc.emo.", "head.")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------- losses


def reconstruction_loss(x_hat, x, lengths=None) -> Tensor:
    """Mean squared error over all valid cells of ``(B, T, F)`` or ``(T, F)`` inputs."""
    x_hat = as_tensor(x_hat)
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch: prediction {x_hat.shape} vs target {x.shape}")
    if lengths is None:
        d = x_hat - x
        return (d * d).mean()
    mask = length_mask(lengths, x.shape[1])
    d = (x_hat - x) * mask
    return (d * d).sum() * (1.0 / (mask.sum() * x.shape[-1]))


def l1_loss(pred, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=float)
    pred = as_tensor(pred)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs target {target.shape}")
    return tabs(pred - target).mean()


@dataclass
class LossValue:
    total: Tensor
    terms: dict
    skipped: bool = False


def _pair_loss(pred: dict, targets: dict | None, keys: tuple, lam: float) -> LossValue:
    if targets is None:
        return LossValue(Tensor(np.zeros(())), {k: float("nan") for k in keys}, skipped=True)
    a = l1_loss(pred[keys[0]], targets[keys[0]])
    b = l1_loss(pred[keys[1]], targets[keys[1]])
    return LossValue(a + b * lam, {keys[0]: float(a.data), keys[1]: float(b.data)})


def independent_emotion_loss(pred: dict, targets: dict | None, lam1: float = LAMBDA_1) -> LossValue:
    """L_PI + lam1 * L_TI: L1 between code read-outs and speaker-independent factors.

    ``targets=None`` (no ground truth, e.g. real recordings) skips the
    term and sets ``skipped``.
    """
    return _pair_loss(pred, targets, ("pi", "ti"), lam1)


def dependent_feature_loss(pred: dict, targets: dict | None, lam2: float = LAMBDA_2) -> LossValue:
    """L_PD + lam2 * L_TD for the speaker-dependent codes."""
    return _pair_loss(pred, targets, ("pd", "td"), lam2)


# ------------------------------------------------------------------ dataset


@dataclass
class Corpus:
    """Feature bundles plus the metadata pairing needs."""

    bundles: list[sig.FeatureBundle]
    sentences: dict[str, int]
    factors: dict[str, SyntheticFactors] = field(default_factory=dict)
    pitch_stats: dict[str, sig.PitchStats] = field(default_factory=dict)

    def __post_init__(self):
        self.by_id = {b.utt_id: b for b in self.bundles}
        self._index = {(b.speaker, b.emotion, self.sentences[b.utt_id]): b for b in self.bundles}

    def __len__(self) -> int:
        return len(self.bundles)

    @property
    def speakers(self) -> list[str]:
        return sorted({b.speaker for b in self.bundles})

    @property
    def emotions(self) -> list[str]:
        return sorted({b.emotion for b in self.bundles})

    def lookup(self, speaker: str, emotion: str, sentence: int) -> sig.FeatureBundle | None:
        return self._index.get((speaker, emotion, sentence))

    def subset(self, keep) -> "Corpus":
        bundles = [b for b in self.bundles if keep(b, self.sentences[b.utt_id])]
        ids = {b.utt_id for b in bundles}
        return Corpus(
            bundles,
            {k: v for k, v in self.sentences.items() if k in ids},
            {k: v for k, v in self.factors.items() if k in ids},
            self.pitch_stats,
        )

    @property
    def has_factors(self) -> bool:
        return bool(self.bundles) and all(b.utt_id in self.factors for b in self.bundles)


@dataclass
class TrainExample:
    """One training tuple covering both pairing regimes.

    ``source``/``target`` and ``emotion_ref`` share a speaker
    (cross-emotion regime); ``speaker_ref`` is another speaker in the
    source emotion (cross-speaker regime).
    """

    source: sig.FeatureBundle
    target: sig.FeatureBundle
    emotion_ref: sig.FeatureBundle
    speaker_ref: sig.FeatureBundle

    def validate(self, single_speaker: bool = False) -> None:
        s = self.source
        if not (s.speaker == self.target.speaker == self.emotion_ref.speaker):
            raise ValueError(f"{s.utt_id}: cross-emotion pair must share one speaker")
        if self.target.emotion != self.emotion_ref.emotion:
            raise ValueError(f"{s.utt_id}: emotion reference is not in the target emotion")
        if self.speaker_ref.emotion != s.emotion:
            raise ValueError(f"{s.utt_id}: speaker reference is not in the source emotion")
        if not single_speaker and self.speaker_ref.speaker == s.speaker:
            raise ValueError(f"{s.utt_id}: speaker reference must come from another speaker")


def make_examples(corpus: Corpus, rng: np.random.Generator, routes=None) -> list[TrainExample]:
    """One example per source utterance.

    ``routes`` restricts (source emotion, target emotion) pairs; by
    default the target emotion is drawn uniformly, including the source
    emotion itself (plain reconstruction).
    """
    if len(corpus) == 0:
        raise ValueError("cannot build training pairs from an empty dataset")
    speakers = corpus.speakers
    out = []
    for b in corpus.bundles:
        k = corpus.sentences[b.utt_id]
        if routes is None:
            options = [e for e in corpus.emotions if corpus.lookup(b.speaker, e, k) is not None]
        else:
            options = [t for s, t in routes if s == b.emotion and corpus.lookup(b.speaker, t, k) is not None]
        if not options:
            continue
        t = options[rng.integers(len(options))]
        target = corpus.lookup(b.speaker, t, k)
        refs = [x for x in corpus.bundles if x.speaker == b.speaker and x.emotion == t and x.utt_id != target.utt_id]
        emotion_ref = refs[rng.integers(len(refs))] if refs else target
        others = [x for x in corpus.bundles if x.speaker != b.speaker and x.emotion == b.emotion]
        speaker_ref = others[rng.integers(len(others))] if others else b
        ex = TrainExample(b, target, emotion_ref, speaker_ref)
        ex.validate(single_speaker=len(speakers) == 1)
        out.append(ex)
    if not out:
        raise ValueError("no training pairs match the requested emotion routes")
    return out


def factor_targets(examples: list[TrainExample], corpus: Corpus) -> dict | None:
    """Ground-truth factor vectors per head, or ``None`` when any utterance lacks them."""
    if not corpus.has_factors:
        return None
    tgt = [corpus.factors[e.target.utt_id] for e in examples]
    src = [corpus.factors[e.source.utt_id] for e in examples]
    return {
        "pi": np.stack([f.pitch_independent() for f in tgt]),
        "ti": np.stack([f.timbre_independent() for f in tgt]),
        "pd": np.stack([f.pitch_dependent() for f in src]),
        "td": np.stack([f.timbre_dependent() for f in src]),
    }


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    lambda1: float = LAMBDA_1
    lambda2: float = LAMBDA_2
    factor_losses: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.lr < 0:
            raise ConfigError("train.lr must be >= 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be >= 0")


def batch_loss(model: SFEVC, examples: list[TrainExample], corpus: Corpus, cfg: TrainConfig, seeds) -> tuple[Tensor, dict]:
    """Total loss of one batch and the per-term values."""
    inp = [model.bundle_inputs(e.source) for e in examples]
    ref = [model.bundle_inputs(e.emotion_ref) for e in examples]
    oth = [model.bundle_inputs(e.speaker_ref) for e in examples]
    out, lengths, codes = model.forward(
        [i[0] for i in inp],
        [i[1] for i in inp],
        [i[2] for i in inp],
        [r[1] for r in ref],
        [r[2] for r in ref],
        [o[1] for o in oth],
        [o[2] for o in oth],
        seeds,
    )
    target, _ = pad_batch([model.stats.mel_in(e.target.mel) for e in examples])
    recon = reconstruction_loss(out, target, lengths)
    targets = factor_targets(examples, corpus) if cfg.factor_losses else None
    pred = model.factor_predictions(codes) if targets is not None else {}
    ind = independent_emotion_loss(pred, targets, cfg.lambda1)
    dep = dependent_feature_loss(pred, targets, cfg.lambda2)
    total = recon + ind.total + dep.total
    terms = {"loss_recon": float(recon.data)}
    for key, v in {**ind.terms, **dep.terms}.items():
        terms[f"loss_{key.upper()}"] = v
    terms["skipped"] = ind.skipped
    return total, terms


def train_epoch(
    model: SFEVC,
    corpus: Corpus,
    optimizer: Adam | None,
    cfg: TrainConfig,
    epoch: int,
    routes=None,
    trainable: tuple[str, ...] | None = None,
) -> dict:
    """One pass over ``corpus``; returns per-loss means. ``optimizer=None`` only evaluates.

    Pairing, batch order and random resampling are all derived from
    ``(cfg.seed, epoch)`` so a rerun reproduces the same record.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train on an empty dataset")
    t0 = time.perf_counter()
    rng = np.random.default_rng(derive_seed(cfg.seed, epoch))
    examples = make_examples(corpus, rng, routes)
    order = rng.permutation(len(examples))
    update = {k: v for k, v in model.params.items() if trainable is None or k.startswith(trainable)}
    sums: dict[str, float] = {}
    count = 0
    skipped = False
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        batch = [examples[i] for i in idx]
        seeds = np.array([[derive_seed(cfg.seed, epoch, int(i), s) for s in range(4)] for i in idx])
        loss, terms = batch_loss(model, batch, corpus, cfg, seeds)
        skipped = skipped or terms.pop("skipped")
        if optimizer is not None:
            model.params.zero_grad()
            loss.backward()
            optimizer.step(update)
        for k, v in terms.items():
            sums[k] = sums.get(k, 0.0) + v * len(batch)
        count += len(batch)
    record = {"epoch": epoch + 1}
    record.update({k: v / count for k, v in sums.items()})
    record["wall_ms"] = int(round(1000 * (time.perf_counter() - t0)))
    record["factor_losses_skipped"] = skipped
    if skipped and cfg.factor_losses:
        warnings.warn("no ground-truth factors: factor loss terms skipped", stacklevel=2)
    return record


def train(
    model: SFEVC,
    corpus: Corpus,
    cfg: TrainConfig,
    metrics_path=None,
    routes=None,
    trainable=None,
    optimizer: Adam | None = None,
    progress=None,
) -> tuple[list[dict], Adam]:
    """Run ``cfg.epochs`` epochs, appending each record to ``metrics_path`` as CSV."""
    cfg.validate()
    opt = optimizer or Adam(lr=cfg.lr)
    records = []
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        writer.writeheader()
    try:
        for epoch in range(cfg.epochs):
            rec = train_epoch(model, corpus, opt, cfg, epoch, routes, trainable)
            records.append(rec)
            if writer is not None:
                writer.writerow({k: _fmt(rec.get(k)) for k in METRIC_COLUMNS})
                fh.flush()
            if progress is not None:
                progress(rec)
    finally:
        if fh is not None:
            fh.close()
    return records, opt


def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else f"{v:.8g}"
    return v


# -------------------------------------------------------- valence-arousal


def va_coordinates(va_table: dict, emotion: str) -> tuple[float, float]:
    """(valence, arousal) of ``emotion``."""
    if emotion not in va_table:
        raise ConfigError(f"emotion {emotion!r} is not in the VA table ({sorted(va_table)})")
    v, a = va_table[emotion]
    if not (np.isfinite(v) and np.isfinite(a) and -1 <= v <= 1 and -1 <= a <= 1):
        raise ConfigError(f"VA coordinates of {emotion!r} must be finite and in [-1, 1]")
    return float(v), float(a)


def qualifying_pairs(
    va_table: dict,
    axis: str,
    sign: str,
    off_axis_max: float = 0.25,
    on_axis_min: float = 0.5,
    emotions=None,
) -> list[tuple[str, str]]:
    """Ordered emotion pairs that move along ``axis`` in direction ``sign`` only."""
    if axis not in AXES or sign not in SIGNS:
        raise ConfigError(f"unknown direction {axis}-{sign}")
    names = [e for e in va_table if emotions is None or e in emotions]
    on = 1 if axis == "arousal" else 0
    direction = 1.0 if sign == "up" else -1.0
    out = []
    for s in names:
        for t in names:
            if s == t:
                continue
            cs, ct = va_coordinates(va_table, s), va_coordinates(va_table, t)
            if abs(ct[1 - on] - cs[1 - on]) < off_axis_max and direction * (ct[on] - cs[on]) >= on_axis_min:
                out.append((s, t))
    return out


@dataclass
class DirectionFilter:
    axis: str
    sign: str
    pairs: list
    va_table: dict
    model: SFEVC | None = None

    @property
    def symbol(self) -> str:
        return SYMBOLS[(self.axis, self.sign)]

    @property
    def stage(self) -> str:
        return f"{self.axis}-{self.sign}"

    def manifest(self, checkpoint: str) -> dict:
        return {
            "axis": self.axis,
            "sign": self.sign,
            "pairs": [list(p) for p in self.pairs],
            "va_table": {k: list(v) for k, v in self.va_table.items()},
            "checkpoint": str(checkpoint),
        }


def write_filter_manifest(path, filt: DirectionFilter, checkpoint) -> None:
    Path(path).write_text(json.dumps(filt.manifest(checkpoint), indent=2, sort_keys=True) + "\n")


def train_direction_filter(
    base: SFEVC,
    corpus: Corpus,
    axis: str,
    sign: str,
    va_table: dict,
    cfg: TrainConfig,
    metrics_path=None,
    off_axis_max: float = 0.25,
    on_axis_min: float = 0.5,
) -> DirectionFilter:
    """Fine-tune the emotion-separate encoders of a copy of ``base`` on one VA direction.

    The rhythm, content and pitch encoders and the decoder stay frozen, so
    the filter only learns how that direction changes the emotion codes.
    """
    if len(corpus) == 0:
        raise ValueError("cannot train a direction filter on an empty dataset")
    pairs = qualifying_pairs(va_table, axis, sign, off_axis_max, on_axis_min, emotions=set(corpus.emotions))
    if not pairs:
        raise ConfigError(f"no emotion pairs qualify for {axis}-{sign} in VA table {va_table}")
    model = copy.deepcopy(base)
    train(model, corpus, cfg, metrics_path, routes=pairs, trainable=FILTER_PREFIXES)
    return DirectionFilter(axis, sign, pairs, dict(va_table), model)


def build_va_schedule(source: str, target: str, va_table: dict) -> list[tuple[str, str]]:
    """Arousal step first, then valence; each signed by the coordinate difference."""
    vs, as_ = va_coordinates(va_table, source)
    vt, at = va_coordinates(va_table, target)
    steps = []
    if at != as_:
        steps.append(("arousal", "up" if at > as_ else "down"))
    if vt != vs:
        steps.append(("valence", "up" if vt > vs else "down"))
    return steps


def reanalyze(mel: np.ndarray, like: sig.FeatureBundle, stats: sig.PitchStats | None) -> sig.FeatureBundle:
    """Features of a decoded mel: F0 from the mel proxy, mcep from its DCT."""
    contour = sig.mel_pitch_proxy(mel)
    pitch = stats.normalize(contour) if stats is not None else np.zeros(len(mel))
    return sig.FeatureBundle(
        like.utt_id, like.speaker, like.emotion, mel, contour.f0, contour.voiced, pitch, sig.extract_mcep(mel)
    )


def apply_schedule(
    source: sig.FeatureBundle,
    schedule: list[tuple[str, str]],
    filters: dict,
    emotion_ref: sig.FeatureBundle | None = None,
    speaker_ref: sig.FeatureBundle | None = None,
    base: SFEVC | None = None,
    pitch_stats: sig.PitchStats | None = None,
) -> np.ndarray:
    """Run ``source`` through the filters of ``schedule`` in order.

    ``filters`` maps ``(axis, sign)`` to a trained model. Every step
    converts towards ``emotion_ref``. Between steps the output's pitch and
    mcep are re-analysed and carried forward, while the mel input stays the
    source's: it only feeds the frozen rhythm and content encoders, so
    re-encoding a decoded mel would just compound reconstruction error.
    An empty schedule is a self-conversion through ``base``.
    """
    if not schedule:
        if base is None:
            raise ValueError("an empty schedule needs the joint model for self-conversion")
        return convert(base, source, source, speaker_ref)
    if emotion_ref is None:
        raise ValueError("a non-empty schedule needs a target-emotion reference")
    current = source
    mel = None
    for i, step in enumerate(schedule):
        if step not in filters:
            raise KeyError(f"no trained filter for {SYMBOLS.get(step, step)}")
        mel = convert(filters[step], current, emotion_ref, speaker_ref)
        if i + 1 < len(schedule):
            current = reanalyze(mel, source, pitch_stats)
            current.mel = source.mel
    return mel
