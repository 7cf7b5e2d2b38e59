"""Parametric source-filter speech generator with ground-truth factors.

A band-limited glottal pulse train (the source) is shaped by a cascade
of three two-pole formant resonators (the filter) and a global spectral
tilt. Content picks formant targets, rhythm picks segment durations,
and pitch/timbre are split into a speaker-dependent part (base log-F0,
pitch range, formant scale, tilt) and an emotion part (log-F0 offset,
range gain, contour shape, tilt offset, bandwidth scale). Emotion
factors are additive in log-F0 and in dB/octave tilt.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .signal import HOP, SAMPLE_RATE, Waveform, save_wav

# (F1, F2, F3) in Hz for eight pseudo-phonemes
VOWELS = np.array(
    [
        [730, 1090, 2440],
        [530, 1840, 2480],
        [270, 2290, 3010],
        [570, 840, 2410],
        [300, 870, 2240],
        [660, 1720, 2410],
        [490, 1350, 1690],
        [520, 1190, 2390],
    ],
    dtype=float,
)
BASE_BANDWIDTHS = np.array([80.0, 100.0, 140.0])

# Emotion prototypes: log-F0 offset, range gain, contour shape, tilt offset (dB/oct), bandwidth scale.
EMOTION_PROTOTYPES = {
    "neutral": (0.00, 1.0, 0, 0.0, 1.0),
    "happy": (0.18, 1.5, 1, 1.5, 0.9),
    "sad": (-0.08, 0.6, 2, -4.0, 1.3),
    "angry": (0.14, 1.3, 3, 5.0, 0.8),
    "surprise": (0.22, 1.8, 1, 3.0, 0.9),
    "high-tension": (0.16, 1.4, 3, 3.5, 0.85),
}

F0_LO, F0_HI = 80.0, 400.0
FORMANT_LIMIT = 7600.0


@dataclass
class SyntheticFactors:
    content: list[int]
    rhythm: list[int]
    gaps: list[int]
    base_logf0: float
    pitch_range: float
    f0_offset: float
    range_gain: float
    contour_shape: int
    formant_scale: float
    tilt_db: float
    tilt_offset_db: float
    bandwidth_scale: float
    lead: int = 4
    trail: int = 4

    def validate(self) -> None:
        if not self.content or len(self.content) != len(self.rhythm):
            raise ValueError("content and rhythm must be non-empty and of equal length")
        if len(self.gaps) != len(self.content) - 1:
            raise ValueError("need one gap between each pair of segments")
        if min(self.rhythm) < 2:
            raise ValueError(f"segment durations must be >= 2 frames, got {min(self.rhythm)}")
        if min(self.gaps, default=1) < 1:
            raise ValueError("gaps must be >= 1 frame")
        if any(not 0 <= c < len(VOWELS) for c in self.content):
            raise ValueError("content index out of range")
        if VOWELS.max() * self.formant_scale >= FORMANT_LIMIT:
            raise ValueError(f"formant scale {self.formant_scale} pushes F3 past {FORMANT_LIMIT} Hz")
        centre = np.exp(self.base_logf0 + self.f0_offset)
        if not F0_LO <= centre <= F0_HI:
            raise ValueError(f"F0 target {centre:.1f} Hz outside [{F0_LO}, {F0_HI}]")
        if self.pitch_range < 0 or self.range_gain < 0 or self.bandwidth_scale <= 0:
            raise ValueError("pitch range, range gain and bandwidth scale must be positive")

    # ground-truth target vectors used by the factor losses
    def pitch_independent(self) -> np.ndarray:
        return np.array([self.f0_offset * 5.0, np.log(self.range_gain)])

    def timbre_independent(self) -> np.ndarray:
        return np.array([self.tilt_offset_db / 5.0, 5.0 * np.log(self.bandwidth_scale)])

    def pitch_dependent(self) -> np.ndarray:
        return np.array([self.base_logf0 - np.log(160.0), self.pitch_range * 10.0 - 1.0])

    def timbre_dependent(self) -> np.ndarray:
        return np.array([5.0 * np.log(self.formant_scale), self.tilt_db / 2.0])

    def n_frames(self) -> int:
        return self.lead + sum(self.rhythm) + sum(self.gaps) + self.trail


def _shape(shape: int, u: np.ndarray, seg_u: np.ndarray) -> np.ndarray:
    """Zero-mean-ish intonation shapes in units of pitch range."""
    if shape == 0:  # gentle declination
        return 0.5 - u
    if shape == 1:  # rise then fall
        return np.sin(np.pi * u) * 1.2 - 0.75
    if shape == 2:  # steady fall
        return 0.8 * (0.5 - u) - 0.1 * np.sin(2 * np.pi * u)
    if shape == 3:  # per-segment accents
        return np.sin(np.pi * seg_u) - 0.6
    raise ValueError(f"unknown contour shape {shape}")


def f0_track(f: SyntheticFactors) -> tuple[np.ndarray, np.ndarray]:
    """Frame-level target F0 (Hz, 0 when unvoiced) and voiced mask."""
    t = f.n_frames()
    f0 = np.zeros(t)
    voiced = np.zeros(t, dtype=bool)
    starts = _segment_starts(f)
    total = sum(f.rhythm)
    done = 0
    for s, d in zip(starts, f.rhythm):
        k = np.arange(d)
        u = (done + k + 0.5) / total
        seg_u = (k + 0.5) / d
        logf = f.base_logf0 + f.f0_offset + f.pitch_range * f.range_gain * _shape(f.contour_shape, u, seg_u)
        f0[s : s + d] = np.clip(np.exp(logf), F0_LO, F0_HI)
        voiced[s : s + d] = True
        done += d
    return f0, voiced


def _segment_starts(f: SyntheticFactors) -> list[int]:
    starts, pos = [], f.lead
    for i, d in enumerate(f.rhythm):
        starts.append(pos)
        pos += d + (f.gaps[i] if i < len(f.gaps) else 0)
    return starts


def _resonator(freq: float, bw: float, sr: int = SAMPLE_RATE):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return [sum(a)], a  # unit gain at DC


def generate_utterance(factors: SyntheticFactors, seed: int) -> tuple[Waveform, SyntheticFactors]:
    factors.validate()
    rng = np.random.default_rng(seed)
    sr = SAMPLE_RATE
    t = factors.n_frames()
    n = t * HOP
    out = np.zeros(n)

    f0_frames, _ = f0_track(factors)
    starts = _segment_starts(factors)
    fade = int(0.006 * sr)
    phase0 = 0.0
    for s, d, vowel in zip(starts, factors.rhythm, factors.content):
        a = s * HOP
        length = d * HOP
        # per-sample F0 by linear interpolation of frame targets, which sit
        # at the analysis frame centres (frame k is centred on sample k * HOP)
        frame_t = np.arange(d) * HOP
        f0 = np.interp(np.arange(length), frame_t, f0_frames[s : s + d])
        phase = phase0 + 2 * np.pi * np.cumsum(f0) / sr
        phase0 = float(phase[-1])
        kmax = int(7000 // f0.min())
        k = np.arange(1, kmax + 1)[:, None]
        amp = np.where(k * f0[None, :] < 7000.0, 1.0 / k, 0.0)
        src = (amp * np.sin(k * phase[None, :])).sum(axis=0)

        seg = src
        for formant, bw in zip(VOWELS[vowel] * factors.formant_scale, BASE_BANDWIDTHS * factors.bandwidth_scale):
            b, den = _resonator(formant, bw)
            seg = lfilter(b, den, seg)
        env = np.ones(length)
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        env[:fade] = ramp
        env[-fade:] = ramp[::-1]
        out[a : a + length] += seg * env

    out = _apply_tilt(out, factors.tilt_db + factors.tilt_offset_db)
    voiced_rms = np.sqrt(np.mean(out[out != 0] ** 2)) if np.any(out) else 1.0
    out *= 0.1 / voiced_rms
    out += 3e-4 * rng.standard_normal(n)
    return Waveform(np.clip(out, -1.0, 1.0)), factors


def _apply_tilt(x: np.ndarray, db_per_octave: float, ref_hz: float = 500.0) -> np.ndarray:
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(len(x), 1.0 / SAMPLE_RATE)
    octaves = np.log2(np.maximum(freqs, 60.0) / ref_hz)
    return np.fft.irfft(spec * 10 ** (db_per_octave * octaves / 20.0), n=len(x))


# ----------------------------------------------------------------- corpus


@dataclass
class CorpusConfig:
    speakers: int = 4
    emotions: tuple[str, ...] = ("neutral", "happy", "sad", "angry")
    sentences: int = 12
    vowels_per_sentence: int = 5
    seg_min: int = 6
    seg_max: int = 12
    gap_min: int = 2
    gap_max: int = 4
    f0_low: float = 95.0
    f0_high: float = 280.0

    def validate(self) -> None:
        for name in ("speakers", "sentences", "vowels_per_sentence"):
            if getattr(self, name) < 1:
                raise ValueError(f"corpus.{name} must be >= 1, got {getattr(self, name)}")
        if not self.emotions:
            raise ValueError("corpus.emotions must not be empty")
        unknown = [e for e in self.emotions if e not in EMOTION_PROTOTYPES]
        if unknown:
            raise ValueError(f"corpus.emotions: no prototype for {unknown}")
        if self.seg_min < 2 or self.seg_max < self.seg_min:
            raise ValueError("corpus.seg_min must be >= 2 and <= corpus.seg_max")
        if self.gap_min < 1 or self.gap_max < self.gap_min:
            raise ValueError("corpus.gap_min must be >= 1 and <= corpus.gap_max")


@dataclass
class ManifestRecord:
    utt_id: str
    speaker: str
    emotion: str
    sentence: int
    wav: str
    factors: dict = field(default_factory=dict)

    def factor_record(self) -> SyntheticFactors:
        return SyntheticFactors(**self.factors)


def draw_speakers(cfg: CorpusConfig, rng: np.random.Generator) -> list[dict]:
    """Speaker factors; base F0s are stratified on a log grid so speakers stay apart."""
    grid = np.linspace(np.log(cfg.f0_low), np.log(cfg.f0_high), cfg.speakers)
    order = rng.permutation(cfg.speakers)
    out = []
    for i in range(cfg.speakers):
        out.append(
            dict(
                base_logf0=float(grid[order[i]] + rng.uniform(-0.02, 0.02)),
                pitch_range=float(rng.uniform(0.08, 0.12)),
                formant_scale=float(rng.uniform(0.88, 1.15)),
                tilt_db=float(rng.uniform(-2.0, 2.0)),
            )
        )
    return out


def draw_emotions(cfg: CorpusConfig, rng: np.random.Generator) -> dict[str, dict]:
    out = {}
    for name in cfg.emotions:
        off, gain, shape, tilt, bw = EMOTION_PROTOTYPES[name]
        out[name] = dict(
            f0_offset=float(off + rng.uniform(-0.01, 0.01)),
            range_gain=float(gain * np.exp(rng.uniform(-0.05, 0.05))),
            contour_shape=int(shape),
            tilt_offset_db=float(tilt + rng.uniform(-0.3, 0.3)),
            bandwidth_scale=float(bw * np.exp(rng.uniform(-0.03, 0.03))),
        )
    return out


def draw_sentences(cfg: CorpusConfig, rng: np.random.Generator) -> list[dict]:
    out = []
    for _ in range(cfg.sentences):
        n = cfg.vowels_per_sentence
        out.append(
            dict(
                content=[int(v) for v in rng.integers(0, len(VOWELS), n)],
                rhythm=[int(d) for d in rng.integers(cfg.seg_min, cfg.seg_max + 1, n)],
                gaps=[int(g) for g in rng.integers(cfg.gap_min, cfg.gap_max + 1, n - 1)],
            )
        )
    return out


def utterance_id(spk: int, emotion: str, sentence: int) -> str:
    return f"spk{spk}_{emotion}_{sentence:03d}"


def make_corpus(cfg: CorpusConfig, seed: int, out_dir) -> list[ManifestRecord]:
    """Render the full speakers x emotions x sentences grid to WAV + a JSON-lines manifest."""
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    speakers = draw_speakers(cfg, rng)
    emotions = draw_emotions(cfg, rng)
    sentences = draw_sentences(cfg, rng)

    records = []
    for si, spk in enumerate(speakers):
        for emotion in cfg.emotions:
            for k, sent in enumerate(sentences):
                factors = SyntheticFactors(**sent, **spk, **emotions[emotion])
                uid = utterance_id(si, emotion, k)
                utt_seed = int(rng.integers(0, 2**63 - 1))
                w, _ = generate_utterance(factors, utt_seed)
                rel = f"wav/{uid}.wav"
                save_wav(out_dir / rel, w)
                records.append(ManifestRecord(uid, f"spk{si}", emotion, k, rel, asdict(factors)))
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


def write_manifest(path, records: list[ManifestRecord]) -> None:
    lines = [json.dumps(asdict(r), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[ManifestRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(ManifestRecord(**json.loads(line)))
    return out
