"""Objective metrics, factor recovery on synthetic data, and t-SNE."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import signal as sig
from .resample import linear_align

MCD_CONST = 10.0 / np.log(10.0) * np.sqrt(2.0)

ALIGNMENT_NOTE = "alignment: linear resampling of converted to reference length"
REPORT_COLUMNS = ("pair_id", "mcd_db", "f0_rmse_hz", "voiced_overlap")


@dataclass(frozen=True)
class MetricReport:
    mcd: float
    f0_rmse: float
    voiced_overlap: float
    n_frames: int

    def __post_init__(self):
        if self.mcd < 0 or not 0 <= self.voiced_overlap <= 1:
            raise ValueError("metric report out of range")


# ------------------------------------------------------------------ metrics


def mcd(ref: np.ndarray, conv: np.ndarray) -> float:
    """Mel-cepstral distortion in dB; ``conv`` is linearly aligned to ``ref``'s length.

    Inputs are ``T x D`` cepstra without the energy term c0.
    """
    ref = np.asarray(ref, dtype=float)
    conv = np.asarray(conv, dtype=float)
    if len(ref) == 0 or len(conv) == 0:
        raise ValueError("MCD of an empty sequence is undefined")
    if ref.ndim == 1:
        ref, conv = ref[:, None], conv[:, None]
    if ref.shape[1] != conv.shape[1]:
        raise ValueError(f"cepstral orders differ: {ref.shape[1]} vs {conv.shape[1]}")
    conv = linear_align(conv, len(ref))
    d = ref - conv
    return float(np.mean(MCD_CONST * np.sqrt(np.sum(d * d, axis=1))))


def align_contour(c: sig.PitchContour, n: int) -> sig.PitchContour:
    if len(c.f0) == n:
        return c
    f0 = linear_align(np.asarray(c.f0, dtype=float), n)
    voiced = linear_align(np.asarray(c.voiced, dtype=float), n) >= 0.5
    return sig.PitchContour(f0, voiced)


def f0_rmse(ref: sig.PitchContour, conv: sig.PitchContour) -> tuple[float, float]:
    """RMSE in Hz over frames voiced in both, and that count over the reference length.

    With no co-voiced frames the RMSE is ``nan`` (absent) and the overlap 0.
    """
    n = len(ref.f0)
    if n == 0 or len(conv.f0) == 0:
        raise ValueError("F0 RMSE of an empty contour is undefined")
    conv = align_contour(conv, n)
    both = np.asarray(ref.voiced, bool) & np.asarray(conv.voiced, bool)
    overlap = float(both.sum()) / n
    if not both.any():
        return float("nan"), 0.0
    d = np.asarray(ref.f0)[both] - np.asarray(conv.f0)[both]
    return float(np.sqrt(np.mean(d * d))), overlap


def metric_report(ref: sig.FeatureBundle, conv: sig.FeatureBundle) -> MetricReport:
    rmse, overlap = f0_rmse(sig.PitchContour(ref.f0, ref.voiced), sig.PitchContour(conv.f0, conv.voiced))
    return MetricReport(mcd(ref.mcep, conv.mcep), rmse, overlap, ref.n_frames)


def write_report(path, rows: list[tuple[str, MetricReport]]) -> None:
    """Per-pair CSV preceded by a comment line recording the alignment method."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {ALIGNMENT_NOTE}\n")
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for pair_id, r in rows:
            w.writerow([pair_id, f"{r.mcd:.6f}", "" if np.isnan(r.f0_rmse) else f"{r.f0_rmse:.6f}", f"{r.voiced_overlap:.6f}"])


def read_report(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------- factor proxies


def spectral_tilt(mel: np.ndarray, lo_hz: float = 200.0, hi_hz: float = 2500.0) -> float:
    """Slope (log-magnitude per octave) of the average log-mel spectrum of the loud frames.

    The band stops at 2.5 kHz because the synthetic voices reach the noise
    floor not far above it.
    """
    centres = sig.mel_to_hz(np.linspace(sig.hz_to_mel(sig.FMIN), sig.hz_to_mel(sig.FMAX), mel.shape[1] + 2))[1:-1]
    band = (centres >= lo_hz) & (centres <= hi_hz)
    loud = mel.max(axis=1) > np.log(sig.LOG_FLOOR) + 6.0
    if not loud.any():
        loud = np.ones(len(mel), bool)
    spec = mel[loud][:, band].mean(axis=0)
    slope, _ = np.polyfit(np.log2(centres[band]), spec, 1)
    return float(slope)


def mean_log_f0(mel: np.ndarray) -> float:
    """Mean log-F0 of the mel-proxy contour (nan when nothing is voiced)."""
    c = sig.mel_pitch_proxy(mel)
    return float(np.mean(np.log(c.f0[c.voiced]))) if c.voiced.any() else float("nan")


def factor_proxies(mel: np.ndarray) -> np.ndarray:
    """[mean log-F0, spectral tilt] read from a log-mel matrix."""
    return np.array([mean_log_f0(mel), spectral_tilt(mel)])


@dataclass
class Prototypes:
    """Proxy statistics of the ground-truth renditions.

    Emotion is judged on proxies centred by the mean over all emotions
    of the same speaker and sentence, which cancels the vowel content's
    effect on the tilt estimate.
    """

    by_utt: dict  # (speaker, emotion, sentence) -> proxy vector
    centre: dict  # (speaker, sentence) -> proxy vector averaged over emotions
    by_cell: dict  # (speaker, emotion) -> mean proxy vector
    emotion: dict  # emotion -> mean centred proxy vector
    scale: np.ndarray

    @classmethod
    def build(cls, bundles: list[sig.FeatureBundle], sentences: dict[str, int]) -> "Prototypes":
        by_utt = {(b.speaker, b.emotion, sentences[b.utt_id]): factor_proxies(b.mel) for b in bundles}
        groups: dict = {}
        cells: dict = {}
        for (spk, emo, k), v in by_utt.items():
            groups.setdefault((spk, k), []).append(v)
            cells.setdefault((spk, emo), []).append(v)
        centre = {k: np.nanmean(v, axis=0) for k, v in groups.items()}
        by_cell = {k: np.nanmean(v, axis=0) for k, v in cells.items()}
        centred = {k: v - centre[(k[0], k[2])] for k, v in by_utt.items()}
        emotions = sorted({k[1] for k in by_utt})
        emo = {e: np.nanmean([v for k, v in centred.items() if k[1] == e], axis=0) for e in emotions}
        scale = np.nanstd(np.array(list(centred.values())), axis=0) + 1e-9
        return cls(by_utt, centre, by_cell, emo, scale)

    @property
    def speakers(self) -> set:
        return {k[0] for k in self.by_cell}

    def classify_emotion(self, proxy: np.ndarray, speaker: str, sentence: int) -> str:
        z = (proxy - self.centre[(speaker, sentence)]) / self.scale
        names = sorted(self.emotion)
        d = [np.sum((z - self.emotion[e] / self.scale) ** 2) for e in names]
        return _nearest(names, d)

    def classify_speaker(self, proxy: np.ndarray, emotion: str) -> str:
        """Speaker whose renditions of ``emotion`` have the nearest mean log-F0."""
        names = sorted({s for s, e in self.by_cell if e == emotion})
        d = [abs(proxy[0] - self.by_cell[(s, emotion)][0]) for s in names]
        return _nearest(names, d)


def _nearest(names: list, dist: list) -> str | None:
    """Name at the smallest distance; ``None`` (a miss) when no distance is defined."""
    d = np.asarray(dist, dtype=float)
    if not np.isfinite(d).any():
        return None
    return names[int(np.argmin(np.where(np.isfinite(d), d, np.inf)))]


def content_correlation(mel: np.ndarray, target: np.ndarray) -> float:
    """Mean frame-wise Pearson correlation across mel bins over the target's loud frames."""
    conv = linear_align(mel, len(target))
    loud = target.max(axis=1) > np.log(sig.LOG_FLOOR) + 6.0
    if not loud.any():
        loud = np.ones(len(target), bool)
    a = conv[loud] - conv[loud].mean(axis=1, keepdims=True)
    b = target[loud] - target[loud].mean(axis=1, keepdims=True)
    num = np.sum(a * b, axis=1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + 1e-12
    return float(np.mean(num / den))


@dataclass
class Converted:
    """A converted utterance with the labels it should carry."""

    utt_id: str
    mel: np.ndarray
    speaker: str
    emotion: str
    sentence: int
    target_mel: np.ndarray


def factor_recovery(converted: list[Converted], prototypes: Prototypes) -> dict:
    """Emotion and speaker accuracy of nearest-prototype classification, plus content correlation."""
    if not converted:
        raise ValueError("nothing to score")
    emo_hits, spk_hits, corr = [], [], []
    for c in converted:
        if (c.speaker, c.sentence) not in prototypes.centre or c.emotion not in prototypes.emotion:
            raise ValueError(f"{c.utt_id}: {c.speaker}/{c.emotion}/sentence {c.sentence} is not in the manifest")
        p = factor_proxies(c.mel)
        emo_hits.append(prototypes.classify_emotion(p, c.speaker, c.sentence) == c.emotion)
        spk_hits.append(prototypes.classify_speaker(p, c.emotion) == c.speaker)
        corr.append(content_correlation(c.mel, c.target_mel))
    return {
        "emotion_accuracy": float(np.mean(emo_hits)),
        "speaker_accuracy": float(np.mean(spk_hits)),
        "content_correlation": float(np.mean(corr)),
        "n": len(converted),
    }


# --------------------------------------------------------------------- t-SNE


def f0_summary(pitch: np.ndarray, voiced: np.ndarray) -> np.ndarray:
    """Fixed-length summary of a normalised F0 contour (voiced frames only)."""
    v = np.asarray(pitch)[np.asarray(voiced, bool)]
    if len(v) < 2:
        return np.zeros(6)
    t = np.linspace(-1, 1, len(v))
    slope = np.polyfit(t, v, 1)[0]
    p10, p90 = np.percentile(v, [10, 90])
    return np.array([v.mean(), v.std(), p10, p90, slope, np.mean(np.abs(np.diff(v)))])


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    p = np.exp(-(d - d.min()) * beta)
    s = p.sum()
    p /= s
    h = -np.sum(p * np.log(np.maximum(p, 1e-300)))
    return h, p


def conditional_p(x: np.ndarray, perplexity: float, tol: float = 1e-6, max_iter: int = 100) -> np.ndarray:
    """Row-stochastic P(j|i) with each row's perplexity matched by bisection on the precision."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    sq = np.sum(x * x, axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    target = np.log(perplexity)
    p = np.zeros((n, n))
    for i in range(n):
        d = np.delete(dist[i], i)
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(max_iter):
            h, row = _row_entropy(d, beta)
            if abs(h - target) < tol:
                break
            if h > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (beta + hi) / 2
            else:
                hi = beta
                beta = (beta + lo) / 2
        p[i, np.arange(n) != i] = row
    return p


def _kl(p: np.ndarray, y: np.ndarray) -> float:
    sq = np.sum(y * y, axis=1)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2 * y @ y.T, 0.0))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    return float(np.sum(p * np.log(p / q)))


def tsne_embed(
    points: np.ndarray,
    perplexity: float = 30.0,
    iters: int = 1000,
    seed: int = 0,
    exaggeration: float = 12.0,
    exaggeration_iters: int = 250,
    learning_rate: float = 200.0,
    return_kl: bool = False,
):
    """Exact t-SNE to two dimensions.

    Gradient descent with momentum and per-coordinate gains; the first
    ``exaggeration_iters`` steps multiply P by ``exaggeration``. With
    ``return_kl`` also returns ``(kl_after_exaggeration, kl_final)``.
    """
    x = np.asarray(points, dtype=float)
    n = len(x)
    if n < 2 or n > 2000:
        raise ValueError(f"exact t-SNE needs 2 <= N <= 2000 points, got {n}")
    if not 0 < perplexity < n / 3:
        raise ValueError(f"perplexity must be in (0, N/3) = (0, {n / 3:.3g}), got {perplexity}")
    if iters <= exaggeration_iters:
        raise ValueError("iters must exceed the early-exaggeration phase")
    p = conditional_p(x, perplexity)
    p = np.maximum((p + p.T) / (2 * n), 1e-12)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    vel = np.zeros_like(y)
    gains = np.ones_like(y)
    kl_exag = None
    for it in range(iters):
        pe = p * exaggeration if it < exaggeration_iters else p
        sq = np.sum(y * y, axis=1)
        num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2 * y @ y.T, 0.0))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        w = (pe - q) * num
        grad = 4.0 * (np.diag(w.sum(axis=1)) - w) @ y
        mom = 0.5 if it < exaggeration_iters else 0.8
        same = np.sign(grad) == np.sign(vel)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        vel = mom * vel - learning_rate * gains * grad
        y = y + vel
        y = y - y.mean(axis=0)
        if it == exaggeration_iters - 1:
            kl_exag = _kl(p, y)
    if return_kl:
        return y, (kl_exag, _kl(p, y))
    return y


def silhouette(points: np.ndarray, labels) -> float:
    """Mean silhouette coefficient (0 for members of singleton clusters)."""
    x = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    names = np.unique(labels)
    if len(names) < 2:
        raise ValueError("silhouette needs at least two clusters")
    d = np.sqrt(np.maximum(np.sum((x[:, None] - x[None]) ** 2, axis=-1), 0.0))
    s = np.zeros(len(x))
    for i in range(len(x)):
        own = labels == labels[i]
        if own.sum() < 2:
            continue
        a = d[i, own].sum() / (own.sum() - 1)
        b = min(d[i, labels == k].mean() for k in names if k != labels[i])
        s[i] = (b - a) / max(a, b) if max(a, b) > 0 else 0.0
    return float(s.mean())


@dataclass
class Embedding:
    ids: list
    coords: np.ndarray
    labels: list
    summary: dict


def embedding_analysis(
    bundles, va_table: dict, perplexity: float = 30.0, iters: int = 1000, seed: int = 0, high_arousal: float = 0.25
) -> Embedding:
    """t-SNE of z-scored F0 summaries with arousal and speaker silhouettes.

    Perplexity is clamped below N/3 so small corpora still embed.
    """
    points = np.array([f0_summary(b.pitch, b.voiced) for b in bundles])
    std = points.std(axis=0)
    points = (points - points.mean(axis=0)) / np.where(std > 0, std, 1.0)
    perp = min(perplexity, (len(points) - 1) / 3.0)
    coords = tsne_embed(points, perp, iters, seed=seed)
    labels = [b.emotion for b in bundles]
    summary = {"n": len(points), "perplexity": perp}
    arousal = ["high" if va_table[e][1] > high_arousal else "low" for e in labels]
    if len(set(arousal)) > 1:
        summary["arousal_silhouette"] = silhouette(coords, arousal)
    speakers = [b.speaker for b in bundles]
    if len(set(speakers)) > 1:
        summary["speaker_silhouette"] = silhouette(coords, speakers)
    return Embedding([b.utt_id for b in bundles], coords, labels, summary)


def write_tsne(path, ids, coords: np.ndarray, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "label"])
        for i, (x, y), lab in zip(ids, coords, labels):
            w.writerow([i, f"{x:.6f}", f"{y:.6f}", lab])
