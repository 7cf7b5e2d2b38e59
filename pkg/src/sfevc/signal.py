"""Waveform I/O and acoustic feature extraction.

Everything here works on 16 kHz mono audio and shares one frame grid:
frame ``t`` is centred on sample ``t * hop`` and an utterance of ``L``
samples has ``ceil(L / hop)`` frames, so mel, pitch and timbre sequences
of one utterance always have the same length.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.linalg

SAMPLE_RATE = 16000
N_FFT = 1024
HOP = 256
N_MELS = 80
FMIN = 40.0
FMAX = 7600.0
MCEP_ORDER = 24
F0_MIN = 40.0
F0_MAX = 600.0
VOICING_THRESHOLD = 0.3
LOG_FLOOR = 1e-5

FEATURE_MAGIC = b"SFEVC-FEAT\x01"


class WavFormatError(ValueError):
    """The WAV file is well formed but not 16 kHz / mono / 16-bit PCM."""

    def __init__(self, field: str, value, expected):
        super().__init__(f"unsupported WAV {field}: {value} (expected {expected})")
        self.field = field


class WavParseError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class DegenerateSpeakerError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class PitchContour:
    f0: np.ndarray
    voiced: np.ndarray


@dataclass(frozen=True)
class PitchStats:
    """Per-speaker log-F0 statistics used for z-scoring."""

    mean: float
    std: float

    def normalize(self, contour: PitchContour) -> np.ndarray:
        out = np.zeros(len(contour.f0))
        v = contour.voiced
        out[v] = (np.log(contour.f0[v]) - self.mean) / self.std
        return out

    def denormalize(self, values: np.ndarray, voiced: np.ndarray) -> np.ndarray:
        """Map z-scored log-F0 back to log-F0 (0 on unvoiced frames)."""
        out = np.zeros(len(values))
        out[voiced] = values[voiced] * self.std + self.mean
        return out


@dataclass
class FeatureBundle:
    """Per-utterance features: log-mel X, pitch P and timbre U."""

    utt_id: str
    speaker: str
    emotion: str
    mel: np.ndarray
    f0: np.ndarray
    voiced: np.ndarray
    pitch: np.ndarray
    mcep: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]

    def pitch_input(self) -> np.ndarray:
        """The two-column [normalized log-F0, voiced flag] matrix fed to the pitch encoder."""
        return np.stack([self.pitch, self.voiced.astype(float)], axis=1)


# --------------------------------------------------------------------- WAV


def load_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            if rate != SAMPLE_RATE:
                raise WavFormatError("sample_rate", rate, SAMPLE_RATE)
            if channels != 1:
                raise WavFormatError("channels", channels, 1)
            if width != 2:
                raise WavFormatError("bit_depth", 8 * width, 16)
            raw = wf.readframes(n)
    except (wave.Error, EOFError, struct.error) as exc:
        raise WavParseError(f"{path}: {exc}") from exc
    if len(raw) != 2 * n:
        raise WavParseError(f"{path}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def save_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM; samples are clipped to [-1, 1) before quantisation."""
    if w.sample_rate != SAMPLE_RATE:
        raise WavFormatError("sample_rate", w.sample_rate, SAMPLE_RATE)
    q = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(q.tobytes())


# -------------------------------------------------------------------- STFT


def n_frames(n_samples: int, hop: int = HOP) -> int:
    return -(-n_samples // hop)


def _check_fft_geometry(win: int, hop: int) -> None:
    if win < 2 or win & (win - 1):
        raise ValueError(f"window length must be a power of two, got {win}")
    if hop < 1 or win % hop:
        raise ValueError(f"hop {hop} must divide window length {win}")


def stft(w: Waveform | np.ndarray, win: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Hann-windowed STFT with reflect padding, shape ``(ceil(L/hop), win//2 + 1)``."""
    _check_fft_geometry(win, hop)
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=float)
    if len(x) == 0:
        raise ValueError("cannot analyse an empty waveform")
    pad = win // 2
    xp = np.pad(x, pad, mode="reflect") if len(x) > 1 else np.pad(x, pad)
    t = n_frames(len(x), hop)
    idx = np.arange(t)[:, None] * hop + np.arange(win)[None, :]
    frames = xp[idx] * hann(win)
    return np.fft.rfft(frames, axis=1)


def hann(win: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)


def istft(spec: np.ndarray, hop: int = HOP, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    t, bins = spec.shape
    win = 2 * (bins - 1)
    pad = win // 2
    window = hann(win)
    frames = np.fft.irfft(spec, n=win, axis=1) * window
    total = (t - 1) * hop + win
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(t):
        out[i * hop : i * hop + win] += frames[i]
        norm[i * hop : i * hop + win] += window**2
    out /= np.maximum(norm, 1e-8)
    if length is None:
        length = t * hop
    out = out[pad : pad + length]
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out


# --------------------------------------------------------------------- mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    fmin: float = FMIN,
    fmax: float = FMAX,
    sr: int = SAMPLE_RATE,
) -> np.ndarray:
    """Area-normalised triangular filters, shape ``(n_mels, n_fft//2 + 1)``.

    Every row sums to one, so a flat spectrum maps to a flat mel vector.
    """
    if n_mels < 1:
        raise ValueError(f"n_mels must be >= 1, got {n_mels}")
    if not 0 <= fmin < fmax <= sr / 2:
        raise ValueError(f"need 0 <= fmin < fmax <= {sr / 2}, got {fmin}, {fmax}")
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    # narrow low filters can fall between bins; give them their nearest bin
    for m in np.flatnonzero(fb.sum(axis=1) == 0):
        fb[m, np.argmin(np.abs(freqs - mid[m, 0]))] = 1.0
    return fb / fb.sum(axis=1, keepdims=True)


def mel_spectrogram(
    stft_mag: np.ndarray,
    n_mels: int = N_MELS,
    fmin: float = FMIN,
    fmax: float = FMAX,
) -> np.ndarray:
    """Log-compressed mel energies ``log(fb @ |S| + 1e-5)``, shape ``(T, n_mels)``."""
    n_fft = 2 * (stft_mag.shape[1] - 1)
    fb = mel_filterbank(n_mels, n_fft, fmin, fmax)
    return np.log(np.abs(stft_mag) @ fb.T + LOG_FLOOR)


def extract_mcep(mel: np.ndarray, order: int = MCEP_ORDER) -> np.ndarray:
    """Mel-cepstra c_1..c_order: orthonormal DCT-II of each log-mel frame."""
    if order > mel.shape[1] - 1:
        raise ValueError(f"mcep order {order} exceeds n_mels - 1 = {mel.shape[1] - 1}")
    return scipy.fft.dct(mel, type=2, norm="ortho", axis=1)[:, 1 : order + 1]


# ---------------------------------------------------------------------- F0


def _nacf(frames: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lag-normalised autocorrelation of each row, plus the raw ACF and cumulative energy."""
    t, n = frames.shape
    spec = np.fft.rfft(frames, n=2 * n, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, axis=1)[:, :n]
    cs = np.concatenate([np.zeros((t, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    lags = np.arange(n)
    head = cs[:, n - lags]  # energy of x[0 : N-k]
    tail = cs[:, -1:] - cs[:, lags]  # energy of x[k : N]
    denom = np.sqrt(np.maximum(head * tail, 0.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 1e-10, acf / denom, 0.0)
    return r, acf, cs


def extract_f0(
    w: Waveform | np.ndarray,
    frame: int = N_FFT,
    hop: int = HOP,
    fmin: float = F0_MIN,
    fmax: float = F0_MAX,
    threshold: float = VOICING_THRESHOLD,
    sr: int = SAMPLE_RATE,
    lpc_order: int = 12,
) -> PitchContour:
    """Normalised-autocorrelation pitch tracker, one estimate per hop.

    For each frame the lag-normalised autocorrelation
    r(k) = sum x[n]x[n+k] / sqrt(E_head(k) E_tail(k)) decides voicing
    (peak over the [fmin, fmax] lags above ``threshold``). The lag itself
    is read from the same measure on the LPC-whitened frame, so a strong
    formant cannot pull the estimate onto one of its harmonics; the
    smallest-lag peak within 90 % of the best one wins, which suppresses
    octave-down errors. Isolated jumps away from the 5-frame voiced
    median are then replaced by it.
    """
    if frame < 2 * sr / fmin:
        raise ValueError(f"frame of {frame} samples is shorter than two periods of {fmin} Hz")
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=float)
    t = n_frames(len(x), hop)
    pad = frame // 2
    q = lpc_order
    xp = np.pad(x, (pad + q, pad + frame))
    idx = np.arange(t)[:, None] * hop + np.arange(frame + q)[None, :]
    ext = xp[idx]  # each frame with q samples of history
    ext = ext - ext[:, q:].mean(axis=1, keepdims=True)
    frames = ext[:, q:]
    r, acf, cs = _nacf(frames)

    # per-frame LPC inverse filter (1 % white-noise correction keeps it stable)
    white = np.zeros_like(frames)
    for i in range(t):
        if acf[i, 0] <= 1e-12:
            continue
        col = acf[i, : q + 1].copy()
        col[0] *= 1.01
        a = scipy.linalg.solve_toeplitz(col[:q], col[1 : q + 1])
        white[i] = frames[i] - sum(a[k] * ext[i, q - 1 - k : q - 1 - k + frame] for k in range(q))
    rw, _, _ = _nacf(white)

    lag_lo = int(math.floor(sr / fmax))
    lag_hi = min(int(math.ceil(sr / fmin)), frame - 2)
    energy = cs[:, -1] / frame
    f0 = np.zeros(t)
    voiced = np.zeros(t, dtype=bool)
    for i in range(t):
        if energy[i] < 1e-10 or r[i, lag_lo : lag_hi + 1].max() < threshold:
            continue
        seg = rw[i, lag_lo : lag_hi + 1]
        best = seg.max()
        peaks = np.flatnonzero((seg[1:-1] >= seg[:-2]) & (seg[1:-1] >= seg[2:]) & (seg[1:-1] >= 0.9 * best))
        k = (peaks[0] + 1 if len(peaks) else int(np.argmax(seg))) + lag_lo
        # parabolic refinement around the chosen lag
        a, b, c = rw[i, k - 1], rw[i, k], rw[i, k + 1]
        den = a - 2 * b + c
        shift = 0.5 * (a - c) / den if abs(den) > 1e-12 else 0.0
        hz = sr / (k + float(np.clip(shift, -0.5, 0.5)))
        if fmin <= hz <= fmax:
            f0[i] = hz
            voiced[i] = True
    return PitchContour(_median_voiced(f0, voiced), voiced)


def _median_voiced(f0: np.ndarray, voiced: np.ndarray, half: int = 2, jump: float = 0.2) -> np.ndarray:
    """Replace voiced frames that stray more than ``jump`` (relative) from the median of their voiced neighbours.

    Removes isolated octave and formant jumps while leaving smooth contours untouched.
    """
    out = f0.copy()
    for i in np.flatnonzero(voiced):
        lo, hi = max(0, i - half), i + half + 1
        med = np.median(f0[lo:hi][voiced[lo:hi]])
        if abs(f0[i] - med) > jump * med:
            out[i] = med
    return out


def speaker_pitch_stats(contours) -> PitchStats:
    logs = [np.log(c.f0[c.voiced]) for c in contours]
    vals = np.concatenate(logs) if logs else np.zeros(0)
    if len(vals) < 10:
        raise InsufficientDataError(f"only {len(vals)} voiced frames (need at least 10)")
    std = float(vals.std())
    if std < 1e-6:
        raise DegenerateSpeakerError(f"log-F0 standard deviation {std:.3g} is degenerate")
    return PitchStats(float(vals.mean()), std)


def normalize_pitch(contours_by_speaker: dict) -> tuple[dict, dict]:
    """Z-score voiced log-F0 per speaker.

    Returns ``(normalized, stats)`` where ``normalized[spk]`` lists one
    array per input contour (0 on unvoiced frames) and ``stats[spk]`` is
    the :class:`PitchStats` needed to invert the mapping.
    """
    normalized, stats = {}, {}
    for spk, contours in contours_by_speaker.items():
        st = speaker_pitch_stats(contours)
        stats[spk] = st
        normalized[spk] = [st.normalize(c) for c in contours]
    return normalized, stats


# ------------------------------------------------------- mel-domain pitch


def mel_pitch_proxy(
    mel: np.ndarray,
    fmin: float = 70.0,
    fmax: float = 450.0,
    threshold: float = 0.5,
) -> PitchContour:
    """Estimate F0 from a log-mel spectrogram by harmonic-comb matching.

    Used on decoder output, where no waveform exists. Candidate F0s on a
    fine log grid are rendered through the mel filterbank as harmonic
    combs below 2 kHz and correlated against the low-band log-mel
    envelope residual; the best candidate is refined parabolically.
    """
    n_mels = mel.shape[1]
    fb = mel_filterbank(n_mels)
    freqs = np.arange(fb.shape[1]) * SAMPLE_RATE / N_FFT
    top = int(np.searchsorted(mel_to_hz(np.linspace(hz_to_mel(FMIN), hz_to_mel(FMAX), n_mels + 2))[1:-1], 2000.0))
    cands = np.exp(np.linspace(np.log(fmin), np.log(fmax), 400))
    combs = np.zeros((len(cands), fb.shape[1]))
    for j, f in enumerate(cands):
        h = np.arange(1, int(2000 // f) + 1) * f
        combs[j] = np.exp(-0.5 * ((freqs[None, :] - h[:, None]) / 12.0) ** 2).sum(axis=0)
    tmpl = np.log(combs @ fb[:top].T + 1e-3)
    tmpl -= _smooth_rows(tmpl)
    tmpl /= np.linalg.norm(tmpl, axis=1, keepdims=True) + 1e-12

    low = mel[:, :top]
    resid = low - _smooth_rows(low)
    norm = np.linalg.norm(resid, axis=1)
    score = (resid @ tmpl.T) / (norm[:, None] + 1e-12)
    best = np.argmax(score, axis=1)
    f0 = np.zeros(len(mel))
    voiced = np.zeros(len(mel), dtype=bool)
    loud = mel[:, :top].max(axis=1) > np.log(LOG_FLOOR) + 6.0
    for i, j in enumerate(best):
        if score[i, j] < threshold or not loud[i]:
            continue
        shift = 0.0
        if 0 < j < len(cands) - 1:
            a, b, c = score[i, j - 1], score[i, j], score[i, j + 1]
            den = a - 2 * b + c
            shift = float(np.clip(0.5 * (a - c) / den, -0.5, 0.5)) if abs(den) > 1e-12 else 0.0
        step = np.log(cands[1] / cands[0])
        f0[i] = cands[j] * np.exp(shift * step)
        voiced[i] = True
    return PitchContour(f0, voiced)


def _smooth_rows(a: np.ndarray, width: int = 7) -> np.ndarray:
    k = np.ones(width) / width
    padded = np.pad(a, ((0, 0), (width // 2, width // 2)), mode="edge")
    return np.stack([np.convolve(row, k, mode="valid") for row in padded])


# ------------------------------------------------------------ Griffin-Lim


def mel_to_linear(mel: np.ndarray, n_fft: int = N_FFT) -> np.ndarray:
    """Invert log-mel to linear magnitude with the filterbank pseudo-inverse, clipped at 0."""
    fb = mel_filterbank(mel.shape[1], n_fft)
    energy = np.maximum(np.exp(mel) - LOG_FLOOR, 0.0)
    return np.maximum(energy @ np.linalg.pinv(fb).T, 0.0)


def griffin_lim(
    magnitude: np.ndarray,
    iters: int = 60,
    hop: int = HOP,
    length: int | None = None,
    is_mel: bool = False,
    return_errors: bool = False,
):
    """Recover a waveform whose STFT magnitude approximates ``magnitude``.

    Starts from zero phase. With ``return_errors`` the Frobenius magnitude
    error after each iteration is returned alongside the waveform.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    target = mel_to_linear(magnitude) if is_mel else np.asarray(magnitude, dtype=float)
    if length is None:
        length = target.shape[0] * hop
    win = 2 * (target.shape[1] - 1)
    spec = target.astype(complex)
    errors = []
    x = np.zeros(length)
    for _ in range(iters):
        x = istft(spec, hop, length)
        rebuilt = stft(x, win, hop)
        errors.append(float(np.linalg.norm(np.abs(rebuilt) - target)))
        spec = target * np.exp(1j * np.angle(rebuilt))
    out = Waveform(np.clip(x, -1.0, 1.0))
    return (out, errors) if return_errors else out


# ---------------------------------------------------------- full analysis


def analyze(w: Waveform) -> tuple[np.ndarray, PitchContour, np.ndarray]:
    """Mel, pitch contour and mel-cepstra for one waveform, on a shared frame grid."""
    mag = np.abs(stft(w))
    mel = mel_spectrogram(mag)
    contour = extract_f0(w)
    return mel, contour, extract_mcep(mel)


# ---------------------------------------------------------- feature cache


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def write_features(path, bundle: FeatureBundle) -> None:
    """Serialise a bundle as named float32 little-endian matrices."""
    mats = {
        "mel": bundle.mel,
        "pitch": bundle.pitch[:, None],
        "voiced": bundle.voiced.astype(float)[:, None],
        "mcep": bundle.mcep,
        "f0": bundle.f0[:, None],
    }
    parts = [FEATURE_MAGIC, _pack_str(bundle.utt_id), _pack_str(bundle.speaker), _pack_str(bundle.emotion)]
    parts.append(struct.pack("<I", len(mats)))
    for name, m in mats.items():
        m = np.ascontiguousarray(m, dtype="<f4")
        parts.append(_pack_str(name) + struct.pack("<II", *m.shape) + m.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_features(path) -> FeatureBundle:
    data = Path(path).read_bytes()
    if not data.startswith(FEATURE_MAGIC):
        raise ValueError(f"{path}: not a feature cache file")
    pos = len(FEATURE_MAGIC)

    def take_str():
        nonlocal pos
        (n,) = struct.unpack_from("<H", data, pos)
        s = data[pos + 2 : pos + 2 + n].decode("utf-8")
        pos += 2 + n
        return s

    utt, spk, emo = take_str(), take_str(), take_str()
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    mats = {}
    for _ in range(count):
        name = take_str()
        rows, cols = struct.unpack_from("<II", data, pos)
        pos += 8
        nbytes = 4 * rows * cols
        if pos + nbytes > len(data):
            raise ValueError(f"{path}: truncated matrix {name!r}")
        mats[name] = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64)
        pos += nbytes
    return FeatureBundle(
        utt_id=utt,
        speaker=spk,
        emotion=emo,
        mel=mats["mel"],
        f0=mats["f0"][:, 0],
        voiced=mats["voiced"][:, 0] > 0.5,
        pitch=mats["pitch"][:, 0],
        mcep=mats["mcep"],
    )
