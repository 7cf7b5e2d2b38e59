"""Random resampling (RR) and deterministic time resampling.

RR cuts a sequence into segments of random length and stretches or
squeezes each one by a random factor with linear interpolation. It
keeps frame values but scrambles timing, which is what lets it act as a
rhythm bottleneck in front of the content and pitch encoders.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .neural.autograd import Tensor, gather_time, lerp_time


@dataclass(frozen=True)
class RRConfig:
    seg_len_min: int = 8
    seg_len_max: int = 32
    stretch_min: float = 0.5
    stretch_max: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.seg_len_min <= self.seg_len_max:
            raise ValueError(f"need 1 <= seg_len_min <= seg_len_max, got {self.seg_len_min}, {self.seg_len_max}")
        if not 0 < self.stretch_min <= self.stretch_max:
            raise ValueError(f"need 0 < stretch_min <= stretch_max, got {self.stretch_min}, {self.stretch_max}")

    def with_seed(self, seed: int) -> "RRConfig":
        return RRConfig(self.seg_len_min, self.seg_len_max, self.stretch_min, self.stretch_max, int(seed))


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from integers (global seed, epoch, example id, ...)."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def rr_plan(t: int, cfg: RRConfig) -> np.ndarray:
    """Source position (fractional frame index) of every output frame.

    Output boundaries are the rounded cumulative stretched lengths, so
    the total length is ``round(sum(len_i * s_i))`` and an all-ones
    stretch reproduces the input grid exactly.
    """
    if t < 1:
        raise ValueError("cannot resample an empty sequence")
    rng = np.random.default_rng(cfg.seed)
    positions = []
    start, acc, emitted = 0, 0.0, 0
    while start < t:
        seg = min(int(rng.integers(cfg.seg_len_min, cfg.seg_len_max + 1)), t - start)
        s = float(rng.uniform(cfg.stretch_min, cfg.stretch_max)) if cfg.stretch_max > cfg.stretch_min else cfg.stretch_min
        acc += seg * s
        n = int(np.floor(acc + 0.5)) - emitted
        if n > 0:
            local = np.linspace(0.0, seg - 1, n) if n > 1 else np.array([(seg - 1) / 2.0])
            positions.append(start + local)
            emitted += n
        start += seg
    if not positions:
        return np.array([(t - 1) / 2.0])
    return np.concatenate(positions)


def _interp_rows(seq: np.ndarray, pos: np.ndarray) -> np.ndarray:
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(seq) - 1)
    w = (pos - lo)[:, None]
    exact = w[:, 0] == 0
    out = seq[lo] * (1 - w) + seq[hi] * w
    out[exact] = seq[lo[exact]]
    return out


def random_resample(seq: np.ndarray, cfg: RRConfig) -> np.ndarray:
    seq = np.asarray(seq, dtype=float)
    if seq.ndim == 1:
        seq = seq[:, None]
    if len(seq) == 0:
        raise ValueError("cannot resample an empty sequence")
    return _interp_rows(seq, rr_plan(len(seq), cfg))


def downsample_time(seq: np.ndarray, factor: int) -> np.ndarray:
    """Keep every ``factor``-th frame starting at 0."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return np.asarray(seq)[::factor]


def upsample_index(t: int, target: int) -> np.ndarray:
    """Nearest-frame source index for each of ``target`` output frames."""
    if target < t:
        raise ValueError(f"cannot upsample {t} frames to {target}")
    return (np.arange(target) * t) // target


def upsample_time(seq: np.ndarray, target_t: int) -> np.ndarray:
    seq = np.asarray(seq)
    return seq[upsample_index(len(seq), target_t)]


def linear_align(seq: np.ndarray, n: int) -> np.ndarray:
    """Linearly resample ``seq`` along time to ``n`` frames; a no-op when lengths match."""
    seq = np.asarray(seq)
    if len(seq) == n:
        return seq
    if len(seq) == 0 or n < 1:
        raise ValueError("cannot align empty sequences")
    squeeze = seq.ndim == 1
    s2 = seq[:, None] if squeeze else seq
    pos = np.linspace(0.0, len(seq) - 1, n) if n > 1 else np.zeros(1)
    out = _interp_rows(s2.astype(float), pos)
    return out[:, 0] if squeeze else out


# -------------------------------------------------- batched tensor versions


def downsample_batch(x: Tensor, lengths: np.ndarray, factor: int) -> tuple[Tensor, np.ndarray]:
    t = x.shape[1]
    out_t = -(-t // factor)
    idx = np.broadcast_to(np.arange(out_t) * factor, (x.shape[0], out_t))
    return gather_time(x, idx), -(-np.asarray(lengths) // factor)


def upsample_batch(x: Tensor, lengths: np.ndarray, targets: np.ndarray) -> Tensor:
    """Nearest-frame upsampling of each example from ``lengths[b]`` to ``targets[b]`` frames."""
    targets = np.asarray(targets)
    lengths = np.asarray(lengths)
    if np.any(lengths > targets):
        raise ValueError("code is longer than the requested output length")
    out_t = int(targets.max())
    ar = np.arange(out_t)[None, :]
    idx = np.minimum((ar * lengths[:, None]) // targets[:, None], lengths[:, None] - 1)
    idx = np.where(ar < targets[:, None], idx, 0)
    out = gather_time(x, idx)
    m = (ar < targets[:, None]).astype(float)[..., None]
    return out * m


def align_batch(x: Tensor, lengths: np.ndarray, targets: np.ndarray) -> Tensor:
    """Linear time alignment of each example from ``lengths[b]`` to ``targets[b]`` frames."""
    lengths = np.asarray(lengths)
    targets = np.asarray(targets)
    out_t = int(targets.max())
    ar = np.arange(out_t)[None, :].astype(float)
    denom = np.maximum(targets[:, None] - 1, 1)
    pos = ar * (lengths[:, None] - 1) / denom
    pos = np.where(ar < targets[:, None], np.minimum(pos, lengths[:, None] - 1), 0.0)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, lengths[:, None] - 1)
    out = lerp_time(x, lo, hi, pos - lo)
    m = (ar < targets[:, None]).astype(float)[..., None]
    return out * m
