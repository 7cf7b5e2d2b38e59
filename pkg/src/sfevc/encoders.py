"""Multi-channel and emotion-separate bottleneck encoders.

Every encoder is the same stack: ``conv_layers`` x (conv1d -> group norm
-> ReLU), then ``lstm_layers`` BLSTMs of ``lstm_dim`` units per direction,
then keep every 8th frame. The narrow BLSTM and the downsampling form
the information bottleneck, so a code has ``2 * lstm_dim`` channels and
``ceil(T / 8)`` frames.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .neural import ModelParams, Tensor, blstm, concat, conv1d, group_norm, relu
from .resample import align_batch, downsample_batch

KERNEL = 5


@dataclass(frozen=True)
class EncoderSpec:
    conv_layers: int
    conv_dim: int
    groups: int
    lstm_layers: int
    lstm_dim: int
    downsample: int = 8

    @property
    def code_dim(self) -> int:
        return 2 * self.lstm_dim

    def validate(self, name: str = "encoder") -> None:
        if min(self.conv_layers, self.lstm_layers, self.lstm_dim, self.downsample) < 1:
            raise ValueError(f"{name}: layer counts, BLSTM dim and downsample factor must be >= 1")
        if self.conv_dim % self.groups:
            raise ValueError(f"{name}: {self.groups} norm groups do not divide conv dim {self.conv_dim}")

    def scaled(self, factor: float) -> "EncoderSpec":
        """Shrink conv width by ``factor`` keeping it a multiple of the group count."""
        per_group = max(1, int(round(self.conv_dim * factor / self.groups)))
        return replace(self, conv_dim=per_group * self.groups)


# Multi-channel encoders: rhythm, content, pitch.
MULTI_CHANNEL_SPECS = {
    "rhythm": EncoderSpec(1, 128, 8, 1, 1),
    "content": EncoderSpec(3, 512, 32, 2, 8),
    "pitch": EncoderSpec(1, 128, 8, 1, 16),
}

# Emotion-separate encoders: speaker-dependent (s) and speaker-independent (ts)
# paths for timbre (u) and pitch codes (zf).
EMOTION_SPECS = {
    "u_s": EncoderSpec(3, 512, 32, 2, 8),
    "u_ts": EncoderSpec(3, 256, 8, 1, 16),
    "zf_s": EncoderSpec(1, 128, 8, 1, 4),
    "zf_ts": EncoderSpec(3, 256, 16, 1, 8),
}

EMOTION_ENCODERS = ("u_s", "u_ts", "zf_s", "zf_ts")


def encoder_prefix(name: str) -> str:
    return f"enc.emo.{name}" if name in EMOTION_ENCODERS else f"enc.{name}"


def init_encoder(params: ModelParams, prefix: str, spec: EncoderSpec, in_dim: int, kernel: int = KERNEL) -> None:
    spec.validate(prefix)
    c = in_dim
    for i in range(spec.conv_layers):
        params.uniform(f"{prefix}.conv{i}.weight", (kernel, c, spec.conv_dim), kernel * c)
        params.uniform(f"{prefix}.conv{i}.bias", (spec.conv_dim,), kernel * c)
        params.ones(f"{prefix}.norm{i}.gamma", (spec.conv_dim,))
        params.zeros(f"{prefix}.norm{i}.beta", (spec.conv_dim,))
        c = spec.conv_dim
    h = spec.lstm_dim
    for i in range(spec.lstm_layers):
        params.uniform(f"{prefix}.lstm{i}.wx", (2, c, 4 * h), h)
        params.uniform(f"{prefix}.lstm{i}.wh", (2, h, 4 * h), h)
        params.uniform(f"{prefix}.lstm{i}.b", (2, 4 * h), h)
        c = 2 * h


def run_encoder(
    params: dict, prefix: str, spec: EncoderSpec, x: Tensor, lengths: np.ndarray
) -> tuple[Tensor, np.ndarray]:
    """Apply one encoder stack to a padded batch; returns ``(code, code_lengths)``."""
    expected = params[f"{prefix}.conv0.weight"].shape[1]
    if x.shape[-1] != expected:
        raise ValueError(f"{prefix}: expected {expected} input channels, got {x.shape[-1]}")
    h = x
    for i in range(spec.conv_layers):
        h = conv1d(h, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"], lengths)
        h = group_norm(h, spec.groups, params[f"{prefix}.norm{i}.gamma"], params[f"{prefix}.norm{i}.beta"], lengths=lengths)
        h = relu(h)
    for i in range(spec.lstm_layers):
        h = blstm(h, params[f"{prefix}.lstm{i}.wx"], params[f"{prefix}.lstm{i}.wh"], params[f"{prefix}.lstm{i}.b"], lengths)
    return downsample_batch(h, lengths, spec.downsample)


def run_pair_encoder(
    params: dict,
    prefix: str,
    spec: EncoderSpec,
    a: Tensor,
    a_len: np.ndarray,
    b: Tensor,
    b_len: np.ndarray,
) -> tuple[Tensor, np.ndarray]:
    """Two-input encoder: ``b`` is linearly aligned to ``a``'s length and stacked on channels."""
    if np.any(np.asarray(a_len) < 1) or np.any(np.asarray(b_len) < 1):
        raise ValueError(f"{prefix}: both inputs must be non-empty")
    b_al = align_batch(b, b_len, a_len)
    if b_al.shape[1] < a.shape[1]:
        b_al = concat([b_al, Tensor(np.zeros((b_al.shape[0], a.shape[1] - b_al.shape[1], b_al.shape[2])))], axis=1)
    return run_encoder(params, prefix, spec, concat([a, b_al], axis=-1), a_len)


def pad_batch(seqs: list[np.ndarray]) -> tuple[Tensor, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    out = np.zeros((len(seqs), int(lengths.max()), seqs[0].shape[1]))
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return Tensor(out), lengths
