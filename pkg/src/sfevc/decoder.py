"""Decoder and the assembled conversion model.

The decoder nearest-upsamples six codes to the source frame rate,
concatenates them in the order (rhythm, content, independent pitch,
dependent pitch, independent timbre, dependent timbre), runs three
BLSTM layers and projects to mel bins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import signal as sig
from .encoders import (
    EMOTION_ENCODERS,
    EMOTION_SPECS,
    KERNEL,
    MULTI_CHANNEL_SPECS,
    EncoderSpec,
    encoder_prefix,
    init_encoder,
    pad_batch,
    run_encoder,
    run_pair_encoder,
)
from .neural import ModelParams, Tensor, blstm, concat, length_mask, linear
from .neural.params import load_checkpoint, save_checkpoint
from .resample import RRConfig, align_batch, random_resample, upsample_batch

# decoder input order and the code each slot comes from
DECODER_INPUTS = ("rhythm", "content", "zf_ts", "zf_s", "u_ts", "u_s")

# factor heads: (name, source code, target width)
FACTOR_HEADS = (("pi", "zf_ts"), ("ti", "u_ts"), ("pd", "zf_s"), ("td", "u_s"))
FACTOR_DIM = 2


@dataclass(frozen=True)
class NetworkConfig:
    n_mels: int = sig.N_MELS
    mcep_order: int = sig.MCEP_ORDER
    width_scale: float = 1.0
    decoder_hidden: int = 256
    decoder_layers: int = 3
    kernel: int = KERNEL
    tables: dict = field(default_factory=lambda: {**MULTI_CHANNEL_SPECS, **EMOTION_SPECS})

    def spec(self, name: str) -> EncoderSpec:
        base = self.tables[name]
        return base if self.width_scale == 1.0 else base.scaled(self.width_scale)

    @property
    def decoder_in(self) -> int:
        return sum(self.spec(n).code_dim for n in DECODER_INPUTS)


@dataclass
class FeatureStats:
    """Input scaling fitted on training data.

    Mel bins are centred per bin but share one scale, so the reconstruction
    loss weighs bins by their log-domain error and the near-silent upper
    bins do not count as much as the formant region. Mcep is z-scored per
    coefficient.
    """

    mel_mean: np.ndarray
    mel_std: np.ndarray
    mcep_mean: np.ndarray
    mcep_std: np.ndarray

    @classmethod
    def identity(cls, n_mels: int, order: int) -> "FeatureStats":
        return cls(np.zeros(n_mels), np.ones(n_mels), np.zeros(order), np.ones(order))

    @classmethod
    def fit(cls, bundles) -> "FeatureStats":
        mel = np.concatenate([b.mel for b in bundles])
        mc = np.concatenate([b.mcep for b in bundles])
        mel_mean = mel.mean(0)
        mel_std = np.full_like(mel_mean, np.sqrt(np.mean((mel - mel_mean) ** 2)) + 1e-3)
        return cls(mel_mean, mel_std, mc.mean(0), mc.std(0) + 1e-3)

    def mel_in(self, mel):
        return (mel - self.mel_mean) / self.mel_std

    def mel_out(self, z):
        return z * self.mel_std + self.mel_mean

    def mcep_in(self, mc):
        return (mc - self.mcep_mean) / self.mcep_std

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"stats.{k}": v for k, v in vars(self).items()}


@dataclass
class Codes:
    """Codes of one batch, each a padded ``(B, L, D)`` tensor with its lengths."""

    values: dict = field(default_factory=dict)
    lengths: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.values[name]


class SFEVC:
    """Seven bottleneck encoders, a BLSTM decoder and four factor heads."""

    def __init__(self, cfg: NetworkConfig | None = None, seed: int = 0, rr: RRConfig | None = None):
        self.cfg = cfg or NetworkConfig()
        self.rr = rr or RRConfig()
        self.params = ModelParams(seed)
        self.stats = FeatureStats.identity(self.cfg.n_mels, self.cfg.mcep_order)
        c = self.cfg
        p = self.params
        in_dims = {
            "rhythm": c.n_mels,
            "content": c.n_mels,
            "pitch": 2,
            "u_s": 2 * c.mcep_order,
            "u_ts": 2 * c.mcep_order,
            "zf_s": 2 * c.spec("pitch").code_dim,
            "zf_ts": 2 * c.spec("pitch").code_dim,
        }
        for name in ("rhythm", "content", "pitch") + EMOTION_ENCODERS:
            init_encoder(p, encoder_prefix(name), c.spec(name), in_dims[name], c.kernel)
        d_in, h = c.decoder_in, c.decoder_hidden
        for i in range(c.decoder_layers):
            p.uniform(f"dec.lstm{i}.wx", (2, d_in, 4 * h), h)
            p.uniform(f"dec.lstm{i}.wh", (2, h, 4 * h), h)
            p.uniform(f"dec.lstm{i}.b", (2, 4 * h), h)
            d_in = 2 * h
        p.uniform("dec.out.weight", (d_in, c.n_mels), d_in)
        p.uniform("dec.out.bias", (c.n_mels,), d_in)
        for head, code in FACTOR_HEADS:
            dim = c.spec(code).code_dim
            p.uniform(f"head.{head}.weight", (dim, FACTOR_DIM), dim)
            p.zeros(f"head.{head}.bias", (FACTOR_DIM,))

    # ------------------------------------------------------------ encoders

    def encode(self, name: str, x: Tensor, lengths) -> tuple[Tensor, np.ndarray]:
        return run_encoder(self.params, encoder_prefix(name), self.cfg.spec(name), x, np.asarray(lengths))

    def encode_pair(self, name: str, a, a_len, b, b_len) -> tuple[Tensor, np.ndarray]:
        return run_pair_encoder(
            self.params, encoder_prefix(name), self.cfg.spec(name), a, np.asarray(a_len), b, np.asarray(b_len)
        )

    # ------------------------------------------------------------- decoder

    def decode(self, codes: Codes, targets: np.ndarray, order: tuple = DECODER_INPUTS) -> Tensor:
        """Upsample each code to ``targets[b]`` frames, concatenate in ``order`` and run the BLSTM stack.

        ``order`` must match the row layout of ``dec.lstm0.wx``; it exists so
        a permuted layout can be checked against the default one.
        """
        if sorted(order) != sorted(DECODER_INPUTS):
            raise ValueError(f"order must be a permutation of {DECODER_INPUTS}")
        targets = np.asarray(targets)
        parts = []
        for name in order:
            lens = codes.lengths[name]
            if np.any(lens > targets):
                raise ValueError(f"code {name!r} has more frames than the output")
            parts.append(upsample_batch(codes[name], lens, targets))
        h = concat(parts, axis=-1)
        p = self.params
        for i in range(self.cfg.decoder_layers):
            h = blstm(h, p[f"dec.lstm{i}.wx"], p[f"dec.lstm{i}.wh"], p[f"dec.lstm{i}.b"], targets)
        out = linear(h, p["dec.out.weight"], p["dec.out.bias"])
        return out * length_mask(targets, out.shape[1])

    # ---------------------------------------------------------- composition

    def forward(
        self,
        src_mel: list[np.ndarray],
        src_pitch: list[np.ndarray],
        src_mcep: list[np.ndarray],
        ref_pitch: list[np.ndarray],
        ref_mcep: list[np.ndarray],
        oth_pitch: list[np.ndarray],
        oth_mcep: list[np.ndarray],
        rr_seeds: np.ndarray | None = None,
    ) -> tuple[Tensor, np.ndarray, Codes]:
        """Full conversion graph on normalised inputs.

        ``src_*`` is the utterance being converted, ``ref_*`` a reference
        in the target emotion from the same speaker (U^t, P^t) and
        ``oth_*`` a reference from another speaker in the source emotion
        (U^y, P^y). ``rr_seeds`` has shape ``(B, 4)``: seeds for random
        resampling of content, P, P^t and P^y. ``None`` disables RR.
        """
        bsz = len(src_mel)
        rr = self._rr_apply
        codes = Codes()
        x, t_src = pad_batch(src_mel)
        codes.values["rhythm"], codes.lengths["rhythm"] = self.encode("rhythm", x, t_src)

        # RR changes lengths; codes are aligned back to the nominal grid
        nominal = -(-t_src // self.cfg.spec("content").downsample)
        xc, lc = pad_batch([rr(m, rr_seeds, b, 0) for b, m in enumerate(src_mel)])
        zc, lzc = self.encode("content", xc, lc)
        codes.values["content"], codes.lengths["content"] = _fit(zc, lzc, nominal), nominal

        pitch_in = (
            [rr(p, rr_seeds, b, 1) for b, p in enumerate(src_pitch)]
            + [rr(p, rr_seeds, b, 2) for b, p in enumerate(ref_pitch)]
            + [rr(p, rr_seeds, b, 3) for b, p in enumerate(oth_pitch)]
        )
        xp, lp = pad_batch(pitch_in)
        zf, lzf = self.encode("pitch", xp, lp)
        l_s, l_t, l_y = lzf[:bsz], lzf[bsz : 2 * bsz], lzf[2 * bsz :]
        zf_s = _fit(_trim(zf[:bsz], l_s), l_s, -(-t_src // self.cfg.spec("pitch").downsample))
        l_s = -(-t_src // self.cfg.spec("pitch").downsample)
        zf_t = _trim(zf[bsz : 2 * bsz], l_t)
        zf_y = _trim(zf[2 * bsz :], l_y)
        # pair encoders run on the source timeline: (source side, aligned reference)
        codes.values["zf_ts"], codes.lengths["zf_ts"] = self.encode_pair("zf_ts", zf_s, l_s, zf_t, l_t)
        codes.values["zf_s"], codes.lengths["zf_s"] = self.encode_pair("zf_s", zf_s, l_s, zf_y, l_y)

        u, lu = pad_batch(src_mcep)
        ut, lut = pad_batch(ref_mcep)
        uy, luy = pad_batch(oth_mcep)
        codes.values["u_ts"], codes.lengths["u_ts"] = self.encode_pair("u_ts", u, lu, ut, lut)
        codes.values["u_s"], codes.lengths["u_s"] = self.encode_pair("u_s", u, lu, uy, luy)
        return self.decode(codes, t_src), t_src, codes

    def factor_predictions(self, codes: Codes) -> dict[str, Tensor]:
        """Linear read-out of each emotion-separate code (time-averaged) to its factor targets."""
        out = {}
        for head, code in FACTOR_HEADS:
            z, lens = codes[code], codes.lengths[code]
            w = length_mask(lens, z.shape[1]) / np.asarray(lens)[:, None, None]
            pooled = (z * w).sum(axis=1)
            out[head] = linear(pooled, self.params[f"head.{head}.weight"], self.params[f"head.{head}.bias"])
        return out

    def _rr_apply(self, seq, seeds, b, stream):
        if seeds is None:
            return seq
        return random_resample(seq, self.rr.with_seed(int(seeds[b, stream])))

    # ----------------------------------------------------------- bundles

    def bundle_inputs(self, bundle: sig.FeatureBundle):
        """(normalised mel, pitch matrix, normalised mcep) of one bundle."""
        return self.stats.mel_in(bundle.mel), bundle.pitch_input(), self.stats.mcep_in(bundle.mcep)

    # ---------------------------------------------------------- checkpoint

    def save(self, path, optimizer=None) -> None:
        arrays = dict(self.params)
        arrays.update({k: Tensor(v) for k, v in self.stats.arrays().items()})
        save_checkpoint(path, arrays, optimizer)

    def load(self, path):
        arrays, opt = load_checkpoint(path)
        stats = {k[len("stats.") :]: v for k, v in arrays.items() if k.startswith("stats.")}
        if stats:
            self.stats = FeatureStats(**stats)
        self.params.load({k: v for k, v in arrays.items() if not k.startswith("stats.")})
        return opt


def _fit(z: Tensor, lengths: np.ndarray, targets: np.ndarray) -> Tensor:
    if np.array_equal(lengths, targets):
        return z
    return align_batch(z, lengths, targets)


def _trim(z: Tensor, lengths: np.ndarray) -> Tensor:
    t = int(np.max(lengths))
    return z if z.shape[1] == t else z[:, :t]


def convert(
    model: SFEVC,
    source: sig.FeatureBundle,
    emotion_ref: sig.FeatureBundle,
    speaker_ref: sig.FeatureBundle | None = None,
    rr_seed: int | None = None,
) -> np.ndarray:
    """Convert ``source`` towards the emotion of ``emotion_ref``; returns a log-mel matrix.

    ``emotion_ref`` supplies the target-emotion timbre and pitch (U^t, P^t).
    ``speaker_ref`` is another speaker in the source emotion (U^y, P^y);
    when omitted the source itself is used. ``rr_seed`` enables random
    resampling of the content and pitch paths with a fixed seed.
    """
    if source is None or emotion_ref is None:
        raise ValueError("convert needs a source bundle and a target-emotion reference bundle")
    other = speaker_ref if speaker_ref is not None else source
    x, p, u = model.bundle_inputs(source)
    _, pt, ut = model.bundle_inputs(emotion_ref)
    _, py, uy = model.bundle_inputs(other)
    seeds = None if rr_seed is None else np.array([[rr_seed, rr_seed + 1, rr_seed + 2, rr_seed + 3]])
    out, _, _ = model.forward([x], [p], [u], [pt], [ut], [py], [uy], seeds)
    return model.stats.mel_out(out.data[0])
