"""Experiment configuration: one INI file, validated at load time.

Fixed sections map onto dataclasses; ``[tables]`` (encoder layer specs
``conv_layers, conv_dim, groups, lstm_layers, lstm_dim, downsample``) and
``[va_table]`` (``valence, arousal`` per emotion) take free keys.
Unknown sections and keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import signal as sig
from .decoder import NetworkConfig
from .encoders import EMOTION_SPECS, MULTI_CHANNEL_SPECS, EncoderSpec
from .resample import RRConfig
from .synthcorpus import CorpusConfig
from .training import DEFAULT_VA_TABLE, ConfigError, TrainConfig, va_coordinates


@dataclass
class RunSection:
    seed: int = 0
    dir: str = "run"


@dataclass
class PathsSection:
    """Output locations; relative paths live under the run directory."""

    corpus: str = "corpus"
    cache: str = "cache"
    checkpoints: str = "checkpoints"
    reports: str = "reports"


@dataclass
class CorpusSection:
    speakers: int = 4
    emotions: tuple = ("neutral", "happy", "sad", "angry")
    sentences: int = 12
    vowels_per_sentence: int = 5
    seg_min: int = 6
    seg_max: int = 12
    gap_min: int = 2
    gap_max: int = 4
    f0_low: float = 95.0
    f0_high: float = 280.0
    holdout: int = 2


@dataclass
class FeaturesSection:
    n_mels: int = sig.N_MELS
    mcep_order: int = sig.MCEP_ORDER
    f0_min: float = sig.F0_MIN
    f0_max: float = sig.F0_MAX
    voicing_threshold: float = sig.VOICING_THRESHOLD


@dataclass
class RRSection:
    seg_len_min: int = 8
    seg_len_max: int = 32
    stretch_min: float = 0.5
    stretch_max: float = 1.5


@dataclass
class ModelSection:
    width_scale: float = 0.125
    decoder_hidden: int = 96
    decoder_layers: int = 3


@dataclass
class TrainSection:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    lambda1: float = 1.0
    lambda2: float = 1.0
    factor_losses: bool = True
    filter_epochs: int = 60
    filter_lr: float = 1e-3


@dataclass
class VASection:
    off_axis_max: float = 0.25
    on_axis_min: float = 0.5


@dataclass
class ConvertSection:
    write_wav: bool = False
    griffin_lim_iters: int = 60


@dataclass
class EvalSection:
    tsne_perplexity: float = 30.0
    tsne_iters: int = 1000


SECTIONS = {
    "run": RunSection,
    "paths": PathsSection,
    "corpus": CorpusSection,
    "features": FeaturesSection,
    "rr": RRSection,
    "model": ModelSection,
    "train": TrainSection,
    "va": VASection,
    "convert": ConvertSection,
    "eval": EvalSection,
}


def _default_tables() -> dict[str, EncoderSpec]:
    return {**MULTI_CHANNEL_SPECS, **EMOTION_SPECS}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    paths: PathsSection = field(default_factory=PathsSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    rr: RRSection = field(default_factory=RRSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    va: VASection = field(default_factory=VASection)
    convert: ConvertSection = field(default_factory=ConvertSection)
    eval: EvalSection = field(default_factory=EvalSection)
    tables: dict = field(default_factory=_default_tables)
    va_table: dict = field(default_factory=lambda: dict(DEFAULT_VA_TABLE))
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    # ------------------------------------------------------------ derived

    @property
    def run_dir(self) -> Path:
        return (self.base_dir / self.run.dir).resolve()

    def path(self, name: str) -> Path:
        return self.run_dir / getattr(self.paths, name)

    def corpus_config(self) -> CorpusConfig:
        c = self.corpus
        return CorpusConfig(
            c.speakers, tuple(c.emotions), c.sentences, c.vowels_per_sentence,
            c.seg_min, c.seg_max, c.gap_min, c.gap_max, c.f0_low, c.f0_high,
        )

    def network_config(self) -> NetworkConfig:
        m = self.model
        return NetworkConfig(
            n_mels=self.features.n_mels,
            mcep_order=self.features.mcep_order,
            width_scale=m.width_scale,
            decoder_hidden=m.decoder_hidden,
            decoder_layers=m.decoder_layers,
            tables=dict(self.tables),
        )

    def rr_config(self) -> RRConfig:
        r = self.rr
        return RRConfig(r.seg_len_min, r.seg_len_max, r.stretch_min, r.stretch_max)

    def train_config(self, stage: str = "joint") -> TrainConfig:
        t = self.train
        joint = stage == "joint"
        return TrainConfig(
            epochs=t.epochs if joint else t.filter_epochs,
            batch_size=t.batch_size,
            lr=t.lr if joint else t.filter_lr,
            lambda1=t.lambda1,
            lambda2=t.lambda2,
            factor_losses=t.factor_losses,
            seed=self.run.seed,
        )

    # --------------------------------------------------------- validation

    def validate(self) -> None:
        try:
            self.corpus_config().validate()
            self.rr_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        c = self.corpus
        if not 0 <= c.holdout < c.sentences:
            raise ConfigError("corpus.holdout must be >= 0 and < corpus.sentences")
        if not 0 < c.f0_low < c.f0_high:
            raise ConfigError("corpus.f0_low must be positive and below corpus.f0_high")
        f = self.features
        if f.n_mels < 2:
            raise ConfigError("features.n_mels must be >= 2")
        if not 1 <= f.mcep_order < f.n_mels:
            raise ConfigError("features.mcep_order must be in [1, features.n_mels)")
        if not 2 * sig.SAMPLE_RATE / sig.N_FFT <= f.f0_min < f.f0_max < sig.SAMPLE_RATE / 2:
            raise ConfigError(
                f"features.f0_min must be >= {2 * sig.SAMPLE_RATE / sig.N_FFT:g} Hz (two periods per frame) "
                "and below features.f0_max"
            )
        if not 0 < f.voicing_threshold < 1:
            raise ConfigError("features.voicing_threshold must be in (0, 1)")
        m = self.model
        if m.width_scale <= 0:
            raise ConfigError("model.width_scale must be > 0")
        if m.decoder_hidden < 1 or m.decoder_layers < 1:
            raise ConfigError("model.decoder_hidden and model.decoder_layers must be >= 1")
        missing = sorted(set(_default_tables()) - set(self.tables))
        if missing:
            raise ConfigError(f"tables: missing encoder specs {missing}")
        for name, spec in self.tables.items():
            try:
                spec.validate(f"tables.{name}")
            except ValueError as e:
                raise ConfigError(str(e)) from None
        self.train_config().validate()
        self.train_config("filter").validate()
        if self.train.filter_epochs < 1:
            raise ConfigError("train.filter_epochs must be >= 1")
        if self.va.off_axis_max <= 0 or self.va.on_axis_min <= 0:
            raise ConfigError("va thresholds must be > 0")
        for emo in self.va_table:
            va_coordinates(self.va_table, emo)
        absent = [e for e in c.emotions if e not in self.va_table]
        if absent:
            raise ConfigError(f"corpus.emotions {absent} have no va_table entry")
        if self.convert.griffin_lim_iters < 1:
            raise ConfigError("convert.griffin_lim_iters must be >= 1")
        if self.eval.tsne_perplexity <= 0 or self.eval.tsne_iters < 300:
            raise ConfigError("eval.tsne_perplexity must be > 0 and eval.tsne_iters >= 300")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, run=replace(self.run, seed=int(seed)))

    # ------------------------------------------------------ serialisation

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name in SECTIONS:
            sec = getattr(self, name)
            cp[name] = {f.name: _format(getattr(sec, f.name)) for f in fields(sec)}
        cp["tables"] = {
            k: ", ".join(str(x) for x in (s.conv_layers, s.conv_dim, s.groups, s.lstm_layers, s.lstm_dim, s.downsample))
            for k, s in self.tables.items()
        }
        cp["va_table"] = {k: f"{repr(float(v))}, {repr(float(a))}" for k, (v, a) in self.va_table.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _numbers(raw: str, n: int, kind, where: str) -> list:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != n:
        raise ConfigError(f"{where}: expected {n} comma-separated values, got {raw!r}")
    try:
        return [kind(p) for p in parts]
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from None


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}") from None
    cfg = ExperimentConfig(base_dir=base_dir or Path.cwd())
    allowed = set(SECTIONS) | {"tables", "va_table"}
    for section in cp.sections():
        if section not in allowed:
            raise ConfigError(f"unknown config section [{section}]")
    for name, cls in SECTIONS.items():
        if name not in cp:
            continue
        current = getattr(cfg, name)
        known = {f.name for f in fields(cls)}
        values = {}
        for key, raw in cp[name].items():
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}")
            values[key] = _parse(raw, getattr(current, key), f"{name}.{key}")
        setattr(cfg, name, replace(current, **values))
    if "tables" in cp:
        tables = dict(cfg.tables)
        for key, raw in cp["tables"].items():
            if key not in tables:
                raise ConfigError(f"unknown config key tables.{key}")
            tables[key] = EncoderSpec(*_numbers(raw, 6, int, f"tables.{key}"))
        cfg.tables = tables
    if "va_table" in cp:
        table = {}
        for key, raw in cp["va_table"].items():
            table[key] = tuple(_numbers(raw, 2, float, f"va_table.{key}"))
        cfg.va_table = table
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), base_dir=path.parent.resolve())


def default_config(base_dir: Path | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig(base_dir=base_dir or Path.cwd())
    cfg.validate()
    return cfg

