"""Source-filter generator, corpus grid and factor identifiability."""

import dataclasses

import numpy as np
import pytest

from sfevc import signal as sig
from sfevc.evaluation import Prototypes, factor_proxies
from sfevc.synthcorpus import (
    CorpusConfig,
    SyntheticFactors,
    draw_emotions,
    draw_sentences,
    draw_speakers,
    f0_track,
    generate_utterance,
    make_corpus,
    read_manifest,
)


def flat(hz=150.0, frames=23, **kw):
    base = dict(
        content=[3], rhythm=[frames], gaps=[], base_logf0=float(np.log(hz)), pitch_range=0.0,
        f0_offset=0.0, range_gain=1.0, contour_shape=0, formant_scale=1.0, tilt_db=0.0,
        tilt_offset_db=0.0, bandwidth_scale=1.0,
    )
    base.update(kw)
    return SyntheticFactors(**base)


def test_flat_150hz_recovered():
    w, _ = generate_utterance(flat(), seed=0)
    assert abs(len(w) / sig.SAMPLE_RATE - 0.5) < 0.05
    c = sig.extract_f0(w)
    assert abs(np.median(c.f0[c.voiced]) - 150) <= 3


def test_same_seed_bit_identical():
    f = flat(content=[1, 4], rhythm=[9, 7], gaps=[3], pitch_range=0.1, contour_shape=1)
    a, _ = generate_utterance(f, 5)
    b, _ = generate_utterance(f, 5)
    c, _ = generate_utterance(f, 6)
    assert np.array_equal(a.samples, b.samples) and not np.array_equal(a.samples, c.samples)


@pytest.mark.parametrize(
    "kw",
    [
        dict(content=[], rhythm=[]),
        dict(rhythm=[1]),
        dict(formant_scale=3.0),
        dict(base_logf0=float(np.log(60.0))),
        dict(base_logf0=float(np.log(390.0)), f0_offset=0.2),
        dict(content=[99]),
        dict(content=[1, 2], rhythm=[5, 5], gaps=[]),
    ],
)
def test_out_of_range_factors_rejected(kw):
    with pytest.raises(ValueError):
        generate_utterance(flat(**kw), 0)


def test_contour_recovered_within_5hz():
    rng = np.random.default_rng(0)
    cfg = CorpusConfig()
    for spk, sent in zip(draw_speakers(cfg, rng), draw_sentences(cfg, rng)):
        for emo in draw_emotions(cfg, rng).values():
            f = SyntheticFactors(**sent, **spk, **emo)
            w, _ = generate_utterance(f, 1)
            want, v = f0_track(f)
            c = sig.extract_f0(w)
            both = v & c.voiced
            assert both.sum() >= 0.8 * v.sum()
            assert np.median(np.abs(c.f0[both] - want[both])) <= 5


def test_f0_offset_ratio():
    rng = np.random.default_rng(1)
    cfg = CorpusConfig()
    neutral = dict(f0_offset=0.0, range_gain=1.0, contour_shape=0, tilt_offset_db=0.0, bandwidth_scale=1.0)
    for spk in draw_speakers(cfg, rng):
        for sent in draw_sentences(cfg, rng)[:6]:
            f0 = SyntheticFactors(**sent, **spk, **neutral)
            f1 = dataclasses.replace(f0, f0_offset=0.3)
            means = []
            for f in (f0, f1):
                c = sig.extract_f0(generate_utterance(f, 2)[0])
                means.append(np.mean(c.f0[c.voiced]))
            assert 1.28 <= means[1] / means[0] <= 1.42


def test_small_grid_and_determinism(tmp_path):
    cfg = CorpusConfig(speakers=2, emotions=("neutral", "sad"), sentences=2)
    a = make_corpus(cfg, 7, tmp_path / "a")
    b = make_corpus(cfg, 7, tmp_path / "b")
    assert len(a) == 8 == len(read_manifest(tmp_path / "a" / "manifest.jsonl"))
    for r in a:
        assert (tmp_path / "a" / r.wav).read_bytes() == (tmp_path / "b" / r.wav).read_bytes()
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    rec = read_manifest(tmp_path / "a" / "manifest.jsonl")[3]
    assert rec.factor_record() == SyntheticFactors(**a[3].factors)


@pytest.mark.parametrize("kw", [dict(speakers=0), dict(sentences=0), dict(emotions=()), dict(emotions=("bored",))])
def test_empty_or_bad_grid(tmp_path, kw):
    with pytest.raises(ValueError):
        make_corpus(CorpusConfig(**kw), 0, tmp_path)


def test_default_grid_is_parallel(default_corpus):
    c = default_corpus
    assert len(c) == 192
    keys = {(b.speaker, b.emotion, c.sentences[b.utt_id]) for b in c.bundles}
    assert len(keys) == 192 and len(c.speakers) == 4 and len(c.emotions) == 4


def test_pitch_normalisation_over_corpus(default_corpus):
    for spk in default_corpus.speakers:
        v = np.concatenate([b.pitch[b.voiced] for b in default_corpus.bundles if b.speaker == spk])
        assert abs(v.mean()) < 0.05 and abs(v.var() - 1) < 0.1


def test_factor_identifiability(default_corpus):
    """Held-out sentences: emotion from speaker/sentence-centred proxies, speaker from raw log-F0."""
    c = default_corpus
    train = [b for b in c.bundles if c.sentences[b.utt_id] < 10]
    held = [b for b in c.bundles if c.sentences[b.utt_id] >= 10]
    protos = Prototypes.build(train, c.sentences)
    # the sentence centre only averages over renditions, it does not use labels
    protos.centre.update(Prototypes.build(held, c.sentences).centre)
    emo = spk = 0
    for b in held:
        p = factor_proxies(b.mel)
        emo += protos.classify_emotion(p, b.speaker, c.sentences[b.utt_id]) == b.emotion
        spk += protos.classify_speaker(p, b.emotion) == b.speaker
    assert emo / len(held) >= 0.9
    assert spk / len(held) >= 0.9
