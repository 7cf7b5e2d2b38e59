"""Losses, pairing, the epoch loop, direction filters and VA routing."""

import copy
import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfevc.decoder import FeatureStats, NetworkConfig, SFEVC, convert
from sfevc.neural import Adam, Tensor
from sfevc.training import (
    DEFAULT_VA_TABLE,
    LAMBDA_1,
    LAMBDA_2,
    METRIC_COLUMNS,
    ConfigError,
    Corpus,
    TrainConfig,
    apply_schedule,
    build_va_schedule,
    dependent_feature_loss,
    independent_emotion_loss,
    l1_loss,
    make_examples,
    qualifying_pairs,
    reanalyze,
    reconstruction_loss,
    train,
    train_direction_filter,
    train_epoch,
)

NET = NetworkConfig(width_scale=0.0625, decoder_hidden=8)
FOUR = {k: DEFAULT_VA_TABLE[k] for k in ("neutral", "happy", "sad", "angry")}


def fresh_model(corpus, seed=0):
    m = SFEVC(NET, seed=seed)
    m.stats = FeatureStats.fit(corpus.bundles)
    return m


# ------------------------------------------------------------------ losses


def test_reconstruction_examples():
    x = np.random.default_rng(0).standard_normal((2, 5, 3))
    assert float(reconstruction_loss(Tensor(x), x).data) == 0.0
    assert np.isclose(float(reconstruction_loss(Tensor(x + 1), x).data), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        reconstruction_loss(Tensor(x), x[:, :4])


def test_reconstruction_two_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 4, 3))
    want = 0.0
    for i in range(4):
        for j in range(3):
            want += (a[i, j] - b[i, j]) ** 2
    assert abs(float(reconstruction_loss(Tensor(a), b).data) - want / 12) < 1e-12


def test_masked_reconstruction_ignores_padding():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((2, 1, 6, 3))
    y2 = y.copy()
    y2[0, 4:] += 100
    a = float(reconstruction_loss(Tensor(x[:, :4]), y[:, :4]).data)
    b = float(reconstruction_loss(Tensor(np.where(np.arange(6)[None, :, None] < 4, x, 0)), y2, np.array([4])).data)
    assert abs(a - b) < 1e-12


def _const(v, n=2):
    return {k: np.full((1, n), x) for k, x in v.items()}


def test_independent_loss_examples():
    zero = _const({"pi": 0.0, "ti": 0.0})
    assert float(independent_emotion_loss(zero, zero).total.data) == 0.0
    lv = independent_emotion_loss(_const({"pi": 0.2, "ti": 0.3}), zero)
    assert abs(float(lv.total.data) - 0.5) < 1e-12 and LAMBDA_1 == 1.0
    assert float(l1_loss(Tensor(np.zeros(2)), np.array([1.0, -1.0])).data) == 1.0


def test_dependent_loss_examples():
    zero = _const({"pd": 0.0, "td": 0.0})
    assert float(dependent_feature_loss(zero, zero).total.data) == 0.0
    lv = dependent_feature_loss(_const({"pd": 0.4, "td": 0.1}), zero)
    assert abs(float(lv.total.data) - 0.5) < 1e-12 and LAMBDA_2 == 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.floats(0, 3))
def test_loss_brute_force_oracles(seed, lam):
    rng = np.random.default_rng(seed)
    p = {k: rng.standard_normal((1, 5)) for k in ("pi", "ti", "pd", "td")}
    t = {k: rng.standard_normal((1, 5)) for k in ("pi", "ti", "pd", "td")}

    def l1(a, b):
        s = 0.0
        for i in range(5):
            s += abs(a[0, i] - b[0, i])
        return s / 5

    ind = independent_emotion_loss({k: Tensor(v) for k, v in p.items()}, t, lam)
    dep = dependent_feature_loss({k: Tensor(v) for k, v in p.items()}, t, lam)
    assert abs(float(ind.total.data) - (l1(p["pi"], t["pi"]) + lam * l1(p["ti"], t["ti"]))) < 1e-12
    assert abs(float(dep.total.data) - (l1(p["pd"], t["pd"]) + lam * l1(p["td"], t["td"]))) < 1e-12
    assert float(ind.total.data) >= 0 and float(dep.total.data) >= 0


def test_missing_ground_truth_is_skipped():
    lv = independent_emotion_loss({}, None)
    assert lv.skipped and float(lv.total.data) == 0.0 and all(np.isnan(v) for v in lv.terms.values())


# ----------------------------------------------------------------- pairing


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_pairing_regimes(tiny_corpus, seed):
    ex = make_examples(tiny_corpus, np.random.default_rng(seed))
    assert len(ex) == len(tiny_corpus)
    for e in ex:
        s = tiny_corpus.sentences
        assert e.target.speaker == e.source.speaker == e.emotion_ref.speaker
        assert s[e.target.utt_id] == s[e.source.utt_id]
        assert e.emotion_ref.emotion == e.target.emotion
        assert e.emotion_ref.utt_id != e.target.utt_id
        assert e.speaker_ref.speaker != e.source.speaker and e.speaker_ref.emotion == e.source.emotion


def test_routes_restrict_pairs(tiny_corpus):
    ex = make_examples(tiny_corpus, np.random.default_rng(0), routes=[("sad", "angry")])
    assert ex and all((e.source.emotion, e.target.emotion) == ("sad", "angry") for e in ex)
    with pytest.raises(ValueError):
        make_examples(tiny_corpus, np.random.default_rng(0), routes=[("sad", "surprise")])


def test_empty_dataset_errors():
    empty = Corpus([], {})
    with pytest.raises(ValueError):
        make_examples(empty, np.random.default_rng(0))
    with pytest.raises(ValueError):
        train_epoch(SFEVC(NET), empty, None, TrainConfig(), 0)


# -------------------------------------------------------------- epoch loop


def _strip(rec):
    return {k: v for k, v in rec.items() if k != "wall_ms"}


def test_lr_zero_is_pure_evaluation(tiny_corpus):
    m = fresh_model(tiny_corpus)
    before = m.params.snapshot()
    cfg = TrainConfig(batch_size=4, seed=1)
    evaluated = train_epoch(copy.deepcopy(m), tiny_corpus, None, cfg, 0)
    rec = train_epoch(m, tiny_corpus, Adam(lr=0.0), cfg, 0)
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)
    assert _strip(rec) == _strip(evaluated)


def test_same_seed_same_records(tiny_corpus, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=4, seed=2)
    a, _ = train(fresh_model(tiny_corpus), tiny_corpus, cfg, tmp_path / "a.csv")
    b, _ = train(fresh_model(tiny_corpus), tiny_corpus, cfg, tmp_path / "b.csv")
    assert [_strip(r) for r in a] == [_strip(r) for r in b]
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == 2
    assert [int(r["epoch"]) for r in rows] == [1, 2]


def test_training_updates_and_reduces_loss(tiny_corpus):
    m = fresh_model(tiny_corpus)
    before = m.params.snapshot()
    recs, _ = train(m, tiny_corpus, TrainConfig(epochs=4, batch_size=4, lr=3e-3, seed=0))
    assert any(not np.array_equal(before[k], m.params[k].data) for k in before)
    assert recs[-1]["loss_recon"] < recs[0]["loss_recon"]


def test_factor_terms_skipped_without_ground_truth(tiny_corpus, tmp_path):
    bare = Corpus(tiny_corpus.bundles, tiny_corpus.sentences)
    with pytest.warns(UserWarning):
        recs, _ = train(fresh_model(bare), bare, TrainConfig(epochs=1, batch_size=8), tmp_path / "m.csv")
    assert recs[0]["factor_losses_skipped"]
    row = next(csv.DictReader(open(tmp_path / "m.csv")))
    assert row["loss_PI"] == "" and float(row["loss_recon"]) > 0


def test_train_config_validation():
    for bad in (dict(epochs=0), dict(batch_size=0), dict(lr=-1.0), dict(lambda1=-0.1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


# ------------------------------------------------------------ VA routing


def test_qualifying_pairs_table_example():
    up = qualifying_pairs(FOUR, "arousal", "up")
    assert ("sad", "angry") in up and ("neutral", "happy") not in up
    down = qualifying_pairs(FOUR, "arousal", "down")
    assert sorted(down) == sorted((t, s) for s, t in up)
    assert sorted(qualifying_pairs(FOUR, "valence", "down")) == sorted(
        (t, s) for s, t in qualifying_pairs(FOUR, "valence", "up")
    )


def test_no_qualifying_pairs_is_config_error(tiny_corpus):
    table = {"neutral": (0.0, 0.0), "happy": (0.8, 0.7), "sad": (-0.7, -0.5), "angry": (0.5, 0.2)}
    with pytest.raises(ConfigError, match="neutral"):
        train_direction_filter(SFEVC(NET), tiny_corpus, "arousal", "up", table, TrainConfig(epochs=1))


def test_schedule_examples():
    assert build_va_schedule("neutral", "happy", FOUR) == [("arousal", "up"), ("valence", "up")]
    assert build_va_schedule("neutral", "sad", FOUR) == [("arousal", "down"), ("valence", "down")]
    assert build_va_schedule("neutral", "angry", FOUR) == [("arousal", "up"), ("valence", "down")]
    assert build_va_schedule("sad", "sad", FOUR) == []
    with pytest.raises(ConfigError):
        build_va_schedule("neutral", "bored", FOUR)


coord = st.floats(-1, 1, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.sampled_from(["a", "b", "c", "d", "e"]), st.tuples(coord, coord), min_size=1))
def test_schedule_routing_brute_force(table):
    for s, t in itertools.product(table, repeat=2):
        (vs, as_), (vt, at) = table[s], table[t]
        want = []
        if at > as_:
            want.append(("arousal", "up"))
        elif at < as_:
            want.append(("arousal", "down"))
        if vt > vs:
            want.append(("valence", "up"))
        elif vt < vs:
            want.append(("valence", "down"))
        assert build_va_schedule(s, t, table) == want


# ------------------------------------------------------- direction filters


@pytest.fixture(scope="module")
def filters(tiny_corpus):
    base = fresh_model(tiny_corpus, seed=4)
    cfg = TrainConfig(epochs=1, batch_size=4, lr=1e-2, seed=0)
    out = {}
    for axis, sign in (("arousal", "up"), ("valence", "down")):
        out[(axis, sign)] = train_direction_filter(base, tiny_corpus, axis, sign, FOUR, cfg).model
    return base, out


def test_filter_trains_only_emotion_encoders_and_heads(filters, tiny_corpus):
    base, out = filters
    m = out[("arousal", "up")]
    changed = {k for k in base.params if not np.array_equal(base.params[k].data, m.params[k].data)}
    assert changed and all(k.startswith(("enc.emo.", "head.")) for k in changed)


def test_filter_manifest(tiny_corpus):
    f = train_direction_filter(fresh_model(tiny_corpus), tiny_corpus, "arousal", "down", FOUR, TrainConfig(epochs=1))
    man = f.manifest("arousal-down.ckpt")
    assert f.symbol == "A↓" and man["pairs"] == [["angry", "sad"]]
    assert man["va_table"]["sad"] == [-0.7, -0.5] and man["checkpoint"] == "arousal-down.ckpt"
    with pytest.raises(ValueError):
        train_direction_filter(fresh_model(tiny_corpus), Corpus([], {}), "arousal", "up", FOUR, TrainConfig(epochs=1))


def test_apply_schedule_base_cases(filters, tiny_corpus):
    base, out = filters
    src = next(b for b in tiny_corpus.bundles if b.emotion == "neutral")
    ref = next(b for b in tiny_corpus.bundles if b.emotion == "angry" and b.speaker == src.speaker)
    one = apply_schedule(src, [("arousal", "up")], out, ref)
    assert np.array_equal(one, convert(out[("arousal", "up")], src, ref))
    assert np.array_equal(apply_schedule(src, [], out, base=base), convert(base, src, src))
    two = apply_schedule(src, [("arousal", "up"), ("valence", "down")], out, ref, pitch_stats=tiny_corpus.pitch_stats[src.speaker])
    assert two.shape == src.mel.shape and np.all(np.isfinite(two))
    assert np.array_equal(two, apply_schedule(src, [("arousal", "up"), ("valence", "down")], out, ref, pitch_stats=tiny_corpus.pitch_stats[src.speaker]))
    with pytest.raises(KeyError):
        apply_schedule(src, [("valence", "up")], out, ref)


def test_second_step_keeps_source_mel(filters, tiny_corpus):
    _, out = filters
    src = next(b for b in tiny_corpus.bundles if b.emotion == "neutral")
    ref = next(b for b in tiny_corpus.bundles if b.emotion == "angry" and b.speaker == src.speaker)
    stats = tiny_corpus.pitch_stats[src.speaker]
    mid = reanalyze(convert(out[("arousal", "up")], src, ref), src, stats)
    mid.mel = src.mel
    two = apply_schedule(src, [("arousal", "up"), ("valence", "down")], out, ref, pitch_stats=stats)
    assert np.array_equal(two, convert(out[("valence", "down")], mid, ref))
