"""Bottleneck encoder stacks: shape laws, weight sharing, degenerate inputs, gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfevc.decoder import NetworkConfig, SFEVC
from sfevc.encoders import EMOTION_SPECS, MULTI_CHANNEL_SPECS, EncoderSpec, encoder_prefix, pad_batch, run_encoder
from sfevc.neural import Tensor, conv1d, group_norm
from sfevc.resample import RRConfig, random_resample

FULL = SFEVC(NetworkConfig(), seed=0)
SMALL = SFEVC(NetworkConfig(width_scale=0.125, decoder_hidden=8), seed=0)


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def test_table_code_widths():
    want = {"rhythm": 2, "content": 16, "pitch": 32, "u_s": 16, "u_ts": 32, "zf_s": 8, "zf_ts": 16}
    got = {k: s.code_dim for k, s in {**MULTI_CHANNEL_SPECS, **EMOTION_SPECS}.items()}
    assert got == want
    assert all(s.downsample == 8 for s in {**MULTI_CHANNEL_SPECS, **EMOTION_SPECS}.values())


def test_rhythm_code_shape_t64():
    z, lz = FULL.encode("rhythm", Tensor(rand(1, 64, 80)), [64])
    assert z.shape == (1, 8, 2) and list(lz) == [8]


def test_content_code_shape_identity_rr():
    x = rand(80, 80)
    xr = random_resample(x, RRConfig(stretch_min=1.0, stretch_max=1.0, seed=3))
    z, _ = FULL.encode("content", Tensor(xr[None]), [len(xr)])
    assert z.shape == (1, 10, 16)


def test_pitch_code_shape_t40_and_unvoiced():
    z, _ = FULL.encode("pitch", Tensor(rand(1, 40, 2)), [40])
    assert z.shape == (1, 5, 32)
    z0, _ = FULL.encode("pitch", Tensor(np.zeros((1, 40, 2))), [40])
    assert np.all(np.isfinite(z0.data))


def test_rr_length_law():
    x = rand(97, 80, seed=1)
    for s in range(5):
        xr = random_resample(x, RRConfig(seed=s))
        z, _ = SMALL.encode("content", Tensor(xr[None]), [len(xr)])
        assert z.shape[1] == -(-len(xr) // 8)


def test_zero_input_zero_weights_zero_code():
    m = SFEVC(NetworkConfig(width_scale=0.125), seed=1)
    for k, v in m.params.subset("enc.rhythm.").items():
        if not k.endswith("gamma"):
            v.data[:] = 0
    z, _ = m.encode("rhythm", Tensor(np.zeros((1, 24, 80))), [24])
    assert np.all(z.data == 0)


def test_constant_input_interior_is_frame_invariant():
    """Conv + group norm of a constant sequence is constant away from the zero-padded edges."""
    p = FULL.params
    x = Tensor(np.tile(rand(1, 80, seed=2), (40, 1)))
    h = conv1d(x, p["enc.content.conv0.weight"], p["enc.content.conv0.bias"])
    h = group_norm(h, 32, p["enc.content.norm0.gamma"], p["enc.content.norm0.beta"]).data
    half = 5 // 2
    inner = h[half:-half]
    assert np.allclose(inner, inner[0], atol=1e-12)
    z, _ = FULL.encode("content", Tensor(x.data[None]), [40])
    assert np.all(np.isfinite(z.data))


def test_same_seed_same_code():
    a = SFEVC(NetworkConfig(width_scale=0.125), seed=4)
    b = SFEVC(NetworkConfig(width_scale=0.125), seed=4)
    x = random_resample(rand(50, 80), RRConfig(seed=7))
    za, _ = a.encode("content", Tensor(x[None]), [len(x)])
    zb, _ = b.encode("content", Tensor(random_resample(rand(50, 80), RRConfig(seed=7))[None]), [len(x)])
    assert np.array_equal(za.data, zb.data)


def test_pitch_weights_are_shared():
    keys = [k for k in FULL.params if k.startswith("enc.pitch")]
    assert keys and not any(k.startswith(("enc.pitch_", "enc.pitch.s", "enc.pitch.t")) for k in keys)
    # one encoder applied to a batch equals it applied to each contour alone
    seqs = [rand(33, 2, seed=s) for s in range(3)]
    x, lens = pad_batch(seqs)
    zb, _ = SMALL.encode("pitch", x, lens)
    for i, s in enumerate(seqs):
        zi, li = SMALL.encode("pitch", Tensor(s[None]), [len(s)])
        assert np.allclose(zb.data[i, : li[0]], zi.data[0])


def test_pair_encoder_shapes():
    z, lz = FULL.encode_pair("zf_ts", Tensor(rand(1, 12, 32)), [12], Tensor(rand(1, 10, 32, seed=1)), [10])
    assert z.shape == (1, 2, 16)
    z, _ = FULL.encode_pair("u_s", Tensor(rand(1, 30, 24)), [30], Tensor(rand(1, 41, 24, seed=1)), [41])
    assert z.shape == (1, 4, 16)
    with pytest.raises(ValueError):
        FULL.encode_pair("u_s", Tensor(rand(1, 30, 24)), [30], Tensor(np.zeros((1, 1, 24))), [0])


def test_pair_antisymmetric_cancellation():
    w = FULL.params["enc.emo.zf_s.conv0.weight"].data
    c = w.shape[1] // 2
    w_anti = w.copy()
    w_anti[:, c:] = -w_anti[:, :c]
    a = rand(20, c, seed=5)
    pre = conv1d(Tensor(np.concatenate([a, a], axis=1)), Tensor(w_anti)).data
    assert np.allclose(pre, 0, atol=1e-12)


def test_input_channel_mismatch():
    with pytest.raises(ValueError):
        FULL.encode("rhythm", Tensor(rand(1, 16, 79)), [16])


@settings(max_examples=20, deadline=None)
@given(st.integers(16, 256), st.sampled_from(["rhythm", "content", "pitch", "u_s", "u_ts", "zf_s", "zf_ts"]))
def test_shape_laws_random_lengths(t, name):
    spec = SMALL.cfg.spec(name)
    cin = SMALL.params[f"{encoder_prefix(name)}.conv0.weight"].shape[1]
    z, lz = run_encoder(SMALL.params, encoder_prefix(name), spec, Tensor(rand(1, t, cin, seed=t)), np.array([t]))
    assert z.shape == (1, -(-t // 8), {**MULTI_CHANNEL_SPECS, **EMOTION_SPECS}[name].code_dim)


def test_width_scaling_keeps_groups_dividing():
    for s in {**MULTI_CHANNEL_SPECS, **EMOTION_SPECS}.values():
        for f in (0.05, 0.125, 0.3, 1.0):
            r = s.scaled(f)
            r.validate()
            assert r.code_dim == s.code_dim
    with pytest.raises(ValueError):
        EncoderSpec(1, 10, 3, 1, 1).validate()


@pytest.mark.parametrize("name", ["rhythm", "content", "pitch", "u_s", "u_ts", "zf_s", "zf_ts"])
def test_encoder_gradients(name):
    m = SFEVC(NetworkConfig(width_scale=0.0625, decoder_hidden=4), seed=2)
    pre = encoder_prefix(name)
    spec = m.cfg.spec(name)
    cin = m.params[f"{pre}.conv0.weight"].shape[1]
    x = Tensor(rand(2, 19, cin, seed=3), requires_grad=True)
    lens = np.array([19, 13])
    r = rand(2, 3, spec.code_dim, seed=4)

    def loss():
        z, _ = run_encoder(m.params, pre, spec, x, lens)
        return (z * r).sum()

    loss().backward()
    rng = np.random.default_rng(0)
    for t in (x, m.params[f"{pre}.conv0.weight"], m.params[f"{pre}.lstm0.wx"]):
        for _ in range(6):
            idx = tuple(int(rng.integers(0, n)) for n in t.shape)
            if t is x and idx[0] == 1 and idx[1] >= 13:
                continue
            old = t.data[idx]
            t.data[idx] = old + 1e-5
            hi = float(loss().data)
            t.data[idx] = old - 1e-5
            lo = float(loss().data)
            t.data[idx] = old
            num = (hi - lo) / 2e-5
            assert abs(t.grad[idx] - num) <= 1e-3 * max(abs(num), 1e-2)
