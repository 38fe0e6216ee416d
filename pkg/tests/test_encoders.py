import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from threatfuse.encoders import Arch, EncoderConfig, EncoderError, encode, encode_batch, init_encoder
from threatfuse.numerics import ParamStore, grad_check
from threatfuse import numerics as nx

from conftest import LOG, MAIL, NET


def store_for(cfg, scale=0.1, seed=0):
    s = ParamStore(seed)
    init_encoder(cfg, s, scale)
    return s


def zero_store(cfg, bias_value=0.0):
    s = store_for(cfg)
    for k in s.names():
        s.values[k][...] = bias_value if k.rsplit(".", 1)[-1].startswith("b") else 0.0
    return s


def test_default_architectures():
    assert EncoderConfig(NET, 8).arch is Arch.CONV1D
    assert EncoderConfig(MAIL, 8).arch is Arch.POOL_FF
    assert EncoderConfig(LOG, 8).arch is Arch.RECURRENT


@pytest.mark.parametrize("arch", list(Arch))
def test_zero_params_zero_input(arch):
    cfg = EncoderConfig(NET, 6, embed_dim=5, hidden_dim=4, arch=arch)
    assert np.array_equal(encode(np.zeros(6), cfg, zero_store(cfg)), np.zeros(5))


def test_zero_input_with_bias():
    cfg = EncoderConfig(NET, 6, embed_dim=5, hidden_dim=4)
    out = encode(np.zeros(6), cfg, zero_store(cfg, 0.2))
    assert np.allclose(out, np.tanh(0.2), atol=1e-15)


def test_conv1d_matches_direct_convolution():
    cfg = EncoderConfig(NET, 8, embed_dim=3, kernel_width=3)
    store = store_for(cfg, scale=0.5)
    store.values["enc.NETWORK.b"][...] = [0.1, -0.2, 0.3]
    x = np.random.default_rng(0).normal(size=8)
    K, b = store["enc.NETWORK.kernel"], store["enc.NETWORK.b"]
    out = np.zeros(3)
    for c in range(3):
        acc = 0.0
        for pos in range(8 - 3 + 1):
            s = b[c]
            for j in range(3):
                s += x[pos + j] * K[j, c]
            acc += np.tanh(s)
        out[c] = acc / 6
    assert np.allclose(encode(x, cfg, store), out, atol=1e-14)


def test_recurrent_single_step_is_one_cell():
    cfg = EncoderConfig(LOG, 2, embed_dim=3, step_dim=2)
    store = store_for(cfg, scale=0.5)
    x = np.array([0.4, -1.2])
    p = {k: store[k] for k in store.names()}
    z = 1 / (1 + np.exp(-(x @ p["enc.LOG.Wz"] + p["enc.LOG.bz"])))
    c = np.tanh(x @ p["enc.LOG.Wh"] + p["enc.LOG.bh"])
    assert np.allclose(encode(x[None, :], cfg, store), z * c, atol=1e-15)
    assert np.allclose(encode(x, cfg, store), z * c, atol=1e-15)


def test_recurrent_sequence_tokens_are_states():
    cfg = EncoderConfig(LOG, 6, embed_dim=4, step_dim=2)
    store = store_for(cfg, scale=0.5)
    tokens, h = encode_batch(np.random.default_rng(1).normal(size=(2, 6)), cfg, store.bind())
    assert tokens.shape == (2, 3, 4)
    assert np.array_equal(tokens.value[:, -1, :], h.value)


def test_recurrent_empty_sequence():
    cfg = EncoderConfig(LOG, 2, step_dim=2)
    with pytest.raises(EncoderError):
        encode(np.zeros((0, 2)), cfg, store_for(cfg))


def test_dimension_mismatch():
    cfg = EncoderConfig(MAIL, 4)
    with pytest.raises(EncoderError):
        encode(np.zeros(5), cfg, store_for(cfg))


def test_invalid_config():
    with pytest.raises(EncoderError):
        EncoderConfig(NET, 2, kernel_width=3)
    with pytest.raises(EncoderError):
        EncoderConfig(LOG, 5, step_dim=2)
    with pytest.raises(EncoderError):
        EncoderConfig(NET, 4, embed_dim=0)


def test_no_bias_option():
    cfg = EncoderConfig(MAIL, 4, bias=False)
    assert not any(k.split(".")[-1].startswith("b") for k in store_for(cfg).names())


@pytest.mark.parametrize("arch", list(Arch))
@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_bounded_on_wide_inputs(arch, seed):
    cfg = EncoderConfig(NET, 6, embed_dim=7, hidden_dim=5, arch=arch)
    x = np.random.default_rng(seed).uniform(-10, 10, size=(4, 6))
    tokens, pooled = encode_batch(x, cfg, store_for(cfg, seed=seed).bind())
    assert pooled.shape == (4, 7)
    assert tokens.shape == (4, cfg.seq_len, 7)
    assert np.isfinite(pooled.value).all()
    assert np.abs(pooled.value).max() <= 1.0


@pytest.mark.parametrize("arch", list(Arch))
def test_encoder_gradients(arch):
    cfg = EncoderConfig(NET, 6, embed_dim=3, hidden_dim=3, arch=arch, step_dim=2)
    store = store_for(cfg, scale=0.7, seed=3)
    x = np.random.default_rng(2).normal(size=(3, 6))

    def loss(P):
        tokens, pooled = encode_batch(x, cfg, P)
        return nx.sum_(pooled * pooled) + nx.mean(tokens)

    assert grad_check(store, loss) < 1e-4
