import numpy as np
import pytest
from hypothesis import given, strategies as st

from favoa.data import FeatureStoreProvider, load_dataset
from favoa.errors import ConfigError, FormatError
from favoa.model import (
    FavoaParams,
    ModelConfig,
    forward,
    forward_batch,
    load_params,
    predict,
    read_config,
    save_params,
    trainable_parameters,
)
from favoa.tensor import Tensor

CFG = ModelConfig()


def sigm(x):
    return 1 / (1 + np.exp(-x))


def hand_sequenced(p, cfg, ctx, voice):
    """The forward pass written directly in numpy for a single entry."""
    att = p.attention
    Q, K, V = ctx @ att.W_q.data.T, ctx @ att.W_k.data.T, ctx @ att.W_v.data.T
    sc = Q @ K.T / np.sqrt(cfg.d_k)
    w = np.exp(sc - sc.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    refined = (w @ V) @ att.W_o.data.T
    ls = p.lstm
    h, c, outs = np.zeros(cfg.d_c), np.zeros(cfg.d_c), []
    for x in refined:
        xh = np.concatenate([x, h])
        i = sigm(ls.W_i.data @ xh + ls.b_i.data)
        f = sigm(ls.W_f.data @ xh + ls.b_f.data)
        o = sigm(ls.W_o.data @ xh + ls.b_o.data)
        g = np.tanh(ls.W_g.data @ xh + ls.b_g.data)
        c = f * c + i * g
        h = o * np.tanh(c)
        outs.append(h)
    s = np.concatenate(outs)
    a_prime = p.fv_proj.W.data @ np.maximum(voice, 0) + p.fv_proj.b.data
    g = p.gbu
    h1 = np.tanh(g.W_1.data @ a_prime + g.b_1.data)
    h2 = np.tanh(g.W_2.data @ s + g.b_2.data)
    gate = sigm(g.W_p.data @ np.concatenate([a_prime, s]) + g.b_p.data)
    z = gate * h1 + (1 - gate) * h2
    logits = p.head.W.data @ z + p.head.b.data
    e = np.exp(logits - logits.max())
    return (e / e.sum())[1], gate


def zero_params(cfg):
    p = FavoaParams.init(cfg, 0)
    for t in p.named_tensors().values():
        t.data = np.zeros_like(t.data)
    return p


def test_zero_params_are_undecided(rng):
    q, gates = predict(zero_params(CFG), CFG, rng.standard_normal((4, 6, 32)), rng.standard_normal((4, 16)))
    assert np.array_equal(q, np.full(4, 0.5)) and np.array_equal(gates, np.full((4, 96), 0.5))


def test_composition_oracle(rng):
    p = FavoaParams.init(CFG, 7)
    p.gbu.b_p.data = rng.uniform(-1, 1, 96)
    ctx, voice = rng.standard_normal((6, 32)), rng.standard_normal(16)
    tr = forward_batch(p, CFG, Tensor(ctx[None]), Tensor(voice[None]))
    q, gate = hand_sequenced(p, CFG, ctx, voice)
    assert tr.q[0] == pytest.approx(q, abs=1e-12)
    np.testing.assert_allclose(tr.p.data[0], gate, atol=1e-12)


@pytest.mark.parametrize("bias,perturb", [(50.0, "context"), (-50.0, "voice")])
def test_gate_saturation_isolates_branch(rng, bias, perturb):
    p = FavoaParams.init(CFG, 1)
    p.gbu.b_p.data = np.full(96, bias)
    ctx, voice = rng.standard_normal((3, 6, 32)), rng.standard_normal((3, 16))
    q0, _ = predict(p, CFG, ctx, voice)
    if perturb == "context":
        ctx = ctx + rng.standard_normal(ctx.shape)
    else:
        voice = voice + rng.standard_normal(voice.shape)
    q1, _ = predict(p, CFG, ctx, voice)
    assert np.abs(q1 - q0).max() < 1e-6


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 30))
def test_q_strictly_inside_unit_interval(seed, scale):
    r = np.random.default_rng(seed)
    q, _ = predict(FavoaParams.init(CFG, seed % 100), CFG, scale * r.standard_normal((2, 6, 32)),
                   scale * r.standard_normal((2, 16)))
    assert ((q > 0) & (q < 1)).all()


def test_ablation_ignores_voice(rng):
    cfg = ModelConfig(ablate_fv=True)
    p = FavoaParams.init(cfg, 2)
    ctx = rng.standard_normal((3, 6, 32))
    qa, _ = predict(p, cfg, ctx, rng.standard_normal((3, 16)))
    qb, _ = predict(p, cfg, ctx, rng.standard_normal((3, 16)))
    assert np.array_equal(qa, qb)


def test_single_entry_forward_matches_batch(tiny_dataset):
    from favoa.data import featurize

    ds = load_dataset(tiny_dataset)
    prov = FeatureStoreProvider(ds)
    p = FavoaParams.init(CFG, 4)
    e = ds.entries[5]
    tr1 = forward(p, CFG, prov, e, ds)
    tr2 = forward(p, CFG, prov, e, ds)
    assert tr1.q == tr2.q and tr1.p.data.tobytes() == tr2.p.data.tobytes()
    fs = featurize(ds, prov, [e], 3, 2, 1)
    q, _ = predict(p, CFG, fs.context, fs.voice)
    assert q[0] == pytest.approx(tr1.q, abs=1e-15)


def test_trainable_groups():
    groups = trainable_parameters(FavoaParams.init(CFG, 0))
    assert [g for g, _ in groups] == ["attention", "lstm", "fv_proj", "gbu", "head"]


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(L=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(d_c=0).validate()
    with pytest.raises(ConfigError):
        forward_batch(FavoaParams.init(CFG, 0), CFG, Tensor(np.zeros((1, 5, 32))), Tensor(np.zeros((1, 16))))


class TestParamFiles:
    def test_round_trip(self, tmp_path):
        p = FavoaParams.init(CFG, 9)
        save_params(p, tmp_path / "p.bin", CFG)
        q = load_params(tmp_path / "p.bin", CFG)
        for k, t in p.named_tensors().items():
            assert q.named_tensors()[k].data.tobytes() == t.data.tobytes()
        assert read_config(tmp_path / "p.bin").dims() == CFG.dims()

    def test_dimension_mismatch_named(self, tmp_path):
        small = ModelConfig(d_c=8)
        save_params(FavoaParams.init(small, 0), tmp_path / "p.bin", small)
        with pytest.raises(FormatError, match="d_c"):
            load_params(tmp_path / "p.bin", CFG)

    def test_bad_magic(self, tmp_path):
        save_params(FavoaParams.init(CFG, 0), tmp_path / "p.bin", CFG)
        raw = bytearray((tmp_path / "p.bin").read_bytes())
        raw[:8] = b"XXXXXXXX"
        (tmp_path / "p.bin").write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="magic"):
            load_params(tmp_path / "p.bin")

    def test_truncated(self, tmp_path):
        save_params(FavoaParams.init(CFG, 0), tmp_path / "p.bin", CFG)
        raw = (tmp_path / "p.bin").read_bytes()
        (tmp_path / "p.bin").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            load_params(tmp_path / "p.bin")

