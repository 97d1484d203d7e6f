import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from favoa import tensor as T
from favoa.errors import ContractError, DimensionError
from favoa.layers import (
    AttentionParams,
    LinearParams,
    LstmParams,
    attention_forward,
    attention_weights,
    linear_forward,
    lstm_forward,
    softmax_cross_entropy,
    uniform_init,
)
from favoa.tensor import Tensor, finite_difference_check


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal(4)
        p = LinearParams(Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(linear_forward(p, Tensor(x)).data, x)

    def test_constant(self, rng):
        c = rng.standard_normal(3)
        p = LinearParams(Tensor(np.zeros((3, 5))), Tensor(c))
        np.testing.assert_array_equal(linear_forward(p, Tensor(rng.standard_normal(5))).data, c)

    def test_loop_oracle(self, rng):
        p = LinearParams.init(rng, 5, 3)
        x = rng.standard_normal((2, 5))
        want = np.array([[sum(p.W.data[o, i] * x[b, i] for i in range(5)) + p.b.data[o] for o in range(3)]
                         for b in range(2)])
        np.testing.assert_allclose(linear_forward(p, Tensor(x)).data, want, atol=1e-12)

    def test_wrong_input(self, rng):
        with pytest.raises(DimensionError):
            linear_forward(LinearParams.init(rng, 5, 3), Tensor(np.ones(4)))

    def test_init_bounds(self, rng):
        w = uniform_init(rng, (200, 25), 25).data
        assert np.abs(w).max() <= 1 / 5


class TestLstm:
    def test_zero_collapse(self):
        p = LstmParams(*(Tensor(np.zeros((3, 5))) for _ in range(4)), *(Tensor(np.zeros(3)) for _ in range(4)))
        out = lstm_forward(p, Tensor(np.zeros((4, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((4, 3)))

    def test_single_cell_by_hand(self, rng):
        n_in, hid = 2, 2
        p = LstmParams.init(rng, n_in, hid)
        x = rng.standard_normal(n_in)
        xh = list(x) + [0.0] * hid
        h = []
        for j in range(hid):
            pre = {}
            for g in "ifog":
                W = getattr(p, f"W_{g}").data
                pre[g] = sum(W[j, k] * xh[k] for k in range(n_in + hid)) + getattr(p, f"b_{g}").data[j]
            c = sig(pre["i"]) * math.tanh(pre["g"])  # previous cell state is zero
            h.append(sig(pre["o"]) * math.tanh(c))
        np.testing.assert_allclose(lstm_forward(p, Tensor(x.reshape(1, -1))).data[0], h, atol=1e-12)

    def test_batched_equals_unbatched(self, rng):
        p = LstmParams.init(rng, 3, 4)
        seqs = rng.standard_normal((2, 5, 3))
        batched = lstm_forward(p, Tensor(seqs)).data
        for b in range(2):
            np.testing.assert_allclose(batched[b], lstm_forward(p, Tensor(seqs[b])).data, atol=1e-14)

    @given(st.integers(0, 2**32 - 1), st.floats(0.1, 50))
    def test_hidden_bounded(self, seed, scale):
        r = np.random.default_rng(seed)
        p = LstmParams.init(r, 3, 4)
        out = lstm_forward(p, Tensor(scale * r.standard_normal((6, 3)))).data
        assert (np.abs(out) < 1).all()

    def test_empty_sequence(self, rng):
        with pytest.raises(ContractError):
            lstm_forward(LstmParams.init(rng, 3, 4), Tensor(np.zeros((0, 3))))


class TestAttention:
    def test_identical_tokens(self, rng):
        p = AttentionParams.init(rng, 4, 8)
        toks = np.tile(rng.standard_normal(4), (3, 1))
        out = attention_forward(p, Tensor(toks)).data
        assert np.allclose(out, out[0], atol=1e-15)

    def test_single_token_weight_one(self, rng):
        p = AttentionParams.init(rng, 4, 8)
        assert attention_weights(p, Tensor(rng.standard_normal((1, 4)))).data[0, 0] == 1.0

    def test_step_by_step_oracle(self, rng):
        d_in, d_k = 4, 6
        p = AttentionParams.init(rng, d_in, d_k)
        X = rng.standard_normal((3, d_in))
        Q = np.array([[np.dot(p.W_q.data[a], x) for a in range(d_k)] for x in X])
        K = np.array([[np.dot(p.W_k.data[a], x) for a in range(d_k)] for x in X])
        V = np.array([[np.dot(p.W_v.data[a], x) for a in range(d_k)] for x in X])
        out = []
        for i in range(3):
            raw = [np.dot(Q[i], K[j]) / math.sqrt(d_k) for j in range(3)]
            m = max(raw)
            e = [math.exp(r - m) for r in raw]
            w = [v / sum(e) for v in e]
            mixed = sum(w[j] * V[j] for j in range(3))
            out.append([np.dot(p.W_o.data[r], mixed) for r in range(d_in)])
        np.testing.assert_allclose(attention_forward(p, Tensor(X)).data, out, atol=1e-10)

    @given(st.integers(0, 2**32 - 1), st.integers(1, 7))
    def test_weights_are_distributions(self, seed, n):
        r = np.random.default_rng(seed)
        p = AttentionParams.init(r, 5, 4)
        w = attention_weights(p, Tensor(r.standard_normal((2, n, 5)))).data
        assert (w > 0).all()
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


class TestCrossEntropy:
    def test_even_logits(self):
        assert softmax_cross_entropy(Tensor([0.0, 0.0]), 1).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_closed_form(self):
        got = softmax_cross_entropy(Tensor([1.0, -1.0]), 1).item()
        assert got == pytest.approx(-math.log(sig(-2.0)), abs=1e-14)

    def test_confident_goes_to_zero(self):
        assert softmax_cross_entropy(Tensor([-40.0, 40.0]), 1).item() < 1e-30

    def test_favoring_true_class(self):
        assert softmax_cross_entropy(Tensor([-1.0, 1.0]), 1).item() == pytest.approx(0.126928, abs=1e-6)

    def test_batch_is_sum(self, rng):
        z = rng.standard_normal((4, 2))
        y = np.array([0, 1, 1, 0])
        total = softmax_cross_entropy(Tensor(z), y).item()
        assert total == pytest.approx(sum(softmax_cross_entropy(Tensor(z[i]), int(y[i])).item() for i in range(4)))

    @pytest.mark.parametrize("bad", [2, -1])
    def test_bad_label(self, bad):
        with pytest.raises(ContractError):
            softmax_cross_entropy(Tensor([0.0, 0.0]), bad)

    @given(st.floats(-30, 30), st.floats(-30, 30), st.integers(0, 1))
    def test_non_negative(self, a, b, y):
        assert softmax_cross_entropy(Tensor([a, b]), y).item() >= 0


@pytest.mark.parametrize("seed", range(3))
def test_layers_gradcheck(seed):
    from favoa.gradcheck import check_layers

    for r in check_layers(seed):
        assert r.passed, (r.name, r.max_rel_error)
