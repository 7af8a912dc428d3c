import math

import numpy as np
import pytest

from reformer import tensor as T
from reformer.layers import (
    DecoderLayer,
    EncoderLayer,
    Linear,
    MultiHeadAttention,
    Norm,
    causal_mask,
    positional_encoding,
)


def rng_for(seed=0):
    return np.random.default_rng(seed)


class TestMultiHeadAttention:
    def test_single_position_returns_projected_value(self):
        # softmax over one key is 1, so output = wo(wv(v))
        d = 4
        attn = MultiHeadAttention(d, 1, rng_for(1))
        v = rng_for(2).normal(size=(1, d))
        out = attn.forward(None, T.Tensor(v), T.Tensor(v), T.Tensor(v))
        expected = attn.wo.forward(None, attn.wv.forward(None, T.Tensor(v)))
        assert np.allclose(out.data, expected.data, atol=1e-12)

    def test_uniform_keys_give_uniform_weights(self):
        d = 6
        attn = MultiHeadAttention(d, 2, rng_for(3))
        q = rng_for(4).normal(size=(2, d))
        k = np.tile(rng_for(5).normal(size=(1, d)), (5, 1))
        weights = attn.attention_weights(T.Tensor(q), T.Tensor(k))
        assert np.allclose(weights, 1.0 / 5, atol=1e-12)

    def test_hand_computed_fixture_with_identity_projections(self):
        d = 2
        attn = MultiHeadAttention(d, 1, rng_for(6))
        for lin in (attn.wq, attn.wk, attn.wv, attn.wo):
            lin.w.data = np.eye(d)
            if lin.b is not None:
                lin.b.data = np.zeros(d)
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        k = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        v = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        out = attn.forward(None, T.Tensor(q), T.Tensor(k), T.Tensor(v)).data
        # independent oracle: explicit loops
        scale = 1.0 / math.sqrt(d)
        expected = np.zeros((2, d))
        for i in range(2):
            scores = [scale * float(q[i] @ k[j]) for j in range(3)]
            mx = max(scores)
            ws = [math.exp(s - mx) for s in scores]
            total = sum(ws)
            for j in range(3):
                expected[i] += (ws[j] / total) * v[j]
        assert np.abs(out - expected).max() < 1e-8

    def test_masked_positions_get_no_weight(self):
        d = 4
        attn = MultiHeadAttention(d, 2, rng_for(7))
        q = rng_for(8).normal(size=(2, d))
        k = rng_for(9).normal(size=(3, d))
        mask = np.array([[True, True, False], [True, False, False]])
        weights = attn.attention_weights(T.Tensor(q), T.Tensor(k), mask)
        assert weights[:, 0, 2].max() < 1e-12
        assert weights[:, 1, 1:].max() < 1e-12
        assert np.allclose(weights.sum(axis=-1), 1.0, atol=1e-12)

    def test_all_masked_row_is_an_error(self):
        attn = MultiHeadAttention(4, 1, rng_for(10))
        x = T.Tensor(rng_for(11).normal(size=(2, 4)))
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(ValueError, match="query rows \\[1\\]"):
            attn.forward(None, x, x, x, mask)

    def test_width_not_divisible_by_heads(self):
        with pytest.raises(ValueError, match="divisible"):
            MultiHeadAttention(6, 4, rng_for(12))

    def test_gradient(self):
        attn = MultiHeadAttention(8, 2, rng_for(13))
        x = rng_for(14).normal(size=(3, 8))
        mix = rng_for(15).normal(size=(3, 8))
        err = T.grad_check(
            lambda t: (attn.forward(t.tape, t, t, t) * T.Tensor(mix)).sum(), x
        )
        assert err < 1e-4


class TestEncoderLayer:
    def test_zeroed_output_projections_make_identity(self):
        layer = EncoderLayer(8, 2, 2, 0.0, rng_for(16))
        layer.attn.wo.w.data = np.zeros_like(layer.attn.wo.w.data)
        layer.ffn.fc2.w.data = np.zeros_like(layer.ffn.fc2.w.data)
        x = rng_for(17).normal(size=(4, 8))
        out = layer.forward(None, T.Tensor(x))
        assert np.allclose(out.data, x, atol=1e-12)

    @pytest.mark.parametrize("n", [1, 10, 50])
    def test_shape_preserved(self, n):
        layer = EncoderLayer(8, 4, 2, 0.0, rng_for(18))
        out = layer.forward(None, T.Tensor(rng_for(19).normal(size=(n, 8))))
        assert out.shape == (n, 8)

    def test_gradient(self):
        layer = EncoderLayer(8, 2, 2, 0.0, rng_for(20))
        x = rng_for(21).normal(size=(3, 8))
        mix = rng_for(22).normal(size=(3, 8))
        err = T.grad_check(
            lambda t: (layer.forward(t.tape, t) * T.Tensor(mix)).sum(), x
        )
        assert err < 1e-4


class TestDecoderLayer:
    def test_causality_future_changes_do_not_leak(self):
        layer = DecoderLayer(8, 2, 2, 0.0, rng_for(23))
        enc = T.Tensor(rng_for(24).normal(size=(4, 8)))
        y = rng_for(25).normal(size=(5, 8))
        base = layer.forward(None, T.Tensor(y), enc).data
        for t in range(4):
            y2 = y.copy()
            y2[t + 1 :] += rng_for(50 + t).normal(size=y2[t + 1 :].shape)
            out = layer.forward(None, T.Tensor(y2), enc).data
            assert (out[: t + 1] == base[: t + 1]).all()

    def test_single_step_equals_first_row_of_two_step(self):
        layer = DecoderLayer(8, 2, 2, 0.0, rng_for(26))
        enc = T.Tensor(rng_for(27).normal(size=(3, 8)))
        y = rng_for(28).normal(size=(2, 8))
        one = layer.forward(None, T.Tensor(y[:1]), enc).data
        two = layer.forward(None, T.Tensor(y), enc).data
        assert np.allclose(one[0], two[0], atol=1e-12)

    def test_gradient(self):
        layer = DecoderLayer(8, 2, 2, 0.0, rng_for(29))
        enc = T.Tensor(rng_for(30).normal(size=(3, 8)))
        y = rng_for(31).normal(size=(3, 8))
        mix = rng_for(32).normal(size=(3, 8))
        err = T.grad_check(
            lambda t: (layer.forward(t.tape, t, enc) * T.Tensor(mix)).sum(), y
        )
        assert err < 1e-4

    def test_causality_over_random_trials(self):
        layer = DecoderLayer(4, 1, 2, 0.0, rng_for(33))
        enc = T.Tensor(rng_for(34).normal(size=(2, 4)))
        rng = rng_for(35)
        for _ in range(100):
            m = int(rng.integers(2, 6))
            t = int(rng.integers(0, m - 1))
            y = rng.normal(size=(m, 4))
            base = layer.forward(None, T.Tensor(y), enc).data
            y2 = y.copy()
            y2[t + 1 :] = rng.normal(size=(m - t - 1, 4))
            out = layer.forward(None, T.Tensor(y2), enc).data
            assert (out[: t + 1] == base[: t + 1]).all()


class TestPositionalEncoding:
    def test_row_zero_alternates_zero_one(self):
        table = positional_encoding(4, 6)
        assert np.allclose(table[0], [0, 1, 0, 1, 0, 1], atol=1e-15)

    def test_bounded(self):
        table = positional_encoding(50, 16)
        assert table.min() >= -1.0 and table.max() <= 1.0

    def test_direct_formula(self):
        table = positional_encoding(8, 4)
        assert table[3, 0] == pytest.approx(math.sin(3.0), abs=1e-15)
        assert table[3, 1] == pytest.approx(math.cos(3.0), abs=1e-15)
        assert table[5, 2] == pytest.approx(math.sin(5.0 / 10000 ** (2 / 4)), abs=1e-15)

    def test_deterministic(self):
        assert (positional_encoding(7, 10) == positional_encoding(7, 10)).all()


class TestParams:
    def test_dotted_names_unique(self):
        layer = DecoderLayer(8, 2, 2, 0.1, rng_for(36))
        names = [n for n, _ in layer.named_parameters()]
        assert len(names) == len(set(names))
        assert "self_attn.wq.w" in names
        assert "self_attn.wk.b" not in names  # key bias is omitted by design

    def test_linear_bias_optional(self):
        lin = Linear(3, 2, rng_for(37), bias=False)
        assert [n for n, _ in lin.named_parameters()] == ["w"]

    def test_state_dict_roundtrip(self):
        a = EncoderLayer(8, 2, 2, 0.0, rng_for(38))
        b = EncoderLayer(8, 2, 2, 0.0, rng_for(39))
        b.load_state(a.state_dict())
        x = T.Tensor(rng_for(40).normal(size=(2, 8)))
        assert (a.forward(None, x).data == b.forward(None, x).data).all()

    def test_load_state_shape_mismatch(self):
        a = Norm(4)
        with pytest.raises(ValueError, match="shape mismatch"):
            a.load_state({"gamma": np.ones(5), "beta": np.zeros(4)})

    def test_load_state_name_mismatch(self):
        a = Norm(4)
        with pytest.raises(KeyError, match="missing"):
            a.load_state({"gamma": np.ones(4)})


def test_causal_mask_is_lower_triangular():
    m = causal_mask(4)
    assert m.tolist() == [
        [True, False, False, False],
        [True, True, False, False],
        [True, True, True, False],
        [True, True, True, True],
    ]
