import math

import numpy as np
import pytest

from actforecast import tensor as tn
from actforecast.errors import ConfigError
from actforecast.layers import (
    FeatureAttnParams,
    GruParams,
    bigru_encode,
    dropout_apply,
    embed_labels,
    feature_attention_encode,
    gru_cell_step,
    gru_run,
    gru_update_reference,
    temporal_attention_encode,
)
from actforecast.tensor import Tensor


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def gru_reference(x, h, p):
    """Scalar-loop GRU, written independently of the tensor code."""
    k_in, k_h = p["W_z"].shape
    out = []
    pre = {g: [p[f"b_{g}"][j] + sum(x[i] * p[f"W_{g}"][i, j] for i in range(k_in)) for j in range(k_h)] for g in "zrn"}
    z = [_sig(pre["z"][j] + sum(h[i] * p["U_z"][i, j] for i in range(k_h))) for j in range(k_h)]
    r = [_sig(pre["r"][j] + sum(h[i] * p["U_r"][i, j] for i in range(k_h))) for j in range(k_h)]
    n = [math.tanh(pre["n"][j] + sum(r[i] * h[i] * p["U_n"][i, j] for i in range(k_h))) for j in range(k_h)]
    for j in range(k_h):
        out.append((1 - z[j]) * h[j] + z[j] * n[j])
    return np.array(out)


def random_gru(rng, k_in, k_h, scale=0.7):
    params = GruParams.init(k_in, k_h, seed=int(rng.integers(1 << 30)), prefix="g")
    for t in params.named("g").values():
        t.data[...] = scale * rng.standard_normal(t.shape)
    return params


def layer_norm_ref(v, eps=1e-5):
    mu = v.mean(axis=-1, keepdims=True)
    return (v - mu) / np.sqrt(v.var(axis=-1, keepdims=True) + eps)


class TestGruCell:
    def test_zero_weights(self):
        p = GruParams.init(3, 2, seed=0, prefix="g")
        for t in p.named("g").values():
            t.data[...] = 0.0
        h = gru_cell_step(Tensor([1.0, -2.0, 3.0]), Tensor(np.zeros(2)), p)
        np.testing.assert_array_equal(h.data, [0.0, 0.0])

    def test_zero_input_zero_state(self):
        p = GruParams.init(3, 2, seed=4, prefix="g")
        h = gru_cell_step(Tensor(np.zeros(3)), Tensor(np.zeros(2)), p)
        np.testing.assert_array_equal(h.data, [0.0, 0.0])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_reference(self, seed):
        rng = np.random.default_rng(seed)
        p = random_gru(rng, 3, 2)
        x, h = rng.standard_normal(3), np.tanh(rng.standard_normal(2))
        raw = {k.split(".")[1]: t.data for k, t in p.named("g").items()}
        out = gru_cell_step(Tensor(x), Tensor(h), p).data
        np.testing.assert_allclose(out, gru_reference(x, h, raw), rtol=1e-12, atol=1e-14)

    def test_shape_mismatch(self):
        p = GruParams.init(3, 2, seed=0, prefix="g")
        with pytest.raises(tn.ShapeError):
            gru_cell_step(Tensor(np.zeros(4)), Tensor(np.zeros(2)), p)

    def test_run_matches_stepping(self):
        rng = np.random.default_rng(7)
        p = random_gru(rng, 3, 4)
        X = rng.standard_normal((5, 3))
        states = gru_run(Tensor(X), p)
        h = Tensor(np.zeros(4))
        for t in range(5):
            h = gru_cell_step(Tensor(X[t]), h, p)
            np.testing.assert_allclose(states[t].data, h.data, rtol=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        p = random_gru(rng, 3, 2)
        X = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)
        w = rng.standard_normal((2, 2))
        named = {**p.named("g"), "X": X}
        errs = tn.gradcheck(lambda: tn.sum(gru_run(X, p)[-1] * Tensor(w)), named)
        assert max(errs.values()) < 1e-4, errs


class TestFusedUpdate:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("h_batched", [True, False])
    def test_matches_primitive_graph(self, seed, h_batched):
        from actforecast.layers import _gru_update

        rng = np.random.default_rng(seed)
        p = random_gru(rng, 3, 4)
        proj = [Tensor(rng.standard_normal((2, 4)), requires_grad=True) for _ in range(3)]
        h = Tensor(np.tanh(rng.standard_normal((2, 4) if h_batched else (4,))), requires_grad=True)
        w = Tensor(rng.standard_normal((2, 4)))
        leaves = [*proj, h, p.U_z, p.U_r, p.U_n]
        grads = []
        for update in (_gru_update, gru_update_reference):
            tn.zero_grads(leaves)
            out = update(*proj, h, p)
            tn.backward(tn.sum(out * w))
            grads.append((out.data, [t.grad.copy() for t in leaves]))
        np.testing.assert_allclose(grads[0][0], grads[1][0], rtol=1e-13)
        for a, b in zip(grads[0][1], grads[1][1]):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13)


class TestBiGru:
    def test_single_frame(self):
        rng = np.random.default_rng(0)
        out = bigru_encode(Tensor(rng.standard_normal((1, 3))), random_gru(rng, 3, 2), random_gru(rng, 3, 2))
        assert out.H.shape == (1, 4)
        np.testing.assert_array_equal(out.h_last.data, out.H.data[0])

    def test_reversal_swaps_halves(self):
        rng = np.random.default_rng(1)
        p = random_gru(rng, 3, 2)
        X = rng.standard_normal((6, 3))
        a = bigru_encode(Tensor(X), p, p).H.data
        b = bigru_encode(Tensor(X[::-1].copy()), p, p).H.data
        np.testing.assert_allclose(b[::-1, :2], a[:, 2:], rtol=1e-13)
        np.testing.assert_allclose(b[::-1, 2:], a[:, :2], rtol=1e-13)

    def test_h_last_layout(self):
        rng = np.random.default_rng(2)
        f, b = random_gru(rng, 3, 2), random_gru(rng, 3, 2)
        out = bigru_encode(Tensor(rng.standard_normal((5, 3))), f, b)
        np.testing.assert_array_equal(out.h_last.data[:2], out.H.data[-1, :2])
        np.testing.assert_array_equal(out.h_last.data[2:], out.H.data[0, 2:])

    def test_zero_input(self):
        out = bigru_encode(Tensor(np.zeros((4, 3))), GruParams.init(3, 2, 0, "f"), GruParams.init(3, 2, 0, "b"))
        np.testing.assert_array_equal(out.H.data, 0.0)

    def test_bounded(self):
        rng = np.random.default_rng(3)
        out = bigru_encode(Tensor(rng.standard_normal((2, 20, 3))), random_gru(rng, 3, 4), random_gru(rng, 3, 4))
        assert np.all(np.abs(out.H.data) < 1.0)
        # float64 tanh saturates to exactly 1 for huge pre-activations
        out = bigru_encode(Tensor(50 * rng.standard_normal((2, 20, 3))), random_gru(rng, 3, 4, 3.0), random_gru(rng, 3, 4, 3.0))
        assert np.all(np.abs(out.H.data) <= 1.0)

    def test_empty(self):
        with pytest.raises(tn.EmptySequenceError):
            bigru_encode(Tensor(np.zeros((0, 3))), GruParams.init(3, 2, 0, "f"), GruParams.init(3, 2, 0, "b"))


def random_attn(rng, d_model, heads, d_ff, scale=0.5):
    p = FeatureAttnParams.init(d_model, heads, d_ff, seed=int(rng.integers(1 << 30)))
    for t in p.named().values():
        t.data[...] = scale * rng.standard_normal(t.shape) + (1.0 if t.ndim == 1 and scale == 0 else 0.0)
    return p


class TestFeatureAttention:
    def test_uniform_attention_oracle(self):
        T, d = 3, 4
        rng = np.random.default_rng(0)
        X = rng.standard_normal((T, d))
        p = FeatureAttnParams.init(T, 1, 6, seed=1)
        p.W_q[0].data[...] = 0.0
        p.W_k[0].data[...] = 0.0
        p.W_v[0].data[...] = np.eye(T)
        p.W_o.data[...] = np.eye(T)
        Xt = X.T
        A = np.repeat(Xt.mean(axis=0, keepdims=True), d, axis=0)
        B = layer_norm_ref(Xt + A)
        hidden = np.maximum(B @ p.W_a1.data, 0.0)
        C = layer_norm_ref(B + hidden @ p.W_a2.data).T
        out, attn = feature_attention_encode(Tensor(X), p, return_attention=True)
        np.testing.assert_allclose(attn[0].data, np.full((d, d), 1 / d), rtol=1e-14)
        np.testing.assert_allclose(out.data, C, rtol=1e-12, atol=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_attention_rows_normalised_and_feature_sized(self, seed):
        rng = np.random.default_rng(seed)
        T, d = 5, 7
        p = random_attn(rng, T, 3, 8, scale=1.0)
        _, attn = feature_attention_encode(Tensor(rng.standard_normal((2, T, d))), p, return_attention=True)
        assert len(attn) == 3
        for P in attn:
            assert P.shape == (2, d, d)
            np.testing.assert_allclose(P.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_temporal_variant_is_time_sized(self):
        rng = np.random.default_rng(0)
        T, d = 5, 7
        p = random_attn(rng, d, 2, 8)
        C, attn = temporal_attention_encode(Tensor(rng.standard_normal((T, d))), p, return_attention=True)
        assert C.shape == (T, d)
        assert all(P.shape == (T, T) for P in attn)

    def test_zeroed_residual_branches(self):
        rng = np.random.default_rng(5)
        T, d = 4, 6
        X = rng.standard_normal((T, d))
        p = random_attn(rng, T, 2, 5)
        for ln in (p.ln1_gain, p.ln2_gain):
            ln.data[...] = 1.0
        for ln in (p.ln1_bias, p.ln2_bias):
            ln.data[...] = 0.0
        p.W_o.data[...] = 0.0
        p.W_a2.data[...] = 0.0
        out = feature_attention_encode(Tensor(X), p).data
        np.testing.assert_array_equal(out, tn.transpose(tn.layer_norm(tn.layer_norm(
            Tensor(X.T), p.ln1_gain, p.ln1_bias), p.ln2_gain, p.ln2_bias)).data)
        np.testing.assert_allclose(out, layer_norm_ref(layer_norm_ref(X.T)).T, rtol=1e-12, atol=1e-13)

    def test_shape_contract(self):
        p = FeatureAttnParams.init(3, 2, 4, seed=0)
        with pytest.raises(ConfigError):
            feature_attention_encode(Tensor(np.zeros((4, 5))), p)

    def test_heads_keep_full_width(self):
        p = FeatureAttnParams.init(6, 5, 12, seed=0)
        assert p.d_k == 6 and p.W_o.shape == (30, 6)

    def test_full_scale_shape(self):
        T, d = 8, 1024
        p = FeatureAttnParams.init(T, 5, 2048, seed=0)
        C = feature_attention_encode(Tensor(np.random.default_rng(0).standard_normal((T, d))), p)
        assert C.shape == (T, d)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        T, d = 3, 4
        p = random_attn(rng, T, 2, 5)
        X = Tensor(rng.standard_normal((T, d)), requires_grad=True)
        w = rng.standard_normal((T, d))
        named = {**p.named(), "X": X}
        errs = tn.gradcheck(lambda: tn.sum(feature_attention_encode(X, p) * Tensor(w)), named)
        assert max(errs.values()) < 1e-4, errs


class TestDropout:
    def test_identity_cases(self):
        v = Tensor(np.arange(5.0))
        assert dropout_apply(v, 0.0, np.random.default_rng(0), True) is v
        assert dropout_apply(v, 0.9, None, False) is v

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            dropout_apply(Tensor(np.ones(3)), 1.0, np.random.default_rng(0), True)

    def test_statistics(self):
        v = Tensor(np.ones(100_000))
        out = dropout_apply(v, 0.5, np.random.default_rng(123), True).data
        assert 0.49 <= np.mean(out == 0) <= 0.51
        assert abs(out.mean() - 1.0) < 0.02
        assert set(np.unique(out)) == {0.0, 2.0}


class TestEmbedding:
    def test_rows_and_sos(self):
        table = Tensor(np.arange(15.0).reshape(5, 3), requires_grad=True)
        np.testing.assert_array_equal(embed_labels(0, table).data, table.data[0])
        np.testing.assert_array_equal(embed_labels(4, table).data, table.data[-1])
        with pytest.raises(IndexError):
            embed_labels(5, table)

    def test_gradient_sparsity(self):
        table = Tensor(np.random.default_rng(0).standard_normal((5, 3)), requires_grad=True)
        tn.backward(tn.sum(embed_labels(2, table) * Tensor([1.0, -2.0, 0.5])))
        nonzero_rows = np.flatnonzero(np.abs(table.grad).sum(axis=1))
        assert nonzero_rows.tolist() == [2]
