import math

import numpy as np
import pytest

from acd import tensorcore as tc
from acd.dit import DiT, DiTConfig, attention, sincos_3d
from acd.tensorcore import Tensor


def small_cfg(**kw):
    base = dict(dim=8, heads=2, layers=2, ffn_mult=2, max_tokens=64,
                lora_rank=2, lora_alpha=4.0, num_classes=3, latent_channels=6)
    base.update(kw)
    return DiTConfig(**base)


def test_patchify_single_token():
    model = DiT.init(small_cfg(), seed=0)
    tokens, grid = model.patchify(np.zeros((1, 1, 1, 6), dtype=np.float32))
    assert tokens.shape == (1, 8)
    assert grid == (1, 1, 1)


def test_patchify_flattening_is_time_major_row_major():
    model = DiT.init(small_cfg(max_tokens=8), seed=0)
    latent = np.zeros((2, 2, 2, 6), dtype=np.float32)
    # tag each cell with a distinct value in channel 0
    for t in range(2):
        for i in range(2):
            for j in range(2):
                latent[t, i, j, 0] = 100 * t + 10 * i + j
    tokens, grid = model.patchify(latent)
    assert tokens.shape == (8, 8)
    w = model.params["base.patchify.w"].data
    pe = model.pos_encoding((2, 2, 2))
    order = [(t, i, j) for t in range(2) for i in range(2) for j in range(2)]
    for n, (t, i, j) in enumerate(order):
        expected = latent[t, i, j] @ w + pe[n]
        np.testing.assert_allclose(tokens.data[n], expected, rtol=1e-5)


def test_zero_latent_zero_bias_gives_pure_position_encoding():
    model = DiT.init(small_cfg(), seed=0)
    tokens, _ = model.patchify(np.zeros((2, 2, 2, 6), dtype=np.float32))
    assert np.array_equal(tokens.data, model.pos_encoding((2, 2, 2)))


def test_patchify_rejects_token_overflow():
    model = DiT.init(small_cfg(max_tokens=4), seed=0)
    with pytest.raises(ValueError, match="max_tokens"):
        model.patchify(np.zeros((2, 2, 2, 6), dtype=np.float32))


def test_unpatchify_matches_matrix_product_oracle():
    model = DiT.init(small_cfg(), seed=3)
    latent = np.random.default_rng(0).normal(size=(1, 2, 2, 6)).astype(np.float32)
    tokens, grid = model.patchify(latent)
    out = model.unpatchify(tokens, grid)
    w_in = model.params["base.patchify.w"].data
    w_out = model.params["head.out.w"].data
    pe = model.pos_encoding(grid)
    oracle = ((latent.reshape(4, 6) @ w_in + pe) @ w_out).reshape(1, 2, 2, 6)
    np.testing.assert_allclose(out.data, oracle, rtol=1e-5)


def test_unpatchify_zero_tokens_zero_bias_gives_zero_latent():
    model = DiT.init(small_cfg(), seed=0)
    out = model.unpatchify(Tensor(np.zeros((4, 8), dtype=np.float32)), (1, 2, 2))
    assert not out.data.any()
    with pytest.raises(ValueError, match="grid"):
        model.unpatchify(Tensor(np.zeros((3, 8), dtype=np.float32)), (1, 2, 2))


def test_attention_single_token_reduces_to_value_output_path():
    cfg = small_cfg(lora_rank=0)
    model = DiT.init(cfg, seed=1)
    # scrub biases so the algebra is pure W_o (W_v x)
    for name in ("q", "k", "v", "o"):
        model.params[f"base.block0.attn.b{name}"].data[:] = 0.0
    x = np.random.default_rng(2).normal(size=(1, 8)).astype(np.float32)
    out, _ = attention(model.params, "base.block0", None, Tensor(x), cfg)
    wv = model.params["base.block0.attn.wv"].data
    wo = model.params["base.block0.attn.wo"].data
    np.testing.assert_allclose(out.data, x @ wv @ wo, rtol=1e-5)


def test_attention_two_tokens_matches_hand_computation():
    cfg = DiTConfig(dim=2, heads=1, layers=1, ffn_mult=2, max_tokens=4,
                    lora_rank=0, num_classes=1, latent_channels=2)
    model = DiT.init(cfg, seed=0)
    p = model.params
    wq = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    wk = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=np.float32)
    wv = np.array([[2.0, 0.0], [0.0, 3.0]], dtype=np.float32)
    wo = np.array([[1.0, 1.0], [0.0, 1.0]], dtype=np.float32)
    for name, w in (("q", wq), ("k", wk), ("v", wv), ("o", wo)):
        p[f"base.block0.attn.w{name}"].data = w
        p[f"base.block0.attn.b{name}"].data[:] = 0.0
    x = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)
    out, _ = attention(p, "base.block0", None, Tensor(x), cfg)

    q, k, v = x @ wq, x @ wk, x @ wv
    scores = q @ k.T / math.sqrt(2.0)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out.data, (weights @ v) @ wo, rtol=1e-6)


def test_lora_zero_b_output_identical_to_lora_free_model():
    cfg_lora = small_cfg(lora_rank=4)
    cfg_free = small_cfg(lora_rank=0)
    lora_model = DiT.init(cfg_lora, seed=5)
    free_model = DiT.init(cfg_free, seed=5)
    # same backbone weights; adapters differ only in the (zeroed) B path
    for name, p in free_model.params.items():
        lora_model.params[name].data = p.data.copy()
    rng = np.random.default_rng(6)
    for _ in range(10):
        latent = rng.normal(size=(1, 2, 2, 6)).astype(np.float32)
        t = float(rng.uniform())
        a, _ = lora_model.velocity(latent, t, 1)
        b, _ = free_model.velocity(latent, t, 1)
        assert np.array_equal(a.data, b.data)
    tc.reset_graph()


def test_forward_capture_contract():
    model = DiT.init(small_cfg(), seed=0)
    tokens, _ = model.patchify(np.random.default_rng(0).normal(size=(2, 2, 2, 6)).astype(np.float32))
    cond = model.cond_vector(0.5, 1)
    _, none_trace = model.forward_tokens(tokens, cond, capture="none")
    assert none_trace == []
    _, q_trace = model.forward_tokens(tokens, cond, capture="query")
    assert len(q_trace) == 2 and all(t.shape == (8, 8) for t in q_trace)
    _, k_trace = model.forward_tokens(tokens, cond, capture="key")
    assert len(k_trace) == 2
    with pytest.raises(ValueError, match="capture"):
        model.forward_tokens(tokens, cond, capture="bogus")
    tc.reset_graph()


def test_forward_determinism_bit_identical():
    model = DiT.init(small_cfg(), seed=0)
    latent = np.random.default_rng(1).normal(size=(2, 2, 2, 6)).astype(np.float32)
    a, _ = model.velocity(latent, 0.3, 2)
    b, _ = model.velocity(latent, 0.3, 2)
    assert np.array_equal(a.data, b.data)
    tc.reset_graph()


def test_attention_rows_sum_to_one_in_every_layer_and_head(monkeypatch):
    captured = []
    real_softmax = tc.softmax

    def spy(x, axis=-1):
        out = real_softmax(x, axis=axis)
        captured.append(out.data)
        return out

    monkeypatch.setattr(tc, "softmax", spy)
    model = DiT.init(small_cfg(), seed=2)
    latent = np.random.default_rng(3).normal(size=(2, 2, 2, 6)).astype(np.float32)
    model.velocity(latent, 0.7, 1)
    tc.reset_graph()
    assert len(captured) == model.cfg.layers
    for weights in captured:
        assert weights.shape[0] == model.cfg.heads
        np.testing.assert_allclose(weights.sum(axis=-1), np.ones(weights.shape[:2]), atol=1e-6)


def test_token_permutation_equivariance():
    model = DiT.init(small_cfg(), seed=4)
    tokens, _ = model.patchify(np.random.default_rng(5).normal(size=(2, 2, 2, 6)).astype(np.float32))
    cond = model.cond_vector(0.2, 1)
    perm = np.random.default_rng(6).permutation(8)
    out, _ = model.forward_tokens(tokens, cond)
    out_perm, _ = model.forward_tokens(Tensor(tokens.data[perm]), cond)
    np.testing.assert_allclose(out_perm.data, out.data[perm], atol=1e-5)
    tc.reset_graph()


def test_timestep_embedding_contract():
    model = DiT.init(small_cfg(), seed=0)
    a = model.timestep_embed(0.0)
    b = model.timestep_embed(0.0)
    assert np.array_equal(a.data, b.data)
    c = model.timestep_embed(1.0)
    assert not np.array_equal(a.data, c.data)
    with pytest.raises(ValueError, match="outside"):
        model.timestep_embed(1.5)
    with pytest.raises(ValueError, match="outside"):
        model.timestep_embed(-0.1)
    rng = np.random.default_rng(7)
    for t in rng.uniform(0, 1, size=1000):
        emb = model.timestep_embed(float(t))
        assert np.isfinite(emb.data).all()
    tc.reset_graph()


def test_position_encoding_distinct_across_grid():
    pe = sincos_3d((2, 3, 4), 32)
    assert pe.shape == (24, 32)
    assert len(np.unique(pe.round(6), axis=0)) == 24


def test_checkpoint_roundtrip_via_manifest(tmp_path):
    from acd import acdt

    model = DiT.init(small_cfg(), seed=9)
    acdt.save_params(tmp_path / "ckpt", model.export_arrays())
    other = DiT.init(small_cfg(), seed=1)
    other.load_arrays(acdt.load_params(tmp_path / "ckpt"))
    for name, p in model.params.items():
        assert np.array_equal(other.params[name].data, p.data)
