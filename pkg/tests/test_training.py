import math

import numpy as np
import pytest

from acd import tensorcore as tc
from acd.config import RunConfig
from acd.synthdata import generate_scene, render
from acd.tensorcore import Tensor
from acd.training import (
    Adam,
    attention_loss,
    cross_attention_map,
    init_train_state,
    load_checkpoint,
    params_fingerprint,
    response_map,
    run_training,
    save_checkpoint,
    set_trainable,
    train_step,
    trainable_partitions,
)


def tiny_cfg(**kw):
    base = dict(dim=8, heads=2, layers=2, ffn_mult=2, max_tokens=64, lora_rank=2,
                lora_alpha=4.0, frames=4, height=8, width=8, ctrl_blocks=1,
                enc_channels=4, steps=4, batch_size=2, seed=0, sampler_steps=4)
    base.update(kw)
    return RunConfig(**base).validate()


def tiny_dataset(n=3, frames=4, hw=8):
    return [render(generate_scene((123, i), frames=frames, height=hw, width=hw))
            for i in range(n)]


# -- attention map algebra -----------------------------------------------------


def test_cross_attention_map_zero_queries_uniform():
    m = cross_attention_map(Tensor(np.zeros((5, 8))), Tensor(np.random.default_rng(0).normal(size=(5, 8))))
    np.testing.assert_allclose(m.data, np.full((5, 5), 0.2), atol=1e-7)
    tc.reset_graph()


def test_cross_attention_map_single_token():
    m = cross_attention_map(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))))
    np.testing.assert_array_equal(m.data, [[1.0]])


def test_cross_attention_map_hand_values():
    q = np.array([[1.0, 0.0], [0.0, 2.0]])
    k = np.array([[1.0, 1.0], [0.0, 1.0]])
    m = cross_attention_map(Tensor(q), Tensor(k)).data
    scores = q @ k.T / math.sqrt(2.0)
    e = np.exp(scores)
    expected = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(m, expected, rtol=1e-6)


def test_response_map_uniform_and_identity():
    n = 6
    uniform = Tensor(np.full((n, n), 1.0 / n))
    np.testing.assert_allclose(response_map(uniform).data, np.full(n, 1.0 / n), atol=1e-9)
    eye = Tensor(np.eye(n))
    np.testing.assert_allclose(response_map(eye).data, np.full(n, 1.0 / n), atol=1e-9)


def test_response_map_matches_column_mean_oracle_and_sums_to_one():
    rng = np.random.default_rng(1)
    for _ in range(20):
        raw = rng.random((7, 7))
        m = raw / raw.sum(axis=1, keepdims=True)
        resp = response_map(Tensor(m)).data
        oracle = np.array([sum(m[i, j] for i in range(7)) / 7 for j in range(7)])
        np.testing.assert_allclose(resp, oracle, rtol=1e-6)
        assert abs(resp.sum() - 1.0) < 1e-6


def _eq_loss_oracle(qs, ks, target):
    """Loop re-derivation: softmax maps, query-mean response, squared gaps."""
    n_l, n = len(qs), qs[0].shape[0]
    total = 0.0
    for q, k in zip(qs, ks):
        d = q.shape[1]
        scores = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                scores[i, j] = float(q[i] @ k[j]) / math.sqrt(d)
        m = np.zeros((n, n))
        for i in range(n):
            e = np.exp(scores[i] - scores[i].max())
            m[i] = e / e.sum()
        for j in range(n):
            resp_j = sum(m[i, j] for i in range(n)) / n
            total += (resp_j - target[j]) ** 2
    return total / (n_l * n)


def test_attention_loss_matches_loop_oracle():
    rng = np.random.default_rng(2)
    qs = [rng.normal(size=(4, 6)) for _ in range(2)]
    ks = [rng.normal(size=(4, 6)) for _ in range(2)]
    target = rng.random(4)
    target /= target.sum()
    got = attention_loss([Tensor(q) for q in qs], [Tensor(k) for k in ks], target, 2).item()
    assert abs(got - _eq_loss_oracle(qs, ks, target)) < 1e-8


def test_attention_loss_zero_when_response_equals_target():
    # zero queries give uniform maps and uniform responses; uniform target
    qs = [Tensor(np.zeros((4, 6))) for _ in range(2)]
    ks = [Tensor(np.random.default_rng(3).normal(size=(4, 6))) for _ in range(2)]
    target = np.full(4, 0.25)
    assert attention_loss(qs, ks, target, 2).item() < 1e-14
    tc.reset_graph()


def test_attention_loss_missing_trace_names_layer():
    q = [Tensor(np.zeros((4, 6)))]
    k = [Tensor(np.zeros((4, 6)))]
    with pytest.raises(ValueError, match="layer 1"):
        attention_loss(q, k, np.full(4, 0.25), 2)


def test_attention_loss_nonnegative_random_traces():
    rng = np.random.default_rng(4)
    for _ in range(10):
        qs = [Tensor(rng.normal(size=(5, 3)))]
        ks = [Tensor(rng.normal(size=(5, 3)))]
        target = rng.random(5)
        target /= target.sum()
        assert attention_loss(qs, ks, target, 1).item() >= 0.0
    tc.reset_graph()


# -- optimizer -----------------------------------------------------------------


def test_adam_minimizes_quadratic():
    w = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(200):
        tc.backward(tc.tsum(tc.mul(w, w)))
        opt.step()
        opt.zero_grad()
        tc.reset_graph()
    assert np.abs(w.data).max() < 1e-2


def test_adam_skips_frozen_and_gradless():
    w = Tensor(np.ones(2), requires_grad=False)
    opt = Adam({"w": w}, lr=0.5)
    opt.step()
    np.testing.assert_array_equal(w.data, [1.0, 1.0])


# -- mode partitions -----------------------------------------------------------


def test_trainable_partitions_per_mode():
    assert trainable_partitions("joint_train") == {"ctrl", "lora", "layout", "head"}
    assert trainable_partitions("ctrl_branch") == {"ctrl", "layout"}
    assert trainable_partitions("post_train", phase2=False) == {"ctrl", "layout"}
    assert trainable_partitions("post_train", phase2=True) == {"ctrl", "layout", "lora"}


def test_set_trainable_marks_requires_grad():
    state = init_train_state(tiny_cfg(mode="ctrl_branch"))
    frozen = [n for n, p in state.params.items() if not p.requires_grad]
    live = [n for n, p in state.params.items() if p.requires_grad]
    assert all(n.split(".")[0] in ("base", "lora", "head") for n in frozen)
    assert all(n.split(".")[0] in ("ctrl", "layout") for n in live)


# -- train_step ----------------------------------------------------------------


def test_train_step_lambda_attn_zero_means_loss_is_scaled_l_diff():
    cfg = tiny_cfg(mode="ctrl_branch", lambda_diff=1.5)
    state = init_train_state(cfg)
    ds = tiny_dataset()
    rng = np.random.default_rng((cfg.seed, 0))
    losses = train_step(state, ds[:2], rng)
    assert losses["l_attn"] == 0.0
    assert losses["loss"] == pytest.approx(1.5 * losses["l_diff"], rel=1e-6)


def test_train_step_determinism_bitwise():
    ds = tiny_dataset()

    def one_step():
        cfg = tiny_cfg(mode="joint_train")
        state = init_train_state(cfg)
        rng = np.random.default_rng((cfg.seed, 0))
        losses = train_step(state, ds[:2], rng)
        return losses, {k: v.data.copy() for k, v in state.params.items()}

    l1, p1 = one_step()
    l2, p2 = one_step()
    assert l1 == l2
    for name in p1:
        assert np.array_equal(p1[name], p2[name]), name


def test_train_step_skips_empty_mask_samples():
    cfg = tiny_cfg(mode="joint_train")
    state = init_train_state(cfg)
    ds = tiny_dataset()
    import dataclasses

    from acd.layout import ControlSignals

    empty = dataclasses.replace(
        ds[0],
        signals=ControlSignals(
            sparse_depth=np.zeros_like(ds[0].signals.sparse_depth),
            semantic_map=np.zeros_like(ds[0].signals.semantic_map),
            mask=np.zeros_like(ds[0].signals.mask),
        ),
    )
    rng = np.random.default_rng(0)
    losses = train_step(state, [empty, ds[1]], rng)
    assert state.skipped == 1
    assert math.isfinite(losses["loss"])
    with pytest.raises(RuntimeError, match="every sample"):
        train_step(state, [empty], np.random.default_rng(1))


def test_frozen_base_unchanged_by_training(tmp_path):
    cfg = tiny_cfg(mode="joint_train", steps=3)
    state = init_train_state(cfg)
    before = params_fingerprint(state.params, "base.")
    run_training(tiny_dataset(), cfg, tmp_path / "run", state=state)
    assert params_fingerprint(state.params, "base.") == before


def test_attention_loss_gradient_reaches_query_lora_not_base():
    cfg = tiny_cfg(mode="joint_train")
    state = init_train_state(cfg)
    ds = tiny_dataset()
    rng = np.random.default_rng((cfg.seed, 0))
    train_step(state, ds[:2], rng)
    # after one optimizer step the query/key LoRA B matrices must have moved
    moved = [
        name for name, p in state.params.items()
        if name.startswith("lora.") and name.endswith(".b") and np.abs(p.data).sum() > 0
    ]
    assert any(".q." in n or ".k." in n for n in moved), moved


# -- run_training / checkpointing ----------------------------------------------


def test_ctrl_branch_log_has_constant_zero_attn_column(tmp_path):
    cfg = tiny_cfg(mode="ctrl_branch", steps=3)
    run_training(tiny_dataset(), cfg, tmp_path / "run")
    import csv

    rows = list(csv.DictReader(open(tmp_path / "run" / "log.csv")))
    assert len(rows) == 3
    assert all(float(r["L_attn"]) == 0.0 for r in rows)
    assert list(rows[0]) == ["step", "L", "L_diff", "L_attn", "wall_ms"]


def test_post_train_enables_attention_loss_in_phase_two(tmp_path):
    cfg = tiny_cfg(mode="post_train", steps=4)
    run_training(tiny_dataset(), cfg, tmp_path / "run")
    import csv

    rows = list(csv.DictReader(open(tmp_path / "run" / "log.csv")))
    assert all(float(r["L_attn"]) == 0.0 for r in rows[:2])
    assert all(float(r["L_attn"]) > 0.0 for r in rows[2:])


def test_resume_reproduces_next_step_losses_bitwise(tmp_path):
    ds = tiny_dataset()
    cfg = tiny_cfg(mode="joint_train", steps=6, checkpoint_every=3)

    full_state = init_train_state(cfg)
    run_training(ds, cfg, tmp_path / "full", state=full_state)

    # reload the mid-run checkpoint and continue under the same config
    resumed = load_checkpoint(tmp_path / "full" / "ckpt_000003", cfg)
    assert resumed.step == 3
    run_training(ds, cfg, tmp_path / "resumed", state=resumed, log=None)

    import csv

    full_rows = list(csv.DictReader(open(tmp_path / "full" / "log.csv")))
    res_rows = list(csv.DictReader(open(tmp_path / "resumed" / "log.csv")))
    for a, b in zip(full_rows[3:], res_rows):
        assert a["L"] == b["L"] and a["L_diff"] == b["L_diff"] and a["L_attn"] == b["L_attn"]
    for name, p in full_state.params.items():
        assert np.array_equal(p.data, resumed.params[name].data), name


def test_checkpoint_roundtrip_preserves_optimizer_moments(tmp_path):
    cfg = tiny_cfg(steps=2)
    state = init_train_state(cfg)
    run_training(tiny_dataset(), cfg, tmp_path / "run", state=state)
    save_checkpoint(tmp_path / "ck", state)
    loaded = load_checkpoint(tmp_path / "ck", cfg)
    for name in state.params:
        assert np.array_equal(loaded.opt.m[name], state.opt.m[name].astype(np.float32))
        assert loaded.opt.t[name] == state.opt.t[name]
