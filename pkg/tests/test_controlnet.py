import numpy as np
import pytest

from acd import tensorcore as tc
from acd.controlnet import ControlBranch, init_control_params
from acd.dit import DiT, DiTConfig, init_dit_params
from acd.tensorcore import Tensor


def build(n_ctrl=1, seed=0, layers=2):
    cfg = DiTConfig(dim=8, heads=2, layers=layers, ffn_mult=2, max_tokens=64,
                    lora_rank=2, lora_alpha=4.0, num_classes=3, latent_channels=6)
    params = init_dit_params(cfg, seed=seed)
    params.update(init_control_params(params, cfg, n_ctrl))
    return cfg, DiT(cfg, params), ControlBranch(cfg, params, n_ctrl)


def test_copied_blocks_start_identical_to_base():
    cfg, model, control = build()
    for name, p in model.params.items():
        if name.startswith("ctrl.block0."):
            base = model.params[name.replace("ctrl.", "base.", 1)]
            assert np.array_equal(p.data, base.data)
    assert not model.params["ctrl.proj0.w"].data.any()
    assert not model.params["ctrl.proj0.b"].data.any()


def test_zero_init_residuals_are_exactly_zero():
    cfg, model, control = build()
    rng = np.random.default_rng(0)
    tokens, _ = model.patchify(rng.normal(size=(2, 2, 2, 6)).astype(np.float32))
    cond = model.cond_vector(0.5, 1)
    layout = Tensor(rng.normal(size=(8, 8)).astype(np.float32))
    residuals = control.forward(tokens, layout, cond)
    assert len(residuals) == 1
    assert not residuals[0].data.any()
    tc.reset_graph()


def test_zero_init_full_model_output_equals_base_model():
    cfg, model, control = build(n_ctrl=2)
    rng = np.random.default_rng(1)
    for _ in range(10):
        latent = rng.normal(size=(2, 2, 2, 6)).astype(np.float32)
        t = float(rng.uniform())
        layout = Tensor(rng.normal(size=(8, 8)).astype(np.float32))
        with_ctrl, _ = model.velocity(latent, t, 1, control=control, layout_tokens=layout)
        base_only, _ = model.velocity(latent, t, 1)
        assert np.array_equal(with_ctrl.data, base_only.data)
    tc.reset_graph()


def test_identity_projection_exposes_copied_block_output():
    cfg, model, control = build()
    model.params["ctrl.proj0.w"].data = np.eye(8, dtype=np.float32)
    rng = np.random.default_rng(2)
    tokens, _ = model.patchify(rng.normal(size=(2, 2, 2, 6)).astype(np.float32))
    cond = model.cond_vector(0.3, 2)
    layout = Tensor(rng.normal(size=(8, 8)).astype(np.float32))
    residuals = control.forward(tokens, layout, cond)

    from acd.dit import block_forward

    expected, _ = block_forward(model.params, "ctrl.block0", None, tokens + layout,
                                cond, cfg)
    np.testing.assert_array_equal(residuals[0].data, expected.data)
    tc.reset_graph()


def test_too_many_copied_blocks_is_config_error():
    cfg = DiTConfig(dim=8, heads=2, layers=2, ffn_mult=2, max_tokens=16,
                    lora_rank=0, num_classes=1, latent_channels=6)
    params = init_dit_params(cfg, seed=0)
    with pytest.raises(ValueError, match="copied blocks"):
        init_control_params(params, cfg, 3)
    with pytest.raises(ValueError, match="copied blocks"):
        ControlBranch(cfg, params, 3)


def test_disabled_branch_refuses_forward():
    cfg, model, control = build()
    control.enabled = False
    tokens, _ = model.patchify(np.zeros((2, 2, 2, 6), dtype=np.float32))
    with pytest.raises(RuntimeError, match="disabled"):
        control.forward(tokens, Tensor(np.zeros((8, 8), dtype=np.float32)),
                        model.cond_vector(0.1, 0))
    tc.reset_graph()


def test_layout_shape_mismatch_rejected():
    cfg, model, control = build()
    tokens, _ = model.patchify(np.zeros((2, 2, 2, 6), dtype=np.float32))
    with pytest.raises(tc.ShapeError, match="layout tokens"):
        control.forward(tokens, Tensor(np.zeros((4, 8), dtype=np.float32)),
                        model.cond_vector(0.1, 0))
    tc.reset_graph()


def test_gradients_reach_ctrl_but_not_frozen_base():
    cfg, model, control = build(n_ctrl=1)
    # emulate training: base frozen, ctrl trainable
    for name, p in model.params.items():
        p.requires_grad = name.startswith("ctrl.")
        p.grad = None
    # move the projection and the copied block's gates off zero so the
    # attention path inside the copied block carries signal
    model.params["ctrl.proj0.w"].data = 0.1 * np.eye(8, dtype=np.float32)
    model.params["ctrl.block0.mod.b"].data[:] = 0.2
    rng = np.random.default_rng(3)
    tokens, grid = model.patchify(rng.normal(size=(2, 2, 2, 6)).astype(np.float32))
    cond = model.cond_vector(0.5, 1)
    residuals = control.forward(tokens, Tensor(rng.normal(size=(8, 8)).astype(np.float32)), cond)
    x, _ = model.forward_tokens(tokens, cond, residuals=residuals)
    out = model.final_layer(x, cond, grid)
    tc.backward(tc.mse(out, Tensor(np.zeros(out.shape, dtype=np.float32))))

    ctrl_grads = [n for n, p in model.params.items()
                  if n.startswith("ctrl.") and p.grad is not None and np.abs(p.grad).sum() > 0]
    base_grads = [n for n, p in model.params.items()
                  if n.startswith("base.") and p.grad is not None]
    assert "ctrl.proj0.w" in ctrl_grads
    assert any(n.startswith("ctrl.block0.attn") for n in ctrl_grads)
    assert base_grads == []
    tc.reset_graph()
