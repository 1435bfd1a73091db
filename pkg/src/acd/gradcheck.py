"""Finite-difference verification of the op suite and the end-to-end losses.

Everything here runs at 64-bit with h=1e-5 central differences; relative
error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|,
1e-8). The model-level checks differentiate both training losses with
respect to every trainable parameter of a 1-layer, d=8, N=4 system at a
randomized (non-init) point, so the adaLN, attention, FFN, LoRA, control
and layout-encoder paths all carry nonzero signal.
"""

from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .config import RunConfig
from .flow import cfm_loss, noise_sample
from .layout import ControlSignals, encode_layout, target_map
from .tensorcore import Tensor
from .training import attention_loss, build_system

TOLERANCE = 1e-4
STEP = 1e-5


def op_suite_checks(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error for every differentiable op, small shapes."""
    rng = np.random.default_rng(seed)

    def r(*shape):
        return Tensor(rng.normal(0.0, 1.0, size=shape), dtype=np.float64)

    b = r(3, 4)
    b44 = r(4, 4)
    c = r(4, 2)
    gain, bias = r(4), r(4)
    table_ids = np.array([0, 2, 1, 2])
    results = {}

    def check(name, f, x):
        results[name] = tc.grad_check(f, x, h=STEP)

    check("add", lambda x: tc.tsum(tc.mul(tc.add(x, b), b)), r(3, 4))
    check("sub", lambda x: tc.tsum(tc.mul(tc.sub(x, b), b)), r(3, 4))
    check("mul", lambda x: tc.tsum(tc.mul(tc.mul(x, b), b)), r(3, 4))
    check("smul", lambda x: tc.tsum(tc.mul(tc.smul(x, 1.7), b)), r(3, 4))
    check("matmul", lambda x: tc.tsum(tc.mul(tc.matmul(x, c), tc.matmul(x, c))), r(3, 4))
    check("transpose", lambda x: tc.tsum(tc.mul(tc.transpose(x), tc.transpose(x))), r(3, 4))
    check("reshape", lambda x: tc.tsum(tc.mul(tc.reshape(x, (2, 6)), tc.reshape(b, (2, 6)))), r(3, 4))
    check("concat", lambda x: tc.tsum(tc.mul(tc.concat([x, b], axis=0),
                                             tc.concat([b, x], axis=0))), r(3, 4))
    check("split", lambda x: tc.tsum(tc.mul(*tc.split(x, 2, axis=1))), r(3, 4))
    check("softmax", lambda x: tc.tsum(tc.mul(tc.softmax(x, axis=1), b)), r(3, 4))
    check("sum", lambda x: tc.tsum(tc.mul(tc.tsum(x, axis=0), tc.tsum(b, axis=0))), r(3, 4))
    check("mean", lambda x: tc.tsum(tc.mul(tc.tmean(x, axis=1), tc.tmean(b, axis=1))), r(3, 4))
    check("mse", lambda x: tc.mse(x, b), r(3, 4))
    check("layer_norm", lambda x: tc.tsum(tc.mul(tc.layer_norm(x, gain, bias), b)), r(3, 4))
    check("layer_norm_gain", lambda g: tc.tsum(tc.mul(tc.layer_norm(b, g, bias), b)), r(4))
    check("layer_norm_bias", lambda g: tc.tsum(tc.mul(tc.layer_norm(b, gain, g), b)), r(4))
    check("gelu", lambda x: tc.tsum(tc.mul(tc.gelu(x), b)), r(3, 4))
    check("silu", lambda x: tc.tsum(tc.mul(tc.silu(x), b)), r(3, 4))
    check("embedding", lambda t: tc.tsum(tc.mul(tc.embedding(t, table_ids), c)), r(3, 2))
    check("avg_pool", lambda x: tc.tsum(tc.mul(tc.avg_pool(x, axis=0, stride=2),
                                               tc.avg_pool(b44, axis=0, stride=2))),
          r(4, 4))
    check("nn_downsample", lambda x: tc.tsum(tc.mul(tc.nn_downsample(x, 0, 1, 2),
                                                    tc.nn_downsample(b44, 0, 1, 2))),
          r(4, 4))
    return results


def _tiny_config() -> RunConfig:
    return RunConfig(
        dim=8, heads=2, layers=1, ffn_mult=2, max_tokens=16,
        lora_rank=2, lora_alpha=4.0, frames=2, height=4, width=4,
        ctrl_blocks=1, enc_channels=4, seed=0,
    ).validate()


def _randomize(params: dict[str, Tensor], rng: np.random.Generator, scale: float = 0.2):
    """Move every parameter off its init point; zero-initialized gates,
    projections and LoRA B matrices would otherwise hide entire paths."""
    for name in sorted(params):
        p = params[name]
        p.data = rng.normal(0.0, scale, size=p.shape)


def _tiny_problem(seed: int = 0):
    """Model, data and a near-converged evaluation point.

    Both losses are arranged to be small at the check point (broad mask ->
    near-uniform attention target; velocity target placed close to the
    model's current prediction). Central differences quantize in ulps of
    the loss value, so a large loss drowns structurally-zero gradient
    coordinates (softmax maps are invariant to key biases) in rounding
    noise relative to the 1e-8 denominator floor.
    """
    cfg = _tiny_config()
    model, control = build_system(cfg, dtype=np.float64)
    rng = np.random.default_rng(seed + 17)
    _randomize(model.params, rng)
    video = rng.uniform(0.0, 1.0, size=(cfg.frames, cfg.height, cfg.width, 3))
    sem = np.zeros((cfg.frames, cfg.height, cfg.width), dtype=np.int32)
    sem[:, 0:3, 0:4] = 2
    sem[1:, 2:4, 0:3] = 4
    mask = (sem != 0).astype(np.float64)
    depth = np.where(sem != 0, 0.5 + 0.1 * sem, 0.0)
    signals = ControlSignals(sparse_depth=depth, semantic_map=sem, mask=mask).validate()
    from . import latentcodec

    z0 = latentcodec.encode(video, cfg.patch_t, cfg.patch_s)
    t = 0.37
    z_t = noise_sample(z0, rng.normal(size=z0.shape), t)
    z_mask = latentcodec.encode(video * mask[..., None], cfg.patch_t, cfg.patch_s)
    tmap = target_map(mask, cfg.patch_t, cfg.patch_s)

    with tc.no_grad():
        cond = model.cond_vector(t, 2)
        tokens, grid = model.patchify(z_t)
        c_layout = encode_layout(model.params, signals, cfg.patch_t, cfg.patch_s, model.cfg)
        residuals = control.forward(tokens, c_layout, cond)
        x, _ = model.forward_tokens(tokens, cond, residuals=residuals)
        v_now = model.final_layer(x, cond, grid).data
    # velocity target = current prediction plus a small offset, encoded as eps
    eps = z0 - (v_now + 0.15 * rng.normal(size=z0.shape))
    return cfg, model, control, signals, z0, eps, t, z_t, z_mask, tmap


def model_loss_checks(seed: int = 0, log=None) -> dict[str, float]:
    """Finite-difference both losses w.r.t. every trainable parameter."""
    cfg, model, control, signals, z0, eps, t, z_t, z_mask, tmap = _tiny_problem(seed)
    params = model.params

    def loss_diff() -> Tensor:
        cond = model.cond_vector(t, 2)
        tokens, grid = model.patchify(z_t)
        c_layout = encode_layout(params, signals, cfg.patch_t, cfg.patch_s, model.cfg)
        residuals = control.forward(tokens, c_layout, cond)
        x, _ = model.forward_tokens(tokens, cond, residuals=residuals)
        return cfm_loss(model.final_layer(x, cond, grid), z0, eps)

    def loss_attn() -> Tensor:
        cond = model.cond_vector(t, 2)
        tokens, _ = model.patchify(z_t)
        c_layout = encode_layout(params, signals, cfg.patch_t, cfg.patch_s, model.cfg)
        residuals = control.forward(tokens, c_layout, cond)
        _, k_traces = model.forward_tokens(tokens, cond, capture="key", residuals=residuals)
        mask_tokens, _ = model.patchify(z_mask)
        _, q_traces = model.forward_tokens(mask_tokens, cond, capture="query")
        return attention_loss(q_traces, k_traces, tmap.normalized, model.cfg.layers)

    out = {}
    for label, loss_fn in (("L_diff", loss_diff), ("L_attn", loss_attn)):
        out[label] = _check_loss_over_params(loss_fn, params, log=log, label=label)
    return out


def _check_loss_over_params(loss_fn, params: dict[str, Tensor], log=None,
                            label: str = "") -> float:
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    tc.reset_graph()
    loss = loss_fn()
    tc.backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}
    for p in params.values():
        p.grad = None
    tc.reset_graph()

    worst = 0.0
    with tc.no_grad():
        for name in sorted(params):
            p = params[name]
            flat = p.data.reshape(-1)
            grad_flat = analytic[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + STEP
                fp = loss_fn().item()
                flat[i] = orig - STEP
                fm = loss_fn().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * STEP)
                a = grad_flat[i]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
            if log is not None:
                log(f"  {label} {name}: ok (worst so far {worst:.3e})")
    return worst


def run_all(log=print) -> tuple[dict[str, float], bool]:
    """Everything the `grad-check` command reports; returns (errors, all_ok)."""
    errors = op_suite_checks()
    errors.update(model_loss_checks())
    ok = True
    for name in sorted(errors):
        status = "ok" if errors[name] < TOLERANCE else "FAIL"
        if errors[name] >= TOLERANCE:
            ok = False
        log(f"{name:>18s}  max_rel_err={errors[name]:.3e}  [{status}]")
    return errors, ok
