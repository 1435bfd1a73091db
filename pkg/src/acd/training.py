"""Attention-conditional training: dual-stream forwards, attention loss, Adam.

Each step runs two forwards through the shared denoiser: the noisy stream
(z_t plus control-branch injection) captures per-layer key projections and
feeds the velocity loss; the masked clean stream (pixels gated by the
layout mask, then encoded) captures query projections. Per layer, the
cross-attention map softmax(Q_mask K^T / sqrt(d)) is averaged over queries
into a response map and regressed onto the pooled layout target; the total
objective is lambda_diff * L_diff + lambda_attn * L_attn.

Training modes:
  joint_train  - control branch, LoRA, layout encoders and head together,
                 attention loss from step 0
  post_train   - phase 1 trains control branch + layout encoders only;
                 phase 2 (second half) adds LoRA and the attention loss
  ctrl_branch  - control branch + layout encoders only, no attention loss

The base backbone is frozen in every mode.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import acdt, latentcodec, tensorcore as tc
from .config import RunConfig
from .controlnet import ControlBranch, init_control_params
from .dit import DiT, DiTConfig, init_dit_params
from .flow import cfm_loss, noise_sample
from .layout import ControlSignals, encode_layout, derive_mask, init_layout_params, target_map
from .tensorcore import Tensor

PARTITIONS = ("base", "ctrl", "lora", "layout", "head")

_TRAINABLE = {
    "joint_train": {"ctrl", "lora", "layout", "head"},
    "ctrl_branch": {"ctrl", "layout"},
    "post_train_phase1": {"ctrl", "layout"},
    "post_train_phase2": {"ctrl", "layout", "lora"},
}


def partition_of(name: str) -> str:
    head = name.split(".", 1)[0]
    if head not in PARTITIONS:
        raise ValueError(f"parameter {name!r} has unknown partition {head!r}")
    return head


def trainable_partitions(mode: str, phase2: bool = False) -> set[str]:
    if mode == "post_train":
        return set(_TRAINABLE["post_train_phase2" if phase2 else "post_train_phase1"])
    return set(_TRAINABLE[mode])


def set_trainable(params: dict[str, Tensor], partitions: set[str]):
    for name, p in params.items():
        p.requires_grad = partition_of(name) in partitions
        p.grad = None


def params_fingerprint(params: dict[str, Tensor], prefix: str = "") -> str:
    """SHA-256 over the raw bytes of all matching parameters (sorted by name)."""
    h = hashlib.sha256()
    for name in sorted(params):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


# -- attention supervision ---------------------------------------------------


def cross_attention_map(q_mask: Tensor, k: Tensor) -> Tensor:
    """Row-stochastic N x N map: softmax over keys of Q_mask K^T / sqrt(d)."""
    if q_mask.ndim != 2 or k.ndim != 2 or q_mask.shape[1] != k.shape[1]:
        raise tc.ShapeError(
            f"cross_attention_map: shapes {q_mask.shape} and {k.shape} do not pair"
        )
    d = q_mask.shape[1]
    return tc.softmax(tc.smul(q_mask @ tc.transpose(k), 1.0 / math.sqrt(d)), axis=-1)


def response_map(m: Tensor) -> Tensor:
    """Mean over the query axis: the attention budget each key token receives."""
    return tc.tmean(m, axis=0)


def attention_loss(q_traces: list[Tensor], k_traces: list[Tensor],
                   target_normalized: np.ndarray, n_layers: int) -> Tensor:
    """Sum of squared response-vs-target gaps over layers and tokens, scaled
    by 1 / (n_layers * N). Targets are the sum-normalized pooled mask so a
    perfectly concentrated response can reach zero loss."""
    for i in range(n_layers):
        if i >= len(q_traces) or q_traces[i] is None:
            raise ValueError(f"attention loss: missing query trace for layer {i}")
        if i >= len(k_traces) or k_traces[i] is None:
            raise ValueError(f"attention loss: missing key trace for layer {i}")
    n = q_traces[0].shape[0]
    target = Tensor(np.asarray(target_normalized, dtype=q_traces[0].dtype))
    total = None
    for q, k in zip(q_traces[:n_layers], k_traces[:n_layers]):
        resp = response_map(cross_attention_map(q, k))
        diff = resp - target
        term = tc.tsum(diff * diff)
        total = term if total is None else total + term
    return tc.smul(total, 1.0 / (n_layers * n))


# -- optimizer ---------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = {k: 0 for k in params}

    def step(self):
        """Update every parameter that has a gradient. Bias correction uses
        per-parameter step counts so partitions joining mid-run start fresh."""
        for name in sorted(self.params):
            p = self.params[name]
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise tc.NonFiniteError(f"adam: non-finite gradient for {name}")
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[name] / (1.0 - self.beta1**t)
            vhat = self.v[name] / (1.0 - self.beta2**t)
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def export_state(self) -> tuple[dict[str, np.ndarray], dict[str, int]]:
        arrays = {}
        for name in self.params:
            arrays[f"adam_m.{name}"] = self.m[name]
            arrays[f"adam_v.{name}"] = self.v[name]
        return arrays, dict(self.t)

    def load_state(self, arrays: dict[str, np.ndarray], counts: dict[str, int]):
        for name, p in self.params.items():
            self.m[name] = arrays[f"adam_m.{name}"].astype(p.dtype)
            self.v[name] = arrays[f"adam_v.{name}"].astype(p.dtype)
            self.t[name] = int(counts.get(name, 0))


# -- model assembly ----------------------------------------------------------


def build_system(cfg: RunConfig, dtype=np.float32) -> tuple[DiT, ControlBranch]:
    """Initialize the full parameter set (backbone, LoRA, head, control branch,
    layout encoders) in one shared dict."""
    dcfg = DiTConfig.from_run(cfg)
    params = init_dit_params(dcfg, seed=cfg.seed, dtype=dtype)
    params.update(init_control_params(params, dcfg, cfg.ctrl_blocks, dtype=dtype))
    params.update(init_layout_params(dcfg, cfg.enc_channels, cfg.num_classes,
                                     seed=cfg.seed + 1, dtype=dtype))
    model = DiT(dcfg, params)
    control = ControlBranch(dcfg, params, cfg.ctrl_blocks)
    return model, control


def load_system(ckpt_dir, cfg: RunConfig) -> tuple[DiT, ControlBranch]:
    model, control = build_system(cfg)
    arrays = acdt.load_params(ckpt_dir, names=list(model.params))
    model.load_arrays(arrays)
    return model, control


# -- training loop -----------------------------------------------------------


@dataclass
class TrainState:
    model: DiT
    control: ControlBranch
    opt: Adam
    cfg: RunConfig
    step: int = 0
    skipped: int = 0
    phase2_start: int | None = None

    @property
    def params(self) -> dict[str, Tensor]:
        return self.model.params

    def attn_active(self) -> bool:
        if self.cfg.mode == "joint_train":
            return True
        if self.cfg.mode == "post_train":
            return self.phase2_start is not None and self.step >= self.phase2_start
        return False

    def apply_mode(self):
        phase2 = self.cfg.mode == "post_train" and self.attn_active()
        set_trainable(self.params, trainable_partitions(self.cfg.mode, phase2))


def init_train_state(cfg: RunConfig, dtype=np.float32) -> TrainState:
    model, control = build_system(cfg, dtype=dtype)
    opt = Adam(model.params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    state = TrainState(model=model, control=control, opt=opt, cfg=cfg)
    if cfg.mode == "post_train":
        state.phase2_start = cfg.steps // 2
    state.apply_mode()
    return state


WARMUP_STEPS = 20


def lr_at(cfg: RunConfig, step: int) -> float:
    """Stateless schedule: linear warmup, then cosine decay to 5% of base."""
    scale = min(1.0, (step + 1) / WARMUP_STEPS)
    if cfg.lr_schedule == "constant":
        return cfg.lr * scale
    floor = 0.05 * cfg.lr
    return scale * (floor + 0.5 * (cfg.lr - floor) * (1.0 + math.cos(math.pi * step / cfg.steps)))


def _encode_sample(video: np.ndarray, cfg: RunConfig) -> np.ndarray:
    return latentcodec.encode(video, cfg.patch_t, cfg.patch_s).astype(np.float32)


def train_step(state: TrainState, batch: list, rng: np.random.Generator) -> dict:
    """One optimization step over a batch of samples.

    Per sample, draws (t, eps, conditioning-dropout) in a fixed order from
    `rng`, so identical (seed, step) pairs reproduce bit-identical steps.
    Batch items need .rgb, .signals, .prompt_class.
    """
    cfg = state.cfg
    model, control = state.model, state.control
    attn_active = state.attn_active()
    lam_attn = cfg.lambda_attn if attn_active else 0.0

    diff_terms: list[Tensor] = []
    attn_terms: list[Tensor] = []
    for sample in batch:
        t = float(rng.uniform(0.0, 1.0))
        z0 = _encode_sample(sample.rgb, cfg)
        eps = rng.standard_normal(z0.shape).astype(np.float32)
        dropped = bool(rng.uniform() < cfg.cfg_dropout)
        try:
            mask = derive_mask(sample.signals)
        except ValueError:
            state.skipped += 1
            continue
        z_t = noise_sample(z0, eps, t)

        class_id = 0 if dropped else int(sample.prompt_class)
        cond = model.cond_vector(t, class_id)
        tokens, grid = model.patchify(z_t)
        residuals = None
        if not dropped:
            c_layout = encode_layout(model.params, sample.signals, cfg.patch_t, cfg.patch_s,
                                     model.cfg, use_depth=not cfg.no_depth,
                                     use_semantic=not cfg.no_semantic)
            residuals = control.forward(tokens, c_layout, cond)
        x, k_traces = model.forward_tokens(tokens, cond, capture="key", residuals=residuals)
        v_pred = model.final_layer(x, cond, grid)
        diff_terms.append(cfm_loss(v_pred, z0, eps))

        if attn_active:
            masked_video = sample.rgb * mask[..., None]
            z_mask = _encode_sample(masked_video, cfg)
            mask_tokens, _ = model.patchify(z_mask)
            _, q_traces = model.forward_tokens(mask_tokens, cond, capture="query")
            tmap = target_map(mask, cfg.patch_t, cfg.patch_s)
            attn_terms.append(
                attention_loss(q_traces, k_traces, tmap.normalized, model.cfg.layers)
            )

    if not diff_terms:
        raise RuntimeError(f"train step {state.step}: every sample in the batch was skipped")

    l_diff = diff_terms[0]
    for term in diff_terms[1:]:
        l_diff = l_diff + term
    l_diff = tc.smul(l_diff, 1.0 / len(diff_terms))

    l_attn = None
    if attn_terms:
        l_attn = attn_terms[0]
        for term in attn_terms[1:]:
            l_attn = l_attn + term
        l_attn = tc.smul(l_attn, 1.0 / len(attn_terms))

    loss = tc.smul(l_diff, cfg.lambda_diff)
    if l_attn is not None and lam_attn > 0.0:
        loss = loss + tc.smul(l_attn, lam_attn)

    loss_value = loss.item()
    if not math.isfinite(loss_value):
        raise tc.NonFiniteError(f"train step {state.step}: non-finite loss {loss_value}")

    tc.backward(loss)
    state.opt.step()
    state.opt.zero_grad()
    tc.reset_graph()

    return {
        "loss": loss_value,
        "l_diff": l_diff.item(),
        "l_attn": l_attn.item() if l_attn is not None else 0.0,
    }


def save_checkpoint(ckpt_dir, state: TrainState):
    arrays = state.model.export_arrays()
    opt_arrays, counts = state.opt.export_state()
    arrays.update(opt_arrays)
    acdt.save_params(ckpt_dir, arrays)
    meta = {"step": state.step, "skipped": state.skipped, "adam_t": counts}
    (Path(ckpt_dir) / "state.txt").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    # checkpoints are self-contained: eval rebuilds the exact model from this
    (Path(ckpt_dir) / "config.txt").write_text(state.cfg.to_text())


def load_checkpoint(ckpt_dir, cfg: RunConfig) -> TrainState:
    state = init_train_state(cfg)
    arrays = acdt.load_params(ckpt_dir, names=list(state.params))
    state.model.load_arrays(arrays)
    meta = json.loads((Path(ckpt_dir) / "state.txt").read_text())
    state.opt.load_state(arrays, meta["adam_t"])
    state.step = int(meta["step"])
    state.skipped = int(meta.get("skipped", 0))
    state.apply_mode()
    return state


def run_training(dataset: list, cfg: RunConfig, out_dir,
                 state: TrainState | None = None, log=None) -> Path:
    """Train for cfg.steps steps; write per-step CSV, periodic checkpoints and
    a final one. Returns the final checkpoint path.

    The CSV wall_ms column is timing diagnostics and is the one run artifact
    that is not reproducible bit-for-bit; all tensors and loss columns are.
    """
    if not dataset:
        raise ValueError("run_training: empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())

    if state is None:
        state = init_train_state(cfg)
    base_hash = params_fingerprint(state.params, "base.")

    log_path = out / "log.csv"
    resuming = log_path.exists() and state.step > 0
    with open(log_path, "a" if resuming else "w") as logf:
        if not resuming:
            logf.write("step,L,L_diff,L_attn,wall_ms\n")
        while state.step < cfg.steps:
            state.apply_mode()
            state.opt.lr = lr_at(cfg, state.step)
            rng = np.random.default_rng((cfg.seed, state.step))
            idx = rng.integers(0, len(dataset), size=cfg.batch_size)
            batch = [dataset[int(i)] for i in idx]
            t0 = time.perf_counter()
            losses = train_step(state, batch, rng)
            wall_ms = (time.perf_counter() - t0) * 1e3
            state.step += 1
            logf.write(
                f"{state.step},{losses['loss']:.8e},{losses['l_diff']:.8e},"
                f"{losses['l_attn']:.8e},{wall_ms:.1f}\n"
            )
            if log is not None and (state.step % 50 == 0 or state.step == 1):
                log(f"step {state.step}/{cfg.steps} L={losses['loss']:.4f} "
                    f"L_diff={losses['l_diff']:.4f} L_attn={losses['l_attn']:.4f}")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{state.step:06d}", state)

    if params_fingerprint(state.params, "base.") != base_hash:
        raise RuntimeError("frozen base parameters changed during training")
    final = out / "ckpt_final"
    save_checkpoint(final, state)
    return final
