"""Evaluation: PSNR, windowed SSIM, and checkpoint-level reports.

A checkpoint evaluation generates one video per eval sample (guided
sampling conditioned on the sample's layout and prompt class), scores it
against the ground-truth rendering, and separately measures attention
alignment: the attention loss of the dual-stream forward averaged over a
fixed timestep grid. Wall-clock goes to its own file so every report byte
is reproducible from (checkpoint, eval set, seed).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import latentcodec, tensorcore as tc
from .config import RunConfig, load_config
from .flow import SamplerConfig, guided_velocity, noise_sample, sample as flow_sample
from .layout import derive_mask, encode_layout, target_map
from .training import attention_loss, load_system

PSNR_CAP_DB = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
ATTN_T_GRID = tuple(np.round(np.linspace(0.1, 0.9, 9), 10))


def _check_pair(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ")
    for name, x in (("first", a), ("second", b)):
        if x.min() < 0.0 or x.max() > 1.0:
            raise ValueError(f"{op}: {name} input has values outside [0, 1]")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Per-frame 10 log10(1/MSE) in dB, averaged over frames, capped at 99."""
    _check_pair(a, b, "psnr")
    frames = a.reshape(a.shape[0], -1).astype(np.float64)
    other = b.reshape(b.shape[0], -1).astype(np.float64)
    values = []
    for fa, fb in zip(frames, other):
        mse = float(np.mean((fa - fb) ** 2))
        values.append(PSNR_CAP_DB if mse == 0.0 else min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse)))
    return float(np.mean(values))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8) -> float:
    """Mean SSIM over non-overlapping windows, frames and channels.

    Population statistics per window; constants for unit dynamic range.
    """
    _check_pair(a, b, "ssim")
    T, H, W, C = a.shape
    if H < window or W < window:
        raise ValueError(f"ssim: frame {H}x{W} smaller than window {window}")
    hw, ww = H // window, W // window

    def windows(x):
        x = x[:, : hw * window, : ww * window, :].astype(np.float64)
        x = x.reshape(T, hw, window, ww, window, C)
        return x.transpose(0, 1, 3, 5, 2, 4).reshape(T, hw, ww, C, window * window)

    wa, wb = windows(a), windows(b)
    mu_a, mu_b = wa.mean(axis=-1), wb.mean(axis=-1)
    var_a = (wa * wa).mean(axis=-1) - mu_a**2
    var_b = (wb * wb).mean(axis=-1) - mu_b**2
    cov = (wa * wb).mean(axis=-1) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    )
    return float(score.mean())


@dataclass
class EvalRow:
    sample_id: str
    psnr_db: float
    ssim: float
    attn_err: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    mean_psnr: float
    mean_ssim: float
    mean_attn_err: float
    wall_s: float

    def to_csv(self) -> str:
        lines = ["sample_id,psnr_db,ssim,attn_err"]
        for r in self.rows:
            lines.append(f"{r.sample_id},{r.psnr_db:.6f},{r.ssim:.6f},{r.attn_err:.8e}")
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return (
            f"samples: {len(self.rows)}\n"
            f"mean_psnr_db: {self.mean_psnr:.6f}\n"
            f"mean_ssim: {self.mean_ssim:.6f}\n"
            f"mean_attn_err: {self.mean_attn_err:.8e}\n"
        )


def attention_alignment_error(model, control, sample, cfg: RunConfig, eps: np.ndarray) -> float:
    """Attention loss of the dual-stream forward, averaged over a fixed t grid."""
    z0 = latentcodec.encode(sample.rgb, cfg.patch_t, cfg.patch_s).astype(np.float32)
    mask = derive_mask(sample.signals)
    tmap = target_map(mask, cfg.patch_t, cfg.patch_s)
    masked_rgb = sample.rgb * mask[..., None]
    z_mask = latentcodec.encode(masked_rgb, cfg.patch_t, cfg.patch_s).astype(np.float32)
    class_id = int(sample.prompt_class)
    total = 0.0
    with tc.no_grad():
        c_layout = encode_layout(model.params, sample.signals, cfg.patch_t, cfg.patch_s,
                                 model.cfg, use_depth=not cfg.no_depth,
                                 use_semantic=not cfg.no_semantic)
        for t in ATTN_T_GRID:
            z_t = noise_sample(z0, eps, float(t))
            cond = model.cond_vector(float(t), class_id)
            tokens, _ = model.patchify(z_t)
            residuals = control.forward(tokens, c_layout, cond)
            _, k_traces = model.forward_tokens(tokens, cond, capture="key",
                                               residuals=residuals)
            mask_tokens, _ = model.patchify(z_mask)
            _, q_traces = model.forward_tokens(mask_tokens, cond, capture="query")
            total += attention_loss(q_traces, k_traces, tmap.normalized,
                                    model.cfg.layers).item()
    return total / len(ATTN_T_GRID)


def generate_for_sample(model, control, sample, cfg: RunConfig, seed) -> np.ndarray:
    """Sample a video conditioned on the sample's layout and prompt class."""
    with tc.no_grad():
        c_layout = encode_layout(model.params, sample.signals, cfg.patch_t, cfg.patch_s,
                                 model.cfg, use_depth=not cfg.no_depth,
                                 use_semantic=not cfg.no_semantic)
    velocity = guided_velocity(model, control, c_layout, int(sample.prompt_class),
                               cfg.cfg_scale)
    shape = latentcodec.latent_shape(cfg.frames, cfg.height, cfg.width, cfg.channels,
                                     cfg.patch_t, cfg.patch_s)
    sampler = SamplerConfig(steps=cfg.sampler_steps, cfg_scale=cfg.cfg_scale)
    z = flow_sample(velocity, shape, sampler, seed)
    video = latentcodec.decode(z, cfg.patch_t, cfg.patch_s, cfg.channels)
    return np.clip(video, 0.0, 1.0)


def eval_checkpoint(ckpt_dir, dataset: list, out_dir, eval_seed: int = 1000,
                    cfg: RunConfig | None = None, log=None) -> EvalReport:
    """Score a checkpoint on an eval set; writes report.csv, summary.txt and
    timing.txt under out_dir. Deterministic given (checkpoint, set, seed)."""
    t_start = time.perf_counter()
    ckpt = Path(ckpt_dir)
    if cfg is None:
        cfg = load_config(ckpt / "config.txt")
    model, control = load_system(ckpt, cfg)
    rows = []
    for i, sample in enumerate(dataset):
        rng = np.random.default_rng((eval_seed, i))
        eps_shape = latentcodec.latent_shape(cfg.frames, cfg.height, cfg.width,
                                             cfg.channels, cfg.patch_t, cfg.patch_s)
        eps = rng.standard_normal(eps_shape).astype(np.float32)
        video = generate_for_sample(model, control, sample, cfg, seed=(eval_seed, i, 1))
        rows.append(EvalRow(
            sample_id=sample.name or f"sample_{i:05d}",
            psnr_db=psnr(video, sample.rgb),
            ssim=ssim(video, sample.rgb),
            attn_err=attention_alignment_error(model, control, sample, cfg, eps),
        ))
        if log is not None:
            log(f"eval {rows[-1].sample_id}: psnr={rows[-1].psnr_db:.2f} "
                f"ssim={rows[-1].ssim:.4f} attn_err={rows[-1].attn_err:.3e}")
    report = EvalReport(
        rows=rows,
        mean_psnr=float(np.mean([r.psnr_db for r in rows])),
        mean_ssim=float(np.mean([r.ssim for r in rows])),
        mean_attn_err=float(np.mean([r.attn_err for r in rows])),
        wall_s=time.perf_counter() - t_start,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.txt").write_text(report.summary())
    (out / "timing.txt").write_text(f"wall_s: {report.wall_s:.3f}\n")
    return report
