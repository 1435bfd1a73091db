"""Miniature diffusion transformer over latent-video tokens.

Latents are flattened time-major then row-major into N x d tokens, run
through adaLN-conditioned full-attention blocks, and projected back to the
latent grid by the velocity head. Each attention projection carries an
optional LoRA adapter (W + (alpha/r) * A @ B, B zero at init). A forward
pass can capture the full-width Q or K projection of every layer, which is
what the attention-supervision loss consumes.

Parameters live in a flat name -> Tensor dict. Prefixes mark partitions:
``base.`` (frozen backbone), ``lora.``, ``head.`` (final layer); the
control branch (``ctrl.``) and layout encoders (``layout.``) are built in
their own modules but share this dict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .config import RunConfig
from .tensorcore import Tensor


@dataclass
class DiTConfig:
    dim: int = 32
    heads: int = 4
    layers: int = 4
    ffn_mult: int = 4
    max_tokens: int = 256
    lora_rank: int = 4
    lora_alpha: float = 8.0
    num_classes: int = 5
    latent_channels: int = 24

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} not divisible by heads={self.heads}")
        if self.lora_rank < 0:
            raise ValueError("lora_rank must be >= 0")

    @classmethod
    def from_run(cls, cfg: RunConfig) -> "DiTConfig":
        return cls(
            dim=cfg.dim,
            heads=cfg.heads,
            layers=cfg.layers,
            ffn_mult=cfg.ffn_mult,
            max_tokens=cfg.max_tokens,
            lora_rank=cfg.lora_rank,
            lora_alpha=cfg.lora_alpha,
            num_classes=cfg.num_classes,
            latent_channels=cfg.latent_channels,
        )


CAPTURE_MODES = ("none", "query", "key")


def _sincos_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    args = pos[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def sincos_3d(grid: tuple[int, int, int], dim: int) -> np.ndarray:
    """Fixed position encoding over a (t, h, w) grid, flattened like patchify."""
    if dim < 6 or dim % 2:
        raise ValueError(f"position encoding needs even dim >= 6, got {dim}")
    d_t = max(2, 2 * (dim // 6))
    d_h = d_t
    d_w = dim - d_t - d_h
    t, h, w = grid
    tt, hh, ww = np.meshgrid(np.arange(t), np.arange(h), np.arange(w), indexing="ij")
    parts = [
        _sincos_1d(tt.reshape(-1).astype(np.float64), d_t),
        _sincos_1d(hh.reshape(-1).astype(np.float64), d_h),
        _sincos_1d(ww.reshape(-1).astype(np.float64), d_w),
    ]
    return np.concatenate(parts, axis=1)


def init_dit_params(cfg: DiTConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Seeded parameter init. adaLN modulations and LoRA B start at zero, so
    every block begins as an identity residual and adapters begin inert."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def fan_in(shape):
        # 1/sqrt(fan-in): the backbone stays frozen, so these scales are
        # permanent; token content and conditioning must start at O(1)
        return rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)

    d, c = cfg.dim, cfg.latent_channels
    p["base.patchify.w"] = fan_in((c, d))
    p["base.patchify.b"] = np.zeros(d)
    p["base.time_mlp.w1"] = fan_in((d, d))
    p["base.time_mlp.b1"] = np.zeros(d)
    p["base.time_mlp.w2"] = fan_in((d, d))
    p["base.time_mlp.b2"] = np.zeros(d)
    p["base.context.table"] = rng.normal(0.0, 0.3, size=(cfg.num_classes + 1, d))
    for i in range(cfg.layers):
        pfx = f"base.block{i}"
        p[f"{pfx}.mod.w"] = np.zeros((d, 6 * d))
        p[f"{pfx}.mod.b"] = np.zeros(6 * d)
        for name in ("q", "k", "v", "o"):
            p[f"{pfx}.attn.w{name}"] = fan_in((d, d))
            p[f"{pfx}.attn.b{name}"] = np.zeros(d)
        hid = d * cfg.ffn_mult
        p[f"{pfx}.ffn.w1"] = fan_in((d, hid))
        p[f"{pfx}.ffn.b1"] = np.zeros(hid)
        p[f"{pfx}.ffn.w2"] = fan_in((hid, d))
        p[f"{pfx}.ffn.b2"] = np.zeros(d)
        if cfg.lora_rank > 0:
            for name in ("q", "k", "v", "o"):
                p[f"lora.block{i}.{name}.a"] = fan_in((d, cfg.lora_rank))
                p[f"lora.block{i}.{name}.b"] = np.zeros((cfg.lora_rank, d))
    p["head.final_mod.w"] = np.zeros((d, 2 * d))
    p["head.final_mod.b"] = np.zeros(2 * d)
    # small random (not zero): the ctrl_branch / post_train modes freeze the
    # head, and a zero frozen head would pin the velocity to zero forever
    p["head.out.w"] = fan_in((d, c))
    p["head.out.b"] = np.zeros(c)
    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in p.items()}


def _lora_delta(params, lora_pfx: str, name: str, x: Tensor, cfg: DiTConfig) -> Tensor:
    a = params[f"{lora_pfx}.{name}.a"]
    b = params[f"{lora_pfx}.{name}.b"]
    return tc.smul((x @ a) @ b, cfg.lora_alpha / cfg.lora_rank)


def _attn_proj(params, pfx: str, lora_pfx: str | None, name: str, x: Tensor, cfg: DiTConfig) -> Tensor:
    y = x @ params[f"{pfx}.attn.w{name}"] + params[f"{pfx}.attn.b{name}"]
    if lora_pfx is not None and cfg.lora_rank > 0:
        y = y + _lora_delta(params, lora_pfx, name, x, cfg)
    return y


def attention(params, pfx: str, lora_pfx: str | None, x: Tensor, cfg: DiTConfig,
              capture: str = "none") -> tuple[Tensor, Tensor | None]:
    """Full multi-head self-attention. Returns (output, captured Q or K).

    The captured projection is the full d-width Q or K (bias and LoRA
    included, before the head split) so supervision sees exactly what the
    layer computes from its tokens.
    """
    n, d = x.shape
    nh, dh = cfg.heads, cfg.dim // cfg.heads
    q = _attn_proj(params, pfx, lora_pfx, "q", x, cfg)
    k = _attn_proj(params, pfx, lora_pfx, "k", x, cfg)
    v = _attn_proj(params, pfx, lora_pfx, "v", x, cfg)
    captured = {"query": q, "key": k}.get(capture)

    def heads(z):
        return tc.transpose(tc.reshape(z, (n, nh, dh)), (1, 0, 2))

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = tc.smul(qh @ tc.transpose(kh, (0, 2, 1)), 1.0 / math.sqrt(dh))
    weights = tc.softmax(scores, axis=-1)
    merged = tc.reshape(tc.transpose(weights @ vh, (1, 0, 2)), (n, d))
    out = merged @ params[f"{pfx}.attn.wo"] + params[f"{pfx}.attn.bo"]
    if lora_pfx is not None and cfg.lora_rank > 0:
        out = out + _lora_delta(params, lora_pfx, "o", merged, cfg)
    return out, captured


def block_forward(params, pfx: str, lora_pfx: str | None, x: Tensor, cond: Tensor,
                  cfg: DiTConfig, capture: str = "none") -> tuple[Tensor, Tensor | None]:
    """adaLN -> attention -> adaLN -> FFN, both residual and gate-scaled."""
    mod = tc.silu(cond) @ params[f"{pfx}.mod.w"] + params[f"{pfx}.mod.b"]
    shift1, scale1, gate1, shift2, scale2, gate2 = tc.split(mod, 6, axis=1)
    h = tc.layer_norm(x) * (scale1 + 1.0) + shift1
    attn_out, captured = attention(params, pfx, lora_pfx, h, cfg, capture)
    x = x + attn_out * gate1
    h2 = tc.layer_norm(x) * (scale2 + 1.0) + shift2
    f = tc.gelu(h2 @ params[f"{pfx}.ffn.w1"] + params[f"{pfx}.ffn.b1"])
    f = f @ params[f"{pfx}.ffn.w2"] + params[f"{pfx}.ffn.b2"]
    x = x + f * gate2
    return x, captured


class DiT:
    def __init__(self, cfg: DiTConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self._pe_cache: dict[tuple, np.ndarray] = {}

    @classmethod
    def init(cls, cfg: DiTConfig, seed: int = 0, dtype=np.float32) -> "DiT":
        return cls(cfg, init_dit_params(cfg, seed, dtype))

    def _dtype(self):
        return self.params["base.patchify.w"].dtype

    def pos_encoding(self, grid: tuple[int, int, int]) -> np.ndarray:
        key = (grid, self.cfg.dim)
        if key not in self._pe_cache:
            self._pe_cache[key] = sincos_3d(grid, self.cfg.dim).astype(self._dtype())
        return self._pe_cache[key]

    def patchify(self, latent: np.ndarray) -> tuple[Tensor, tuple[int, int, int]]:
        """Latent (t, h, w, c) -> (N, d) tokens; learned lift plus fixed sincos."""
        t, h, w, c = latent.shape
        if c != self.cfg.latent_channels:
            raise ValueError(
                f"patchify: latent channels {c} != configured {self.cfg.latent_channels}"
            )
        n = t * h * w
        if n == 0:
            raise ValueError("patchify: empty latent")
        if n > self.cfg.max_tokens:
            raise ValueError(f"patchify: {n} tokens exceed max_tokens={self.cfg.max_tokens}")
        flat = Tensor(np.ascontiguousarray(latent.reshape(n, c), dtype=self._dtype()))
        tokens = flat @ self.params["base.patchify.w"] + self.params["base.patchify.b"]
        return tokens + Tensor(self.pos_encoding((t, h, w))), (t, h, w)

    def unpatchify(self, tokens: Tensor, grid: tuple[int, int, int]) -> Tensor:
        """Linear output head back to the latent grid."""
        t, h, w = grid
        if tokens.shape[0] != t * h * w:
            raise ValueError(f"unpatchify: {tokens.shape[0]} tokens cannot fill grid {grid}")
        y = tokens @ self.params["head.out.w"] + self.params["head.out.b"]
        return tc.reshape(y, (t, h, w, self.cfg.latent_channels))

    def timestep_embed(self, t: float) -> Tensor:
        """Sinusoidal features of t in [0,1] through a 2-layer MLP; shape (1, d)."""
        t = float(t)
        if not (0.0 <= t <= 1.0):
            raise ValueError(f"timestep_embed: t={t} outside [0, 1]")
        d = self.cfg.dim
        half = d // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
        args = 1000.0 * t * freqs
        feats = np.concatenate([np.sin(args), np.cos(args)])[None, :].astype(self._dtype())
        h = tc.silu(Tensor(feats) @ self.params["base.time_mlp.w1"] + self.params["base.time_mlp.b1"])
        return h @ self.params["base.time_mlp.w2"] + self.params["base.time_mlp.b2"]

    def context_embed(self, class_id: int) -> Tensor:
        if not (0 <= class_id <= self.cfg.num_classes):
            raise ValueError(
                f"context_embed: class {class_id} outside 0..{self.cfg.num_classes} (0 is null)"
            )
        return tc.embedding(self.params["base.context.table"], np.array([class_id]))

    def cond_vector(self, t: float, class_id: int) -> Tensor:
        return self.timestep_embed(t) + self.context_embed(class_id)

    def forward_tokens(self, tokens: Tensor, cond: Tensor, capture: str = "none",
                       residuals: list[Tensor] | None = None) -> tuple[Tensor, list[Tensor]]:
        """Run all blocks; returns final tokens and per-layer captured Q or K.

        `residuals` (from the control branch) are added to the stream right
        after the corresponding block, one per copied block.
        """
        if capture not in CAPTURE_MODES:
            raise ValueError(f"capture must be one of {CAPTURE_MODES}, got {capture!r}")
        x = tokens
        traces: list[Tensor] = []
        for i in range(self.cfg.layers):
            lora_pfx = f"lora.block{i}" if self.cfg.lora_rank > 0 else None
            x, captured = block_forward(self.params, f"base.block{i}", lora_pfx, x, cond,
                                        self.cfg, capture)
            if residuals is not None and i < len(residuals):
                x = x + residuals[i]
            if captured is not None:
                traces.append(captured)
        return x, traces

    def final_layer(self, tokens: Tensor, cond: Tensor, grid: tuple[int, int, int]) -> Tensor:
        mod = tc.silu(cond) @ self.params["head.final_mod.w"] + self.params["head.final_mod.b"]
        shift, scale = tc.split(mod, 2, axis=1)
        h = tc.layer_norm(tokens) * (scale + 1.0) + shift
        return self.unpatchify(h, grid)

    def velocity(self, latent: np.ndarray, t: float, class_id: int,
                 control=None, layout_tokens: Tensor | None = None,
                 capture: str = "none") -> tuple[Tensor, list[Tensor]]:
        """Full denoiser: latent in, predicted velocity out (same shape).

        `control` is an optional ControlBranch; its residuals are computed
        from these tokens plus `layout_tokens` and injected block-wise.
        """
        tokens, grid = self.patchify(latent)
        cond = self.cond_vector(t, class_id)
        residuals = None
        if control is not None:
            residuals = control.forward(tokens, layout_tokens, cond)
        x, traces = self.forward_tokens(tokens, cond, capture, residuals)
        return self.final_layer(x, cond, grid), traces

    # -- checkpoint glue ---------------------------------------------------

    def export_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, t in self.params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name}")
            if arrays[name].shape != t.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {name}: {arrays[name].shape} vs {t.shape}"
                )
            t.data = arrays[name].astype(t.dtype)
