"""Sparse 3D-aware layout signals and their token encoders.

ControlSignals hold three pixel-aligned T x H x W maps: sparse depth
(0 where empty, metric depth normalized to (0,1] on objects), a semantic
category map (0 = background), and the binary object mask. Two small
encoders (one per signal) lift, downsample by the latent patch factors,
and project to the DiT token width; their outputs sum into c_layout.

The attention target map pools the mask to token resolution: temporal
average pooling by pt, then nearest-neighbor (top-left) spatial
downsampling by ps, flattened in patchify's time-major, row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .dit import DiTConfig
from .tensorcore import Tensor


@dataclass
class ControlSignals:
    sparse_depth: np.ndarray   # (T, H, W) float, 0 or (0, 1]
    semantic_map: np.ndarray   # (T, H, W) int category ids, 0 = background
    mask: np.ndarray           # (T, H, W) {0, 1}

    def validate(self) -> "ControlSignals":
        if not (self.sparse_depth.shape == self.semantic_map.shape == self.mask.shape):
            raise ValueError("control signals must share one (T, H, W) shape")
        mask = self.mask.astype(bool)
        if not np.array_equal(mask, self.semantic_map != 0):
            raise ValueError("mask must equal (semantic_map != 0)")
        if np.any((self.sparse_depth > 0) & ~mask):
            raise ValueError("positive depth outside the mask")
        if np.any(self.sparse_depth < 0) or np.any(self.sparse_depth > 1):
            raise ValueError("sparse depth must lie in [0, 1]")
        return self


@dataclass
class TargetMap:
    raw: np.ndarray         # length-N, values in [0, 1]
    normalized: np.ndarray  # length-N, sums to 1


def init_layout_params(cfg: DiTConfig, enc_channels: int, num_categories: int,
                       seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Two encoder branches with separate parameters; biases start at zero and
    the background embedding row is zero, so empty signals encode to zero."""
    rng = np.random.default_rng(seed)
    ch, d = enc_channels, cfg.dim

    def fan_in(shape):
        return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)

    p: dict[str, np.ndarray] = {}
    p["layout.depth.lift.w"] = fan_in((1, ch))
    p["layout.depth.lift.b"] = np.zeros(ch)
    sem_table = rng.normal(0.0, 0.5, size=(num_categories + 1, ch))
    sem_table[0] = 0.0
    p["layout.sem.table"] = sem_table
    for branch in ("depth", "sem"):
        for stage in ("mix1", "mix2"):
            p[f"layout.{branch}.{stage}.w"] = fan_in((ch, ch))
            p[f"layout.{branch}.{stage}.b"] = np.zeros(ch)
        p[f"layout.{branch}.proj.w"] = fan_in((ch, d))
        p[f"layout.{branch}.proj.b"] = np.zeros(d)
    return {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in p.items()}


def _check_grid(shape, pt: int, ps: int):
    T, H, W = shape
    bad = []
    if T % pt:
        bad.append(f"T={T} % pt={pt}")
    if H % ps:
        bad.append(f"H={H} % ps={ps}")
    if W % ps:
        bad.append(f"W={W} % ps={ps}")
    if bad:
        raise ValueError("layout: dims not divisible by patch factors: " + ", ".join(bad))


def _branch_stack(params, branch: str, x: Tensor, pt: int, ps: int, cfg: DiTConfig) -> Tensor:
    """Shared downsample stack: (T, H, W, ch) -> (N, d) tokens.

    Stage 1 pools space by ps, stage 2 pools time by pt; each stage mixes
    channels pointwise and applies silu. A final pointwise projection is the
    patchification to token width.
    """
    x = tc.avg_pool(tc.avg_pool(x, axis=1, stride=ps), axis=2, stride=ps)
    x = tc.silu(x @ params[f"layout.{branch}.mix1.w"] + params[f"layout.{branch}.mix1.b"])
    x = tc.avg_pool(x, axis=0, stride=pt)
    x = tc.silu(x @ params[f"layout.{branch}.mix2.w"] + params[f"layout.{branch}.mix2.b"])
    x = x @ params[f"layout.{branch}.proj.w"] + params[f"layout.{branch}.proj.b"]
    t, h, w, d = x.shape
    return tc.reshape(x, (t * h * w, d))


def encode_layout(params: dict[str, Tensor], signals: ControlSignals, pt: int, ps: int,
                  cfg: DiTConfig, use_depth: bool = True, use_semantic: bool = True,
                  dtype=np.float32) -> Tensor:
    """Encode control signals into c_layout (N x d). Branches sum; either can
    be disabled for ablations, but not both."""
    if not use_depth and not use_semantic:
        raise ValueError("encode_layout: no control signal enabled")
    _check_grid(signals.sparse_depth.shape, pt, ps)
    out = None
    if use_depth:
        depth = Tensor(signals.sparse_depth[..., None].astype(dtype))
        x = depth @ params["layout.depth.lift.w"] + params["layout.depth.lift.b"]
        out = _branch_stack(params, "depth", x, pt, ps, cfg)
    if use_semantic:
        ids = signals.semantic_map.astype(np.int64)
        x = tc.embedding(params["layout.sem.table"], ids)
        sem = _branch_stack(params, "sem", x, pt, ps, cfg)
        out = sem if out is None else out + sem
    return out


def derive_mask(signals: ControlSignals) -> np.ndarray:
    """The union-of-objects binary mask; empty layouts are rejected."""
    mask = signals.mask.astype(np.float32)
    if not mask.any():
        raise ValueError("degenerate layout: no objects visible")
    return mask


def target_map(mask: np.ndarray, pt: int, ps: int) -> TargetMap:
    """Pool a (T, H, W) binary mask to a length-N token target.

    Temporal mean by pt, then top-left representative of each ps x ps cell,
    flattened time-major then row-major to match patchify. The normalized
    variant rescales to sum 1 (the mask is guaranteed nonempty upstream).
    """
    if mask.ndim != 3:
        raise ValueError(f"target_map: expected (T, H, W) mask, got shape {mask.shape}")
    _check_grid(mask.shape, pt, ps)
    T, H, W = mask.shape
    pooled = mask.astype(np.float64).reshape(T // pt, pt, H, W).mean(axis=1)
    sampled = pooled[:, ::ps, ::ps]
    raw = sampled.reshape(-1)
    total = raw.sum()
    if total <= 0:
        raise ValueError("degenerate layout: target map is all zero")
    return TargetMap(raw=raw, normalized=raw / total)
