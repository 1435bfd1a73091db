"""Sparse layout control branch: trainable copies of the first DiT blocks.

The branch consumes the base stream's input tokens plus the layout tokens,
runs its copied blocks, and emits one zero-projected residual per block.
The base model adds residual i right after its frozen block i, so at
initialization (all projections zero) the full model is exactly the base
model. Copied blocks carry no LoRA; they are trainable in full.
"""

from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .dit import DiTConfig, block_forward
from .tensorcore import Tensor


def init_control_params(base_params: dict[str, Tensor], cfg: DiTConfig, n_blocks: int,
                        dtype=np.float32) -> dict[str, Tensor]:
    """Copy the first n_blocks base blocks and add zero-initialized projections."""
    if n_blocks > cfg.layers:
        raise ValueError(f"control branch: {n_blocks} copied blocks > {cfg.layers} layers")
    out: dict[str, Tensor] = {}
    for i in range(n_blocks):
        src = f"base.block{i}."
        for name, tensor in base_params.items():
            if name.startswith(src):
                copied = name.replace("base.", "ctrl.", 1)
                out[copied] = Tensor(tensor.data.astype(dtype, copy=True), requires_grad=True)
        d = cfg.dim
        out[f"ctrl.proj{i}.w"] = Tensor(np.zeros((d, d), dtype=dtype), requires_grad=True)
        out[f"ctrl.proj{i}.b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
    return out


class ControlBranch:
    def __init__(self, cfg: DiTConfig, params: dict[str, Tensor], n_blocks: int,
                 enabled: bool = True):
        if n_blocks > cfg.layers:
            raise ValueError(f"control branch: {n_blocks} copied blocks > {cfg.layers} layers")
        self.cfg = cfg
        self.params = params
        self.n_blocks = n_blocks
        self.enabled = enabled

    def forward(self, tokens: Tensor, c_layout: Tensor, cond: Tensor) -> list[Tensor]:
        """Residual token maps, one per copied block."""
        if not self.enabled:
            raise RuntimeError("control branch is disabled")
        if c_layout is None:
            raise ValueError("control branch requires layout tokens")
        if c_layout.shape != tokens.shape:
            raise tc.ShapeError(
                f"control branch: layout tokens {c_layout.shape} != stream tokens {tokens.shape}"
            )
        x = tokens + c_layout
        residuals = []
        for i in range(self.n_blocks):
            x, _ = block_forward(self.params, f"ctrl.block{i}", None, x, cond, self.cfg)
            residuals.append(x @ self.params[f"ctrl.proj{i}.w"] + self.params[f"ctrl.proj{i}.b"])
        return residuals
