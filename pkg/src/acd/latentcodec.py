"""Invertible pixel<->latent codec via space-time-to-depth rearrangement.

A video (T, H, W, C) becomes a latent video (T/pt, H/ps, W/ps, C*pt*ps^2)
by folding each pt x ps x ps patch into the channel axis. Pure reindexing:
encode is linear, decode is its exact inverse, and roundtrips are
bit-exact. The diffusion model operates in this latent space.
"""

from __future__ import annotations

import numpy as np


def _check_divisible(T, H, W, pt, ps):
    problems = []
    if T % pt:
        problems.append(f"T={T} not divisible by pt={pt}")
    if H % ps:
        problems.append(f"H={H} not divisible by ps={ps}")
    if W % ps:
        problems.append(f"W={W} not divisible by ps={ps}")
    if problems:
        raise ValueError("latentcodec: " + "; ".join(problems))


def encode(video: np.ndarray, pt: int = 2, ps: int = 2) -> np.ndarray:
    """(T, H, W, C) -> (T/pt, H/ps, W/ps, C*pt*ps*ps), channel order (dt, dy, dx, c)."""
    if video.ndim != 4:
        raise ValueError(f"latentcodec: expected 4-D video, got shape {video.shape}")
    T, H, W, C = video.shape
    _check_divisible(T, H, W, pt, ps)
    t, h, w = T // pt, H // ps, W // ps
    x = video.reshape(t, pt, h, ps, w, ps, C)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(x.reshape(t, h, w, pt * ps * ps * C))


def decode(latent: np.ndarray, pt: int = 2, ps: int = 2, channels: int = 3) -> np.ndarray:
    """Exact inverse of encode."""
    if latent.ndim != 4:
        raise ValueError(f"latentcodec: expected 4-D latent, got shape {latent.shape}")
    t, h, w, c = latent.shape
    if c != channels * pt * ps * ps:
        raise ValueError(
            f"latentcodec: latent channels {c} != C*pt*ps*ps = {channels * pt * ps * ps} "
            f"(C={channels}, pt={pt}, ps={ps})"
        )
    x = latent.reshape(t, h, w, pt, ps, ps, channels)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(x.reshape(t * pt, h * ps, w * ps, channels))


def latent_shape(T: int, H: int, W: int, C: int, pt: int = 2, ps: int = 2) -> tuple:
    _check_divisible(T, H, W, pt, ps)
    return (T // pt, H // ps, W // ps, C * pt * ps * ps)
