"""Rectified-flow noising, velocity matching, and ODE sampling.

The forward path is the straight line z_t = (1-t) z0 + t eps, and the
model regresses the velocity target (z0 - eps), i.e. the flow from noise
toward data. Sampling integrates that field with Euler steps over a
schedule that decreases from t=1 (noise) to t=0 (data):

    z <- z + v(z, t_k) * (t_k - t_{k+1})

so each step applies the data-ward velocity over a positive step length.
Classifier-free guidance mixes conditional and unconditional predictions
as v = v_uncond + w (v_cond - v_uncond); w=0 and w=1 short-circuit to the
single matching prediction so those cases are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


def noise_sample(z0: np.ndarray, eps: np.ndarray, t: float) -> np.ndarray:
    """Linear interpolant z_t; t=0 gives z0 exactly, t=1 gives eps exactly."""
    if z0.shape != eps.shape:
        raise ValueError(f"noise_sample: shapes {z0.shape} and {eps.shape} differ")
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"noise_sample: t={t} outside [0, 1]")
    if t == 0.0:
        return z0.copy()
    if t == 1.0:
        return eps.copy()
    return (1.0 - t) * z0 + t * eps


def cfm_loss(v_pred: Tensor, z0: np.ndarray, eps: np.ndarray) -> Tensor:
    """Mean squared error of the predicted velocity against (z0 - eps)."""
    target = np.asarray(z0, dtype=v_pred.dtype) - np.asarray(eps, dtype=v_pred.dtype)
    if target.shape != v_pred.shape:
        raise tc.ShapeError(f"cfm_loss: prediction {v_pred.shape} vs target {target.shape}")
    return tc.mse(v_pred, Tensor(target))


def uniform_schedule(steps: int) -> np.ndarray:
    return np.linspace(1.0, 0.0, steps + 1)


@dataclass
class SamplerConfig:
    steps: int = 50
    cfg_scale: float = 6.0
    schedule: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler: steps must be >= 1")
        if self.schedule is None:
            self.schedule = uniform_schedule(self.steps)
        self.schedule = np.asarray(self.schedule, dtype=np.float64)
        if len(self.schedule) != self.steps + 1:
            raise ValueError(
                f"sampler: schedule needs {self.steps + 1} times, got {len(self.schedule)}"
            )
        if self.schedule[0] != 1.0 or self.schedule[-1] != 0.0:
            raise ValueError("sampler: schedule must run from 1 to 0")
        if not np.all(np.diff(self.schedule) < 0):
            raise ValueError("sampler: schedule times must be strictly decreasing")


VelocityFn = Callable[[np.ndarray, float], np.ndarray]


def sample(velocity: VelocityFn, latent_shape: tuple, cfg: SamplerConfig, seed: int,
           dtype=np.float32) -> np.ndarray:
    """Integrate the velocity field from seeded noise at t=1 down to t=0."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(latent_shape).astype(dtype)
    for k in range(cfg.steps):
        t_k = float(cfg.schedule[k])
        t_next = float(cfg.schedule[k + 1])
        v = np.asarray(velocity(z, t_k), dtype=z.dtype)
        z = z + v * (t_k - t_next)
        if not np.all(np.isfinite(z)):
            raise tc.NonFiniteError(f"sampler: non-finite state at step {k} (t={t_k:.4f})")
    return z


def guided_velocity(model, control, layout_tokens, class_id: int, cfg_scale: float) -> VelocityFn:
    """CFG-combined velocity from a DiT: conditional prediction uses the real
    context plus the control branch; unconditional uses the null context and
    no control injection."""

    def fn(z: np.ndarray, t: float) -> np.ndarray:
        with tc.no_grad():
            if cfg_scale == 1.0:
                v_c, _ = model.velocity(z, t, class_id, control=control,
                                        layout_tokens=layout_tokens)
                return v_c.data
            v_u, _ = model.velocity(z, t, 0)
            if cfg_scale == 0.0:
                return v_u.data
            v_c, _ = model.velocity(z, t, class_id, control=control,
                                    layout_tokens=layout_tokens)
            return v_u.data + cfg_scale * (v_c.data - v_u.data)

    return fn
