"""Attention-conditional diffusion at desk scale.

A miniature rectified-flow diffusion transformer conditioned on sparse
3D-aware object layouts through a zero-initialized control branch, trained
with attention-level supervision: per-layer cross-attention between a
masked clean stream and the noisy stream is pooled into a response map and
regressed onto the pooled layout mask.
"""

from .config import RunConfig, load_config, parse_config, save_config
from .tensorcore import Tensor, backward, grad_check, no_grad, reset_graph

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "Tensor",
    "backward",
    "grad_check",
    "load_config",
    "no_grad",
    "parse_config",
    "reset_graph",
    "save_config",
    "__version__",
]
