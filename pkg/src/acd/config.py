"""Run configuration: a flat key=value text file with typed, documented defaults.

Unknown keys are rejected. The fully resolved config is echoed into every
run directory so a run can be reproduced from its own artifacts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

MODES = ("joint_train", "post_train", "ctrl_branch")


@dataclass
class RunConfig:
    # model
    dim: int = 32                 # token width d
    heads: int = 4                # attention heads (d % heads == 0)
    layers: int = 4               # DiT blocks
    ffn_mult: int = 4             # FFN hidden = dim * ffn_mult
    max_tokens: int = 256         # hard cap on sequence length N
    lora_rank: int = 4            # 0 disables LoRA
    lora_alpha: float = 8.0       # adapters scale by lora_alpha / lora_rank
    num_classes: int = 5          # prompt classes; id 0 is the learned null
    # codec / data geometry
    patch_t: int = 2              # temporal patch pt
    patch_s: int = 2              # spatial patch ps
    frames: int = 8               # video T
    height: int = 16              # video H
    width: int = 16               # video W
    channels: int = 3
    # control branch + layout encoders
    ctrl_blocks: int = 2          # trainable copies of the first blocks
    enc_channels: int = 16        # layout encoder hidden width
    no_semantic: bool = False     # ablation: drop the semantic branch
    no_depth: bool = False        # ablation: drop the sparse-depth branch
    # objective
    lambda_diff: float = 1.0
    lambda_attn: float = 0.5
    # optimizer / schedule
    lr: float = 7e-3
    lr_schedule: str = "cosine"   # cosine | constant
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 500
    batch_size: int = 4
    mode: str = "joint_train"     # joint_train | post_train | ctrl_branch
    cfg_dropout: float = 0.1      # p(replace conditioning by null) per sample
    seed: int = 0
    checkpoint_every: int = 0     # 0 = final checkpoint only
    # sampling
    sampler_steps: int = 50
    cfg_scale: float = 6.0
    # optional paths (CLI flags override)
    data_dir: str = ""
    out_dir: str = ""

    def validate(self) -> "RunConfig":
        if self.dim % self.heads:
            raise ValueError(f"config: dim={self.dim} not divisible by heads={self.heads}")
        if self.mode not in MODES:
            raise ValueError(f"config: mode must be one of {MODES}, got {self.mode!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"config: lr_schedule must be cosine or constant, got {self.lr_schedule!r}")
        if self.lora_rank < 0:
            raise ValueError("config: lora_rank must be >= 0")
        if self.ctrl_blocks > self.layers:
            raise ValueError(
                f"config: ctrl_blocks={self.ctrl_blocks} exceeds layers={self.layers}"
            )
        if not (self.lambda_diff > 0):
            raise ValueError("config: lambda_diff must be positive")
        if self.lambda_attn < 0:
            raise ValueError("config: lambda_attn must be nonnegative")
        if self.steps < 1 or self.batch_size < 1 or self.sampler_steps < 1:
            raise ValueError("config: steps, batch_size and sampler_steps must be >= 1")
        if not (0.0 <= self.cfg_dropout < 1.0):
            raise ValueError("config: cfg_dropout must be in [0, 1)")
        n = (self.frames // self.patch_t) * (self.height // self.patch_s) ** 2
        if n > self.max_tokens:
            raise ValueError(f"config: token count {n} exceeds max_tokens={self.max_tokens}")
        return self

    @property
    def token_count(self) -> int:
        return (
            (self.frames // self.patch_t)
            * (self.height // self.patch_s)
            * (self.width // self.patch_s)
        )

    @property
    def latent_channels(self) -> int:
        return self.channels * self.patch_t * self.patch_s * self.patch_s

    def to_text(self) -> str:
        lines = [f"{f.name}={_fmt(getattr(self, f.name))}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(field: dataclasses.Field, raw: str):
    raw = raw.strip()
    if field.type == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config: bad boolean for {field.name}: {raw!r}")
    if field.type == "int":
        return int(raw)
    if field.type == "float":
        return float(raw)
    return raw


def parse_config(text: str) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(fields[key], raw)
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def save_config(path, cfg: RunConfig):
    Path(path).write_text(cfg.to_text())
