"""Flat run configuration shared by every stage.

A run is identified by the hash of its configuration.  All checkpoints and
reports record that hash, and cross-stage loads refuse to mix artifacts
produced under different configurations.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Raised for unknown keys, malformed files, or invalid values."""


@dataclass
class RunConfig:
    # identity
    version: str = "1"
    seed: int = 0

    # environment
    image_size: int = 32
    patch_size: int = 8
    n_colors: int = 4
    n_shapes: int = 2
    delta_max: float = 0.05
    grasp_radius: float = 0.03
    goal_radius: float = 0.05
    min_separation: float = 0.1
    expert_noise: float = 0.005
    horizon_single: int = 150
    horizon_multi: int = 200
    augment: bool = True
    aug_brightness: float = 0.1
    aug_noise: float = 0.02
    aug_crop: int = 2

    # model dimensions
    d_f: int = 64
    d_b: int = 64
    d_z: int = 16
    d_i: int = 64
    d_s: int = 64
    d_vlm: int = 128
    k_window: int = 5
    chunk_h: int = 16
    action_dim: int = 3
    proprio_dim: int = 6
    enc_blocks: int = 2
    enc_heads: int = 4
    bel_blocks: int = 2
    bel_heads: int = 4
    vlm_blocks: int = 2
    vlm_heads: int = 4
    den_dim: int = 64
    den_blocks: int = 2
    den_heads: int = 4

    # objectives and schedules
    tau_ema: float = 0.995
    tau_temp: float = 0.1
    delta_max_offset: int = 4
    contrast_negatives: int = 64
    lambda_five: float = 0.5
    w_inv: float = 0.1
    beta_kl_start: float = 1e-3
    beta_kl_end: float = 0.1
    beta_kl_warmup_frac: float = 0.3
    sigma_floor: float = 1e-4

    # diffusion
    ddpm_steps: int = 100
    ddpm_beta_start: float = 1e-4
    ddpm_beta_end: float = 0.02
    exec_stride: int = 8
    s_warm: int = 30
    belief_stride: int = 1

    # staged training
    n_episodes: int = 5000
    warmstart_iters: int = 5000
    warmstart_batch: int = 32
    warmstart_lr: float = 1e-3
    warmstart_segment: int = 12
    warmstart_recon_weight: float = 50.0
    warmstart_dec_hidden: int = 256
    belief_iters: int = 20000
    belief_batch: int = 32
    belief_lr: float = 3e-4
    belief_segment: int = 32
    policy_iters: int = 30000
    policy_batch: int = 32
    policy_lr: float = 1e-3
    grad_clip: float = 10.0

    # evaluation
    eval_episodes: int = 40
    frame_drop_p: float = 0.05
    obs_noise: float = 0.02
    perturb: bool = False
    analysis_pairs: int = 2000
    workers: int = 1

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be a multiple of patch_size")
        if not 0 < self.tau_ema <= 1:
            raise ConfigError("tau_ema must lie in (0, 1]")
        if self.k_window < 1:
            raise ConfigError("k_window must be >= 1")
        if not 1 <= self.exec_stride <= self.chunk_h:
            raise ConfigError("exec_stride must lie in [1, chunk_h]")
        if not 1 <= self.s_warm <= self.ddpm_steps:
            raise ConfigError("s_warm must lie in [1, ddpm_steps]")
        if self.n_colors < 2 or self.n_colors > 6:
            raise ConfigError("n_colors must lie in [2, 6]")
        if self.n_shapes not in (1, 2):
            raise ConfigError("n_shapes must be 1 or 2")
        if self.warmstart_recon_weight < 0:
            raise ConfigError("warmstart_recon_weight must be >= 0")
        if self.warmstart_dec_hidden < 1:
            raise ConfigError("warmstart_dec_hidden must be >= 1")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def items(self) -> list[tuple[str, object]]:
        return sorted(dataclasses.asdict(self).items())

    def config_hash(self) -> str:
        """Hash over sorted key=value pairs; stable under key reordering."""
        text = "\n".join(f"{k}={_format_value(v)}" for k, v in self.items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_text(self) -> str:
        return "\n".join(f"{k} = {_format_value(v)}" for k, v in self.items()) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_overrides(parse_config_text(Path(path).read_text()))

    @classmethod
    def from_overrides(cls, overrides: dict[str, str]) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs: dict[str, object] = {}
        for key, raw in overrides.items():
            if key not in fields:
                raise ConfigError(f"unknown config key: {key!r}")
            kwargs[key] = _parse_value(raw, fields[key].type)
        return cls(**kwargs)

    def apply_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        merged = {k: _format_value(v) for k, v in dataclasses.asdict(self).items()}
        for key in overrides:
            if key not in merged:
                raise ConfigError(f"unknown config key: {key!r}")
        merged.update(overrides)
        return RunConfig.from_overrides(merged)


def parse_config_text(text: str) -> dict[str, str]:
    """Parse `key = value` lines; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


def _parse_value(raw: str, typ: object) -> object:
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if name == "bool":
        low = str(raw).strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if name == "int":
        return int(str(raw).strip())
    if name == "float":
        return float(str(raw).strip())
    return str(raw).strip()


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)
