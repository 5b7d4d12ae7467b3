"""Controlled comparison variants and memory-scaling baselines.

The three ablation flags select what gets removed from the full system:
frame-encoder prediction targets (replaced by raw pixel embeddings),
the stochastic latent (replaced by a deterministic update), and the
belief-to-policy conditioning pathway (leaving a standard diffusion policy
on intent and current state).  The four studied rows are fff, fft, ftt, ttt,
reading the flags in that order.

The memory baselines are count models over retained context, cross-checked
against live objects: the recursive belief filter retains a fixed allocation
regardless of episode length or requested context, while the
token-accumulation baseline keeps every past frame's tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .belief import BeliefCore
from .config import RunConfig
from .intent import IntentExtractor
from .nets import load_module_arrays
from .perception import FrameEncoder
from .policy import ActionNormalizer, Denoiser, NoiseSchedule, PolicyPipeline, StateFuser


class BuildError(RuntimeError):
    """Mismatched or missing checkpoints for the requested variant."""


@dataclass(frozen=True)
class AblationConfig:
    use_frame_targets: bool
    use_stochastic_z: bool
    use_belief_conditioning: bool

    @property
    def code(self) -> str:
        return "".join("t" if f else "f" for f in (self.use_frame_targets, self.use_stochastic_z, self.use_belief_conditioning))

    @property
    def needs_belief(self) -> bool:
        return self.use_belief_conditioning

    @classmethod
    def from_code(cls, code: str) -> "AblationConfig":
        if code not in ABLATION_CODES:
            raise ValueError(f"ablation code must be one of {ABLATION_CODES}, got {code!r}")
        t = tuple(c == "t" for c in code)
        return cls(*t)


ABLATION_CODES = ("fff", "fft", "ftt", "ttt")
TABLE_ROWS = tuple(AblationConfig.from_code(c) for c in ABLATION_CODES)
FULL = AblationConfig.from_code("ttt")


def _require(meta: dict, key: str, expected, what: str) -> None:
    got = meta.get(key)
    if got != expected:
        raise BuildError(f"{what}: expected {key}={expected!r}, checkpoint has {got!r}")


def build_variant(
    cfg: RunConfig,
    ablation: AblationConfig,
    policy_ckpt: tuple[dict[str, np.ndarray], dict],
    belief_ckpt: tuple[dict[str, np.ndarray], dict] | None = None,
) -> PolicyPipeline:
    """Assemble an executable pipeline from stage checkpoints, verifying that
    every checkpoint was trained under the same config hash and flags."""
    p_arrays, p_meta = policy_ckpt
    _require(p_meta, "kind", "policy", "policy checkpoint")
    _require(p_meta, "config_hash", cfg.config_hash(), "policy checkpoint")
    _require(p_meta, "ablation", ablation.code, "policy checkpoint")

    master_seed = int(p_meta["master_seed"])
    encoder = FrameEncoder(cfg)
    core = None
    if ablation.needs_belief:
        if belief_ckpt is None:
            raise BuildError(f"variant {ablation.code} conditions on the belief; belief checkpoint required")
        b_arrays, b_meta = belief_ckpt
        _require(b_meta, "kind", "belief", "belief checkpoint")
        _require(b_meta, "config_hash", cfg.config_hash(), "belief checkpoint")
        _require(b_meta, "ablation", ablation.code, "belief checkpoint")
        core = BeliefCore(cfg, stochastic=ablation.use_stochastic_z)
        load_module_arrays(core, b_arrays, "core")
        load_module_arrays(encoder, b_arrays, "encoder")
    else:
        if belief_ckpt is not None:
            raise BuildError(f"variant {ablation.code} does not condition on the belief; got a belief checkpoint")
        load_module_arrays(encoder, p_arrays, "encoder")

    intent = IntentExtractor(cfg, master_seed)
    load_module_arrays(intent, p_arrays, "intent")
    fuser = StateFuser(cfg)
    load_module_arrays(fuser, p_arrays, "fuser")
    denoiser = Denoiser(cfg, use_belief=ablation.needs_belief)
    load_module_arrays(denoiser, p_arrays, "denoiser")
    normalizer = ActionNormalizer(mean=p_arrays["action_mean"].copy(), std=p_arrays["action_std"].copy())
    pipeline = PolicyPipeline(
        cfg=cfg,
        encoder=encoder,
        belief_core=core,
        intent=intent,
        fuser=fuser,
        denoiser=denoiser,
        normalizer=normalizer,
        schedule=NoiseSchedule.from_config(cfg),
    )
    return pipeline.eval_mode()


# -- memory scaling ------------------------------------------------------------

MEMORY_KINDS = ("belief_recursive", "token_accumulation", "fixed_window", "stateless")


def tokens_per_frame(cfg: RunConfig) -> int:
    return (cfg.image_size // cfg.patch_size) ** 2 + 1


def retained_floats_model(cfg: RunConfig, kind: str, context_frames: int, steps: int) -> int:
    """Retained-context float count after `steps` frames when `context_frames`
    of temporal context are requested."""
    if kind not in MEMORY_KINDS:
        raise ValueError(f"unknown memory kind {kind!r}")
    if context_frames < 1 or steps < 1:
        raise ValueError("context_frames and steps must be positive")
    frame_floats = tokens_per_frame(cfg) * cfg.d_f
    if kind == "belief_recursive":
        # fixed allocation; the requested context is absorbed by the recursion
        per_slot = cfg.d_f + cfg.action_dim + cfg.proprio_dim
        return cfg.d_b + cfg.k_window * per_slot
    if kind == "token_accumulation":
        return steps * frame_floats
    if kind == "fixed_window":
        return context_frames * frame_floats
    return frame_floats  # stateless


class TokenAccumulator:
    """Live token-accumulation context: stores every past frame's tokens."""

    def __init__(self, encoder: FrameEncoder):
        self.encoder = encoder
        self.tokens: list[torch.Tensor] = []

    @torch.no_grad()
    def ingest(self, image, proprio) -> None:
        toks = self.encoder.tokenize(torch.as_tensor(image), torch.as_tensor(proprio, dtype=torch.float32))
        self.tokens.append(toks)

    def retained_floats(self) -> int:
        return int(sum(t.numel() for t in self.tokens))


def token_accumulation_baseline(cfg: RunConfig, n_steps: int, encoder: FrameEncoder | None = None) -> np.ndarray:
    """Per-step retained-float trace of the accumulate-everything context.

    With an encoder the trace is measured on live tensors over a blank frame
    stream; otherwise the count model is used.  Both agree exactly.
    """
    if encoder is None:
        return np.array(
            [retained_floats_model(cfg, "token_accumulation", 1, t) for t in range(1, n_steps + 1)],
            dtype=np.int64,
        )
    acc = TokenAccumulator(encoder)
    img = np.zeros((cfg.image_size, cfg.image_size, 3), dtype=np.uint8)
    pro = np.zeros(cfg.proprio_dim, dtype=np.float32)
    trace = []
    for _ in range(n_steps):
        acc.ingest(img, pro)
        trace.append(acc.retained_floats())
    return np.array(trace, dtype=np.int64)
