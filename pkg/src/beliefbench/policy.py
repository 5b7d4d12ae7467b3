"""Diffusion policy over fixed-length action chunks.

A small transformer denoiser predicts the noise added to an H x A action
chunk, conditioned through adaptive layer normalization on a summary vector
built from [timestep embedding, belief (optional), intent, state fusion].
Training uses the standard DDPM epsilon-prediction objective; execution
samples chunks with ancestral denoising, warm-starting each replan from the
previously sampled chunk shifted by the executed stride.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .nets import mlp


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule; index 0 is the clean signal (alpha_bar[0] = 1)."""

    betas: torch.Tensor       # (S+1,), betas[0] unused
    alphas: torch.Tensor      # (S+1,)
    alpha_bars: torch.Tensor  # (S+1,), alpha_bars[0] == 1

    @property
    def steps(self) -> int:
        return self.betas.shape[0] - 1

    @classmethod
    def linear(cls, steps: int, beta_start: float, beta_end: float) -> "NoiseSchedule":
        if steps < 1:
            raise ScheduleError("need at least one diffusion step")
        betas = torch.cat([torch.zeros(1), torch.linspace(beta_start, beta_end, steps)])
        if not ((betas[1:] > 0).all() and (betas[1:] < 1).all()):
            raise ScheduleError("betas must lie in (0, 1)")
        if steps > 1 and not (betas[2:] > betas[1:-1]).all():
            raise ScheduleError("betas must be increasing")
        alphas = 1.0 - betas
        alpha_bars = torch.cumprod(alphas, dim=0)
        return cls(betas=betas, alphas=alphas, alpha_bars=alpha_bars)

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "NoiseSchedule":
        return cls.linear(cfg.ddpm_steps, cfg.ddpm_beta_start, cfg.ddpm_beta_end)


def forward_noise(a0: torch.Tensor, s, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noised chunk a_s = sqrt(abar_s) a0 + sqrt(1 - abar_s) eps; s in [1, S].

    ``s`` may be an int or a (B,) tensor of per-example steps.
    """
    s = torch.as_tensor(s, dtype=torch.long)
    if s.numel() and (s.min() < 1 or s.max() > schedule.steps):
        raise ScheduleError(f"step index out of range [1, {schedule.steps}]")
    abar = schedule.alpha_bars[s].to(a0.dtype)
    while abar.ndim < a0.ndim:
        abar = abar.unsqueeze(-1)
    return torch.sqrt(abar) * a0 + torch.sqrt(1.0 - abar) * eps


def timestep_embedding(s: torch.Tensor, dim: int, max_steps: int = 10_000) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_steps) * torch.arange(half, dtype=torch.float64) / half)
    args = s.to(torch.float64).unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class DiTBlock(nn.Module):
    """Transformer block whose normalizations are modulated by the conditioning
    vector (shift/scale/gate per sublayer); gates start at zero so the block
    is initially the identity."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.SiLU(), nn.Linear(mlp_ratio * dim, dim))
        self.modulation = nn.Linear(dim, 6 * dim)
        nn.init.zeros_(self.modulation.weight)
        nn.init.zeros_(self.modulation.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        sh1, sc1, g1, sh2, sc2, g2 = self.modulation(F.silu(cond)).unsqueeze(1).chunk(6, dim=-1)
        h = self.norm1(x) * (1 + sc1) + sh1
        attn, _ = self.attn(h, h, h, need_weights=False)
        x = x + g1 * attn
        h = self.norm2(x) * (1 + sc2) + sh2
        return x + g2 * self.mlp(h)


class Denoiser(nn.Module):
    """Noise predictor over H action tokens.

    ``use_belief=False`` removes the belief conditioning pathway entirely
    (used by the no-belief ablations); intent and state fusion remain.
    """

    def __init__(self, cfg: RunConfig, use_belief: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_belief = use_belief
        d = cfg.den_dim
        self.action_in = nn.Linear(cfg.action_dim, d)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.chunk_h, d))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.t_mlp = mlp(d, d, d)
        if use_belief:
            self.belief_proj = nn.Linear(cfg.d_b, d)
        self.intent_proj = nn.Linear(cfg.d_i, d)
        self.state_proj = nn.Linear(cfg.d_s, d)
        self.blocks = nn.ModuleList(DiTBlock(d, cfg.den_heads) for _ in range(cfg.den_blocks))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.final_mod = nn.Linear(d, 2 * d)
        self.action_out = nn.Linear(d, cfg.action_dim)
        nn.init.zeros_(self.final_mod.weight)
        nn.init.zeros_(self.final_mod.bias)
        nn.init.zeros_(self.action_out.weight)
        nn.init.zeros_(self.action_out.bias)
        self.calls = 0

    def condition(self, s: torch.Tensor, belief, intent: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        cond = self.t_mlp(timestep_embedding(s, self.cfg.den_dim).to(intent.dtype))
        if self.use_belief:
            if belief is None:
                raise ValueError("denoiser was built with a belief pathway; belief is required")
            cond = cond + self.belief_proj(belief)
        cond = cond + self.intent_proj(intent) + self.state_proj(state)
        return cond

    def forward(self, noised: torch.Tensor, s: torch.Tensor, belief, intent: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        cond = self.condition(s, belief, intent, state)
        x = self.action_in(noised) + self.pos_emb.to(noised.dtype)
        for blk in self.blocks:
            x = blk(x, cond)
        sh, sc = self.final_mod(F.silu(cond)).unsqueeze(1).chunk(2, dim=-1)
        return self.action_out(self.final_norm(x) * (1 + sc) + sh)


class StateFuser(nn.Module):
    """Current-step summary: project [frame features ; proprio] to D_s."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.d_f + cfg.proprio_dim, cfg.d_s)

    def forward(self, frame: torch.Tensor, proprio: torch.Tensor) -> torch.Tensor:
        return self.proj(torch.cat([frame, proprio], dim=-1))


@dataclass
class ActionNormalizer:
    """Per-dimension zero-mean/unit-variance scaling from dataset statistics."""

    mean: np.ndarray
    std: np.ndarray

    def normalize(self, a: torch.Tensor) -> torch.Tensor:
        mean = torch.as_tensor(self.mean, dtype=a.dtype)
        std = torch.as_tensor(self.std, dtype=a.dtype)
        return (a - mean) / std

    def denormalize(self, a: torch.Tensor) -> torch.Tensor:
        mean = torch.as_tensor(self.mean, dtype=a.dtype)
        std = torch.as_tensor(self.std, dtype=a.dtype)
        return a * std + mean


def diffusion_loss(
    denoiser: Denoiser,
    chunks: torch.Tensor,
    belief,
    intent: torch.Tensor,
    state: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """Epsilon-prediction loss, summed over the chunk and averaged over the
    batch (a zero denoiser therefore scores ~H*A on unit-normal noise)."""
    b = chunks.shape[0]
    s = torch.randint(1, schedule.steps + 1, (b,), generator=generator)
    eps = torch.randn(chunks.shape, generator=generator, dtype=chunks.dtype)
    noised = forward_noise(chunks, s, eps, schedule)
    pred = denoiser(noised, s, belief, intent, state)
    return ((pred - eps) ** 2).sum(dim=(-1, -2)).mean()


@torch.no_grad()
def sample_chunk(
    denoiser: Denoiser,
    belief,
    intent: torch.Tensor,
    state: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    prev_chunk: torch.Tensor | None = None,
    exec_stride: int = 8,
    s_warm: int = 30,
) -> torch.Tensor:
    """Ancestral DDPM sampling of one normalized chunk (H, A).

    With ``prev_chunk`` the chain starts at step s_warm from the previous
    chunk shifted left by the executed stride (last row repeated) plus noise
    at that level; otherwise from pure noise at step S.
    """
    h, a = denoiser.cfg.chunk_h, denoiser.cfg.action_dim
    batched_cond = (intent.ndim, state.ndim)
    if batched_cond != (1, 1):
        raise ValueError("sample_chunk expects unbatched conditioning vectors")
    intent = intent.unsqueeze(0)
    state = state.unsqueeze(0)
    if belief is not None:
        belief = belief.unsqueeze(0)
    if prev_chunk is None:
        start = schedule.steps
        x = torch.randn((1, h, a), generator=generator)
    else:
        if prev_chunk.shape != (h, a):
            raise ValueError(f"prev_chunk must be ({h}, {a})")
        start = s_warm
        shifted = torch.cat([prev_chunk[exec_stride:], prev_chunk[-1:].expand(exec_stride, a)], dim=0)
        eps = torch.randn((h, a), generator=generator)
        x = forward_noise(shifted, s_warm, eps, schedule).unsqueeze(0)
    for s in range(start, 0, -1):
        st = torch.full((1,), s, dtype=torch.long)
        eps_hat = denoiser(x, st, belief, intent, state)
        alpha = schedule.alphas[s]
        abar = schedule.alpha_bars[s]
        x = (x - (1.0 - alpha) / torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(alpha)
        if s > 1:
            abar_prev = schedule.alpha_bars[s - 1]
            var = (1.0 - abar_prev) / (1.0 - abar) * schedule.betas[s]
            x = x + torch.sqrt(var) * torch.randn(x.shape, generator=generator)
    return x.squeeze(0)


@dataclass
class PolicyPipeline:
    """Trained components assembled for execution.  ``belief_core`` is None
    for the no-belief variants."""

    cfg: RunConfig
    encoder: "nn.Module"
    belief_core: "nn.Module | None"
    intent: "nn.Module"
    fuser: StateFuser
    denoiser: Denoiser
    normalizer: ActionNormalizer
    schedule: NoiseSchedule

    def eval_mode(self) -> "PolicyPipeline":
        for m in (self.encoder, self.belief_core, self.intent, self.fuser, self.denoiser):
            if m is not None:
                m.eval()
        return self


@dataclass
class RolloutLog:
    """Per-episode execution trace for analysis and reporting."""

    observations: list = field(default_factory=list)
    proprio: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    beliefs: list = field(default_factory=list)
    chunks: list = field(default_factory=list)
    intent: np.ndarray | None = None
    instruction: str = ""
    success: bool = False
    steps: int = 0
    intent_calls: int = 0
    chunk_samples: int = 0
    denoiser_calls: int = 0
    belief_updates: int = 0

    def arrays(self) -> dict[str, np.ndarray]:
        out = {
            "obs": np.stack(self.observations).astype(np.uint8),
            "proprio": np.stack(self.proprio).astype(np.float32),
            "actions": np.stack(self.actions).astype(np.float32),
            "chunks": np.stack(self.chunks).astype(np.float32),
            "success": np.array(1 if self.success else 0, dtype=np.uint8),
        }
        if self.beliefs:
            out["belief"] = np.stack(self.beliefs).astype(np.float32)
        if self.intent is not None:
            out["intent"] = self.intent.astype(np.float32)
        return out


@torch.no_grad()
def receding_horizon_execute(
    pipeline: PolicyPipeline,
    task,
    seed: int,
    obs_transform=None,
    belief_mode: str = "posterior",
    instruction: str | None = None,
) -> RolloutLog:
    """Run one closed-loop episode: update the belief every belief_stride
    steps, resample a warm-started chunk every exec_stride steps, execute
    actions in between.  ``obs_transform(t, obs) -> obs`` lets the evaluator
    inject sensing perturbations."""
    from .belief import BeliefFilter
    from .env import Action, render, reset, step
    from .language import encode_instruction, instruction_for
    from .seeds import derive_seed, torch_gen

    cfg = pipeline.cfg
    pipeline.eval_mode()
    gen = torch_gen(seed, "chunk_sampler")
    state, _ = reset(
        task,
        seed=derive_seed(seed, "reset"),
        n_colors=cfg.n_colors,
        n_shapes=cfg.n_shapes,
        min_separation=cfg.min_separation,
    )
    log = RolloutLog(instruction=instruction if instruction is not None else instruction_for(state))
    token_ids = encode_instruction(log.instruction)
    obs = render(state, image_size=cfg.image_size)
    if obs_transform is not None:
        obs = obs_transform(0, obs)

    pipeline.intent.begin_episode()
    intent = pipeline.intent.extract(token_ids, obs.image)
    log.intent = intent.numpy().copy()
    log.intent_calls = 1

    filt = BeliefFilter(pipeline.encoder, pipeline.belief_core, mode=belief_mode) if pipeline.belief_core is not None else None
    denoise_calls_before = pipeline.denoiser.calls
    prev_action = torch.zeros(cfg.action_dim)
    b = None
    chunk = None
    chunk_offset = 0

    for t in range(task.horizon):
        proprio_t = torch.as_tensor(obs.proprio, dtype=torch.float32)
        f = pipeline.encoder(torch.as_tensor(obs.image), proprio_t)
        if filt is not None and t % cfg.belief_stride == 0:
            b, _ = filt.step_from_features(f, proprio_t, prev_action)
            log.belief_updates += 1
        if filt is not None:
            log.beliefs.append(b.numpy().copy())

        if chunk is None or chunk_offset >= cfg.exec_stride:
            s_state = pipeline.fuser(f, proprio_t)
            chunk = sample_chunk(
                pipeline.denoiser,
                b,
                intent,
                s_state,
                pipeline.schedule,
                gen,
                prev_chunk=chunk,
                exec_stride=cfg.exec_stride,
                s_warm=cfg.s_warm,
            )
            chunk_offset = 0
            log.chunk_samples += 1
            log.chunks.append(pipeline.normalizer.denormalize(chunk).numpy().copy())

        a_norm = chunk[chunk_offset]
        chunk_offset += 1
        a_raw = pipeline.normalizer.denormalize(a_norm)
        action = Action.from_array(a_raw.numpy())

        log.observations.append(obs.image)
        log.proprio.append(obs.proprio)
        log.actions.append(a_raw.numpy().copy())
        prev_action = a_raw.to(torch.float32)

        state, _, done = step(state, action)
        obs = render(state, image_size=cfg.image_size)
        if obs_transform is not None:
            obs = obs_transform(t + 1, obs)
        log.steps = t + 1
        if done:
            break

    log.success = state.success
    log.denoiser_calls = pipeline.denoiser.calls - denoise_calls_before
    return log
