"""Recursive belief estimator trained as a stochastic world model.

Per step, a short window of (frame summary, previous action, proprio) triples
is integrated by a small transformer with the previous belief pre-pended as a
token; the output at the belief-token position is the evidence e_t.  A prior
p(z_t | b_{t-1}) and posterior q(z_t | b_{t-1}, e_t) are diagonal Gaussians,
and the deterministic belief updates through a gated recurrent cell

    b_t = GRU(b_{t-1}, [e_t, z_t]).

Training minimizes the negated ELBO: unit-variance Gaussian likelihoods of
the next-step and 5-step-ahead target features (squared errors), a scheduled
KL(q || p), plus an inverse-dynamics penalty ||g(b_t, b_{t+1}) - a_t||^2 that
keeps the belief grounded in controllable state.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .nets import TransformerBlock, mlp
from .perception import FrameEncoder


@dataclass
class GaussianLatent:
    mu: torch.Tensor
    sigma: torch.Tensor  # strictly positive (softplus + floor)

    def sample(self, eps: torch.Tensor) -> torch.Tensor:
        return self.mu + self.sigma * eps

    def rsample(self, generator: torch.Generator) -> torch.Tensor:
        eps = torch.randn(self.mu.shape, generator=generator, dtype=self.mu.dtype)
        return self.sample(eps)


def gaussian_kl(q: GaussianLatent, p: GaussianLatent) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the latent dimension."""
    if q.mu.shape[-1] != p.mu.shape[-1]:
        raise ValueError("latent dimension mismatch")
    return (
        torch.log(p.sigma / q.sigma)
        + (q.sigma**2 + (q.mu - p.mu) ** 2) / (2.0 * p.sigma**2)
        - 0.5
    ).sum(-1)


class GRUCell(nn.Module):
    """Gated recurrent cell with explicit update/reset gates.

    u = sigmoid(x W_xu + h W_hu + c_u)
    r = sigmoid(x W_xr + h W_hr + c_r)
    n = tanh(x W_xn + (r * h) W_hn + c_n)
    h' = (1 - u) * h + u * n

    so a saturated update gate (u -> 1) replaces the state with the candidate
    and u -> 0 keeps it unchanged.
    """

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        k = 1.0 / math.sqrt(hidden_dim)
        def p(*shape):
            return nn.Parameter(torch.empty(*shape).uniform_(-k, k))
        self.w_xu, self.w_hu, self.b_u = p(input_dim, hidden_dim), p(hidden_dim, hidden_dim), p(hidden_dim)
        self.w_xr, self.w_hr, self.b_r = p(input_dim, hidden_dim), p(hidden_dim, hidden_dim), p(hidden_dim)
        self.w_xn, self.w_hn, self.b_n = p(input_dim, hidden_dim), p(hidden_dim, hidden_dim), p(hidden_dim)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        u = torch.sigmoid(x @ self.w_xu + h @ self.w_hu + self.b_u)
        r = torch.sigmoid(x @ self.w_xr + h @ self.w_hr + self.b_r)
        n = torch.tanh(x @ self.w_xn + (r * h) @ self.w_hn + self.b_n)
        return (1.0 - u) * h + u * n


@dataclass
class BeliefSchedule:
    """Loss weights for belief training; beta warms up linearly then plateaus."""

    lambda_five: float
    w_inv: float
    beta_start: float
    beta_end: float
    warmup_iters: int
    k_window: int

    def beta(self, iteration: int) -> float:
        if self.warmup_iters <= 0 or iteration >= self.warmup_iters:
            return self.beta_end
        frac = iteration / self.warmup_iters
        return self.beta_start + frac * (self.beta_end - self.beta_start)

    @classmethod
    def from_config(cls, cfg: RunConfig, total_iters: int) -> "BeliefSchedule":
        return cls(
            lambda_five=cfg.lambda_five,
            w_inv=cfg.w_inv,
            beta_start=cfg.beta_kl_start,
            beta_end=cfg.beta_kl_end,
            warmup_iters=int(cfg.beta_kl_warmup_frac * total_iters),
            k_window=cfg.k_window,
        )


class BeliefCore(nn.Module):
    """Window transformer, latent heads, recurrent update, decoders.

    With ``stochastic=False`` the latent pathway is removed entirely: the GRU
    consumes the evidence alone and the decoders condition on the belief only
    (the deterministic ablation).
    """

    def __init__(self, cfg: RunConfig, stochastic: bool = True):
        super().__init__()
        self.cfg = cfg
        self.stochastic = stochastic
        d = cfg.d_b
        self.d_model = d
        triple_dim = cfg.d_f + cfg.action_dim + cfg.proprio_dim
        self.belief_proj = nn.Linear(d, d)
        self.triple_embed = nn.Linear(triple_dim, d)
        self.pad_token = nn.Parameter(torch.zeros(d))
        self.pos_emb = nn.Parameter(torch.zeros(cfg.k_window + 1, d))
        nn.init.normal_(self.pos_emb, std=0.02)
        nn.init.normal_(self.pad_token, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.bel_heads) for _ in range(cfg.bel_blocks))
        self.evidence_head = nn.Linear(d, d)
        z = cfg.d_z if stochastic else 0
        if stochastic:
            self.prior_head = mlp(d, d, 2 * cfg.d_z)
            self.posterior_head = mlp(2 * d, d, 2 * cfg.d_z)
        self.gru = GRUCell(d + z, d)
        self.decoder_1 = mlp(d + z, d, cfg.d_f)
        self.decoder_5 = mlp(d + z, d, cfg.d_f)
        self.inv_head = mlp(2 * d, d, cfg.action_dim)
        self.b0 = nn.Parameter(torch.zeros(d))

    # -- window integration --------------------------------------------------

    def embed_triples(self, frames: torch.Tensor, prev_actions: torch.Tensor, proprio: torch.Tensor) -> torch.Tensor:
        return self.triple_embed(torch.cat([frames, prev_actions, proprio], dim=-1))

    def integrate_embedded(self, b_prev: torch.Tensor, window: torch.Tensor, return_attn: bool = False):
        """Window (B, W<=K, d) is left-padded with the learned pad token."""
        b, w, d = window.shape
        k = self.cfg.k_window
        if w == 0:
            raise ValueError("empty window")
        if w > k:
            raise ValueError(f"window length {w} exceeds K={k}")
        if w < k:
            pad = self.pad_token.to(window.dtype).expand(b, k - w, d)
            window = torch.cat([pad, window], dim=1)
        tokens = torch.cat([self.belief_proj(b_prev).unsqueeze(1), window], dim=1)
        x = tokens + self.pos_emb
        attn = None
        for i, blk in enumerate(self.blocks):
            if return_attn and i == len(self.blocks) - 1:
                x, weights = blk(x, need_weights=True)
                attn = weights[:, 0, :]  # row queried at the evidence position
            else:
                x = blk(x)
        e = self.evidence_head(x[:, 0])
        if return_attn:
            return e, attn
        return e

    def temporal_integrate(
        self,
        b_prev: torch.Tensor,
        frames: torch.Tensor,
        prev_actions: torch.Tensor,
        proprio: torch.Tensor,
        return_attn: bool = False,
    ):
        """Evidence e_t from the previous belief and up-to-K recent triples."""
        window = self.embed_triples(frames, prev_actions, proprio)
        return self.integrate_embedded(b_prev, window, return_attn=return_attn)

    # -- latent heads ----------------------------------------------------------

    def _gaussian(self, raw: torch.Tensor) -> GaussianLatent:
        mu, pre = raw.chunk(2, dim=-1)
        return GaussianLatent(mu=mu, sigma=F.softplus(pre) + self.cfg.sigma_floor)

    def prior(self, b_prev: torch.Tensor) -> GaussianLatent:
        if not self.stochastic:
            raise RuntimeError("deterministic variant has no latent heads")
        return self._gaussian(self.prior_head(b_prev))

    def posterior(self, b_prev: torch.Tensor, e: torch.Tensor) -> GaussianLatent:
        if not self.stochastic:
            raise RuntimeError("deterministic variant has no latent heads")
        return self._gaussian(self.posterior_head(torch.cat([b_prev, e], dim=-1)))

    # -- state update and decoders ---------------------------------------------

    def gru_update(self, b_prev: torch.Tensor, e: torch.Tensor, z: torch.Tensor | None) -> torch.Tensor:
        x = e if z is None else torch.cat([e, z], dim=-1)
        return self.gru(x, b_prev)

    def decode_future(self, b: torch.Tensor, z: torch.Tensor | None, horizon: int) -> torch.Tensor:
        if horizon not in (1, 5):
            raise ValueError(f"unsupported decode horizon {horizon}; expected 1 or 5")
        x = b if z is None else torch.cat([b, z], dim=-1)
        return self.decoder_1(x) if horizon == 1 else self.decoder_5(x)

    def inverse_dynamics(self, b_t: torch.Tensor, b_next: torch.Tensor) -> torch.Tensor:
        return self.inv_head(torch.cat([b_t, b_next], dim=-1))

    def initial_belief(self, batch: int, dtype=None) -> torch.Tensor:
        return self.b0.to(dtype or self.b0.dtype).unsqueeze(0).expand(batch, -1)


def window_slices(t: int, k: int):
    return slice(max(0, t - k + 1), t + 1)


def belief_rollout_train(
    core: BeliefCore,
    frames_online: torch.Tensor,
    frames_target: torch.Tensor,
    actions: torch.Tensor,
    proprio: torch.Tensor,
    schedule: BeliefSchedule,
    iteration: int,
    generator: torch.Generator,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Recursive training pass over (B, T, ...) episode segments.

    Posterior samples drive the recurrence; targets are gradient-blocked
    features from the EMA encoder (or the pixel-embedding substitute in the
    ablation).  Returns the summed objective and per-step diagnostics.
    """
    b_sz, t_len, _ = frames_online.shape
    k = schedule.k_window
    if t_len < k + 6:
        raise ValueError(f"segment length {t_len} too short; need >= K+6 = {k + 6}")
    frames_target = frames_target.detach()
    prev_actions = torch.cat([torch.zeros_like(actions[:, :1]), actions[:, :-1]], dim=1)
    embedded = core.embed_triples(frames_online, prev_actions, proprio)

    beta = schedule.beta(iteration)
    b = core.initial_belief(b_sz, dtype=frames_online.dtype)
    beliefs: list[torch.Tensor] = []
    one_step = frames_online.new_zeros(())
    five_step = frames_online.new_zeros(())
    kl_total = frames_online.new_zeros(())
    n_steps = t_len - 6 + 1

    for t in range(0, t_len - 6 + 1):
        e = core.integrate_embedded(b, embedded[:, window_slices(t, k)])
        if core.stochastic:
            q = core.posterior(b, e)
            p = core.prior(b)
            z = q.rsample(generator)
            kl_total = kl_total + gaussian_kl(q, p).mean()
        else:
            z = None
        b = core.gru_update(b, e, z)
        beliefs.append(b)
        pred1 = core.decode_future(b, z, horizon=1)
        pred5 = core.decode_future(b, z, horizon=5)
        one_step = one_step + 0.5 * ((pred1 - frames_target[:, t + 1]) ** 2).sum(-1).mean()
        five_step = five_step + 0.5 * ((pred5 - frames_target[:, t + 5]) ** 2).sum(-1).mean()

    b_seq = torch.stack(beliefs, dim=1)  # (B, n_steps, d_b)
    inv_pred = core.inverse_dynamics(b_seq[:, :-1], b_seq[:, 1:])
    inv_loss = ((inv_pred - actions[:, : n_steps - 1]) ** 2).sum(-1).sum(1).mean()

    total = one_step + schedule.lambda_five * five_step + beta * kl_total + schedule.w_inv * inv_loss
    diag = {
        "total": float(total.detach()),
        "one_step": float(one_step.detach()) / n_steps,
        "five_step": float(five_step.detach()) / n_steps,
        "kl": float(kl_total.detach()) / n_steps,
        "inv": float(inv_loss.detach()) / max(1, n_steps - 1),
        "beta": beta,
        "n_steps": n_steps,
    }
    return total, diag


class BeliefFilter:
    """Online belief recursion with a fixed-size rolling window buffer.

    Retained state between steps is the belief vector plus at most K raw
    triples; its float count is therefore constant in episode length.
    """

    def __init__(self, encoder: FrameEncoder, core: BeliefCore, mode: str = "posterior"):
        if mode not in ("posterior", "prior"):
            raise ValueError(f"mode must be posterior or prior, got {mode!r}")
        self.encoder = encoder
        self.core = core
        self.mode = mode
        self.cfg = core.cfg
        self.buffer: deque[tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = deque(maxlen=core.cfg.k_window)
        self.b = core.initial_belief(1)
        self.steps = 0

    @torch.no_grad()
    def step(self, image, proprio, prev_action) -> tuple[torch.Tensor, GaussianLatent | None]:
        image = torch.as_tensor(image)
        proprio = torch.as_tensor(proprio, dtype=torch.float32)
        f = self.encoder(image, proprio)
        return self.step_from_features(f, proprio, prev_action)

    @torch.no_grad()
    def step_attn(self, image, proprio, prev_action):
        """Like step(), also returning the evidence-position attention row
        over [belief token, K window slots]."""
        image = torch.as_tensor(image)
        proprio = torch.as_tensor(proprio, dtype=torch.float32)
        f = self.encoder(image, proprio)
        return self.step_from_features(f, proprio, prev_action, need_attn=True)

    @torch.no_grad()
    def step_from_features(self, f: torch.Tensor, proprio, prev_action, need_attn: bool = False):
        proprio = torch.as_tensor(proprio, dtype=torch.float32)
        prev_action = torch.as_tensor(prev_action, dtype=torch.float32)
        self.buffer.append((f, prev_action, proprio))
        frames = torch.stack([x[0] for x in self.buffer]).unsqueeze(0)
        acts = torch.stack([x[1] for x in self.buffer]).unsqueeze(0)
        props = torch.stack([x[2] for x in self.buffer]).unsqueeze(0)
        out = self.core.temporal_integrate(self.b, frames, acts, props, return_attn=need_attn)
        e, attn = out if need_attn else (out, None)
        latent = None
        z = None
        if self.core.stochastic:
            latent = self.core.posterior(self.b, e) if self.mode == "posterior" else self.core.prior(self.b)
            z = latent.mu  # deterministic mean at inference
        self.b = self.core.gru_update(self.b, e, z)
        self.steps += 1
        if need_attn:
            return self.b.squeeze(0), latent, attn.squeeze(0)
        return self.b.squeeze(0), latent

    def retained_floats(self) -> int:
        """Fixed cross-step allocation: the belief vector plus the K-slot
        window buffer at capacity.  Constant in episode length and in any
        requested temporal-context length by construction."""
        per_slot = self.cfg.d_f + self.cfg.action_dim + self.cfg.proprio_dim
        return int(self.cfg.d_b + self.cfg.k_window * per_slot)

    def filled_floats(self) -> int:
        """Floats actually occupied (<= retained_floats(); equal once the
        window has filled)."""
        total = self.b.numel()
        for f, a, p in self.buffer:
            total += f.numel() + a.numel() + p.numel()
        return int(total)
