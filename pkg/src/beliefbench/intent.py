"""Episodic intent extraction over a frozen multimodal token mixer.

A small randomly-initialized frozen backbone fuses instruction-token
embeddings with patch tokens of the first observation into token states X.
A single trainable query pools X,

    alpha = softmax(q^T W_k X^T / sqrt(D)),    h_task = alpha X,

and a trainable MLP projects h_task to the intent vector.  The intent is
computed once at episode start and held fixed for the whole rollout; the
wrapper enforces that contract and counts invocations so the
once-per-episode / per-step cost asymmetry can be measured.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .config import RunConfig
from .language import MAX_TOKENS, VOCAB
from .nets import TransformerBlock, mlp
from .seeds import derive_seed

N_PATCH_TOKENS = 16


class UsageError(RuntimeError):
    """Raised when the episodic intent contract is violated."""


def single_query_pool(x: torch.Tensor, q: torch.Tensor, w_k: torch.Tensor) -> torch.Tensor:
    """Pool token states x (..., N, D) with one query: softmax(q^T W_k x^T / sqrt(D)) @ x."""
    d = x.shape[-1]
    key = w_k.transpose(-1, -2) @ q  # scores_i = q . (W_k x_i)
    scores = x @ key / math.sqrt(d)
    alpha = torch.softmax(scores, dim=-1)
    return (alpha.unsqueeze(-2) @ x).squeeze(-2)


class FrozenMixer(nn.Module):
    """Deterministically seeded token mixer; parameters never receive gradients.

    Token layout: instruction embeddings at positions 0..T_lang-1 (slots up to
    MAX_TOKENS reserved), patch embeddings of the initial observation at the
    following 16 slots.
    """

    def __init__(self, cfg: RunConfig, master_seed: int):
        super().__init__()
        d = cfg.d_vlm
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        self.cfg = cfg
        self.embed = nn.Embedding(len(VOCAB), d)
        self.patch_proj = nn.Linear(patch_dim, d)
        self.pos_emb = nn.Parameter(torch.zeros(MAX_TOKENS + N_PATCH_TOKENS, d))
        self.blocks = nn.ModuleList(TransformerBlock(d, cfg.vlm_heads) for _ in range(cfg.vlm_blocks))
        self._randomize(derive_seed(master_seed, "intent_backbone"))
        self.requires_grad_(False)
        self.eval()

    def _randomize(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in sorted(self.named_parameters()):
                if "norm" in name:
                    continue  # keep layer norms at identity
                if p.ndim >= 2:
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[-1]))
                else:
                    p.copy_(0.02 * torch.randn(p.shape, generator=gen))

    @torch.no_grad()
    def forward(self, token_ids: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        """Fused token states X: (T_lang + 16, D) rows for one episode."""
        token_ids = torch.as_tensor(token_ids, dtype=torch.long)
        if token_ids.ndim != 1 or token_ids.numel() == 0:
            raise ValueError("token_ids must be a non-empty 1-d sequence")
        if token_ids.numel() > MAX_TOKENS:
            raise ValueError(f"instruction longer than {MAX_TOKENS} tokens")
        if token_ids.min() < 0 or token_ids.max() >= len(VOCAB):
            raise ValueError(f"token id out of vocabulary range [0, {len(VOCAB)})")
        image = torch.as_tensor(image)
        if image.shape != (self.cfg.image_size, self.cfg.image_size, 3):
            raise ValueError(f"expected one {self.cfg.image_size}x{self.cfg.image_size}x3 image")
        p = self.cfg.patch_size
        n = self.cfg.image_size // p
        pix = image.to(torch.float32) / 255.0
        patches = pix.reshape(n, p, n, p, 3).permute(0, 2, 1, 3, 4).reshape(n * n, p * p * 3)
        lang = self.embed(token_ids) + self.pos_emb[: token_ids.numel()]
        vis = self.patch_proj(patches) + self.pos_emb[MAX_TOKENS:]
        x = torch.cat([lang, vis], dim=0).unsqueeze(0)
        for blk in self.blocks:
            x = blk(x)
        return x.squeeze(0)


class IntentExtractor(nn.Module):
    """Trainable pooling/projection head over the frozen mixer, with the
    once-per-episode usage contract."""

    def __init__(self, cfg: RunConfig, master_seed: int):
        super().__init__()
        self.cfg = cfg
        self.backbone = FrozenMixer(cfg, master_seed)
        d = cfg.d_vlm
        self.q = nn.Parameter(torch.randn(d, generator=torch.Generator().manual_seed(derive_seed(master_seed, "intent_query"))) * 0.02)
        self.w_k = nn.Parameter(torch.eye(d))
        self.proj = mlp(d, d, cfg.d_i)
        self.calls = 0
        self._episode_intent: torch.Tensor | None = None

    def trainable_parameters(self):
        return [self.q, self.w_k, *self.proj.parameters()]

    def token_states(self, token_ids, image) -> torch.Tensor:
        return self.backbone(token_ids, image)

    def pool_project(self, x: torch.Tensor) -> torch.Tensor:
        """Trainable path from token states (..., N, D) to intents (..., D_i)."""
        return self.proj(single_query_pool(x, self.q, self.w_k))

    def pool_weights(self, x: torch.Tensor) -> torch.Tensor:
        d = x.shape[-1]
        key = self.w_k.transpose(-1, -2) @ self.q
        return torch.softmax(x @ key / math.sqrt(d), dim=-1)

    # -- episodic contract -----------------------------------------------------

    def begin_episode(self) -> None:
        self._episode_intent = None

    def extract(self, token_ids, image, replan: bool = False) -> torch.Tensor:
        if self._episode_intent is not None and not replan:
            raise UsageError(
                "intent already extracted for this episode; pass replan=True or call begin_episode()"
            )
        x = self.token_states(token_ids, image)
        intent = self.pool_project(x)
        self._episode_intent = intent.detach()
        self.calls += 1
        return intent

    @property
    def episode_intent(self) -> torch.Tensor:
        if self._episode_intent is None:
            raise UsageError("no intent extracted yet this episode")
        return self._episode_intent
