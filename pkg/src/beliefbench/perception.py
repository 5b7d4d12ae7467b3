"""Frame encoder: patch tokens, learned attention pooling, contrastive warm-start.

Each observation becomes 16 visual patch tokens plus one proprioception token;
a small self-attention stack mixes them and a single learned query pools the
result into a frame summary

    alpha_i = softmax(d_q . t_i),    f = sum_i alpha_i t_i.

The encoder is warm-started with a temporal InfoNCE objective (nearby frames
of the same episode are positives, frames of other episodes negatives) plus a
pixel-reconstruction auxiliary that keeps scene layout decodable from the
pooled summary; a slow EMA copy of it later provides drift-free prediction
targets for the belief model.
"""

from __future__ import annotations

import copy

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RunConfig
from .nets import TransformerBlock, mlp


def attention_pool(tokens: torch.Tensor, query: torch.Tensor, return_weights: bool = False):
    """Pool tokens (..., N, D) with a learned query (D,) into (..., D).

    Weights are a softmax over the scalar logits query . token, so they sum
    to one and the output lies in the convex hull of the tokens.
    """
    logits = torch.matmul(tokens, query)
    weights = torch.softmax(logits, dim=-1)
    pooled = torch.matmul(weights.unsqueeze(-2), tokens).squeeze(-2)
    if return_weights:
        return pooled, weights
    return pooled


class FrameEncoder(nn.Module):
    """Patch projector + proprio embedding + self-attention + learned pooling."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.patch = cfg.patch_size
        patch_dim = 3 * cfg.patch_size**2
        self.n_tokens = cfg.n_patches + 1
        self.patch_proj = nn.Linear(patch_dim, cfg.d_f)
        self.proprio_proj = nn.Linear(cfg.proprio_dim, cfg.d_f)
        self.pos_emb = nn.Parameter(torch.zeros(self.n_tokens, cfg.d_f))
        nn.init.normal_(self.pos_emb, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d_f, cfg.enc_heads) for _ in range(cfg.enc_blocks)
        )
        self.pool_query = nn.Parameter(torch.zeros(cfg.d_f))
        nn.init.normal_(self.pool_query, std=0.02)

    def tokenize(self, image: torch.Tensor, proprio: torch.Tensor) -> torch.Tensor:
        """Project patches and proprio to tokens (B, n_patches+1, d_f).

        Pure linear maps: no positional information is added here, so a
        constant image yields identical rows (the bias of the projection).
        """
        if image.dim() == 3:
            image, proprio = image.unsqueeze(0), proprio.unsqueeze(0)
        b, h, w, c = image.shape
        if h != self.cfg.image_size or w != self.cfg.image_size or c != 3:
            raise ValueError(f"expected ({self.cfg.image_size},{self.cfg.image_size},3) images, got {tuple(image.shape[1:])}")
        x = image.to(self.patch_proj.weight.dtype) / 255.0
        p = self.patch
        # (B, H/p, p, W/p, p, 3) -> (B, n_patches, p*p*3)
        x = x.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, self.cfg.n_patches, p * p * c)
        vis = self.patch_proj(x)
        prop = self.proprio_proj(proprio.to(vis.dtype)).unsqueeze(1)
        return torch.cat([vis, prop], dim=1)

    def encode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        x = tokens + self.pos_emb
        for blk in self.blocks:
            x = blk(x)
        return x

    def forward(self, image: torch.Tensor, proprio: torch.Tensor) -> torch.Tensor:
        """Frame summary f (B, d_f) for a batch of observations."""
        squeeze = image.dim() == 3
        tokens = self.tokenize(image, proprio)
        mixed = self.encode_tokens(tokens)
        f = attention_pool(mixed, self.pool_query)
        return f.squeeze(0) if squeeze else f


def info_nce(anchor: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor, temperature: float) -> torch.Tensor:
    """InfoNCE for one anchor; all vectors are l2-normalized before similarity."""
    a = F.normalize(anchor, dim=-1)
    p = F.normalize(positive, dim=-1)
    n = F.normalize(negatives, dim=-1)
    s_pos = (a * p).sum(-1, keepdim=True)
    s_neg = n @ a
    logits = torch.cat([s_pos, s_neg]) / temperature
    return -F.log_softmax(logits, dim=0)[0]


def contrastive_warmstart_loss(
    summaries: torch.Tensor,
    delta_max_offset: int,
    temperature: float,
    generator: torch.Generator,
    n_negatives: int = 64,
) -> torch.Tensor:
    """Temporal InfoNCE over a batch of summary sequences (B, T, d_f).

    For each anchor f_t the positive is f_{t+delta} with delta drawn uniformly
    from [1, delta_max_offset] (capped by the sequence end); negatives are
    summaries sampled from the other sequences in the batch.
    """
    if summaries.dim() != 3:
        raise ValueError("expected (B, T, D) summaries")
    b, t, d = summaries.shape
    if b < 2:
        raise ValueError("need at least 2 sequences for in-batch negatives")
    if t < 2:
        raise ValueError("sequences must have length >= 2")
    norm = F.normalize(summaries, dim=-1)

    deltas = torch.randint(1, delta_max_offset + 1, (b, t), generator=generator)
    anchor_t = torch.arange(t).unsqueeze(0).expand(b, t)
    pos_t = torch.minimum(anchor_t + deltas, torch.full_like(anchor_t, t - 1))
    valid = pos_t > anchor_t  # anchors at the very end have no future positive
    if not bool(valid.any()):
        raise ValueError("no valid anchor/positive pairs; sequences too short")

    flat = norm.reshape(b * t, d)
    anchors = flat  # (B*T, D)
    pos_idx = (torch.arange(b).unsqueeze(1) * t + pos_t).reshape(-1)
    positives = flat[pos_idx]

    # negatives: uniform over entries of other episodes
    k = min(n_negatives, (b - 1) * t)
    offsets = torch.randint(0, (b - 1) * t, (b * t, k), generator=generator)
    own_ep = torch.arange(b).repeat_interleave(t).unsqueeze(1)
    neg_ep = offsets // t
    neg_ep = neg_ep + (neg_ep >= own_ep).long()  # skip own episode
    neg_idx = neg_ep * t + offsets % t
    negatives = flat[neg_idx]  # (B*T, K, D)

    s_pos = (anchors * positives).sum(-1, keepdim=True)
    s_neg = torch.bmm(negatives, anchors.unsqueeze(-1)).squeeze(-1)
    logits = torch.cat([s_pos, s_neg], dim=1) / temperature
    loss = -F.log_softmax(logits, dim=1)[:, 0]
    return loss[valid.reshape(-1)].mean()


class SummaryDecoder(nn.Module):
    """Pixel head attached to the pooled summary during the warm start only.

    The contrastive term is satisfiable with coarse episode-identity features,
    which leaves object coordinates too blurry for fine control downstream.
    Decoding the full frame back out of the pooled vector forces scene layout
    through the pooling bottleneck at pixel precision.  The head is dropped
    after pretraining; nothing at rollout time consumes it.
    """

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.net = mlp(cfg.d_f, cfg.warmstart_dec_hidden, 3 * cfg.image_size**2)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        out = self.net(f)
        s = self.cfg.image_size
        return out.reshape(*f.shape[:-1], s, s, 3)


def reconstruction_loss(decoder: SummaryDecoder, summaries: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
    """Mean squared pixel error of frames decoded from pooled summaries."""
    target = images.to(summaries.dtype) / 255.0
    return F.mse_loss(decoder(summaries), target)


class TargetEncoder:
    """EMA shadow of a frame encoder; provides gradient-blocked targets."""

    def __init__(self, online: FrameEncoder):
        self.module = copy.deepcopy(online)
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.module.eval()

    @torch.no_grad()
    def forward(self, image: torch.Tensor, proprio: torch.Tensor) -> torch.Tensor:
        return self.module(image, proprio)

    __call__ = forward


@torch.no_grad()
def ema_update(target: TargetEncoder | nn.Module, online: nn.Module, tau_ema: float) -> None:
    """theta_bar <- tau * theta_bar + (1 - tau) * theta, parameter-wise."""
    tgt = target.module if isinstance(target, TargetEncoder) else target
    for p_t, p_o in zip(tgt.parameters(), online.parameters(), strict=True):
        p_t.mul_(tau_ema).add_(p_o, alpha=1.0 - tau_ema)
