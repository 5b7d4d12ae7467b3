"""Small transformer building blocks shared across encoders."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block; optionally returns averaged attention."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim),
            nn.GELU(),
            nn.Linear(mlp_ratio * dim, dim),
        )

    def forward(self, x: torch.Tensor, need_weights: bool = False):
        h = self.norm1(x)
        attn_out, weights = self.attn(h, h, h, need_weights=need_weights)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        if need_weights:
            return x, weights
        return x


def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, out_dim))


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a module state dict into prefixed numpy arrays for storage."""
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    head = prefix + "/"
    sd = {k[len(head):]: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items() if k.startswith(head)}
    if not sd:
        raise KeyError(f"no arrays found under prefix {prefix!r}")
    module.load_state_dict(sd)
