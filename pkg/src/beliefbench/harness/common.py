"""Shared plumbing for the training/evaluation harness."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from ..belief import BeliefCore, BeliefFilter
from ..config import RunConfig
from ..dataset import Episode
from ..env import augment_image
from ..perception import FrameEncoder
from ..storage import load_arrays


class HarnessError(RuntimeError):
    pass


def load_checkpoint(
    path: str | Path,
    expect_kind: str | None = None,
    cfg: RunConfig | None = None,
) -> tuple[dict[str, np.ndarray], dict]:
    """Load a stage checkpoint, verifying its kind and configuration hash."""
    if not Path(path).exists():
        raise HarnessError(f"missing prerequisite checkpoint: {path}")
    arrays, meta = load_arrays(path)
    if expect_kind is not None and meta.get("kind") != expect_kind:
        raise HarnessError(f"{path}: expected a {expect_kind!r} checkpoint, found {meta.get('kind')!r}")
    if cfg is not None and meta.get("config_hash") != cfg.config_hash():
        raise HarnessError(
            f"{path}: config hash {meta.get('config_hash')!r} does not match the active config "
            f"{cfg.config_hash()!r}"
        )
    return arrays, meta


def eligible_episodes(episodes: list[Episode], min_len: int) -> list[Episode]:
    keep = [ep for ep in episodes if len(ep) >= min_len]
    if not keep:
        raise HarnessError(
            f"no episodes of length >= {min_len}; lower the segment length or record longer episodes"
        )
    return keep


def sample_segments(
    episodes: list[Episode],
    batch: int,
    seg_len: int,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Uniformly sample aligned (obs, actions, proprio) segments."""
    pool = eligible_episodes(episodes, seg_len)
    obs = np.empty((batch, seg_len, *pool[0].obs.shape[1:]), dtype=np.uint8)
    actions = np.empty((batch, seg_len, pool[0].actions.shape[-1]), dtype=np.float32)
    proprio = np.empty((batch, seg_len, pool[0].proprio.shape[-1]), dtype=np.float32)
    for i in range(batch):
        ep = pool[rng.integers(len(pool))]
        start = int(rng.integers(len(ep) - seg_len + 1))
        sl = slice(start, start + seg_len)
        obs[i] = ep.obs[sl]
        actions[i] = ep.actions[sl]
        proprio[i] = ep.proprio[sl]
    return {"obs": obs, "actions": actions, "proprio": proprio}


def augment_batch(obs: np.ndarray, rng: np.random.Generator, cfg: RunConfig) -> np.ndarray:
    """Per-frame augmentation of a (..., H, W, 3) uint8 stack."""
    flat = obs.reshape(-1, *obs.shape[-3:])
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        out[i] = augment_image(flat[i], rng, cfg.aug_brightness, cfg.aug_noise, cfg.aug_crop)
    return out.reshape(obs.shape)


def encode_sequence(encoder: FrameEncoder, obs: np.ndarray, proprio: np.ndarray) -> torch.Tensor:
    """Frame summaries for stacked (B, T, H, W, 3) / (B, T, P) inputs."""
    b, t = obs.shape[:2]
    images = torch.as_tensor(obs.reshape(b * t, *obs.shape[2:]))
    props = torch.as_tensor(proprio.reshape(b * t, -1), dtype=torch.float32)
    return encoder(images, props).reshape(b, t, -1)


@torch.no_grad()
def episode_beliefs(
    core: BeliefCore,
    encoder: FrameEncoder,
    ep: Episode,
    mode: str = "posterior",
) -> torch.Tensor:
    """Posterior-mean belief trajectory (T, D_b) for one recorded episode."""
    filt = BeliefFilter(encoder, core, mode=mode)
    prev = np.zeros(ep.actions.shape[-1], dtype=np.float32)
    out = []
    for t in range(len(ep)):
        b, _ = filt.step(ep.obs[t], ep.proprio[t], prev)
        out.append(b)
        prev = ep.actions[t]
    return torch.stack(out)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Plain Pearson correlation; validated against the direct formula."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length 1-d arrays of size >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc**2).sum() * (yc**2).sum())
    if denom == 0.0:
        raise ValueError("zero variance input")
    return float((xc * yc).sum() / denom)
