"""Belief-representation analyses: similarity structure, latent
stochasticity, and temporal-attention inspection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..belief import BeliefCore, BeliefFilter
from ..config import RunConfig
from ..dataset import Episode
from ..perception import FrameEncoder
from ..seeds import np_rng
from ..storage import load_arrays, save_arrays
from .common import HarnessError, encode_sequence, episode_beliefs, pearson


@dataclass
class SimilarityReport:
    pearson_action: float
    pearson_obs: float
    variance_ratio_bottom_top: float
    n_pairs: int
    belief_cos: np.ndarray
    action_dist: np.ndarray
    obs_cos: np.ndarray
    config_hash: str

    def to_text(self) -> str:
        return (
            f"n_pairs = {self.n_pairs}\n"
            f"pearson_action = {self.pearson_action:.6f}\n"
            f"pearson_obs = {self.pearson_obs:.6f}\n"
            f"variance_ratio_bottom_top = {self.variance_ratio_bottom_top:.6f}\n"
            f"config_hash = {self.config_hash}\n"
        )

    def save(self, path: str | Path) -> None:
        save_arrays(
            path,
            {"belief_cos": self.belief_cos, "action_dist": self.action_dist, "obs_cos": self.obs_cos},
            {
                "kind": "similarity_report",
                "pearson_action": self.pearson_action,
                "pearson_obs": self.pearson_obs,
                "variance_ratio_bottom_top": self.variance_ratio_bottom_top,
                "n_pairs": self.n_pairs,
                "config_hash": self.config_hash,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "SimilarityReport":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "similarity_report":
            raise ValueError(f"{path} is not a similarity report")
        return cls(
            pearson_action=meta["pearson_action"],
            pearson_obs=meta["pearson_obs"],
            variance_ratio_bottom_top=meta["variance_ratio_bottom_top"],
            n_pairs=meta["n_pairs"],
            belief_cos=arrays["belief_cos"],
            action_dist=arrays["action_dist"],
            obs_cos=arrays["obs_cos"],
            config_hash=meta["config_hash"],
        )


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.cosine_similarity(a, b, dim=-1)


@torch.no_grad()
def analyze_belief_similarity(
    cfg: RunConfig,
    core: BeliefCore,
    encoder: FrameEncoder,
    episodes: list[Episode],
    n_pairs: int,
    seed: int,
) -> SimilarityReport:
    """Pair belief states across held-out episodes and correlate belief
    similarity with future action similarity and future visual similarity.

    Per pair (a, b): cosine(b_a, b_b); l2 distance between the next-H action
    sequences with each channel scaled to unit variance first, so that the
    near-binary grip command and the small position deltas contribute on the
    same footing (negated for the correlation so both axes are similarity);
    cosine between frame summaries 5 steps ahead.  Half the pairs are drawn
    within one episode and half unconstrained: unconstrained pairs almost
    never share an episode, so uniform sampling alone would concentrate all
    mass at the dissimilar end and the correlation would be estimated from a
    single stratum rather than across the similarity range.
    """
    if n_pairs < 1000:
        raise HarnessError(f"similarity analysis needs >= 1000 pairs, got {n_pairs}")
    h = cfg.chunk_h
    min_len = h + 6
    pool = [ep for ep in episodes if len(ep) >= min_len]
    if len(pool) < 2:
        raise HarnessError(f"need >= 2 episodes of length >= {min_len} for pair sampling")

    beliefs = [episode_beliefs(core, encoder, ep) for ep in pool]
    summaries = [encode_sequence(encoder, ep.obs[None], ep.proprio[None])[0] for ep in pool]

    index = [(i, t) for i, ep in enumerate(pool) for t in range(len(ep) - h - 5 + 1)]
    rng = np_rng(seed, "similarity-pairs")
    by_ep: dict[int, list[int]] = {}
    for j, (i, _) in enumerate(index):
        by_ep.setdefault(i, []).append(j)
    picks = np.empty((n_pairs, 2), dtype=np.int64)
    for j in range(n_pairs):
        if j % 2 == 0:
            rows = by_ep[int(rng.integers(len(pool)))]
            picks[j] = rng.integers(len(rows), size=2)
            picks[j] = [rows[picks[j, 0]], rows[picks[j, 1]]]
        else:
            picks[j] = rng.integers(len(index), size=2)

    b_a = torch.stack([beliefs[index[i][0]][index[i][1]] for i in picks[:, 0]])
    b_b = torch.stack([beliefs[index[i][0]][index[i][1]] for i in picks[:, 1]])
    f_a = torch.stack([summaries[index[i][0]][index[i][1] + 5] for i in picks[:, 0]])
    f_b = torch.stack([summaries[index[i][0]][index[i][1] + 5] for i in picks[:, 1]])

    channel_std = np.concatenate([ep.actions for ep in pool]).std(axis=0)
    channel_std = np.maximum(channel_std, 1e-6)

    def chunk(i):
        ep_i, t = index[i]
        scaled = pool[ep_i].actions[t : t + h] / channel_std
        return torch.as_tensor(scaled, dtype=torch.float32).reshape(-1)

    act_a = torch.stack([chunk(i) for i in picks[:, 0]])
    act_b = torch.stack([chunk(i) for i in picks[:, 1]])

    belief_cos = _cosine(b_a, b_b).numpy()
    action_dist = torch.linalg.vector_norm(act_a - act_b, dim=-1).numpy()
    obs_cos = _cosine(f_a, f_b).numpy()

    order = np.argsort(belief_cos, kind="stable")
    k = max(1, int(0.2 * n_pairs))
    var_bottom = float(action_dist[order[:k]].var())
    var_top = float(action_dist[order[-k:]].var())
    ratio = var_bottom / var_top if var_top > 0 else float("inf")

    return SimilarityReport(
        pearson_action=pearson(belief_cos, -action_dist),
        pearson_obs=pearson(belief_cos, obs_cos),
        variance_ratio_bottom_top=ratio,
        n_pairs=n_pairs,
        belief_cos=belief_cos,
        action_dist=action_dist,
        obs_cos=obs_cos,
        config_hash=cfg.config_hash(),
    )


@dataclass
class StochasticityReport:
    divergence_1: np.ndarray   # (n, n) pairwise cosine distances, 1-step decodes
    divergence_5: np.ndarray   # (n, n), 5-step decodes
    kl_curve: np.ndarray       # per-iteration mean per-step KL from training
    kl_final_mean: float       # mean over the final 10% of iterations
    config_hash: str

    def mean_pairwise(self, horizon: int) -> float:
        m = self.divergence_1 if horizon == 1 else self.divergence_5
        n = m.shape[0]
        if n < 2:
            return 0.0
        off = ~np.eye(n, dtype=bool)
        return float(m[off].mean())

    def to_text(self) -> str:
        return (
            f"n_samples = {self.divergence_1.shape[0]}\n"
            f"mean_pairwise_divergence_h1 = {self.mean_pairwise(1):.6f}\n"
            f"mean_pairwise_divergence_h5 = {self.mean_pairwise(5):.6f}\n"
            f"kl_final_10pct_mean_nats = {self.kl_final_mean:.6f}\n"
            f"config_hash = {self.config_hash}\n"
        )


def kl_final_mean(kl_curve: np.ndarray) -> float:
    tail = max(1, int(round(0.1 * len(kl_curve))))
    return float(np.asarray(kl_curve[-tail:], dtype=np.float64).mean())


@torch.no_grad()
def analyze_stochasticity(
    cfg: RunConfig,
    core: BeliefCore,
    belief: torch.Tensor,
    kl_curve: np.ndarray,
    n_samples: int = 16,
    generator: torch.Generator | None = None,
) -> StochasticityReport:
    """Decode several prior draws from one belief and report their pairwise
    divergence, alongside the training-time KL trajectory."""
    if not core.stochastic:
        raise HarnessError("deterministic belief variant has no latent to sample")
    if n_samples < 1:
        raise HarnessError("n_samples must be positive")
    generator = generator or torch.Generator().manual_seed(0)
    b = belief.unsqueeze(0).expand(n_samples, -1)
    prior = core.prior(b)
    z = prior.sample(torch.randn(prior.mu.shape, generator=generator))
    dec1 = core.decode_future(b, z, horizon=1)
    dec5 = core.decode_future(b, z, horizon=5)

    def pairwise(x: torch.Tensor) -> np.ndarray:
        xn = F.normalize(x, dim=-1)
        return (1.0 - xn @ xn.T).clamp(min=0.0).numpy()

    return StochasticityReport(
        divergence_1=pairwise(dec1),
        divergence_5=pairwise(dec5),
        kl_curve=np.asarray(kl_curve, dtype=np.float64),
        kl_final_mean=kl_final_mean(kl_curve),
        config_hash=cfg.config_hash(),
    )


@dataclass
class AttentionDump:
    timesteps: np.ndarray   # (n,)
    rows: np.ndarray        # (n, K+1): [belief token, K window slots]
    occlusions: np.ndarray  # occlusion-event timesteps in the episode
    uniform_level: float

    def belief_token_weight(self) -> np.ndarray:
        return self.rows[:, 0]

    def to_text(self) -> str:
        lines = [f"uniform_level = {self.uniform_level:.6f}"]
        for t, row in zip(self.timesteps, self.rows):
            lines.append(f"t={int(t)} " + " ".join(f"{w:.4f}" for w in row))
        return "\n".join(lines) + "\n"


def occlusion_steps(ep: Episode) -> list[int]:
    """Timesteps where a placement occludes an object (placed count rises)."""
    placed = ep.gt[:, 6]
    return [t for t in range(1, len(ep)) if placed[t] > placed[t - 1]]


@torch.no_grad()
def dump_attention(
    cfg: RunConfig,
    core: BeliefCore,
    encoder: FrameEncoder,
    ep: Episode,
    timesteps: list[int] | None = None,
) -> AttentionDump:
    """Evidence-position attention rows over [belief token, K-slot window]
    while filtering one episode; defaults to the steps right after each
    occlusion event."""
    occ = occlusion_steps(ep)
    if timesteps is None:
        if not occ:
            raise HarnessError("episode contains no occlusion event; pass explicit timesteps")
        timesteps = sorted({min(t + d, len(ep) - 1) for t in occ for d in (0, 1, 2)})
    wanted = set(int(t) for t in timesteps)
    bad = [t for t in wanted if not 0 <= t < len(ep)]
    if bad:
        raise HarnessError(f"timesteps out of range for a length-{len(ep)} episode: {sorted(bad)}")

    filt = BeliefFilter(encoder, core)
    prev = np.zeros(ep.actions.shape[-1], dtype=np.float32)
    rows = {}
    for t in range(len(ep)):
        _, _, attn = filt.step_attn(ep.obs[t], ep.proprio[t], prev)
        if t in wanted:
            rows[t] = attn.numpy().copy()
        prev = ep.actions[t]
    ts = sorted(rows)
    return AttentionDump(
        timesteps=np.array(ts, dtype=np.int64),
        rows=np.stack([rows[t] for t in ts]),
        occlusions=np.array(occ, dtype=np.int64),
        uniform_level=1.0 / (cfg.k_window + 1),
    )
