"""Memory-scaling and invocation-count measurements.

Invocation counting stands in for wall-clock latency: external systems and
hardware-bound timings are out of scope, so the reported quantity is how
often each component runs per episode, with a counterfactual per-step intent
variant counted for the ratio.  All outputs label the proxy as such.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..baselines import MEMORY_KINDS, retained_floats_model
from ..belief import BeliefCore, BeliefFilter
from ..config import RunConfig
from ..env import make_task
from ..perception import FrameEncoder
from ..policy import PolicyPipeline, receding_horizon_execute
from ..seeds import derive_seed
from .evaluate import task_horizon

CONTEXT_LENGTHS = (1, 2, 4, 8)
LATENCY_PROXY_NOTE = (
    "invocation counts are a latency proxy, not wall-clock measurements"
)


@dataclass
class MemoryProfile:
    contexts: tuple[int, ...]
    counts: dict[str, list[int]]          # kind -> floats per context length
    belief_step_counts: tuple[int, int]   # steps 1 vs 1000
    live_belief_counts: tuple[int, int] | None

    def ratios(self, kind: str) -> list[float]:
        row = self.counts[kind]
        return [c / row[0] for c in row]

    def rows(self) -> list[tuple]:
        out = []
        for kind in self.counts:
            out.append((kind, *[f"{r:.2f}x" for r in self.ratios(kind)]))
        return out

    def to_text(self) -> str:
        lines = ["# relative retained-context memory vs temporal context length"]
        lines.append("context_lengths = " + "/".join(str(c) for c in self.contexts))
        for kind in self.counts:
            ratios = "/".join(f"{r:.2f}x" for r in self.ratios(kind))
            lines.append(f"{kind} = {ratios}")
        s1, s1000 = self.belief_step_counts
        lines.append(f"belief_floats_step1 = {s1}")
        lines.append(f"belief_floats_step1000 = {s1000}")
        lines.append(f"belief_step_ratio = {s1000 / s1:.6f}")
        return "\n".join(lines) + "\n"


def profile_memory(cfg: RunConfig, contexts: tuple[int, ...] = CONTEXT_LENGTHS, live: bool = True) -> MemoryProfile:
    """Retained floats per memory kind per requested context length.

    The token-accumulation entry for context L is measured after ingesting L
    frames (its context IS everything seen); the belief agent's entry never
    varies.  With ``live=True`` the belief numbers are cross-checked against
    a real filter stepped 1 and 1000 times.
    """
    counts: dict[str, list[int]] = {}
    for kind in MEMORY_KINDS:
        row = []
        for c in contexts:
            steps = c if kind == "token_accumulation" else 1000
            row.append(retained_floats_model(cfg, kind, context_frames=c, steps=steps))
        counts[kind] = row
    step_counts = (
        retained_floats_model(cfg, "belief_recursive", 1, steps=1),
        retained_floats_model(cfg, "belief_recursive", 1, steps=1000),
    )
    live_counts = None
    if live:
        torch.manual_seed(0)
        encoder = FrameEncoder(cfg)
        core = BeliefCore(cfg)
        filt = BeliefFilter(encoder, core)
        img = np.zeros((cfg.image_size, cfg.image_size, 3), dtype=np.uint8)
        pro = np.zeros(cfg.proprio_dim, dtype=np.float32)
        act = np.zeros(cfg.action_dim, dtype=np.float32)
        filt.step(img, pro, act)
        at_1 = filt.retained_floats()
        for _ in range(999):
            filt.step(img, pro, act)
        at_1000 = filt.retained_floats()
        assert filt.filled_floats() <= at_1000
        live_counts = (at_1, at_1000)
    return MemoryProfile(
        contexts=tuple(contexts),
        counts=counts,
        belief_step_counts=step_counts,
        live_belief_counts=live_counts,
    )


@dataclass
class InvocationProfile:
    episodes: int
    intent_calls: np.ndarray
    env_steps: np.ndarray
    belief_updates: np.ndarray
    chunk_samples: np.ndarray
    denoiser_calls: np.ndarray
    counterfactual_intent_calls: np.ndarray  # per-step variant: one per env step
    note: str = LATENCY_PROXY_NOTE

    def ratio(self, min_steps: int = 100) -> float:
        """Counterfactual-to-actual intent ratio over episodes running at
        least ``min_steps`` steps; nan when none qualify."""
        mask = self.env_steps >= min_steps
        if not mask.any():
            return float("nan")
        return float((self.counterfactual_intent_calls[mask] / self.intent_calls[mask]).min())

    def to_text(self) -> str:
        lines = [
            f"# {self.note}",
            f"episodes = {self.episodes}",
            f"intent_calls_per_episode = {self.intent_calls.mean():.3f}",
            f"intent_calls_max = {int(self.intent_calls.max())}",
            f"mean_env_steps = {self.env_steps.mean():.3f}",
            f"mean_belief_updates = {self.belief_updates.mean():.3f}",
            f"mean_chunk_samples = {self.chunk_samples.mean():.3f}",
            f"mean_denoiser_calls = {self.denoiser_calls.mean():.3f}",
            f"counterfactual_per_step_intent_ratio = {self.ratio():.3f}",
        ]
        return "\n".join(lines) + "\n"


def profile_invocations(
    pipeline: PolicyPipeline,
    task_name: str,
    aliased: bool,
    n_episodes: int,
    seed: int,
    cfg: RunConfig,
) -> InvocationProfile:
    task = make_task(task_name, aliased=aliased, horizon=task_horizon(cfg, task_name))
    cols = {k: [] for k in ("intent", "steps", "belief", "chunks", "denoiser")}
    for i in range(n_episodes):
        log = receding_horizon_execute(pipeline, task, derive_seed(seed, "profile", i))
        cols["intent"].append(log.intent_calls)
        cols["steps"].append(log.steps)
        cols["belief"].append(log.belief_updates)
        cols["chunks"].append(log.chunk_samples)
        cols["denoiser"].append(log.denoiser_calls)
    steps = np.array(cols["steps"], dtype=np.int64)
    return InvocationProfile(
        episodes=n_episodes,
        intent_calls=np.array(cols["intent"], dtype=np.int64),
        env_steps=steps,
        belief_updates=np.array(cols["belief"], dtype=np.int64),
        chunk_samples=np.array(cols["chunks"], dtype=np.int64),
        denoiser_calls=np.array(cols["denoiser"], dtype=np.int64),
        counterfactual_intent_calls=steps.copy(),
    )
