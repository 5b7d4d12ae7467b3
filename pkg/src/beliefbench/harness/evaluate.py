"""Success-rate evaluation with stored seeds for exact replay."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..config import RunConfig
from ..env import Observation, expert_action, make_task, reset, step
from ..policy import PolicyPipeline, receding_horizon_execute
from ..seeds import derive_seed, np_rng
from ..storage import load_arrays, save_arrays


@dataclass
class EvalReport:
    task: str
    aliased: bool
    variant: str
    n_episodes: int
    success_rate: float
    outcomes: np.ndarray       # uint8 per episode
    steps: np.ndarray          # int64 per episode
    seeds: np.ndarray          # int64 per episode, replayable
    config_hash: str
    perturbed: bool
    extras: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"task = {self.task}",
            f"aliased = {'true' if self.aliased else 'false'}",
            f"variant = {self.variant}",
            f"n_episodes = {self.n_episodes}",
            f"success_rate = {self.success_rate:.6f}",
            f"mean_steps = {float(self.steps.mean()):.3f}",
            f"config_hash = {self.config_hash}",
            f"perturbed = {'true' if self.perturbed else 'false'}",
        ]
        for k, v in sorted(self.extras.items()):
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        arrays = {"outcomes": self.outcomes, "steps": self.steps, "seeds": self.seeds}
        meta = {
            "kind": "eval_report",
            "task": self.task,
            "aliased": self.aliased,
            "variant": self.variant,
            "n_episodes": self.n_episodes,
            "success_rate": self.success_rate,
            "config_hash": self.config_hash,
            "perturbed": self.perturbed,
            "extras": self.extras,
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "eval_report":
            raise ValueError(f"{path} is not an evaluation report")
        return cls(
            task=meta["task"],
            aliased=meta["aliased"],
            variant=meta["variant"],
            n_episodes=meta["n_episodes"],
            success_rate=meta["success_rate"],
            outcomes=arrays["outcomes"],
            steps=arrays["steps"],
            seeds=arrays["seeds"],
            config_hash=meta["config_hash"],
            perturbed=meta["perturbed"],
            extras=meta.get("extras", {}),
        )


def make_obs_transform(cfg: RunConfig, episode_seed: int):
    """Sensing perturbations: frame drops repeat the last delivered image;
    observation noise adds clipped Gaussian pixel noise."""
    rng = np_rng(episode_seed, "perturb")
    last = {"image": None}

    def transform(t: int, obs: Observation) -> Observation:
        image = obs.image
        if last["image"] is not None and rng.random() < cfg.frame_drop_p:
            image = last["image"]
        if cfg.obs_noise > 0:
            noisy = image.astype(np.float64) + rng.normal(0.0, cfg.obs_noise * 255.0, size=image.shape)
            image = np.clip(np.round(noisy), 0, 255).astype(np.uint8)
        last["image"] = image
        return Observation(image=image, proprio=obs.proprio)

    return transform


def task_horizon(cfg: RunConfig, task_name: str) -> int:
    return cfg.horizon_single if task_name in ("pp1", "stack1") else cfg.horizon_multi


def evaluate_success(
    pipeline: PolicyPipeline,
    task_name: str,
    aliased: bool,
    n_episodes: int,
    seed: int,
    cfg: RunConfig,
    variant: str = "ttt",
    perturb: bool | None = None,
) -> EvalReport:
    perturb = cfg.perturb if perturb is None else perturb
    task = make_task(task_name, aliased=aliased, horizon=task_horizon(cfg, task_name))
    seeds = np.array([derive_seed(seed, "eval", i) for i in range(n_episodes)], dtype=np.int64)
    outcomes = np.zeros(n_episodes, dtype=np.uint8)
    steps = np.zeros(n_episodes, dtype=np.int64)
    for i, ep_seed in enumerate(seeds):
        transform = make_obs_transform(cfg, int(ep_seed)) if perturb else None
        log = receding_horizon_execute(pipeline, task, int(ep_seed), obs_transform=transform)
        outcomes[i] = 1 if log.success else 0
        steps[i] = log.steps
    return EvalReport(
        task=task_name,
        aliased=aliased,
        variant=variant,
        n_episodes=n_episodes,
        success_rate=float(outcomes.mean()),
        outcomes=outcomes,
        steps=steps,
        seeds=seeds,
        config_hash=cfg.config_hash(),
        perturbed=perturb,
    )


def evaluate_expert(task_name: str, aliased: bool, n_episodes: int, seed: int, cfg: RunConfig) -> EvalReport:
    """Privileged-controller calibration run (upper bound on task feasibility)."""
    task = make_task(task_name, aliased=aliased, horizon=task_horizon(cfg, task_name))
    seeds = np.array([derive_seed(seed, "expert-eval", i) for i in range(n_episodes)], dtype=np.int64)
    outcomes = np.zeros(n_episodes, dtype=np.uint8)
    steps = np.zeros(n_episodes, dtype=np.int64)
    for i, ep_seed in enumerate(seeds):
        state, _ = reset(task, seed=derive_seed(int(ep_seed), "reset"), n_colors=cfg.n_colors, n_shapes=cfg.n_shapes, min_separation=cfg.min_separation)
        rng = np_rng(int(ep_seed), "expert")
        t = 0
        while not state.terminal:
            state, _, _ = step(state, expert_action(state, rng, cfg.expert_noise))
            t += 1
        outcomes[i] = 1 if state.success else 0
        steps[i] = t
    return EvalReport(
        task=task_name,
        aliased=aliased,
        variant="expert",
        n_episodes=n_episodes,
        success_rate=float(outcomes.mean()),
        outcomes=outcomes,
        steps=steps,
        seeds=seeds,
        config_hash=cfg.config_hash(),
        perturbed=False,
    )
