"""Expert demonstration datasets: generation, serialization, and access.

One dataset file holds per-episode groups of named arrays

    ep<i>/obs      uint8[T, 32, 32, 3]
    ep<i>/proprio  f32[T, 6]
    ep<i>/actions  f32[T, 3]
    ep<i>/tokens   i32[L]
    ep<i>/success  u8
    ep<i>/gt       f32[T, G]        (analysis only; never a model input)

plus a manifest with episode count, per-episode seeds, task family, and the
format version.  Per-episode seeds derive from the master seed, so workers
can generate episodes independently and the single-worker output is
bit-deterministic.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .env import Action, TaskSpec, expert_action, gt_summary, make_task, render, reset, step
from .language import encode_instruction, instruction_for
from .seeds import derive_seed
from .storage import load_arrays, save_arrays


@dataclass
class Episode:
    obs: np.ndarray
    proprio: np.ndarray
    actions: np.ndarray
    tokens: np.ndarray
    success: bool
    gt: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]


def rollout_expert(task: TaskSpec, seed: int, cfg: RunConfig) -> Episode:
    """Run the scripted privileged expert once; arrays share time length T."""
    state, obs = reset(task, seed, n_colors=cfg.n_colors, n_shapes=cfg.n_shapes,
                       min_separation=cfg.min_separation)
    rng = np.random.default_rng(derive_seed(seed, "expert"))
    instruction = instruction_for(state)
    images, proprios, actions, gts = [], [], [], []
    done = False
    while not done:
        act = expert_action(state, rng, noise=cfg.expert_noise)
        images.append(obs.image)
        proprios.append(obs.proprio)
        actions.append(act.as_array())
        gts.append(gt_summary(state))
        state, obs, done = step(state, act)
    return Episode(
        obs=np.stack(images),
        proprio=np.stack(proprios),
        actions=np.stack(actions),
        tokens=np.array(encode_instruction(instruction), dtype=np.int32),
        success=state.success,
        gt=np.stack(gts),
    )


def _gen_one(args: tuple) -> Episode:
    task, ep_seed, cfg = args
    return rollout_expert(task, ep_seed, cfg)


def generate_dataset(
    cfg: RunConfig,
    task_name: str,
    n_episodes: int,
    seed: int,
    out_path: str,
    aliased: bool = False,
    workers: int = 1,
) -> dict:
    """Generate expert rollouts and serialize them; returns the manifest."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    horizon = cfg.horizon_multi if task_name in ("ppN", "stackN") else cfg.horizon_single
    task = make_task(task_name, aliased=aliased, horizon=horizon)
    ep_seeds = [derive_seed(seed, "episode", i) for i in range(n_episodes)]

    jobs = [(task, s, cfg) for s in ep_seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(_gen_one, jobs, chunksize=8))
    else:
        episodes = [_gen_one(j) for j in jobs]

    arrays: dict[str, np.ndarray] = {}
    for i, ep in enumerate(episodes):
        key = f"ep{i:05d}"
        arrays[f"{key}/obs"] = ep.obs
        arrays[f"{key}/proprio"] = ep.proprio
        arrays[f"{key}/actions"] = ep.actions
        arrays[f"{key}/tokens"] = ep.tokens
        arrays[f"{key}/success"] = np.array(1 if ep.success else 0, dtype=np.uint8)
        arrays[f"{key}/gt"] = ep.gt
    manifest = {
        "kind": "dataset",
        "task": task_name,
        "aliased": aliased,
        "n_episodes": n_episodes,
        "seed": seed,
        "episode_seeds": ep_seeds,
        "success_count": int(sum(ep.success for ep in episodes)),
        "horizon": horizon,
        "config_hash": cfg.config_hash(),
    }
    save_arrays(out_path, arrays, manifest)
    return manifest


class DatasetFile:
    """Read-side view of one or more dataset containers."""

    def __init__(self, *paths: str):
        if not paths:
            raise ValueError("at least one dataset path required")
        self.episodes: list[Episode] = []
        self.manifests: list[dict] = []
        for path in paths:
            arrays, manifest = load_arrays(path)
            if manifest.get("kind") != "dataset":
                raise ValueError(f"{path} is not a dataset container")
            self.manifests.append(manifest)
            for i in range(manifest["n_episodes"]):
                key = f"ep{i:05d}"
                self.episodes.append(
                    Episode(
                        obs=arrays[f"{key}/obs"],
                        proprio=arrays[f"{key}/proprio"],
                        actions=arrays[f"{key}/actions"],
                        tokens=arrays[f"{key}/tokens"],
                        success=bool(arrays[f"{key}/success"]),
                        gt=arrays[f"{key}/gt"],
                    )
                )

    def __len__(self) -> int:
        return len(self.episodes)

    def __getitem__(self, i: int) -> Episode:
        return self.episodes[i]

    def action_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-dimension mean/std over all actions, for chunk normalization."""
        acts = np.concatenate([ep.actions for ep in self.episodes], axis=0)
        mean = acts.mean(axis=0)
        std = acts.std(axis=0)
        std[std < 1e-6] = 1.0
        return mean.astype(np.float32), std.astype(np.float32)
