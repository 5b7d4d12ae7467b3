"""Staged training: contrastive warm start -> belief world model -> policy.

Each stage writes one self-contained checkpoint (module weights, loss
curves, config hash, seed) and later stages refuse checkpoints produced
under a different configuration.  Single-worker runs are bit-deterministic:
module initialization, batch sampling, augmentation, latent sampling, and
diffusion-step draws all derive from the run seed.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from ..baselines import AblationConfig
from ..belief import BeliefCore, BeliefSchedule, belief_rollout_train, window_slices
from ..config import RunConfig
from ..dataset import DatasetFile
from ..intent import IntentExtractor
from ..nets import load_module_arrays, module_arrays
from ..perception import (
    FrameEncoder,
    SummaryDecoder,
    TargetEncoder,
    contrastive_warmstart_loss,
    ema_update,
    reconstruction_loss,
)
from ..policy import ActionNormalizer, Denoiser, NoiseSchedule, StateFuser, diffusion_loss
from ..seeds import derive_seed, np_rng, torch_gen
from ..storage import save_arrays
from .common import HarnessError, augment_batch, encode_sequence, load_checkpoint, sample_segments

STAGES = ("warmstart", "belief", "policy")


class PixelTargets(nn.Module):
    """Frozen random projection of mean-pooled pixels; the prediction target
    used when frame-encoder targets are ablated (vision only, no learning)."""

    def __init__(self, cfg: RunConfig, master_seed: int):
        super().__init__()
        self.cfg = cfg
        pooled_dim = cfg.patch_size * cfg.patch_size * 3
        gen = torch.Generator().manual_seed(derive_seed(master_seed, "pixel_targets"))
        self.register_buffer("proj", torch.randn(pooled_dim, cfg.d_f, generator=gen) / math.sqrt(pooled_dim))

    @torch.no_grad()
    def forward(self, obs: np.ndarray) -> torch.Tensor:
        pool = self.cfg.image_size // self.cfg.patch_size
        img = torch.as_tensor(obs).to(torch.float32) / 255.0
        b, t, h, w, c = img.shape
        pooled = img.reshape(b, t, h // pool, pool, w // pool, pool, c).mean(dim=(3, 5))
        return pooled.reshape(b, t, -1) @ self.proj


def checkpoint_name(stage: str, ablation: AblationConfig) -> str:
    return "warmstart.ckpt" if stage == "warmstart" else f"{stage}_{ablation.code}.ckpt"


def _save(
    path: Path,
    arrays: dict,
    meta: dict,
    diag: dict[str, list],
    gen: torch.Generator | None = None,
    rng: np.random.Generator | None = None,
) -> None:
    payload = dict(arrays)
    for key, values in diag.items():
        payload[f"diag/{key}"] = np.asarray(values, dtype=np.float64)
    if gen is not None:  # final RNG states, recorded for provenance
        payload["rng/torch_state"] = gen.get_state().numpy()
    if rng is not None:
        meta = {**meta, "rng_np_state": repr(rng.bit_generator.state)}
    save_arrays(path, payload, meta)


def _base_meta(cfg: RunConfig, kind: str, ablation: AblationConfig, iters: int, data: DatasetFile) -> dict:
    return {
        "kind": kind,
        "config_hash": cfg.config_hash(),
        "master_seed": cfg.seed,
        "ablation": ablation.code,
        "iterations": iters,
        "n_train_episodes": len(data),
        "tasks": sorted({m["task"] for m in data.manifests}),
    }


def train_warmstart(cfg: RunConfig, data: DatasetFile, out_dir: str | Path) -> Path:
    """Temporal-contrastive pretraining of the frame encoder, with a pixel
    reconstruction auxiliary so the pooled summary keeps precise layout."""
    torch.manual_seed(derive_seed(cfg.seed, "warmstart", "init"))
    encoder = FrameEncoder(cfg)
    decoder = SummaryDecoder(cfg)
    params = [*encoder.parameters(), *decoder.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.warmstart_lr)
    rng = np_rng(cfg.seed, "warmstart", "sampler")
    gen = torch_gen(cfg.seed, "warmstart", "negatives")
    diag: dict[str, list] = {"iteration": [], "loss": [], "contrastive": [], "recon": []}

    for it in range(cfg.warmstart_iters):
        batch = sample_segments(data.episodes, cfg.warmstart_batch, cfg.warmstart_segment, rng)
        obs = augment_batch(batch["obs"], rng, cfg) if cfg.augment else batch["obs"]
        summaries = encode_sequence(encoder, obs, batch["proprio"])
        nce = contrastive_warmstart_loss(
            summaries,
            delta_max_offset=cfg.delta_max_offset,
            temperature=cfg.tau_temp,
            generator=gen,
            n_negatives=cfg.contrast_negatives,
        )
        recon = reconstruction_loss(decoder, summaries, torch.as_tensor(np.ascontiguousarray(obs)))
        loss = nce + cfg.warmstart_recon_weight * recon
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        diag["iteration"].append(it)
        diag["loss"].append(float(loss.detach()))
        diag["contrastive"].append(float(nce.detach()))
        diag["recon"].append(float(recon.detach()))

    out = Path(out_dir) / checkpoint_name("warmstart", AblationConfig.from_code("ttt"))
    meta = _base_meta(cfg, "warmstart", AblationConfig.from_code("ttt"), cfg.warmstart_iters, data)
    del meta["ablation"]  # the warm start is shared by every variant
    arrays = {**module_arrays(encoder, "encoder"), **module_arrays(decoder, "decoder")}
    _save(out, arrays, meta, diag, gen=gen, rng=rng)
    return out


def train_belief(
    cfg: RunConfig,
    data: DatasetFile,
    out_dir: str | Path,
    ablation: AblationConfig,
    warmstart_path: str | Path | None = None,
) -> Path:
    """World-model training of the belief core (encoder co-trained)."""
    if not ablation.needs_belief:
        raise HarnessError(f"variant {ablation.code} has no belief stage")
    out_dir = Path(out_dir)
    warmstart_path = Path(warmstart_path or out_dir / checkpoint_name("warmstart", ablation))
    w_arrays, _ = load_checkpoint(warmstart_path, expect_kind="warmstart", cfg=cfg)

    torch.manual_seed(derive_seed(cfg.seed, "belief", "init"))
    encoder = FrameEncoder(cfg)
    load_module_arrays(encoder, w_arrays, "encoder")
    target = TargetEncoder(encoder)
    pixel_targets = None if ablation.use_frame_targets else PixelTargets(cfg, cfg.seed)
    core = BeliefCore(cfg, stochastic=ablation.use_stochastic_z)

    opt = torch.optim.Adam([*encoder.parameters(), *core.parameters()], lr=cfg.belief_lr)
    schedule = BeliefSchedule.from_config(cfg, cfg.belief_iters)
    rng = np_rng(cfg.seed, "belief", "sampler")
    gen = torch_gen(cfg.seed, "belief", "latent")
    diag: dict[str, list] = {k: [] for k in ("iteration", "total", "one_step", "five_step", "kl", "inv", "beta")}

    for it in range(cfg.belief_iters):
        batch = sample_segments(data.episodes, cfg.belief_batch, cfg.belief_segment, rng)
        obs_online = augment_batch(batch["obs"], rng, cfg) if cfg.augment else batch["obs"]
        frames_online = encode_sequence(encoder, obs_online, batch["proprio"])
        if pixel_targets is None:
            frames_target = encode_sequence(target.module, batch["obs"], batch["proprio"]).detach()
        else:
            frames_target = pixel_targets(batch["obs"])
        actions = torch.as_tensor(batch["actions"])
        proprio = torch.as_tensor(batch["proprio"])
        loss, stats = belief_rollout_train(core, frames_online, frames_target, actions, proprio, schedule, it, gen)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_([*encoder.parameters(), *core.parameters()], cfg.grad_clip)
        opt.step()
        if pixel_targets is None:
            ema_update(target.module, encoder, cfg.tau_ema)
        diag["iteration"].append(it)
        for key in ("total", "one_step", "five_step", "kl", "inv", "beta"):
            diag[key].append(stats[key])

    arrays = {
        **module_arrays(encoder, "encoder"),
        **module_arrays(target.module, "target"),
        **module_arrays(core, "core"),
    }
    out = out_dir / checkpoint_name("belief", ablation)
    _save(out, arrays, _base_meta(cfg, "belief", ablation, cfg.belief_iters, data), diag, gen=gen, rng=rng)
    return out


@torch.no_grad()
def batched_posterior_beliefs(
    core: BeliefCore,
    frames: torch.Tensor,
    actions: torch.Tensor,
    proprio: torch.Tensor,
) -> torch.Tensor:
    """Posterior-mean belief grid (B, T, D_b) over padded episode stacks;
    entries past an episode's true length are meaningless and must be sliced
    off by the caller."""
    b_sz, t_len, _ = frames.shape
    prev_actions = torch.cat([torch.zeros_like(actions[:, :1]), actions[:, :-1]], dim=1)
    embedded = core.embed_triples(frames, prev_actions, proprio)
    b = core.initial_belief(b_sz, dtype=frames.dtype)
    out = []
    for t in range(t_len):
        e = core.integrate_embedded(b, embedded[:, window_slices(t, core.cfg.k_window)])
        z = core.posterior(b, e).mu if core.stochastic else None
        b = core.gru_update(b, e, z)
        out.append(b)
    return torch.stack(out, dim=1)


@torch.no_grad()
def _policy_precompute(cfg, data, encoder, core, intent):
    """Frozen per-episode quantities: frame summaries, beliefs, token states."""
    features, beliefs = [], []
    max_t = max(len(ep) for ep in data.episodes)
    for ep in data.episodes:
        f = encode_sequence(encoder, ep.obs[None], ep.proprio[None])[0]
        features.append(f)
    if core is not None:
        pad_f = torch.zeros(len(data), max_t, cfg.d_f)
        pad_a = torch.zeros(len(data), max_t, cfg.action_dim)
        pad_p = torch.zeros(len(data), max_t, cfg.proprio_dim)
        for i, ep in enumerate(data.episodes):
            pad_f[i, : len(ep)] = features[i]
            pad_a[i, : len(ep)] = torch.as_tensor(ep.actions)
            pad_p[i, : len(ep)] = torch.as_tensor(ep.proprio)
        grid = batched_posterior_beliefs(core, pad_f, pad_a, pad_p)
        beliefs = [grid[i, : len(ep)].clone() for i, ep in enumerate(data.episodes)]
    token_states = [intent.token_states(ep.tokens, ep.obs[0]) for ep in data.episodes]
    rows = {x.shape[0] for x in token_states}
    if len(rows) != 1:
        raise HarnessError(f"mixed instruction lengths in one training pool: {sorted(rows)}")
    return features, beliefs, torch.stack(token_states)


def train_policy(
    cfg: RunConfig,
    data: DatasetFile,
    out_dir: str | Path,
    ablation: AblationConfig,
    warmstart_path: str | Path | None = None,
    belief_path: str | Path | None = None,
) -> Path:
    """Joint training of the denoiser, intent head, and state fusion."""
    out_dir = Path(out_dir)
    torch.manual_seed(derive_seed(cfg.seed, "policy", "init"))
    encoder = FrameEncoder(cfg)
    core = None
    if ablation.needs_belief:
        belief_path = Path(belief_path or out_dir / checkpoint_name("belief", ablation))
        b_arrays, b_meta = load_checkpoint(belief_path, expect_kind="belief", cfg=cfg)
        if b_meta.get("ablation") != ablation.code:
            raise HarnessError(
                f"belief checkpoint {belief_path} was trained as {b_meta.get('ablation')!r}, need {ablation.code!r}"
            )
        core = BeliefCore(cfg, stochastic=ablation.use_stochastic_z)
        load_module_arrays(core, b_arrays, "core")
        load_module_arrays(encoder, b_arrays, "encoder")
        core.eval()
    else:
        warmstart_path = Path(warmstart_path or out_dir / checkpoint_name("warmstart", ablation))
        w_arrays, _ = load_checkpoint(warmstart_path, expect_kind="warmstart", cfg=cfg)
        load_module_arrays(encoder, w_arrays, "encoder")
    encoder.eval()

    intent = IntentExtractor(cfg, cfg.seed)
    fuser = StateFuser(cfg)
    denoiser = Denoiser(cfg, use_belief=ablation.needs_belief)
    schedule = NoiseSchedule.from_config(cfg)
    mean, std = data.action_stats()
    normalizer = ActionNormalizer(mean=mean, std=std)

    features, beliefs, token_states = _policy_precompute(cfg, data, encoder, core, intent)
    actions_norm = [
        normalizer.normalize(torch.as_tensor(ep.actions, dtype=torch.float32)) for ep in data.episodes
    ]

    params = [*denoiser.parameters(), *fuser.parameters(), *intent.trainable_parameters()]
    opt = torch.optim.Adam(params, lr=cfg.policy_lr)
    rng = np_rng(cfg.seed, "policy", "sampler")
    gen = torch_gen(cfg.seed, "policy", "diffusion")
    h = cfg.chunk_h
    diag: dict[str, list] = {"iteration": [], "loss": []}

    for it in range(cfg.policy_iters):
        ep_idx = rng.integers(len(data), size=cfg.policy_batch)
        chunk_b, belief_b, state_f, state_p, x_b = [], [], [], [], []
        for i in ep_idx:
            ep_len = len(data.episodes[i])
            t = int(rng.integers(ep_len))
            a = actions_norm[i][t : t + h]
            if a.shape[0] < h:  # hold the final action past episode end
                a = torch.cat([a, a[-1:].expand(h - a.shape[0], -1)], dim=0)
            chunk_b.append(a)
            state_f.append(features[i][t])
            state_p.append(torch.as_tensor(data.episodes[i].proprio[t]))
            x_b.append(token_states[i])
            if core is not None:
                belief_b.append(beliefs[i][t])
        chunks = torch.stack(chunk_b)
        cond_b = torch.stack(belief_b) if core is not None else None
        intents = intent.pool_project(torch.stack(x_b))
        states = fuser(torch.stack(state_f), torch.stack(state_p).to(torch.float32))
        loss = diffusion_loss(denoiser, chunks, cond_b, intents, states, schedule, gen)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        diag["iteration"].append(it)
        diag["loss"].append(float(loss.detach()))

    arrays = {
        **module_arrays(encoder, "encoder"),
        **module_arrays(intent, "intent"),
        **module_arrays(fuser, "fuser"),
        **module_arrays(denoiser, "denoiser"),
        "action_mean": mean,
        "action_std": std,
    }
    out = out_dir / checkpoint_name("policy", ablation)
    _save(out, arrays, _base_meta(cfg, "policy", ablation, cfg.policy_iters, data), diag, gen=gen, rng=rng)
    return out


def train(
    stage: str,
    cfg: RunConfig,
    data_paths: list[str],
    out_dir: str | Path,
    ablation: AblationConfig | None = None,
    warmstart_path: str | Path | None = None,
    belief_path: str | Path | None = None,
) -> Path:
    """Stage dispatcher used by the command line."""
    if stage not in STAGES:
        raise HarnessError(f"unknown stage {stage!r}; expected one of {STAGES}")
    data = DatasetFile(*data_paths)
    for manifest in data.manifests:
        if manifest.get("config_hash") != cfg.config_hash():
            raise HarnessError("dataset was generated under a different config hash")
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    ablation = ablation or AblationConfig.from_code("ttt")
    if stage == "warmstart":
        return train_warmstart(cfg, data, out_dir)
    if stage == "belief":
        return train_belief(cfg, data, out_dir, ablation, warmstart_path)
    return train_policy(cfg, data, out_dir, ablation, warmstart_path, belief_path)
