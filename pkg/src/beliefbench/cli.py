"""Command-line entry points.

Exit codes: 0 on success, 1 on usage errors (bad flags, malformed config or
instruction), 2 on runtime failures (missing checkpoints, hash mismatches,
corrupt files).  Configuration precedence is command line > config file >
defaults, and every output records the resulting config hash.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .baselines import ABLATION_CODES, AblationConfig, build_variant
from .belief import BeliefCore
from .config import ConfigError, RunConfig
from .dataset import DatasetFile, generate_dataset
from .env import make_task
from .harness.analyze import (
    analyze_belief_similarity,
    analyze_stochasticity,
    dump_attention,
    occlusion_steps,
)
from .harness.common import HarnessError, load_checkpoint
from .harness.evaluate import evaluate_expert, evaluate_success, task_horizon
from .harness.profile import profile_invocations, profile_memory
from .harness.train import checkpoint_name, train
from .harness import report as rpt
from .intent import UsageError
from .language import InstructionError, encode_instruction
from .nets import load_module_arrays
from .perception import FrameEncoder
from .policy import receding_horizon_execute
from .seeds import torch_gen
from .storage import StorageError

TASKS = ("pp1", "ppN", "stack1", "stackN")

USAGE_ERRORS = (ConfigError, InstructionError)
RUNTIME_ERRORS = (HarnessError, StorageError, UsageError, ValueError, RuntimeError, OSError, KeyError)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage problems; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def _add_onoff(p: argparse.ArgumentParser, name: str, default: str, help_text: str) -> None:
    p.add_argument(name, choices=("on", "off"), default=default, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="beliefbench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[], help="record expert demonstration episodes")
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    _add_onoff(g, "--aliased", "off", "add an identical-looking duplicate of the first target")
    _add_config_args(g)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", choices=("warmstart", "belief", "policy"), required=True)
    t.add_argument("--ablation", choices=ABLATION_CODES, default="ttt")
    t.add_argument("--data", nargs="+", required=True, help="dataset container(s)")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--warmstart", help="explicit warm-start checkpoint path")
    t.add_argument("--belief", help="explicit belief checkpoint path")
    _add_config_args(t)

    e = sub.add_parser("eval", help="closed-loop success evaluation")
    e.add_argument("--task", choices=TASKS, required=True)
    e.add_argument("--variant", choices=ABLATION_CODES + ("expert",), required=True)
    e.add_argument("--ckpt-dir", help="directory with stage checkpoints (not needed for expert)")
    e.add_argument("--episodes", type=int, default=None, help="default: config eval_episodes")
    e.add_argument("--seed", type=int, default=None, help="default: config seed")
    e.add_argument("--out", required=True, help="report container path; a .txt twin is written too")
    _add_onoff(e, "--aliased", "off", "evaluate the aliased task variant")
    _add_onoff(e, "--perturb", "off", "frame drops and observation noise")
    _add_config_args(e)

    a = sub.add_parser("analyze", help="belief-representation analyses")
    asub = a.add_subparsers(dest="analysis", required=True)
    for name in ("similarity", "stochastic", "attention"):
        ap = asub.add_parser(name)
        ap.add_argument("--ckpt-dir", required=True)
        ap.add_argument("--data", nargs="+", required=True, help="held-out dataset container(s)")
        ap.add_argument("--out-dir", required=True)
        ap.add_argument("--ablation", choices=ABLATION_CODES, default="ttt")
        ap.add_argument("--seed", type=int, default=None)
        if name == "similarity":
            ap.add_argument("--pairs", type=int, default=None, help="default: config analysis_pairs")
        if name == "stochastic":
            ap.add_argument("--samples", type=int, default=16)
            ap.add_argument("--episode", type=int, default=0)
            ap.add_argument("--step", type=int, default=None, help="default: mid-episode")
        if name == "attention":
            ap.add_argument("--episode", type=int, default=None, help="default: first episode with an occlusion")
            ap.add_argument("--timesteps", help="comma-separated steps; default: around occlusions")
        _add_config_args(ap)

    b = sub.add_parser("bench", help="memory and invocation measurements")
    bsub = b.add_subparsers(dest="bench", required=True)
    bm = bsub.add_parser("memory")
    bm.add_argument("--out-dir", required=True)
    _add_config_args(bm)
    bi = bsub.add_parser("invocations")
    bi.add_argument("--ckpt-dir", required=True)
    bi.add_argument("--task", choices=TASKS, default="ppN")
    bi.add_argument("--ablation", choices=ABLATION_CODES, default="ttt")
    bi.add_argument("--episodes", type=int, default=5)
    bi.add_argument("--seed", type=int, default=None)
    bi.add_argument("--out-dir", required=True)
    _add_onoff(bi, "--aliased", "off", "profile on the aliased variant")
    _add_config_args(bi)

    r = sub.add_parser("rollout", help="run one episode and dump rendered frames")
    r.add_argument("--instruction", required=True)
    r.add_argument("--render-dir", required=True)
    r.add_argument("--ckpt-dir", required=True)
    r.add_argument("--task", choices=TASKS, default="ppN")
    r.add_argument("--ablation", choices=ABLATION_CODES, default="ttt")
    r.add_argument("--seed", type=int, default=None)
    _add_onoff(r, "--aliased", "off", "roll out the aliased variant")
    _add_config_args(r)

    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return cfg.apply_overrides(overrides) if overrides else cfg


def _load_pipeline(cfg: RunConfig, ckpt_dir: str, code: str):
    ablation = AblationConfig.from_code(code)
    ckpt_dir = Path(ckpt_dir)
    policy_ckpt = load_checkpoint(ckpt_dir / checkpoint_name("policy", ablation), "policy", cfg)
    belief_ckpt = None
    if ablation.needs_belief:
        belief_ckpt = load_checkpoint(ckpt_dir / checkpoint_name("belief", ablation), "belief", cfg)
    return build_variant(cfg, ablation, policy_ckpt, belief_ckpt)


def _load_belief(cfg: RunConfig, ckpt_dir: str, code: str):
    ablation = AblationConfig.from_code(code)
    if not ablation.needs_belief:
        raise HarnessError(f"variant {code} has no belief checkpoint")
    arrays, meta = load_checkpoint(Path(ckpt_dir) / checkpoint_name("belief", ablation), "belief", cfg)
    encoder = FrameEncoder(cfg)
    core = BeliefCore(cfg, stochastic=ablation.use_stochastic_z)
    load_module_arrays(encoder, arrays, "encoder")
    load_module_arrays(core, arrays, "core")
    encoder.eval()
    core.eval()
    return encoder, core, arrays, meta


def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    generate_dataset(
        cfg,
        task_name=args.task,
        n_episodes=args.episodes,
        seed=args.seed,
        out_path=args.out,
        aliased=args.aliased == "on",
        workers=cfg.workers,
    )
    print(f"wrote {args.episodes} episodes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    path = train(
        args.stage,
        cfg,
        args.data,
        args.out_dir,
        ablation=AblationConfig.from_code(args.ablation),
        warmstart_path=args.warmstart,
        belief_path=args.belief,
    )
    arrays, _ = load_checkpoint(path)
    curves = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("diag/") and k != "diag/iteration"}
    csv_path = Path(args.out_dir) / f"{Path(path).stem}_losses.csv"
    it = arrays["diag/iteration"]
    keys = sorted(curves)
    rpt.write_csv(csv_path, ["iteration", *keys], [tuple([int(i), *[curves[k][j] for k in keys]]) for j, i in enumerate(it)])
    print(f"stage {args.stage} complete: {path} (losses: {csv_path})")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    episodes = args.episodes if args.episodes is not None else cfg.eval_episodes
    seed = args.seed if args.seed is not None else cfg.seed
    aliased = args.aliased == "on"
    if args.variant == "expert":
        rep = evaluate_expert(args.task, aliased, episodes, seed, cfg)
    else:
        if not args.ckpt_dir:
            raise HarnessError("--ckpt-dir is required unless --variant expert")
        pipeline = _load_pipeline(cfg, args.ckpt_dir, args.variant)
        rep = evaluate_success(
            pipeline, args.task, aliased, episodes, seed, cfg,
            variant=args.variant, perturb=args.perturb == "on",
        )
    rep.save(args.out)
    Path(args.out).with_suffix(".txt").write_text(rep.to_text())
    print(rep.to_text(), end="")
    return 0


def cmd_analyze(args) -> int:
    cfg = load_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.seed
    encoder, core, arrays, _ = _load_belief(cfg, args.ckpt_dir, args.ablation)
    data = DatasetFile(*args.data)

    if args.analysis == "similarity":
        n_pairs = args.pairs if args.pairs is not None else cfg.analysis_pairs
        rep = analyze_belief_similarity(cfg, core, encoder, data.episodes, n_pairs, seed)
        rep.save(out_dir / "similarity.bin")
        (out_dir / "similarity.txt").write_text(rep.to_text())
        rpt.write_csv(
            out_dir / "similarity_pairs.csv",
            ["belief_cos", "action_dist", "obs_cos"],
            list(zip(rep.belief_cos.tolist(), rep.action_dist.tolist(), rep.obs_cos.tolist())),
        )
        rpt.plot_correlation_scatter(
            rep.belief_cos, rep.action_dist, rep.obs_cos,
            rep.pearson_action, rep.pearson_obs, out_dir / "similarity.png",
        )
        print(rep.to_text(), end="")
        return 0

    if args.analysis == "stochastic":
        ep = data.episodes[args.episode]
        t = args.step if args.step is not None else len(ep) // 2
        from .harness.common import episode_beliefs

        beliefs = episode_beliefs(core, encoder, ep)
        if not 0 <= t < len(ep):
            raise HarnessError(f"step {t} out of range for a length-{len(ep)} episode")
        kl_curve = arrays.get("diag/kl")
        if kl_curve is None:
            raise HarnessError("belief checkpoint carries no KL diagnostics")
        rep = analyze_stochasticity(
            cfg, core, beliefs[t], kl_curve,
            n_samples=args.samples, generator=torch_gen(seed, "stochastic-analysis"),
        )
        (out_dir / "stochastic.txt").write_text(rep.to_text())
        rpt.write_csv(out_dir / "kl_curve.csv", ["iteration", "kl"], list(enumerate(rep.kl_curve.tolist())))
        rpt.plot_kl_curve(rep.kl_curve, out_dir / "kl_curve.png")
        rpt.plot_divergence_fan(rep.divergence_1, rep.divergence_5, out_dir / "divergence.png")
        print(rep.to_text(), end="")
        return 0

    # attention
    if args.episode is not None:
        ep = data.episodes[args.episode]
    else:
        ep = next((e for e in data.episodes if occlusion_steps(e)), None)
        if ep is None:
            raise HarnessError("no episode with an occlusion event in the supplied data")
    timesteps = [int(x) for x in args.timesteps.split(",")] if args.timesteps else None
    dump = dump_attention(cfg, core, encoder, ep, timesteps)
    (out_dir / "attention.txt").write_text(dump.to_text())
    rpt.write_csv(
        out_dir / "attention.csv",
        ["t", "belief_token", *[f"slot_{i}" for i in range(dump.rows.shape[1] - 1)]],
        [tuple([int(t), *row.tolist()]) for t, row in zip(dump.timesteps, dump.rows)],
    )
    rpt.plot_attention_heatmap(dump.timesteps, dump.rows, dump.uniform_level, out_dir / "attention.png")
    print(dump.to_text(), end="")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.bench == "memory":
        prof = profile_memory(cfg)
        (out_dir / "memory.txt").write_text(prof.to_text())
        rpt.write_csv(
            out_dir / "memory.csv",
            ["kind", *[f"context_{c}" for c in prof.contexts]],
            [(k, *prof.counts[k]) for k in prof.counts],
        )
        rpt.plot_memory_bars(prof.contexts, prof.counts, out_dir / "memory.png")
        print(prof.to_text(), end="")
        return 0
    seed = args.seed if args.seed is not None else cfg.seed
    pipeline = _load_pipeline(cfg, args.ckpt_dir, args.ablation)
    prof = profile_invocations(pipeline, args.task, args.aliased == "on", args.episodes, seed, cfg)
    (out_dir / "invocations.txt").write_text(prof.to_text())
    rpt.write_csv(
        out_dir / "invocations.csv",
        ["episode", "intent_calls", "env_steps", "belief_updates", "chunk_samples", "denoiser_calls", "counterfactual_intent_calls"],
        [
            (i, int(prof.intent_calls[i]), int(prof.env_steps[i]), int(prof.belief_updates[i]),
             int(prof.chunk_samples[i]), int(prof.denoiser_calls[i]), int(prof.counterfactual_intent_calls[i]))
            for i in range(prof.episodes)
        ],
    )
    print(prof.to_text(), end="")
    return 0


def cmd_rollout(args) -> int:
    from PIL import Image

    cfg = load_config(args)
    encode_instruction(args.instruction)  # argument validation before any checkpoint I/O
    seed = args.seed if args.seed is not None else cfg.seed
    pipeline = _load_pipeline(cfg, args.ckpt_dir, args.ablation)
    task = make_task(args.task, aliased=args.aliased == "on", horizon=task_horizon(cfg, args.task))
    log = receding_horizon_execute(pipeline, task, seed, instruction=args.instruction)
    render_dir = Path(args.render_dir)
    render_dir.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(log.observations):
        Image.fromarray(frame).save(render_dir / f"frame_{t:04d}.png")
    print(
        f"instruction = {log.instruction}\nsuccess = {'true' if log.success else 'false'}\n"
        f"steps = {log.steps}\nframes = {len(log.observations)} -> {render_dir}"
    )
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
    "rollout": cmd_rollout,
}


def cli_dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
