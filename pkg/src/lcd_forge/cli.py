"""``lcd-forge`` command line: one subcommand per pipeline stage.

Every stage writes into its own directory under the output root and records
the hash of the config keys it depends on. Downstream stages recompute the
hash they expect from their own config and refuse mismatched inputs.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import multiprocessing
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import env
from . import rollout as R
from . import tensor as T
from .checkpoint import CheckpointError, read_meta
from .config import ConfigError, RunConfig, substream
from .data import DatasetError, generate_expert, load_dataset, read_header, save_dataset
from .denoiser import DenoiserConfig
from .gradcheck import check_denoiser_loss, run_op_suite
from .hlp import (HighLevelPolicy, HLPConfig, cache_latents, collect_onpolicy, filler_tokens, load_latents, load_plans,
                  params_hash, save_latents, save_plans, subsample_plans, train_hlp)
from .language import HELD_OUT as HELD_OUT_SPLIT
from .language import TRAIN, HashEmbedder, load_external_embeddings
from .llp import build_relabeled, load_llp, save_llp, train_llp
from .tasks import HELD_OUT, TRAIN_TASKS

COMMANDS = ("gen-expert", "train-llp", "collect", "cache", "train-hlp", "eval", "check-subopt", "gradcheck", "report")
DEFAULT_OUT = "runs/default"
OP_TOLERANCE = 1e-4
NET_TOLERANCE = 1e-3

log = logging.getLogger("lcd_forge")


class CliError(Exception):
    exit_code = 1


class MissingArtifact(CliError):
    exit_code = 3


class HashMismatch(CliError):
    exit_code = 4


# ---------------------------------------------------------------------------
# plumbing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file (flags override it)")
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--jobs", type=int, metavar="N", help="worker process cap")
    common.add_argument("--out", metavar="DIR", help=f"output root (default $LCD_FORGE_OUT or {DEFAULT_OUT})")
    common.add_argument("--stride", type=int, metavar="C", help="temporal stride c")
    common.add_argument("--frame-offset", type=int, metavar="O", help="goal relabeling offset radius o")
    common.add_argument("--ddim-steps", type=int, metavar="N")
    common.add_argument("--eta", type=float, metavar="F")
    common.add_argument("--timeout", type=int, metavar="N", help="steps per task before a chain fails (default 360)")
    common.add_argument("--include-failures", action="store_true", default=None,
                        help="keep unsuccessful on-policy episodes in the latent cache")
    common.add_argument("--float64", action="store_true", default=None, help="train in 64-bit floats")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="lcd-forge", description="Hierarchical latent-diffusion policy pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "gen-expert": "scripted-expert demonstrations on the training tasks",
        "train-llp": "fit the goal-conditioned low-level policy",
        "collect": "roll the LLP out to gather on-policy episodes",
        "cache": "encode episodes with the frozen encoder and cut latent plans",
        "train-hlp": "fit the diffusion high-level policy on latent plans",
        "eval": "chained multi-task evaluation plus baselines",
        "check-subopt": "compare the realized value gap with the suboptimality bound",
        "gradcheck": "finite-difference check of every autograd op and the denoiser loss",
        "report": "markdown summary of the evaluation",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return parser


_FLAG_KEYS = {"seed": "seed", "jobs": "jobs", "stride": "stride", "frame_offset": "frame_offset",
              "ddim_steps": "ddim_steps", "eta": "eta", "timeout": "timeout",
              "include_failures": "include_failures", "float64": "float64"}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag)
        if value is not None:
            cfg.set(key, value, f"--{flag.replace('_', '-')}")
    cfg.validate()
    return cfg


def output_root(args: argparse.Namespace) -> Path:
    return Path(args.out or os.environ.get("LCD_FORGE_OUT") or DEFAULT_OUT)


def require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact {path} (run `lcd-forge {hint}` first)")
    return path


def check_hash(found: str | None, expected: str, what: Path) -> None:
    if found != expected:
        raise HashMismatch(f"config hash mismatch for {what}: artifact has {found}, this config expects {expected}; "
                           "rerun the producing stage with the same config")


def write_stage_config(directory: Path, cfg: RunConfig, stage: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.txt").write_text(f"# stage {stage} hash {cfg.stage_hash(stage)}\n" + cfg.to_text())


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def make_embedder(cfg: RunConfig) -> HashEmbedder:
    external = load_external_embeddings(cfg.embeddings_path, cfg.embed_width) if cfg.embeddings_path else None
    return HashEmbedder(cfg.embed_width, external)


def _load_dataset(root: Path, stage: str, cfg: RunConfig, hint: str):
    path = require(root / stage / "index.txt", hint).parent
    check_hash(read_header(path).get("config_hash"), cfg.stage_hash(stage), path)
    return load_dataset(path)


def _load_llp(root: Path, cfg: RunConfig):
    stem = root / "llp" / "llp"
    require(stem.with_name("llp.manifest"), "train-llp")
    check_hash(read_meta(stem).get("config_hash"), cfg.stage_hash("llp"), stem.with_name("llp.manifest"))
    llp, meta = load_llp(stem)
    return llp, meta


def _load_hlp(root: Path, cfg: RunConfig) -> HighLevelPolicy:
    stem = root / "hlp" / "hlp"
    require(stem.with_name("hlp.manifest"), "train-hlp")
    check_hash(read_meta(stem).get("config_hash"), cfg.stage_hash("hlp"), stem.with_name("hlp.manifest"))
    hlp, _ = HighLevelPolicy.load(stem)
    return hlp


def encoder_hash(llp) -> str:
    return params_hash(llp.encoder.state_dict())


# ---------------------------------------------------------------------------
# stages


def cmd_gen_expert(cfg: RunConfig, root: Path) -> None:
    out = root / "expert"
    data = generate_expert(TRAIN_TASKS, cfg.expert_episodes_per_task, cfg.episode_length, cfg.prefix_max,
                           substream(cfg.seed, "expert"), make_embedder(cfg))
    data.meta["seed"] = str(cfg.seed)
    save_dataset(out, data, cfg.stage_hash("expert"))
    write_stage_config(out, cfg, "expert")
    ok = np.mean([e.success for e in data.episodes])
    print(f"expert: {len(data)} episodes, success {ok:.3f} -> {out}")


def cmd_train_llp(cfg: RunConfig, root: Path) -> None:
    data = _load_dataset(root, "expert", cfg, "gen-expert").successful()
    pairs = build_relabeled(data.episodes, cfg.stride, cfg.frame_offset, substream(cfg.seed, "relabel"))
    llp, report = train_llp(pairs, substream(cfg.seed, "llp"), cfg.llp_epochs, cfg.llp_batch, cfg.llp_lr,
                            cfg.llp_hidden, cfg.latent_dim)
    out = root / "llp"
    meta = {"config_hash": cfg.stage_hash("llp"), "eps_hat": report.val_max, "val_mean": report.val_mean}
    save_llp(out / "llp", llp, meta)
    write_json(out / "report.json", {"config_hash": cfg.stage_hash("llp"), "eps_hat": report.val_max,
                                     "val_mean": report.val_mean, "n_train": report.n_train, "n_val": report.n_val,
                                     "history": report.history})
    write_stage_config(out, cfg, "llp")
    print(f"llp: {report.n_train} train / {report.n_val} val pairs, validation action error "
          f"max {report.val_max:.4f} mean {report.val_mean:.4f} -> {out}")


def cmd_collect(cfg: RunConfig, root: Path) -> None:
    llp, _ = _load_llp(root, cfg)
    data, report = collect_onpolicy(llp, TRAIN_TASKS, cfg.collect_episodes_per_task, substream(cfg.seed, "collect"),
                                    cfg.stride, cfg.episode_length, cfg.prefix_max, make_embedder(cfg))
    out = root / "onpolicy"
    save_dataset(out, data, cfg.stage_hash("onpolicy"))
    write_json(out / "report.json", {"config_hash": cfg.stage_hash("onpolicy"), "episodes": report.episodes,
                                     "success_rate": report.success_rate, "flagged": report.flagged})
    write_stage_config(out, cfg, "onpolicy")
    for task_id in report.flagged:
        log.warning("collect: task %s never succeeded under the LLP", task_id)
    print(f"collect: {report.episodes} episodes, mean success {np.mean(list(report.success_rate.values())):.3f} -> {out}")


def cmd_cache(cfg: RunConfig, root: Path) -> None:
    llp, _ = _load_llp(root, cfg)
    data = _load_dataset(root, "onpolicy", cfg, "collect")
    ehash = encoder_hash(llp)
    cache = cache_latents(data, llp, ehash, make_embedder(cfg), cfg.include_failures)
    if not len(cache):
        raise CliError("cache: no episodes kept (all on-policy episodes failed; try --include-failures)")
    plans = subsample_plans(cache.latents, cache.embeddings, cfg.stride, cfg.horizon)
    out = root / "latents"
    save_latents(out / "cache", cache, cfg.stage_hash("latents"))
    save_plans(out / "plans", plans, ehash, cfg.stage_hash("latents"))
    write_json(out / "report.json", {"config_hash": cfg.stage_hash("latents"), "encoder_hash": ehash,
                                     "episodes": len(cache), "plans": len(plans), "skipped": plans.skipped,
                                     "size": cache.size_report()})
    write_stage_config(out, cfg, "latents")
    print(f"cache: {len(cache)} episodes, {len(plans)} plans ({plans.skipped} too short) -> {out}")


def hlp_config(cfg: RunConfig) -> HLPConfig:
    den = DenoiserConfig(horizon=cfg.horizon, latent_dim=cfg.latent_dim, embed_dim=cfg.embed_width,
                         model_dim=cfg.model_dim)
    return HLPConfig(denoiser=den, schedule=cfg.schedule, diffusion_steps=cfg.diffusion_steps,
                     beta_start=cfg.beta_start, beta_end=cfg.beta_end, first_slot_weight=cfg.first_slot_weight,
                     loss_p=cfg.loss_p, ema_decay=cfg.ema_decay, lr=cfg.hlp_lr, batch=cfg.hlp_batch,
                     steps=cfg.hlp_steps, checkpoint_every=cfg.checkpoint_every, head=cfg.hlp_head,
                     snr_clip=(cfg.snr_clip_lo, cfg.snr_clip_hi) if cfg.snr_weighting else None,
                     token_dropout=cfg.token_dropout, unknown_tokens=cfg.unknown_tokens)


def cmd_train_hlp(cfg: RunConfig, root: Path) -> None:
    path = require(root / "latents" / "plans" / "index.txt", "cache").parent
    plans, header = load_plans(path)
    check_hash(header.get("config_hash"), cfg.stage_hash("latents"), path)
    if not len(plans):
        raise CliError(f"train-hlp: {path} holds no plans")
    out = root / "hlp"
    meta = {"config_hash": cfg.stage_hash("hlp"), "encoder_hash": header["encoder_hash"]}

    def checkpoint(policy, step):
        policy.save(out / f"hlp_step{step}", {**meta, "step": step})

    cache = load_latents(root / "latents" / "cache", cfg.stage_hash("latents"))
    texts = [cache.texts[e] for e in plans.episode]
    filler = filler_tokens(cache.texts, cache.task_ids)
    log.info("train-hlp: filler tokens %s", " ".join(sorted(filler)))
    policy, history = train_hlp(plans.plans, plans.embeddings, hlp_config(cfg), substream(cfg.seed, "train"),
                                on_checkpoint=checkpoint, log=log.info, texts=texts, embedder=make_embedder(cfg),
                                filler=filler)
    policy.save(out / "hlp", {**meta, "step": cfg.hlp_steps})
    (out / "loss.txt").write_text("".join(f"{v!r}\n" for v in history.losses))
    write_stage_config(out, cfg, "hlp")
    print(f"train-hlp: {len(plans)} plans, {cfg.hlp_steps} steps, final loss {history.final_loss:.4f} -> {out}")


def _run_group(job):
    label, split, agent, chains, timeout, embedder, bits = job
    T.set_float_mode(bits)
    return label, split, R.eval_mtlhc(agent, chains, timeout, embedder)


def eval_agents(cfg: RunConfig, root: Path) -> dict[str, R.Agent]:
    """The trained hierarchical agent, the flat BC baseline and the reference agents for one run."""
    llp, _ = _load_llp(root, cfg)
    hlp = _load_hlp(root, cfg)
    expert = _load_dataset(root, "expert", cfg, "gen-expert").successful()
    if hlp.latent_dim != llp.latent_dim:
        raise CliError(f"eval: HLP plans {hlp.latent_dim}-wide latents but the LLP encodes {llp.latent_dim}")
    flat, _ = R.flat_bc_baseline(expert, make_embedder(cfg), substream(cfg.seed, "bc"), cfg.bc_epochs, cfg.llp_batch,
                                 cfg.llp_lr)
    return {"lcd": R.HierarchicalAgent(hlp, llp, cfg.stride, cfg.ddim_steps, cfg.eta), "flat_bc": R.FlatAgent(flat),
            "oracle_goals": R.ExpertGoalAgent(llp, cfg.stride), "random": R.RandomAgent()}


def cmd_eval(cfg: RunConfig, root: Path) -> None:
    agents = eval_agents(cfg, root)
    embedder = make_embedder(cfg)
    base = int(substream(cfg.seed, "eval").integers(2**31))
    n, length = cfg.eval_chains, cfg.eval_chain_length
    seen = R.make_chains(n, length, TRAIN, TRAIN_TASKS, base)
    seen_heldout = R.make_chains(cfg.heldout_template_chains, length, HELD_OUT_SPLIT, TRAIN_TASKS, base)
    novel = R.make_chains(cfg.heldout_task_episodes, 1, TRAIN, HELD_OUT, base + 10**6)
    jobs = [
        ("lcd", "seen_train_templates", seen),
        ("lcd", "seen_heldout_templates", seen_heldout),
        ("lcd", "heldout_tasks", novel),
        ("flat_bc", "seen_train_templates", seen),
        ("flat_bc", "heldout_tasks", novel),
        ("oracle_goals", "seen_train_templates", seen),
        ("random", "seen_train_templates", seen),
        ("random", "heldout_tasks", novel),
    ]
    bits = 64 if cfg.float64 else 32
    work = [(label, split, agents[label], chains, cfg.timeout, embedder, bits) for label, split, chains in jobs]
    started = time.time()
    if cfg.jobs > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(work)), mp_context=ctx) as pool:
            outcomes = list(pool.map(_run_group, work))
    else:
        outcomes = [_run_group(w) for w in work]
    log.info("eval: %d groups in %.1f s", len(work), time.time() - started)

    methods: dict[str, dict] = {}
    rows = []
    for label, split, result in outcomes:
        methods.setdefault(label, {})[split] = result.to_dict()
        rows += R.chain_rows(label, split, result)
    lcd_seen = methods["lcd"]["seen_train_templates"]
    checks = {
        "horizon_one_seen": lcd_seen["rates"][0],
        "template_gap": abs(lcd_seen["rates"][0] - methods["lcd"]["seen_heldout_templates"]["rates"][0]),
        "heldout_tasks_lcd": methods["lcd"]["heldout_tasks"]["rates"][0],
        "heldout_tasks_random": methods["random"]["heldout_tasks"]["rates"][0],
        "lcd_beats_flat": lcd_seen["avg_horizon_len"] >= methods["flat_bc"]["seen_train_templates"]["avg_horizon_len"],
    }
    if not checks["lcd_beats_flat"]:
        log.warning("eval: flat BC baseline out-scored LCD on average horizon length")
    results = {"config_hash": cfg.stage_hash("eval"), "seed": cfg.seed, "chain_seed_base": base,
               "chain_length": length, "timeout": cfg.timeout, "ddim_steps": cfg.ddim_steps, "eta": cfg.eta,
               "methods": methods, "checks": checks}
    out = root / "eval"
    write_json(out / "results.json", results)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["method", "split", "chain", "seed", "completed", "tasks", "steps"],
                            lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (out / "results.csv").write_text(buf.getvalue())
    write_stage_config(out, cfg, "eval")
    print(render_table(results))


def cmd_check_subopt(cfg: RunConfig, root: Path) -> int:
    llp, meta = _load_llp(root, cfg)
    eps_hat = meta.get("eps_hat")
    estimate = env.estimate_lipschitz(cfg.lipschitz_probes, substream(cfg.seed, "lipschitz"))
    seeds = [cfg.seed * 1000 + i for i in range(cfg.subopt_seeds)]
    report = R.check_suboptimality(llp, eps_hat, estimate.k_hat, TRAIN_TASKS, seeds, cfg.subopt_episodes_per_task,
                                   cfg.stride, make_embedder(cfg), cfg.gamma, cfg.r_max, cfg.timeout)
    body = {"config_hash": cfg.stage_hash("subopt"), "k_design": env.K_DESIGN, "seeds": seeds,
            "k_hat_within_design": estimate.k_hat <= env.K_DESIGN, **report.to_dict()}
    out = root / "subopt"
    write_json(out / "report.json", body)
    write_stage_config(out, cfg, "subopt")
    print(f"check-subopt: eps_hat {report.eps_hat:.4f}, K_hat {report.k_hat:.3f} (design {env.K_DESIGN:.3f}), "
          f"bound {report.bound:.3f}, realized gap {report.realized_gap:.4f} per seed {report.per_seed_gap}")
    if not report.holds:
        print("check-subopt: realized gap exceeds the bound", file=sys.stderr)
        return 5
    if estimate.k_hat > env.K_DESIGN:
        print("check-subopt: empirical Lipschitz constant exceeds the design constant", file=sys.stderr)
        return 5
    return 0


def cmd_gradcheck() -> int:
    ops = run_op_suite()
    for name, err in ops.items():
        print(f"{name:24s} {err:.3e} {'ok' if err < OP_TOLERANCE else 'FAIL'}")
    net_err, where = check_denoiser_loss()
    print(f"{'denoiser_loss':24s} {net_err:.3e} {'ok' if net_err < NET_TOLERANCE else 'FAIL'} (worst at {where})")
    return 0 if max(ops.values()) < OP_TOLERANCE and net_err < NET_TOLERANCE else 1


def render_table(results: dict) -> str:
    lines = ["| method | split | H1 | H2 | H3 | H4 | H5 | avg len |", "|---|---|---|---|---|---|---|---|"]
    for method in sorted(results["methods"]):
        for split, res in sorted(results["methods"][method].items()):
            rates = list(res["rates"]) + [float("nan")] * (5 - len(res["rates"]))
            cells = " | ".join(f"{r:.3f}" for r in rates)
            lines.append(f"| {method} | {split} | {cells} | {res['avg_horizon_len']:.3f} |")
    return "\n".join(lines)


def cmd_report(cfg: RunConfig, root: Path) -> None:
    path = require(root / "eval" / "results.json", "eval")
    results = json.loads(path.read_text())
    check_hash(results.get("config_hash"), cfg.stage_hash("eval"), path)
    parts = ["# lcd-forge run report", "", f"Output root: `{root}`, seed {cfg.seed}.", "",
             "## Chained multi-task evaluation", "", render_table(results), ""]
    c = results["checks"]
    parts += ["## Checks", "",
              f"- horizon-one success, seen tasks: {c['horizon_one_seen']:.3f}",
              f"- train vs held-out template gap: {c['template_gap']:.3f}",
              f"- held-out tasks: LCD {c['heldout_tasks_lcd']:.3f}, random {c['heldout_tasks_random']:.3f}",
              f"- LCD avg horizon length >= flat BC: {c['lcd_beats_flat']}", ""]
    sub = root / "subopt" / "report.json"
    if sub.exists():
        s = json.loads(sub.read_text())
        parts += ["## Suboptimality bound", "",
                  f"- eps_hat {s['eps_hat']:.4f}, K_hat {s['k_hat']:.3f} (design {s['k_design']:.3f}), "
                  f"dom {s['dom']:.3f}, gamma {s['gamma']}",
                  f"- bound {s['bound']:.3f}, realized gap {s['realized_gap']:.4f}, holds: {s['holds']}", ""]
    (root / "report.md").write_text("\n".join(parts))
    print(f"report -> {root / 'report.md'}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck()
        cfg = resolve_config(args)
        root = output_root(args)
        T.set_float_mode(64 if cfg.float64 else 32)
        handlers = {"gen-expert": cmd_gen_expert, "train-llp": cmd_train_llp, "collect": cmd_collect,
                    "cache": cmd_cache, "train-hlp": cmd_train_hlp, "eval": cmd_eval,
                    "check-subopt": cmd_check_subopt, "report": cmd_report}
        code = handlers[args.command](cfg, root)
        return int(code or 0)
    except CliError as e:
        print(f"lcd-forge {args.command}: {e}", file=sys.stderr)
        return e.exit_code
    except ConfigError as e:
        print(f"lcd-forge {args.command}: config error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, FileNotFoundError, T.ShapeError, ValueError) as e:
        print(f"lcd-forge {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
