"""Command-line entry point: ``dcss <subcommand> [flags]``.

Subcommands
    gen-data   write a synthetic classification set as train.bin / test.bin
    warmup     train the supernet with frozen zero gates -> warmup.ckpt
    search     alternate weight and gate updates -> search.ckpt, gates.json
    extract    derive the slim plan from a search checkpoint -> plan.json
    finetune   extract and fine-tune the slim network -> slim.ckpt, finetune.json
    eval       evaluate any checkpoint on the test split -> eval.json
    pipeline   all of the above in order -> full artifact set and report.json
    verify     oracle-equivalence and gradient self-checks

Flags that would be silently ignored by a subcommand (for example
``--lambda`` with ``extract``) are rejected with exit code 2.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import pipeline as pl
from .checkpoint import load_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import make_synthetic, write_binary_dataset
from .extraction import SlimPlan, fill_flops, plan_from_model
from .models import build_model
from .search import evaluate, make_rng

# flags each subcommand accepts beyond --config/--seed/--out/--format
ALLOWED = {
    "gen-data": set(),
    "warmup": {"data"},
    "search": {"lam", "data", "checkpoint", "skip_warmup"},
    "extract": {"checkpoint"},
    "finetune": {"data", "checkpoint", "plan"},
    "eval": {"data", "checkpoint"},
    "pipeline": {"lam", "data", "resume_from"},
    "verify": set(),
}
FLAG_NAMES = {"lam": "--lambda", "data": "--data", "checkpoint": "--checkpoint", "plan": "--plan",
              "resume_from": "--resume-from", "skip_warmup": "--skip-warmup"}


def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="flat TOML experiment config")
    p.add_argument("--seed", type=int, help="root seed (overrides config)")
    p.add_argument("--lambda", dest="lam", type=float, help="cost weight (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--data", help="training data in the binary container (overrides config)")
    p.add_argument("--format", choices=("json", "csv"), help="report format (overrides config)")
    p.add_argument("--checkpoint", help="input checkpoint")
    p.add_argument("--plan", help="slim plan JSON (finetune)")
    p.add_argument("--resume-from", help="stage checkpoint to resume the pipeline from")
    p.add_argument("--skip-warmup", action="store_true", help="search from a fresh supernet")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="dcss", description="Differentiable channel sparsity search.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()
    for name in ALLOWED:
        sub.add_parser(name, parents=[common], help=f"{name} stage")
    return parser


def check_flags(parser, args):
    allowed = ALLOWED[args.command]
    for key, flag in FLAG_NAMES.items():
        val = getattr(args, key)
        if val not in (None, False) and key not in allowed:
            parser.error(f"{flag} has no effect with '{args.command}'")
    if args.command in ("extract", "finetune", "eval") and not args.checkpoint:
        parser.error(f"'{args.command}' needs --checkpoint")
    if args.command == "search" and bool(args.checkpoint) == bool(args.skip_warmup):
        parser.error("'search' needs exactly one of --checkpoint (a warm-up checkpoint) or --skip-warmup")
    if args.command == "verify" and (args.config or args.seed is not None or args.out or args.format):
        parser.error("'verify' takes no config, seed, output or format flags")


def resolve_config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {"seed": args.seed, "lam": args.lam, "out_dir": args.out, "data_path": args.data,
                 "report_format": args.format}
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if cfg.seed < 0 or cfg.seed >= 2 ** 64:
        raise ConfigError(f"seed must fit in an unsigned 64-bit integer, got {cfg.seed}")
    return cfg.validate()


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg):
    seed = int(make_rng(cfg.seed, "data").integers(2 ** 32))
    ds = make_synthetic("classify", cfg.num_classes, cfg.synthetic_train + cfg.synthetic_test,
                        image_size=cfg.image_size, channels=cfg.in_channels, noise=cfg.synthetic_noise, seed=seed)
    paths = {}
    for name, idx in (("train", np.arange(cfg.synthetic_train)),
                      ("test", np.arange(cfg.synthetic_train, len(ds)))):
        paths[name] = os.path.join(cfg.out_dir, f"{name}.bin")
        write_binary_dataset(paths[name], ds.subset(idx))
    return paths


def cmd_warmup(cfg, args):
    state = pl.RunState(cfg)
    pl.stage_warmup(state, pl.load_data(cfg))
    return state.artifacts


def cmd_search(cfg, args):
    data = pl.load_data(cfg)
    if args.checkpoint:
        state, stage = pl.resume_state(cfg, args.checkpoint, strict=False)
        if stage != "warmup":
            raise pl.ResumeError(f"{args.checkpoint} is a {stage!r} checkpoint, search needs a warm-up checkpoint")
    else:
        state = pl.RunState(cfg)
        state.model = build_model(cfg.model_spec(), rng=make_rng(cfg.seed, "init"))
    pl.stage_search(state, data)
    return state.artifacts


def _gated(path):
    model, meta = load_checkpoint(path)
    if not model.spec.gated:
        raise ValueError(f"{path} holds a gate-free network; a search checkpoint is needed")
    return model, meta


def cmd_extract(cfg, args):
    model, _ = _gated(args.checkpoint)
    state = pl.RunState(cfg, model=model)
    pl.stage_extract(state)
    return state.artifacts


def cmd_finetune(cfg, args):
    model, _ = _gated(args.checkpoint)
    state = pl.RunState(cfg, model=model)
    if args.plan:
        with open(args.plan, encoding="utf-8") as f:
            state.plan = fill_flops(SlimPlan.from_dict(json.load(f)), model)
    else:
        state.plan = plan_from_model(model, cfg.tau_end)
    data = pl.load_data(cfg)
    pl.stage_finetune(state, data)
    pl.stage_eval(state, data)
    report = dict(state.tag, plan_widths=state.plan.widths, predicted_flops=state.plan.predicted_flops,
                  true_flops=state.plan.true_flops, prune_ratio=state.plan.prune_ratio,
                  finetune=state.finetune_metrics, slim=state.slim_metrics)
    pl.write_report(state, report, "finetune")
    return state.artifacts


def cmd_eval(cfg, args):
    model, meta = load_checkpoint(args.checkpoint)
    state = pl.RunState(cfg)
    data = pl.load_data(cfg)
    m = evaluate(model, data.test, tau=cfg.tau_end)
    report = dict(state.tag, checkpoint=os.path.abspath(args.checkpoint), checkpoint_stage=meta.get("stage"),
                  gated=model.spec.gated, metrics=m)
    pl.write_report(state, report, "eval")
    return state.artifacts


COMMANDS = {"warmup": cmd_warmup, "search": cmd_search, "extract": cmd_extract,
            "finetune": cmd_finetune, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    check_flags(parser, args)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "verify":
        from .verify import run_all
        return 0 if all(r.ok for r in run_all()) else 1
    try:
        cfg = resolve_config(args)
    except (ConfigError, ValueError, OSError) as e:
        parser.error(str(e))
    os.makedirs(cfg.out_dir, exist_ok=True)

    if args.command == "pipeline":
        res = pl.run_pipeline(cfg, resume_from=args.resume_from)
        if res.status:
            print(f"error: {res.error}", file=sys.stderr)
        _print_artifacts(res.artifacts)
        return res.status
    if args.command == "gen-data":
        _print_artifacts(cmd_gen_data(cfg))
        return 0
    try:
        with pl.numeric_context(cfg):
            artifacts = COMMANDS[args.command](cfg, args)
    except Exception as e:  # report the failing stage and exit nonzero
        print(f"error: stage {args.command!r} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    _print_artifacts(artifacts)
    return 0


def _print_artifacts(artifacts):
    for key in sorted(artifacts):
        print(f"{key}: {artifacts[key]}")


if __name__ == "__main__":
    sys.exit(main())
