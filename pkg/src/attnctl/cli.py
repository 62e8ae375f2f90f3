"""Command-line entry point.

Exit codes: 0 on success, 1 on validation/configuration errors, 2 on numeric
divergence (including a failed gradient check).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .denoiser import (
    default_params,
    forward_denoise,
    load_params,
    load_tokens,
    save_params,
    save_tokens,
    toy_schedule,
)
from .errors import ConfigurationError, DivergenceError
from .fileio import atomic_write_text, write_csv, write_json
from .gradcheck import REL_TOL, format_results, run_gradcheck
from .harness import (
    METRICS_HEADER,
    _config_dict,
    _scenario_from_config,
    parse_config,
    report,
    run_experiment,
)
from .kkt import REWARD_VARIANTS, oracle_report
from .learning import run_semantic_learning, write_trace_csv
from .scenario import argmax_iou_single, leakage_mass, synthesis_tokens
from .synthesis import run_synthesis, write_steps_csv


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnctl",
        description="Attention-controlled learning and synthesis on toy latents.",
    )
    parser.add_argument("--version", action="version", version=f"attnctl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn", help="learn instance embeddings from a config")
    p.add_argument("config", help="INI config file")
    p.add_argument("--out", required=True, help="output run directory")

    p = sub.add_parser("synthesize", help="run box-controlled synthesis")
    p.add_argument("config", help="INI config file")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--embeddings", help="token embeddings file from a learn run")
    p.add_argument("--params", help="denoiser params file from a learn run")

    p = sub.add_parser("experiment", help="learn then synthesize, with manifest")
    p.add_argument("config", help="INI config file")
    p.add_argument("--out", required=True, help="output run directory")

    p = sub.add_parser("oracle", help="closed-form per-pixel optima as JSON")
    p.add_argument("--k", type=int, required=True, help="number of instance tokens")
    p.add_argument("--alpha", type=float, required=True, help="reward mask scale")
    p.add_argument("--variant", choices=REWARD_VARIANTS, default="costed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write JSON here instead of only stdout")

    p = sub.add_parser("gradcheck", help="verify hand gradients vs finite differences")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("run_dir", help="directory produced by learn/synthesize/experiment")

    return parser


def _write_run_manifest(out_dir: str, cfg, config_bytes: bytes,
                        files: "list[str]") -> None:
    import platform

    write_json(os.path.join(out_dir, "manifest.json"), {
        "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
        "config": _config_dict(cfg),
        "versions": {
            "attnctl": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "outputs": sorted(set(files)),
    })


def _cmd_learn(args) -> int:
    with open(args.config, "rb") as fh:
        config_bytes = fh.read()
    cfg = parse_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    scenario = _scenario_from_config(cfg.scenario)
    result = run_semantic_learning(scenario, cfg.learning)

    files = ["learn_trace.csv", "embeddings.txt", "denoiser.txt",
             "metrics.csv", "config.ini"]
    write_trace_csv(result.trace, os.path.join(args.out, "learn_trace.csv"))
    save_tokens(result.tokens, os.path.join(args.out, "embeddings.txt"))
    save_params(result.params, os.path.join(args.out, "denoiser.txt"))

    instances = scenario.instance_set()
    _, record = forward_denoise(scenario.z0, 0, result.tokens, result.params,
                                result.schedule)
    rows = []
    for i, token in enumerate(instances.placeholder_ids):
        mask = instances.masks[i]
        rows.append(("learning", i,
                     leakage_mass(record, token, mask),
                     argmax_iou_single(record, token, mask),
                     result.trace[-1].rec_loss, result.trace[-1].total))
    write_csv(os.path.join(args.out, "metrics.csv"), METRICS_HEADER, rows)
    atomic_write_text(os.path.join(args.out, "config.ini"), config_bytes.decode())
    _write_run_manifest(args.out, cfg, config_bytes, files + ["manifest.json"])

    print(f"learned {len(instances.placeholder_ids)} instance embeddings "
          f"in {cfg.learning.total_iters} iterations")
    for row in rows:
        print(f"instance {row[1]}: leakage {row[2]:.4f}, argmax IoU {row[3]:.4f}")
    print(f"artifacts in {args.out}")
    return 0


def _cmd_synthesize(args) -> int:
    with open(args.config, "rb") as fh:
        config_bytes = fh.read()
    cfg = parse_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    scenario = _scenario_from_config(cfg.scenario)

    if args.embeddings:
        tokens = load_tokens(args.embeddings)
    else:
        tokens = synthesis_tokens(scenario)
    if args.params:
        params = load_params(args.params)
    else:
        dim = tokens[0].vector.size
        params = default_params(dim, cfg.scenario.height, cfg.scenario.width,
                                seed=cfg.learning.seed)

    boxes = cfg.boxes if cfg.boxes is not None else scenario.boxes()
    groups = cfg.groups
    result = run_synthesis(
        tokens, params, boxes, cfg.synthesis, sched=cfg.schedule,
        schedule=toy_schedule(cfg.synthesis.total_steps), groups=groups,
        refinement=cfg.refinement,
    )

    files = ["synth_steps.csv", "config.ini"]
    write_steps_csv(result.steps, os.path.join(args.out, "synth_steps.csv"))
    latent_res = (cfg.scenario.height, cfg.scenario.width)
    for i, mset in enumerate(result.masks):
        name = f"final_mask_{i}.txt"
        atomic_write_text(os.path.join(args.out, name), mset[latent_res].to_text())
        files.append(name)
    atomic_write_text(os.path.join(args.out, "config.ini"), config_bytes.decode())
    _write_run_manifest(args.out, cfg, config_bytes, files + ["manifest.json"])

    last = result.steps[-1]
    print(f"synthesis finished: control loss {result.steps[0].total:.6g} -> "
          f"{last.total:.6g} over {len(result.steps)} steps")
    print("final leakage per instance: "
          + ", ".join(f"{v:.4f}" for v in last.leakage))
    print(f"artifacts in {args.out}")
    return 0


def _cmd_experiment(args) -> int:
    result = run_experiment(args.config, args.out)
    print(f"experiment complete; {len(result.files)} artifacts in {result.out_dir}")
    print(report(args.out))
    return 0


def _cmd_oracle(args) -> int:
    payload = oracle_report(args.k, args.alpha, variant=args.variant,
                            seed=args.seed)
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed)
    print(format_results(results))
    if all(r.max_rel <= REL_TOL for r in results):
        return 0
    return 2


def _cmd_report(args) -> int:
    print(report(args.run_dir))
    return 0


_COMMANDS = {
    "learn": _cmd_learn,
    "synthesize": _cmd_synthesize,
    "experiment": _cmd_experiment,
    "oracle": _cmd_oracle,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def main(argv: "list[str] | None" = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 2
    except (ConfigurationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
