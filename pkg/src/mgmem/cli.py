"""Command-line surface.

Subcommands:

    train              --config cfg.json [--set path=value ...]
    eval               --ckpt ckpt.mgmc --testset episodes.bin
    gen-data           --task sort|recall|mapping --seed S --count N --out F
    visualize-memory   --ckpt ckpt.mgmc --episode episodes.bin --layer L
                       --level J --out image.pgm [--channel C]
    analyze-routing    --layers M --levels N --out report.csv [--ppm-dir D]

``MGMEM_SEED`` overrides the config seed for training runs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from mgmem import tasks
from mgmem.checkpoint import load_checkpoint
from mgmem.routing import (
    TopologyNode,
    TopologySpec,
    reachable,
    reach_overlay,
    verify_prop1,
    write_report_csv,
)
from mgmem.training import (
    apply_override,
    config_from_dict,
    evaluate,
    generate_episodes,
    mapping_sequences,
    run_writer_reader,
    train,
)
from mgmem.visualize import export_memory_visual, write_ppm


def _cmd_train(args) -> int:
    data = json.loads(Path(args.config).read_text())
    for override in args.set or []:
        key, _, value = override.partition("=")
        if not _:
            raise SystemExit(f"--set expects path=value, got {override!r}")
        apply_override(data, key, value)
    cfg = config_from_dict(data)
    result = train(cfg)
    print(f"steps_run={result.steps_run}")
    print(f"checkpoint={result.checkpoint_path}")
    print(f"metrics={result.metrics_path}")
    if result.final_eval:
        print("final_eval=" + json.dumps(result.final_eval))
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    task, params, episodes = tasks.load_episodes(args.testset)
    summary = evaluate(ckpt.net, task, params, episodes, batch_size=args.batch)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_gen_data(args) -> int:
    rng = np.random.default_rng(args.seed)
    params = {
        "sort": {"length": args.length, "dim": args.dim},
        "recall": {"length": args.length, "dim": args.dim},
        "mapping": {"n": args.world, "m": args.obs, "k": args.query,
                    "steps": args.steps or (args.world - 2) ** 2,
                    "motion": args.motion, "margin": args.margin,
                    "wall_density": args.wall_density},
    }[args.task]
    episodes = generate_episodes(args.task, params, args.count, rng)
    if args.task == "mapping":
        params = {key: params[key] for key in ("n", "m", "k", "steps", "motion", "margin")}
    tasks.save_episodes(args.out, args.task, params, episodes)
    print(f"wrote {args.count} {args.task} episodes to {args.out}")
    if args.text:
        Path(args.text).write_text(tasks.dump_text(args.task, params, episodes))
        print(f"text dump at {args.text}")
    return 0


def _cmd_visualize_memory(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    net = ckpt.net
    if not hasattr(net, "writer"):
        raise SystemExit("memory visualization needs a writer-reader checkpoint")
    task, params, episodes = tasks.load_episodes(args.episode)
    if task != "mapping":
        raise SystemExit("memory replay expects a mapping episode file")
    episode = episodes[args.index]
    sequence, _ = mapping_sequences(
        [episode], params["m"], params["k"],
        obs_grid=net.spec.input_levels[0].rows,
        query_grid=net.spec.readers[0].input_levels[0].rows)
    _, states = run_writer_reader(net, sequence)
    layer = args.layer if args.layer >= 0 else len(states) - 1
    export_memory_visual(states[layer], level=args.level, out_path=args.out,
                         channel=args.channel)
    print(f"wrote {args.out} (layer {layer}, level {args.level})")
    return 0


def _cmd_analyze_routing(args) -> int:
    spec = TopologySpec(layers=args.layers, levels=args.levels, base=args.base)
    report = verify_prop1(spec, args.layers, args.levels)
    write_report_csv(args.out, report)
    status = "ok" if report.ok else "BOUND VIOLATION"
    print(f"wrote {args.out}: {len(report.rows)} rows, {status}")
    if args.ppm_dir:
        out_dir = Path(args.ppm_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        reach = reachable(spec, TopologyNode(1, 1, 1, 1))
        for row in report.rows:
            img = reach_overlay(reach, row.layer, row.level)
            write_ppm(out_dir / f"reach_m{row.layer}_n{row.level}.ppm", img)
        print(f"reach overlays in {out_dir}")
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mgmem", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="override a config field by dotted path")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--batch", type=int, default=32)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gen-data", help="generate a reproducible episode file")
    p.add_argument("--task", required=True, choices=("sort", "recall", "mapping"))
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--text", help="also write a human-readable dump here")
    p.add_argument("--length", type=int, default=8)
    p.add_argument("--dim", type=int, default=6)
    p.add_argument("--world", type=int, default=9)
    p.add_argument("--obs", type=int, default=3)
    p.add_argument("--query", type=int, default=3)
    p.add_argument("--steps", type=int, default=0)
    p.add_argument("--motion", choices=("spiral", "random"), default="spiral")
    p.add_argument("--margin", type=int, default=tasks.DEFAULT_MARGIN)
    p.add_argument("--wall-density", type=float, default=0.0)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("visualize-memory", help="replay an episode and image a memory grid")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episode", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--level", type=int, default=-1)
    p.add_argument("--channel", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_visualize_memory)

    p = sub.add_parser("analyze-routing", help="verify the reachability bound")
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--base", type=int, default=6)
    p.add_argument("--out", required=True)
    p.add_argument("--ppm-dir")
    p.set_defaults(fn=_cmd_analyze_routing)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
