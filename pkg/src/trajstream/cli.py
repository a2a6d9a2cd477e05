"""Command-line entry point.

Subcommands: generate, train, train-ma, eval, sweep, bench, plot,
dump-tensors. Every command snapshots its effective configuration into the
output directory, so a run is reproducible from the directory plus the seed.
The default seed can be overridden with the TRAJSTREAM_SEED environment
variable.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import init_world_from_single, load_model, save_checkpoint
from .config import (ConfigError, ModelConfig, TrainConfig, load_config_file,
                     model_config_from_dict, save_config, train_config_from_dict)
from .generator import GeneratorSpec, generate_synthetic
from .scenario import list_dataset, load_scenario, save_scenario
from .tensorization import tensorize


def _default_seed() -> int:
    return int(os.environ.get("TRAJSTREAM_SEED", "0"))


def _load_sections(path: str | None) -> dict:
    if path is None:
        return {}
    sections = load_config_file(path)
    unknown = set(sections) - {"model", "train", "generator"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    return sections


def _model_cfg(sections: dict) -> ModelConfig:
    return model_config_from_dict(sections.get("model", {}))


def _train_cfg(sections: dict) -> TrainConfig:
    return train_config_from_dict(sections.get("train", {}))


def _generator_spec(sections: dict) -> GeneratorSpec:
    d = dict(sections.get("generator", {}))
    templates = d.pop("template", "straight")
    names = {f.name for f in dataclasses.fields(GeneratorSpec)} - {"template"}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"generator config: unknown keys {sorted(unknown)}")
    return templates, d


def _prepare_out(out: str, force: bool) -> Path:
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise SystemExit(f"error: output directory {out_dir} is not empty (use --force)")
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _load_scenarios(dataset: str):
    paths = list_dataset(dataset)
    return [load_scenario(p) for p in paths]


# ---------------------------------------------------------------------------
# Subcommands

def cmd_generate(args) -> int:
    sections = _load_sections(args.config)
    templates, gen_kwargs = _generator_spec(sections)
    if args.templates:
        templates = args.templates
    template_list = [t.strip() for t in str(templates).split(",") if t.strip()]
    out_dir = _prepare_out(args.out, args.force)
    names = []
    for i in range(args.count):
        template = template_list[i % len(template_list)]
        spec = GeneratorSpec(template=template, **gen_kwargs)
        scenario = generate_synthetic(args.seed + i, spec)
        scenario.scenario_id = f"{template}-{args.seed + i:05d}"
        name = f"{scenario.scenario_id}.json"
        save_scenario(scenario, out_dir / name)
        names.append(name)
    (out_dir / "index.json").write_text(json.dumps({"scenarios": names}, indent=1) + "\n")
    save_config(out_dir / "config_snapshot.json",
                generator={"template": ",".join(template_list), **gen_kwargs},
                seed=args.seed, count=args.count)
    print(f"wrote {len(names)} scenarios to {out_dir}")
    return 0


def cmd_train(args) -> int:
    from .training import train_stream

    sections = _load_sections(args.config)
    mcfg = _model_cfg(sections)
    tcfg = _train_cfg(sections)
    if args.seed is not None:
        tcfg.seed = args.seed
    out_dir = _prepare_out(args.out, args.force)
    scenarios = _load_scenarios(args.dataset)
    from .model import StreamingPredictor
    torch.manual_seed(tcfg.seed)
    model = StreamingPredictor(mcfg)
    save_config(out_dir / "config_snapshot.json", model=mcfg, train=tcfg)
    result = train_stream(model, scenarios, tcfg, out_dir=out_dir,
                          max_steps=args.max_steps,
                          log_cb=lambda row: print(
                              f"step {row['step']}: loss {row['total']:.4f} "
                              f"(reg {row['reg']:.4f} cls {row['cls']:.4f} "
                              f"aux {row['aux']:.4f}) lr {row['lr']:.2e}"))
    ckpt = out_dir / "checkpoint.zip"
    save_checkpoint(ckpt, model, mcfg, step=result.steps, kind="single")
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_train_ma(args) -> int:
    from .training import train_world

    sections = _load_sections(args.config)
    tcfg = _train_cfg(sections)
    if args.seed is not None:
        tcfg.seed = args.seed
    out_dir = _prepare_out(args.out, args.force)
    world_model, manifest = init_world_from_single(args.init)
    mcfg = world_model.cfg
    scenarios = _load_scenarios(args.dataset)
    save_config(out_dir / "config_snapshot.json", model=mcfg, train=tcfg,
                init_checkpoint=str(args.init))
    result = train_world(world_model, scenarios, tcfg, out_dir=out_dir,
                         max_steps=args.max_steps,
                         log_cb=lambda row: print(
                             f"step {row['step']}: loss {row['total']:.4f} "
                             f"lr {row['lr']:.2e}"))
    ckpt = out_dir / "checkpoint.zip"
    save_checkpoint(ckpt, world_model, mcfg,
                    step=manifest["step"] + result.steps, kind="world")
    print(f"checkpoint written to {ckpt}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_stream, evaluate_world
    from .multiagent import WorldModel

    model, manifest = load_model(args.checkpoint)
    scenarios = _load_scenarios(args.dataset)
    out_dir = _prepare_out(args.out, args.force)
    save_config(out_dir / "config_snapshot.json", model=model.cfg,
                checkpoint=str(args.checkpoint), mode=args.mode, seed=args.seed)
    torch.manual_seed(args.seed)
    if isinstance(model, WorldModel):
        report = evaluate_world(model, scenarios,
                                log_path=out_dir / "world_predictions.jsonl")
    else:
        report = evaluate_stream(model, scenarios, mode=args.mode,
                                 log_path=out_dir / "predictions.jsonl",
                                 workers=args.workers)
    report.save(out_dir / "report.json")
    (out_dir / "report.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return 0


def cmd_sweep(args) -> int:
    from .evaluation import SWEEP_DEFAULT_GRIDS, sweep

    model, _ = load_model(args.checkpoint)
    scenarios = _load_scenarios(args.dataset)
    out_dir = _prepare_out(args.out, args.force)
    grid = None
    if args.grid:
        raw = [g.strip() for g in args.grid.split(",")]
        if args.harness in ("target_radius",):
            grid = [float(g) for g in raw]
        elif args.harness == "encoder_depth":
            grid = [int(g) for g in raw]
        else:
            grid = raw
    save_config(out_dir / "config_snapshot.json", model=model.cfg,
                harness=args.harness,
                grid=grid if grid is not None else SWEEP_DEFAULT_GRIDS[args.harness],
                checkpoint=str(args.checkpoint), seed=args.seed)
    table = sweep(args.harness, grid, model, scenarios, noise_seed=args.seed)
    table.save(out_dir / "sweep.json")
    (out_dir / "sweep.txt").write_text(table.to_text() + "\n")
    print(table.to_text())
    return 0


def cmd_bench(args) -> int:
    from .bench import run_bench

    model, _ = load_model(args.checkpoint)
    out_dir = _prepare_out(args.out, args.force)
    batch_sizes = [int(b) for b in args.batch_sizes.split(",")]
    save_config(out_dir / "config_snapshot.json", model=model.cfg,
                batch_sizes=batch_sizes, repetitions=args.repetitions,
                warmup=args.warmup, seed=args.seed)
    table = run_bench(model, batch_sizes, repetitions=args.repetitions,
                      warmup=args.warmup, seed=args.seed)
    table.save(out_dir / "latency.json")
    (out_dir / "latency.txt").write_text(table.to_text() + "\n")
    print(table.to_text())
    return 0


def cmd_plot(args) -> int:
    from .plotting import load_prediction_log, plot_stream

    by_scenario = load_prediction_log(args.log)
    scenarios = {s.scenario_id: s for s in _load_scenarios(args.dataset)}
    out_dir = _prepare_out(args.out, args.force)
    wanted = [args.scenario] if args.scenario else sorted(by_scenario)
    written = []
    for sid in wanted:
        if sid not in by_scenario:
            raise SystemExit(f"error: scenario {sid!r} not present in the log")
        if sid not in scenarios:
            raise SystemExit(f"error: scenario {sid!r} not present in the dataset")
        out = plot_stream(scenarios[sid], by_scenario[sid], out_dir / f"{sid}.png")
        written.append(out)
    print(f"wrote {len(written)} figure(s) to {out_dir}")
    return 0


def cmd_dump_tensors(args) -> int:
    from .scenario import extract_window

    sections = _load_sections(args.config)
    mcfg = _model_cfg(sections)
    scenario = load_scenario(args.scenario_file)
    window = extract_window(scenario, args.t_now, mcfg.T_h, mcfg.T_f, mcfg.T_a)
    bundle = tensorize(window, mcfg.P_l, mcfg.context_radius_m)
    payload = {
        "scenario_id": scenario.scenario_id,
        "t_now": args.t_now,
        "focal_index": bundle.focal_index,
        "focal_pose": list(bundle.focal_pose.as_array()),
        "track_ids": bundle.track_ids,
        "lane_ids": bundle.lane_ids,
        "A": bundle.A.tolist(),
        "L": bundle.L.tolist(),
        "agent_poses": bundle.agent_poses.tolist(),
        "lane_poses": bundle.lane_poses.tolist(),
        "agent_types": bundle.agent_types.tolist(),
        "lane_types": bundle.lane_types.tolist(),
    }
    text = json.dumps(payload, indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajstream",
        description="Streaming trajectory forecasting: data generation, "
                    "training, evaluation, ablation sweeps and benchmarks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty output directory")
        p.add_argument("--seed", type=int, default=_default_seed())

    p = sub.add_parser("generate", help="write a synthetic scenario dataset")
    add_common(p)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--templates", help="comma-separated template cycle")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="single-agent streaming training")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-ma", help="multi-agent finetuning from a checkpoint")
    add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--init", required=True, help="single-agent init checkpoint")
    p.add_argument("--max-steps", type=int)
    p.set_defaults(func=cmd_train_ma)

    p = sub.add_parser("eval", help="streaming or snapshot evaluation")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=("stream", "snapshot"), default="stream")
    p.add_argument("--workers", type=int, default=1,
                   help="scenario-level parallel workers")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="run an ablation harness")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--harness", required=True,
                   choices=("streaming_mechanisms", "target_radius",
                            "endpoint_noise", "encoder_depth"))
    p.add_argument("--grid", help="comma-separated grid override")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="forward-pass latency benchmark")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch-sizes", default="1,32,64")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="render prediction-log figures")
    add_common(p)
    p.add_argument("--log", required=True, help="predictions.jsonl from eval")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scenario", help="single scenario id (default: all in log)")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("dump-tensors", help="serialize one window's model tensors")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--scenario-file", required=True)
    p.add_argument("--t-now", type=int, default=30)
    p.add_argument("--out", help="output file (default: stdout)")
    p.set_defaults(func=cmd_dump_tensors)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
