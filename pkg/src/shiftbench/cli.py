"""Command-line surface: generate-data, run, grid, probe, pretrain, report.

Exit codes: 0 success, 2 config error, 3 run aborted, 4 empty report.
"""

import argparse
import json
import sys
from pathlib import Path

from .configio import parse_config, serialize_config
from .errors import AbortedRunError, ConfigError, EmptyReportError, ShiftBenchError
from .grid import ResultsStore, execute_and_aggregate
from .io import save_dataset
from .metrics import domain_probe
from .models import load_backbone_module
from .pretrain import contrastive_pretrain, supervised_pretrain
from .report import ReportSpec, emit_report
from .trainer import config_from_dict, resolve_dataset, train_run


def _require(parsed, kind, path):
    if parsed.kind != kind:
        raise ConfigError(f"{path} is a {parsed.kind} config; this command needs a {kind} config")
    return parsed


def _with_seed(parsed, seed):
    if seed is None:
        return parsed
    doc = dict(parsed.doc)
    doc["seed"] = seed
    from .configio import parse_config_text

    return parse_config_text(serialize_config(doc))


def _axes_for_run(config):
    t_plan, s_plan = config.target_sampling, config.source_sampling
    return {
        "method": config.method.name,
        "arch": config.arch.family,
        "target_fraction": t_plan.fraction if t_plan else 1.0,
        "source_fraction": s_plan.fraction if s_plan else 1.0,
        "sampling": t_plan.strategy if t_plan else "stratified",
        "pretrain": config.pretrain_checkpoint or "none",
        "repeat": 0,
    }


def cmd_generate_data(args):
    parsed = parse_config(args.config)
    if parsed.kind == "run" or parsed.kind == "grid":
        dataset_spec = parsed.obj.dataset if parsed.kind == "run" else parsed.obj.base.dataset
    elif parsed.kind == "probe":
        dataset_spec = parsed.obj[0]
    else:
        raise ConfigError("generate-data needs a config with a dataset section")
    if args.seed is not None:
        from dataclasses import replace

        dataset_spec = replace(dataset_spec, seed=args.seed)
    bundle = resolve_dataset(dataset_spec)
    out = Path(args.out_dir) / bundle.name
    save_dataset(bundle, out)
    print(f"wrote dataset {bundle.name!r} to {out}")
    return 0


def cmd_run(args):
    parsed = _with_seed(_require(parse_config(args.config), "run", args.config), args.seed)
    config = parsed.obj
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run_dir = out_dir / f"run_{config.seed}"
    record = train_run(config, checkpoint_dir=run_dir / "checkpoint")
    (run_dir / "config.yaml").write_text(serialize_config(parsed.doc))
    with open(run_dir / "log.jsonl", "w") as fh:
        for entry in record.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    doc = record.to_dict()
    doc["axes"] = _axes_for_run(config)
    store = ResultsStore(out_dir / "results.jsonl")
    if (doc["config_hash"], doc["seed"]) not in store.completed_keys():
        store.append(doc)
    m = record.metrics
    print(
        f"run {record.config_hash} seed={config.seed}: "
        f"lambda_s={m.lambda_s:.2f} lambda_t={m.lambda_t:.2f} sigma_st={m.sigma_st:.2f}"
    )
    return 0


def cmd_grid(args):
    parsed = _with_seed(_require(parse_config(args.config), "grid", args.config), None)
    grid = parsed.obj
    if args.seed is not None:
        from dataclasses import replace

        grid = replace(grid, master_seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, summary = execute_and_aggregate(
        grid, parallelism=args.parallelism, store_path=out_dir / "results.jsonl"
    )
    header = list(rows[0].keys()) if rows else []
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if row[h] is None else f"{row[h]:.10g}" if isinstance(row[h], float) else str(row[h]) for h in header))
    (out_dir / "summary.csv").write_text("\n".join(lines) + "\n")
    print(
        f"grid complete: {summary['executed']} executed, {summary['resumed']} resumed, "
        f"{len(summary['aborted'])} aborted -> {out_dir / 'summary.csv'}"
    )
    for aborted in summary["aborted"]:
        print(f"  aborted: {aborted}")
    return 0


def cmd_probe(args):
    parsed = _require(parse_config(args.config), "probe", args.config)
    dataset_spec, options = parsed.obj
    seed = args.seed if args.seed is not None else options["seed"]
    bundle = resolve_dataset(dataset_spec)
    src = bundle.source_train.features
    tgt = bundle.target_train.features
    if options.get("checkpoint"):
        backbone, _ = load_backbone_module(options["checkpoint"])
        import torch

        from .models import to_tensor

        with torch.no_grad():
            src = backbone(to_tensor(src)).numpy()
            tgt = backbone(to_tensor(tgt)).numpy()
    curve = domain_probe(src, tgt, options["fractions"], seed, steps=options["steps"])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"probe_seed{seed}.csv"
    curve.to_csv(path)
    print(f"probe curve ({len(curve.fractions)} fractions) -> {path}")
    return 0


def cmd_pretrain(args):
    parsed = _require(parse_config(args.config), "pretrain", args.config)
    spec, arch = parsed.obj
    if args.seed is not None:
        from dataclasses import replace

        spec = replace(spec, seed=args.seed)
    result = supervised_pretrain(spec, arch) if spec.mode == "supervised" else contrastive_pretrain(spec, arch)
    out = Path(args.out_dir) / f"pretext_{spec.mode}_seed{spec.seed}"
    result.save(out)
    losses = ", ".join(f"{x:.4f}" for x in result.history) or "none"
    print(f"pretrained {spec.mode} ({result.manifest['actual_size']} samples); epoch losses: {losses}")
    print(f"checkpoint -> {out}")
    return 0


def cmd_report(args):
    spec = ReportSpec(
        store_path=args.store,
        kind=args.kind,
        output_format=args.format,
        out_dir=args.out_dir,
        probe_csv=args.probe_csv or [],
    )
    written = emit_report(spec)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="shiftbench", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out-dir", default="out", help="output directory")
    common.add_argument("--parallelism", type=int, default=1, help="worker processes for grids")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", parents=[common], help="materialize a dataset directory")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("run", parents=[common], help="execute one training run")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("grid", parents=[common], help="execute an experiment grid")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("probe", parents=[common], help="domain-discrimination probe curve")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("pretrain", parents=[common], help="pretext pretraining checkpoint")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("report", parents=[common], help="emit tables and figures from a store")
    p.add_argument("--store", default="out/results.jsonl")
    p.add_argument("--kind", required=True)
    p.add_argument("--format", default="csv", choices=["csv", "markdown", "svg-plot"])
    p.add_argument("--probe-csv", action="append", help="probe CSV input (probe-curve kind)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except AbortedRunError as err:
        print(f"error: run aborted: {err}", file=sys.stderr)
        return 3
    except EmptyReportError as err:
        print(f"error: empty report: {err}", file=sys.stderr)
        return 4
    except (ConfigError, ShiftBenchError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
