"""Command-line interface: train, eval, sweep, macs, analyze, gen-data.

Exit codes: 0 on success, 1 on configuration or validation failures,
2 on runtime errors.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .analysis import attention_map_export, cka_heatmap, layer_feature_taps, write_grid_csv
from .checkpoint import load_checkpoint
from .config import ConfigError, System, apply_overrides, build_run_config, build_system, parse_config_file
from .costs import cost_report
from .data import build_dataset, gen_synthetic, quantize_to_bytes, write_raw_images
from .inference import ExitPolicy, evaluate_dataset, threshold_sweep
from .metrics import MetricsWriter, write_csv
from .train import load_full_state, stage1_train, stage2_train


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eevit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="path to a key-value config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry (repeatable)",
        )

    p = sub.add_parser("train", help="run training stages")
    common(p)
    p.add_argument("--stage", choices=["1", "2", "all"], default="all")
    p.add_argument("--checkpoint", default=None, help="stage-1 checkpoint to start stage 2 from")

    p = sub.add_parser("eval", help="early-exit evaluation at one threshold")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--data", default=None, help="raw dataset path overriding the config")

    p = sub.add_parser("sweep", help="evaluate a list of thresholds with cached confidences")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--taus", required=True, help="comma-separated threshold list")
    p.add_argument("--csv", default=None, help="CSV output path (default: output_dir/sweep.csv)")
    p.add_argument("--data", default=None)

    p = sub.add_parser("macs", help="print the analytic cost report")
    common(p)
    p.add_argument("--report", default=None, help="write the report as key=value lines")

    p = sub.add_parser("analyze", help="CKA self-heatmap and attention-map export")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None, help="output directory (default: run output_dir)")
    p.add_argument("--probe", type=int, default=128, help="number of probe samples")
    p.add_argument("--attn-layer", type=int, default=None, help="layer for the attention grid")
    p.add_argument("--attn-sample", type=int, default=0)

    p = sub.add_parser("gen-data", help="write a synthetic dataset in the raw binary format")
    common(p)
    p.add_argument("--out", required=True)
    return parser


def _load_run(args):
    entries = parse_config_file(args.config) if args.config else {}
    entries = apply_overrides(entries, args.overrides)
    return build_run_config(entries)


def _restore(system: System, path: str) -> None:
    load_full_state(load_checkpoint(path), system.model, system.branches)


def _dataset_for(args, run):
    if getattr(args, "data", None):
        spec = run.data
        spec.source, spec.path = "raw", args.data
    return build_dataset(run.data)


def _cmd_train(args) -> int:
    run = _load_run(args)
    os.makedirs(run.output_dir, exist_ok=True)
    system = build_system(run)
    dataset = _dataset_for(args, run)
    augment = (run.data.random_crop, run.data.random_flip)
    if args.stage in ("1", "all"):
        writer = MetricsWriter(
            os.path.join(run.output_dir, "metrics_stage1.txt"), timestamps=run.timestamps
        )
        history = stage1_train(system.model, dataset, run.train, run.output_dir, writer, augment)
        print(f"stage 1 done: train_acc={history[-1]['train_acc']:.4f}")
    if args.stage in ("2", "all"):
        if args.stage == "2":
            ckpt = args.checkpoint or os.path.join(run.output_dir, "stage1_final.ckpt")
            load_full_state(load_checkpoint(ckpt), system.model)
        writer = MetricsWriter(
            os.path.join(run.output_dir, "metrics_stage2.txt"), timestamps=run.timestamps
        )
        history = stage2_train(
            system.model, system.branches, dataset, run.train, system.placement,
            run.output_dir, writer, augment,
        )
        accs = " ".join(
            f"exit{i + 1}={history[-1][f'exit{i + 1}_acc']:.4f}"
            for i in range(len(system.branches))
        )
        print(f"stage 2 done: {accs}")
    return 0


def _print_summary(summary) -> None:
    print(
        f"tau={summary.tau} accuracy={summary.accuracy:.4f} "
        f"speedup={summary.speedup:.4f} expected_macs={summary.expected_macs:.1f}"
    )


def _cmd_eval(args) -> int:
    run = _load_run(args)
    policy = ExitPolicy(args.tau) if args.tau is not None else run.policy
    system = build_system(run)
    _restore(system, args.checkpoint)
    dataset = _dataset_for(args, run)
    summary = evaluate_dataset(
        system.model, system.branches, dataset.images, dataset.labels,
        policy, system.profile, system.placement,
    )
    _print_summary(summary)
    os.makedirs(run.output_dir, exist_ok=True)
    writer = MetricsWriter(os.path.join(run.output_dir, "eval.txt"), timestamps=run.timestamps)
    writer.write(
        "eval",
        0,
        {
            "tau": summary.tau,
            "accuracy": summary.accuracy,
            "speedup": summary.speedup,
            "expected_macs": summary.expected_macs,
        },
    )
    return 0


def _cmd_sweep(args) -> int:
    run = _load_run(args)
    taus = [float(part) for part in args.taus.split(",") if part.strip()]
    for tau in taus:
        ExitPolicy(tau)  # validate early
    system = build_system(run)
    _restore(system, args.checkpoint)
    dataset = _dataset_for(args, run)
    summaries = threshold_sweep(
        system.model, system.branches, dataset.images, dataset.labels,
        taus, system.profile, system.placement,
    )
    os.makedirs(run.output_dir, exist_ok=True)
    writer = MetricsWriter(os.path.join(run.output_dir, "sweep.txt"), timestamps=run.timestamps)
    for step, summary in enumerate(summaries):
        _print_summary(summary)
        writer.write(
            "sweep",
            step,
            {
                "tau": summary.tau,
                "accuracy": summary.accuracy,
                "speedup": summary.speedup,
                "expected_macs": summary.expected_macs,
            },
        )
    csv_path = args.csv or os.path.join(run.output_dir, "sweep.csv")
    write_csv(
        csv_path,
        ["tau", "accuracy", "speedup", "expected_macs"],
        [[s.tau, s.accuracy, s.speedup, s.expected_macs] for s in summaries],
    )
    print(f"wrote {csv_path}")
    return 0


def _cmd_macs(args) -> int:
    run = _load_run(args)
    system = build_system(run)
    report = cost_report(system.profile, system.placement)
    for key, value in report.as_records():
        print(f"{key} = {value}")
    print(f"total_gmacs = {system.profile.backbone_total() / 1e9:.4f}")
    if args.report:
        with open(args.report, "w") as fh:
            for key, value in report.as_records():
                fh.write(f"{key} = {value}\n")
    return 0


def _cmd_analyze(args) -> int:
    run = _load_run(args)
    system = build_system(run)
    _restore(system, args.checkpoint)
    dataset = _dataset_for(args, run)
    out_dir = args.out or run.output_dir
    os.makedirs(out_dir, exist_ok=True)
    probe = dataset.images[: args.probe]
    taps = layer_feature_taps(system.model, probe)
    heatmap = cka_heatmap(taps, taps)
    write_grid_csv(os.path.join(out_dir, "cka_self.csv"), heatmap)
    print(f"cka diagonal: {np.diagonal(heatmap).round(6).tolist()}")
    layer = args.attn_layer or run.model.layers
    grid, cls_self = attention_map_export(system.model, dataset.images[args.attn_sample], layer)
    write_grid_csv(os.path.join(out_dir, f"attention_layer{layer}.csv"), grid)
    print(f"attention grid written for layer {layer}; cls self-weight {cls_self:.6f}")
    return 0


def _cmd_gen_data(args) -> int:
    run = _load_run(args)
    spec = run.data
    pixels, labels = gen_synthetic(
        spec.num_classes, spec.per_class, spec.image_side, spec.channels, spec.noise, spec.seed
    )
    write_raw_images(args.out, quantize_to_bytes(pixels), labels)
    print(f"wrote {len(labels)} records to {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "macs": _cmd_macs,
    "analyze": _cmd_analyze,
    "gen-data": _cmd_gen_data,
}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
