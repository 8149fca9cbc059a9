#!/usr/bin/env python3
"""End-to-end desk experiment: train both stages, then sweep thresholds.

Equivalent to `eevit train` followed by `eevit sweep`, kept as one script
so the whole efficiency-accuracy curve comes out of a single invocation.

    python scripts/run_desk_pipeline.py [--config configs/desk.conf] [--set k=v ...]
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from eevit.config import apply_overrides, build_run_config, build_system, parse_config_file
from eevit.data import build_dataset
from eevit.inference import threshold_sweep
from eevit.metrics import MetricsWriter, write_csv
from eevit.train import exit_accuracies, stage1_train, stage2_train


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None)
    parser.add_argument("--set", dest="overrides", action="append", default=[])
    parser.add_argument("--taus", default="0,0.3,0.5,0.7,0.8,0.9,0.95,0.99,1.01")
    args = parser.parse_args()

    entries = parse_config_file(args.config) if args.config else {}
    run = build_run_config(apply_overrides(entries, args.overrides))
    os.makedirs(run.output_dir, exist_ok=True)
    system = build_system(run)
    dataset = build_dataset(run.data)
    augment = (run.data.random_crop, run.data.random_flip)

    start = time.monotonic()
    writer1 = MetricsWriter(os.path.join(run.output_dir, "metrics_stage1.txt"),
                            timestamps=run.timestamps)
    history1 = stage1_train(system.model, dataset, run.train, run.output_dir, writer1, augment)
    print(f"stage 1: train_acc={history1[-1]['train_acc']:.4f} "
          f"({time.monotonic() - start:.0f}s)")

    writer2 = MetricsWriter(os.path.join(run.output_dir, "metrics_stage2.txt"),
                            timestamps=run.timestamps)
    history2 = stage2_train(system.model, system.branches, dataset, run.train,
                            system.placement, run.output_dir, writer2, augment)
    ratio = history2[-1]["loss_total"] / history2[0]["loss_total"]
    print(f"stage 2: total_loss {history2[0]['loss_total']:.3f} -> "
          f"{history2[-1]['loss_total']:.3f} (x{ratio:.3f})")
    accs = exit_accuracies(system.model, system.branches, dataset, system.placement)
    print("exit accuracies:", " ".join(f"{a:.4f}" for a in accs))

    taus = [float(t) for t in args.taus.split(",")]
    summaries = threshold_sweep(system.model, system.branches, dataset.images,
                                dataset.labels, taus, system.profile, system.placement)
    rows = []
    for s in summaries:
        print(f"tau={s.tau:<5} acc={s.accuracy:.4f} speedup={s.speedup:.4f} "
              f"macs={s.expected_macs:.0f}")
        rows.append([s.tau, s.accuracy, s.speedup, s.expected_macs])
    csv_path = os.path.join(run.output_dir, "sweep.csv")
    write_csv(csv_path, ["tau", "accuracy", "speedup", "expected_macs"], rows)
    print(f"curve written to {csv_path}; total {time.monotonic() - start:.0f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
