#!/usr/bin/env python3
"""Export the CKA self-similarity heatmap and per-layer attention grids.

    python scripts/export_analysis.py --checkpoint runs/desk/stage2_final.ckpt \
        [--config configs/desk.conf] [--out analysis/] [--layers 2,4,6,8]
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from eevit.analysis import attention_map_export, cka_heatmap, layer_feature_taps, write_grid_csv
from eevit.checkpoint import load_checkpoint
from eevit.config import apply_overrides, build_run_config, build_system, parse_config_file
from eevit.data import build_dataset
from eevit.train import load_full_state


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None)
    parser.add_argument("--set", dest="overrides", action="append", default=[])
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--probe", type=int, default=128)
    parser.add_argument("--layers", default=None, help="comma list; default: all")
    parser.add_argument("--sample", type=int, default=0)
    args = parser.parse_args()

    entries = parse_config_file(args.config) if args.config else {}
    run = build_run_config(apply_overrides(entries, args.overrides))
    system = build_system(run)
    load_full_state(load_checkpoint(args.checkpoint), system.model, system.branches)
    dataset = build_dataset(run.data)
    out_dir = args.out or os.path.join(run.output_dir, "analysis")
    os.makedirs(out_dir, exist_ok=True)

    taps = layer_feature_taps(system.model, dataset.images[: args.probe])
    heatmap = cka_heatmap(taps, taps)
    write_grid_csv(os.path.join(out_dir, "cka_self.csv"), heatmap)
    print("cka heatmap:", heatmap.shape, "diag:", np.diagonal(heatmap).round(4).tolist())

    layers = ([int(x) for x in args.layers.split(",")] if args.layers
              else list(range(1, run.model.layers + 1)))
    for layer in layers:
        grid, cls_self = attention_map_export(system.model, dataset.images[args.sample], layer)
        path = os.path.join(out_dir, f"attention_layer{layer}.csv")
        write_grid_csv(path, grid)
        print(f"layer {layer}: grid -> {path} (cls self-weight {cls_self:.4f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
