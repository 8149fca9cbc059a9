"""Line-delimited metric records and CSV curve output.

One record per line as space-separated ``key=value`` pairs with a fixed
field order: run, phase, epoch/step, then metric names in sorted order,
and optionally a trailing timestamp.  Timestamps are off by default so
fixed-seed reruns produce byte-identical streams.
"""

from __future__ import annotations

import time


def format_record(
    run_id: str,
    phase: str,
    epoch: int,
    metrics: dict[str, float],
    timestamp: float | None = None,
) -> str:
    parts = [f"run={run_id}", f"phase={phase}", f"epoch={epoch}"]
    parts += [f"{key}={metrics[key]!r}" for key in sorted(metrics)]
    if timestamp is not None:
        parts.append(f"ts={timestamp:.6f}")
    return " ".join(parts)


class MetricsWriter:
    """Append-only metric stream bound to one file."""

    def __init__(self, path: str | None, run_id: str = "run", timestamps: bool = False):
        self.path = path
        self.run_id = run_id
        self.timestamps = timestamps
        if path is not None:
            with open(path, "w"):
                pass

    def write(self, phase: str, epoch: int, metrics: dict[str, float]) -> str:
        line = format_record(
            self.run_id,
            phase,
            epoch,
            metrics,
            timestamp=time.time() if self.timestamps else None,
        )
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(line + "\n")
        return line


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
