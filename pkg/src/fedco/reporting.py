"""Per-round metric records and file emission.

``metrics.csv`` carries one row per (round, client, mode) with a fixed
header; floats are written with repr so reruns of a seeded experiment are
byte-identical. The wall_ms column is a reproducibility-preserving
placeholder (always 0.0); real elapsed time goes into ``summary.json``,
which is not covered by the bitwise-determinism contract.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

CSV_HEADER = "round,algorithm,client_id,split,mode,accuracy,loss,wall_ms"


@dataclass
class RoundReport:
    round: int
    algorithm: str
    client_id: int
    split: str
    mode: str
    accuracy: float
    loss: float
    wall_ms: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train or test, got {self.split!r}")


def render_csv(reports: Sequence[RoundReport]) -> str:
    lines = [CSV_HEADER]
    for r in reports:
        lines.append(f"{r.round},{r.algorithm},{r.client_id},{r.split},{r.mode},"
                     f"{r.accuracy!r},{r.loss!r},{r.wall_ms!r}")
    return "\n".join(lines) + "\n"


def final_round_averages(reports: Sequence[RoundReport]) -> dict[str, float]:
    """Average test accuracy per mode over the last round (the Avg column)."""
    last = max(r.round for r in reports)
    averages: dict[str, list[float]] = {}
    for r in reports:
        if r.round == last and r.split == "test":
            averages.setdefault(r.mode, []).append(r.accuracy)
    return {mode: sum(vals) / len(vals) for mode, vals in sorted(averages.items())}


def emit_reports(reports: Sequence[RoundReport], out_dir: str,
                 config: Mapping | None = None,
                 extra: Mapping | None = None) -> tuple[str, str]:
    """Write metrics.csv and summary.json; returns both paths."""
    if not reports:
        raise ValueError("no reports to emit")
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    with open(csv_path, "w", newline="\n") as fh:
        fh.write(render_csv(reports))

    from . import __version__
    summary = {
        "config": dict(config) if config is not None else None,
        "final_average_accuracy": final_round_averages(reports),
        "rounds": max(r.round for r in reports),
        "version": __version__,
    }
    if extra:
        summary.update(extra)
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, summary_path
