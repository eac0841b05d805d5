"""Per-timestep run metrics and CSV emission."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .world import MPH_PER_MPS

METRICS_HEADER = (
    "timestep,v_bar_mps,v_bar_mph,c_bar,min_headway_m,flow_vps,"
    "unsafe_actions,es_count,collisions,episode_reward"
)


@dataclass(frozen=True)
class MetricsRecord:
    timestep: int
    v_bar_mps: float
    c_bar: float
    min_headway_m: float
    flow_vps: float
    unsafe_actions: int
    es_count: int
    collisions: int
    episode_reward: float

    @property
    def v_bar_mph(self) -> float:
        return self.v_bar_mps * MPH_PER_MPS

    def row(self) -> str:
        return ",".join(
            [
                str(self.timestep),
                repr(self.v_bar_mps),
                repr(self.v_bar_mph),
                repr(self.c_bar),
                repr(self.min_headway_m),
                repr(self.flow_vps),
                str(self.unsafe_actions),
                str(self.es_count),
                str(self.collisions),
                repr(self.episode_reward),
            ]
        )


def write_metrics_csv(records: Iterable[MetricsRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [METRICS_HEADER] + [r.row() for r in records]
    path.write_text("\n".join(lines) + "\n")


def read_metrics_csv(path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        out.append({k: float(v) for k, v in zip(header, vals)})
    return out


def write_rows_csv(path, header: str, rows: Iterable[Iterable]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [header]
    for row in rows:
        lines.append(",".join(repr(c) if isinstance(c, float) else str(c) for c in row))
    path.write_text("\n".join(lines) + "\n")


def mean(values) -> float:
    vals = list(values)
    return sum(vals) / len(vals) if vals else 0.0


def finite_min(values) -> float:
    vals = [v for v in values]
    return min(vals) if vals else math.inf
