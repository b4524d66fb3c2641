"""Side-by-side topology comparison under one shared delay table."""
from __future__ import annotations

from typing import Mapping, Sequence

from ..errors import HeterogeneousEnvs
from .config import ExperimentConfig
from .experiment import run_experiment

COLUMNS = ("name", "kind", "frames_per_second", "updates_per_second", "lag_mean", "lag_max", "frames_stepped",
           "updates", "sim_time")


def bench_topologies(config_matrix: Mapping[str, ExperimentConfig] | Sequence[ExperimentConfig]) -> list[dict]:
    """One row per configuration; every row must share env and frame budget."""
    if not isinstance(config_matrix, Mapping):
        config_matrix = {f"{c.topology.kind}-{i}": c for i, c in enumerate(config_matrix)}
    if not config_matrix:
        raise ValueError("config matrix is empty")
    shapes = {(c.env.id, c.env.max_episode_steps, c.run.frames) for c in config_matrix.values()}
    if len(shapes) > 1:
        raise HeterogeneousEnvs(f"rows differ in env or frame budget: {sorted(shapes)}")
    rows = []
    for name, cfg in config_matrix.items():
        s = run_experiment(cfg.replace(**{"run.out_dir": "", "run.eval_episodes": 0})).summary
        rows.append({"name": name, **{k: s[k] for k in COLUMNS[1:]}})
    return rows


def format_table(rows: list[dict]) -> str:
    def cell(v):
        return f"{v:.4g}" if isinstance(v, float) else str(v)

    table = [list(COLUMNS)] + [[cell(r[c]) for c in COLUMNS] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(COLUMNS))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
