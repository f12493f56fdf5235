"""Model inputs for the learned correctors: per-timestep encodings of the
cough, purifier and AC state, a cyclic time encoding, and the compartment
model's (normalized) predicted concentrations.

The flat layout per timestep is
``[cough cell one-hot (n) | cough direction one-hot (4) |
   purifier cell-or-absent one-hot (n+1) | purifier fan level (1) |
   AC cell one-hot (n) | AC fan level (1) | time encoding (2) |
   base-model concentrations (n)]``
which is 45 wide on the 3x3 grid.  The graph layout carries the same
information as 12 features per cell.  One-hot blocks are all zero where the
corresponding agent is absent (no cough yet, purifier traveling, AC off).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import GridLayout, ScenarioConfig, Trajectory, fan_multiplier
from .simulate import purifier_timeline

__all__ = [
    "NODE_FEATURES",
    "Normalizer",
    "fit_normalizer",
    "flat_feature_size",
    "flat_frames",
    "node_frames",
]

NODE_FEATURES = 12


@dataclass(frozen=True)
class Normalizer:
    """Min-max scaling to [0, 1] with statistics taken from training folds
    only; predictions are mapped back before any metric is computed."""

    lo: float
    hi: float

    @property
    def span(self) -> float:
        return self.hi - self.lo

    def encode(self, values):
        return (np.asarray(values, dtype=float) - self.lo) / self.span

    def decode(self, values):
        return np.asarray(values, dtype=float) * self.span + self.lo

    def encode_delta(self, values):
        return np.asarray(values, dtype=float) / self.span

    def decode_delta(self, values):
        return np.asarray(values, dtype=float) * self.span


def fit_normalizer(trajectories) -> Normalizer:
    """Normalization statistics over every value of the given trajectories."""
    lo = np.inf
    hi = -np.inf
    for traj in trajectories:
        values = np.asarray(traj.values, dtype=float)
        lo = min(lo, float(values.min()))
        hi = max(hi, float(values.max()))
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise ValueError("cannot fit a normalizer without data")
    if hi <= lo:
        hi = lo + 1.0
    return Normalizer(lo=lo, hi=hi)


def flat_feature_size(grid: GridLayout) -> int:
    return 4 * grid.n_cells + 9


_DIR_INDEX = {"N": 0, "S": 1, "E": 2, "W": 3}


def _state_timeline(scenario: ScenarioConfig, times: np.ndarray, travel_time_per_cell: float):
    """Per-sample agent states: cough (cell, dir) most recently started,
    purifier (cell or None, level), AC (cell or None, level)."""
    grid = scenario.grid
    coughs = sorted(scenario.coughs, key=lambda c: c.time)
    segments = purifier_timeline(scenario.purifier_schedule, grid, travel_time_per_cell)

    cough_cell = np.full(len(times), -1, dtype=int)
    cough_dir = np.full(len(times), -1, dtype=int)
    for cough in coughs:  # later coughs overwrite: most recent event persists
        active = times >= cough.time
        cough_cell[active] = cough.cell
        cough_dir[active] = _DIR_INDEX[cough.direction]

    purifier_cell = np.full(len(times), -1, dtype=int)
    purifier_level = np.zeros(len(times))
    for start, cell, fan in segments:
        active = times >= start
        purifier_cell[active] = cell if cell is not None else -1
        purifier_level[active] = fan_multiplier(fan) if cell is not None else 0.0

    if scenario.ac.cell is not None and scenario.ac.on:
        ac_cell, ac_level = scenario.ac.cell, fan_multiplier(scenario.ac.fan)
    else:
        ac_cell, ac_level = -1, 0.0
    return cough_cell, cough_dir, purifier_cell, purifier_level, ac_cell, ac_level


def flat_frames(
    scenario: ScenarioConfig,
    base_norm: np.ndarray,
    sample_interval: float = 1.0,
    travel_time_per_cell: float = 5.0,
) -> np.ndarray:
    """Flat feature matrix [T, 4n+9]; ``base_norm`` holds the normalized
    base-model concentrations [T, n] sampled every ``sample_interval``."""
    grid = scenario.grid
    n = grid.n_cells
    base_norm = np.asarray(base_norm, dtype=float)
    t_count = base_norm.shape[0]
    times = np.arange(t_count) * sample_interval
    cough_cell, cough_dir, pur_cell, pur_level, ac_cell, ac_level = _state_timeline(
        scenario, times, travel_time_per_cell
    )
    out = np.zeros((t_count, flat_feature_size(grid)))
    rows = np.arange(t_count)
    has_cough = cough_cell >= 0
    out[rows[has_cough], cough_cell[has_cough]] = 1.0
    out[rows[has_cough], n + cough_dir[has_cough]] = 1.0
    pur_slot = np.where(pur_cell >= 0, pur_cell, n)  # last slot means absent
    out[rows, n + 4 + pur_slot] = 1.0
    out[:, 2 * n + 5] = pur_level
    if ac_cell >= 0:
        out[:, 2 * n + 6 + ac_cell] = 1.0
    out[:, 3 * n + 6] = ac_level
    phase = 2.0 * np.pi * times / scenario.horizon
    out[:, 3 * n + 7] = np.sin(phase)
    out[:, 3 * n + 8] = np.cos(phase)
    out[:, 3 * n + 9 :] = base_norm
    return out


def node_frames(
    scenario: ScenarioConfig,
    base_norm: np.ndarray,
    sample_interval: float = 1.0,
    travel_time_per_cell: float = 5.0,
) -> np.ndarray:
    """Per-cell feature tensor [T, n, 12]: base concentration, cough/purifier/
    AC indicators and levels, cough direction, and the time encoding."""
    grid = scenario.grid
    n = grid.n_cells
    base_norm = np.asarray(base_norm, dtype=float)
    t_count = base_norm.shape[0]
    times = np.arange(t_count) * sample_interval
    cough_cell, cough_dir, pur_cell, pur_level, ac_cell, ac_level = _state_timeline(
        scenario, times, travel_time_per_cell
    )
    out = np.zeros((t_count, n, NODE_FEATURES))
    rows = np.arange(t_count)
    out[:, :, 0] = base_norm
    has_cough = cough_cell >= 0
    out[rows[has_cough], cough_cell[has_cough], 1] = 1.0
    for d in range(4):
        mask = cough_dir == d
        out[mask, :, 2 + d] = 1.0
    has_pur = pur_cell >= 0
    out[rows[has_pur], pur_cell[has_pur], 6] = 1.0
    out[:, :, 7] = pur_level[:, None]
    if ac_cell >= 0:
        out[:, ac_cell, 8] = 1.0
    out[:, :, 9] = ac_level
    phase = 2.0 * np.pi * times / scenario.horizon
    out[:, :, 10] = np.sin(phase)[:, None]
    out[:, :, 11] = np.cos(phase)[:, None]
    return out
