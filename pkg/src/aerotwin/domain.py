"""Shared domain types: room grid, physical rate parameters, trajectories,
cough events, scenario configs, and metric records.

Conventions used throughout the package:

* cells are indexed row-major from 0; ``(row, col)`` pairs appear only in
  configs and CLI output,
* row 0 is the north edge, so a cough facing ``N`` points toward row-1,
* all types are value objects -- treat them as immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

__all__ = [
    "AcConfig",
    "CompartmentParams",
    "ConcentrationField",
    "CoughEvent",
    "DIRECTIONS",
    "FAN_LEVELS",
    "GridLayout",
    "MetricsRecord",
    "PurifierAction",
    "ScenarioConfig",
    "ScenarioError",
    "Trajectory",
    "default_grid",
    "default_scenario",
    "fan_multiplier",
    "grid_layout",
    "load_scenario",
    "params_from_dict",
    "params_to_dict",
    "save_scenario",
    "scenario_from_dict",
    "scenario_replace",
    "scenario_to_dict",
    "uniform_exchange",
    "validate_params",
    "validate_scenario",
]

DIRECTIONS = ("N", "S", "E", "W")

# Fan-speed levels map to multipliers on the nominal purifier airflow (omega)
# and AC exhaust (Q).
FAN_LEVELS = {"off": 0.0, "low": 0.5, "med": 0.75, "high": 1.0}

# Offsets (drow, dcol) for the cell a cough of the given direction faces.
_FACING = {"N": (-1, 0), "S": (1, 0), "E": (0, 1), "W": (0, -1)}


class ScenarioError(ValueError):
    """A scenario or one of its components violates an invariant."""


def fan_multiplier(level: str) -> float:
    if level not in FAN_LEVELS:
        raise ScenarioError(f"unknown fan level {level!r}; expected one of {sorted(FAN_LEVELS)}")
    return FAN_LEVELS[level]


@dataclass(frozen=True)
class GridLayout:
    """Discretized room: ``rows x cols`` well-mixed cells of equal volume.

    ``adjacency`` holds unordered 4-neighbor pairs as ``(min, max)`` index
    tuples; diagonal pairs are rejected.  ``accessible`` marks cells where
    agents (cough source, purifier, AC) may be placed; air exchange is
    governed by ``adjacency`` alone, so blocked cells can still pass air.
    """

    rows: int
    cols: int
    cell_volume: float
    accessible: tuple[bool, ...]
    adjacency: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ScenarioError("grid must have at least one row and column")
        if not self.cell_volume > 0:
            raise ScenarioError("cell_volume must be positive")
        n = self.rows * self.cols
        if len(self.accessible) != n:
            raise ScenarioError("accessible mask length must equal rows*cols")
        seen = set()
        for pair in self.adjacency:
            a, b = pair
            if not (0 <= a < n and 0 <= b < n):
                raise ScenarioError(f"adjacency pair {pair} out of range")
            if a >= b:
                raise ScenarioError(f"adjacency pair {pair} must be stored as (min, max)")
            if not self._is_lattice_neighbor(a, b):
                raise ScenarioError(f"adjacency pair {pair} is not a 4-neighbor pair")
            if pair in seen:
                raise ScenarioError(f"duplicate adjacency pair {pair}")
            seen.add(pair)

    def _is_lattice_neighbor(self, a: int, b: int) -> bool:
        ra, ca = divmod(a, self.cols)
        rb, cb = divmod(b, self.cols)
        return abs(ra - rb) + abs(ca - cb) == 1

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ScenarioError(f"cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return row * self.cols + col

    def rowcol(self, cell: int) -> tuple[int, int]:
        if not 0 <= cell < self.n_cells:
            raise ScenarioError(f"cell index {cell} outside grid")
        return divmod(cell, self.cols)

    def are_adjacent(self, a: int, b: int) -> bool:
        key = (a, b) if a < b else (b, a)
        return key in set(self.adjacency)

    def neighbors(self, cell: int) -> tuple[int, ...]:
        out = []
        for a, b in self.adjacency:
            if a == cell:
                out.append(b)
            elif b == cell:
                out.append(a)
        return tuple(sorted(out))

    def manhattan(self, a: int, b: int) -> int:
        ra, ca = self.rowcol(a)
        rb, cb = self.rowcol(b)
        return abs(ra - rb) + abs(ca - cb)

    def is_accessible(self, cell: int) -> bool:
        return self.accessible[cell]

    def accessible_cells(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.n_cells) if self.accessible[i])

    def ordered_pairs(self) -> tuple[tuple[int, int], ...]:
        """All directed adjacent pairs (j, i), sorted for determinism."""
        out = []
        for a, b in self.adjacency:
            out.append((a, b))
            out.append((b, a))
        return tuple(sorted(out))

    def facing_cell(self, cell: int, direction: str) -> int | None:
        """Adjacent cell a cough at ``cell`` facing ``direction`` points at,
        or None when it would leave the grid or the edge is not adjacent."""
        if direction not in _FACING:
            raise ScenarioError(f"unknown direction {direction!r}")
        row, col = self.rowcol(cell)
        dr, dc = _FACING[direction]
        r2, c2 = row + dr, col + dc
        if not (0 <= r2 < self.rows and 0 <= c2 < self.cols):
            return None
        other = self.index(r2, c2)
        return other if self.are_adjacent(cell, other) else None


def grid_layout(
    rows: int,
    cols: int,
    cell_volume: float = 8.0,
    blocked: Iterable[tuple[int, int]] = (),
    removed_edges: Iterable[tuple[int, int]] = (),
) -> GridLayout:
    """Build a lattice grid with full 4-connectivity.

    ``blocked`` lists (row, col) cells inaccessible to agents.
    ``removed_edges`` lists unordered cell-index pairs to drop from the
    adjacency (e.g. a wall between two cells).
    """
    accessible = [True] * (rows * cols)
    for row, col in blocked:
        if not (0 <= row < rows and 0 <= col < cols):
            raise ScenarioError(f"blocked cell ({row}, {col}) outside grid")
        accessible[row * cols + col] = False
    removed = {(min(a, b), max(a, b)) for a, b in removed_edges}
    pairs = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                pairs.append((i, i + 1))
            if r + 1 < rows:
                pairs.append((i, i + cols))
    pairs = [p for p in pairs if p not in removed]
    return GridLayout(
        rows=rows,
        cols=cols,
        cell_volume=cell_volume,
        accessible=tuple(accessible),
        adjacency=tuple(sorted(pairs)),
    )


def default_grid(cell_volume: float = 8.0) -> GridLayout:
    """The 3x3 reference room with all cells accessible."""
    return grid_layout(3, 3, cell_volume=cell_volume)


@dataclass(frozen=True)
class CompartmentParams:
    """Rate parameters of the compartment exchange model.

    ``exchange_rates`` maps ordered adjacent pairs ``(j, i)`` to the
    volumetric flow alpha_{j,i} from j into i (m^3/s) and must cover exactly
    the grid's directed adjacent pairs.  ``exhaust_rate`` maps cells to the
    exhaust flow Q (m^3/s); only AC/vent cells should be nonzero.
    ``source_rate`` overrides the per-event cough release rate (ug/s) when
    set; when None each cough releases emitted_mass/duration.
    """

    exchange_rates: Mapping[tuple[int, int], float]
    exhaust_rate: Mapping[int, float]
    filter_efficiency: float
    filter_airflow: float
    source_rate: float | None = None

    def alpha(self, j: int, i: int) -> float:
        key = (j, i)
        if key not in self.exchange_rates:
            raise ScenarioError(f"exchange rate queried for non-adjacent pair {key}")
        return self.exchange_rates[key]

    def exhaust(self, cell: int) -> float:
        return self.exhaust_rate.get(cell, 0.0)


def uniform_exchange(grid: GridLayout, alpha: float) -> dict[tuple[int, int], float]:
    """One shared exchange rate on every directed adjacent pair."""
    return {pair: alpha for pair in grid.ordered_pairs()}


def validate_params(params: CompartmentParams, grid: GridLayout) -> CompartmentParams:
    expected = set(grid.ordered_pairs())
    got = set(params.exchange_rates)
    if got != expected:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise ScenarioError(
            f"exchange_rates must cover exactly the adjacent ordered pairs; "
            f"missing={missing[:4]} extra={extra[:4]}"
        )
    for pair, value in params.exchange_rates.items():
        if value < 0:
            raise ScenarioError(f"negative exchange rate at {pair}")
    for cell, q in params.exhaust_rate.items():
        if not 0 <= cell < grid.n_cells:
            raise ScenarioError(f"exhaust cell {cell} outside grid")
        if q < 0:
            raise ScenarioError(f"negative exhaust rate at cell {cell}")
    if not 0.0 <= params.filter_efficiency <= 1.0:
        raise ScenarioError("filter_efficiency out of range [0, 1]")
    if params.filter_airflow < 0:
        raise ScenarioError("negative filter_airflow")
    if params.source_rate is not None and params.source_rate < 0:
        raise ScenarioError("negative source_rate")
    return params


@dataclass(frozen=True)
class ConcentrationField:
    """Per-cell concentration snapshot (ug/m^3) at one instant."""

    values: tuple[float, ...]
    timestamp: float

    def __post_init__(self) -> None:
        if any(v < 0 for v in self.values):
            raise ScenarioError("concentrations must be non-negative")


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled per-cell concentration series.

    ``values[k][i]`` is the concentration of cell i at ``t0 + k*sample_interval``
    seconds.  ``provenance`` is one of ``simulated | sensed | predicted``.
    """

    sample_interval: float
    values: tuple[tuple[float, ...], ...]
    provenance: str = "simulated"
    t0: float = 0.0

    def __post_init__(self) -> None:
        if self.sample_interval <= 0:
            raise ScenarioError("sample_interval must be positive")
        if len(self.values) == 0:
            raise ScenarioError("trajectory must be non-empty")
        width = len(self.values[0])
        if any(len(row) != width for row in self.values):
            raise ScenarioError("ragged trajectory rows")
        if self.provenance not in ("simulated", "sensed", "predicted"):
            raise ScenarioError(f"unknown provenance {self.provenance!r}")

    @property
    def n_samples(self) -> int:
        return len(self.values)

    @property
    def n_cells(self) -> int:
        return len(self.values[0])

    @property
    def duration(self) -> float:
        return (self.n_samples - 1) * self.sample_interval

    def times(self) -> tuple[float, ...]:
        return tuple(self.t0 + k * self.sample_interval for k in range(self.n_samples))

    def field(self, k: int) -> ConcentrationField:
        return ConcentrationField(values=self.values[k], timestamp=self.t0 + k * self.sample_interval)


@dataclass(frozen=True)
class CoughEvent:
    """A timestamped cough: release of ``emitted_mass`` ug over ``duration``
    seconds at ``cell``, facing one of the cardinal directions."""

    time: float
    cell: int
    direction: str
    emitted_mass: float
    duration: float = 1.0

    def __post_init__(self) -> None:
        if self.direction not in DIRECTIONS:
            raise ScenarioError(f"unknown cough direction {self.direction!r}")
        if not self.duration > 0:
            raise ScenarioError("cough duration must be positive")
        if not self.emitted_mass > 0:
            raise ScenarioError("cough emitted_mass must be positive")
        if self.time < 0:
            raise ScenarioError("cough time must be non-negative")

    @property
    def release_rate(self) -> float:
        """Nominal release rate in ug/s."""
        return self.emitted_mass / self.duration


@dataclass(frozen=True)
class PurifierAction:
    """Schedule entry: from ``time`` on, run the purifier at ``cell`` with the
    given fan level (relocation incurs travel, see the simulator)."""

    time: float
    cell: int
    fan: str

    def __post_init__(self) -> None:
        if self.fan not in FAN_LEVELS:
            raise ScenarioError(f"unknown fan level {self.fan!r}")
        if self.time < 0:
            raise ScenarioError("purifier action time must be non-negative")


@dataclass(frozen=True)
class AcConfig:
    """Static AC/vent unit configuration for a scenario."""

    cell: int | None = None
    on: bool = False
    fan: str = "high"

    def __post_init__(self) -> None:
        if self.fan not in FAN_LEVELS:
            raise ScenarioError(f"unknown fan level {self.fan!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    """One experiment: room, rates, cough events, purifier schedule, AC state.

    ``facing_fraction`` is the share of each cough's mass deposited into the
    faced neighbor cell (the rest lands in the cough cell); when the faced
    neighbor is off-grid or disconnected, everything lands in the cough cell.
    """

    grid: GridLayout
    params: CompartmentParams
    coughs: tuple[CoughEvent, ...]
    purifier_schedule: tuple[PurifierAction, ...] = ()
    ac: AcConfig = AcConfig()
    horizon: float = 900.0
    noise_seed: int = 0
    facing_fraction: float = 0.4


def validate_scenario(scenario: ScenarioConfig) -> ScenarioConfig:
    """Return ``scenario`` unchanged iff every invariant holds; otherwise
    raise ScenarioError naming the first violated invariant."""
    grid = scenario.grid
    validate_params(scenario.params, grid)
    if not scenario.horizon > 0:
        raise ScenarioError("horizon must be positive")
    if not 0.0 <= scenario.facing_fraction <= 1.0:
        raise ScenarioError("facing_fraction out of range [0, 1]")
    for cough in scenario.coughs:
        if not 0 <= cough.cell < grid.n_cells:
            raise ScenarioError(f"cough cell {cough.cell} outside grid")
        if not grid.is_accessible(cough.cell):
            raise ScenarioError(f"inaccessible cell {cough.cell} for cough at t={cough.time}")
        if cough.time >= scenario.horizon:
            raise ScenarioError(f"cough at t={cough.time} is not before horizon {scenario.horizon}")
    for action in scenario.purifier_schedule:
        if not 0 <= action.cell < grid.n_cells:
            raise ScenarioError(f"purifier cell {action.cell} outside grid")
        if not grid.is_accessible(action.cell):
            raise ScenarioError(f"inaccessible cell {action.cell} for purifier at t={action.time}")
    times = [a.time for a in scenario.purifier_schedule]
    if any(t2 < t1 for t1, t2 in zip(times, times[1:])):
        raise ScenarioError("purifier_schedule must be sorted by time")
    if scenario.ac.cell is not None:
        if not 0 <= scenario.ac.cell < grid.n_cells:
            raise ScenarioError(f"AC cell {scenario.ac.cell} outside grid")
        if not grid.is_accessible(scenario.ac.cell):
            raise ScenarioError(f"inaccessible cell {scenario.ac.cell} for AC")
    return scenario


@dataclass(frozen=True)
class MetricsRecord:
    """Prediction-quality metrics in physical units.

    ``pearson_rho`` is 0.0 with ``pearson_defined=False`` when either series
    is constant.  ``mrte_censored_cells`` counts cells whose residence time
    never returned to baseline within the horizon (clipped values were used).
    """

    mae: float
    mse: float
    pearson_rho: float
    mrte: float
    pearson_defined: bool = True
    mrte_censored_cells: int = 0

    def __post_init__(self) -> None:
        if self.mae < 0 or self.mse < 0 or self.mrte < 0:
            raise ScenarioError("mae, mse and mrte must be non-negative")
        if not -1.0 <= self.pearson_rho <= 1.0:
            raise ScenarioError("pearson_rho out of range [-1, 1]")

    def as_dict(self) -> dict:
        return {
            "mae": self.mae,
            "mse": self.mse,
            "pearson_rho": self.pearson_rho,
            "mrte": self.mrte,
            "pearson_defined": self.pearson_defined,
            "mrte_censored_cells": self.mrte_censored_cells,
        }


# ---------------------------------------------------------------------------
# Scenario config file format (JSON). See docs/scenario_format.md.


def params_to_dict(params: CompartmentParams) -> dict:
    return {
        "exchange_rates": [[j, i, a] for (j, i), a in sorted(params.exchange_rates.items())],
        "exhaust_rate": {str(cell): q for cell, q in sorted(params.exhaust_rate.items())},
        "filter_efficiency": params.filter_efficiency,
        "filter_airflow": params.filter_airflow,
        "source_rate": params.source_rate,
    }


def params_from_dict(data: dict) -> CompartmentParams:
    return CompartmentParams(
        exchange_rates={(j, i): a for j, i, a in data["exchange_rates"]},
        exhaust_rate={int(cell): q for cell, q in data.get("exhaust_rate", {}).items()},
        filter_efficiency=data["filter_efficiency"],
        filter_airflow=data["filter_airflow"],
        source_rate=data.get("source_rate"),
    )


def scenario_to_dict(scenario: ScenarioConfig) -> dict:
    grid = scenario.grid
    return {
        "grid": {
            "rows": grid.rows,
            "cols": grid.cols,
            "cell_volume_m3": grid.cell_volume,
            "blocked": [list(grid.rowcol(i)) for i in range(grid.n_cells) if not grid.accessible[i]],
            "adjacency": [list(p) for p in grid.adjacency],
        },
        "params": params_to_dict(scenario.params),
        "coughs": [
            {
                "time_s": c.time,
                "cell": list(grid.rowcol(c.cell)),
                "direction": c.direction,
                "emitted_mass_ug": c.emitted_mass,
                "duration_s": c.duration,
            }
            for c in scenario.coughs
        ],
        "purifier_schedule": [
            {"time_s": a.time, "cell": list(grid.rowcol(a.cell)), "fan": a.fan}
            for a in scenario.purifier_schedule
        ],
        "ac": {
            "cell": list(grid.rowcol(scenario.ac.cell)) if scenario.ac.cell is not None else None,
            "on": scenario.ac.on,
            "fan": scenario.ac.fan,
        },
        "horizon_s": scenario.horizon,
        "noise_seed": scenario.noise_seed,
        "facing_fraction": scenario.facing_fraction,
    }


def scenario_from_dict(data: dict) -> ScenarioConfig:
    g = data["grid"]
    rows, cols = g["rows"], g["cols"]
    accessible = [True] * (rows * cols)
    for row, col in g.get("blocked", []):
        accessible[row * cols + col] = False
    if "adjacency" in g:
        adjacency = tuple(sorted((a, b) for a, b in g["adjacency"]))
    else:
        adjacency = grid_layout(rows, cols).adjacency
    grid = GridLayout(
        rows=rows,
        cols=cols,
        cell_volume=g["cell_volume_m3"],
        accessible=tuple(accessible),
        adjacency=adjacency,
    )
    params = params_from_dict(data["params"])
    coughs = tuple(
        CoughEvent(
            time=c["time_s"],
            cell=grid.index(*c["cell"]),
            direction=c["direction"],
            emitted_mass=c["emitted_mass_ug"],
            duration=c["duration_s"],
        )
        for c in data.get("coughs", [])
    )
    schedule = tuple(
        PurifierAction(time=a["time_s"], cell=grid.index(*a["cell"]), fan=a["fan"])
        for a in data.get("purifier_schedule", [])
    )
    ac_data = data.get("ac", {})
    ac = AcConfig(
        cell=grid.index(*ac_data["cell"]) if ac_data.get("cell") is not None else None,
        on=ac_data.get("on", False),
        fan=ac_data.get("fan", "high"),
    )
    return ScenarioConfig(
        grid=grid,
        params=params,
        coughs=coughs,
        purifier_schedule=schedule,
        ac=ac,
        horizon=data["horizon_s"],
        noise_seed=data.get("noise_seed", 0),
        facing_fraction=data.get("facing_fraction", 0.4),
    )


def save_scenario(scenario: ScenarioConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scenario(path) -> ScenarioConfig:
    with open(path) as fh:
        return validate_scenario(scenario_from_dict(json.load(fh)))


def default_scenario(
    alpha: float = 0.15,
    cell_volume: float = 2.0,
    exhaust_q: float = 0.2,
    ac_cell: int = 2,
    gamma: float = 0.9,
    omega: float = 0.25,
    cough: CoughEvent | None = None,
    horizon: float = 480.0,
) -> ScenarioConfig:
    """Small reference scenario: 3x3 room, one cough at the center, AC exhaust
    in the north-east corner, no purifier scheduled."""
    grid = default_grid(cell_volume=cell_volume)
    params = CompartmentParams(
        exchange_rates=uniform_exchange(grid, alpha),
        exhaust_rate={ac_cell: exhaust_q},
        filter_efficiency=gamma,
        filter_airflow=omega,
    )
    if cough is None:
        cough = CoughEvent(time=60.0, cell=4, direction="N", emitted_mass=1000.0)
    return validate_scenario(
        ScenarioConfig(
            grid=grid,
            params=params,
            coughs=(cough,),
            ac=AcConfig(cell=ac_cell, on=True, fan="high"),
            horizon=horizon,
        )
    )


# convenience re-export for callers building modified scenarios
scenario_replace = replace
