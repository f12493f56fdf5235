"""Synthetic experiment generation and sensor-CSV ingestion.

A ScenarioFamily fixes the room physics (true rates, AC placement, purifier
device) while individual trials vary the cough cell/direction and the static
purifier placement, mirroring a data-collection campaign.  Observations are
the simulated ground truth with multiplicative log-normal sensor noise.
Environment shifts for adaptation experiments perturb the family: added
furniture blocks cells and damps exchange across their boundaries, the AC
relocates, or its fan speed changes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import (
    AcConfig,
    CompartmentParams,
    CoughEvent,
    DIRECTIONS,
    GridLayout,
    PurifierAction,
    ScenarioConfig,
    Trajectory,
    grid_layout,
    uniform_exchange,
    validate_scenario,
)
from .simulate import SimOptions, simulate

__all__ = [
    "DatasetRecord",
    "IngestError",
    "IngestResult",
    "ScenarioFamily",
    "ac_location_shift",
    "ac_speed_shift",
    "apply_noise",
    "furniture_shift",
    "generate_dataset",
    "ingest_sensor_csv",
    "write_sensor_csv",
]

_ACTIVE_FANS = ("low", "med", "high")


class IngestError(ValueError):
    """Malformed sensor CSV input."""


@dataclass(frozen=True)
class ScenarioFamily:
    """True physics and trial protocol shared by a batch of experiments."""

    rows: int = 3
    cols: int = 3
    cell_volume: float = 2.0
    alpha: float = 0.15
    exhaust_q: float = 0.2
    ac_cell: int = 2
    ac_on: bool = True
    ac_fan: str = "high"
    gamma: float = 0.95
    omega: float = 0.35
    cough_time: float = 60.0
    cough_mass: float = 1000.0
    cough_duration: float = 1.0
    horizon: float = 480.0
    blocked: tuple[tuple[int, int], ...] = ()
    # undirected pair -> multiplier on the exchange rate (furniture damping)
    alpha_scale: tuple[tuple[tuple[int, int], float], ...] = ()

    def grid(self) -> GridLayout:
        return grid_layout(self.rows, self.cols, cell_volume=self.cell_volume, blocked=self.blocked)

    def params(self) -> CompartmentParams:
        grid = self.grid()
        exchange = uniform_exchange(grid, self.alpha)
        scale = {tuple(sorted(pair)): s for pair, s in self.alpha_scale}
        for j, i in list(exchange):
            key = (min(j, i), max(j, i))
            if key in scale:
                exchange[(j, i)] = exchange[(j, i)] * scale[key]
        return CompartmentParams(
            exchange_rates=exchange,
            exhaust_rate={self.ac_cell: self.exhaust_q},
            filter_efficiency=self.gamma,
            filter_airflow=self.omega,
        )

    def scenario(
        self,
        cough_cell: int,
        direction: str,
        purifier: tuple[int, str] | None = None,
        noise_seed: int = 0,
    ) -> ScenarioConfig:
        """One trial: a single cough, optionally a purifier stationed at a
        cell with a fixed fan speed for the whole trial."""
        schedule = ()
        if purifier is not None:
            cell, fan = purifier
            schedule = (PurifierAction(time=0.0, cell=cell, fan=fan),)
        return validate_scenario(
            ScenarioConfig(
                grid=self.grid(),
                params=self.params(),
                coughs=(
                    CoughEvent(
                        time=self.cough_time,
                        cell=cough_cell,
                        direction=direction,
                        emitted_mass=self.cough_mass,
                        duration=self.cough_duration,
                    ),
                ),
                purifier_schedule=schedule,
                ac=AcConfig(cell=self.ac_cell, on=self.ac_on, fan=self.ac_fan),
                horizon=self.horizon,
                noise_seed=noise_seed,
            )
        )


@dataclass
class DatasetRecord:
    """One experiment: its config, the noisy observation, the clean ground
    truth, and factor tags used for task partitioning."""

    scenario: ScenarioConfig
    trajectory: Trajectory
    clean: Trajectory
    tags: dict = field(default_factory=dict)

    @property
    def pair(self):
        return (self.scenario, self.trajectory)


def apply_noise(trajectory: Trajectory, sigma: float, rng: np.random.Generator) -> Trajectory:
    """Multiplicative log-normal sensor noise: c * exp(N(0, sigma)) per sample."""
    if sigma <= 0:
        return replace(trajectory, provenance="sensed")
    values = np.asarray(trajectory.values, dtype=float)
    noisy = values * np.exp(rng.normal(0.0, sigma, size=values.shape))
    return Trajectory(
        sample_interval=trajectory.sample_interval,
        values=tuple(tuple(float(v) for v in row) for row in noisy),
        provenance="sensed",
        t0=trajectory.t0,
    )


def generate_dataset(
    family: ScenarioFamily,
    n: int,
    noise: float = 0.0,
    seed: int = 0,
    purifier_mode: str = "varied",
    sim_options: SimOptions = SimOptions(),
) -> list[DatasetRecord]:
    """Simulate ``n`` trials with sampled cough cells/directions and purifier
    placements; deterministic from ``seed``.

    ``purifier_mode``: ``off`` runs every trial without the purifier (the
    rate-fitting regime), ``on`` stations it in every trial, ``varied``
    stations it in 80% of trials.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if purifier_mode not in ("off", "on", "varied"):
        raise ValueError(f"unknown purifier_mode {purifier_mode!r}")
    rng = np.random.default_rng(seed)
    grid = family.grid()
    cells = grid.accessible_cells()
    records = []
    for k in range(n):
        cough_cell = int(rng.choice(cells))
        direction = str(rng.choice(DIRECTIONS))
        purifier = None
        if purifier_mode == "on" or (purifier_mode == "varied" and rng.random() < 0.8):
            purifier = (int(rng.choice(cells)), str(rng.choice(_ACTIVE_FANS)))
        scenario = family.scenario(cough_cell, direction, purifier, noise_seed=seed * 100003 + k)
        clean = simulate(scenario, sim_options)
        noisy = apply_noise(clean, noise, rng)
        purifier_row = grid.rowcol(purifier[0])[0] if purifier else None
        records.append(
            DatasetRecord(
                scenario=scenario,
                trajectory=noisy,
                clean=clean,
                tags={
                    "cough_cell": cough_cell,
                    "cough_direction": direction,
                    "purifier_cell": purifier[0] if purifier else None,
                    "purifier_fan": purifier[1] if purifier else None,
                    "purifier_row": purifier_row,
                    "ac_cell": family.ac_cell,
                    "ac_fan": family.ac_fan,
                    "furniture": len(family.blocked),
                },
            )
        )
    return records


# ---------------------------------------------------------------------------
# Environment shifts for few-shot adaptation experiments.


def furniture_shift(family: ScenarioFamily, seed: int = 0, n_items: int = 2) -> ScenarioFamily:
    """Add furniture: block ``n_items`` cells (never the AC cell) and damp the
    exchange across their boundaries by 30-70%."""
    rng = np.random.default_rng(seed)
    grid = family.grid()
    candidates = [c for c in grid.accessible_cells() if c != family.ac_cell]
    chosen = rng.choice(candidates, size=min(n_items, len(candidates) - 1), replace=False)
    blocked = list(family.blocked)
    scales = dict(family.alpha_scale)
    for cell in chosen:
        blocked.append(grid.rowcol(int(cell)))
        for other in grid.neighbors(int(cell)):
            pair = (min(int(cell), other), max(int(cell), other))
            scales[pair] = (1.0 - rng.uniform(0.3, 0.7)) * scales.get(pair, 1.0)
    return replace(family, blocked=tuple(blocked), alpha_scale=tuple(sorted(scales.items())))


def ac_location_shift(family: ScenarioFamily, seed: int = 0) -> ScenarioFamily:
    """Relocate the AC (and its exhaust) to another accessible cell."""
    rng = np.random.default_rng(seed)
    grid = family.grid()
    options = [c for c in grid.accessible_cells() if c != family.ac_cell]
    return replace(family, ac_cell=int(rng.choice(options)))


def ac_speed_shift(family: ScenarioFamily, seed: int = 0) -> ScenarioFamily:
    """Switch the AC fan to a different speed."""
    rng = np.random.default_rng(seed)
    options = [fan for fan in _ACTIVE_FANS if fan != family.ac_fan]
    return replace(family, ac_fan=str(rng.choice(options)))


# ---------------------------------------------------------------------------
# Sensor CSV: one row per (timestamp, sensor); mass (ug/m^3) and number
# (#/cm^3) concentrations for the 1.0/2.5/4.0/10.0 micron bins.  Only pm2_5
# feeds the model; the other bins are carried through unchanged.

_CSV_FIELDS = [
    "timestamp_s",
    "sensor_id",
    "cell",
    "pm1_0",
    "pm2_5",
    "pm4_0",
    "pm10",
    "n1_0",
    "n2_5",
    "n4_0",
    "n10",
]

# synthetic export convention: fixed bin ratios relative to pm2_5 mass
_MASS_RATIOS = (0.55, 1.0, 1.15, 1.25)
_NUMBER_RATIOS = (2.0, 1.2, 0.3, 0.05)


@dataclass
class IngestResult:
    trajectory: Trajectory
    gaps: list[tuple[int, float, float]]  # (cell, gap start, gap end)


def write_sensor_csv(trajectory: Trajectory, path) -> None:
    """Export a trajectory as per-sensor rows (sensor s<cell> in cell)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_FIELDS)
        for t, row in zip(trajectory.times(), trajectory.values):
            for cell, value in enumerate(row):
                masses = [value * r for r in _MASS_RATIOS]
                numbers = [value * r for r in _NUMBER_RATIOS]
                writer.writerow([repr(float(t)), f"s{cell:02d}", cell] + [repr(float(v)) for v in masses + numbers])


def ingest_sensor_csv(
    path,
    cell_map: dict[str, int] | None = None,
    sample_interval: float = 1.0,
    gap_threshold: float = 10.0,
) -> IngestResult:
    """Read sensor rows into a Trajectory of pm2_5 mass per cell.

    Each sensor's samples are resampled to a uniform grid by linear
    interpolation over the overlapping time span.  ``cell_map`` maps
    sensor ids to cells when the CSV lacks a usable cell column; unknown
    sensors and non-monotone timestamps are errors.  Gaps longer than
    ``gap_threshold`` seconds are flagged, not filled.
    """
    per_cell: dict[int, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "timestamp_s" not in reader.fieldnames:
            raise IngestError(f"{path}: missing sensor CSV header")
        for row in reader:
            sensor = row.get("sensor_id", "")
            if cell_map is not None:
                if sensor not in cell_map:
                    raise IngestError(f"unknown sensor_id {sensor!r}")
                cell = cell_map[sensor]
            else:
                raw = row.get("cell", "")
                if raw in ("", None):
                    raise IngestError(f"row for sensor {sensor!r} lacks a cell and no cell_map given")
                cell = int(raw)
            per_cell.setdefault(cell, []).append((float(row["timestamp_s"]), float(row["pm2_5"])))
    if not per_cell:
        raise IngestError(f"{path}: no sensor rows")
    cells = sorted(per_cell)
    if cells != list(range(len(cells))):
        raise IngestError(f"cells {cells} do not cover 0..{len(cells) - 1}")

    gaps: list[tuple[int, float, float]] = []
    for cell, samples in per_cell.items():
        times = np.array([t for t, _ in samples])
        if np.any(np.diff(times) <= 0):
            raise IngestError(f"non-monotone timestamps for cell {cell}")
        for k in np.flatnonzero(np.diff(times) > gap_threshold):
            gaps.append((cell, float(times[k]), float(times[k + 1])))

    start = max(samples[0][0] for samples in per_cell.values())
    end = min(samples[-1][0] for samples in per_cell.values())
    if end <= start:
        raise IngestError("sensor time spans do not overlap")
    n_samples = int(np.floor((end - start) / sample_interval + 1e-9)) + 1
    grid_times = start + np.arange(n_samples) * sample_interval
    columns = []
    for cell in cells:
        times = np.array([t for t, _ in per_cell[cell]])
        values = np.array([v for _, v in per_cell[cell]])
        columns.append(np.interp(grid_times, times, values))
    matrix = np.stack(columns, axis=1)
    trajectory = Trajectory(
        sample_interval=sample_interval,
        values=tuple(tuple(float(v) for v in row) for row in matrix),
        provenance="sensed",
        t0=float(start),
    )
    return IngestResult(trajectory=trajectory, gaps=sorted(gaps))
