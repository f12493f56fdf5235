"""Rate-parameter estimation from observed trajectories.

The decision vector holds exchange rates (one shared value, one per
undirected pair, or one per directed pair), the exhaust rate at each vent
cell, and optionally the cough release rate.  Fitness is the mean squared
error between the simulated and observed concentrations over all cells and
timesteps; the whole population is integrated in one batched RK4 sweep per
generation.  Fitting follows the purifier-free regime: scenarios with any
purifier activity are rejected, and the filter terms are carried over from
the skeleton unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .domain import CompartmentParams, ScenarioConfig, Trajectory, fan_multiplier, validate_scenario
from .optimize import DeConfig, DeResult, de_minimize
from .simulate import SimOptions, _source_steps, rk4_step_operators

__all__ = ["FitError", "FitResult", "FitSpec", "fit_params", "params_from_vector", "vector_bounds"]

ALPHA_MODES = ("global", "symmetric", "directed")


class FitError(ValueError):
    """The observed data or fitting setup is unusable."""


@dataclass(frozen=True)
class FitSpec:
    """Decision-vector layout and default search bounds.

    ``alpha_mode`` picks the exchange-rate granularity: one shared rate
    (``global``), one per undirected pair tied symmetrically (``symmetric``,
    the default), or one per directed pair (``directed``, for vent-driven
    asymmetric flows).
    """

    alpha_mode: str = "symmetric"
    fit_exhaust: bool = True
    fit_source: bool = False
    alpha_bounds: tuple[float, float] = (0.0, 0.6)
    q_bounds: tuple[float, float] = (0.0, 0.6)
    source_bounds: tuple[float, float] = (0.0, 4000.0)

    def __post_init__(self) -> None:
        if self.alpha_mode not in ALPHA_MODES:
            raise FitError(f"alpha_mode must be one of {ALPHA_MODES}")


@dataclass
class FitResult:
    """Outcome of a fit: best parameters, final MSE fitness ((ug/m^3)^2),
    generations run, and the non-increasing per-generation best fitness."""

    best_params: CompartmentParams
    best_fitness: float
    generations_run: int
    fitness_history: list[float] = field(default_factory=list)


def _vector_layout(scenario: ScenarioConfig, spec: FitSpec):
    """(alpha columns per directed pair, vent cells, total dimension)."""
    grid = scenario.grid
    pairs = grid.ordered_pairs()
    if spec.alpha_mode == "global":
        columns = {pair: 0 for pair in pairs}
        n_alpha = 1
    elif spec.alpha_mode == "symmetric":
        undirected = sorted({(min(j, i), max(j, i)) for j, i in pairs})
        index = {u: k for k, u in enumerate(undirected)}
        columns = {(j, i): index[(min(j, i), max(j, i))] for j, i in pairs}
        n_alpha = len(undirected)
    else:
        columns = {pair: k for k, pair in enumerate(pairs)}
        n_alpha = len(pairs)
    vents = tuple(sorted(scenario.params.exhaust_rate)) if spec.fit_exhaust else ()
    dim = n_alpha + len(vents) + (1 if spec.fit_source else 0)
    return columns, n_alpha, vents, dim


def vector_bounds(scenario: ScenarioConfig, spec: FitSpec) -> tuple[tuple[float, float], ...]:
    """Default DE bounds matching the decision-vector layout."""
    _, n_alpha, vents, _ = _vector_layout(scenario, spec)
    bounds = [spec.alpha_bounds] * n_alpha
    bounds += [spec.q_bounds] * len(vents)
    if spec.fit_source:
        bounds.append(spec.source_bounds)
    return tuple(bounds)


def params_from_vector(vector, scenario: ScenarioConfig, spec: FitSpec) -> CompartmentParams:
    """Decode a decision vector into CompartmentParams (filter terms are
    copied from the scenario skeleton: they are unidentifiable without
    purifier data)."""
    vector = np.asarray(vector, dtype=float)
    columns, n_alpha, vents, dim = _vector_layout(scenario, spec)
    if vector.shape != (dim,):
        raise FitError(f"decision vector has shape {vector.shape}, expected ({dim},)")
    exchange = {pair: float(vector[col]) for pair, col in columns.items()}
    exhaust = dict(scenario.params.exhaust_rate)
    for k, cell in enumerate(vents):
        exhaust[cell] = float(vector[n_alpha + k])
    source = scenario.params.source_rate
    if spec.fit_source:
        source = float(vector[-1])
    return CompartmentParams(
        exchange_rates=exchange,
        exhaust_rate=exhaust,
        filter_efficiency=scenario.params.filter_efficiency,
        filter_airflow=scenario.params.filter_airflow,
        source_rate=source,
    )


def _batched_objective(observed: Trajectory, scenario: ScenarioConfig, spec: FitSpec, opts: SimOptions):
    """Vectorized fitness: MSE between the batched forward simulation and the
    observed samples, one value per decision-vector row."""
    grid = scenario.grid
    n = grid.n_cells
    columns, n_alpha, vents, dim = _vector_layout(scenario, spec)
    pairs = list(columns)
    i_idx = np.array([i for _j, i in pairs])
    j_idx = np.array([j for j, _i in pairs])
    col_idx = np.array([columns[p] for p in pairs])

    vent_mult = []
    for cell in vents:
        if scenario.ac.cell == cell:
            vent_mult.append(fan_multiplier(scenario.ac.fan) if scenario.ac.on else 0.0)
        else:
            vent_mult.append(1.0)
    vent_mult = np.asarray(vent_mult)
    vent_idx = np.asarray(vents, dtype=int)

    # fixed exhaust at cells not being fitted
    fixed_exhaust = np.zeros(n)
    for cell, q in scenario.params.exhaust_rate.items():
        if cell not in vents:
            mult = 1.0
            if scenario.ac.cell == cell:
                mult = fan_multiplier(scenario.ac.fan) if scenario.ac.on else 0.0
            fixed_exhaust[cell] += q * mult

    m = opts.steps_per_sample
    n_samples = observed.n_samples
    n_steps = (n_samples - 1) * m
    # unit-rate source profile when the release rate is fitted, else fixed
    source_scenario = scenario if not spec.fit_source else replace(
        scenario, params=replace(scenario.params, source_rate=1.0)
    )
    sources = _source_steps(source_scenario, opts.dt, n_steps)

    target = np.asarray(observed.values, dtype=float)

    def objective(batch: np.ndarray) -> np.ndarray:
        batch = np.atleast_2d(np.asarray(batch, dtype=float))
        b = batch.shape[0]
        a = np.zeros((b, n, n))
        alpha_vals = batch[:, col_idx]
        b_rows = np.arange(b)[:, None]
        np.add.at(a, (b_rows, i_idx[None, :], j_idx[None, :]), alpha_vals)
        np.add.at(a, (b_rows, j_idx[None, :], j_idx[None, :]), -alpha_vals)
        if len(vents):
            q_vals = batch[:, n_alpha : n_alpha + len(vents)] * vent_mult
            np.add.at(a, (b_rows, vent_idx[None, :], vent_idx[None, :]), -q_vals)
        diag = np.arange(n)
        a[:, diag, diag] -= fixed_exhaust

        p_op, g_op = rk4_step_operators(a, grid.cell_volume, opts.dt)
        scale = batch[:, -1][:, None] if spec.fit_source else None

        c = np.zeros((b, n))
        sse = np.zeros(b)
        sample = 0
        sse += ((c - target[0]) ** 2).sum(axis=1)
        for k in range(n_steps):
            c = np.einsum("bij,bj->bi", p_op, c)
            s = sources.get(k)
            if s is not None:
                inj = np.einsum("bij,j->bi", g_op, s)
                c += inj * scale if scale is not None else inj
            np.clip(c, 0.0, None, out=c)
            if (k + 1) % m == 0:
                sample += 1
                sse += ((c - target[sample]) ** 2).sum(axis=1)
        return sse / (n_samples * n)

    return objective, dim


def fit_params(
    observed: Trajectory,
    scenario: ScenarioConfig,
    config: DeConfig | None = None,
    spec: FitSpec = FitSpec(),
    sim_options: SimOptions | None = None,
) -> FitResult:
    """Fit rate parameters so the simulated scenario reproduces ``observed``.

    ``scenario`` acts as the skeleton: grid, cough events and AC state are
    taken as given, its exhaust map names the vent cells, and its filter
    terms pass through unfitted.  Scenarios with purifier activity are
    rejected (rates are learned from purifier-free data).  When ``config`` is
    omitted a default DE configuration with bounds from ``spec`` is used; a
    supplied config must have bounds matching the decision-vector layout.
    """
    validate_scenario(scenario)
    if any(action.fan != "off" for action in scenario.purifier_schedule):
        raise FitError("fitting requires purifier-free data; scenario schedules purifier activity")
    if sim_options is None:
        sim_options = SimOptions(dt=0.5, sample_interval=observed.sample_interval, travel_time_per_cell=0.0)
    if abs(observed.sample_interval - sim_options.sample_interval) > 1e-9:
        raise FitError(
            f"observed sample_interval {observed.sample_interval} does not match "
            f"simulator sampling {sim_options.sample_interval}"
        )
    if abs(observed.t0) > 1e-9:
        raise FitError("observed trajectory must start at t=0")
    if observed.n_cells != scenario.grid.n_cells:
        raise FitError("observed cell count does not match the grid")
    max_samples = int(np.floor(scenario.horizon / sim_options.sample_interval + 1e-9)) + 1
    if observed.n_samples > max_samples:
        raise FitError("observed trajectory extends past the scenario horizon")

    # every candidate in the box must be integrable at this step size
    degree = max((len(scenario.grid.neighbors(i)) for i in range(scenario.grid.n_cells)), default=0)
    worst_outflow = degree * spec.alpha_bounds[1] + (spec.q_bounds[1] if spec.fit_exhaust else max(
        list(scenario.params.exhaust_rate.values()) or [0.0]
    ))
    if worst_outflow > 0 and sim_options.dt > scenario.grid.cell_volume / worst_outflow:
        raise FitError(
            f"dt={sim_options.dt} exceeds the stability bound "
            f"{scenario.grid.cell_volume / worst_outflow:.3g}s for the search bounds; reduce dt"
        )

    objective, dim = _batched_objective(observed, scenario, spec, sim_options)
    if config is None:
        config = DeConfig(bounds=vector_bounds(scenario, spec), vectorized=True)
    else:
        if len(config.bounds) != dim:
            raise FitError(f"config.bounds has {len(config.bounds)} entries, expected {dim}")
        if not config.vectorized:
            config = replace(config, vectorized=True)

    result: DeResult = de_minimize(objective, config)
    return FitResult(
        best_params=params_from_vector(result.best_x, scenario, spec),
        best_fitness=result.best_fitness,
        generations_run=result.generations_run,
        fitness_history=result.fitness_history,
    )
