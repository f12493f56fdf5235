"""Fixed-step RK4 integration of the multi-compartment exchange model.

Each cell i of volume V obeys

    V * dC_i/dt = sum_{j in N_i} (alpha_{j,i} C_j - alpha_{i,j} C_i)
                  - gamma * omega * C_i * [i == purifier cell]
                  - Q_i * C_i + mdot_i

with omega and Q scaled by fan-level multipliers.  The system is linear with
piecewise-constant coefficients, so one RK4 step is applied as a precomputed
affine update ``c <- P c + G s`` per segment of constant purifier state.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .domain import (
    AcConfig,
    CompartmentParams,
    GridLayout,
    ScenarioConfig,
    Trajectory,
    fan_multiplier,
    validate_scenario,
)

__all__ = [
    "SimOptions",
    "SimulationError",
    "derivative",
    "purifier_timeline",
    "read_trajectory_csv",
    "rk4_step_operators",
    "simulate",
    "stability_dt_bound",
    "system_matrix",
    "write_trajectory_csv",
]

# Values this far below zero are treated as roundoff and clamped; anything
# lower indicates an unstable step and raises.
_NEGATIVE_TOL = 1e-12


class SimulationError(RuntimeError):
    """Integration failed (unstable step, non-finite state, bad inputs)."""


@dataclass(frozen=True)
class SimOptions:
    """Integrator settings: RK4 step ``dt``, output ``sample_interval`` (an
    integer multiple of ``dt``), and purifier travel time per grid cell
    (omega is 0 while the purifier is between cells)."""

    dt: float = 0.1
    sample_interval: float = 1.0
    travel_time_per_cell: float = 5.0

    def __post_init__(self) -> None:
        if not 0 < self.dt <= self.sample_interval:
            raise SimulationError("require 0 < dt <= sample_interval")
        steps = self.sample_interval / self.dt
        if abs(steps - round(steps)) > 1e-9 * steps:
            raise SimulationError("sample_interval must be an integer multiple of dt")
        if self.travel_time_per_cell < 0:
            raise SimulationError("travel_time_per_cell must be non-negative")

    @property
    def steps_per_sample(self) -> int:
        return int(round(self.sample_interval / self.dt))


def system_matrix(
    params: CompartmentParams,
    grid: GridLayout,
    purifier_cell: int | None = None,
    purifier_fan: str = "high",
    ac: AcConfig | None = None,
) -> np.ndarray:
    """Flow matrix A (m^3/s) such that V * dC/dt = A @ C + s.

    The AC fan multiplier applies to the exhaust at the AC's own cell (zero
    when the AC is off); exhaust configured at other cells acts as an
    always-on passive vent.
    """
    n = grid.n_cells
    a = np.zeros((n, n))
    for (j, i), alpha in params.exchange_rates.items():
        a[i, j] += alpha
        a[j, j] -= alpha
    for cell, q in params.exhaust_rate.items():
        q_eff = q
        if ac is not None and ac.cell == cell:
            q_eff = q * fan_multiplier(ac.fan) if ac.on else 0.0
        a[cell, cell] -= q_eff
    if purifier_cell is not None:
        a[purifier_cell, purifier_cell] -= (
            params.filter_efficiency * params.filter_airflow * fan_multiplier(purifier_fan)
        )
    return a


def derivative(
    state,
    params: CompartmentParams,
    grid: GridLayout,
    source=None,
    purifier_cell: int | None = None,
    purifier_fan: str = "high",
    ac: AcConfig | None = None,
) -> np.ndarray:
    """dC/dt (ug/m^3/s) for one state; ``source`` is the per-cell release
    rate in ug/s (defaults to zero)."""
    values = np.asarray(getattr(state, "values", state), dtype=float)
    if values.shape != (grid.n_cells,):
        raise SimulationError(f"state has shape {values.shape}, expected ({grid.n_cells},)")
    s = np.zeros(grid.n_cells) if source is None else np.asarray(source, dtype=float)
    if s.shape != values.shape:
        raise SimulationError("source length must match the number of cells")
    a = system_matrix(params, grid, purifier_cell, purifier_fan, ac)
    return (a @ values + s) / grid.cell_volume


def rk4_step_operators(a: np.ndarray, volume: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """(P, G) with ``c_next = P @ c + G @ s`` equal to one RK4 step of
    dC/dt = (A @ C + s)/V for constant A and s.  Works on batched ``a`` with
    shape (..., n, n)."""
    x = (dt / volume) * a
    x2 = x @ x
    x3 = x2 @ x
    x4 = x3 @ x
    eye = np.eye(a.shape[-1])
    p = eye + x + x2 / 2.0 + x3 / 6.0 + x4 / 24.0
    g = (dt / volume) * (eye + x / 2.0 + x2 / 6.0 + x3 / 24.0)
    return p, g


def stability_dt_bound(params: CompartmentParams, grid: GridLayout) -> float:
    """Largest step with guaranteed non-negative states from non-negative
    initial conditions: min_i V / (sum_j alpha_{i,j} + gamma*omega + Q_i),
    taking all fans at full speed."""
    n = grid.n_cells
    outflow = np.zeros(n)
    for (j, _i), alpha in params.exchange_rates.items():
        outflow[j] += alpha
    for cell, q in params.exhaust_rate.items():
        outflow[cell] += q
    outflow += params.filter_efficiency * params.filter_airflow
    peak = outflow.max()
    if peak <= 0:
        return np.inf
    return grid.cell_volume / peak


def purifier_timeline(
    schedule,
    grid: GridLayout,
    travel_time_per_cell: float,
) -> list[tuple[float, int | None, str]]:
    """Piecewise purifier state as (start_time, cell_or_None, fan) segments.

    The first placement is instantaneous; each relocation afterwards takes
    manhattan_distance * travel_time_per_cell seconds during which the
    purifier filters nothing (cell None).  An action issued mid-travel is
    measured from the previously committed destination.
    """
    segments: list[tuple[float, int | None, str]] = [(0.0, None, "off")]
    position: int | None = None
    available_at = 0.0
    for action in schedule:
        start = max(action.time, available_at)
        if position is None:
            segments.append((start, action.cell, action.fan))
            position = action.cell
            available_at = start
        elif action.cell == position:
            segments.append((start, position, action.fan))
            available_at = start
        else:
            travel = grid.manhattan(position, action.cell) * travel_time_per_cell
            segments.append((start, None, "off"))
            segments.append((start + travel, action.cell, action.fan))
            position = action.cell
            available_at = start + travel
    return segments


def _source_steps(scenario: ScenarioConfig, dt: float, n_steps: int) -> dict[int, np.ndarray]:
    """Per-step mean release vectors (ug/s), keyed by step index.

    Each cough is a boxcar over [time, time + duration]; the per-step rate is
    the boxcar's overlap fraction with the step, which makes the injected
    mass exact for any alignment.  Mass splits between the cough cell and the
    faced neighbor by ``facing_fraction``.
    """
    grid = scenario.grid
    out: dict[int, np.ndarray] = {}
    for cough in scenario.coughs:
        rate = scenario.params.source_rate
        if rate is None:
            rate = cough.release_rate
        dist = np.zeros(grid.n_cells)
        facing = grid.facing_cell(cough.cell, cough.direction)
        if facing is None:
            dist[cough.cell] = 1.0
        else:
            dist[cough.cell] = 1.0 - scenario.facing_fraction
            dist[facing] = scenario.facing_fraction
        first = int(np.floor(cough.time / dt))
        last = int(np.ceil((cough.time + cough.duration) / dt))
        for k in range(max(first, 0), min(last, n_steps)):
            lo = max(k * dt, cough.time)
            hi = min((k + 1) * dt, cough.time + cough.duration)
            frac = max(hi - lo, 0.0) / dt
            if frac > 0:
                vec = out.setdefault(k, np.zeros(grid.n_cells))
                vec += rate * frac * dist
    return out


def simulate(
    scenario: ScenarioConfig,
    opts: SimOptions = SimOptions(),
    initial=None,
) -> Trajectory:
    """Integrate ``scenario`` over [0, horizon] and sample every
    ``opts.sample_interval`` seconds (the initial state is the first sample).

    ``initial`` is the per-cell concentration at t=0 (ug/m^3, default zero).
    Raises SimulationError when the state goes non-finite or more negative
    than roundoff allows (step too large).
    """
    validate_scenario(scenario)
    grid = scenario.grid
    n = grid.n_cells
    if initial is None:
        c = np.zeros(n)
    else:
        c = np.asarray(initial, dtype=float).copy()
        if c.shape != (n,):
            raise SimulationError(f"initial state has shape {c.shape}, expected ({n},)")
        if c.min() < 0:
            raise SimulationError("initial concentrations must be non-negative")

    m = opts.steps_per_sample
    n_samples = int(np.floor(scenario.horizon / opts.sample_interval + 1e-9)) + 1
    n_steps = (n_samples - 1) * m

    timeline = purifier_timeline(scenario.purifier_schedule, grid, opts.travel_time_per_cell)
    # quantize purifier changes to step boundaries (take effect at the next one)
    boundaries = sorted({min(int(np.ceil(t / opts.dt - 1e-9)), n_steps) for t, _, _ in timeline})
    state_at = {int(np.ceil(t / opts.dt - 1e-9)): (cell, fan) for t, cell, fan in timeline}

    sources = _source_steps(scenario, opts.dt, n_steps)

    samples = [c.copy()]
    step = 0
    current = (None, "off")
    for b_idx, seg_start in enumerate(boundaries):
        if seg_start >= n_steps:
            break
        current = state_at.get(seg_start, current)
        seg_end = boundaries[b_idx + 1] if b_idx + 1 < len(boundaries) else n_steps
        seg_end = min(seg_end, n_steps)
        a = system_matrix(scenario.params, grid, current[0], current[1], scenario.ac)
        p_op, g_op = rk4_step_operators(a, grid.cell_volume, opts.dt)
        for k in range(seg_start, seg_end):
            s = sources.get(k)
            c = p_op @ c if s is None else p_op @ c + g_op @ s
            low = c.min()
            if low < 0.0:
                if low < -_NEGATIVE_TOL:
                    raise SimulationError(
                        f"concentration reached {low:.3e} at t={(k + 1) * opts.dt:.3f}s; "
                        "step too large for these rates"
                    )
                np.clip(c, 0.0, None, out=c)
            if (k + 1) % m == 0:
                if not np.isfinite(c).all():
                    raise SimulationError(f"non-finite state at t={(k + 1) * opts.dt:.3f}s")
                samples.append(c.copy())
        step = seg_end

    if step < n_steps:  # no purifier changes past the last boundary
        raise SimulationError("internal error: incomplete integration")

    return Trajectory(
        sample_interval=opts.sample_interval,
        values=tuple(tuple(float(v) for v in row) for row in samples),
        provenance="simulated",
    )


def simulate_with_params(scenario: ScenarioConfig, params: CompartmentParams, opts: SimOptions = SimOptions(), initial=None) -> Trajectory:
    """Simulate ``scenario`` under substitute rate parameters."""
    return simulate(replace(scenario, params=params), opts=opts, initial=initial)


# ---------------------------------------------------------------------------
# Trajectory CSV format: header "t_s,c_0,...,c_{n-1}", concentrations in ug/m^3.


def write_trajectory_csv(trajectory: Trajectory, path) -> None:
    n = trajectory.n_cells
    header = "t_s," + ",".join(f"c_{i}" for i in range(n))
    lines = [header]
    for t, row in zip(trajectory.times(), trajectory.values):
        lines.append(",".join([repr(float(t))] + [repr(float(v)) for v in row]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trajectory_csv(path, provenance: str = "sensed") -> Trajectory:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "t_s":
            raise SimulationError(f"{path}: expected trajectory CSV header starting with t_s")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    if len(rows) < 2:
        raise SimulationError(f"{path}: need at least two samples")
    times = np.array([float(r[0]) for r in rows])
    values = [tuple(float(v) for v in r[1:]) for r in rows]
    deltas = np.diff(times)
    interval = deltas[0]
    if interval <= 0 or not np.allclose(deltas, interval, rtol=1e-9, atol=1e-9):
        raise SimulationError(f"{path}: timestamps must increase uniformly")
    return Trajectory(
        sample_interval=float(interval),
        values=tuple(values),
        provenance=provenance,
        t0=float(times[0]),
    )
