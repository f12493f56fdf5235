"""Purifier agent decision rule and closed-loop policy evaluation.

On each detected cough the agent forecasts, for every accessible cell, the
residence time that would result from running the purifier there, keeps the
cells within a tolerance band of the best forecast, and moves to the nearest
of those (Manhattan distance, row-major index as the final tie-break).
Between coughs the fan idles down: with a local PM sensor it switches off
below a threshold; without one it drops to the lowest setting once the time
since the last cough exceeds the running sum of estimated residence times.

Forecasts place the purifier instantaneously; the ground-truth rollout keeps
the travel delay, and both are logged.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .domain import CompartmentParams, CoughEvent, PurifierAction, ScenarioConfig, Trajectory
from .rtd import BaselineReturn, BaselineReturnOptions, mrt_baseline_return
from .simulate import SimOptions, simulate
from . import twin as twin_mod

__all__ = [
    "EpisodeResult",
    "PlacementDecision",
    "PolicyConfig",
    "PolicyError",
    "SimulatorForecaster",
    "TwinForecaster",
    "POLICIES",
    "decide",
    "idle_update",
    "run_episode",
]

POLICIES = ("optimal", "random-neighbor", "fixed-corner", "static-center")


class PolicyError(RuntimeError):
    """No feasible placement or a forecaster failure."""


class SimulatorForecaster:
    """Forecasts with the compartment simulator itself; ``params`` None uses
    each scenario's own rates (the ground-truth-twin limit)."""

    def __init__(self, params: CompartmentParams | None = None, sim_options: SimOptions | None = None):
        self.params = params
        self.sim_options = sim_options or SimOptions(travel_time_per_cell=0.0)

    def predict(self, scenario: ScenarioConfig) -> Trajectory:
        if self.params is not None:
            scenario = replace(scenario, params=self.params)
        return simulate(scenario, self.sim_options)


class TwinForecaster:
    """Forecasts with a trained hybrid twin."""

    def __init__(self, model):
        self.model = model

    def predict(self, scenario: ScenarioConfig) -> Trajectory:
        return twin_mod.predict(self.model, scenario)


@dataclass
class PolicyConfig:
    """Decision-rule settings: the digital twin used for forecasting, the
    tolerance band (seconds) around the best forecast residence time, the
    residence-time options, and idle-fan thresholds."""

    forecaster: SimulatorForecaster | TwinForecaster
    tolerance: float = 15.0
    rtd_opts: BaselineReturnOptions = field(default_factory=BaselineReturnOptions)
    idle_pm_threshold: float = 1.0
    fan_low_timeout: float = 0.0

    def __post_init__(self) -> None:
        if self.tolerance < 0 or self.idle_pm_threshold < 0 or self.fan_low_timeout < 0:
            raise PolicyError("tolerance and idle thresholds must be non-negative")


@dataclass
class PlacementDecision:
    """Outcome of one decision: chosen cell, the candidate set within the
    tolerance band, and the forecast residence time for every cell."""

    target_cell: int
    fan_action: str
    predicted_mrt: dict[int, float]
    candidate_set: tuple[int, ...]
    decision_time: float = 0.0


def decide(
    event: CoughEvent,
    agent_cell: int,
    scenario: ScenarioConfig,
    config: PolicyConfig,
    past_schedule: tuple[PurifierAction, ...] = (),
) -> PlacementDecision:
    """Choose the purifier cell for a detected cough.

    Every accessible cell is evaluated by forecasting the remainder of the
    scenario with the purifier placed there (instantaneously, at full fan)
    and computing the baseline-return residence time from the event.  The
    candidate set keeps cells within ``tolerance`` seconds of the minimum;
    the nearest candidate to ``agent_cell`` wins, ties broken by the lowest
    row-major index.
    """
    grid = scenario.grid
    cells = grid.accessible_cells()
    if not cells:
        raise PolicyError("no accessible cells to place the purifier")
    coughs_so_far = tuple(c for c in scenario.coughs if c.time <= event.time)
    predicted: dict[int, float] = {}
    for cell in cells:
        forecast_scenario = replace(
            scenario,
            coughs=coughs_so_far,
            purifier_schedule=past_schedule + (PurifierAction(time=event.time, cell=cell, fan="high"),),
        )
        try:
            forecast = config.forecaster.predict(forecast_scenario)
        except Exception as exc:
            raise PolicyError(f"twin forecast failed for cell {cell}: {exc}") from exc
        result = mrt_baseline_return(forecast, event.time, opts=config.rtd_opts)
        predicted[cell] = result.elapsed
    best = min(predicted.values())
    candidates = tuple(sorted(c for c, r in predicted.items() if r <= best + config.tolerance))
    target = min(candidates, key=lambda c: (grid.manhattan(agent_cell, c), c))
    return PlacementDecision(
        target_cell=target,
        fan_action="move+run",
        predicted_mrt=predicted,
        candidate_set=candidates,
        decision_time=event.time,
    )


def idle_update(
    time_since_last_cough: float,
    local_pm: float | None,
    config: PolicyConfig,
    past_residence_times=(),
) -> str:
    """Fan management between coughs: ``off`` / ``lower`` / ``hold``.

    Sensor-equipped mode (``local_pm`` given): off once the local reading
    falls below the threshold.  Sensorless: lower to the minimum setting once
    the elapsed time exceeds the summed residence-time estimates of past
    events (never sooner than ``fan_low_timeout``).
    """
    if time_since_last_cough < 0:
        raise PolicyError("time_since_last_cough must be non-negative")
    if local_pm is not None:
        return "off" if local_pm < config.idle_pm_threshold else "hold"
    budget = max(float(sum(past_residence_times)), config.fan_low_timeout)
    return "lower" if time_since_last_cough > budget else "hold"


@dataclass
class EpisodeResult:
    policy: str
    achieved_mrt: BaselineReturn
    trajectory: Trajectory
    schedule: tuple[PurifierAction, ...]
    decisions: list[PlacementDecision] = field(default_factory=list)


def run_episode(
    scenario: ScenarioConfig,
    policy: str,
    config: PolicyConfig,
    seed: int = 0,
    sim_options: SimOptions = SimOptions(),
    agent_start: int = 0,
) -> EpisodeResult:
    """Closed-loop evaluation of a placement policy on one scenario.

    The policy reacts to each cough in order; the ground-truth simulator then
    advances with the chosen placements (travel delay included).  The
    achieved mean residence time is the baseline-return time of the realized
    trajectory measured from the first cough.

    Policies: ``optimal`` (the decision rule above), ``random-neighbor``
    (seeded uniform choice among the cough cell's accessible neighbors),
    ``fixed-corner`` (cell 0 from t=0), ``static-center`` (center cell from
    t=0).
    """
    if policy not in POLICIES:
        raise PolicyError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if not scenario.coughs:
        raise PolicyError("scenario has no cough events")
    grid = scenario.grid
    rng = np.random.default_rng(seed)
    coughs = sorted(scenario.coughs, key=lambda c: c.time)
    decisions: list[PlacementDecision] = []
    schedule: list[PurifierAction] = []
    agent_cell = agent_start

    if policy == "fixed-corner":
        target = min(grid.accessible_cells())
        schedule.append(PurifierAction(time=0.0, cell=target, fan="high"))
    elif policy == "static-center":
        center = grid.index(grid.rows // 2, grid.cols // 2)
        if not grid.is_accessible(center):
            center = min(grid.accessible_cells(), key=lambda c: (grid.manhattan(c, center), c))
        schedule.append(PurifierAction(time=0.0, cell=center, fan="high"))
    else:
        for event in coughs:
            if policy == "optimal":
                decision = decide(event, agent_cell, scenario, config, past_schedule=tuple(schedule))
                target = decision.target_cell
                decisions.append(decision)
            else:  # random-neighbor
                neighbors = [c for c in grid.neighbors(event.cell) if grid.is_accessible(c)]
                pool = neighbors or [event.cell]
                target = int(rng.choice(pool))
            schedule.append(PurifierAction(time=event.time, cell=target, fan="high"))
            agent_cell = target

    realized = simulate(replace(scenario, purifier_schedule=tuple(schedule)), sim_options)
    achieved = mrt_baseline_return(realized, coughs[0].time, opts=config.rtd_opts)
    return EpisodeResult(
        policy=policy,
        achieved_mrt=achieved,
        trajectory=realized,
        schedule=tuple(schedule),
        decisions=decisions,
    )
