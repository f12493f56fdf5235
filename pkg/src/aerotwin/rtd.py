"""Residence-time analytics over concentration series.

Two mean-residence-time measures coexist: the first moment of the cumulative
residence-time distribution F(t) (tracer integral at the exhaust), and the
empirical time for concentrations to return to their pre-event baseline.
Prediction-error metrics downstream use the baseline-return measure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import Trajectory

__all__ = [
    "BaselineReturn",
    "BaselineReturnOptions",
    "RtdError",
    "RtdResult",
    "cumulative_rtd",
    "mrt_baseline_return",
    "mrt_moment",
    "rtd_report",
]


class RtdError(ValueError):
    """The series does not admit the requested residence-time analysis."""


@dataclass(frozen=True)
class BaselineReturnOptions:
    """Baseline-return detection: the pre-cough ``baseline_window`` seconds
    define the baseline; recovery is the first time the series stays within
    ``band`` (fraction of the post-cough excursion) of baseline for ``hold``
    consecutive seconds."""

    baseline_window: float = 60.0
    band: float = 0.05
    hold: float = 30.0

    def __post_init__(self) -> None:
        if self.baseline_window <= 0 or self.hold < 0 or not 0 < self.band < 1:
            raise RtdError("invalid baseline-return options")


@dataclass(frozen=True)
class BaselineReturn:
    """Elapsed seconds from the cough until sustained return to baseline.
    ``censored`` marks series that never return within the horizon (the
    elapsed value is then clipped to the remaining horizon)."""

    elapsed: float
    censored: bool
    baseline: float


@dataclass(frozen=True)
class RtdResult:
    f_times: tuple[float, ...]
    f_values: tuple[float, ...]
    mrt_moment: float
    mrt_baseline_return: float
    baseline: float
    censored: bool = False


def cumulative_rtd(times, concentration) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative RTD of an outlet tracer series by trapezoidal quadrature:
    F(t) = int_0^t C / int_0^inf C.  Returns (times, F) with F(t0) = 0."""
    t = np.asarray(times, dtype=float)
    c = np.asarray(concentration, dtype=float)
    if t.ndim != 1 or t.shape != c.shape or t.size < 2:
        raise RtdError("need matching 1-D times and concentrations with >= 2 samples")
    if np.any(np.diff(t) <= 0):
        raise RtdError("times must be strictly increasing")
    if c.min() < 0:
        raise RtdError("concentrations must be non-negative")
    increments = 0.5 * (c[1:] + c[:-1]) * np.diff(t)
    total = increments.sum()
    if total <= 0:
        raise RtdError("all-zero series has no residence-time distribution")
    f = np.concatenate([[0.0], np.cumsum(increments) / total])
    return t, f


def mrt_moment(times, f) -> float:
    """First moment of the RTD: integral of t dF, evaluated as the sum of
    interval-midpoint times weighted by the F increments."""
    t = np.asarray(times, dtype=float)
    fv = np.asarray(f, dtype=float)
    if t.shape != fv.shape or t.size < 2:
        raise RtdError("need matching times and F values with >= 2 samples")
    df = np.diff(fv)
    if np.any(df < -1e-12):
        raise RtdError("F must be non-decreasing")
    mid = 0.5 * (t[1:] + t[:-1])
    return float(np.sum(mid * df))


def _tracked_series(trajectory: Trajectory, cell: int | None) -> np.ndarray:
    values = np.asarray(trajectory.values, dtype=float)
    if cell is None:
        return values.mean(axis=1)
    if not 0 <= cell < trajectory.n_cells:
        raise RtdError(f"cell {cell} outside trajectory with {trajectory.n_cells} cells")
    return values[:, cell]


def mrt_baseline_return(
    trajectory: Trajectory,
    cough_time: float,
    opts: BaselineReturnOptions = BaselineReturnOptions(),
    cell: int | None = None,
) -> BaselineReturn:
    """Empirical mean residence time: elapsed seconds from ``cough_time``
    until the tracked concentration stays within the band of its pre-cough
    baseline for ``opts.hold`` consecutive seconds.

    The tracked series is the spatial mean, or a single cell's series when
    ``cell`` is given.  The baseline is the median across cells of per-cell
    means over the pre-cough window (the cell's own mean in per-cell mode);
    the band is ``opts.band`` times the post-cough excursion above baseline.
    """
    times = np.asarray(trajectory.times())
    if cough_time < times[0] or cough_time > times[-1]:
        raise RtdError(f"cough_time {cough_time} outside trajectory span")
    window = (times >= cough_time - opts.baseline_window) & (times < cough_time)
    if not window.any():
        raise RtdError("empty pre-cough window")
    values = np.asarray(trajectory.values, dtype=float)
    if cell is None:
        baseline = float(np.median(values[window].mean(axis=0)))
    else:
        baseline = float(values[window, cell].mean())
    series = _tracked_series(trajectory, cell)

    after = times >= cough_time
    peak = float(series[after].max())
    threshold = opts.band * max(peak - baseline, 0.0)
    within = np.abs(series - baseline) <= threshold

    horizon_elapsed = float(times[-1] - cough_time)
    start_idx = int(np.searchsorted(times, cough_time))
    hold_samples = int(np.ceil(opts.hold / trajectory.sample_interval - 1e-9))
    for k in range(start_idx, len(times)):
        end = k + hold_samples
        if end >= len(times):
            break  # cannot confirm a full hold before the horizon
        if within[k : end + 1].all():
            return BaselineReturn(elapsed=float(times[k] - cough_time), censored=False, baseline=baseline)
    return BaselineReturn(elapsed=horizon_elapsed, censored=True, baseline=baseline)


def rtd_report(
    trajectory: Trajectory,
    cough_time: float,
    outlet_cell: int | None = None,
    opts: BaselineReturnOptions = BaselineReturnOptions(),
) -> RtdResult:
    """Full residence-time summary of a trajectory: cumulative RTD and moment
    MRT of the outlet series (spatial mean when ``outlet_cell`` is None),
    plus the baseline-return MRT."""
    times = np.asarray(trajectory.times())
    series = _tracked_series(trajectory, outlet_cell)
    ft, fv = cumulative_rtd(times, series)
    moment = mrt_moment(ft, fv)
    ret = mrt_baseline_return(trajectory, cough_time, opts=opts, cell=outlet_cell)
    return RtdResult(
        f_times=tuple(float(t) for t in ft),
        f_values=tuple(float(v) for v in fv),
        mrt_moment=moment,
        mrt_baseline_return=ret.elapsed,
        baseline=ret.baseline,
        censored=ret.censored,
    )
