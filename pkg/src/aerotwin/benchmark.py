"""Benchmark suites: trains/evaluates the predictors and policies under
identical folds and seeds, checks the expected orderings, and writes reports
(human table to stdout, JSON + CSV + figures beside it).

Three suite kinds:

* ``prediction``: stale-rate compartment baseline vs hybrid twins under
  5-fold cross-validation; expects every hybrid to beat the stale baseline
  on mean residence time error, and the best one to halve it.
* ``placement``: closed-loop purifier policies on single- and multi-cough
  scenario sets; expects optimal < random-neighbor < fixed-corner mean MRT.
* ``adaptation``: meta-trained twin evaluated zero-shot vs 2-shot on
  furniture / AC-location / AC-fan-speed environment shifts; expects the
  2-shot MRTE to be no worse per shift.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import (
    ScenarioFamily,
    ac_location_shift,
    ac_speed_shift,
    furniture_shift,
    generate_dataset,
)
from .domain import CoughEvent, DIRECTIONS, MetricsRecord
from .fitting import FitSpec, fit_params, vector_bounds
from .meta import MamlConfig, adapt_twin, build_episodes, meta_train
from .optimize import DeConfig
from .placement import POLICIES, PolicyConfig, SimulatorForecaster, run_episode
from .rtd import BaselineReturnOptions
from .simulate import SimOptions, simulate_with_params
from .twin import (
    TrainConfig,
    TwinVariant,
    compute_metrics,
    mean_metrics,
    predict,
    train_twin,
)
from . import figures

__all__ = [
    "BenchmarkReport",
    "BenchmarkSuite",
    "OrderingResult",
    "ENTITIES",
    "fit_base_params",
    "run_benchmark",
]

SUITE_KINDS = ("prediction", "placement", "adaptation")

# model entities understood by the prediction suite
ENTITIES = (
    "compartment",
    "lstm",
    "comp-lstm",
    "comp-lstm-res",
    "comp-gc-lstm",
    "comp-gc-lstm-res",
)

_VARIANT_FOR = {
    "lstm": (TwinVariant("lstm", residual=False), False),
    "comp-lstm": (TwinVariant("lstm", residual=False), True),
    "comp-lstm-res": (TwinVariant("lstm", residual=True), True),
    "comp-gc-lstm": (TwinVariant("gc_lstm", residual=False), True),
    "comp-gc-lstm-res": (TwinVariant("gc_lstm", residual=True), True),
}


@dataclass(frozen=True)
class BenchmarkSuite:
    """A named comparison: what to run, over which seeds, against which
    expected orderings (fixed per kind)."""

    name: str
    kind: str
    seeds: tuple[int, ...] = (0, 1)
    n_scenarios: int = 20
    noise: float = 0.02
    entities: tuple[str, ...] = ("compartment", "comp-gc-lstm-res")
    adaptation_draws: int = 10
    family: ScenarioFamily = field(default_factory=ScenarioFamily)

    def __post_init__(self) -> None:
        if self.kind not in SUITE_KINDS:
            raise ValueError(f"unknown suite kind {self.kind!r}")
        if self.kind == "prediction" and len(self.entities) < 2:
            raise ValueError("a prediction suite compares at least 2 entities")
        unknown = set(self.entities) - set(ENTITIES)
        if unknown:
            raise ValueError(f"unknown entities {sorted(unknown)}")


@dataclass
class OrderingResult:
    name: str
    passed: bool
    detail: str


@dataclass
class BenchmarkReport:
    suite_name: str
    kind: str
    tables: dict
    orderings: list[OrderingResult]
    per_seed: dict

    def passed(self) -> bool:
        return all(o.passed for o in self.orderings)

    def as_dict(self) -> dict:
        return {
            "suite": self.suite_name,
            "kind": self.kind,
            "passed": self.passed(),
            "tables": self.tables,
            "orderings": [{"name": o.name, "passed": o.passed, "detail": o.detail} for o in self.orderings],
            "per_seed": self.per_seed,
        }


# tuned evaluation constants shared by the suites (kept here so that every
# entity sees identical budgets)
_SIM = SimOptions(dt=0.1, sample_interval=2.0)
_FIT_SIM = SimOptions(dt=0.5, sample_interval=2.0)
_TRAIN = TrainConfig(epochs=60, lr=0.2)
_RTD = BaselineReturnOptions()
_MAML = MamlConfig(inner_lr=0.02, outer_lr=0.05, inner_steps=5, episodes_per_meta_batch=3, meta_iterations=100)
_ADAPT_STEPS = 40
_ADAPT_LR = 0.05


def fit_base_params(family: ScenarioFamily, seed: int, noise: float, sim_options: SimOptions = _SIM):
    """The stale-rates protocol: fit exchange/exhaust/source on one
    purifier-free trial, with the filter term zeroed in the skeleton (its
    effect is never calibrated)."""
    cal = generate_dataset(family, 1, noise=noise, seed=seed, purifier_mode="off", sim_options=sim_options)
    skeleton = replace(
        cal[0].scenario,
        params=replace(cal[0].scenario.params, filter_airflow=0.0),
    )
    spec = FitSpec(alpha_mode="global", fit_exhaust=True, fit_source=True)
    config = DeConfig(
        bounds=vector_bounds(skeleton, spec),
        population_size=40,
        max_generations=400,
        stall_generations=60,
        seed=seed,
        vectorized=True,
    )
    fit = fit_params(
        cal[0].trajectory,
        skeleton,
        config=config,
        spec=spec,
        sim_options=replace(_FIT_SIM, sample_interval=sim_options.sample_interval),
    )
    return fit.best_params


def _evaluate_entity(entity: str, records, base_params, seed: int) -> MetricsRecord:
    pairs = [r.pair for r in records]
    if entity == "compartment":
        metrics = []
        for record in records:
            pred = simulate_with_params(record.scenario, base_params, _SIM)
            cough_time = record.scenario.coughs[0].time
            metrics.append(compute_metrics(pred, record.trajectory, cough_time, _RTD))
        return mean_metrics(metrics)
    variant, include_base = _VARIANT_FOR[entity]
    result = train_twin(
        variant,
        pairs,
        base_params,
        folds=5,
        train_config=replace(_TRAIN, seed=seed),
        sim_options=_SIM,
        rtd_opts=_RTD,
        include_base=include_base,
        train_final=False,
    )
    return result.mean


def _prediction_report(suite: BenchmarkSuite) -> BenchmarkReport:
    per_seed: dict[str, dict[str, dict]] = {}
    for seed in suite.seeds:
        base_params = fit_base_params(suite.family, seed * 7919 + 11, suite.noise)
        records = generate_dataset(
            suite.family, suite.n_scenarios, noise=suite.noise, seed=seed * 104729 + 1,
            purifier_mode="on", sim_options=_SIM,
        )
        row = {}
        for entity in suite.entities:
            row[entity] = _evaluate_entity(entity, records, base_params, seed).as_dict()
        per_seed[str(seed)] = row

    table = {}
    dispersion = {}
    for entity in suite.entities:
        table[entity] = {
            metric: float(np.mean([per_seed[str(s)][entity][metric] for s in suite.seeds]))
            for metric in ("mae", "mse", "pearson_rho", "mrte")
        }
        dispersion[entity] = {
            metric: float(np.std([per_seed[str(s)][entity][metric] for s in suite.seeds]))
            for metric in ("mae", "mse", "pearson_rho", "mrte")
        }

    orderings = []
    hybrids = [e for e in suite.entities if e not in ("compartment", "lstm")]
    if "compartment" in suite.entities and hybrids:
        stale = table["compartment"]["mrte"]
        for entity in hybrids:
            wins = sum(
                per_seed[str(s)][entity]["mrte"] < per_seed[str(s)]["compartment"]["mrte"]
                for s in suite.seeds
            )
            need = int(np.ceil(0.9 * len(suite.seeds)))
            orderings.append(
                OrderingResult(
                    name=f"mrte[{entity}] < mrte[compartment] per seed",
                    passed=wins >= need,
                    detail=f"{wins}/{len(suite.seeds)} seeds (need >= {need})",
                )
            )
        best = min(hybrids, key=lambda e: table[e]["mrte"])
        orderings.append(
            OrderingResult(
                name="best hybrid mrte < 50% of stale compartment",
                passed=table[best]["mrte"] < 0.5 * stale,
                detail=f"{best}: {table[best]['mrte']:.1f}s vs stale {stale:.1f}s",
            )
        )
    return BenchmarkReport(
        suite_name=suite.name,
        kind=suite.kind,
        tables={"metrics": table, "dispersion": dispersion},
        orderings=orderings,
        per_seed=per_seed,
    )


def _placement_scenarios(suite: BenchmarkSuite, rng: np.random.Generator, multi: bool):
    family = replace(suite.family, alpha=0.08)
    grid = family.grid()
    cells = grid.accessible_cells()
    out = []
    for _ in range(suite.n_scenarios):
        if multi:
            times = [60.0, 240.0, 420.0][: int(rng.integers(2, 4))]
            coughs = tuple(
                CoughEvent(time=t, cell=int(rng.choice(cells)), direction=str(rng.choice(DIRECTIONS)), emitted_mass=1000.0)
                for t in times
            )
            base = family.scenario(coughs[0].cell, coughs[0].direction)
            out.append(replace(base, coughs=coughs, horizon=720.0))
        else:
            cough = CoughEvent(time=60.0, cell=int(rng.choice(cells)), direction=str(rng.choice(DIRECTIONS)), emitted_mass=1000.0)
            out.append(replace(family.scenario(cough.cell, cough.direction), coughs=(cough,)))
    return out


def _placement_report(suite: BenchmarkSuite) -> BenchmarkReport:
    config = PolicyConfig(
        forecaster=SimulatorForecaster(sim_options=replace(_SIM, travel_time_per_cell=0.0)),
        rtd_opts=_RTD,
    )
    per_seed: dict[str, dict] = {}
    tables = {}
    orderings = []
    for label, multi in (("single_cough", False), ("multi_cough", True)):
        rng = np.random.default_rng(suite.seeds[0] * 65537 + (1 if multi else 0))
        scenarios = _placement_scenarios(suite, rng, multi)
        mrts: dict[str, list[float]] = {p: [] for p in POLICIES}
        for k, scenario in enumerate(scenarios):
            for policy in POLICIES:
                result = run_episode(scenario, policy, config, seed=1000 + k, sim_options=_SIM)
                mrts[policy].append(result.achieved_mrt.elapsed)
        means = {p: float(np.mean(v)) for p, v in mrts.items()}
        tables[label] = means
        per_seed[label] = {p: [float(x) for x in v] for p, v in mrts.items()}
        ok = means["optimal"] < means["random-neighbor"] < means["fixed-corner"]
        orderings.append(
            OrderingResult(
                name=f"{label}: optimal < random-neighbor < fixed-corner",
                passed=bool(ok),
                detail=" ".join(f"{p}={means[p]:.1f}s" for p in ("optimal", "random-neighbor", "fixed-corner")),
            )
        )
    return BenchmarkReport(
        suite_name=suite.name,
        kind=suite.kind,
        tables=tables,
        orderings=orderings,
        per_seed=per_seed,
    )


_SHIFTS = (
    ("furniture", furniture_shift),
    ("ac_location", ac_location_shift),
    ("ac_fan_speed", ac_speed_shift),
)


def _adaptation_report(suite: BenchmarkSuite) -> BenchmarkReport:
    seed = suite.seeds[0]
    family = suite.family
    base_params = fit_base_params(family, seed * 7919 + 3, suite.noise)
    records = generate_dataset(
        family, max(suite.n_scenarios, 18), noise=suite.noise, seed=seed + 1,
        purifier_mode="on", sim_options=_SIM,
    )
    episodes = build_episodes(records, "purifier_row", support_size=3, query_size=2, seed=seed)
    variant = TwinVariant("gc_lstm", residual=True)
    meta_model, _history = meta_train(
        variant, episodes, replace(_MAML, seed=seed), base_params,
        train_config=replace(_TRAIN, seed=seed), sim_options=_SIM,
    )

    def mean_mrte(model, recs):
        return mean_metrics(
            [compute_metrics(predict(model, r.scenario), r.trajectory, r.scenario.coughs[0].time, _RTD)
             for r in recs]
        ).mrte

    tables = {}
    per_seed: dict[str, dict] = {}
    orderings = []
    for shift_name, shifter in _SHIFTS:
        zero_mrte = []
        few_mrte = []
        for draw in range(suite.adaptation_draws):
            shifted = shifter(family, seed=100 + draw)
            recs = generate_dataset(shifted, 4, noise=suite.noise, seed=5000 + draw,
                                    purifier_mode="on", sim_options=_SIM)
            support, query = recs[:2], recs[2:]
            zero_mrte.append(mean_mrte(meta_model, query))
            adapted = adapt_twin(meta_model, support, inner_steps=_ADAPT_STEPS, inner_lr=_ADAPT_LR)
            few_mrte.append(mean_mrte(adapted, query))
        z, f = float(np.mean(zero_mrte)), float(np.mean(few_mrte))
        tables[shift_name] = {"zero_shot_mrte": z, "two_shot_mrte": f}
        per_seed[shift_name] = {"zero_shot": zero_mrte, "two_shot": few_mrte}
        orderings.append(
            OrderingResult(
                name=f"{shift_name}: mean 2-shot MRTE <= mean 0-shot MRTE",
                passed=f <= z,
                detail=f"2-shot {f:.1f}s vs 0-shot {z:.1f}s over {suite.adaptation_draws} draws",
            )
        )
    return BenchmarkReport(
        suite_name=suite.name,
        kind=suite.kind,
        tables=tables,
        orderings=orderings,
        per_seed=per_seed,
    )


def _write_report(report: BenchmarkReport, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if report.kind == "prediction":
        table = report.tables["metrics"]
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["entity", "mae", "mse", "pearson_rho", "mrte"])
            for entity, row in table.items():
                writer.writerow([entity, row["mae"], row["mse"], row["pearson_rho"], row["mrte"]])
        figures.plot_metric_bars(
            {e: row["mrte"] for e, row in table.items()},
            "MRTE [s]",
            out_dir / "mrte_by_entity.png",
            title="Mean residence time error by model",
        )
    elif report.kind == "placement":
        with open(out_dir / "mrt_by_policy.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["suite", "policy", "mean_mrt_s"])
            for label, means in report.tables.items():
                for policy, value in means.items():
                    writer.writerow([label, policy, value])
        for label in report.tables:
            figures.plot_policy_mrt(
                report.per_seed[label],
                out_dir / f"{label}_mrt.png",
                title=f"Achieved MRT by policy ({label.replace('_', ' ')})",
            )
    else:
        with open(out_dir / "adaptation.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["shift", "zero_shot_mrte_s", "two_shot_mrte_s"])
            for shift, row in report.tables.items():
                writer.writerow([shift, row["zero_shot_mrte"], row["two_shot_mrte"]])
        figures.plot_adaptation(
            {shift: (row["zero_shot_mrte"], row["two_shot_mrte"]) for shift, row in report.tables.items()},
            out_dir / "adaptation.png",
        )


def format_report(report: BenchmarkReport) -> str:
    lines = [f"== {report.suite_name} ({report.kind}) =="]
    if report.kind == "prediction":
        lines.append(f"{'entity':<18}{'MAE':>9}{'MSE':>10}{'rho':>8}{'MRTE':>9}")
        for entity, row in report.tables["metrics"].items():
            lines.append(
                f"{entity:<18}{row['mae']:>9.3f}{row['mse']:>10.3f}{row['pearson_rho']:>8.3f}{row['mrte']:>9.1f}"
            )
    elif report.kind == "placement":
        for label, means in report.tables.items():
            lines.append(label + ": " + "  ".join(f"{p}={v:.1f}s" for p, v in means.items()))
    else:
        for shift, row in report.tables.items():
            lines.append(f"{shift}: 0-shot {row['zero_shot_mrte']:.1f}s -> 2-shot {row['two_shot_mrte']:.1f}s")
    for ordering in report.orderings:
        lines.append(f"[{'PASS' if ordering.passed else 'FAIL'}] {ordering.name}  ({ordering.detail})")
    return "\n".join(lines)


def run_benchmark(suite: BenchmarkSuite, out_dir=None) -> BenchmarkReport:
    """Run a suite and, when ``out_dir`` is given, write report.json, the CSV
    table, and the figures there."""
    if suite.kind == "prediction":
        report = _prediction_report(suite)
    elif suite.kind == "placement":
        report = _placement_report(suite)
    else:
        report = _adaptation_report(suite)
    if out_dir is not None:
        _write_report(report, Path(out_dir))
    return report
