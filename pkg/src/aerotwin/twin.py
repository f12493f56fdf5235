"""Hybrid digital-twin predictors: the compartment simulator composed with a
learned corrector (LSTM or GCN+LSTM), either predicting concentrations
directly or predicting the compartment model's error through a residual
connection.

The base simulation always runs with the frozen ``base_params`` fitted on
purifier-free data (never the scenario's own rates), so the learned module
must account for the purifier's effect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import (
    CompartmentParams,
    MetricsRecord,
    ScenarioConfig,
    Trajectory,
    params_from_dict,
    params_to_dict,
    validate_scenario,
)
from .features import (
    NODE_FEATURES,
    Normalizer,
    fit_normalizer,
    flat_feature_size,
    flat_frames,
    node_frames,
)
from .nets import (
    ModelWeights,
    NetConfig,
    forward,
    init_weights,
    load_weights,
    loss_and_grads,
    normalized_adjacency,
    save_weights,
    sgd_step,
)
from .rtd import BaselineReturnOptions, mrt_baseline_return
from .simulate import SimOptions, simulate

__all__ = [
    "TrainConfig",
    "TwinError",
    "TwinModel",
    "TwinTrainResult",
    "TwinVariant",
    "VARIANTS",
    "compute_metrics",
    "mean_metrics",
    "net_config_for",
    "predict",
    "prepare_batch",
    "train_twin",
]

ML_MODULES = ("lstm", "gc_lstm")


class TwinError(ValueError):
    """Invalid twin configuration or misaligned data."""


@dataclass(frozen=True)
class TwinVariant:
    """One hybrid configuration: compartment base plus an ML module, with or
    without the residual connection."""

    ml_module: str
    residual: bool

    def __post_init__(self) -> None:
        if self.ml_module not in ML_MODULES:
            raise TwinError(f"ml_module must be one of {ML_MODULES}")

    @property
    def name(self) -> str:
        stem = "comp-gc-lstm" if self.ml_module == "gc_lstm" else "comp-lstm"
        return stem + ("-res" if self.residual else "")


VARIANTS = (
    TwinVariant("lstm", residual=False),
    TwinVariant("lstm", residual=True),
    TwinVariant("gc_lstm", residual=False),
    TwinVariant("gc_lstm", residual=True),
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 0.2
    hidden_size: int = 32
    num_layers: int = 1
    gcn_sizes: tuple[int, ...] = (16, 16)
    seed: int = 0


@dataclass
class TwinModel:
    """A trained (or initialized) twin ready to forecast scenarios.

    ``include_base`` False turns the model into the pure sequence baseline:
    the compartment simulation is skipped and its feature block stays zero
    (only meaningful with ``residual=False``).
    """

    variant: TwinVariant
    weights: ModelWeights
    base_params: CompartmentParams
    normalizer: Normalizer
    sim_options: SimOptions = SimOptions()
    include_base: bool = True

    def __post_init__(self) -> None:
        if not self.include_base and self.variant.residual:
            raise TwinError("a residual variant needs the compartment base")


def net_config_for(variant: TwinVariant, grid, train_config: TrainConfig = TrainConfig()) -> NetConfig:
    if variant.ml_module == "gc_lstm":
        return NetConfig(
            input_size=NODE_FEATURES,
            hidden_size=train_config.hidden_size,
            num_layers=train_config.num_layers,
            n_outputs=grid.n_cells,
            gcn_sizes=train_config.gcn_sizes,
            n_nodes=grid.n_cells,
        )
    return NetConfig(
        input_size=flat_feature_size(grid),
        hidden_size=train_config.hidden_size,
        num_layers=train_config.num_layers,
        n_outputs=grid.n_cells,
    )


def _base_values(model: TwinModel, scenario: ScenarioConfig) -> np.ndarray:
    if model.include_base:
        base = simulate(replace(scenario, params=model.base_params), model.sim_options)
        return np.asarray(base.values, dtype=float)
    n_samples = int(np.floor(scenario.horizon / model.sim_options.sample_interval + 1e-9)) + 1
    return np.zeros((n_samples, scenario.grid.n_cells))


def _frames(model: TwinModel, scenario: ScenarioConfig, base_values: np.ndarray) -> np.ndarray:
    base_norm = model.normalizer.encode(base_values) if model.include_base else base_values
    builder = node_frames if model.variant.ml_module == "gc_lstm" else flat_frames
    return builder(
        scenario,
        base_norm,
        sample_interval=model.sim_options.sample_interval,
        travel_time_per_cell=model.sim_options.travel_time_per_cell,
    )


def predict(model: TwinModel, scenario: ScenarioConfig) -> Trajectory:
    """Forecast the scenario's concentration trajectory.

    Runs the compartment base with the frozen rates, feeds the feature frames
    through the learned module, and either returns its output directly or
    adds it to the base as a learned error correction.  Output is clipped at
    zero (concentrations are non-negative).
    """
    validate_scenario(scenario)
    base_values = _base_values(model, scenario)
    inputs = _frames(model, scenario, base_values)
    adj = normalized_adjacency(scenario.grid) if model.variant.ml_module == "gc_lstm" else None
    ys, _ = forward(model.weights, inputs, adj=adj)
    if model.variant.residual:
        values = base_values + model.normalizer.decode_delta(ys)
    else:
        values = model.normalizer.decode(ys)
    values = np.clip(values, 0.0, None)
    return Trajectory(
        sample_interval=model.sim_options.sample_interval,
        values=tuple(tuple(float(v) for v in row) for row in values),
        provenance="predicted",
    )


def prepare_batch(model: TwinModel, pairs):
    """Stack (scenario, observed) pairs into training arrays.

    Returns (inputs [B, T, ...], targets [B, T, n]) in normalized units;
    residual variants target the normalized error observed - base.  All
    scenarios must share the grid, horizon and sampling.
    """
    inputs = []
    targets = []
    for scenario, observed in pairs:
        base_values = _base_values(model, scenario)
        if observed.n_cells != scenario.grid.n_cells:
            raise TwinError("observed cell count does not match the scenario grid")
        obs = np.asarray(observed.values, dtype=float)
        if obs.shape != base_values.shape:
            raise TwinError(
                f"observed samples {obs.shape} do not align with the simulator grid {base_values.shape}"
            )
        inputs.append(_frames(model, scenario, base_values))
        if model.variant.residual:
            targets.append(model.normalizer.encode_delta(obs - base_values))
        else:
            targets.append(model.normalizer.encode(obs))
    return np.stack(inputs), np.stack(targets)


def fit_weights(
    weights: ModelWeights,
    inputs: np.ndarray,
    targets: np.ndarray,
    adj: np.ndarray | None,
    epochs: int,
    lr: float,
):
    """Full-batch gradient descent on the normalized MSE; returns the final
    weights and the per-epoch loss curve."""
    losses = []
    for _ in range(epochs):
        loss, grads = loss_and_grads(weights, inputs, targets, adj=adj)
        if not np.isfinite(loss):
            raise TwinError("training loss became non-finite; lower the learning rate")
        weights = sgd_step(weights, grads, lr)
        losses.append(loss)
    return weights, losses


def compute_metrics(
    predicted: Trajectory,
    observed: Trajectory,
    cough_time: float,
    rtd_opts: BaselineReturnOptions = BaselineReturnOptions(),
) -> MetricsRecord:
    """MAE/MSE/Pearson over all cells and timesteps (physical units) plus the
    mean residence time error: per-cell |MRT_pred - MRT_obs| from the
    baseline-return measure, censored cells contributing horizon-clipped
    values."""
    p = np.asarray(predicted.values, dtype=float)
    o = np.asarray(observed.values, dtype=float)
    if p.shape != o.shape or abs(predicted.sample_interval - observed.sample_interval) > 1e-9:
        raise TwinError("predicted and observed trajectories are misaligned")
    diff = p - o
    mae = float(np.abs(diff).mean())
    mse = float((diff * diff).mean())
    assert mae <= np.sqrt(mse) + 1e-12  # Jensen

    flat_p = p.ravel()
    flat_o = o.ravel()
    defined = flat_p.std() > 0 and flat_o.std() > 0
    rho = float(np.corrcoef(flat_p, flat_o)[0, 1]) if defined else 0.0
    rho = float(np.clip(rho, -1.0, 1.0))

    errors = []
    censored = 0
    for cell in range(predicted.n_cells):
        rp = mrt_baseline_return(predicted, cough_time, opts=rtd_opts, cell=cell)
        ro = mrt_baseline_return(observed, cough_time, opts=rtd_opts, cell=cell)
        censored += int(rp.censored or ro.censored)
        errors.append(abs(rp.elapsed - ro.elapsed))
    return MetricsRecord(
        mae=mae,
        mse=mse,
        pearson_rho=rho,
        mrte=float(np.mean(errors)),
        pearson_defined=defined,
        mrte_censored_cells=censored,
    )


def mean_metrics(records) -> MetricsRecord:
    records = list(records)
    if not records:
        raise TwinError("no metric records to average")
    return MetricsRecord(
        mae=float(np.mean([r.mae for r in records])),
        mse=float(np.mean([r.mse for r in records])),
        pearson_rho=float(np.mean([r.pearson_rho for r in records])),
        mrte=float(np.mean([r.mrte for r in records])),
        pearson_defined=all(r.pearson_defined for r in records),
        mrte_censored_cells=sum(r.mrte_censored_cells for r in records),
    )


@dataclass
class TwinTrainResult:
    model: TwinModel
    fold_metrics: list[MetricsRecord]
    mean: MetricsRecord
    loss_curves: list[list[float]] = field(default_factory=list)


def train_twin(
    variant: TwinVariant,
    dataset,
    base_params: CompartmentParams,
    folds: int = 5,
    train_config: TrainConfig = TrainConfig(),
    sim_options: SimOptions = SimOptions(),
    rtd_opts: BaselineReturnOptions = BaselineReturnOptions(),
    include_base: bool = True,
    train_final: bool = True,
) -> TwinTrainResult:
    """K-fold cross-validated training.

    ``dataset`` is a sequence of (scenario, observed trajectory) pairs, at
    least ``folds`` of them.  Per fold, normalization statistics come from
    the training split only; metrics are evaluated on the held-out split in
    physical units.  The returned model is retrained on the full dataset
    (with ``train_final`` False, the last fold's model is returned instead
    to save a training pass when only fold metrics matter).
    """
    pairs = [(s, t) for s, t in dataset]
    if len(pairs) < folds:
        raise TwinError(f"need at least {folds} scenarios for {folds}-fold training, got {len(pairs)}")
    grid = pairs[0][0].grid
    config = net_config_for(variant, grid, train_config)
    adj = normalized_adjacency(grid) if variant.ml_module == "gc_lstm" else None

    order = np.random.default_rng(train_config.seed).permutation(len(pairs))
    fold_metrics: list[MetricsRecord] = []
    loss_curves: list[list[float]] = []
    last_model = None
    for fold in range(folds):
        val_idx = set(order[fold::folds].tolist())
        train_pairs = [pairs[k] for k in range(len(pairs)) if k not in val_idx]
        val_pairs = [pairs[k] for k in sorted(val_idx)]
        normalizer = fit_normalizer([t for _, t in train_pairs])
        model = TwinModel(
            variant=variant,
            weights=init_weights(config, seed=train_config.seed),
            base_params=base_params,
            normalizer=normalizer,
            sim_options=sim_options,
            include_base=include_base,
        )
        inputs, targets = prepare_batch(model, train_pairs)
        weights, losses = fit_weights(
            model.weights, inputs, targets, adj, train_config.epochs, train_config.lr
        )
        model.weights = weights
        loss_curves.append(losses)
        last_model = model
        per_scenario = []
        for scenario, observed in val_pairs:
            pred = predict(model, scenario)
            cough_time = min(c.time for c in scenario.coughs) if scenario.coughs else 0.0
            per_scenario.append(compute_metrics(pred, observed, cough_time, rtd_opts))
        fold_metrics.append(mean_metrics(per_scenario))

    if not train_final:
        return TwinTrainResult(
            model=last_model,
            fold_metrics=fold_metrics,
            mean=mean_metrics(fold_metrics),
            loss_curves=loss_curves,
        )

    final_norm = fit_normalizer([t for _, t in pairs])
    final_model = TwinModel(
        variant=variant,
        weights=init_weights(config, seed=train_config.seed),
        base_params=base_params,
        normalizer=final_norm,
        sim_options=sim_options,
        include_base=include_base,
    )
    inputs, targets = prepare_batch(final_model, pairs)
    weights, losses = fit_weights(
        final_model.weights, inputs, targets, adj, train_config.epochs, train_config.lr
    )
    final_model.weights = weights
    loss_curves.append(losses)
    return TwinTrainResult(
        model=final_model,
        fold_metrics=fold_metrics,
        mean=mean_metrics(fold_metrics),
        loss_curves=loss_curves,
    )
