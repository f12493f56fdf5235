"""First-order MAML over episode tasks, plus k-shot adaptation.

The meta-update is strictly first-order: each episode clones the shared
weights, takes a few gradient steps on its support set, and the query-set
gradient evaluated at those adapted weights feeds the outer update directly
(no second derivatives anywhere).  The generic trainer works on prepared
(inputs, targets) arrays through a pluggable gradient function; the
twin-level wrappers build episodes from dataset records partitioned by an
environment factor (purifier row by default).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import CompartmentParams
from .nets import ModelWeights, init_weights, loss_and_grads, normalized_adjacency, sgd_step
from .simulate import SimOptions
from .twin import TrainConfig, TwinModel, TwinVariant, net_config_for, prepare_batch
from .features import fit_normalizer

__all__ = [
    "Episode",
    "MamlConfig",
    "MetaError",
    "adapt",
    "adapt_twin",
    "build_episodes",
    "fomaml",
    "meta_step",
    "meta_train",
]


class MetaError(RuntimeError):
    """Episode construction failed or meta-training diverged."""


@dataclass
class Episode:
    """One task: disjoint support and query example sets plus the factor that
    defines the task (e.g. which grid row holds the purifier)."""

    task_id: str
    support: list
    query: list
    task_descriptor: str = ""

    def __post_init__(self) -> None:
        if not self.support or not self.query:
            raise MetaError(f"task {self.task_id}: support and query must be non-empty")


@dataclass(frozen=True)
class MamlConfig:
    inner_lr: float = 1e-2
    outer_lr: float = 1e-3
    inner_steps: int = 5
    episodes_per_meta_batch: int = 3
    meta_iterations: int = 100
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.inner_lr, self.outer_lr) <= 0:
            raise MetaError("learning rates must be positive")
        if self.inner_steps < 0 or self.episodes_per_meta_batch < 1 or self.meta_iterations < 1:
            raise MetaError("invalid meta-training counts")


def adapt(weights: ModelWeights, support, inner_steps: int, inner_lr: float, grad_fn) -> ModelWeights:
    """Task adaptation: ``inner_steps`` gradient steps on the support data.

    An empty support (or zero steps) is the zero-shot case and returns the
    weights unchanged (an identical copy).  ``grad_fn(weights, data)`` must
    return (loss, gradients).
    """
    adapted = weights.copy()
    if support is None or inner_steps == 0:
        return adapted
    if isinstance(support, (list, tuple)) and len(support) == 0:
        return adapted
    for _ in range(inner_steps):
        loss, grads = grad_fn(adapted, support)
        if not np.isfinite(loss):
            raise MetaError(f"non-finite support loss {loss} during adaptation")
        adapted = sgd_step(adapted, grads, inner_lr)
    return adapted


def meta_step(weights: ModelWeights, episode_batch, config: MamlConfig, grad_fn):
    """One outer iteration: adapt per episode, average the query gradients at
    the adapted weights, and apply the outer update.  Returns the updated
    weights and the mean query loss."""
    grad_sum: dict[str, np.ndarray] | None = None
    losses = []
    for episode in episode_batch:
        adapted = adapt(weights, episode.support, config.inner_steps, config.inner_lr, grad_fn)
        query_loss, query_grads = grad_fn(adapted, episode.query)
        if not np.isfinite(query_loss):
            raise MetaError(f"non-finite query loss on task {episode.task_id}")
        losses.append(query_loss)
        if grad_sum is None:
            grad_sum = {k: v.copy() for k, v in query_grads.items()}
        else:
            for k, v in query_grads.items():
                grad_sum[k] += v
    scale = 1.0 / len(episode_batch)
    mean_grads = {k: v * scale for k, v in grad_sum.items()}
    return sgd_step(weights, mean_grads, config.outer_lr), float(np.mean(losses))


def fomaml(weights: ModelWeights, episodes: list[Episode], config: MamlConfig, grad_fn):
    """Meta-train over the episode pool; returns (meta_weights, loss history).

    Episode sampling order is deterministic from ``config.seed``.  Raises
    MetaError with diagnostics when a loss goes non-finite.
    """
    if len(episodes) < 2:
        raise MetaError(f"need at least 2 episodes to meta-train, got {len(episodes)}")
    rng = np.random.default_rng(config.seed)
    history = []
    for iteration in range(config.meta_iterations):
        size = min(config.episodes_per_meta_batch, len(episodes))
        picks = rng.choice(len(episodes), size=size, replace=False)
        batch = [episodes[int(k)] for k in picks]
        try:
            weights, mean_loss = meta_step(weights, batch, config, grad_fn)
        except MetaError as exc:
            raise MetaError(f"diverged at meta-iteration {iteration}: {exc}") from exc
        history.append(mean_loss)
    return weights, history


# ---------------------------------------------------------------------------
# Twin-level wrappers: episodes of (scenario, trajectory) records.

PARTITION_RULES = ("purifier_row", "ac_fan", "ac_cell", "furniture", "cough_cell")


def build_episodes(
    records,
    partition_rule: str = "purifier_row",
    support_size: int = 2,
    query_size: int = 1,
    seed: int = 0,
) -> list[Episode]:
    """Partition tagged dataset records into tasks by an environment factor
    and split each task into disjoint support/query sets.

    Records whose tag value is None (e.g. purifier-free trials under the
    purifier-row rule) form their own task.  A task needs at least 2 records
    so both sets are non-empty; smaller tasks are an error.
    """
    if partition_rule not in PARTITION_RULES:
        raise MetaError(f"unknown partition rule {partition_rule!r}; expected one of {PARTITION_RULES}")
    groups: dict[str, list] = {}
    for record in records:
        value = record.tags.get(partition_rule)
        key = f"{partition_rule}={value}"
        groups.setdefault(key, []).append(record)
    rng = np.random.default_rng(seed)
    episodes = []
    for key in sorted(groups):
        members = groups[key]
        if len(members) < 2:
            raise MetaError(f"task {key} has {len(members)} scenario(s); cannot split support/query")
        order = rng.permutation(len(members))
        q = max(1, min(query_size, len(members) - 1))
        s = min(support_size, len(members) - q)
        support = [members[int(i)] for i in order[:s]]
        query = [members[int(i)] for i in order[s : s + q]]
        episodes.append(Episode(task_id=key, support=support, query=query, task_descriptor=partition_rule))
    return episodes


@dataclass
class PreparedEpisode:
    episode: Episode
    support: tuple[np.ndarray, np.ndarray]
    query: tuple[np.ndarray, np.ndarray]


def _twin_grad_fn(adj):
    def grad_fn(weights: ModelWeights, data):
        inputs, targets = data
        return loss_and_grads(weights, inputs, targets, adj=adj)

    return grad_fn


def _prepare_episode(model: TwinModel, episode: Episode) -> Episode:
    support = prepare_batch(model, [r.pair for r in episode.support])
    query = prepare_batch(model, [r.pair for r in episode.query])
    return Episode(
        task_id=episode.task_id,
        support=support,
        query=query,
        task_descriptor=episode.task_descriptor,
    )


def meta_train(
    variant: TwinVariant,
    episodes: list[Episode],
    config: MamlConfig,
    base_params: CompartmentParams,
    train_config: TrainConfig = TrainConfig(),
    sim_options: SimOptions = SimOptions(),
    include_base: bool = True,
) -> tuple[TwinModel, list[float]]:
    """Meta-train a twin across environment tasks.

    Normalization statistics come from all episode trajectories (they are
    all meta-training data); the returned TwinModel carries the meta-learned
    initialization, ready for ``adapt_twin`` on unseen tasks.
    """
    all_trajectories = [r.trajectory for ep in episodes for r in ep.support + ep.query]
    normalizer = fit_normalizer(all_trajectories)
    grid = episodes[0].support[0].scenario.grid
    net_config = net_config_for(variant, grid, train_config)
    model = TwinModel(
        variant=variant,
        weights=init_weights(net_config, seed=train_config.seed),
        base_params=base_params,
        normalizer=normalizer,
        sim_options=sim_options,
        include_base=include_base,
    )
    prepared = [_prepare_episode(model, ep) for ep in episodes]
    adj = normalized_adjacency(grid) if variant.ml_module == "gc_lstm" else None
    weights, history = fomaml(model.weights, prepared, config, _twin_grad_fn(adj))
    model.weights = weights
    return model, history


def adapt_twin(
    model: TwinModel,
    support_records,
    inner_steps: int = 5,
    inner_lr: float = 1e-2,
) -> TwinModel:
    """k-shot adaptation of a meta-trained twin: gradient steps on the given
    support scenarios (k = len(support_records); k = 0 returns an identical
    model, the zero-shot case)."""
    adapted = model.weights.copy()
    if support_records:
        data = prepare_batch(model, [r.pair for r in support_records])
        adj = normalized_adjacency(support_records[0].scenario.grid) if model.variant.ml_module == "gc_lstm" else None
        adapted = adapt(model.weights, data, inner_steps, inner_lr, _twin_grad_fn(adj))
    return TwinModel(
        variant=model.variant,
        weights=adapted,
        base_params=model.base_params,
        normalizer=model.normalizer,
        sim_options=model.sim_options,
        include_base=model.include_base,
    )
