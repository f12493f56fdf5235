"""Global optimization by differential evolution (rand/1/bin).

Mutation uses three distinct random population members, x_r1 + F (x_r2 - x_r3);
binomial crossover forces at least one mutant dimension; selection is greedy,
so the per-generation best fitness never increases.  Out-of-bounds mutant
components are reflected back into the box.  Runs are fully reproducible from
the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["DeConfig", "DeResult", "OptimizeError", "de_minimize"]


class OptimizeError(RuntimeError):
    """Optimizer misconfiguration or a non-finite objective value."""


@dataclass(frozen=True)
class DeConfig:
    """Settings for rand/1/bin differential evolution.

    ``population_size`` defaults to 15x the problem dimension.  The run stops
    early when the best fitness improves by a relative factor below
    ``tolerance`` over the last ``stall_generations`` generations.  Set
    ``vectorized`` when the objective accepts a (pop, dim) matrix and returns
    a (pop,) vector; evaluation order is identical either way.
    """

    bounds: tuple[tuple[float, float], ...]
    population_size: int | None = None
    mutation_factor: float = 0.8
    crossover_rate: float = 0.9
    strategy: str = "rand/1/bin"
    max_generations: int = 300
    tolerance: float = 1e-8
    stall_generations: int = 30
    seed: int = 0
    vectorized: bool = False

    def __post_init__(self) -> None:
        if self.strategy != "rand/1/bin":
            raise OptimizeError(f"unsupported strategy {self.strategy!r}")
        if not self.bounds:
            raise OptimizeError("bounds must be non-empty")
        for lo, hi in self.bounds:
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise OptimizeError(f"bounds must be finite with lo < hi, got ({lo}, {hi})")
        if self.population_size is not None and self.population_size < 4:
            raise OptimizeError("population_size must be at least 4")
        if not 0 < self.mutation_factor <= 2:
            raise OptimizeError("mutation_factor must lie in (0, 2]")
        if not 0 <= self.crossover_rate <= 1:
            raise OptimizeError("crossover_rate must lie in [0, 1]")
        if self.max_generations < 0 or self.stall_generations < 1:
            raise OptimizeError("invalid generation limits")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def resolved_population(self) -> int:
        return self.population_size if self.population_size is not None else max(15 * self.dim, 4)


@dataclass
class DeResult:
    best_x: np.ndarray
    best_fitness: float
    generations_run: int
    fitness_history: list[float] = field(default_factory=list)


def _reflect_into_bounds(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Mirror out-of-bounds components back into [lo, hi] (exact reflection
    for any overshoot distance)."""
    width = hi - lo
    z = np.mod(x - lo, 2.0 * width)
    return lo + width - np.abs(z - width)


def _evaluate(objective, pop: np.ndarray, vectorized: bool) -> np.ndarray:
    if vectorized:
        fitness = np.asarray(objective(pop), dtype=float)
        if fitness.shape != (pop.shape[0],):
            raise OptimizeError("vectorized objective must return one value per row")
    else:
        fitness = np.array([float(objective(row)) for row in pop])
    if not np.isfinite(fitness).all():
        bad = int(np.flatnonzero(~np.isfinite(fitness))[0])
        raise OptimizeError(f"objective returned non-finite value at {pop[bad]}")
    return fitness


def de_minimize(objective, config: DeConfig) -> DeResult:
    """Minimize ``objective`` over the configured box.

    Returns the best vector, its fitness, the number of generations run, and
    the per-generation best-fitness history (index 0 is the initial
    population's best; the history is non-increasing and its last entry
    equals ``best_fitness``).
    """
    rng = np.random.default_rng(config.seed)
    lo = np.array([b[0] for b in config.bounds])
    hi = np.array([b[1] for b in config.bounds])
    dim = config.dim
    pop_size = config.resolved_population()
    factor = config.mutation_factor
    cross = config.crossover_rate

    pop = lo + (hi - lo) * rng.random((pop_size, dim))
    fitness = _evaluate(objective, pop, config.vectorized)
    history = [float(fitness.min())]

    generations = 0
    for _ in range(config.max_generations):
        # distinct parent indices r1, r2, r3 != target for every member
        choices = np.empty((pop_size, 3), dtype=int)
        for i in range(pop_size):
            picks = rng.permutation(pop_size)[:4]
            picks = picks[picks != i][:3]
            choices[i] = picks
        mutants = pop[choices[:, 0]] + factor * (pop[choices[:, 1]] - pop[choices[:, 2]])
        mutants = _reflect_into_bounds(mutants, lo, hi)

        mask = rng.random((pop_size, dim)) < cross
        forced = rng.integers(0, dim, size=pop_size)
        mask[np.arange(pop_size), forced] = True
        trials = np.where(mask, mutants, pop)

        trial_fitness = _evaluate(objective, trials, config.vectorized)
        improved = trial_fitness <= fitness
        pop[improved] = trials[improved]
        fitness[improved] = trial_fitness[improved]

        generations += 1
        history.append(float(fitness.min()))

        if len(history) > config.stall_generations:
            previous = history[-1 - config.stall_generations]
            current = history[-1]
            if (previous - current) <= config.tolerance * max(abs(previous), 1e-30):
                break

    best = int(np.argmin(fitness))
    return DeResult(
        best_x=pop[best].copy(),
        best_fitness=float(fitness[best]),
        generations_run=generations,
        fitness_history=history,
    )
