"""Differential-evolution one-pixel attack with optional saliency-constrained initialisation.

A candidate is a float vector ``[X, Y, c_0, ..., c_{C-1}]``. It lives in unbounded
real space; coordinates are rounded half-up and clamped, and colours clipped to
[0, 1], only when the candidate is applied to an image.
"""

import itertools
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import BudgetExceededError, EmptySusceptibilitySetError, NotCorrectlyClassifiedError
from .imaging import Image
from .model import forward, predict


@dataclass(frozen=True)
class AttackConfig:
    population_size: int = 100
    differential_weight: float = 0.5
    max_iterations: int = 100
    constrained: bool = False
    seed: int = 0
    # stop as soon as the best candidate flips the label
    early_stop: bool = True

    def __post_init__(self):
        if self.population_size < 4:
            raise ValueError("population_size must be >= 4")
        if not self.differential_weight >= 0:
            raise ValueError("differential_weight must be non-negative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(eq=False)
class Population:
    members: np.ndarray
    generation: int = 0
    fitness: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.members)

    @property
    def best_index(self):
        return int(np.argmin(self.fitness))

    @property
    def best(self):
        return self.members[self.best_index]

    @property
    def best_fitness(self):
        return float(self.fitness[self.best_index])


@dataclass(frozen=True)
class TraceEntry:
    generation: int
    best_fitness: float
    best: tuple


@dataclass(eq=False)
class AttackResult:
    success: bool
    iterations_used: int
    elapsed: float
    best: np.ndarray
    final_true_class_probability: float
    adversarial_label: Optional[int]
    initial_members: np.ndarray
    # rounded, clamped (x, y) the best candidate perturbs
    pixel: tuple = (0, 0)
    trace: List[TraceEntry] = field(default_factory=list)


def _image_array(image):
    return image.data if isinstance(image, Image) else np.asarray(image, dtype=np.float64)


def decode(candidates, height, width):
    """Map candidate rows to integer (x, y) and clipped colours."""
    c = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    xs = np.clip(np.floor(c[:, 0] + 0.5), 0, width - 1).astype(np.int64)
    ys = np.clip(np.floor(c[:, 1] + 0.5), 0, height - 1).astype(np.int64)
    colors = np.clip(c[:, 2:], 0.0, 1.0)
    return xs, ys, colors


def perturb_batch(image, candidates):
    """One perturbed copy of ``image`` per candidate row, shape (N, H, W, C)."""
    x = _image_array(image)
    h, w, ch = x.shape
    cands = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if cands.shape[1] != 2 + ch:
        raise ValueError(f"candidates must have {2 + ch} components for a {ch}-channel image")
    xs, ys, colors = decode(cands, h, w)
    out = np.repeat(x[None], len(cands), axis=0)
    out[np.arange(len(cands)), ys, xs, :] = colors
    return out


def apply_perturbation(image, candidate):
    """Copy of ``image`` with the single pixel named by ``candidate`` recoloured."""
    out = perturb_batch(image, candidate)[0]
    if isinstance(image, Image):
        return image.with_data(out)
    return out


def fitness_batch(model, image, true_label, candidates):
    """True-class probability for each candidate's perturbed image (lower is fitter)."""
    return forward(model, perturb_batch(image, candidates))[:, true_label]


def fitness(model, image, true_label, candidate):
    return float(fitness_batch(model, image, true_label, candidate)[0])


def init_population(image, config, constraint=None, rng=None):
    """Draw the generation-0 population.

    Coordinates are integer pixels, uniform over the image or, when
    ``config.constrained``, uniform over the members of ``constraint``.
    Colours are uniform in [0, 1] per channel in both modes.
    """
    rng = np.random.default_rng(config.seed) if rng is None else rng
    h, w, ch = _image_array(image).shape
    n = config.population_size
    if config.constrained:
        if constraint is None or len(constraint) == 0:
            raise EmptySusceptibilitySetError("constrained initialisation needs a non-empty susceptibility set")
        coords = np.asarray(list(constraint), dtype=np.float64).reshape(-1, 2)
        xy = coords[rng.integers(0, len(coords), size=n)]
    else:
        flat = rng.integers(0, h * w, size=n)
        xy = np.stack([flat % w, flat // w], axis=1).astype(np.float64)
    colors = rng.random((n, ch))
    return Population(np.hstack([xy, colors]), generation=0)


def evaluate(population, model, image, true_label):
    if population.fitness is None:
        population.fitness = fitness_batch(model, image, true_label, population.members)
    return population


def draw_donors(n, rng):
    """For each target i, three distinct indices different from i (uniform, ordered)."""
    keys = rng.random((n, n - 1))
    picks = np.argsort(keys, axis=1, kind="stable")[:, :3]
    targets = np.arange(n)[:, None]
    return picks + (picks >= targets)


def de_step(population, model, image, true_label, config, rng):
    """One rand/1 generation without crossover, with pairwise elitist selection.

    All random numbers for the generation are drawn before any evaluation.
    """
    population = evaluate(population, model, image, true_label)
    members = population.members
    donors = draw_donors(len(members), rng)
    a, b, c = (members[donors[:, k]] for k in range(3))
    children = a + config.differential_weight * (b - c)
    child_fit = fitness_batch(model, image, true_label, children)
    better = child_fit < population.fitness
    return Population(
        np.where(better[:, None], children, members),
        generation=population.generation + 1,
        fitness=np.where(better, child_fit, population.fitness),
    )


def run_attack(model, image, true_label, config=AttackConfig(), constraint=None, rng=None):
    """Attack one correctly classified image; see :class:`AttackResult`.

    Success is checked on the best member after each full generation. ``elapsed``
    covers initialisation and the DE loop only.
    """
    if predict(model, image) != true_label:
        raise NotCorrectlyClassifiedError("image not correctly classified")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    x = _image_array(image)

    start = time.perf_counter()
    pop = evaluate(init_population(x, config, constraint, rng), model, x, true_label)
    initial = pop.members.copy()
    trace = [TraceEntry(0, pop.best_fitness, tuple(pop.best.tolist()))]
    label = true_label
    for _ in range(config.max_iterations):
        pop = de_step(pop, model, x, true_label, config, rng)
        trace.append(TraceEntry(pop.generation, pop.best_fitness, tuple(pop.best.tolist())))
        if config.early_stop:
            label = predict(model, perturb_batch(x, pop.best)[0])
            if label != true_label:
                break
    if not config.early_stop:
        label = predict(model, perturb_batch(x, pop.best)[0])
    elapsed = time.perf_counter() - start

    success = label != true_label
    xs, ys, _ = decode(pop.best, *x.shape[:2])
    return AttackResult(
        success=success,
        iterations_used=pop.generation,
        elapsed=elapsed,
        best=pop.best.copy(),
        final_true_class_probability=pop.best_fitness,
        adversarial_label=int(label) if success else None,
        initial_members=initial,
        pixel=(int(xs[0]), int(ys[0])),
        trace=trace,
    )


def format_trace(trace):
    """Text trace: '# generation best_fitness X Y c...' header, then one line per generation."""
    if not trace:
        return ""
    ncolor = len(trace[0].best) - 2
    cols = ["generation", "best_fitness", "X", "Y"] + [f"c{i}" for i in range(ncolor)]
    lines = ["# " + " ".join(cols)]
    for t in trace:
        lines.append(" ".join([str(t.generation), repr(t.best_fitness)] + [repr(v) for v in t.best]))
    return "\n".join(lines) + "\n"


def oracle_evaluations(shape, color_grid):
    h, w, ch = shape
    return h * w * len(set(color_grid)) ** ch


def exhaustive_oracle(model, image, true_label, color_grid, budget=None):
    """Global minimum of fitness over every pixel and every grid colour combination.

    Ties go to the first pixel in row-major order, then the lexicographically
    smallest colour. Returns ``(candidate, fitness)``.
    """
    x = _image_array(image)
    h, w, ch = x.shape
    grid = sorted(set(float(v) for v in color_grid))
    required = oracle_evaluations(x.shape, grid)
    if budget is not None and required > budget:
        raise BudgetExceededError(required, budget)
    colors = np.array(list(itertools.product(grid, repeat=ch)), dtype=np.float64)
    best_fit, best = np.inf, None
    for y in range(h):
        for xx in range(w):
            cands = np.hstack([np.tile([xx, y], (len(colors), 1)).astype(np.float64), colors])
            fit = fitness_batch(model, x, true_label, cands)
            i = int(np.argmin(fit))
            if fit[i] < best_fit:
                best_fit, best = float(fit[i]), cands[i]
    return best, best_fit
