"""Island-based evolutionary search for one governing equation.

Each island holds a population of fitted equations.  One evolution round per
island: sample k in-context examples by softmax over their scores, ask the
proposer for b new equations, fit their constants on the fitting segment,
and append them.  Every ``n_refine`` rounds islands exchange random members
and prune their weaker half.  The search result is the complexity/score
Pareto front of the pooled islands, re-scored on the model-selection segment.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import expr as ex
from .dataset import ProblemInstance
from .numeric import fit_constants
from .proposer import PromptContext, ProposerConfig, TransportError, make_proposer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FittedEquation:
    expr: ex.Expr
    constants: tuple[float, ...]
    train_score: float
    complexity: int
    masked: str
    val_score: float | None = None

    @property
    def score_for_selection(self) -> float:
        return self.train_score if self.val_score is None else self.val_score


@dataclass
class Island:
    id: int
    members: list[FittedEquation] = field(default_factory=list)

    def best(self) -> FittedEquation:
        return max(self.members, key=lambda m: m.train_score)


@dataclass(frozen=True)
class SearchConfig:
    n_islands: int = 4
    n_iter: int = 200
    k: int = 8
    b: int = 3
    n_refine: int = 5
    n_mix: int = 2
    seed: int = 0
    proposer: ProposerConfig = field(default_factory=ProposerConfig)
    checkpoint_every: int = 10
    cap_per_front: int = 10
    cap_total: int = 10_000


@dataclass(frozen=True)
class TelemetryRow:
    iteration: int
    island: int
    best_score: float
    pareto_size: int


@dataclass
class SymRegResult:
    front: list[FittedEquation]
    telemetry: list[TelemetryRow]
    checkpoints: list[tuple[int, list[FittedEquation]]]


def score_equation(e: ex.Expr, constants: Sequence[float], X, y) -> float:
    """Fitness is negative mean squared error; any NaN prediction sinks the
    score to -inf."""
    pred = ex.evaluate(e, constants, X)
    if np.isnan(pred).any():
        return -math.inf
    with np.errstate(all="ignore"):
        err = pred - np.asarray(y, dtype=float)
        mse = float(np.mean(err * err))
    return -mse if math.isfinite(mse) else -math.inf


def fit_equation(e: ex.Expr, X, y, cache: dict | None = None) -> FittedEquation:
    """Fit constants on (X, y) and wrap the result.  The cache is keyed by
    masked form plus pinned inits; fits are content-deterministic so repeat
    proposals cost one lookup."""
    masked = ex.to_masked_string(e)
    key = (masked, ex.placeholder_inits(e))
    if cache is not None and key in cache:
        constants, score = cache[key]
    else:
        constants, _ = fit_constants(e, X, y)
        score = score_equation(e, constants, X, y)
        if cache is not None:
            cache[key] = (constants, score)
    return FittedEquation(
        expr=e,
        constants=constants,
        train_score=score,
        complexity=ex.complexity(e),
        masked=masked,
    )


def softmax_select(island: Island, k: int, rng: np.random.Generator) -> list[FittedEquation]:
    """Sample k members with probability proportional to exp(score - max),
    with replacement when the island is smaller than k, without otherwise.
    -inf scores get probability zero (uniform if every score is -inf).
    Returned worst-first (ascending train score).
    """
    members = island.members
    scores = np.array([m.train_score for m in members], dtype=float)
    finite = np.isfinite(scores)
    if finite.any():
        weights = np.where(finite, np.exp(scores - scores[finite].max()), 0.0)
    else:
        weights = np.ones(len(members))
    p = weights / weights.sum()

    if len(members) < k:
        idx = rng.choice(len(members), size=k, replace=True, p=p)
    else:
        positive = int((p > 0).sum())
        if positive >= k:
            idx = rng.choice(len(members), size=k, replace=False, p=p)
        else:
            # not enough scoreable members: take them all, fill uniformly
            # from the rest without replacement
            chosen = list(rng.permutation(np.flatnonzero(p > 0)))
            rest = rng.permutation(np.flatnonzero(p == 0))
            idx = np.array(chosen + list(rest[: k - len(chosen)]))
    picked = [members[int(i)] for i in idx]
    picked.sort(key=lambda m: m.train_score)
    return picked


def evolve_island(
    island: Island,
    X_fit,
    y_fit,
    cfg: SearchConfig,
    proposer,
    rng: np.random.Generator,
    cache: dict | None = None,
) -> Island:
    """One evolution round (in place): propose from k in-context examples,
    fit, score, append.  A transport failure or an empty proposal batch
    leaves the island unchanged."""
    selected = softmax_select(island, cfg.k, rng)
    ctx = PromptContext(
        dim=X_fit.shape[1],
        k=len(selected),
        b=cfg.b,
        examples=tuple(m.masked for m in selected),
    )
    try:
        proposals = proposer.propose(ctx, rng)
    except TransportError as err:
        logger.warning("island %d: proposal round skipped (%s)", island.id, err)
        return island
    for e in proposals:
        island.members.append(fit_equation(e, X_fit, y_fit, cache))
    return island


def _prune_keep(members: list[FittedEquation]) -> list[FittedEquation]:
    ranked = sorted(members, key=lambda m: -m.train_score)
    finite = sum(1 for m in members if math.isfinite(m.train_score))
    keep = min(len(members), max(2, min(-(-len(members) // 2), finite)))
    return ranked[:keep]


def refine(islands: list[Island], n_mix: int, rng: np.random.Generator) -> list[Island]:
    """Migration then pruning: copy n_mix uniformly chosen members from each
    island into one uniformly chosen other island, then each island keeps its
    top half by score (members stuck at -inf are only kept up to the floor of
    two)."""
    if len(islands) < 2:
        return islands
    snapshot = [list(island.members) for island in islands]
    for i, members in enumerate(snapshot):
        if not members:
            continue
        take = min(n_mix, len(members))
        picks = rng.choice(len(members), size=take, replace=False)
        others = [j for j in range(len(islands)) if j != i]
        target = others[int(rng.integers(len(others)))]
        for pick in picks:
            islands[target].members.append(members[int(pick)])
    for island in islands:
        island.members = _prune_keep(island.members)
    return islands


def _representatives(items: Sequence, complexity_of: Callable, score_of: Callable) -> list:
    """Non-dominated set under (complexity minimized, score maximized).

    Weak dominance: a member survives only if nothing at equal-or-lower
    complexity scores at least as well (other than itself); per complexity
    value only the best-scoring member is kept, earliest-first on exact ties.
    Result is sorted by ascending complexity.
    """
    by_complexity: dict[int, tuple[float, int]] = {}
    for index, item in enumerate(items):
        c = complexity_of(item)
        s = score_of(item)
        if c not in by_complexity or s > by_complexity[c][0]:
            by_complexity[c] = (s, index)
    front: list = []
    best = -math.inf
    first = True
    for c in sorted(by_complexity):
        s, index = by_complexity[c]
        if first or s > best:
            front.append(items[index])
            best = s
            first = False
    return front


def equation_pareto(members: Sequence[FittedEquation], X_val, y_val) -> list[FittedEquation]:
    """Re-score every member on the validation segment and return the
    complexity/score Pareto front, ascending in complexity."""
    rescored = [
        replace(m, val_score=score_equation(m.expr, m.constants, X_val, y_val))
        for m in members
    ]
    return _representatives(rescored, lambda m: m.complexity, lambda m: m.val_score)


def _island_front_size(island: Island) -> int:
    front = _representatives(island.members, lambda m: m.complexity, lambda m: m.train_score)
    return len(front)


def _island_rng(cfg: SearchConfig, var_index: int, island_id: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed & 0xFFFFFFFF, var_index, island_id])


def llm_symreg(
    instance: ProblemInstance,
    var_index: int,
    cfg: SearchConfig,
    proposer=None,
) -> SymRegResult:
    """Run the full island search for one state variable's governing equation.

    Returns the validation-scored Pareto front plus per-iteration telemetry
    and periodic front checkpoints (used downstream for convergence curves).
    A fully failed run still returns the seeded members' front.
    """
    assert instance.train.derivs is not None
    X_fit = instance.train.states[instance.fit_slice]
    y_fit = instance.train.derivs[instance.fit_slice, var_index]
    X_val = instance.train.states[instance.select_slice]
    y_val = instance.train.derivs[instance.select_slice, var_index]

    if proposer is None:
        proposer = make_proposer(cfg.proposer)
    cache: dict = {}

    islands: list[Island] = []
    rngs: list[np.random.Generator] = []
    for island_id in range(cfg.n_islands):
        rng = _island_rng(cfg, var_index, island_id)
        members = [
            fit_equation(ex.random_seed_expr(rng, instance.system.dim), X_fit, y_fit, cache)
            for _ in range(2)
        ]
        islands.append(Island(id=island_id, members=members))
        rngs.append(rng)
    refine_rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, var_index, 0x5EED])

    telemetry: list[TelemetryRow] = []
    checkpoints: list[tuple[int, list[FittedEquation]]] = []

    def pooled_front() -> list[FittedEquation]:
        pool = [m for island in islands for m in island.members]
        return equation_pareto(pool, X_val, y_val)

    for iteration in range(1, cfg.n_iter + 1):
        for island, rng in zip(islands, rngs):
            evolve_island(island, X_fit, y_fit, cfg, proposer, rng, cache)
        if cfg.n_refine > 0 and iteration % cfg.n_refine == 0:
            refine(islands, cfg.n_mix, refine_rng)
        for island in islands:
            telemetry.append(TelemetryRow(
                iteration=iteration,
                island=island.id,
                best_score=island.best().train_score,
                pareto_size=_island_front_size(island),
            ))
        due = cfg.checkpoint_every > 0 and iteration % cfg.checkpoint_every == 0
        if due or iteration == cfg.n_iter:
            checkpoints.append((iteration, pooled_front()))

    if checkpoints and checkpoints[-1][0] == cfg.n_iter and cfg.n_iter > 0:
        front = checkpoints[-1][1]
    else:
        front = pooled_front()
        checkpoints.append((cfg.n_iter, front))
    return SymRegResult(front=front, telemetry=telemetry, checkpoints=checkpoints)
