"""System construction: combine per-variable equation fronts into candidate
systems, rank them by trajectory fitness, and pick the knee of the
complexity/fitness front.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import DT, ProblemInstance, T_END
from .evolve import (
    FittedEquation,
    SearchConfig,
    SymRegResult,
    _representatives,
    llm_symreg,
)
from .expr import render_with_constants
from .numeric import Divergence, integrate
from .proposer import make_proposer

KNEE_THRESHOLD = 0.1


@dataclass
class SystemCandidate:
    """One equation per state variable, with total node count and (once
    evaluated) the negative MSE of its integrated trajectory."""

    equations: tuple[FittedEquation, ...]
    total_complexity: int
    traj_fitness: float | None = None

    def rendered(self) -> list[str]:
        return [render_with_constants(fe.expr, fe.constants) for fe in self.equations]


def _selection_score(fe: FittedEquation) -> float:
    return fe.score_for_selection


def _truncate_front(front: Sequence[FittedEquation], cap: int) -> list[FittedEquation]:
    """Keep at most ``cap`` members: always the simplest and the best-scoring,
    the rest filled best-score-first.  Preserves ascending complexity order."""
    if len(front) <= cap:
        return list(front)
    by_score = sorted(range(len(front)), key=lambda i: (-_selection_score(front[i]), i))
    chosen = {0}  # fronts arrive sorted by complexity, so index 0 is simplest
    for i in by_score:
        if len(chosen) >= cap:
            break
        chosen.add(i)
    return [front[i] for i in sorted(chosen)]


def cartesian_candidates(
    fronts: Sequence[Sequence[FittedEquation]],
    cap_per_front: int = 10,
    cap_total: int = 10_000,
) -> list[SystemCandidate]:
    """Enumerate the cross product of the per-variable fronts, best summed
    validation score first, up to ``cap_total`` candidates."""
    truncated = [_truncate_front(front, cap_per_front) for front in fronts]
    ranked = [sorted(front, key=lambda fe: -_selection_score(fe)) for front in truncated]
    sizes = [len(front) for front in ranked]
    if any(size == 0 for size in sizes):
        raise ValueError("every front must be nonempty")

    def total(idx: tuple[int, ...]) -> float:
        return sum(_selection_score(ranked[d][i]) for d, i in enumerate(idx))

    start = tuple([0] * len(ranked))
    heap: list[tuple[float, tuple[int, ...]]] = [(-total(start), start)]
    seen = {start}
    out: list[SystemCandidate] = []
    while heap and len(out) < cap_total:
        _, idx = heapq.heappop(heap)
        equations = tuple(ranked[d][i] for d, i in enumerate(idx))
        out.append(SystemCandidate(
            equations=equations,
            total_complexity=sum(fe.complexity for fe in equations),
        ))
        for d in range(len(idx)):
            if idx[d] + 1 < sizes[d]:
                nxt = idx[:d] + (idx[d] + 1,) + idx[d + 1:]
                if nxt not in seen:
                    seen.add(nxt)
                    heapq.heappush(heap, (-total(nxt), nxt))
    return out


def trajectory_fitness(cand: SystemCandidate, instance: ProblemInstance) -> float:
    """Negative MSE between the candidate's integrated trajectory (from the
    train initial value) and the observed train trajectory, over all
    dimensions and samples; -inf on divergence."""
    result = integrate(
        [(fe.expr, fe.constants) for fe in cand.equations],
        instance.system.train_iv,
        T_END,
        DT,
    )
    if isinstance(result, Divergence):
        return -math.inf
    with np.errstate(all="ignore"):
        err = result.states - instance.train.states
        mse = float(np.mean(err * err))
    return -mse if math.isfinite(mse) else -math.inf


def system_pareto(cands: Sequence[SystemCandidate]) -> list[SystemCandidate]:
    """Non-dominated candidates under (total complexity minimized, trajectory
    fitness maximized), ascending in complexity; the equation-level dominance
    rule lifted to systems."""
    return _representatives(
        list(cands),
        lambda c: c.total_complexity,
        lambda c: c.traj_fitness,
    )


def select_knee(front: Sequence[SystemCandidate], h: float = KNEE_THRESHOLD) -> SystemCandidate:
    """Pick the front member with the largest marginal fitness gain per unit
    of complexity, restricted to candidates whose error is within 1/h of the
    best error on the front.  Degenerate fronts (singletons, no feasible
    successor, or no strictly positive gain) fall back to the best-fitness
    member, ties toward lower complexity.
    """
    if not front:
        raise ValueError("empty system front")
    if len(front) == 1:
        return front[0]

    fitness = [c.traj_fitness if c.traj_fitness is not None else -math.inf for c in front]
    errors = [-t for t in fitness]
    best_error = min(errors)
    bound = best_error / h if math.isfinite(best_error) else math.inf
    feasible = [i for i in range(len(front)) if errors[i] <= bound]

    def best_fitness_member() -> SystemCandidate:
        order = sorted(range(len(front)), key=lambda i: (-fitness[i], front[i].total_complexity))
        return front[order[0]]

    candidates = [i for i in feasible if i >= 1]
    if not candidates:
        return best_fitness_member()

    def gain(i: int) -> float:
        dc = front[i].total_complexity - front[i - 1].total_complexity
        dt = fitness[i] - fitness[i - 1]
        if dt != dt:  # both ends at -inf
            return -math.inf
        if dc <= 0:
            return math.inf if dt > 0 else -math.inf
        if math.isinf(dt):
            return dt
        return dt / dc

    gains = {i: gain(i) for i in candidates}
    best_gain = max(gains.values())
    if best_gain > 0:
        winner = min(i for i in candidates if gains[i] == best_gain)
        return front[winner]
    return best_fitness_member()


@dataclass
class DiscoveryResult:
    selected: SystemCandidate
    system_front: list[SystemCandidate]
    pool_size: int
    variable_results: list[SymRegResult] = field(default_factory=list)


def build_system_front(
    fronts: Sequence[Sequence[FittedEquation]],
    instance: ProblemInstance,
    cfg: SearchConfig,
) -> tuple[int, list[SystemCandidate]]:
    """Cross the per-variable fronts, evaluate trajectory fitness for every
    pooled candidate (ascending complexity), and reduce to the system front."""
    pool = cartesian_candidates(fronts, cfg.cap_per_front, cfg.cap_total)
    pool.sort(key=lambda c: c.total_complexity)
    evaluated = [replace(c, traj_fitness=trajectory_fitness(c, instance)) for c in pool]
    return len(pool), system_pareto(evaluated)


def discover(
    instance: ProblemInstance,
    cfg: SearchConfig,
    proposer_factory=None,
) -> DiscoveryResult:
    """Full pipeline for one system: per-variable island search, candidate
    assembly, trajectory scoring, and knee selection."""
    if proposer_factory is None:
        proposer_factory = lambda: make_proposer(cfg.proposer)
    variable_results = [
        llm_symreg(instance, var_index, cfg, proposer=proposer_factory())
        for var_index in range(instance.system.dim)
    ]
    pool_size, front = build_system_front(
        [res.front for res in variable_results], instance, cfg
    )
    return DiscoveryResult(
        selected=select_knee(front),
        system_front=front,
        pool_size=pool_size,
        variable_results=variable_results,
    )
