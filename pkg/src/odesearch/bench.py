"""Evaluation harness: NMSE scoring, discovery tables, convergence and
Pareto-size curves, and sweep orchestration.

Artifacts are plain CSV/JSON, byte-deterministic for a fixed seed with the
scripted or random proposer (wall-clock timings are logged, never written).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .assemble import DiscoveryResult, build_system_front, discover, select_knee
from .dataset import (
    DT,
    BenchmarkSystem,
    ProblemInstance,
    T_END,
    load_registry,
    make_instance,
)
from .evolve import SearchConfig
from .numeric import Divergence, TrajectoryData, integrate

logger = logging.getLogger(__name__)

LAMBDAS = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
VARIANCE_FLOOR = 1e-12

NMSE_DEFINITION = (
    "per-dimension MSE divided by the population variance of the observed "
    "trajectory in that dimension (floor 1e-12), averaged over dimensions"
)


class ShapeError(Exception):
    pass


def lambda_key(lam: float) -> str:
    return f"{lam:.0e}"


def nmse(pred: TrajectoryData | Divergence, obs: TrajectoryData) -> float:
    """Normalized mean squared error between two trajectories on the same
    grid; a diverged prediction scores +inf."""
    if isinstance(pred, Divergence):
        return math.inf
    if pred.states.shape != obs.states.shape or not np.allclose(pred.times, obs.times):
        raise ShapeError("prediction and observation grids differ")
    err = pred.states - obs.states
    mse = np.mean(err * err, axis=0)
    var = np.maximum(obs.states.var(axis=0), VARIANCE_FLOOR)
    value = float(np.mean(mse / var))
    return value if math.isfinite(value) else math.inf


def success_flags(test_nmse: float) -> dict[str, bool]:
    return {lambda_key(lam): bool(test_nmse < lam) for lam in LAMBDAS}


def evaluate_discovery(selected, instance: ProblemInstance) -> tuple[float, dict[str, bool]]:
    """Integrate the selected system from the *test* initial value and score
    it against the held-out test trajectory."""
    predicted = integrate(
        [(fe.expr, fe.constants) for fe in selected.equations],
        instance.system.test_iv,
        T_END,
        DT,
    )
    value = nmse(predicted, instance.test)
    return value, success_flags(value)


@dataclass
class ConvergencePoint:
    iteration: int
    test_nmse: float
    front_size: int


@dataclass
class RunReport:
    system: str
    dim: int
    seed: int
    proposer_kind: str
    selected_equations: list[str]
    selected_masked: list[str]
    total_complexity: int
    train_fitness: float
    test_nmse: float
    success: dict[str, bool]
    pool_size: int
    convergence: list[ConvergencePoint] = field(default_factory=list)
    telemetry: list[dict] = field(default_factory=list)
    wall_time: float = 0.0  # logged only; excluded from artifacts for determinism
    error: str | None = None

    def as_dict(self) -> dict:
        return {
            "schema": "odesearch.run_report/1",
            "system": self.system,
            "dim": self.dim,
            "seed": self.seed,
            "proposer": self.proposer_kind,
            "selected": {
                "equations": self.selected_equations,
                "masked": self.selected_masked,
                "total_complexity": self.total_complexity,
                "train_fitness": self.train_fitness,
            },
            "test_nmse": self.test_nmse,
            "success": self.success,
            "pool_size": self.pool_size,
            "convergence": [
                {"iteration": p.iteration, "test_nmse": p.test_nmse, "front_size": p.front_size}
                for p in self.convergence
            ],
            "nmse_definition": NMSE_DEFINITION,
            "error": self.error,
        }


def system_seed(base_seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{base_seed}|{name}".encode(), digest_size=4).digest()
    return int.from_bytes(digest, "big")


def _checkpoint_curve(result: DiscoveryResult, instance: ProblemInstance,
                      cfg: SearchConfig) -> list[ConvergencePoint]:
    """Re-assemble the current-best system at every checkpoint iteration and
    score it on the test trajectory (discovery-rate and front-size curves)."""
    if not result.variable_results:
        return []
    schedules = [dict(res.checkpoints) for res in result.variable_results]
    iterations = sorted(set(schedules[0]).intersection(*schedules[1:]))
    points = []
    for iteration in iterations:
        fronts = [schedule[iteration] for schedule in schedules]
        _, front = build_system_front(fronts, instance, cfg)
        selected = select_knee(front)
        value, _ = evaluate_discovery(selected, instance)
        points.append(ConvergencePoint(iteration=iteration, test_nmse=value,
                                       front_size=len(front)))
    return points


def run_system(system: BenchmarkSystem, cfg: SearchConfig,
               proposer_factory=None) -> RunReport:
    """Run discovery end to end for one registry system; failures are
    captured in the report instead of raised."""
    seed = system_seed(cfg.seed, system.name)
    run_cfg = replace(cfg, seed=seed)
    started = time.monotonic()
    try:
        instance = make_instance(system)
        result = discover(instance, run_cfg, proposer_factory=proposer_factory)
        test_nmse, flags = evaluate_discovery(result.selected, instance)
        report = RunReport(
            system=system.name,
            dim=system.dim,
            seed=cfg.seed,
            proposer_kind=cfg.proposer.kind,
            selected_equations=result.selected.rendered(),
            selected_masked=[fe.masked for fe in result.selected.equations],
            total_complexity=result.selected.total_complexity,
            train_fitness=float(result.selected.traj_fitness if result.selected.traj_fitness is not None else math.nan),
            test_nmse=test_nmse,
            success=flags,
            pool_size=result.pool_size,
            convergence=_checkpoint_curve(result, instance, run_cfg),
            telemetry=[
                {"variable": var_index, "iteration": row.iteration, "island": row.island,
                 "best_score": row.best_score, "pareto_size": row.pareto_size}
                for var_index, res in enumerate(result.variable_results)
                for row in res.telemetry
            ],
        )
    except Exception as err:  # noqa: BLE001 - sweep must survive bad systems
        logger.exception("system %s failed", system.name)
        report = RunReport(
            system=system.name, dim=system.dim, seed=cfg.seed,
            proposer_kind=cfg.proposer.kind, selected_equations=[],
            selected_masked=[], total_complexity=0, train_fitness=-math.inf,
            test_nmse=math.inf, success=success_flags(math.inf), pool_size=0,
            error=f"{type(err).__name__}: {err}",
        )
    report.wall_time = time.monotonic() - started
    logger.info("%s: test NMSE %.3g (%.1fs)", system.name, report.test_nmse, report.wall_time)
    return report


def select_systems(systems: Sequence[BenchmarkSystem], selection: str | None) -> list[BenchmarkSystem]:
    """Name filter: exact match when possible, case-insensitive substring
    otherwise; None selects everything."""
    if selection is None:
        return list(systems)
    exact = [s for s in systems if s.name == selection]
    if exact:
        return exact
    needle = selection.lower()
    return [s for s in systems if needle in s.name.lower()]


def run_benchmark(
    systems: Sequence[BenchmarkSystem] | None,
    cfg: SearchConfig,
    selection: str | None = None,
    out_dir: str | Path | None = None,
    workers: int = 1,
    proposer_factory=None,
) -> list[RunReport]:
    """Sweep the selected systems (optionally in parallel) and, when
    ``out_dir`` is given, write the full artifact set."""
    if systems is None:
        systems = load_registry()
    chosen = select_systems(systems, selection)
    if workers > 1 and len(chosen) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(lambda s: run_system(s, cfg, proposer_factory), chosen))
    else:
        reports = [run_system(s, cfg, proposer_factory) for s in chosen]
    if out_dir is not None:
        write_artifacts(reports, Path(out_dir), cfg)
    return reports


# ---------------------------------------------------------------------------
# aggregation + artifacts
# ---------------------------------------------------------------------------

def slugify(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_").lower()


def discovery_table(reports: Sequence[RunReport | dict]) -> list[dict]:
    """Success counts per (dimension, threshold) cell."""
    views = [_report_view(r) for r in reports]
    rows = []
    for dim in (1, 2, 3, 4):
        members = [v for v in views if v["dim"] == dim]
        row: dict = {"dim": dim, "n_systems": len(members)}
        for lam in LAMBDAS:
            row[lambda_key(lam)] = sum(1 for v in members if v["test_nmse"] < lam)
        rows.append(row)
    return rows


def _report_view(report: RunReport | dict) -> dict:
    if isinstance(report, RunReport):
        return {
            "system": report.system,
            "dim": report.dim,
            "test_nmse": report.test_nmse,
            "convergence": [
                {"iteration": p.iteration, "test_nmse": p.test_nmse, "front_size": p.front_size}
                for p in report.convergence
            ],
        }
    return {
        "system": report["system"],
        "dim": report["dim"],
        "test_nmse": float(report["test_nmse"]),
        "convergence": report.get("convergence", []),
    }


def convergence_rows(reports: Sequence[RunReport | dict]) -> list[dict]:
    """Discovery rate (best-so-far NMSE below each threshold) per checkpoint
    iteration, pooled over systems."""
    views = [_report_view(r) for r in reports]
    iterations = sorted({p["iteration"] for v in views for p in v["convergence"]})
    total = len(views)
    rows = []
    for iteration in iterations:
        for lam in LAMBDAS:
            discovered = 0
            for v in views:
                best = min(
                    (p["test_nmse"] for p in v["convergence"] if p["iteration"] <= iteration),
                    default=math.inf,
                )
                if best < lam:
                    discovered += 1
            rows.append({
                "iteration": iteration,
                "lambda": lambda_key(lam),
                "discovered": discovered,
                "total": total,
                "rate": discovered / total if total else 0.0,
            })
    return rows


def pareto_size_rows(reports: Sequence[RunReport | dict]) -> list[dict]:
    """Mean system-front size per checkpoint iteration with a normal-theory
    95% confidence interval across systems."""
    views = [_report_view(r) for r in reports]
    iterations = sorted({p["iteration"] for v in views for p in v["convergence"]})
    rows = []
    for iteration in iterations:
        sizes = [
            p["front_size"]
            for v in views
            for p in v["convergence"]
            if p["iteration"] == iteration
        ]
        if not sizes:
            continue
        mean = float(np.mean(sizes))
        if len(sizes) > 1:
            half = 1.96 * float(np.std(sizes, ddof=1)) / math.sqrt(len(sizes))
        else:
            half = 0.0
        rows.append({
            "iteration": iteration,
            "mean_size": mean,
            "ci95_low": mean - half,
            "ci95_high": mean + half,
            "n_systems": len(sizes),
        })
    return rows


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_format_cell(row[c]) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def write_artifacts(reports: Sequence[RunReport], out_dir: Path, cfg: SearchConfig | None) -> dict:
    """Write per-run reports plus the aggregate tables; deterministic bytes
    for deterministic proposers regardless of worker count."""
    out_dir.mkdir(parents=True, exist_ok=True)
    runs_dir = out_dir / "runs"
    runs_dir.mkdir(exist_ok=True)
    ordered = sorted(reports, key=lambda r: r.system)
    for report in ordered:
        slug = slugify(report.system)
        (runs_dir / f"{slug}.report.json").write_text(
            json.dumps(report.as_dict(), indent=2) + "\n"
        )
        (runs_dir / f"{slug}.equations.txt").write_text(
            "\n".join(report.selected_equations) + "\n"
        )
        telemetry_rows = [
            {"variable": t["variable"], "iteration": t["iteration"], "island": t["island"],
             "best_score": float(t["best_score"]), "pareto_size": t["pareto_size"]}
            for t in report.telemetry
        ]
        write_csv(runs_dir / f"{slug}.telemetry.csv", telemetry_rows,
                  ["variable", "iteration", "island", "best_score", "pareto_size"])

    write_csv(out_dir / "discovery_table.csv", discovery_table(ordered),
              ["dim", "n_systems"] + [lambda_key(lam) for lam in LAMBDAS])
    write_csv(out_dir / "convergence.csv", convergence_rows(ordered),
              ["iteration", "lambda", "discovered", "total", "rate"])
    write_csv(out_dir / "pareto_size.csv", pareto_size_rows(ordered),
              ["iteration", "mean_size", "ci95_low", "ci95_high", "n_systems"])
    metadata = {
        "schema": "odesearch.sweep/1",
        "n_systems": len(ordered),
        "nmse_definition": NMSE_DEFINITION,
        "lambdas": [lambda_key(lam) for lam in LAMBDAS],
    }
    if cfg is not None:
        metadata["config"] = {
            "proposer": cfg.proposer.kind,
            "seed": cfg.seed,
            "n_islands": cfg.n_islands,
            "n_iter": cfg.n_iter,
            "k": cfg.k,
            "b": cfg.b,
            "n_refine": cfg.n_refine,
            "n_mix": cfg.n_mix,
            "checkpoint_every": cfg.checkpoint_every,
            "cap_per_front": cfg.cap_per_front,
            "cap_total": cfg.cap_total,
        }
    (out_dir / "metadata.json").write_text(json.dumps(metadata, indent=2) + "\n")
    return metadata


def aggregate_reports(runs_dir: str | Path, out_dir: str | Path) -> dict:
    """Rebuild the aggregate tables from previously written per-run reports."""
    runs_dir = Path(runs_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw = [json.loads(p.read_text()) for p in sorted(runs_dir.glob("*.report.json"))]
    views = sorted(raw, key=lambda r: r["system"])
    write_csv(out_dir / "discovery_table.csv", discovery_table(views),
              ["dim", "n_systems"] + [lambda_key(lam) for lam in LAMBDAS])
    write_csv(out_dir / "convergence.csv", convergence_rows(views),
              ["iteration", "lambda", "discovered", "total", "rate"])
    write_csv(out_dir / "pareto_size.csv", pareto_size_rows(views),
              ["iteration", "mean_size", "ci95_low", "ci95_high", "n_systems"])
    return {"n_reports": len(views)}
