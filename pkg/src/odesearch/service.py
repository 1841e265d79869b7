"""HTTP service wrapping the discovery engine.

Endpoints mirror the CLI verbs: simulate trajectories, discover one system,
sweep the benchmark, and re-aggregate previously written reports.  All heavy
work happens synchronously in the request (runs are desk-scale); the CLI is a
thin client of this app, either over the wire or in-process.
"""

from __future__ import annotations

import math
from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__
from .bench import (
    NMSE_DEFINITION,
    RunReport,
    aggregate_reports,
    discovery_table,
    run_benchmark,
    run_system,
    select_systems,
    slugify,
    write_artifacts,
)
from .dataset import (
    RegistryError,
    load_registry,
    simulate_system,
    write_trajectory_csv,
)
from .evolve import SearchConfig
from .proposer import ProposerConfig, load_script


class SearchSettings(BaseModel):
    proposer: str = "random"
    endpoint: str | None = None
    model: str | None = None
    api_key: str | None = None
    temperature: float = 0.7
    timeout: float = 60.0
    retries: int = 3
    script: list[list[str]] | None = None
    script_path: str | None = None
    chat_log: str | None = None
    seed: int = 0
    iters: int = 200
    islands: int = 4
    k: int = 8
    b: int = 3
    refine_every: int = 5
    mix: int = 2
    checkpoint_every: int = 10
    cap_per_front: int = 10
    cap_total: int = 10_000

    def to_config(self) -> SearchConfig:
        script = None
        if self.script is not None:
            script = tuple(tuple(line for line in batch) for batch in self.script)
        elif self.script_path is not None:
            script = load_script(self.script_path)
        proposer = ProposerConfig(
            kind=self.proposer,
            endpoint=self.endpoint,
            model=self.model,
            api_key=self.api_key,
            temperature=self.temperature,
            timeout=self.timeout,
            max_retries=self.retries,
            script=script,
            log_path=self.chat_log,
        )
        return SearchConfig(
            n_islands=self.islands,
            n_iter=self.iters,
            k=self.k,
            b=self.b,
            n_refine=self.refine_every,
            n_mix=self.mix,
            seed=self.seed,
            proposer=proposer,
            checkpoint_every=self.checkpoint_every,
            cap_per_front=self.cap_per_front,
            cap_total=self.cap_total,
        )


class SystemInfo(BaseModel):
    name: str
    dim: int
    equations: list[str]
    train_iv: list[float]
    test_iv: list[float]


class SimulateRequest(BaseModel):
    registry: str | None = None
    system: str | None = None
    out: str


class SimulateResponse(BaseModel):
    count: int
    written: list[str]


class ConvergencePointModel(BaseModel):
    iteration: int
    test_nmse: float
    front_size: int


class RunReportModel(BaseModel):
    system: str
    dim: int
    seed: int
    proposer: str
    equations: list[str]
    masked: list[str]
    total_complexity: int
    train_fitness: float
    test_nmse: float
    success: dict[str, bool]
    pool_size: int
    convergence: list[ConvergencePointModel]
    error: str | None = None

    @classmethod
    def from_report(cls, report: RunReport) -> "RunReportModel":
        return cls(
            system=report.system,
            dim=report.dim,
            seed=report.seed,
            proposer=report.proposer_kind,
            equations=report.selected_equations,
            masked=report.selected_masked,
            total_complexity=report.total_complexity,
            train_fitness=_json_safe(report.train_fitness),
            test_nmse=_json_safe(report.test_nmse),
            success=report.success,
            pool_size=report.pool_size,
            convergence=[
                ConvergencePointModel(
                    iteration=p.iteration,
                    test_nmse=_json_safe(p.test_nmse),
                    front_size=p.front_size,
                )
                for p in report.convergence
            ],
            error=report.error,
        )


def _json_safe(value: float) -> float:
    # JSON has no Infinity; clamp to a sentinel the clients print as "inf"
    if value == math.inf:
        return 1e308
    if value == -math.inf:
        return -1e308
    if value != value:
        return 1e308
    return value


class DiscoverRequest(BaseModel):
    registry: str | None = None
    system: str
    settings: SearchSettings = Field(default_factory=SearchSettings)
    out: str | None = None


class DiscoverResponse(BaseModel):
    report: RunReportModel


class SweepRequest(BaseModel):
    registry: str | None = None
    system: str | None = None
    settings: SearchSettings = Field(default_factory=SearchSettings)
    out: str
    workers: int = 1


class SweepTableRow(BaseModel):
    dim: int
    n_systems: int
    counts: dict[str, int]


class SweepResponse(BaseModel):
    n_systems: int
    out: str
    table: list[SweepTableRow]
    reports: list[RunReportModel]


class ReportRequest(BaseModel):
    runs: str
    out: str


class ReportResponse(BaseModel):
    n_reports: int
    out: str


def create_app() -> FastAPI:
    app = FastAPI(title="odesearch", version=__version__,
                  description="Data-driven discovery of governing equations")

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__, "nmse": NMSE_DEFINITION}

    @app.get("/systems", response_model=list[SystemInfo])
    def systems(registry: str | None = None):
        try:
            loaded = load_registry(registry)
        except RegistryError as err:
            raise HTTPException(status_code=400, detail=str(err))
        return [
            SystemInfo(name=s.name, dim=s.dim, equations=list(s.equations),
                       train_iv=list(s.train_iv), test_iv=list(s.test_iv))
            for s in loaded
        ]

    @app.post("/simulate", response_model=SimulateResponse)
    def simulate(request: SimulateRequest):
        try:
            loaded = load_registry(request.registry)
        except RegistryError as err:
            raise HTTPException(status_code=400, detail=str(err))
        chosen = select_systems(loaded, request.system)
        if request.system is not None and not chosen:
            raise HTTPException(status_code=404, detail=f"no system matches {request.system!r}")
        out = Path(request.out)
        out.mkdir(parents=True, exist_ok=True)
        written: list[str] = []
        for system in chosen:
            for label, iv in (("train", system.train_iv), ("test", system.test_iv)):
                path = out / f"{slugify(system.name)}_{label}.csv"
                try:
                    write_trajectory_csv(simulate_system(system, iv), path)
                except RegistryError as err:
                    raise HTTPException(status_code=400, detail=str(err))
                written.append(str(path))
        return SimulateResponse(count=len(chosen), written=written)

    @app.post("/discover", response_model=DiscoverResponse)
    def discover_endpoint(request: DiscoverRequest):
        try:
            loaded = load_registry(request.registry)
        except RegistryError as err:
            raise HTTPException(status_code=400, detail=str(err))
        chosen = select_systems(loaded, request.system)
        if not chosen:
            raise HTTPException(status_code=404, detail=f"no system matches {request.system!r}")
        if len(chosen) > 1:
            names = ", ".join(s.name for s in chosen)
            raise HTTPException(status_code=400, detail=f"ambiguous system filter: {names}")
        cfg = request.settings.to_config()
        report = run_system(chosen[0], cfg)
        if request.out is not None:
            write_artifacts([report], Path(request.out), cfg)
        return DiscoverResponse(report=RunReportModel.from_report(report))

    @app.post("/sweep", response_model=SweepResponse)
    def sweep(request: SweepRequest):
        try:
            loaded = load_registry(request.registry)
        except RegistryError as err:
            raise HTTPException(status_code=400, detail=str(err))
        cfg = request.settings.to_config()
        reports = run_benchmark(loaded, cfg, selection=request.system,
                                out_dir=request.out, workers=request.workers)
        table = [
            SweepTableRow(dim=row["dim"], n_systems=row["n_systems"],
                          counts={key: row[key] for key in row if key not in ("dim", "n_systems")})
            for row in discovery_table(reports)
        ]
        return SweepResponse(
            n_systems=len(reports),
            out=request.out,
            table=table,
            reports=[RunReportModel.from_report(r) for r in sorted(reports, key=lambda r: r.system)],
        )

    @app.post("/report", response_model=ReportResponse)
    def report(request: ReportRequest):
        runs = Path(request.runs)
        if not runs.exists():
            raise HTTPException(status_code=404, detail=f"runs directory {request.runs!r} not found")
        summary = aggregate_reports(runs, request.out)
        return ReportResponse(n_reports=summary["n_reports"], out=request.out)

    return app


app = create_app()
