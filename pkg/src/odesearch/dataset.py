"""Benchmark system registry and trajectory generation.

The registry is a human-editable TOML document (one ``[[systems]]`` record per
system) shipped with the package; :func:`load_registry` reads it or any
user-supplied file with the same schema.  :func:`make_instance` turns a
registry entry into train/test trajectories following the standard protocol:
both trajectories run from t=0 to t=10 at 0.1 s sampling, the first half
(t in [0, 5]) is the constant-fitting segment, and the full training
trajectory is the model-selection segment.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import numpy as np

from . import expr as ex
from .numeric import Divergence, TrajectoryData, estimate_derivatives, integrate

T_END = 10.0
DT = 0.1
FIT_T_END = 5.0


class RegistryError(Exception):
    pass


class ParseError(RegistryError):
    """Registry file is not readable as structured text."""


class SchemaError(RegistryError):
    """A record is missing a field or violates an invariant."""


class SimulationError(RegistryError):
    """A ground-truth system diverged; this is a registry bug."""


@dataclass(frozen=True)
class BenchmarkSystem:
    """A named ground-truth ODE system with train/test initial values."""

    name: str
    dim: int
    equations: tuple[str, ...]
    train_iv: tuple[float, ...]
    test_iv: tuple[float, ...]
    rtol: float | None = None
    atol: float | None = None

    def parsed_equations(self) -> list[ex.Expr]:
        return [ex.parse(eq, self.dim, ex.SIMULATION) for eq in self.equations]


@dataclass(frozen=True)
class ProblemInstance:
    system: BenchmarkSystem
    train: TrajectoryData
    test: TrajectoryData
    fit_slice: slice
    select_slice: slice


def default_registry_path() -> Path:
    return Path(resources.files("odesearch").joinpath("data/systems.toml"))  # type: ignore[arg-type]


def _require(record: dict, field: str, index: int):
    if field not in record:
        raise SchemaError(f"record #{index}: missing field {field!r}")
    return record[field]


def load_registry(path: str | Path | None = None) -> list[BenchmarkSystem]:
    """Load all benchmark systems from a registry file.

    Raises :class:`ParseError` with the decoder's line/column diagnostics on
    malformed text and :class:`SchemaError` on structurally invalid records.
    """
    path = Path(path) if path is not None else default_registry_path()
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except tomllib.TOMLDecodeError as err:
        raise ParseError(f"{path}: {err}") from err

    records = data.get("systems")
    if not records:
        raise ParseError(f"{path}: no [[systems]] records found")

    systems: list[BenchmarkSystem] = []
    seen: set[str] = set()
    for index, record in enumerate(records):
        name = _require(record, "name", index)
        dim = _require(record, "dim", index)
        equations = _require(record, "equations", index)
        train_iv = _require(record, "train_iv", index)
        test_iv = _require(record, "test_iv", index)
        if not isinstance(dim, int) or dim < 1:
            raise SchemaError(f"{name}: dim must be a positive integer")
        if len(equations) != dim:
            raise SchemaError(f"{name}: expected {dim} equations, found {len(equations)}")
        if len(train_iv) != dim or len(test_iv) != dim:
            raise SchemaError(f"{name}: initial value length must equal dim")
        if name in seen:
            raise SchemaError(f"duplicate system name {name!r}")
        seen.add(name)
        system = BenchmarkSystem(
            name=str(name),
            dim=dim,
            equations=tuple(str(eq) for eq in equations),
            train_iv=tuple(float(v) for v in train_iv),
            test_iv=tuple(float(v) for v in test_iv),
            rtol=record.get("rtol"),
            atol=record.get("atol"),
        )
        for eq_index, tree in enumerate(_parse_or_schema_error(system)):
            if ex.placeholder_count(tree) != 0:
                raise SchemaError(
                    f"{name}: equation {eq_index} contains constant placeholders"
                )
        systems.append(system)
    return systems


def _parse_or_schema_error(system: BenchmarkSystem) -> list[ex.Expr]:
    try:
        return system.parsed_equations()
    except ex.ExprError as err:
        raise SchemaError(f"{system.name}: {err}") from err


def simulate_system(system: BenchmarkSystem, iv) -> TrajectoryData:
    """Integrate a ground-truth system from one initial value; divergence is a
    hard error here because registry systems are required to be well-posed."""
    kwargs = {}
    if system.rtol is not None:
        kwargs["rtol"] = system.rtol
    if system.atol is not None:
        kwargs["atol"] = system.atol
    equations = [(tree, ()) for tree in system.parsed_equations()]
    result = integrate(equations, iv, T_END, DT, **kwargs)
    if isinstance(result, Divergence):
        raise SimulationError(f"{system.name}: ground-truth integration diverged ({result.reason})")
    return result


def make_instance(system: BenchmarkSystem) -> ProblemInstance:
    """Simulate the train/test trajectories and estimate train derivatives."""
    train = estimate_derivatives(simulate_system(system, system.train_iv))
    test = simulate_system(system, system.test_iv)
    n_fit = int(round(FIT_T_END / DT)) + 1
    return ProblemInstance(
        system=system,
        train=train,
        test=test,
        fit_slice=slice(0, n_fit),
        select_slice=slice(0, train.n_samples),
    )


def write_trajectory_csv(traj: TrajectoryData, path: str | Path) -> None:
    """Export a trajectory as CSV: header t,x_0,...,x_{D-1}, full precision."""
    path = Path(path)
    header = ",".join(["t"] + [f"x_{i}" for i in range(traj.dim)])
    lines = [header]
    for t, row in zip(traj.times, traj.states):
        lines.append(",".join([repr(float(t))] + [repr(float(v)) for v in row]))
    path.write_text("\n".join(lines) + "\n")


def read_trajectory_csv(path: str | Path) -> TrajectoryData:
    text = Path(path).read_text().strip().splitlines()
    rows = [[float(v) for v in line.split(",")] for line in text[1:]]
    arr = np.asarray(rows, dtype=float)
    return TrajectoryData(times=arr[:, 0], states=arr[:, 1:])
