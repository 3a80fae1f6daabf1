"""Experiment configuration: YAML/JSON parsing with line-anchored validation."""

from __future__ import annotations

from importlib import resources
from pathlib import Path as FsPath
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, ValidationError, model_validator

from .catalog import DRIFTS, FUNCTIONALS
from .exceptions import ConfigError
from .paths import TimeGrid


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridBlock(_Strict):
    horizon: PositiveFloat
    n_steps: PositiveInt


class NamedBlock(_Strict):
    name: str
    params: dict = Field(default_factory=dict)


class MeasureEntry(_Strict):
    type: Literal["dirac", "density"]
    at: float | None = None
    weight: float = 1.0
    values: list[float] | None = None

    @model_validator(mode="after")
    def _fields_for_type(self):
        if self.type == "dirac" and self.at is None:
            raise ValueError("a dirac entry needs 'at'")
        if self.type == "density" and not self.values:
            raise ValueError("a density entry needs non-empty 'values'")
        return self


class ModelBlock(_Strict):
    dim_h: PositiveInt = 1
    dim_u: PositiveInt = 1
    grid: GridBlock
    drift: NamedBlock
    measure: list[MeasureEntry] | None = None
    B: list[list[float]]
    initial: list[float]


class FeynmanKacCheck(_Strict):
    t: float = 0.0
    n_paths: PositiveInt = 10_000
    tolerance: float = 0.01
    summary_paths: PositiveInt = 1000


class ItoCheck(_Strict):
    t_hat: float = 0.0
    n_paths: PositiveInt = 200
    mode: Literal["quotient", "derivative"] = "quotient"
    tolerance: float = 1e-10
    functional: NamedBlock | None = None


class ItoConvergenceCheck(_Strict):
    t_hat: float = 0.0
    n_paths: PositiveInt = 1000
    factors: list[PositiveInt] = Field(default_factory=lambda: [8, 4, 2, 1])
    min_slope: float = 0.4
    functional: NamedBlock | None = None


class KolmogorovCheck(_Strict):
    t: float = 0.5
    mode: Literal["analytic", "monte_carlo", "both"] = "both"
    n_paths: PositiveInt = 4000
    tolerance: float = 1e-6


class ClarkOconeCheck(_Strict):
    t_hat: float = 0.0
    n_paths: PositiveInt = 2000
    integrand: Literal["analytic", "chain_rule"] = "analytic"
    n_outer: PositiveInt = 100
    n_inner: PositiveInt = 100
    integrand_tolerance: float = 1e-6


class TowerCheck(_Strict):
    t_prime: float = 0.0
    t: float = 0.5
    n_outer: PositiveInt = 100
    n_inner: PositiveInt = 200


class SensitivitiesCheck(_Strict):
    t: float = 0.0
    eps: PositiveFloat = 1e-5
    eps_second: PositiveFloat = 1e-3
    rel_tol: float = 1e-4
    rel_tol_second: float = 1e-3
    dense_tol: float = 1e-10


class ContractionCheck(_Strict):
    lambdas: list[PositiveFloat] = Field(default_factory=lambda: [2.0, 5.0, 10.0])
    pairs: PositiveInt = 100
    slack: float = 1.05


class FlowCheck(_Strict):
    t: float = 0.0
    s: float = 0.5
    n_paths: PositiveInt = 16


class PhiSuiteCheck(_Strict):
    t: float = 0.5
    n_paths: PositiveInt = 2000
    n_outer: PositiveInt = 100
    n_inner: PositiveInt = 100
    rel_tol: float = 1e-3


CHECK_MODELS = {
    "clark_ocone": ClarkOconeCheck,
    "contraction": ContractionCheck,
    "feynman_kac": FeynmanKacCheck,
    "flow": FlowCheck,
    "ito": ItoCheck,
    "ito_convergence": ItoConvergenceCheck,
    "kolmogorov": KolmogorovCheck,
    "phi_suite": PhiSuiteCheck,
    "sensitivities": SensitivitiesCheck,
    "tower": TowerCheck,
}


class OutputBlock(_Strict):
    directory: str = "funcito_out"
    formats: list[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])


class ExperimentConfig(_Strict):
    seed: int = Field(ge=0, lt=2**64)
    model: ModelBlock
    functional: NamedBlock
    checks: dict[str, dict] = Field(default_factory=dict)
    output: OutputBlock = Field(default_factory=OutputBlock)

    def grid(self) -> TimeGrid:
        return TimeGrid(self.model.grid.horizon, self.model.grid.n_steps)

    def check(self, name: str):
        return CHECK_MODELS[name](**(self.checks[name] or {}))


def bundled_configs() -> list:
    root = resources.files("funcito") / "configs"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve(name_or_path: str) -> tuple:
    """``(text, label)`` for a file path or the name of a bundled config."""
    path = FsPath(name_or_path)
    if path.is_file():
        return path.read_text(), path.stem
    stem = path.name[: -len(".yaml")] if path.name.endswith(".yaml") else path.name
    if stem in bundled_configs():
        return (resources.files("funcito") / "configs" / f"{stem}.yaml").read_text(), stem
    raise ConfigError(f"no config file or bundled config named {name_or_path!r}")


def _node_at(node, loc):
    """Deepest YAML node along a pydantic error location."""
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            match = [v for k, v in node.value if k.value == str(key)]
            if not match:
                return node
            node = match[0]
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            return node
    return node


def _line(node, loc) -> int | None:
    if node is None:
        return None
    return _node_at(node, loc).start_mark.line + 1


def parse(text: str) -> ExperimentConfig:
    """Parse and validate; every error names the offending line."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        mark = getattr(err, "problem_mark", None)
        raise ConfigError(f"cannot parse config: {getattr(err, 'problem', err)}", line=mark.line + 1 if mark else None) from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping", line=1)
    try:
        cfg = ExperimentConfig(**data)
    except ValidationError as err:
        first = err.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "config"
        raise ConfigError(f"{where}: {first['msg']}", line=_line(root, first["loc"])) from None
    _semantic_checks(cfg, root)
    return cfg


def _semantic_checks(cfg: ExperimentConfig, root) -> None:
    grid = cfg.grid()
    model = cfg.model
    if len(model.B) != model.dim_h or any(len(row) != model.dim_u for row in model.B):
        raise ConfigError(f"B must be a {model.dim_h} x {model.dim_u} matrix", line=_line(root, ("model", "B")))
    if len(model.initial) != model.dim_h:
        raise ConfigError(f"initial must have {model.dim_h} entries", line=_line(root, ("model", "initial")))
    if cfg.model.drift.name not in DRIFTS:
        raise ConfigError(f"unknown drift {cfg.model.drift.name!r}; choose from {sorted(DRIFTS)}", line=_line(root, ("model", "drift", "name")))
    names = [("functional",)]
    for check, params in cfg.checks.items():
        if check not in CHECK_MODELS:
            raise ConfigError(f"unknown check {check!r}; choose from {sorted(CHECK_MODELS)}", line=_line(root, ("checks", check)))
        try:
            model = cfg.check(check)
        except ValidationError as err:
            first = err.errors()[0]
            loc = ("checks", check) + tuple(first["loc"])
            raise ConfigError(f"{'.'.join(map(str, loc))}: {first['msg']}", line=_line(root, loc)) from None
        if getattr(model, "functional", None) is not None:
            names.append(("checks", check, "functional"))
        for field in ("t", "t_hat", "t_prime", "s"):
            value = getattr(model, field, None)
            if value is not None and not grid.is_aligned(value):
                raise ConfigError(
                    f"checks.{check}.{field}={value!r} is not a grid node (dt={grid.dt!r})",
                    line=_line(root, ("checks", check, field)),
                )
    for loc in names:
        block = cfg.functional if loc == ("functional",) else cfg.check(loc[1]).functional
        if block.name not in FUNCTIONALS:
            raise ConfigError(f"unknown functional {block.name!r}; choose from {sorted(FUNCTIONALS)}", line=_line(root, loc + ("name",)))
    for i, entry in enumerate(cfg.model.measure or ()):
        if entry.type == "dirac":
            if not 0 <= entry.at <= grid.horizon:
                raise ConfigError(f"measure atom at {entry.at!r} lies outside [0, {grid.horizon!r}]", line=_line(root, ("model", "measure", i, "at")))
            if not grid.is_aligned(entry.at):
                raise ConfigError(
                    f"measure atom at {entry.at!r} is not a grid node (dt={grid.dt!r})",
                    line=_line(root, ("model", "measure", i, "at")),
                )
        elif grid.n_steps % len(entry.values):
            raise ConfigError(
                f"density with {len(entry.values)} cells does not divide n_steps={grid.n_steps}",
                line=_line(root, ("model", "measure", i, "values")),
            )


def load(name_or_path: str) -> tuple:
    """``(config, label)`` from a path or bundled name."""
    text, label = resolve(name_or_path)
    return parse(text), label
