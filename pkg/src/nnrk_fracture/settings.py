"""Run configuration: pydantic schema, YAML presets and environment overrides."""
from __future__ import annotations

import logging
import os
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml
from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .geometry import Domain2D, MaterialZone, Notch, RefineRegion
from .loads import DirichletCondition, FieldExpression, LoadProgram, NeumannCondition
from .material import MaterialParams
from .rk import RKConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "NNRK_"
Point = tuple[float, float]
Expr = Union[str, float]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NotchConfig(StrictModel):
    """Thin slit around a polyline (mm)."""
    polyline: list[Point] = Field(..., min_length=2)
    width: float = Field(..., gt=0.0)


class ZoneConfig(StrictModel):
    """Pre-degraded zone: polygon, or polyline with width. Moduli are scaled by ``modulus_factor``."""
    name: str
    modulus_factor: float = Field(..., gt=0.0)
    polygon: Optional[list[Point]] = None
    polyline: Optional[list[Point]] = None
    width: Optional[float] = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def _one_shape(self):
        if (self.polygon is None) == (self.polyline is None):
            raise ValueError("give exactly one of polygon or polyline")
        if self.polyline is not None and self.width is None:
            raise ValueError("polyline zones need a width")
        return self


class RefineConfig(StrictModel):
    polygon: list[Point] = Field(..., min_length=3)
    level: int = Field(1, ge=0)


class DomainConfig(StrictModel):
    outer: list[Point] = Field(..., min_length=3, description="counter-clockwise outer boundary (mm)")
    regions: dict[str, list[int]] = Field(default_factory=dict, description="region name -> outer edge indices")
    notches: list[NotchConfig] = Field(default_factory=list)
    material_zones: list[ZoneConfig] = Field(default_factory=list)
    refine: list[RefineConfig] = Field(default_factory=list)

    def build(self) -> Domain2D:
        zones = [
            MaterialZone(z.name, z.modulus_factor,
                         polygon_coords=None if z.polygon is None else np.asarray(z.polygon),
                         polyline=None if z.polyline is None else np.asarray(z.polyline), width=z.width)
            for z in self.material_zones
        ]
        return Domain2D(
            outer=np.asarray(self.outer),
            notches=[Notch(np.asarray(n.polyline), n.width) for n in self.notches],
            regions={k: tuple(v) for k, v in self.regions.items()},
            zones=zones,
        )

    def refine_regions(self) -> list[RefineRegion]:
        return [RefineRegion(np.asarray(r.polygon), r.level) for r in self.refine]


class DiscretizationConfig(StrictModel):
    """Uniform ``nx`` x ``ny`` grid, or explicit scattered ``points``."""
    nx: Optional[int] = Field(default=None, ge=2)
    ny: Optional[int] = Field(default=None, ge=2)
    points: Optional[list[Point]] = None
    spacing: Optional[float] = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def _grid_or_points(self):
        grid = self.nx is not None and self.ny is not None
        if grid == (self.points is not None):
            raise ValueError("give either nx and ny, or points")
        return self


class RKSettings(StrictModel):
    order: int = Field(1, ge=0, le=2)
    kernel: Literal["cubic_bspline"] = "cubic_bspline"
    support_factor: float = Field(2.0, gt=1.0)
    visibility: bool = False

    def build(self) -> RKConfig:
        return RKConfig(self.order, self.kernel, self.support_factor, self.visibility)


class MaterialConfig(StrictModel):
    """E, f_t, psi_c and enrichment_threshold in GPa; G_cI, G_cII in N/mm; length_scale in mm."""
    E: float = Field(..., gt=0.0)
    nu: float = Field(..., gt=-1.0, lt=0.5)
    G_cI: float = Field(..., gt=0.0)
    G_cII: Optional[float] = Field(default=None, gt=0.0)
    length_scale: float = Field(..., gt=0.0)
    f_t: Optional[float] = Field(default=None, gt=0.0)
    psi_c: Optional[float] = Field(default=None, ge=0.0)
    plane_stress: bool = False
    damage: bool = True
    enrichment_threshold: Optional[float] = Field(default=None, gt=0.0)

    def build(self) -> MaterialParams:
        return MaterialParams(
            E=self.E, nu=self.nu, G_cI=self.G_cI, G_cII=self.G_cII or self.G_cI,
            length_scale=self.length_scale, f_t=self.f_t, psi_c_override=self.psi_c,
            plane_stress=self.plane_stress, damage=self.damage,
        )


class NNConfig(StrictModel):
    enabled: bool = True
    n_blocks: int = Field(1, ge=0)
    n_kernels: int = Field(4, ge=1)
    hidden_layers: int = Field(1, ge=0)
    width: int = Field(10, ge=1)
    beta_init: float = Field(200.0, gt=0.0)
    beta_min: float = Field(10.0, gt=0.0)
    beta_max: float = Field(1000.0, gt=0.0)
    length_scale: Optional[float] = Field(default=None, gt=0.0, description="defaults to material.length_scale")

    @model_validator(mode="after")
    def _beta_bounds(self):
        if not self.beta_min <= self.beta_init <= self.beta_max:
            raise ValueError("need beta_min <= beta_init <= beta_max")
        return self

    @property
    def active(self) -> bool:
        return self.enabled and self.n_blocks > 0


class OptimizerConfig(StrictModel):
    adam_epochs: int = Field(200, ge=0)
    adam_lr: float = Field(1e-3, gt=0.0)
    lbfgs_iter: int = Field(500, ge=0)
    lbfgs_memory: int = Field(10, ge=1)
    tol_grad: float = Field(1e-8, gt=0.0)
    kappa_bc: float = Field(1e4, gt=0.0)
    kappa_pen: float = Field(1e4, ge=0.0)
    wc_ridge: float = Field(1e-8, ge=0.0)


class DirichletConfig(StrictModel):
    """Prescribed displacement (mm) per component; omitted components are free."""
    region: str
    u1: Optional[Expr] = None
    u2: Optional[Expr] = None

    @model_validator(mode="after")
    def _some_component(self):
        if self.u1 is None and self.u2 is None:
            raise ValueError("constrain at least one of u1, u2")
        return self


class NeumannConfig(StrictModel):
    """Traction (N/mm^2)."""
    region: str
    t1: Expr = 0.0
    t2: Expr = 0.0


class LoadConfig(StrictModel):
    increment: Optional[float] = None
    steps: Optional[int] = Field(default=None, ge=1)
    values: Optional[list[float]] = Field(default=None, min_length=1)
    dirichlet: list[DirichletConfig] = Field(default_factory=list)
    neumann: list[NeumannConfig] = Field(default_factory=list)
    body_force: Optional[tuple[Expr, Expr]] = Field(default=None, description="N/mm^3")

    @model_validator(mode="after")
    def _schedule(self):
        uniform = self.increment is not None and self.steps is not None
        if uniform == (self.values is not None):
            raise ValueError("give either increment and steps, or values")
        return self

    def build(self) -> LoadProgram:
        values = self.values if self.values is not None else self.increment * np.arange(1, self.steps + 1)
        dirichlet = []
        for i, d in enumerate(self.dirichlet):
            comps = {
                c: FieldExpression.parse(e, f"load.dirichlet.{i}.u{c + 1}")
                for c, e in enumerate((d.u1, d.u2)) if e is not None
            }
            dirichlet.append(DirichletCondition(d.region, comps))
        neumann = [
            NeumannCondition(n.region, (FieldExpression.parse(n.t1, f"load.neumann.{i}.t1"),
                                        FieldExpression.parse(n.t2, f"load.neumann.{i}.t2")))
            for i, n in enumerate(self.neumann)
        ]
        body = None
        if self.body_force is not None:
            body = tuple(FieldExpression.parse(b, "load.body_force") for b in self.body_force)
        return LoadProgram(np.asarray(values, dtype=float), dirichlet, neumann, body)


class TransectConfig(StrictModel):
    name: str
    start: Point
    end: Point
    samples: int = Field(101, ge=2)


class OutputConfig(StrictModel):
    directory: str = "runs/{name}"
    every: int = Field(1, ge=1, description="field dump cadence in steps")
    formats: list[Literal["csv", "vtk"]] = Field(default_factory=lambda: ["csv"])
    transects: list[TransectConfig] = Field(default_factory=list)
    mesh_dump: bool = False
    checkpoint_every: int = Field(1, ge=1)


class OracleConfig(StrictModel):
    """Reference solution for error reports and convergence studies."""
    kind: Literal["degraded_bar", "expression", "reference"]
    u1: Optional[str] = None
    u2: Optional[str] = None
    file: Optional[str] = None
    bar_length: Optional[float] = Field(default=None, gt=0.0)
    zone_width: Optional[float] = Field(default=None, gt=0.0)
    modulus_factor: Optional[float] = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def _fields_for_kind(self):
        need = {
            "degraded_bar": ("bar_length", "zone_width", "modulus_factor"),
            "expression": ("u1", "u2"),
            "reference": ("file",),
        }[self.kind]
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"oracle kind {self.kind!r} needs {', '.join(missing)}")
        return self


class StudyConfig(StrictModel):
    """``h``: grid refinement factors; ``neurons``: hidden widths."""
    kind: Literal["h", "neurons"]
    values: list[int] = Field(..., min_length=1)


class RunConfig(StrictModel):
    name: str
    seed: int = 0
    threads: Optional[int] = Field(default=None, ge=1)
    domain: DomainConfig
    discretization: DiscretizationConfig
    rk: RKSettings = Field(default_factory=RKSettings)
    material: MaterialConfig
    nn: NNConfig = Field(default_factory=NNConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    load: LoadConfig
    output: OutputConfig = Field(default_factory=OutputConfig)
    oracle: Optional[OracleConfig] = None
    study: Optional[StudyConfig] = None

    @model_validator(mode="after")
    def _cross_checks(self):
        regions = set(self.domain.regions)
        for kind, conds in (("dirichlet", self.load.dirichlet), ("neumann", self.load.neumann)):
            for c in conds:
                if c.region not in regions:
                    raise ValueError(f"load.{kind}: unknown boundary region {c.region!r}")
        if self.study is not None and self.oracle is None:
            raise ValueError("a convergence study needs an oracle block")
        needs_threshold = self.nn.active
        if needs_threshold and self.material.build().psi_c == 0.0:
            if self.material.enrichment_threshold is None:
                raise ValueError(
                    "psi_c is zero (no f_t or psi_c given): material.enrichment_threshold is required"
                )
            logger.warning("psi_c is zero: enrichment uses the absolute threshold %.3e GPa",
                           self.material.enrichment_threshold)
        return self

    @property
    def nn_length_scale(self) -> float:
        return self.nn.length_scale or self.material.length_scale

    def output_dir(self) -> Path:
        return Path(self.output.directory.format(name=self.name))


def _error_path(err: ValidationError) -> tuple[str, str]:
    first = err.errors()[0]
    path = ".".join(str(p) for p in first["loc"])
    return path, first["msg"]


def preset_names() -> list[str]:
    root = resources.files("nnrk_fracture") / "config"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def _read(source: str | Path) -> dict:
    path = Path(source)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    else:
        preset = resources.files("nnrk_fracture") / "config" / f"{source}.yaml"
        if not preset.is_file():
            raise ConfigError(f"no such config file or preset: {source} (presets: {', '.join(preset_names())})")
        text = preset.read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {source}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    return data


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        path, msg = _error_path(e)
        raise ConfigError(msg, path or None) from e


def load_config(source: str | Path) -> RunConfig:
    """Load a YAML run config from a file path or a shipped preset name."""
    return parse_config(_read(source))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def env_overrides() -> dict:
    """NNRK_* variables, with a .env file honoured."""
    load_dotenv(find_dotenv(usecwd=True))
    out = {}
    for key in ("threads", "seed"):
        name = ENV_PREFIX + key.upper()
        raw = os.getenv(name)
        if raw:
            try:
                out[key] = int(raw)
            except ValueError as e:
                raise ConfigError(f"expected an integer, got {raw!r}", name) from e
    if os.getenv(ENV_PREFIX + "OUTPUT_DIR"):
        out["output_dir"] = os.environ[ENV_PREFIX + "OUTPUT_DIR"]
    if os.getenv(ENV_PREFIX + "LOG_LEVEL"):
        out["log_level"] = os.environ[ENV_PREFIX + "LOG_LEVEL"]
    return out


def apply_overrides(cfg: RunConfig, threads: int | None = None, seed: int | None = None,
                    output_dir: str | None = None) -> RunConfig:
    """Flags win over environment variables, which win over file values."""
    env = env_overrides()
    update: dict = {}
    threads = threads if threads is not None else env.get("threads")
    seed = seed if seed is not None else env.get("seed")
    output_dir = output_dir if output_dir is not None else env.get("output_dir")
    if threads is not None:
        update["threads"] = threads
    if seed is not None:
        update["seed"] = seed
    data = cfg.model_dump(mode="json")
    data.update(update)
    if output_dir is not None:
        data["output"]["directory"] = str(output_dir)
    return parse_config(data)
