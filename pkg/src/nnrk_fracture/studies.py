"""Convergence studies, localization and damage-path measures, operator self-checks and the gradient check."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.spatial.distance import directed_hausdorff

from .driver import Simulation, run_simulation
from .enrichment import NORMALIZE_GUARD, EnrichedNodeSet
from .errors import ConfigError
from .export import write_csv
from .loss import GROUPS, LossTerms, ParameterVector, StepMaterial, evaluate_loss, gradient, grad_y_norms
from .loads import BoundaryData
from .material import principal_strains, spectral_split
from .scni import smooth
from .settings import RunConfig, parse_config

logger = logging.getLogger(__name__)

MIN_STUDY_POINTS = 3
PU_TOL = 1e-10
LINEAR_TOL = 1e-9
SCNI_LINEAR_TOL = 1e-9
SCNI_CONSTANT_TOL = 1e-10


# -- convergence -----------------------------------------------------------

@dataclass
class StudyPoint:
    value: int
    size: float
    l2: float
    h1: float


@dataclass
class StudyResult:
    kind: str
    points: list[StudyPoint]
    l2_slope: float
    h1_slope: float


def loglog_slope(x, y) -> float:
    """Least-squares slope of log y against log x; NaN with fewer than two finite points."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    ok = np.isfinite(x) & np.isfinite(y) & (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def study_configs(cfg: RunConfig) -> list[tuple[int, RunConfig]]:
    study = cfg.study
    if study is None:
        raise ConfigError("configuration has no study block", "study")
    if len(study.values) < MIN_STUDY_POINTS:
        raise ConfigError(
            f"a convergence study needs at least {MIN_STUDY_POINTS} points, got {len(study.values)}", "study.values"
        )
    out = []
    for v in study.values:
        data = cfg.model_dump(mode="json")
        data["study"] = None
        if study.kind == "h":
            disc = data["discretization"]
            if disc.get("nx") is None:
                raise ConfigError("h studies need a uniform grid (nx, ny)", "discretization")
            disc["nx"] = (disc["nx"] - 1) * v + 1
            disc["ny"] = (disc["ny"] - 1) * v + 1
        else:
            data["nn"]["width"] = v
        data["name"] = f"{cfg.name}_{study.kind}{v}"
        out.append((v, parse_config(data)))
    return out


def convergence_study(cfg: RunConfig, output_dir: str | Path | None = None, progress: bool = False) -> StudyResult:
    """Run every member of the study and fit log-log rates of the L2 and H1 errors.

    For ``h`` studies the abscissa is the node spacing; for ``neurons`` it is
    the number of hidden neurons.
    """
    root = Path(output_dir) if output_dir is not None else cfg.output_dir()
    points = []
    for v, member in study_configs(cfg):
        result = run_simulation(member, root / member.name, progress=progress)
        if result.errors is None:
            raise ConfigError("study runs need an oracle", "oracle")
        if cfg.study.kind == "h":
            size = result.simulation.nodes.spacing
        else:
            size = float(v * member.nn.hidden_layers)
        points.append(StudyPoint(v, size, result.errors.l2, result.errors.h1))
        logger.info("study %s=%d: size %.4g L2 %.4e H1 %.4e", cfg.study.kind, v, size, points[-1].l2, points[-1].h1)
    sizes = [p.size for p in points]
    result = StudyResult(cfg.study.kind, points, loglog_slope(sizes, [p.l2 for p in points]),
                         loglog_slope(sizes, [p.h1 for p in points]))
    write_csv(root / "convergence.csv", ("value", "size", "l2", "h1"),
              [(p.value, p.size, p.l2, p.h1) for p in points])
    write_csv(root / "convergence_rates.csv", ("kind", "l2_slope", "h1_slope"),
              [(result.kind, result.l2_slope, result.h1_slope)])
    logger.info("rates: L2 %.3f, H1 %.3f", result.l2_slope, result.h1_slope)
    return result


# -- localization and damage paths ------------------------------------------

def transition_bandwidth(x, u) -> float:
    """Width of the steepest transition in a sampled profile u(x).

    The jump above the linear background of the two ends, divided by the peak
    slope above that background; a ramp of width w on a linear field gives w.
    """
    x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
    slope = np.diff(u) / np.diff(x)
    background = 0.5 * (slope[0] + slope[-1])
    excess = slope - background
    peak = excess[np.argmax(np.abs(excess))]
    if peak == 0.0:
        return 0.0
    jump = (u[-1] - u[0]) - background * (x[-1] - x[0])
    return float(jump / peak)


def damage_path(centroids: np.ndarray, damage: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Centroids of the cells whose damage reaches ``threshold``."""
    return np.asarray(centroids)[np.asarray(damage) >= threshold]


def path_orientation(points: np.ndarray, tip) -> float:
    """Angle in degrees, in [0, 90], between the horizontal and the principal axis of ``points`` about ``tip``."""
    d = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(tip, dtype=float)
    if len(d) == 0:
        return float("nan")
    _, vecs = np.linalg.eigh(d.T @ d)
    axis = vecs[:, -1]
    return float(np.degrees(np.arctan2(abs(axis[1]), abs(axis[0]))))


def hausdorff_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance between two point sets."""
    return float(max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0]))


# -- gradient check --------------------------------------------------------

@dataclass
class GradientCheck:
    max_error: float
    checked: int
    excluded: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_error <= self.tolerance


@torch.no_grad()
def kink_signature(model, table, material: StepMaterial) -> np.ndarray:
    """Active branches of every max/relu/clamp in the loss, flattened to booleans."""
    ev = model.fields(table)
    grad_u, grad_y = model.smoothed_gradients(table, ev)
    eps = 0.5 * (grad_u + grad_u.transpose(-1, -2))
    e1, e2, tr = principal_strains(eps)
    psi_plus = spectral_split(eps, material.lam, material.mu)[0]
    excess = psi_plus - material.psi_c
    history = torch.maximum(material.history, excess).clamp_min(0.0)
    eta = history / (history + material.p)
    parts = [e1 > 0, e2 > 0, tr > 0, excess > material.history, excess > 0, eta > material.damage]
    if grad_y:
        parts.append((grad_y_norms(grad_y) > 1.0).flatten())
        for x in (table.eval_points_t, table.centroids_t):
            raw = torch.cat([block(x)[1] for block in model.blocks], dim=1)
            parts.append(raw.max(dim=1).values > NORMALIZE_GUARD)
    return torch.cat([p.flatten() for p in parts]).numpy()


def gradient_check(pv: ParameterVector, loss_fn: Callable[[], LossTerms], signature: Callable[[], np.ndarray],
                   indices: np.ndarray | None = None, step: float = 1e-6, tolerance: float = 1e-6,
                   floor: float = 1e-4) -> GradientCheck:
    """Compare the reverse-mode gradient with central differences.

    Components whose perturbation flips any branch of ``signature`` are
    excluded. The error is |fd - g| / max(|g|, |fd|, floor * max|g|).
    """
    _, g = gradient(pv, loss_fn)
    p0 = pv.flatten()
    if indices is None:
        indices = np.flatnonzero(pv.mask(GROUPS))
    scale = floor * max(float(np.max(np.abs(g[indices]), initial=0.0)), np.finfo(float).tiny)
    errors, excluded = [], 0
    try:
        for i in indices:
            h = step * max(1.0, abs(p0[i]))
            values, sigs = [], []
            for sign in (1.0, -1.0):
                p = p0.copy()
                p[i] += sign * h
                pv.unflatten(p)
                with torch.no_grad():
                    values.append(float(loss_fn().total))
                sigs.append(signature())
            if not np.array_equal(sigs[0], sigs[1]):
                excluded += 1
                continue
            fd = (values[0] - values[1]) / (2 * h)
            errors.append(abs(fd - g[i]) / max(abs(g[i]), abs(fd), scale))
    finally:
        pv.unflatten(p0)
    max_error = float(max(errors)) if errors else float("nan")
    logger.info("gradient check: %d components, %d excluded at kinks, max relative error %.3e",
                len(errors), excluded, max_error)
    return GradientCheck(max_error, len(errors), excluded, tolerance)


@torch.no_grad()
def randomize_parameters(sim: Simulation, seed: int, u_scale: float) -> None:
    """Enrich every node, activate the NN and perturb all parameters away from special points."""
    n = sim.nodes.count
    if not sim.model.active:
        sim.model.activate(sim.mesh.centroids, sim.generator)
    sim.enriched = EnrichedNodeSet(np.ones(n, dtype=bool), True)
    sim.model.set_node_mask(np.ones(n))
    rng = np.random.default_rng(seed)
    pv = ParameterVector(sim.model)
    p = pv.flatten()
    for group, amount in (("d", 0.1 * u_scale), ("WC", 0.1 * u_scale), ("WL", 0.05), ("WS", 0.01)):
        idx = pv.slice(group)
        p[idx] += amount * rng.standard_normal(len(idx))
    pv.unflatten(p)


def gradient_instance(sim: Simulation, seed: int = 0) -> tuple[ParameterVector, Callable, Callable]:
    """Loss closure and kink signature for step 0 of ``sim`` with random enriched parameters."""
    boundary: BoundaryData = sim.boundary(0)
    sim.stage_a(boundary)
    u_scale = max(boundary.u_ref, 1e-3 * sim.domain.diameter)
    randomize_parameters(sim, seed, u_scale)
    material = sim.step_material()
    pv = ParameterVector(sim.model)

    def loss_fn():
        return evaluate_loss(sim.model, sim.table, sim.volumes, material, boundary, sim.settings)

    return pv, loss_fn, lambda: kink_signature(sim.model, sim.table, material)


# -- validate --------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def downscaled(cfg: RunConfig, max_per_side: int = 6) -> RunConfig:
    """Same problem on a coarse grid, one load step, NN forced on."""
    data = cfg.model_dump(mode="json")
    disc = data["discretization"]
    if disc.get("nx") is not None:
        disc["nx"] = min(disc["nx"], max_per_side)
        disc["ny"] = min(disc["ny"], max_per_side)
    load = data["load"]
    if load.get("values") is not None:
        load["values"] = load["values"][:1]
    else:
        load["steps"] = 1
    nn = data["nn"]
    nn["enabled"] = True
    nn["n_blocks"] = max(nn["n_blocks"], 1)
    nn["width"] = min(nn["width"], 4)
    nn["hidden_layers"] = 1
    if not cfg.material.build().psi_c and data["material"].get("enrichment_threshold") is None:
        data["material"]["enrichment_threshold"] = 1.0
    data["study"] = None
    return parse_config(data)


def check_reproduction(sim: Simulation) -> CheckResult:
    points = np.vstack([sim.mesh.centroids, sim.mesh.eval_points])
    psi = sim.shapes.evaluate(points)
    pu = float(np.max(np.abs(np.asarray(psi.sum(axis=1)).ravel() - 1.0)))
    detail = f"partition of unity {pu:.2e}"
    passed = pu <= PU_TOL
    if sim.rk_cfg.order >= 1:
        lin = float(np.max(np.abs(psi @ sim.nodes.coords - points)))
        detail += f", linear reproduction {lin:.2e}"
        passed = passed and lin <= LINEAR_TOL
    return CheckResult("rk_reproduction", passed, detail)


def check_scni(sim: Simulation, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    a, B = rng.standard_normal(2), rng.standard_normal((2, 2))
    pts = sim.mesh.eval_points
    grad = smooth(sim.table.operator, pts @ B.T + a)
    lin = float(np.max(np.abs(grad - B)))
    const = float(np.max(np.abs(smooth(sim.table.operator, np.ones(len(pts))))))
    passed = lin <= SCNI_LINEAR_TOL * max(1.0, float(np.abs(B).max())) and const <= SCNI_CONSTANT_TOL
    return CheckResult("scni_exactness", passed, f"linear field {lin:.2e}, constant field {const:.2e}")


def check_gradient(sim: Simulation, seed: int = 0, max_components: int = 200) -> CheckResult:
    pv, loss_fn, signature = gradient_instance(sim, seed)
    free = np.flatnonzero(pv.mask(GROUPS))
    if len(free) > max_components:
        free = np.sort(np.random.default_rng(seed).choice(free, max_components, replace=False))
    result = gradient_check(pv, loss_fn, signature, free)
    return CheckResult(
        "gradient", result.passed,
        f"max relative error {result.max_error:.2e} over {result.checked} components ({result.excluded} at kinks)",
    )


def validate(cfg: RunConfig, seed: int | None = None) -> list[CheckResult]:
    """Reproduction, SCNI and gradient checks on a downscaled instance of ``cfg``."""
    small = downscaled(cfg)
    sim = Simulation(small)
    seed = small.seed if seed is None else seed
    results = [check_reproduction(sim), check_scni(sim, seed), check_gradient(sim, seed)]
    for r in results:
        logger.info("%s: %s (%s)", r.name, "pass" if r.passed else "FAIL", r.detail)
    return results
