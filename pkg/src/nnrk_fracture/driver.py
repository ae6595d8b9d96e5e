"""Staggered load stepping: Stage A, enrichment, Stage B, commit, record."""
from __future__ import annotations

import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from tqdm import tqdm

from .assembly import cell_moduli_matrix, stage_a_solve
from .enrichment import EnrichedNodeSet, enrichment_region, select_enriched_nodes
from .errors import CheckpointError, NNRKError, OptimizerAbort
from .export import export_fields, write_csv, write_mesh_csv, write_transect, atomic_write_text
from .geometry import NodeSet, build_smoothing_cells, build_uniform_grid
from .loads import BoundaryData
from .loss import (GROUPS, LossBreakdown, LossSettings, Objective, ParameterVector, StepMaterial, dirichlet_traction,
                   evaluate_loss, grad_y_norms)
from .material import N_PER_KN, MaterialState, spectral_split, stagger_release_rate, update_history
from .model import NNRKModel, ShapeTable
from .optimizers import adam, lbfgs
from .oracles import ErrorNorms, build_oracle, cell_quadrature, error_norms, manufactured_loads
from .rk import ShapeFunctions
from .settings import RunConfig, dump_config, parse_config

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
STEEP_LIMIT = 1.05
STEP_COLUMNS = (
    "step", "load", "reaction", "total", "strain", "external", "reg", "bc", "ridge",
    "enriched", "adam_iterations", "lbfgs_iterations", "damage_max", "steep_fraction", "wall_time",
)
TRACE_COLUMNS = ("step", "stage", "iteration", "loss")


@dataclass
class StepRecord:
    """Converged state of one load step; ``reaction`` in N/mm."""

    step: int
    load: float
    loss: LossBreakdown
    reaction: float
    enriched: int
    adam_iterations: int
    lbfgs_iterations: int
    wall_time: float
    damage: np.ndarray = field(repr=False)
    steep_fraction: float = 0.0

    def row(self) -> tuple:
        lb = self.loss
        return (self.step, self.load, self.reaction, lb.total, lb.strain, lb.external, lb.reg, lb.bc, lb.ridge,
                self.enriched, self.adam_iterations, self.lbfgs_iterations,
                float(self.damage.max(initial=0.0)), self.steep_fraction, self.wall_time)


@dataclass
class RunResult:
    records: list[StepRecord]
    output_dir: Path
    errors: ErrorNorms | None
    simulation: "Simulation"


class Simulation:
    """Everything a run needs between load steps: discretization, unknowns and committed state."""

    def __init__(self, cfg: RunConfig, output_dir: str | Path | None = None, table: ShapeTable | None = None):
        cfg = manufactured_loads(cfg)
        self.cfg = cfg
        self.output_dir = Path(output_dir) if output_dir is not None else cfg.output_dir()

        self.domain = cfg.domain.build()
        disc = cfg.discretization
        if disc.points is None:
            self.nodes = build_uniform_grid(disc.nx, disc.ny, self.domain, cfg.rk.support_factor)
        else:
            self.nodes = NodeSet.from_points(disc.points, cfg.rk.support_factor, disc.spacing)
        self.mesh = build_smoothing_cells(self.nodes, self.domain, cfg.domain.refine_regions())
        logger.info("%s: %d nodes, %d smoothing cells, %d surface points",
                    cfg.name, self.nodes.count, self.mesh.n_cells, self.mesh.n_surf)

        self.rk_cfg = cfg.rk.build()
        blocking = self.domain.notch_segments() if self.rk_cfg.visibility else None
        self.shapes = ShapeFunctions(self.nodes, self.rk_cfg, blocking)
        self.table = table if table is not None else ShapeTable.build(self.nodes, self.mesh, self.rk_cfg, blocking)

        self.params = cfg.material.build()
        factors = np.ones(self.mesh.n_cells)
        for z, zone in enumerate(self.domain.zones):
            factors[self.mesh.zone == z] = zone.modulus_factor
        self.lam, self.mu = self.params.cell_moduli(factors)
        self.state = MaterialState.initial(self.mesh.n_cells, self.params)
        self.program = cfg.load.build()
        self.program.check_regions(self.domain.region_names)

        nn = cfg.nn
        self.model = NNRKModel(
            self.nodes.count, n_blocks=nn.n_blocks if nn.active else 0, n_kernels=nn.n_kernels,
            hidden_layers=nn.hidden_layers, width=nn.width, length_scale=cfg.nn_length_scale,
            beta_init=nn.beta_init, beta_bounds=(nn.beta_min, nn.beta_max),
        )
        self.enriched = EnrichedNodeSet.empty(self.nodes.count)
        opt = cfg.optimizer
        self.settings = LossSettings(opt.kappa_bc, opt.kappa_pen, opt.wc_ridge)
        self.volumes = torch.as_tensor(self.mesh.volumes, dtype=torch.float64)
        self.generator = torch.Generator().manual_seed(cfg.seed)

        self.step = 0
        self.records: list[StepRecord] = []
        self.trace: list[tuple] = []

    # -- per-step pieces ---------------------------------------------------

    def moduli(self) -> np.ndarray:
        """Per-cell Voigt moduli frozen at the committed strain and damage."""
        return cell_moduli_matrix(self.state.strain, self.lam, self.mu, self.state.damage, self.params.damage)

    def step_material(self) -> StepMaterial:
        return StepMaterial.from_arrays(
            self.lam, self.mu, self.state.p, self.state.history, self.state.damage, self.params.psi_c,
            self.params.E, self.params.mu, self.params.damage, moduli=self.moduli(),
        )

    def boundary(self, n: int) -> BoundaryData:
        return self.program.boundary_data(self.mesh, n)

    def _loss_fn(self, material: StepMaterial, boundary: BoundaryData, live_damage: bool = True):
        return lambda: evaluate_loss(self.model, self.table, self.volumes, material, boundary, self.settings,
                                     live_damage=live_damage)

    def stage_a(self, boundary: BoundaryData) -> None:
        opt = self.cfg.optimizer
        stage_a_solve(self.model, self.table, self.mesh.volumes, self.moduli(), boundary, self.params.E,
                      opt.kappa_bc, opt.wc_ridge)

    def update_enrichment(self, material: StepMaterial, boundary: BoundaryData) -> bool:
        """Grow the enriched node set from the current tensile energy; True if it changed."""
        if not self.cfg.nn.active:
            return False
        with torch.no_grad():
            psi_plus = self._loss_fn(material, boundary, live_damage=False)().psi_plus.numpy()
        grown = select_enriched_nodes(psi_plus, self.mesh.centroids, self.nodes, self.params.psi_c,
                                      self.enriched, self.cfg.material.enrichment_threshold)
        if grown.size == self.enriched.size:
            return False
        if not self.model.active:
            region = enrichment_region(self.mesh.centroids, self.nodes, grown)
            self.model.activate(self.mesh.centroids[region], self.generator)
            grown.active = True
        self.model.set_node_mask(grown.mask)
        logger.info("enriched nodes: %d -> %d", self.enriched.size, grown.size)
        self.enriched = grown
        return True

    def stage_b(self, n: int, material: StepMaterial, boundary: BoundaryData) -> tuple[int, int]:
        """Full minimization with live damage; returns (adam, lbfgs) iteration counts."""
        opt = self.cfg.optimizer
        u_ref = max(boundary.u_ref, 1e-6 * self.domain.diameter)
        pv = ParameterVector(self.model)
        counter = {"stage": "entry", "it": 0}

        def trace(value: float) -> None:
            self.trace.append((n, counter["stage"], counter["it"], value))
            counter["it"] += 1

        obj = Objective(pv, self._loss_fn(material, boundary), GROUPS, u_ref, trace)
        entry = pv.flatten()
        z0 = obj.x0()
        f0, g0 = obj(z0)
        scale = max(abs(f0), np.finfo(float).tiny)
        if not self.model.active and np.max(np.abs(g0), initial=0.0) <= opt.tol_grad * scale:
            logger.debug("step %d: stage B skipped, gradient %.3e", n, np.max(np.abs(g0), initial=0.0))
            return 0, 0

        z, n_adam = z0, 0
        if self.model.active and opt.adam_epochs:
            counter.update(stage="adam", it=0)
            res = adam(obj, z, epochs=opt.adam_epochs, lr=opt.adam_lr)
            z, n_adam = res.x, res.iterations
        counter.update(stage="lbfgs", it=0)
        res = lbfgs(obj, z, max_iter=opt.lbfgs_iter, memory=opt.lbfgs_memory, tol_grad=opt.tol_grad * scale)
        if not res.success:
            raise OptimizerAbort(f"step {n + 1}: L-BFGS failed after the steepest-descent fallback ({res.message})")
        if res.fun > f0:
            logger.warning("step %d: stage B raised the loss (%.6e > %.6e); keeping entry parameters", n, res.fun, f0)
            pv.unflatten(entry)
        else:
            obj.apply(res.x)
        return n_adam, res.iterations

    @torch.no_grad()
    def reaction(self, boundary: BoundaryData) -> float:
        """Constraint resultant over driven entries, penalty minus Nitsche traction, N/mm."""
        driven = boundary.dir_rate != 0.0
        if not bool(driven.any()):
            return 0.0
        ev = self.model.fields(self.table)
        grad_u, _ = self.model.smoothed_gradients(self.table, ev)
        eps = 0.5 * (grad_u + grad_u.transpose(-1, -2))
        t = dirichlet_traction(eps, torch.as_tensor(self.moduli()), boundary)
        u = ev.u_surf[boundary.dir_point, boundary.dir_comp]
        force = self.settings.kappa_bc * self.params.E * (u - boundary.dir_value) - t
        r = (force * boundary.dir_rate * boundary.dir_length)[driven].sum()
        return float(r) * N_PER_KN

    def run_load_step(self, n: int) -> StepRecord:
        start = time.perf_counter()
        boundary = self.boundary(n)
        stagger_release_rate(self.state, self.params, self.lam, self.mu)
        self.stage_a(boundary)
        material = self.step_material()
        if self.update_enrichment(material, boundary):
            self.stage_a(boundary)
        n_adam, n_lbfgs = self.stage_b(n, material, boundary)

        with torch.no_grad():
            terms = self._loss_fn(material, boundary)()
            history = update_history(material.history, terms.psi_plus, material.psi_c)
            steep = self._steep_fraction()
        reaction = self.reaction(boundary)
        self.state.commit(history.numpy(), terms.strain_tensor.numpy(), self.params.damage)
        record = StepRecord(
            step=n, load=float(self.program.values[n]), loss=terms.breakdown(), reaction=reaction,
            enriched=self.enriched.size, adam_iterations=n_adam, lbfgs_iterations=n_lbfgs,
            wall_time=time.perf_counter() - start, damage=self.state.damage.copy(), steep_fraction=steep,
        )
        self.records.append(record)
        self.step = n + 1
        logger.info("step %d/%d g=%.4e loss=%.6e reaction=%.4e N/mm enriched=%d iters=%d+%d",
                    n + 1, self.program.n_steps, record.load, record.loss.total, record.reaction,
                    record.enriched, n_adam, n_lbfgs)
        return record

    def _steep_fraction(self) -> float:
        if not self.model.active:
            return 0.0
        ev = self.model.fields(self.table, with_cells=False)
        _, grad_y = self.model.smoothed_gradients(self.table, ev)
        norms = grad_y_norms(grad_y).amax(dim=(1, 2))
        return float((norms > STEEP_LIMIT).double().mean())

    # -- fields and errors -------------------------------------------------

    @torch.no_grad()
    def cell_fields(self) -> dict[str, np.ndarray]:
        ev = self.model.fields(self.table)
        grad_u, grad_y = self.model.smoothed_gradients(self.table, ev)
        eps = 0.5 * (grad_u + grad_u.transpose(-1, -2))
        psi_plus = spectral_split(eps, self.lam, self.mu)[0].numpy()
        n = self.mesh.n_cells
        if ev.y_cell:
            y = ev.y_cell[0].numpy()
            steep = grad_y_norms(grad_y).amax(dim=(1, 2)).numpy()
        else:
            y, steep = self.mesh.centroids, np.zeros(n)
        u_rk, u_nn = ev.u_rk_cell.numpy(), ev.u_nn_cell.numpy()
        eps = eps.numpy()
        return {
            "cell": np.arange(n), "x": self.mesh.centroids[:, 0], "y": self.mesh.centroids[:, 1],
            "area": self.mesh.volumes, "u1": u_rk[:, 0] + u_nn[:, 0], "u2": u_rk[:, 1] + u_nn[:, 1],
            "u1_rk": u_rk[:, 0], "u2_rk": u_rk[:, 1], "u1_nn": u_nn[:, 0], "u2_nn": u_nn[:, 1],
            "eps11": eps[:, 0, 0], "eps22": eps[:, 1, 1], "eps12": eps[:, 0, 1],
            "damage": self.state.damage, "psi0_plus": psi_plus, "y1": y[:, 0], "y2": y[:, 1],
            "grad_y_norm": steep,
        }

    def displacement_at(self, points: np.ndarray) -> np.ndarray:
        return self.model.displacement(self.shapes.evaluate(points), points)

    def transect(self, start, end, samples: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Sampled (points, u, strain, damage) along a straight line; strain and damage from the host cell."""
        t = np.linspace(0.0, 1.0, samples)[:, None]
        points = (1 - t) * np.asarray(start, dtype=float) + t * np.asarray(end, dtype=float)
        cells = self.mesh.locate(points)
        inside = cells >= 0
        fields = self.cell_fields()
        strain = np.full((samples, 2, 2), np.nan)
        damage = np.full(samples, np.nan)
        u = np.full((samples, 2), np.nan)
        host = cells[inside]
        strain[inside, 0, 0] = fields["eps11"][host]
        strain[inside, 1, 1] = fields["eps22"][host]
        strain[inside, 0, 1] = strain[inside, 1, 0] = fields["eps12"][host]
        damage[inside] = fields["damage"][host]
        if inside.any():
            u[inside] = self.displacement_at(points[inside])
        return points, u, strain, damage

    @torch.no_grad()
    def error_norms(self) -> ErrorNorms | None:
        """Errors against the configured oracle at the last committed load."""
        if self.cfg.oracle is None or self.step == 0:
            return None
        oracle = build_oracle(self.cfg.oracle, float(self.program.values[self.step - 1]))
        quad = cell_quadrature(self.mesh)
        u_quad = self.displacement_at(quad.points)
        ev = self.model.fields(self.table, with_cells=False)
        grad_u, _ = self.model.smoothed_gradients(self.table, ev)
        return error_norms(u_quad, quad, grad_u.numpy(), self.mesh, oracle)

    # -- output ------------------------------------------------------------

    def write_step_outputs(self, n: int) -> None:
        out = self.cfg.output
        last = n == self.program.n_steps - 1
        if (n + 1) % out.every and not last:
            return
        stem = f"step_{n + 1:04d}"
        export_fields(self.cell_fields(), self.mesh, self.output_dir / "fields", stem, out.formats)
        for tr in out.transects:
            points, u, strain, damage = self.transect(tr.start, tr.end, tr.samples)
            write_transect(self.output_dir / "transects" / f"{tr.name}_{stem}.csv", points, u, strain, damage)

    def write_logs(self) -> None:
        write_csv(self.output_dir / "steps.csv", STEP_COLUMNS, (r.row() for r in self.records))
        write_csv(self.output_dir / "loss_trace.csv", TRACE_COLUMNS, self.trace)

    # -- checkpoints -------------------------------------------------------

    def snapshot(self) -> dict:
        """Copy of everything committed so far, in checkpoint layout."""
        return {
            "format_version": CHECKPOINT_VERSION,
            "step": self.step,
            "config": self.cfg.model_dump(mode="json"),
            "arch": dict(self.model.arch),
            "model": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            "state": {k: np.array(getattr(self.state, k)) for k in ("history", "damage", "G_c", "strain")},
            "enriched": {"mask": self.enriched.mask.copy(), "active": self.enriched.active},
            "records": [asdict(r) for r in self.records],
            "trace": list(self.trace),
            "rng": self.generator.get_state(),
            "table": self.table.arrays(),
        }

    @staticmethod
    def save_checkpoint(payload: dict, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
        os.close(fd)
        try:
            torch.save(payload, tmp)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        logger.debug("checkpoint written: %s (step %d)", path, payload["step"])
        return path

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / "checkpoint.pt"

    @staticmethod
    def load_checkpoint(path: str | Path) -> dict:
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            payload = torch.load(path, weights_only=False)
        except Exception as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
        version = payload.get("format_version") if isinstance(payload, dict) else None
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint {path} has format version {version!r}, expected {CHECKPOINT_VERSION}")
        return payload

    @classmethod
    def from_checkpoint(cls, path: str | Path, cfg: RunConfig | None = None,
                        output_dir: str | Path | None = None) -> "Simulation":
        payload = cls.load_checkpoint(path)
        cfg = cfg if cfg is not None else parse_config(payload["config"])
        sim = cls(cfg, output_dir, table=ShapeTable.from_arrays(payload["table"]))
        sim.restore(payload)
        return sim

    def restore(self, payload: dict) -> None:
        if payload["arch"]["n_nodes"] != self.nodes.count:
            raise CheckpointError(
                f"checkpoint has {payload['arch']['n_nodes']} nodes, the configuration gives {self.nodes.count}"
            )
        self.model = NNRKModel.from_checkpoint(payload["arch"], payload["model"])
        for k, v in payload["state"].items():
            setattr(self.state, k, np.array(v))
        self.enriched = EnrichedNodeSet(payload["enriched"]["mask"].copy(), payload["enriched"]["active"])
        self.records = [
            StepRecord(**{**r, "loss": LossBreakdown(**r["loss"])}) for r in payload["records"]
        ]
        self.trace = list(payload["trace"])
        self.generator.set_state(payload["rng"])
        self.step = int(payload["step"])
        logger.info("resumed %s at step %d", self.cfg.name, self.step)

    # -- main loop ---------------------------------------------------------

    def run(self, progress: bool = True) -> list[StepRecord]:
        out = self.cfg.output
        self.output_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.output_dir / "config.yaml", dump_config(self.cfg))
        if out.mesh_dump:
            write_mesh_csv(self.output_dir / "mesh.csv", self.mesh)
        total = self.program.n_steps
        with tqdm(total=total, initial=self.step, disable=not progress, desc=self.cfg.name, unit="step") as bar:
            for n in range(self.step, total):
                committed = self.snapshot()
                try:
                    self.run_load_step(n)
                except NNRKError:
                    path = self.save_checkpoint(committed, self.checkpoint_path)
                    logger.error("step %d failed; last committed state saved to %s", n + 1, path)
                    raise
                self.write_step_outputs(n)
                self.write_logs()
                if (n + 1) % out.checkpoint_every == 0 or n == total - 1:
                    self.save_checkpoint(self.snapshot(), self.checkpoint_path)
                bar.update(1)
        return self.records


def run_load_step(sim: Simulation, n: int) -> StepRecord:
    return sim.run_load_step(n)


def run_simulation(cfg: RunConfig, output_dir: str | Path | None = None, resume: str | Path | None = None,
                   progress: bool = True) -> RunResult:
    """Run every load step of ``cfg``, optionally continuing from a checkpoint."""
    sim = Simulation.from_checkpoint(resume, cfg, output_dir) if resume else Simulation(cfg, output_dir)
    records = sim.run(progress=progress)
    errors = sim.error_norms()
    if errors is not None:
        logger.info("error vs oracle: L2 %.4e (rel %.4e), H1 %.4e (rel %.4e)",
                    errors.l2, errors.l2_relative, errors.h1, errors.h1_relative)
        write_csv(sim.output_dir / "errors.csv", ("l2", "l2_relative", "h1", "h1_relative"),
                  [(errors.l2, errors.l2_relative, errors.h1, errors.h1_relative)])
    return RunResult(records, sim.output_dir, errors, sim)
