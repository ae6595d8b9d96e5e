"""Total potential loss, its reverse-mode gradient and the flat parameter view used by the optimizers."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import NonFiniteLossError
from .loads import BoundaryData
from .material import safe_sqrt, spectral_split, update_history
from .model import NNRKModel, ShapeTable

logger = logging.getLogger(__name__)

GROUPS = ("d", "WC", "WL", "WS")


@dataclass
class LossSettings:
    kappa_bc: float = 1e4
    kappa_pen: float = 1e4
    wc_ridge: float = 1e-8


@dataclass
class StepMaterial:
    """Per-cell material data frozen for one load step (GPa, mm)."""

    lam: torch.Tensor
    mu: torch.Tensor
    p: torch.Tensor
    history: torch.Tensor
    damage: torch.Tensor
    psi_c: float
    E: float
    mu_bulk: float
    damage_enabled: bool = True
    moduli: torch.Tensor | None = None

    @classmethod
    def from_arrays(cls, lam, mu, p, history, damage, psi_c, E, mu_bulk, damage_enabled=True,
                    moduli=None) -> "StepMaterial":
        def _t(x):
            return torch.as_tensor(np.asarray(x, dtype=float), dtype=torch.float64)

        return cls(_t(lam), _t(mu), _t(p), _t(history), _t(damage), float(psi_c), float(E), float(mu_bulk),
                   damage_enabled, None if moduli is None else _t(moduli))


@dataclass
class LossBreakdown:
    strain: float
    external: float
    reg: float
    bc: float
    ridge: float

    @property
    def total(self) -> float:
        return self.strain + self.external + self.reg + self.bc + self.ridge


@dataclass
class LossTerms:
    strain: torch.Tensor
    external: torch.Tensor
    reg: torch.Tensor
    bc: torch.Tensor
    ridge: torch.Tensor
    psi_plus: torch.Tensor
    eta: torch.Tensor
    strain_tensor: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.strain + self.external + self.reg + self.bc + self.ridge

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(*(float(t.detach()) for t in (self.strain, self.external, self.reg, self.bc, self.ridge)))


def grad_y_norms(grad_y: list[torch.Tensor]) -> torch.Tensor:
    """|grad y_{J,alpha}| per cell, shape (N_IC, n_blocks, 2)."""
    if not grad_y:
        return torch.zeros((0,), dtype=torch.float64)
    stacked = torch.stack(grad_y, dim=1)
    return safe_sqrt((stacked**2).sum(dim=-1))


def dirichlet_traction(eps: torch.Tensor, moduli: torch.Tensor, boundary: BoundaryData) -> torch.Tensor:
    """Constrained traction component of every Dirichlet entry, from the smoothed stress D_L eps_L of its cell."""
    cell = boundary.dir_cell
    e = eps[cell]
    voigt = torch.stack([e[:, 0, 0], e[:, 1, 1], 2.0 * e[:, 0, 1]], dim=-1)
    s = torch.einsum("kab,kb->ka", moduli[cell], voigt)
    n = boundary.dir_normal
    t1 = s[:, 0] * n[:, 0] + s[:, 2] * n[:, 1]
    t2 = s[:, 2] * n[:, 0] + s[:, 1] * n[:, 1]
    return torch.where(boundary.dir_comp == 0, t1, t2)


def evaluate_loss(model: NNRKModel, table: ShapeTable, volumes: torch.Tensor, material: StepMaterial,
                  boundary: BoundaryData, settings: LossSettings, live_damage: bool = True) -> LossTerms:
    """Pi_strain + Pi_external + Pi_reg + Pi_bc + Pi_ridge for the current parameters.

    With ``live_damage`` the damage follows the current tensile energy above
    the committed history floor; otherwise the committed damage is used.
    """
    ev = model.fields(table)
    grad_u, grad_y = model.smoothed_gradients(table, ev)
    eps = 0.5 * (grad_u + grad_u.transpose(-1, -2))
    psi_plus, psi_minus, _, _ = spectral_split(eps, material.lam, material.mu)

    if not material.damage_enabled:
        eta = torch.zeros_like(psi_plus)
    elif live_damage:
        history = update_history(material.history, psi_plus, material.psi_c)
        eta = torch.maximum(history / (history + material.p), material.damage)
    else:
        eta = material.damage
    psi = (1.0 - eta) ** 2 * psi_plus + psi_minus + material.p * eta**2
    strain = (psi * volumes).sum()

    work = ((boundary.body * ev.u_cell).sum(dim=-1) * volumes).sum()
    if len(boundary.neu_point):
        u_n = ev.u_surf[boundary.neu_point]
        work = work + ((boundary.neu_traction * u_n).sum(dim=-1) * boundary.neu_length).sum()
    external = -work

    if len(boundary.dir_point):
        u_d = ev.u_surf[boundary.dir_point, boundary.dir_comp]
        gap = u_d - boundary.dir_value
        bc = 0.5 * settings.kappa_bc * material.E * (boundary.dir_length * gap**2).sum()
        if material.moduli is not None:
            # symmetric Nitsche term
            bc = bc - (boundary.dir_length * dirichlet_traction(eps, material.moduli, boundary) * gap).sum()
    else:
        bc = torch.zeros((), dtype=torch.float64)

    if grad_y:
        excess = torch.relu(grad_y_norms(grad_y) - 1.0) ** 2
        reg = 0.5 * settings.kappa_pen * material.mu_bulk * (excess.sum(dim=(1, 2)) * volumes).sum()
        masked = model.wc * model.node_mask[:, None, None]
        ridge = 0.5 * settings.wc_ridge * material.E * (masked**2).sum()
    else:
        reg = torch.zeros((), dtype=torch.float64)
        ridge = torch.zeros((), dtype=torch.float64)

    terms = LossTerms(strain, external, reg, bc, ridge, psi_plus, eta, eps)
    if not torch.isfinite(terms.total):
        bad = torch.nonzero(~torch.isfinite(psi)).flatten()
        raise NonFiniteLossError("loss is not finite", cell=int(bad[0]) if len(bad) else None)
    return terms


class ParameterVector:
    """Flat float64 view over the model parameters, grouped as d, W^C, W^L and W^S."""

    def __init__(self, model: NNRKModel):
        self.model = model
        entries = [("d", model.d), ("WC", model.wc)]
        for block in model.blocks:
            entries += [("WL", p) for p in block.net.parameters()]
            entries += [("WS", p) for p in block.shapes.parameters()]
        self.entries = entries
        sizes = [p.numel() for _, p in entries]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.group = np.concatenate(
            [np.full(n, GROUPS.index(g)) for (g, _), n in zip(entries, sizes)]
        ) if sizes else np.zeros(0, dtype=int)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.detach().reshape(-1).numpy() for _, p in self.entries])

    @torch.no_grad()
    def unflatten(self, flat: np.ndarray) -> None:
        for (_, p), lo, hi in zip(self.entries, self.offsets[:-1], self.offsets[1:]):
            p.copy_(torch.as_tensor(flat[lo:hi]).reshape(p.shape))

    def grad(self) -> np.ndarray:
        return np.concatenate([
            np.zeros(p.numel()) if p.grad is None else p.grad.reshape(-1).numpy() for _, p in self.entries
        ])

    def slice(self, group: str) -> np.ndarray:
        return np.flatnonzero(self.group == GROUPS.index(group))

    def mask(self, groups=GROUPS) -> np.ndarray:
        """Free entries of the given groups; W^C outside the enriched nodes is never free."""
        free = np.isin(self.group, [GROUPS.index(g) for g in groups])
        wc = self.slice("WC")
        if len(wc):
            node_mask = self.model.node_mask.numpy() > 0
            per_entry = np.repeat(node_mask, self.model.wc.shape[1] * 2)
            free[wc] &= per_entry
        return free

    def scale(self, u_ref: float) -> np.ndarray:
        out = np.ones(self.size)
        out[np.isin(self.group, [GROUPS.index("d"), GROUPS.index("WC")])] = u_ref
        return out


def gradient(pv: ParameterVector, loss_fn: Callable[[], LossTerms]) -> tuple[LossTerms, np.ndarray]:
    """Loss and the exact gradient of its total with respect to every parameter."""
    pv.model.zero_grad(set_to_none=True)
    terms = loss_fn()
    terms.total.backward()
    return terms, pv.grad()


class Objective:
    """Loss restricted to the free parameters, in scaled optimizer variables z = p / scale."""

    def __init__(self, pv: ParameterVector, loss_fn: Callable[[], LossTerms], groups=GROUPS,
                 u_ref: float = 1.0, trace: Callable[[float], None] | None = None):
        self.pv = pv
        self.loss_fn = loss_fn
        self.free = pv.mask(groups)
        self.scale = pv.scale(u_ref)[self.free]
        self.base = pv.flatten()
        self.trace = trace
        self.last: LossBreakdown | None = None
        self.evaluations = 0

    def x0(self) -> np.ndarray:
        return self.pv.flatten()[self.free] / self.scale

    def apply(self, z: np.ndarray) -> None:
        full = self.pv.flatten()
        full[self.free] = z * self.scale
        self.pv.unflatten(full)

    def __call__(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        self.apply(z)
        try:
            terms, g = gradient(self.pv, self.loss_fn)
        except NonFiniteLossError as e:
            logger.debug("objective not finite: %s", e)
            self.evaluations += 1
            return np.inf, np.full(len(z), np.nan)
        self.evaluations += 1
        self.last = terms.breakdown()
        value = self.last.total
        if self.trace is not None:
            self.trace(value)
        return value, g[self.free] * self.scale
