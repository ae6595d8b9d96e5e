"""Brittle damage constitutive model with a spectral tension/compression split.

All functions take strain tensors of shape (..., 2, 2) and per-cell moduli
broadcastable to the leading shape. They operate on float64 torch tensors so
the loss can be differentiated through them; numpy inputs are converted.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch.func import hessian, vmap

logger = logging.getLogger(__name__)

N_PER_KN = 1e3


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=torch.float64)


def safe_sqrt(q: torch.Tensor) -> torch.Tensor:
    positive = q > 0.0
    return torch.where(positive, torch.sqrt(torch.where(positive, q, torch.ones_like(q))), torch.zeros_like(q))


@dataclass(frozen=True)
class MaterialParams:
    """Elastic and fracture constants.

    E, f_t and psi_c in GPa; G_cI, G_cII in N/mm; length_scale in mm.
    """

    E: float
    nu: float
    G_cI: float
    G_cII: float
    length_scale: float
    f_t: float | None = None
    psi_c_override: float | None = None
    plane_stress: bool = False
    damage: bool = True

    def __post_init__(self):
        if self.E <= 0.0:
            raise ValueError("E must be positive")
        if not -1.0 < self.nu < 0.5:
            raise ValueError("Poisson ratio must lie in (-1, 0.5)")
        if min(self.G_cI, self.G_cII, self.length_scale) <= 0.0:
            raise ValueError("G_cI, G_cII and the length scale must be positive")

    @property
    def lam(self) -> float:
        lam = self.E * self.nu / ((1 + self.nu) * (1 - 2 * self.nu))
        if self.plane_stress:
            return 2 * lam * self.mu / (lam + 2 * self.mu)
        return lam

    @property
    def mu(self) -> float:
        return self.E / (2 * (1 + self.nu))

    @property
    def psi_c(self) -> float:
        if self.psi_c_override is not None:
            return float(self.psi_c_override)
        if self.f_t:
            return self.f_t**2 / (2 * self.E)
        return 0.0

    def cell_moduli(self, modulus_factor: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        k = np.asarray(modulus_factor, dtype=float)
        return self.lam * k, self.mu * k


@dataclass
class MaterialState:
    """Committed per-cell state; G_c in N/mm, history in GPa."""

    history: np.ndarray
    damage: np.ndarray
    G_c: np.ndarray
    strain: np.ndarray
    length_scale: float

    @classmethod
    def initial(cls, n_cells: int, params: MaterialParams) -> "MaterialState":
        return cls(
            history=np.zeros(n_cells),
            damage=np.zeros(n_cells),
            G_c=np.full(n_cells, params.G_cI),
            strain=np.zeros((n_cells, 2, 2)),
            length_scale=params.length_scale,
        )

    @property
    def p(self) -> np.ndarray:
        return self.G_c / N_PER_KN / self.length_scale

    @property
    def degradation(self) -> np.ndarray:
        return (1.0 - self.damage) ** 2

    def commit(self, history: np.ndarray, strain: np.ndarray, evolve_damage: bool = True) -> None:
        history = np.maximum(self.history, history)
        if evolve_damage:
            self.damage = np.maximum(self.damage, history / (history + self.p))
        self.history = history
        self.strain = np.array(strain, dtype=float)


def principal_strains(strain) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Principal strains e1 >= e2 and the trace."""
    eps = _t(strain)
    e11, e22, e12 = eps[..., 0, 0], eps[..., 1, 1], eps[..., 0, 1]
    tr = e11 + e22
    r = safe_sqrt((0.5 * (e11 - e22)) ** 2 + e12**2)
    return 0.5 * tr + r, 0.5 * tr - r, tr


def spectral_split(strain, lam, mu):
    """(psi0_plus, psi0_minus, psi_I_plus, psi_II_plus)."""
    eps = _t(strain)
    lam, mu = _t(lam), _t(mu)
    e1, e2, tr = principal_strains(eps)
    psi_I = 0.5 * lam * torch.relu(tr) ** 2
    psi_II = mu * (torch.relu(e1) ** 2 + torch.relu(e2) ** 2)
    psi0 = mu * (eps**2).sum(dim=(-1, -2)) + 0.5 * lam * tr**2
    psi_plus = psi_I + psi_II
    return psi_plus, psi0 - psi_plus, psi_I, psi_II


def update_history(history_old, psi_plus, psi_c: float):
    return torch.relu(torch.maximum(_t(history_old), _t(psi_plus) - psi_c))


def damage_and_degradation(history, p):
    history, p = _t(history), _t(p)
    eta = history / (history + p)
    return eta, (1.0 - eta) ** 2


def energy_density(strain, eta, lam, mu, p):
    """psi = g(eta) psi0_plus + psi0_minus + p eta^2."""
    eta, p = _t(eta), _t(p)
    psi_plus, psi_minus, _, _ = spectral_split(strain, lam, mu)
    return (1.0 - eta) ** 2 * psi_plus + psi_minus + p * eta**2


def stress(strain, eta, lam, mu):
    eps = _t(strain)
    lam, mu, eta = _t(lam), _t(mu), _t(eta)
    e1, e2, tr = principal_strains(eps)
    theta = 0.5 * torch.atan2(2 * eps[..., 0, 1], eps[..., 0, 0] - eps[..., 1, 1])
    c, s = torch.cos(theta), torch.sin(theta)
    n1 = torch.stack([c, s], dim=-1)
    n2 = torch.stack([-s, c], dim=-1)
    eye = torch.eye(2, dtype=torch.float64)

    def _outer(n):
        return n[..., :, None] * n[..., None, :]

    lam_, mu_ = lam[..., None, None], mu[..., None, None]
    sigma0 = lam_ * tr[..., None, None] * eye + 2 * mu_ * eps
    sigma_plus = lam_ * torch.relu(tr)[..., None, None] * eye + 2 * mu_ * (
        torch.relu(e1)[..., None, None] * _outer(n1) + torch.relu(e2)[..., None, None] * _outer(n2)
    )
    g = ((1.0 - eta) ** 2)[..., None, None]
    return g * sigma_plus + (sigma0 - sigma_plus)


def critical_release_rate(psi_I, psi_II, G_cI: float, G_cII: float, previous):
    """Mixed-mode G_c; keeps ``previous`` where no tensile energy is stored."""
    psi_I, psi_II, previous = _t(psi_I), _t(psi_II), _t(previous)
    denom = psi_I / G_cI + psi_II / G_cII
    active = denom > 0.0
    safe = torch.where(active, denom, torch.ones_like(denom))
    return torch.where(active, (psi_I + psi_II) / safe, previous)


def voigt_to_tensor(v: torch.Tensor) -> torch.Tensor:
    """(e11, e22, gamma12) -> symmetric 2x2 strain."""
    half = 0.5 * v[..., 2]
    return torch.stack(
        [torch.stack([v[..., 0], half], dim=-1), torch.stack([half, v[..., 1]], dim=-1)], dim=-2
    )


def tensor_to_voigt(eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    return np.stack([eps[..., 0, 0], eps[..., 1, 1], 2 * eps[..., 0, 1]], axis=-1)


def tangent_moduli(strain, lam, mu) -> tuple[np.ndarray, np.ndarray]:
    """Elastic moduli C and the Hessian of psi0_plus, both in Voigt form (N, 3, 3)."""
    v = torch.as_tensor(tensor_to_voigt(strain), dtype=torch.float64).reshape(-1, 3)
    lam = _t(lam).expand(len(v))
    mu = _t(mu).expand(len(v))

    def _plus(vi, li, mi):
        return spectral_split(voigt_to_tensor(vi), li, mi)[0]

    def _total(vi, li, mi):
        eps = voigt_to_tensor(vi)
        return mi * (eps**2).sum() + 0.5 * li * torch.trace(eps) ** 2

    C_plus = vmap(hessian(_plus))(v, lam, mu)
    C = vmap(hessian(_total))(v, lam, mu)
    return C.numpy(), C_plus.numpy()


def stagger_release_rate(state: MaterialState, params: MaterialParams, lam, mu) -> None:
    """Recompute per-cell G_c from the committed strains (frozen for the coming step)."""
    _, _, psi_I, psi_II = spectral_split(state.strain, lam, mu)
    state.G_c = critical_release_rate(psi_I, psi_II, params.G_cI, params.G_cII, state.G_c).numpy()
