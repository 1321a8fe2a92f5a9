"""Reward shaping: normalization, the combined BDE/IP reward, size reduction,
and enthalpy utilities for DFT-style BDE/IP arithmetic."""

from __future__ import annotations

from dataclasses import dataclass

H_HYDROGEN_KCAL = -312.44  # enthalpy of a hydrogen atom, kcal/mol
H_ELECTRON_KCAL = -55.61  # enthalpy of an electron, kcal/mol


@dataclass(frozen=True)
class RewardConfig:
    w_bde: float = 0.8
    w_ip: float = 0.2
    w_gamma: float = 0.5
    bde_bounds: tuple = (55.0, 110.0)
    ip_bounds: tuple = (95.0, 220.0)
    # per-step attenuation of the property terms by steps remaining;
    # set to 1.0 to disable
    bde_factor: float = 0.9
    ip_factor: float = 0.8
    invalid_penalty: float = -1000.0

    def __post_init__(self):
        if self.bde_bounds[0] >= self.bde_bounds[1]:
            raise ValueError("bde_bounds must satisfy min < max")
        if self.ip_bounds[0] >= self.ip_bounds[1]:
            raise ValueError("ip_bounds must satisfy min < max")
        if min(self.w_bde, self.w_ip, self.w_gamma) < 0:
            raise ValueError("weights must be nonnegative")


def normalize(value, bounds):
    """Min-max normalization against dataset bounds; deliberately unclamped
    so values past the dataset extremes keep rewarding the optimizer."""
    lo, hi = bounds
    return (value - lo) / (hi - lo)


def gamma_term(initial, current):
    """Relative reduction of atoms and bonds versus the initial molecule."""
    a0, b0 = initial.n_atoms, initial.n_bonds
    at, bt = current.n_atoms, current.n_bonds
    return ((a0 - at) + (b0 - bt)) / (a0 + b0)


def reward(props, initial, current, steps_remaining, cfg=RewardConfig()):
    """Combined reward; invalid 3D conformers get the flat penalty."""
    if not props.valid3d:
        return cfg.invalid_penalty
    k = steps_remaining
    n_bde = normalize(props.bde, cfg.bde_bounds)
    n_ip = normalize(props.ip, cfg.ip_bounds)
    return (
        -cfg.w_bde * cfg.bde_factor**k * n_bde
        + cfg.w_ip * cfg.ip_factor**k * n_ip
        + cfg.w_gamma * gamma_term(initial, current)
    )


def dft_bde(h_radical, h_molecule):
    """BDE from enthalpies of the radical and the neutral molecule."""
    return h_radical + H_HYDROGEN_KCAL - h_molecule


def dft_ip(h_cation, h_molecule):
    """IP from enthalpies of the radical cation and the neutral molecule."""
    return h_cation + H_ELECTRON_KCAL - h_molecule
