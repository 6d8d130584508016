"""Delay-domain dictionary for the coarse (carrier-free) signal model."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import TWO_PI, MultibandConfig


@dataclass(frozen=True)
class DelayGrid:
    """Uniform delay grid ``d_bar`` with per-point off-grid corrections ``delta_tau``."""

    d_bar: np.ndarray
    delta_tau: np.ndarray | None = None

    def __post_init__(self):
        d = np.asarray(self.d_bar, dtype=float).copy()
        if d.ndim != 1 or d.size < 1:
            raise ValueError("grid must be a non-empty 1-D array")
        if d.size > 1 and np.any(np.diff(d) <= 0):
            raise ValueError("grid delays must be strictly increasing")
        dt = np.zeros_like(d) if self.delta_tau is None else np.asarray(self.delta_tau, float).copy()
        if dt.shape != d.shape:
            raise ValueError("delta_tau must match the grid size")
        d.setflags(write=False)
        dt.setflags(write=False)
        object.__setattr__(self, "d_bar", d)
        object.__setattr__(self, "delta_tau", dt)

    @classmethod
    def uniform(cls, t_max: float, size: int) -> "DelayGrid":
        """``size`` points over ``[0, t_max]``, endpoints included."""
        if size < 2:
            return cls(np.zeros(1))
        return cls(np.linspace(0.0, t_max, size))

    @classmethod
    def for_config(cls, config: MultibandConfig, t_max: float = 250e-9, oversample: float = 1.0) -> "DelayGrid":
        """Grid from 0 to at least ``t_max`` with spacing exactly ``1 / (oversample * B)``.

        At ``oversample=1`` the on-grid steering vectors of a band are
        orthogonal DFT columns.
        """
        if t_max >= 1.0 / (2.0 * max(config.fs_hz)):
            raise ValueError("t_max must stay below 1/(2 fs) to avoid delay aliasing")
        step = 1.0 / (oversample * max(config.bandwidth_hz))
        size = int(np.ceil(t_max / step - 1e-9)) + 1
        return cls(np.arange(size) * step)

    @property
    def L(self) -> int:
        return self.d_bar.size

    @property
    def spacing(self) -> float:
        return float(self.d_bar[1] - self.d_bar[0]) if self.L > 1 else np.inf

    @property
    def delays(self) -> np.ndarray:
        return self.d_bar + self.delta_tau

    def with_offsets(self, delta_tau) -> "DelayGrid":
        return replace(self, delta_tau=np.asarray(delta_tau, float))

    def clamp(self, delta_tau) -> np.ndarray:
        half = 0.5 * self.spacing
        return np.clip(delta_tau, -half, half)


def steering_vector(m: int, d: float, config: MultibandConfig) -> np.ndarray:
    """exp(-j 2 pi n fs_m d) over the subcarrier indices of subband ``m``."""
    n = config.indices(m)
    return np.exp(-1j * TWO_PI * n * config.fs_hz[m] * d)


def timing_offset_matrix(m: int, delta: float, config: MultibandConfig) -> np.ndarray:
    return np.diag(timing_offset_diag(m, delta, config))


def timing_offset_diag(m: int, delta: float, config: MultibandConfig) -> np.ndarray:
    """Diagonal of the timing-offset matrix; cheaper to carry around than the full matrix."""
    return steering_vector(m, delta, config)


def basis_matrix(m: int, grid: DelayGrid, config: MultibandConfig) -> np.ndarray:
    n = config.indices(m)
    return np.exp(-1j * TWO_PI * config.fs_hz[m] * np.outer(n, grid.delays))


def measurement_matrix(m: int, delta: float, grid: DelayGrid, config: MultibandConfig) -> np.ndarray:
    """Phi_m = S_m(delta) A_m(delta_tau), shape (N_m, L)."""
    return timing_offset_diag(m, delta, config)[:, None] * basis_matrix(m, grid, config)
