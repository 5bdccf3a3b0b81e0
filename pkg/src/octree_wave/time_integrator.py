"""Central difference time stepping with a diagonal mass matrix.

The update of every DOF only reads that DOF's entries of the inputs, so the
state vectors can be split across workers in any way without changing a bit
of the result.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .octree_mesh import OctreeMesh
    from .pattern_catalog import MasterCatalog

logger = logging.getLogger(__name__)

DEFAULT_SAFETY = 0.95
DIVERGENCE_FACTOR = 1e12


class DivergenceError(RuntimeError):
    """Raised when the displacement field stops being finite or blows up."""

    def __init__(self, message: str, step: int, last_stable_step: int | None = None) -> None:
        super().__init__(message)
        self.step = step
        self.last_stable_step = step - 1 if last_stable_step is None else last_stable_step


@dataclass(frozen=True)
class TimeSettings:
    """Time step (None for automatic), duration, mass damping and safety factor."""

    duration: float
    dt: float | None = None
    alpha: float = 0.0
    safety: float = DEFAULT_SAFETY

    def __post_init__(self) -> None:
        if not self.duration > 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if self.dt is not None and not self.dt > 0:
            raise ValueError(f"time step must be positive, got {self.dt}")
        if self.alpha < 0:
            raise ValueError(f"mass damping coefficient must be non-negative, got {self.alpha}")
        if not 0.0 < self.safety <= 1.0:
            raise ValueError(f"safety factor must lie in (0, 1], got {self.safety}")

    def resolve(self, critical: float) -> float:
        """Step size to use given the critical step of the mesh."""

        if self.dt is None:
            dt = self.safety * critical
        else:
            dt = self.dt
            if dt > critical:
                logger.warning(f"time step {dt:.4e} s exceeds the critical step {critical:.4e} s")
        if dt > self.duration:
            raise ValueError(f"time step {dt:.4e} s is longer than the duration {self.duration:.4e} s")
        return dt

    def step_count(self, dt: float) -> int:
        ratio = self.duration / dt
        nearest = round(ratio)
        if abs(ratio - nearest) <= 1e-9 * max(1.0, ratio):
            return int(nearest)
        return int(math.ceil(ratio))


@dataclass
class StateTriplet:
    """Displacements at steps n-1, n and n+1."""

    previous: np.ndarray
    current: np.ndarray
    next: np.ndarray

    def __post_init__(self) -> None:
        sizes = {len(self.previous), len(self.current), len(self.next)}
        if len(sizes) != 1:
            raise ValueError(f"state vectors differ in length: {sorted(sizes)}")

    @classmethod
    def zeros(cls, n_dof: int) -> "StateTriplet":
        return cls(np.zeros(n_dof), np.zeros(n_dof), np.zeros(n_dof))

    def rotate(self) -> None:
        """Shift n -> n-1 and n+1 -> n, reusing the oldest buffer for the next step."""

        self.previous, self.current, self.next = self.current, self.next, self.previous


def critical_time_step(mesh: "OctreeMesh", catalog: "MasterCatalog") -> float:
    """Smallest element-level stability limit 2/omega_max over the mesh.

    Each element scales its master's unit frequency by sqrt(E/rho)/L. Material
    properties come from ``mesh.materials``, so no separate table is passed.
    """

    best = math.inf
    groups: dict[tuple[int, int], list[int]] = {}
    for e, cell in enumerate(mesh.cells):
        groups.setdefault((cell.canonical_id, cell.material), []).append(e)
    sizes = mesh.sizes()
    for (canonical_id, material_id), members in groups.items():
        material = mesh.materials[material_id]
        master = catalog.get(canonical_id, material.poisson_ratio)
        smallest = float(np.min(sizes[members]))
        step = math.sqrt(material.density / material.youngs_modulus) * smallest * 2.0 / master.omega_max
        best = min(best, step)
    logger.debug(f"critical time step {best:.6e} s from {len(groups)} (pattern, material) pair(s)")
    return best


def init_history(u0: np.ndarray, v0: np.ndarray, a0: np.ndarray, dt: float) -> np.ndarray:
    """Fictitious displacement at step -1."""

    u0, v0, a0 = (np.asarray(x, dtype=float) for x in (u0, v0, a0))
    if not u0.shape == v0.shape == a0.shape:
        raise ValueError(f"initial vectors differ in shape: {u0.shape}, {v0.shape}, {a0.shape}")
    return u0 - dt * v0 + (0.5 * dt * dt) * a0


def initial_acceleration(
    mass: np.ndarray, external: np.ndarray, internal: np.ndarray, velocity: np.ndarray, alpha: float = 0.0
) -> np.ndarray:
    return (external - internal) / mass - alpha * velocity


def cdm_step(
    previous: np.ndarray,
    current: np.ndarray,
    external: np.ndarray,
    internal: np.ndarray,
    mass: np.ndarray,
    alpha: float,
    dt: float,
    out: np.ndarray | None = None,
    step: int = 0,
) -> np.ndarray:
    """One explicit step of the damped equation of motion with diagonal mass."""

    half = 0.5 * alpha * dt
    keep = 1.0 - half
    scale = 1.0 + half
    if out is None:
        out = np.empty_like(current)
    np.subtract(external, internal, out=out)
    out *= dt * dt
    out /= mass
    out += 2.0 * current
    out -= keep * previous
    out /= scale
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite displacement at step {step}", step=step)
    return out


class DivergenceMonitor:
    """Aborts once ||U||_inf exceeds ``factor`` times the initial load scale."""

    def __init__(self, load_scale: float, factor: float = DIVERGENCE_FACTOR) -> None:
        self.limit = factor * (load_scale if load_scale > 0 else 1.0)

    def check(self, displacement: np.ndarray, step: int) -> None:
        peak = float(np.max(np.abs(displacement), initial=0.0))
        if not math.isfinite(peak) or peak > self.limit:
            raise DivergenceError(
                f"displacement {peak:.3e} exceeds the divergence limit {self.limit:.3e} at step {step}",
                step=step,
            )


__all__ = [
    "DEFAULT_SAFETY",
    "DIVERGENCE_FACTOR",
    "DivergenceError",
    "DivergenceMonitor",
    "StateTriplet",
    "TimeSettings",
    "cdm_step",
    "critical_time_step",
    "init_history",
    "initial_acceleration",
]
