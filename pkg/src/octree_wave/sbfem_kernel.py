"""Scaled boundary finite element matrices of a star-convex polyhedral cell.

Only the cell boundary is discretized (linear triangles and bilinear quads);
the radial direction is solved analytically. A displacement mode of the cell
has the form ``u(xi) = xi**s * phi`` with ``xi`` the normalized distance from
the scaling centre, so bounded cells keep the modes with ``Re(s) >= 0``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

logger = logging.getLogger(__name__)

_GAUSS = 1.0 / np.sqrt(3.0)
QUAD_RULE = (
    np.array([(-_GAUSS, -_GAUSS), (_GAUSS, -_GAUSS), (_GAUSS, _GAUSS), (-_GAUSS, _GAUSS)]),
    np.ones(4),
)
TRIANGLE_RULE = (
    np.array([(1.0 / 6.0, 1.0 / 6.0), (2.0 / 3.0, 1.0 / 6.0), (1.0 / 6.0, 2.0 / 3.0)]),
    np.full(3, 1.0 / 6.0),
)

CONDITION_LIMIT = 1e12
ASYMMETRY_LIMIT = 1e-8
_LOCAL_TOL = 1e-12


class KernelError(ValueError):
    """Raised when a cell cannot produce valid element matrices."""


def shape_eval(kind: str, eta: float, zeta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shape functions and their local derivatives at (eta, zeta)."""

    if kind == "quad":
        if abs(eta) > 1.0 + _LOCAL_TOL or abs(zeta) > 1.0 + _LOCAL_TOL:
            raise KernelError(f"quad local coordinates ({eta}, {zeta}) outside [-1, 1]^2")
        n = 0.25 * np.array(
            [
                (1 - eta) * (1 - zeta),
                (1 + eta) * (1 - zeta),
                (1 + eta) * (1 + zeta),
                (1 - eta) * (1 + zeta),
            ]
        )
        n_eta = 0.25 * np.array([-(1 - zeta), 1 - zeta, 1 + zeta, -(1 + zeta)])
        n_zeta = 0.25 * np.array([-(1 - eta), -(1 + eta), 1 + eta, 1 - eta])
        return n, n_eta, n_zeta
    if kind == "triangle":
        if eta < -_LOCAL_TOL or zeta < -_LOCAL_TOL or eta + zeta > 1.0 + _LOCAL_TOL:
            raise KernelError(f"triangle local coordinates ({eta}, {zeta}) outside the reference triangle")
        n = np.array([1.0 - eta - zeta, eta, zeta])
        return n, np.array([-1.0, 1.0, 0.0]), np.array([-1.0, 0.0, 1.0])
    raise KernelError(f"unknown surface element kind {kind!r}")


def voigt_operator(vector: np.ndarray) -> np.ndarray:
    """6x3 matrix mapping a nodal vector to engineering strains along ``vector``."""

    x, y, z = vector
    return np.array(
        [
            [x, 0.0, 0.0],
            [0.0, y, 0.0],
            [0.0, 0.0, z],
            [0.0, z, y],
            [z, 0.0, x],
            [y, x, 0.0],
        ]
    )


def elasticity_matrix(youngs_modulus: float, poisson_ratio: float) -> np.ndarray:
    if youngs_modulus <= 0:
        raise KernelError(f"Young's modulus must be positive, got {youngs_modulus}")
    if not -1.0 < poisson_ratio < 0.5:
        raise KernelError(f"Poisson ratio must lie in (-1, 0.5), got {poisson_ratio}")
    lam = youngs_modulus * poisson_ratio / ((1 + poisson_ratio) * (1 - 2 * poisson_ratio))
    mu = youngs_modulus / (2 * (1 + poisson_ratio))
    d = np.zeros((6, 6))
    d[:3, :3] = lam
    d[np.arange(3), np.arange(3)] = lam + 2 * mu
    d[np.arange(3, 6), np.arange(3, 6)] = mu
    return d


def _component_expand(values: np.ndarray) -> np.ndarray:
    return np.kron(values[None, :], np.eye(3))


@dataclass
class SurfacePoint:
    weight: float
    shape: np.ndarray
    shape_eta: np.ndarray
    shape_zeta: np.ndarray
    jacobian: np.ndarray
    det_j: float
    b1: np.ndarray
    b2: np.ndarray
    b3: np.ndarray
    strain_b1: np.ndarray
    strain_b2: np.ndarray


@dataclass
class SurfaceElementGeometry:
    """A boundary element with nodal coordinates relative to the scaling centre."""

    kind: str
    coords: np.ndarray

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=float)
        expected = {"quad": 4, "triangle": 3}.get(self.kind)
        if expected is None or self.coords.shape != (expected, 3):
            raise KernelError(f"{self.kind} element needs {expected} nodes, got {self.coords.shape}")

    @property
    def n_dof(self) -> int:
        return 3 * len(self.coords)

    def evaluate(self, eta: float, zeta: float, weight: float = 1.0) -> SurfacePoint:
        n, n_eta, n_zeta = shape_eval(self.kind, eta, zeta)
        r = n @ self.coords
        r_eta = n_eta @ self.coords
        r_zeta = n_zeta @ self.coords
        g_xi = np.cross(r_eta, r_zeta)
        g_eta = np.cross(r_zeta, r)
        g_zeta = np.cross(r, r_eta)
        det_j = float(r @ g_xi)
        jacobian = np.vstack([r, r_eta, r_zeta])
        if det_j <= 0.0:
            raise KernelError(f"det J = {det_j:.3e} <= 0 at ({eta:.3f}, {zeta:.3f})")
        b1 = voigt_operator(g_xi) / det_j
        b2 = voigt_operator(g_eta) / det_j
        b3 = voigt_operator(g_zeta) / det_j
        strain_b1 = b1 @ _component_expand(n)
        strain_b2 = b2 @ _component_expand(n_eta) + b3 @ _component_expand(n_zeta)
        return SurfacePoint(weight, n, n_eta, n_zeta, jacobian, det_j, b1, b2, b3, strain_b1, strain_b2)

    def quadrature_points(self) -> list[SurfacePoint]:
        points, weights = QUAD_RULE if self.kind == "quad" else TRIANGLE_RULE
        return [self.evaluate(p[0], p[1], w) for p, w in zip(points, weights)]


@dataclass
class CellCoefficients:
    e0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    m0: np.ndarray

    @property
    def n_dof(self) -> int:
        return self.e0.shape[0]


@dataclass
class RadialSolution:
    """Selected modes of the radial problem.

    Column ``i`` of ``phi_u``/``phi_q`` is the displacement/force mode with
    exponent ``exponents[i]``. The integration constants of the unbounded
    modes are eliminated by construction.
    """

    exponents: np.ndarray
    phi_u: np.ndarray
    phi_q: np.ndarray
    condition: float
    residual: float = field(default=0.0)


def cell_coefficients(
    coords: np.ndarray,
    elements: Sequence[tuple[str, Sequence[int]]],
    d_matrix: np.ndarray,
    density: float,
    cell_id: object = None,
) -> CellCoefficients:
    """Integrate and assemble E0, E1, E2 and M0 over the cell boundary."""

    coords = np.asarray(coords, dtype=float)
    n_dof = 3 * len(coords)
    e0 = np.zeros((n_dof, n_dof))
    e1 = np.zeros((n_dof, n_dof))
    e2 = np.zeros((n_dof, n_dof))
    m0 = np.zeros((n_dof, n_dof))
    for index, (kind, nodes) in enumerate(elements):
        nodes = np.asarray(nodes, dtype=np.int64)
        geometry = SurfaceElementGeometry(kind, coords[nodes])
        dofs = (3 * nodes[:, None] + np.arange(3)).ravel()
        block = np.ix_(dofs, dofs)
        try:
            points = geometry.quadrature_points()
        except KernelError as exc:
            raise KernelError(f"cell {cell_id}: surface element {index} ({kind}): {exc}") from exc
        for point in points:
            scale = point.weight * point.det_j
            db1 = d_matrix @ point.strain_b1
            e0[block] += scale * point.strain_b1.T @ db1
            e1[block] += scale * point.strain_b2.T @ db1
            e2[block] += scale * point.strain_b2.T @ d_matrix @ point.strain_b2
            nu = _component_expand(point.shape)
            m0[block] += scale * density * nu.T @ nu
    return CellCoefficients(e0=e0, e1=e1, e2=e2, m0=m0)


def _translation_modes(n_nodes: int) -> np.ndarray:
    return np.tile(np.eye(3), (n_nodes, 1))


def quadratic_residual(coeffs: CellCoefficients, exponent: complex, mode: np.ndarray) -> float:
    """Relative residual of one mode in the second-order radial equation."""

    e0, e1, e2 = coeffs.e0, coeffs.e1, coeffs.e2
    linear = e0 - e1 + e1.T
    constant = e1.T - e2
    value = (exponent**2 * e0 + exponent * linear + constant) @ mode
    scale = (
        abs(exponent) ** 2 * np.linalg.norm(e0, 2)
        + abs(exponent) * np.linalg.norm(linear, 2)
        + np.linalg.norm(constant, 2)
    ) * np.linalg.norm(mode)
    return float(np.linalg.norm(value) / scale) if scale > 0 else 0.0


def radial_eigensolve(coeffs: CellCoefficients, cell_id: object = None) -> RadialSolution:
    """Solve the first-order form of the radial equation and keep bounded modes."""

    n_dof = coeffs.n_dof
    try:
        e0_inv = scipy.linalg.cho_solve(scipy.linalg.cho_factor(coeffs.e0), np.eye(n_dof))
    except np.linalg.LinAlgError as exc:
        raise KernelError(f"cell {cell_id}: E0 is not positive definite") from exc
    e1 = coeffs.e1
    hamiltonian = np.block(
        [
            [-e0_inv @ e1.T, e0_inv],
            [coeffs.e2 - e1 @ e0_inv @ e1.T, e1 @ e0_inv - np.eye(n_dof)],
        ]
    )
    try:
        values, vectors = scipy.linalg.eig(hamiltonian)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise KernelError(f"cell {cell_id}: eigen decomposition failed ({exc})") from exc

    bounded = np.flatnonzero(values.real > -0.5)
    if bounded.size != n_dof:
        raise KernelError(f"cell {cell_id}: found {bounded.size} bounded modes, expected {n_dof}")
    if np.max(values.real[np.setdiff1d(np.arange(2 * n_dof), bounded)]) > -0.5:
        raise KernelError(f"cell {cell_id}: exponent pairing broken")
    order = bounded[np.argsort(-values.real[bounded], kind="stable")]
    exponents = values[order]
    phi_u = vectors[:n_dof, order]
    phi_q = vectors[n_dof:, order]

    # the three exponents nearest zero are the rigid translations
    rigid = np.argsort(np.abs(exponents), kind="stable")[:3]
    if np.max(np.abs(exponents[rigid])) > 1e-6:
        raise KernelError(f"cell {cell_id}: no rigid translation modes (|s| = {np.abs(exponents[rigid])})")
    exponents = exponents.copy()
    exponents[rigid] = 0.0
    phi_u[:, rigid] = _translation_modes(n_dof // 3)
    phi_q[:, rigid] = 0.0
    if np.min(exponents.real) < -1e-10:
        raise KernelError(f"cell {cell_id}: selected exponent with negative real part {np.min(exponents.real)}")

    norms = np.linalg.norm(phi_u, axis=0)
    phi_u = phi_u / norms
    phi_q = phi_q / norms
    condition = float(np.linalg.cond(phi_u))
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        raise KernelError(f"cell {cell_id}: near-defective displacement modes (condition {condition:.3e})")
    residual = max(quadratic_residual(coeffs, s, phi_u[:, i]) for i, s in enumerate(exponents))
    logger.debug(f"cell {cell_id}: {n_dof} modes, condition {condition:.2e}, residual {residual:.2e}")
    return RadialSolution(exponents=exponents, phi_u=phi_u, phi_q=phi_q, condition=condition, residual=residual)


def stiffness(solution: RadialSolution, cell_id: object = None) -> np.ndarray:
    k = np.linalg.solve(solution.phi_u.T, solution.phi_q.T).T
    scale = np.linalg.norm(k)
    if np.linalg.norm(k.imag) > ASYMMETRY_LIMIT * scale:
        raise KernelError(f"cell {cell_id}: stiffness has an imaginary part")
    k = k.real
    asymmetry = np.linalg.norm(k - k.T) / scale
    if asymmetry > ASYMMETRY_LIMIT:
        raise KernelError(f"cell {cell_id}: stiffness asymmetry {asymmetry:.3e} above {ASYMMETRY_LIMIT}")
    return 0.5 * (k + k.T)


def consistent_mass(solution: RadialSolution, m0: np.ndarray, cell_id: object = None) -> np.ndarray:
    phi_u = solution.phi_u
    s = solution.exponents
    projected = phi_u.T @ m0 @ phi_u
    radial = projected / (s[:, None] + s[None, :] + 3.0)
    left = np.linalg.solve(phi_u.T, radial)
    mass = np.linalg.solve(phi_u.T, left.T).T.real
    mass = 0.5 * (mass + mass.T)
    try:
        scipy.linalg.cholesky(mass)
    except np.linalg.LinAlgError as exc:
        raise KernelError(f"cell {cell_id}: consistent mass is not positive definite") from exc
    return mass


def lump_mass(mass: np.ndarray, dof_directions: np.ndarray | None = None, cell_id: object = None) -> np.ndarray:
    """Row sums restricted to DOFs sharing the row's coordinate direction."""

    n_dof = mass.shape[0]
    directions = np.arange(n_dof) % 3 if dof_directions is None else np.asarray(dof_directions)
    lumped = np.empty(n_dof)
    for direction in np.unique(directions):
        members = np.flatnonzero(directions == direction)
        lumped[members] = mass[np.ix_(members, members)].sum(axis=1)
    if np.min(lumped) <= 0.0:
        raise KernelError(f"cell {cell_id}: non-positive lumped mass {np.min(lumped):.3e}")
    return lumped


def element_max_frequency(stiffness_matrix: np.ndarray, lumped: np.ndarray) -> float:
    """Largest circular frequency of (K, diag(M))."""

    lumped = np.asarray(lumped, dtype=float)
    k = np.atleast_2d(np.asarray(stiffness_matrix, dtype=float))
    if k.shape != (lumped.size, lumped.size):
        raise KernelError(f"stiffness {k.shape} does not match {lumped.size} masses")
    if np.min(lumped) <= 0.0:
        raise KernelError("lumped masses must be positive")
    scale = 1.0 / np.sqrt(lumped)
    scaled = scale[:, None] * k * scale[None, :]
    top = scipy.linalg.eigvalsh(scaled, subset_by_index=[lumped.size - 1, lumped.size - 1])[-1]
    return float(np.sqrt(max(top, 0.0)))


@dataclass
class ElementMatrices:
    stiffness: np.ndarray
    consistent_mass: np.ndarray
    lumped_mass: np.ndarray
    omega_max: float
    exponents: np.ndarray


def element_matrices(
    coords: np.ndarray,
    elements: Sequence[tuple[str, Sequence[int]]],
    youngs_modulus: float,
    poisson_ratio: float,
    density: float,
    cell_id: object = None,
) -> ElementMatrices:
    """Stiffness, consistent and lumped mass, and maximum frequency of one cell."""

    d_matrix = elasticity_matrix(youngs_modulus, poisson_ratio)
    coeffs = cell_coefficients(coords, elements, d_matrix, density, cell_id=cell_id)
    solution = radial_eigensolve(coeffs, cell_id=cell_id)
    k = stiffness(solution, cell_id=cell_id)
    m = consistent_mass(solution, coeffs.m0, cell_id=cell_id)
    lumped = lump_mass(m, cell_id=cell_id)
    return ElementMatrices(
        stiffness=k,
        consistent_mass=m,
        lumped_mass=lumped,
        omega_max=element_max_frequency(k, lumped),
        exponents=solution.exponents,
    )


__all__ = [
    "CellCoefficients",
    "ElementMatrices",
    "KernelError",
    "RadialSolution",
    "SurfaceElementGeometry",
    "SurfacePoint",
    "cell_coefficients",
    "consistent_mass",
    "elasticity_matrix",
    "element_matrices",
    "element_max_frequency",
    "lump_mass",
    "quadratic_residual",
    "radial_eigensolve",
    "shape_eval",
    "stiffness",
    "voigt_operator",
]
