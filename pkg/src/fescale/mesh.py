"""Finite-element geometry and kinematics shared by both scales.

Two-dimensional meshes of linear triangles (one quadrature point) and
bilinear quads (2x2 Gauss). The B-operator of an integration point maps the
element nodal displacements, interleaved node-major as (ux0, uy0, ux1, ...),
to the four displacement-gradient components (H11, H12, H21, H22).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fescale.errors import MeshQualityError, StructuralError
from fescale.linalg import SparseMatrix

TRI3 = "tri3"
QUAD4 = "quad4"

# parent coordinates and weights of the 2x2 Gauss rule on [-1, 1]^2
_GP = 1.0 / np.sqrt(3.0)
_QUAD_POINTS = np.array([[-_GP, -_GP], [_GP, -_GP], [_GP, _GP], [-_GP, _GP]])


@dataclass(frozen=True)
class ElementBlock:
    """Homogeneous group of elements of one kind."""

    kind: str
    connectivity: np.ndarray

    def __post_init__(self):
        conn = np.asarray(self.connectivity, dtype=np.int64)
        object.__setattr__(self, "connectivity", conn)
        expected = {TRI3: 3, QUAD4: 4}.get(self.kind)
        if expected is None:
            raise StructuralError(f"unknown element kind {self.kind!r}")
        if conn.ndim != 2 or conn.shape[1] != expected:
            raise StructuralError(f"{self.kind} connectivity must be (n, {expected})")

    @property
    def n_elements(self):
        return self.connectivity.shape[0]

    @property
    def n_quad(self):
        return 1 if self.kind == TRI3 else 4


@dataclass(frozen=True)
class Mesh:
    """Nodes in the reference configuration plus element blocks."""

    nodes: np.ndarray
    blocks: tuple[ElementBlock, ...]
    dim: int = 2

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise StructuralError("nodes must be an (n, 2) array")
        for block in self.blocks:
            if block.connectivity.size and block.connectivity.max() >= len(nodes):
                raise StructuralError("connectivity index exceeds node count")
            if block.connectivity.size and block.connectivity.min() < 0:
                raise StructuralError("negative connectivity index")

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_dofs(self):
        return 2 * self.n_nodes

    @property
    def n_elements(self):
        return sum(b.n_elements for b in self.blocks)

    @property
    def n_integration_points(self):
        return sum(b.n_elements * b.n_quad for b in self.blocks)

    def element_nodes(self, element):
        """Connectivity row of a global element index."""
        for block in self.blocks:
            if element < block.n_elements:
                return block.connectivity[element]
            element -= block.n_elements
        raise IndexError("element index out of range")


@dataclass(frozen=True)
class IntegrationPoint:
    """One quadrature point with its area-scaled weight and B-operator."""

    element: int
    local_index: int
    weight: float
    b_operator: np.ndarray
    coordinates: np.ndarray
    dofs: np.ndarray = field(repr=False, default=None)


def _tri3_arrays(conn, nodes, first_element):
    """Batched weights/B/coordinates for a linear-triangle block."""
    xy = nodes[conn]                      # (e, 3, 2)
    d1 = xy[:, 1] - xy[:, 0]
    d2 = xy[:, 2] - xy[:, 0]
    detj = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    bad = np.flatnonzero(detj <= 0.0)
    if bad.size:
        raise MeshQualityError(first_element + bad[0], detj[bad[0]])
    area = 0.5 * detj
    # constant shape-function gradients: dN/dx via the inverse Jacobian
    dndx = np.empty((len(conn), 3, 2))
    dndx[:, 1, 0] = d2[:, 1] / detj
    dndx[:, 1, 1] = -d2[:, 0] / detj
    dndx[:, 2, 0] = -d1[:, 1] / detj
    dndx[:, 2, 1] = d1[:, 0] / detj
    dndx[:, 0] = -dndx[:, 1] - dndx[:, 2]
    b = np.zeros((len(conn), 1, 4, 6))
    for a in range(3):
        b[:, 0, 0, 2 * a] = dndx[:, a, 0]      # H11 = dux/dx
        b[:, 0, 1, 2 * a] = dndx[:, a, 1]      # H12 = dux/dy
        b[:, 0, 2, 2 * a + 1] = dndx[:, a, 0]  # H21 = duy/dx
        b[:, 0, 3, 2 * a + 1] = dndx[:, a, 1]  # H22 = duy/dy
    w = area.reshape(-1, 1)
    coords = xy.mean(axis=1).reshape(-1, 1, 2)
    return w, b, coords


def _quad4_arrays(conn, nodes, first_element):
    """Batched weights/B/coordinates for a bilinear-quad block (2x2 Gauss)."""
    xy = nodes[conn]                      # (e, 4, 2)
    n_el = len(conn)
    w = np.empty((n_el, 4))
    b = np.zeros((n_el, 4, 4, 8))
    coords = np.empty((n_el, 4, 2))
    for q, (xi, eta) in enumerate(_QUAD_POINTS):
        shape = 0.25 * np.array([
            (1 - xi) * (1 - eta), (1 + xi) * (1 - eta),
            (1 + xi) * (1 + eta), (1 - xi) * (1 + eta),
        ])
        dn = 0.25 * np.array([
            [-(1 - eta), -(1 - xi)],
            [(1 - eta), -(1 + xi)],
            [(1 + eta), (1 + xi)],
            [-(1 + eta), (1 - xi)],
        ])                                # (4 nodes, 2 parent dirs)
        jac = np.einsum("ar,ena->enr", dn, np.swapaxes(xy, 1, 2))  # (e, 2, 2): dx_n/dxi_r
        detj = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        bad = np.flatnonzero(detj <= 0.0)
        if bad.size:
            raise MeshQualityError(first_element + bad[0], detj[bad[0]])
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1] / detj
        inv[:, 0, 1] = -jac[:, 0, 1] / detj
        inv[:, 1, 0] = -jac[:, 1, 0] / detj
        inv[:, 1, 1] = jac[:, 0, 0] / detj
        dndx = np.einsum("ar,erx->eax", dn, inv)  # (e, 4 nodes, 2)
        w[:, q] = detj  # unit Gauss weights on the 2x2 rule
        for a in range(4):
            b[:, q, 0, 2 * a] = dndx[:, a, 0]
            b[:, q, 1, 2 * a] = dndx[:, a, 1]
            b[:, q, 2, 2 * a + 1] = dndx[:, a, 0]
            b[:, q, 3, 2 * a + 1] = dndx[:, a, 1]
        coords[:, q] = shape @ xy
    return w, b, coords


def block_operators(mesh: Mesh, block: ElementBlock, first_element: int):
    """Stacked (weights, B, coordinates) arrays for one block.

    Shapes: weights (n_el, n_q), B (n_el, n_q, 4, 2*n_en),
    coordinates (n_el, n_q, 2). Weights include the Jacobian determinant.
    """
    if block.kind == TRI3:
        return _tri3_arrays(block.connectivity, mesh.nodes, first_element)
    return _quad4_arrays(block.connectivity, mesh.nodes, first_element)


def element_dofs(conn):
    """Interleaved node-major DOF indices per element: (n_el, 2*n_en)."""
    n_el, n_en = conn.shape
    dofs = np.empty((n_el, 2 * n_en), dtype=np.int64)
    dofs[:, 0::2] = 2 * conn
    dofs[:, 1::2] = 2 * conn + 1
    return dofs


def build_integration_points(mesh: Mesh):
    """All integration points of a mesh, element-major then quadrature-local.

    Raises :class:`MeshQualityError` naming the first element with a
    non-positive Jacobian determinant.
    """
    points = []
    first = 0
    for block in mesh.blocks:
        w, b, coords = block_operators(mesh, block, first)
        dofs = element_dofs(block.connectivity)
        for e in range(block.n_elements):
            for q in range(block.n_quad):
                points.append(IntegrationPoint(
                    element=first + e,
                    local_index=q,
                    weight=float(w[e, q]),
                    b_operator=b[e, q],
                    coordinates=coords[e, q],
                    dofs=dofs[e],
                ))
        first += block.n_elements
    return points


def structure_of_stiffness(mesh: Mesh, dof_map: np.ndarray) -> SparseMatrix:
    """Sparsity pattern of the stiffness after constraint mapping.

    ``dof_map`` sends each mesh DOF to its reduced equation number or to -1
    for eliminated DOFs; slave DOFs map onto their master's equation. The
    pattern holds (i, j) iff reduced DOFs i and j meet in some element, and
    is structurally symmetric by construction. Values are zero-initialized.
    """
    dof_map = np.asarray(dof_map, dtype=np.int64)
    if len(dof_map) != mesh.n_dofs:
        raise StructuralError("dof_map must cover every mesh DOF")
    n_red = int(dof_map.max()) + 1 if dof_map.size and dof_map.max() >= 0 else 0
    rows, cols = [], []
    for block in mesh.blocks:
        red = dof_map[element_dofs(block.connectivity)]  # (n_el, 2n)
        n = red.shape[1]
        ri = np.repeat(red, n, axis=1).ravel()
        ci = np.tile(red, (1, n)).ravel()
        keep = (ri >= 0) & (ci >= 0)
        rows.append(ri[keep])
        cols.append(ci[keep])
    rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    return SparseMatrix.from_coo(n_red, rows, cols)


def total_area(mesh: Mesh):
    """Sum of integration weights = total reference area."""
    area = 0.0
    first = 0
    for block in mesh.blocks:
        w, _, _ = block_operators(mesh, block, first)
        area += float(w.sum())
        first += block.n_elements
    return area
