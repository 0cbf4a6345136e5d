"""Built-in desk-scale benchmark geometries and micro structures.

The shipped geometries are desk-scale analogues of the reference problem
classes (notched plate under shear, notched beam in bending, plate with a
hole in tension), not replicas: meshes are structured at reduced density,
and curved features (pores, holes, notches) are pixelated by removing
elements whose centroid falls inside the feature. Unreferenced nodes are
dropped and elements renumbered.
"""

from __future__ import annotations

import numpy as np

from fescale.errors import ConfigError
from fescale.material import ElasticParams, PlasticParams
from fescale.mesh import QUAD4, TRI3, ElementBlock, Mesh
from fescale.rve import MicroModel


def grid_quads(nx, ny, lx=1.0, ly=1.0):
    """Structured bilinear-quad grid on [0, lx] x [0, ly]."""
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    nodes = np.array([[x, y] for y in ys for x in xs])
    conn = []
    for j in range(ny):
        for i in range(nx):
            n0 = j * (nx + 1) + i
            conn.append([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1])
    return nodes, np.array(conn, dtype=np.int64)


def grid_triangles(nx, ny, lx=1.0, ly=1.0):
    """Structured linear-triangle grid with alternating cell diagonals."""
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    nodes = np.array([[x, y] for y in ys for x in xs])
    conn = []
    for j in range(ny):
        for i in range(nx):
            n0 = j * (nx + 1) + i
            n1, n2, n3 = n0 + 1, n0 + nx + 2, n0 + nx + 1
            if (i + j) % 2 == 0:
                conn.append([n0, n1, n2])
                conn.append([n0, n2, n3])
            else:
                conn.append([n0, n1, n3])
                conn.append([n1, n2, n3])
    return nodes, np.array(conn, dtype=np.int64)


def drop_elements(nodes, conn, remove_mask, aux=None):
    """Remove flagged elements, drop orphan nodes, renumber the rest.

    ``aux`` is an optional per-element array filtered alongside.
    """
    keep = ~np.asarray(remove_mask, dtype=bool)
    conn = conn[keep]
    used = np.unique(conn)
    remap = np.full(len(nodes), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    out = (nodes[used], remap[conn])
    if aux is not None:
        return out + (np.asarray(aux)[keep],)
    return out


def centroids(nodes, conn):
    return nodes[conn].mean(axis=1)


def _in_disc(points, center, radius):
    return np.linalg.norm(points - np.asarray(center), axis=1) < radius


# ---------------------------------------------------------------------------
# micro structures


def rve_single_element(mat=None):
    """Unit square meshed with one bilinear quad: zero fluctuation DOFs."""
    mat = mat or ElasticParams(E=100.0, nu=0.3)
    nodes, conn = grid_quads(1, 1)
    mesh = Mesh(nodes, [ElementBlock(QUAD4, conn)])
    return MicroModel(mesh, (mat,), np.zeros(1, dtype=np.int64))


def rve_laminate(mat_bottom, mat_top, n=4):
    """Two equal horizontal strips stacked in y (layer normal = y)."""
    nodes, conn = grid_quads(n, n)
    mesh = Mesh(nodes, [ElementBlock(QUAD4, conn)])
    mat_ids = (centroids(nodes, conn)[:, 1] >= 0.5).astype(np.int64)
    return MicroModel(mesh, (mat_bottom, mat_top), mat_ids)


def rve_porous_quad(mat, n=8, pore_fraction=0.5):
    """Porous unit square, quad mesh; pore diameter = pore_fraction * edge."""
    nodes, conn = grid_quads(n, n)
    remove = _in_disc(centroids(nodes, conn), (0.5, 0.5), pore_fraction / 2.0)
    nodes, conn = drop_elements(nodes, conn, remove)
    mesh = Mesh(nodes, [ElementBlock(QUAD4, conn)])
    return MicroModel(mesh, (mat,), np.zeros(len(conn), dtype=np.int64))


def rve_porous_tri(mat, n=8, pore_fraction=0.5):
    """Porous unit square, alternating-triangle mesh."""
    nodes, conn = grid_triangles(n, n)
    remove = _in_disc(centroids(nodes, conn), (0.5, 0.5), pore_fraction / 2.0)
    nodes, conn = drop_elements(nodes, conn, remove)
    mesh = Mesh(nodes, [ElementBlock(TRI3, conn)])
    return MicroModel(mesh, (mat,), np.zeros(len(conn), dtype=np.int64))


def rve_composite(mat_matrix, mat_inclusion, n=8):
    """Elastic-plastic matrix with a central pore and two stiff inclusions."""
    nodes, conn = grid_quads(n, n)
    cent = centroids(nodes, conn)
    remove = _in_disc(cent, (0.5, 0.5), 0.14)
    lo, hi = 1.0 / n, 3.0 / n
    incl_a = (cent[:, 0] > lo) & (cent[:, 0] < hi) & (cent[:, 1] > 1 - hi) & (cent[:, 1] < 1 - lo)
    incl_b = (cent[:, 0] > 1 - hi) & (cent[:, 0] < 1 - lo) & (cent[:, 1] > lo) & (cent[:, 1] < hi)
    mat_ids = np.where(incl_a | incl_b, 1, 0)
    nodes, conn, mat_ids = drop_elements(nodes, conn, remove, mat_ids)
    mesh = Mesh(nodes, [ElementBlock(QUAD4, conn)])
    return MicroModel(mesh, (mat_matrix, mat_inclusion), mat_ids)


# ---------------------------------------------------------------------------
# macro geometries (returned as mesh + named node/edge sets for the models)


def _edge_nodes(nodes, axis, value, tol=1e-9):
    return np.flatnonzero(np.abs(nodes[:, axis] - value) <= tol)


def macro_notched_shear(n=8):
    """Square plate, edge slit at mid-height of the left side; sheared top.

    Returns (mesh, sets) with node sets 'bottom' (fully fixed) and 'top'
    (driven horizontally, held vertically).
    """
    nodes, conn = grid_triangles(n, n)
    cent = centroids(nodes, conn)
    cell = 1.0 / n
    row = (n // 2) * cell  # slit along a mesh line band
    notch = (cent[:, 0] < 0.35) & (np.abs(cent[:, 1] - row - 0.5 * cell) < 0.5 * cell)
    nodes, conn = drop_elements(nodes, conn, notch)
    mesh = Mesh(nodes, [ElementBlock(TRI3, conn)])
    sets = {"bottom": _edge_nodes(nodes, 1, 0.0), "top": _edge_nodes(nodes, 1, 1.0)}
    return mesh, sets


def macro_notched_beam(nx=12, ny=3):
    """Cantilever beam with a bottom notch at mid-span; end load applied.

    Returns (mesh, sets) with 'left' (clamped) and 'load_node' (top right
    corner, vertical point load).
    """
    lx, ly = 4.0, 1.0
    nodes, conn = grid_triangles(nx, ny, lx, ly)
    cent = centroids(nodes, conn)
    cellx, celly = lx / nx, ly / ny
    notch = (np.abs(cent[:, 0] - lx / 2) < 0.5 * cellx) & (cent[:, 1] < celly)
    nodes, conn = drop_elements(nodes, conn, notch)
    mesh = Mesh(nodes, [ElementBlock(TRI3, conn)])
    corner = np.flatnonzero(
        (np.abs(nodes[:, 0] - lx) <= 1e-9) & (np.abs(nodes[:, 1] - ly) <= 1e-9)
    )
    sets = {"left": _edge_nodes(nodes, 0, 0.0), "load_node": int(corner[0])}
    return mesh, sets


def macro_plate_hole(n=10):
    """Square plate with a central pixelated hole, stretched vertically.

    Returns (mesh, sets) with 'bottom' (held vertically, one corner pinned)
    and 'top' (driven vertically).
    """
    nodes, conn = grid_triangles(n, n)
    remove = _in_disc(centroids(nodes, conn), (0.5, 0.5), 0.25)
    nodes, conn = drop_elements(nodes, conn, remove)
    mesh = Mesh(nodes, [ElementBlock(TRI3, conn)])
    sets = {"bottom": _edge_nodes(nodes, 1, 0.0), "top": _edge_nodes(nodes, 1, 1.0)}
    return mesh, sets


# ---------------------------------------------------------------------------
# two-scale benchmark models


def _fix_nodes(dirichlet, nodes, ux=None, uy=None):
    for nd in np.atleast_1d(nodes):
        if ux is not None:
            dirichlet.append((2 * int(nd), float(ux)))
        if uy is not None:
            dirichlet.append((2 * int(nd) + 1, float(uy)))


def _elastic_variant(model):
    from fescale.rve import MicroModel

    mats = tuple(
        m.elastic if isinstance(m, PlasticParams) else m for m in model.materials
    )
    return MicroModel(model.mesh, mats, model.mat_ids)


def model_notched_shear(scheme, n_macro=6, n_micro=6, u_end=0.03, elastic_only=False):
    """Notched plate under shear-like loading, porous plastic micro structure."""
    from fescale.macro import TwoScaleModel

    mesh, sets = macro_notched_shear(n_macro)
    micro = rve_porous_tri(default_materials("notched-shear"), n=n_micro)
    if elastic_only:
        micro = _elastic_variant(micro)
    dirichlet = []
    _fix_nodes(dirichlet, sets["bottom"], ux=0.0, uy=0.0)
    _fix_nodes(dirichlet, sets["top"], ux=u_end, uy=0.0)
    return TwoScaleModel(
        macro_mesh=mesh, dirichlet=dirichlet, point_loads=[],
        micro_model=micro, scheme=scheme,
        control_dof=2 * int(sets["top"][0]),
        reaction_dofs=np.array([2 * int(n) for n in sets["top"]]),
        name="notched-shear",
    )


def model_notched_bending(scheme, nx=10, ny=3, n_micro=6, f_end=-0.25, elastic_only=False):
    """Notched cantilever beam, force driven; composite micro structure."""
    from fescale.macro import TwoScaleModel

    mesh, sets = macro_notched_beam(nx, ny)
    matrix = default_materials("notched-bending-2d")
    inclusion = ElasticParams(E=1000.0, nu=0.3)
    micro = rve_composite(matrix, inclusion, n=n_micro)
    if elastic_only:
        micro = _elastic_variant(micro)
    dirichlet = []
    _fix_nodes(dirichlet, sets["left"], ux=0.0, uy=0.0)
    load_dof = 2 * sets["load_node"] + 1
    return TwoScaleModel(
        macro_mesh=mesh, dirichlet=dirichlet, point_loads=[(load_dof, f_end)],
        micro_model=micro, scheme=scheme,
        control_dof=load_dof, reaction_dofs=np.array([load_dof]),
        name="notched-bending-2d",
    )


def model_plate_hole(scheme, n_macro=6, n_micro=6, u_end=0.015, elastic_only=False):
    """Plate with a hole under tension, porous quad micro structure."""
    from fescale.macro import TwoScaleModel

    mesh, sets = macro_plate_hole(n_macro)
    micro = rve_porous_quad(default_materials("plate-hole-tension"), n=n_micro)
    if elastic_only:
        micro = _elastic_variant(micro)
    dirichlet = []
    _fix_nodes(dirichlet, sets["bottom"], uy=0.0)
    corner = sets["bottom"][np.argmin(mesh.nodes[sets["bottom"], 0])]
    _fix_nodes(dirichlet, [corner], ux=0.0)
    _fix_nodes(dirichlet, sets["top"], uy=u_end)
    return TwoScaleModel(
        macro_mesh=mesh, dirichlet=dirichlet, point_loads=[],
        micro_model=micro, scheme=scheme,
        control_dof=2 * int(sets["top"][0]) + 1,
        reaction_dofs=np.array([2 * int(n) + 1 for n in sets["top"]]),
        name="plate-hole-tension",
    )


BENCHMARK_BUILDERS = {
    "notched-shear": model_notched_shear,
    "notched-bending-2d": model_notched_bending,
    "plate-hole-tension": model_plate_hole,
}

# Shipped suite settings: tight tolerances keep the schemes comparable point
# by point, and a pinned increment size keeps their load steps aligned (the
# adaptive growth rule is capped by dt_max = dt_initial).
BENCH_SOLVER_DEFAULTS = {
    "notched-shear": {"tol_macro": 1e-8, "tol_micro": 1e-8,
                      "dt_initial": 0.05, "dt_max": 0.05, "dt_min": 1e-3},
    "notched-bending-2d": {"tol_macro": 1e-8, "tol_micro": 1e-8,
                           "dt_initial": 0.125, "dt_max": 0.125, "dt_min": 1e-3},
    "plate-hole-tension": {"tol_macro": 1e-8, "tol_micro": 1e-8,
                           "dt_initial": 0.05, "dt_max": 0.05, "dt_min": 1e-3},
}

BENCH_SIZE_DEFAULTS = {
    "notched-shear": {"n_macro": 5, "n_micro": 5},
    "notched-bending-2d": {"nx": 10, "ny": 3, "n_micro": 6},
    "plate-hole-tension": {"n_macro": 6, "n_micro": 8},
}


def build_benchmark(name, scheme, elastic_only=False, **overrides):
    """Instantiate a named benchmark model for one scheme."""
    if name not in BENCHMARK_BUILDERS:
        raise ConfigError(f"unknown benchmark {name!r}; options: {sorted(BENCHMARK_BUILDERS)}")
    return BENCHMARK_BUILDERS[name](scheme, elastic_only=elastic_only, **overrides)


# ---------------------------------------------------------------------------
# named registries used by the run configuration


def micro_by_name(name, params):
    """Resolve a named built-in micro structure."""
    builders = {
        "single-element": lambda: rve_single_element(params["material"]),
        "porous-square": lambda: rve_porous_tri(params["material"], n=params.get("n", 6)),
        "porous-square-quad": lambda: rve_porous_quad(params["material"], n=params.get("n", 8)),
        "laminate": lambda: rve_laminate(params["material"], params["material2"], n=params.get("n", 4)),
        "composite": lambda: rve_composite(params["material"], params["material2"], n=params.get("n", 8)),
    }
    if name not in builders:
        raise ConfigError(f"unknown built-in RVE {name!r}; options: {sorted(builders)}")
    return builders[name]()


def default_materials(benchmark):
    """Reference material parameters of the shipped benchmark analogues."""
    if benchmark == "plate-hole-tension":
        return PlasticParams(ElasticParams(E=200.0, nu=0.3), sigma0=1.2, h=1.3)
    return PlasticParams(ElasticParams(E=100.0, nu=0.3), sigma0=1.0, h=2.0)
