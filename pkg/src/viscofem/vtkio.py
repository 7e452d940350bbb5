"""VTK legacy ASCII writer (unstructured grid, linear tetrahedra).

Point data is attached at mesh vertices; higher-order spaces pass the
vertex slice of their nodal fields. Field values are written with
shortest round-trip float formatting so identical runs produce
byte-identical files.
"""
from __future__ import annotations

import numpy as np

from .mesh import Mesh

_VTK_TET = 10


def write_vtk(mesh: Mesh, path, point_vectors=None, point_scalars=None,
              title="viscofem output"):
    """Write the mesh and optional vertex fields.

    point_vectors: dict name -> (n_vertices, 3) array
    point_scalars: dict name -> (n_vertices,) array
    """
    point_vectors = point_vectors or {}
    point_scalars = point_scalars or {}
    nv = mesh.n_vertices
    nt = mesh.n_tets
    for name, arr in point_vectors.items():
        if np.shape(arr) != (nv, 3):
            raise ValueError(f"vector field {name!r} must have shape ({nv}, 3)")
    for name, arr in point_scalars.items():
        if np.shape(arr) != (nv,):
            raise ValueError(f"scalar field {name!r} must have shape ({nv},)")

    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {nv} double",
    ]
    for p in mesh.vertices:
        lines.append(f"{p[0]!r} {p[1]!r} {p[2]!r}")
    lines.append(f"CELLS {nt} {5 * nt}")
    for tet in mesh.tets:
        lines.append(f"4 {tet[0]} {tet[1]} {tet[2]} {tet[3]}")
    lines.append(f"CELL_TYPES {nt}")
    lines.extend([str(_VTK_TET)] * nt)
    if point_vectors or point_scalars:
        lines.append(f"POINT_DATA {nv}")
        for name, arr in point_vectors.items():
            lines.append(f"VECTORS {name} double")
            for v in np.asarray(arr, dtype=float):
                lines.append(f"{v[0]!r} {v[1]!r} {v[2]!r}")
        for name, arr in point_scalars.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            for v in np.asarray(arr, dtype=float):
                lines.append(f"{v!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk_counts(path):
    """Parse point/cell counts back from a legacy VTK file (validation)."""
    n_points = n_cells = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("POINTS"):
                n_points = int(line.split()[1])
            elif line.startswith("CELLS"):
                n_cells = int(line.split()[1])
    return n_points, n_cells
