"""Surface extraction, mesh validation and decimation."""
from .mesh import (MeshError, MeshStats, TriangleMesh, icosphere, is_oriented, mesh_volume,
                   read_obj, surface_area, tetrahedron, torus, unit_cube, validate, write_obj)
from .marching_cubes import marching_cubes
from .decimate import DecimationWarning, decimate, simplify

__all__ = [
    "MeshError", "MeshStats", "TriangleMesh", "icosphere", "is_oriented", "mesh_volume",
    "read_obj", "surface_area", "tetrahedron", "torus", "unit_cube", "validate", "write_obj",
    "marching_cubes", "DecimationWarning", "decimate", "simplify",
]
