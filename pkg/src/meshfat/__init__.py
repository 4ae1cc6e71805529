"""Body-composition regression from voxel volumes via surface meshes and GNNs."""

__version__ = "0.1.0"
