"""Map-conditioned multi-window rectified-flow world synthesis on sparse voxel lattices."""

__version__ = "0.1.0"
