"""Self-supervised synapse embedding from EM volumes via supervoxel positive pairs."""

__version__ = "0.1.0"
