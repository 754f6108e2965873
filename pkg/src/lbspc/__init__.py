"""Registration-free statistical process control for triangle meshes via
the Laplace-Beltrami spectrum."""

__version__ = "0.1.0"
