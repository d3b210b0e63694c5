"""Operando microscopy toolkit: phase-field simulation, image corruption and denoising,
material-law recovery, and STXM, neutron and optical analysis pipelines."""

__version__ = "0.1.0"

__all__ = ["__version__"]
