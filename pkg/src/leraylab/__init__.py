"""leraylab: controlled Picard time stepping for Leray-form Navier-Stokes systems."""

__version__ = "0.1.0"
