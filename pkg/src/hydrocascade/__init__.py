"""Three-time-scale control of a river/dam cascade governed by 1D Saint-Venant
equations: finite-volume simulation, offline schedule catalogs, meso-scale
particle ADP with a filter trust-region SQCQP, and real-time iteration."""

__version__ = "0.1.0"
