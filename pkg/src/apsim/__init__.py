"""Approximate probabilistic simulation of Markov decision processes.

Subpackages are imported on demand; see :mod:`apsim.cli` for the command
line entry point.
"""

__version__ = "0.1.0"
