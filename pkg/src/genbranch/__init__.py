"""Genealogy-valued branching processes: ultrametric measure states, particle
simulators, polynomial test functions, coalescent duals and verification checks."""

__version__ = "0.1.0"
