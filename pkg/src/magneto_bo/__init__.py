"""Superadiabatic projections, effective Hamiltonians and semiclassical dynamics
for molecules in a constant magnetic field."""

__version__ = "0.1.0"
