"""Numerical laboratory for mean field games of controls.

Solves the coupled equilibrium system on a grid, evaluates the three
monotonicity functionals (Lasry-Lions, displacement lambda-, anti-) on the
computed value function, checks the sufficient conditions on the reduced
Hamiltonian, and verifies the propagation of each monotonicity by direct
simulation of the variational particle system.
"""

__version__ = "0.1.0"
