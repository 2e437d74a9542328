"""Two-weight fractional singular integral testing toolkit.

Dyadic grids, atomic measures, Poisson/Muckenhoupt constants, accretive
martingale calculus, corona decompositions, energy functionals and a
verification harness, all at desk scale on finite atomic weight pairs.
"""

__version__ = "0.1.0"
