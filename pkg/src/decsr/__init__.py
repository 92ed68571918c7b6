"""decsr: rediscovery of discrete variational physical models.

Evolves strongly-typed expression trees built from discrete
exterior-calculus operators, solves each candidate as a potential energy,
and scores it against datasets for the Poisson, elastic-rod bending and
linear-elasticity benchmarks.
"""

__version__ = "0.1.0"
