"""Parallel-in-time integration of Hamiltonian lattices: parareal, Procrustes corrections, NN coarse solvers."""

__version__ = "0.3.0"
