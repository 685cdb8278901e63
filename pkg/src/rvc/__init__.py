"""Robust value computation for perception-based control loops.

Submodules
----------
grid         rectilinear grids, interpolation, field I/O
models       dynamics, controller arms, error boxes, closed-loop wiring
bounds       reachable control sets under bounded estimate error
hamiltonian  worst-case Hamiltonian arms and dissipation coefficients
solver       variational-inequality marching and value-field queries
analysis     tube membership, volumes, gain sweeps, dark-time budgets
rollout      worst-case and Monte Carlo trajectory checks
presets      shipped case-study configurations
cli          command-line front end
"""

__version__ = "0.1.0"
