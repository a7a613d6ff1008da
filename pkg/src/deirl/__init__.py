"""Excitable integral reinforcement learning (EIRL/dEIRL) for affine nonlinear plants.

Submodules
----------
symops      symmetric vectorization, bilinear form, compression matrix, trajectory integrals
lincontrol  Lyapunov/Riccati solvers, Kleinman iteration, linearization, closed-loop maps
simcore     excitation signals, integrator augmentation, closed-loop simulation, step metrics
eirl        regression assembly and the single/multi-loop learning driver
hsv         winged-cone hypersonic vehicle longitudinal model
evalharness study configuration, evaluation drivers and the command line
"""

__version__ = "0.1.0"
