"""Federated learning of cross-client causal structure over linear
state-space systems.

Clients run Kalman filters on their own measurements and learn a linear
correction to their state estimates; a server learns the off-diagonal
blocks of the joint state matrix from gradient exchange with the clients.
The package also ships the analysis toolkit used to verify the scheme:
a unified affine recurrence over the joint parameters, a centralized
oracle benchmark, differential-privacy mechanisms for both communication
directions, and a CLI for reproducible experiments.
"""

from .ssm import BlockSpec, BlockSystem, Trajectory, simulate, steady_state_covariance

__all__ = [
    "BlockSpec",
    "BlockSystem",
    "Trajectory",
    "simulate",
    "steady_state_covariance",
]

__version__ = "0.1.0"
