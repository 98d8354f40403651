"""Transportation mode identification from GPS trajectories.

Joint change-point and per-segment mode regression over kinematic
features (speed, acceleration, jerk), with a pure-numpy training stack.
"""

__version__ = "0.1.0"
