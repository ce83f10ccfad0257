"""Learning to scoop floating objects from algorithmic demonstrations.

A toy floating-object world, a motion-adaptive heuristic scooping expert,
demonstration datasets, from-scratch numpy diffusion models for the
pre-scoop pose and the closed-loop scooping policy, a point-cloud
centre/radius regressor and an evaluation harness.
"""

__version__ = "0.1.0"
