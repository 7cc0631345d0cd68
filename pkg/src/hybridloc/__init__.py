"""Hybrid localisation: a sparse variational GP pose regressor seeding an
NDT-based Monte Carlo particle filter, plus the synthetic-world harness used
to exercise the full pipeline at desk scale."""

__version__ = "0.1.0"

from .geom import Pose, PoseDelta  # noqa: F401
