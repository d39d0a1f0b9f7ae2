"""Learning planar-arm skills from demonstrations with an auto-conditioned
recurrent mixture-density state transition model, plus the surrounding
pipeline: demo generation, trajectory smoothing and torque-level tracking
through a learned inverse dynamics model."""

__version__ = "0.1.0"
