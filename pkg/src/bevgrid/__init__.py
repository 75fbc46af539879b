"""Grid BEV encoder with deformable spatial and temporal attention, built on numpy."""

__version__ = "0.1.0"
