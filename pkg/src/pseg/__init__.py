"""Few-shot segmentation of machining features in CAD point clouds."""

__version__ = "0.1.0"
