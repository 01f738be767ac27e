"""Segment-based place recognition and loop-closure detection for 3D point clouds."""
__version__ = "0.1.0"
