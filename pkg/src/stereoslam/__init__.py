"""Keyframe-based stereo / RGB-D SLAM back-end."""
__version__ = "0.1.0"
