"""Preprocessed sensor frames: keypoints plus binary descriptors."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import Intrinsics, MonoKeypoint, StereoKeypoint

DESCRIPTOR_BYTES = 32


class SensorKind(str, Enum):
    STEREO = "stereo"
    RGBD = "rgbd"
    MONO = "mono"


@dataclass(eq=False)
class Frame:
    """One input frame.

    ``ur`` is NaN for monocular keypoints.  For RGB-D input it holds the
    virtual right coordinate computed from the measured depth.
    """

    index: int
    timestamp: float
    uv: np.ndarray
    ur: np.ndarray
    octave: np.ndarray
    descriptors: np.ndarray
    sensor: SensorKind = SensorKind.STEREO

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        self.ur = np.asarray(self.ur, dtype=float).reshape(-1)
        self.octave = np.asarray(self.octave, dtype=np.int64).reshape(-1)
        self.descriptors = np.asarray(self.descriptors, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
        n = len(self.uv)
        if not (len(self.ur) == len(self.octave) == len(self.descriptors) == n):
            raise ValueError("keypoint arrays differ in length")
        stereo = ~np.isnan(self.ur)
        if np.any(self.ur[stereo] >= self.uv[stereo, 0]):
            raise ValueError("stereo keypoints need uR < uL")

    def __len__(self):
        return len(self.uv)

    @property
    def is_stereo(self) -> np.ndarray:
        return ~np.isnan(self.ur)

    def depth(self, K: Intrinsics) -> np.ndarray:
        """Per-keypoint depth; NaN for monocular keypoints."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return K.bf / (self.uv[:, 0] - self.ur)

    def keypoint(self, i: int):
        if np.isnan(self.ur[i]):
            return MonoKeypoint(self.uv[i, 0], self.uv[i, 1], int(self.octave[i]))
        return StereoKeypoint(self.uv[i, 0], self.uv[i, 1], self.ur[i], int(self.octave[i]))

    def measurement(self, i: int) -> np.ndarray:
        return np.array([self.uv[i, 0], self.uv[i, 1], self.ur[i]])
