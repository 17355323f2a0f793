"""Tunable pipeline settings."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from ..optim import LMConfig
from ..worldmap import KeyframePolicy


@dataclass
class SystemConfig:
    policy: KeyframePolicy = field(default_factory=KeyframePolicy)
    lost_inliers: int = 30            # below this many motion-only BA inliers -> Lost
    search_radius: float = 15.0       # pixels at octave 0
    fusion_radius: float = 5.0       # pixels at octave 0 for duplicate fusion
    hamming_max: int = 50
    ratio: float = 0.9
    local_map_neighbors: int = 10     # covisible keyframes added per tracked keyframe
    local_map_max_kfs: int = 40
    triangulation_neighbors: int = 10
    fusion_neighbors: int = 10
    theta_ess: int = 100              # essential-graph covisibility cutoff
    loop_min_inliers: int = 20        # RANSAC support for a loop candidate
    loop_min_matches: int = 40        # projected matches required after validation
    loop_kf_gap: int = 10             # keyframes since last loop before detecting again
    reloc_min_inliers: int = 50
    keyframe_queue: int = 8           # bounded tracking -> mapping handoff
    local_ba: LMConfig = field(default_factory=lambda: LMConfig(max_iterations=20, relative_tolerance=1e-6))
    full_ba: LMConfig = field(default_factory=lambda: LMConfig(max_iterations=40))
    ba_steps_per_frame: int = 1000    # deterministic mode: LM iterations of full BA per frame
    loop_closing: bool = True
    vocab_k: int = 10
    vocab_L: int = 3
    vocab_seed: int = 0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)
