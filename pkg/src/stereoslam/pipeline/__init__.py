"""Tracking, local mapping, loop closing and full BA wired into one system."""
from .config import SystemConfig
from .fullba import FullBAController, merge_full_ba
from .loop import LoopCloser, LoopEvent, close_loop, essential_graph_edges, validate_loop
from .mapping import LocalMapper, fuse_points_into
from .system import FrameRecord, System, database_from_map
from .timing import Timings
from .tracking import BootstrapFailed, Mode, Status, Tracker, TrackResult, bootstrap

__all__ = [
    "BootstrapFailed", "FrameRecord", "FullBAController", "LocalMapper", "LoopCloser", "LoopEvent",
    "Mode", "Status", "System", "SystemConfig", "Timings", "Tracker", "TrackResult", "bootstrap",
    "close_loop", "database_from_map", "essential_graph_edges", "fuse_points_into", "merge_full_ba",
    "validate_loop",
]
