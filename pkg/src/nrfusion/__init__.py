"""Non-rigid RGB-D reconstruction on a deformable TSDF grid."""

from .camera import Frame, Intrinsics, read_frames, write_sequence
from .config import Config
from .pipeline import Reconstructor, reconstruct
from .volume import DeformableVolume, GlobalPose, create_grid, load_volume, save_volume

__version__ = "0.1.0"

__all__ = ["Frame", "Intrinsics", "read_frames", "write_sequence", "Config", "Reconstructor",
           "reconstruct", "DeformableVolume", "GlobalPose", "create_grid", "load_volume",
           "save_volume"]
