"""Neural RF SLAM laboratory.

Unsupervised joint positioning and environment mapping from synthetic
channel state information: exact image-source ray tracing, OFDM CSI
synthesis, MUSIC super-resolution delay extraction, encoder-decoder
training with set-matching losses, and evaluation up to isometry.
"""

from .geometry import C, Scene, Wall, Isometry, rectangle_room, box_room

__all__ = ["C", "Scene", "Wall", "Isometry", "rectangle_room", "box_room"]

__version__ = "0.1.0"
