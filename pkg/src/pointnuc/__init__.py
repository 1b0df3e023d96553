"""Point-supervised nuclei instance segmentation with dynamic CAM pseudo labels."""

__version__ = "0.1.0"
